use std::fmt;
use std::sync::Arc;

use crate::error::{fmt_shape, Result, TensorError};

pub const MAX_RANK: usize = 4;

/// Dense row-major f32 tensor of rank 1 to 4. Cheap to clone: the buffer is
/// shared until a mutation forces a copy.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if data.len() != numel {
            return Err(TensorError::InvalidArgument {
                context: "Tensor::from_vec",
                message: format!(
                    "shape {} needs {} elements, buffer has {}",
                    fmt_shape(shape),
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = check_shape(shape).expect("invalid tensor shape");
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(f(i));
        }
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn extent(&self, dim: usize) -> usize {
        self.shape[dim]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Mutable access to the buffer, copying first if it is shared.
    pub fn make_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Returns the single element of a one-element tensor.
    pub fn scalar_value(&self) -> Option<f32> {
        if self.numel() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                context: "reshape",
                expected: format!("{} elements", self.numel()),
                got: format!("{} ({} elements)", fmt_shape(shape), numel),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element by multi-index. Convenience for tests and small kernels; hot
    /// loops index the slice directly.
    pub fn at(&self, index: &[usize]) -> f32 {
        debug_assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(6).copied().collect();
        let ellipsis = if self.numel() > 6 { ", .." } else { "" };
        write!(
            f,
            "Tensor[{}] {:?}{}",
            fmt_shape(&self.shape),
            preview,
            ellipsis
        )
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::RankMismatch {
            context: "tensor shape",
            expected: "1 to 4",
            got: shape.len(),
        });
    }
    let mut numel: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(TensorError::InvalidArgument {
                context: "tensor shape",
                message: format!("zero extent in {}", fmt_shape(shape)),
            });
        }
        numel = numel.checked_mul(e).ok_or(TensorError::InvalidArgument {
            context: "tensor shape",
            message: format!("element count overflow in {}", fmt_shape(shape)),
        })?;
    }
    Ok(numel)
}
