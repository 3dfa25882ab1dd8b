use crate::error::{Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

fn expect_nchw(context: &'static str, v: &Var) -> Result<(usize, usize, usize, usize)> {
    match v.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(TensorError::RankMismatch {
            context,
            expected: "4 (NCHW)",
            got: s.len(),
        }),
    }
}

/// Shared kernel: per output cell, the window is [h0, h1) x [w0, w1) on the
/// input plane. Records the flat index of the first maximum for the backward
/// scatter, which keeps tie handling deterministic.
fn max_pool_windows(
    x: &Tensor,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    window: impl Fn(usize, usize) -> (usize, usize, usize, usize),
) -> (Tensor, Vec<u32>) {
    let xs = x.as_slice();
    let mut y = vec![0.0f32; n * c * out_h * out_w];
    let mut argmax = vec![0u32; y.len()];
    let mut o = 0;
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let (h0, h1, w0, w1) = window(oh, ow);
                let mut best = f32::NEG_INFINITY;
                let mut best_at = base + h0 * w + w0;
                for ih in h0..h1 {
                    let row = base + ih * w;
                    for iw in w0..w1 {
                        let v = xs[row + iw];
                        if v > best {
                            best = v;
                            best_at = row + iw;
                        }
                    }
                }
                y[o] = best;
                argmax[o] = best_at as u32;
                o += 1;
            }
        }
    }
    (
        Tensor::from_vec(&[n, c, out_h, out_w], y).expect("pool output shape"),
        argmax,
    )
}

fn pool_backward(argmax: Vec<u32>, input_len: usize, input_shape: Vec<usize>) -> crate::graph::BackwardFn {
    Box::new(move |g: &Tensor| {
        let mut gx = vec![0.0f32; input_len];
        for (&at, &gv) in argmax.iter().zip(g.as_slice()) {
            gx[at as usize] += gv;
        }
        vec![Some(Tensor::from_vec(&input_shape, gx).unwrap())]
    })
}

impl Ctx<'_> {
    /// Max pooling with a fixed square kernel and stride, floor semantics for
    /// the output extent.
    pub fn max_pool(&self, x: &Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = expect_nchw("max_pool", x)?;
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                context: "max_pool",
                message: "kernel and stride must be at least 1".into(),
            });
        }
        if kernel > h || kernel > w {
            return Err(TensorError::InvalidArgument {
                context: "max_pool",
                message: format!("kernel {kernel} exceeds input {h}x{w}"),
            });
        }
        let out_h = (h - kernel) / stride + 1;
        let out_w = (w - kernel) / stride + 1;
        let (y, argmax) = max_pool_windows(x.value(), n, c, h, w, out_h, out_w, |oh, ow| {
            (
                oh * stride,
                oh * stride + kernel,
                ow * stride,
                ow * stride + kernel,
            )
        });
        let backward = pool_backward(argmax, x.value().numel(), x.shape().to_vec());
        Ok(self.register(y, &[x], backward))
    }

    /// Max pooling onto a fixed output grid. Window i along an axis of length
    /// L covers [floor(i*L/T), floor((i+1)*L/T)), which tiles the input
    /// exactly. Requires target extents between 1 and the input extents.
    pub fn adaptive_max_pool(&self, x: &Var, target_h: usize, target_w: usize) -> Result<Var> {
        let (n, c, h, w) = expect_nchw("adaptive_max_pool", x)?;
        if target_h == 0 || target_w == 0 {
            return Err(TensorError::InvalidArgument {
                context: "adaptive_max_pool",
                message: "target extents must be at least 1".into(),
            });
        }
        if target_h > h || target_w > w {
            return Err(TensorError::InvalidArgument {
                context: "adaptive_max_pool",
                message: format!("target {target_h}x{target_w} exceeds input {h}x{w}"),
            });
        }
        let (y, argmax) = max_pool_windows(x.value(), n, c, h, w, target_h, target_w, |oh, ow| {
            (
                oh * h / target_h,
                (oh + 1) * h / target_h,
                ow * w / target_w,
                (ow + 1) * w / target_w,
            )
        });
        let backward = pool_backward(argmax, x.value().numel(), x.shape().to_vec());
        Ok(self.register(y, &[x], backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GradGraph;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_window_takes_maximum() {
        let cx = Ctx::inference();
        let x = cx.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = cx.max_pool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.value().as_slice(), &[4.0]);
    }

    #[test]
    fn fixed_pool_matches_window_oracle() {
        // 3x3 kernel, stride 2 over a 7x7 ramp: window maxima sit at the
        // bottom-right corner of each window.
        let cx = Ctx::inference();
        let x = cx.input(Tensor::from_fn(&[1, 1, 7, 7], |i| i as f32));
        let y = cx.max_pool(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let expected = [16.0, 18.0, 20.0, 30.0, 32.0, 34.0, 44.0, 46.0, 48.0];
        assert_eq!(y.value().as_slice(), &expected);
    }

    #[test]
    fn adaptive_windows_tile_the_input() {
        // 29 -> 12 must partition the axis into windows of size 2 and 3.
        let h = 29;
        let target = 12;
        let mut covered = vec![false; h];
        for i in 0..target {
            let (lo, hi) = (i * h / target, (i + 1) * h / target);
            assert!(lo < hi, "window {i} is empty");
            for slot in &mut covered[lo..hi] {
                assert!(!*slot, "window {i} overlaps");
                *slot = true;
            }
        }
        assert!(covered.into_iter().all(|v| v));
    }

    #[test]
    fn adaptive_pool_identity_when_target_equals_input() {
        let cx = Ctx::inference();
        let x = Tensor::from_fn(&[1, 2, 5, 4], |i| (i as f32 * 0.37).sin());
        let v = cx.input(x.clone());
        let y = cx.adaptive_max_pool(&v, 5, 4).unwrap();
        assert!(y.value().bitwise_eq(&x));
    }

    #[test]
    fn zero_target_rejected() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(cx.adaptive_max_pool(&x, 0, 2).is_err());
        assert!(cx.adaptive_max_pool(&x, 2, 0).is_err());
    }

    #[test]
    fn target_larger_than_input_rejected() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(cx.adaptive_max_pool(&x, 5, 4).is_err());
    }

    #[test]
    fn backward_routes_gradient_to_argmax_only() {
        let graph = GradGraph::new();
        let cx = Ctx::traced(&graph);
        let x = cx.input(t(&[1, 1, 2, 2], &[1.0, 9.0, 3.0, 4.0]));
        let y = cx.max_pool(&x, 2, 2).unwrap();
        let loss = cx.sum_all(&y).unwrap();
        let store = graph.backward(&loss).unwrap();
        let g = store.grad_of(&x).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn tie_goes_to_first_element_in_scan_order() {
        let graph = GradGraph::new();
        let cx = Ctx::traced(&graph);
        let x = cx.input(t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
        let y = cx.max_pool(&x, 2, 2).unwrap();
        let loss = cx.sum_all(&y).unwrap();
        let store = graph.backward(&loss).unwrap();
        let g = store.grad_of(&x).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
