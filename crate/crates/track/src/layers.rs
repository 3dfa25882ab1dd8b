use std::cell::RefCell;
use std::collections::HashMap;

use prl_tensor::{init, Ctx, Parameter, Result as TensorResult, Tensor, Var};
use rand::Rng;

use crate::error::{Result, TrackError};

/// Pulls a named tensor out of a checkpoint map, verifying its shape.
pub(crate) fn take_tensor(
    map: &mut HashMap<String, Tensor>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor> {
    let tensor = map
        .remove(name)
        .ok_or_else(|| TrackError::Config(format!("checkpoint is missing tensor {name}")))?;
    if tensor.shape() != shape {
        return Err(TrackError::Config(format!(
            "checkpoint tensor {name} has shape {:?}, expected {:?}",
            tensor.shape(),
            shape
        )));
    }
    Ok(tensor)
}

/// Visitor shared by all layers, used to enumerate parameters in a stable
/// construction order for optimizers, serialization, and gradient lookups.
pub(crate) type Visitor<'a, 'p> = dyn FnMut(&'p Parameter) + 'a;
pub(crate) type VisitorMut<'a> = dyn FnMut(&mut Parameter) + 'a;

/// 2-D convolution layer. Convolutions feeding a batch norm carry no bias;
/// the norm's shift would absorb it and the dead parameter would fail any
/// gradient-flow audit.
pub struct Conv2d {
    weight: Parameter,
    bias: Option<Parameter>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Conv2d {
        let fan_in = cin * kernel * kernel;
        let weight = init::kaiming_uniform(rng, &[cout, cin, kernel, kernel], fan_in);
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout]))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> TensorResult<Var> {
        let w = cx.bind(&self.weight);
        let b = self.bias.as_ref().map(|p| cx.bind(p));
        cx.conv2d(x, &w, b.as_ref(), self.stride, self.padding)
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Channel-wise batch normalization with running statistics. The running
/// buffers are updated only on traced training passes, so evaluation and
/// finite-difference probes never perturb them.
pub struct BatchNorm2d {
    gamma: Parameter,
    beta: Parameter,
    running_mean: RefCell<Tensor>,
    running_var: RefCell<Tensor>,
    momentum: f32,
    eps: f32,
    name: String,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: RefCell::new(Tensor::zeros(&[channels])),
            running_var: RefCell::new(Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> TensorResult<Var> {
        let gamma = cx.bind(&self.gamma);
        let beta = cx.bind(&self.beta);
        let mean = self.running_mean.borrow().clone();
        let var = self.running_var.borrow().clone();
        let out = cx.batch_norm(x, &gamma, &beta, &mean, &var, self.eps, cx.is_training())?;
        if cx.is_training() && cx.is_traced() {
            if let (Some(bm), Some(bv)) = (&out.batch_mean, &out.batch_var) {
                self.blend(&self.running_mean, bm);
                self.blend(&self.running_var, bv);
            }
        }
        Ok(out.out)
    }

    fn blend(&self, buffer: &RefCell<Tensor>, batch: &Tensor) {
        let mut slot = buffer.borrow_mut();
        let mut next = slot.clone();
        let dst = next.make_mut();
        for (d, b) in dst.iter_mut().zip(batch.as_slice()) {
            *d = *d * (1.0 - self.momentum) + b * self.momentum;
        }
        *slot = next;
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub(crate) fn buffers(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((
            format!("{}.running_mean", self.name),
            self.running_mean.borrow().clone(),
        ));
        out.push((
            format!("{}.running_var", self.name),
            self.running_var.borrow().clone(),
        ));
    }

    pub(crate) fn load_buffers(&mut self, map: &mut HashMap<String, Tensor>) -> Result<()> {
        let shape = &[self.gamma.value().extent(0)][..];
        *self.running_mean.borrow_mut() =
            take_tensor(map, &format!("{}.running_mean", self.name), shape)?;
        *self.running_var.borrow_mut() =
            take_tensor(map, &format!("{}.running_var", self.name), shape)?;
        Ok(())
    }
}

/// Convolution, batch norm, ReLU: the projection block both fusion
/// regulators end in.
pub struct Cnr {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Cnr {
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Cnr {
        Cnr {
            conv: Conv2d::new(rng, &format!("{name}.conv"), cin, cout, kernel, 1, 0, false),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> TensorResult<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, &y)?;
        cx.relu(&y)
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }

    pub(crate) fn buffers(&self, out: &mut Vec<(String, Tensor)>) {
        self.bn.buffers(out);
    }

    pub(crate) fn load_buffers(&mut self, map: &mut HashMap<String, Tensor>) -> Result<()> {
        self.bn.load_buffers(map)
    }
}

/// Dense projection over token rows.
pub struct Linear {
    weight: Parameter,
    bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                init::kaiming_uniform(rng, &[din, dout], din),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> TensorResult<Var> {
        let w = cx.bind(&self.weight);
        let b = cx.bind(&self.bias);
        cx.linear(x, &w, Some(&b))
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        f(&self.weight);
        f(&self.bias);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-token normalization with a learned affine.
pub struct LayerNorm {
    gamma: Parameter,
    beta: Parameter,
    eps: f32,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> TensorResult<Var> {
        let gamma = cx.bind(&self.gamma);
        let beta = cx.bind(&self.beta);
        cx.layer_norm(x, &gamma, &beta, self.eps)
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
