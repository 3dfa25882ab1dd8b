use crate::tensor::Tensor;

/// Trainable tensor with a unique name and an accumulated gradient. Names
/// double as keys in weight containers and gradient lookups, so they must be
/// unique within a model.
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn set_value(&mut self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.value.shape(),
            "parameter {}: value shape changed",
            self.name
        );
        self.value = value;
    }

    pub fn set_grad(&mut self, grad: Tensor) {
        assert_eq!(
            grad.shape(),
            self.value.shape(),
            "parameter {}: gradient shape mismatch",
            self.name
        );
        self.grad = grad;
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }

    /// In-place update `value -= step`, used by optimizers.
    pub fn apply_step(&mut self, step: &[f32]) {
        let dst = self.value.make_mut();
        assert_eq!(dst.len(), step.len());
        for (v, s) in dst.iter_mut().zip(step) {
            *v -= s;
        }
    }
}
