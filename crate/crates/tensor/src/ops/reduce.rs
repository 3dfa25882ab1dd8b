use super::elementwise::sigmoid_stable;
use crate::error::{fmt_shape, Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

impl Ctx<'_> {
    /// Sum of all elements, as a one-element tensor. Accumulated in f64.
    pub fn sum_all(&self, x: &Var) -> Result<Var> {
        let total: f64 = x.value().as_slice().iter().map(|&v| v as f64).sum();
        let y = Tensor::scalar(total as f32);
        let shape = x.shape().to_vec();
        Ok(self.register(
            y,
            &[x],
            Box::new(move |g| {
                let gv = g.as_slice()[0];
                vec![Some(Tensor::full(&shape, gv))]
            }),
        ))
    }

    /// Arithmetic mean of all elements, as a one-element tensor.
    pub fn mean_all(&self, x: &Var) -> Result<Var> {
        let n = x.value().numel();
        let total: f64 = x.value().as_slice().iter().map(|&v| v as f64).sum();
        let y = Tensor::scalar((total / n as f64) as f32);
        let shape = x.shape().to_vec();
        Ok(self.register(
            y,
            &[x],
            Box::new(move |g| {
                let gv = g.as_slice()[0] / n as f32;
                vec![Some(Tensor::full(&shape, gv))]
            }),
        ))
    }

    /// Mean binary cross-entropy of logits against constant targets in
    /// [0, 1]. Computed in the log-sum-exp form that never exponentiates a
    /// positive argument, so arbitrarily large logits stay finite.
    pub fn bce_with_logits_mean(&self, logits: &Var, targets: &Tensor) -> Result<Var> {
        if logits.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "bce_with_logits_mean",
                expected: fmt_shape(logits.shape()),
                got: fmt_shape(targets.shape()),
            });
        }
        let n = logits.value().numel();
        let mut total = 0.0f64;
        for (&x, &y) in logits.value().as_slice().iter().zip(targets.as_slice()) {
            let term = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            total += term as f64;
        }
        let out = Tensor::scalar((total / n as f64) as f32);

        let logits_saved = logits.value().clone();
        let targets_saved = targets.clone();
        Ok(self.register(
            out,
            &[logits],
            Box::new(move |g| {
                let scale = g.as_slice()[0] / n as f32;
                let gx = super::elementwise::zip(&logits_saved, &targets_saved, |x, y| {
                    (sigmoid_stable(x) - y) * scale
                });
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_all_and_mean_all_agree() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::from_fn(&[3, 4], |i| i as f32));
        let s = cx.sum_all(&x).unwrap();
        let m = cx.mean_all(&x).unwrap();
        assert_eq!(s.value().scalar_value().unwrap(), 66.0);
        assert_eq!(m.value().scalar_value().unwrap(), 5.5);
    }

    #[test]
    fn bce_at_zero_logit_is_ln_two() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::zeros(&[4]));
        let t = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let loss = cx.bce_with_logits_mean(&x, &t).unwrap();
        let expected = std::f32::consts::LN_2;
        assert!((loss.value().scalar_value().unwrap() - expected).abs() <= 1e-6);
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::from_vec(&[4], vec![500.0, -500.0, 80.0, -80.0]).unwrap());
        let t = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = cx.bce_with_logits_mean(&x, &t).unwrap();
        assert!(loss.value().all_finite());
        // Confident wrong answers on half the entries: mean near 40.
        assert!((loss.value().scalar_value().unwrap() - 40.0).abs() <= 1.0);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target_over_n() {
        let graph = crate::GradGraph::new();
        let cx = Ctx::traced(&graph);
        let logits = vec![0.7, -1.3, 2.0];
        let targets = vec![1.0, 0.0, 0.5];
        let x = cx.input(Tensor::from_vec(&[3], logits.clone()).unwrap());
        let t = Tensor::from_vec(&[3], targets.clone()).unwrap();
        let loss = cx.bce_with_logits_mean(&x, &t).unwrap();
        let store = graph.backward(&loss).unwrap();
        let g = store.grad_of(&x).unwrap();
        for i in 0..3 {
            let expected = (sigmoid_stable(logits[i]) - targets[i]) / 3.0;
            assert!((g.as_slice()[i] - expected).abs() <= 1e-7);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let x = Tensor::from_fn(&[2, 5], |i| ((i * 41 + 3) % 11) as f32 * 0.4 - 2.0);
        let t = Tensor::from_fn(&[2, 5], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| cx.bce_with_logits_mean(v, &t),
            &x,
            2e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }
}
