use crate::error::{Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

impl Ctx<'_> {
    /// Row-wise softmax of a [T, K] matrix. Max subtraction keeps the result
    /// finite for logits of any magnitude.
    pub fn softmax_rows(&self, x: &Var) -> Result<Var> {
        let (t, k) = match x.shape() {
            &[t, k] => (t, k),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "softmax_rows",
                    expected: "2 (rows x logits)",
                    got: s.len(),
                })
            }
        };
        let xs = x.value().as_slice();
        let mut y = vec![0.0f32; xs.len()];
        for r in 0..t {
            let row = &xs[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let out = &mut y[r * k..(r + 1) * k];
            let mut sum = 0.0f64;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let out = Tensor::from_vec(&[t, k], y)?;

        let y_saved = out.clone();
        Ok(self.register(
            out,
            &[x],
            Box::new(move |g| {
                let gs = g.as_slice();
                let ys = y_saved.as_slice();
                let mut gx = vec![0.0f32; gs.len()];
                for r in 0..t {
                    let yrow = &ys[r * k..(r + 1) * k];
                    let grow = &gs[r * k..(r + 1) * k];
                    let dot: f64 = yrow
                        .iter()
                        .zip(grow)
                        .map(|(&yv, &gv)| yv as f64 * gv as f64)
                        .sum();
                    let out = &mut gx[r * k..(r + 1) * k];
                    for i in 0..k {
                        out[i] = yrow[i] * (grow[i] - dot as f32);
                    }
                }
                vec![Some(Tensor::from_vec(&[t, k], gx).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_uniform_rows() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::from_vec(&[1, 2], vec![1000.0, 1000.0]).unwrap());
        let y = cx.softmax_rows(&x).unwrap();
        assert_eq!(y.value().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn rows_sum_to_one_for_huge_logits() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::from_fn(&[4, 9], |i| {
            ((i * 7919 + 13) % 2001) as f32 - 1000.0
        }));
        let y = cx.softmax_rows(&x).unwrap();
        assert!(y.value().all_finite());
        for r in 0..4 {
            let sum: f32 = (0..9).map(|i| y.value().at(&[r, i])).sum();
            assert!((sum - 1.0).abs() <= 1e-5, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn dominant_logit_takes_all_mass() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::from_vec(&[1, 3], vec![0.0, 100.0, 0.0]).unwrap());
        let y = cx.softmax_rows(&x).unwrap();
        assert!((y.value().at(&[0, 1]) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::from_fn(&[4, 5], |i| ((i * 31 + 7) % 13) as f32 * 0.3 - 0.6);
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| cx.softmax_rows(v),
            &x,
            2e-2,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }
}
