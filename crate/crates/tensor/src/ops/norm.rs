use crate::error::{fmt_shape, Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

/// Result of a batch normalization pass. `batch_mean` / `batch_var` carry the
/// statistics actually used for normalization when `training` was set, so the
/// caller can fold them into running averages; they are `None` in eval mode.
pub struct BatchNormOutput {
    pub out: Var,
    pub batch_mean: Option<Tensor>,
    pub batch_var: Option<Tensor>,
}

fn check_channel_vec(context: &'static str, v: &[usize], c: usize) -> Result<()> {
    if v != [c] {
        return Err(TensorError::ShapeMismatch {
            context,
            expected: format!("{c}"),
            got: fmt_shape(v),
        });
    }
    Ok(())
}

impl Ctx<'_> {
    /// Channel-wise batch normalization over NCHW input.
    ///
    /// Training mode normalizes with the biased statistics of the current
    /// batch and reports them in the output; eval mode normalizes with the
    /// provided running statistics, which are treated as constants.
    pub fn batch_norm(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f32,
        training: bool,
    ) -> Result<BatchNormOutput> {
        let (n, c, h, w) = match x.shape() {
            &[n, c, h, w] => (n, c, h, w),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "batch_norm",
                    expected: "4 (NCHW)",
                    got: s.len(),
                })
            }
        };
        check_channel_vec("batch_norm gamma", gamma.shape(), c)?;
        check_channel_vec("batch_norm beta", beta.shape(), c)?;
        check_channel_vec("batch_norm running_mean", running_mean.shape(), c)?;
        check_channel_vec("batch_norm running_var", running_var.shape(), c)?;

        let (mean, var) = if training {
            channel_stats(x.value(), n, c, h, w)
        } else {
            (running_mean.clone(), running_var.clone())
        };

        let xs = x.value().as_slice();
        let gv = gamma.value().as_slice();
        let bv = beta.value().as_slice();
        let ms = mean.as_slice();
        let vs = var.as_slice();
        let plane = h * w;
        let mut y = vec![0.0f32; xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (vs[ch] + eps).sqrt();
                let (m, g, b) = (ms[ch], gv[ch], bv[ch]);
                let base = (s * c + ch) * plane;
                for i in 0..plane {
                    y[base + i] = (xs[base + i] - m) * inv * g + b;
                }
            }
        }
        let out = Tensor::from_vec(x.shape(), y)?;

        let x_saved = x.value().clone();
        let gamma_saved = gamma.value().clone();
        let mean_saved = mean.clone();
        let var_saved = var.clone();
        let backward = Box::new(move |g: &Tensor| {
            let gs = g.as_slice();
            let xs = x_saved.as_slice();
            let gamma = gamma_saved.as_slice();
            let ms = mean_saved.as_slice();
            let vs = var_saved.as_slice();
            let m_count = (n * plane) as f64;
            let mut gx = vec![0.0f32; xs.len()];
            let mut ggamma = vec![0.0f32; c];
            let mut gbeta = vec![0.0f32; c];
            for ch in 0..c {
                let inv = 1.0 / ((vs[ch] + eps) as f64).sqrt();
                let mean_ch = ms[ch] as f64;
                let mut sum_g = 0.0f64;
                let mut sum_g_xhat = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in 0..plane {
                        let gi = gs[base + i] as f64;
                        let xhat = (xs[base + i] as f64 - mean_ch) * inv;
                        sum_g += gi;
                        sum_g_xhat += gi * xhat;
                    }
                }
                ggamma[ch] = sum_g_xhat as f32;
                gbeta[ch] = sum_g as f32;
                let gam = gamma[ch] as f64;
                if training {
                    let mean_g = sum_g / m_count;
                    let mean_g_xhat = sum_g_xhat / m_count;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for i in 0..plane {
                            let gi = gs[base + i] as f64;
                            let xhat = (xs[base + i] as f64 - mean_ch) * inv;
                            gx[base + i] =
                                (gam * inv * (gi - mean_g - xhat * mean_g_xhat)) as f32;
                        }
                    }
                } else {
                    let k = (gam * inv) as f32;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for i in 0..plane {
                            gx[base + i] = gs[base + i] * k;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(x_saved.shape(), gx).unwrap()),
                Some(Tensor::from_vec(&[c], ggamma).unwrap()),
                Some(Tensor::from_vec(&[c], gbeta).unwrap()),
            ]
        });

        let out = self.register(out, &[x, gamma, beta], backward);
        Ok(BatchNormOutput {
            out,
            batch_mean: training.then(|| mean),
            batch_var: training.then(|| var),
        })
    }

    /// Per-row normalization of [T, D] token matrices with learned scale and
    /// shift of width D.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
        let (t, d) = match x.shape() {
            &[t, d] => (t, d),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "layer_norm",
                    expected: "2 (tokens x width)",
                    got: s.len(),
                })
            }
        };
        check_channel_vec("layer_norm gamma", gamma.shape(), d)?;
        check_channel_vec("layer_norm beta", beta.shape(), d)?;

        let xs = x.value().as_slice();
        let gv = gamma.value().as_slice();
        let bv = beta.value().as_slice();
        let mut y = vec![0.0f32; xs.len()];
        let mut row_stats = Vec::with_capacity(t);
        for r in 0..t {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let dv = v as f64 - mean;
                    dv * dv
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            row_stats.push((mean, inv));
            for i in 0..d {
                let xhat = (row[i] as f64 - mean) * inv;
                y[r * d + i] = (xhat as f32) * gv[i] + bv[i];
            }
        }
        let out = Tensor::from_vec(&[t, d], y)?;

        let x_saved = x.value().clone();
        let gamma_saved = gamma.value().clone();
        Ok(self.register(
            out,
            &[x, gamma, beta],
            Box::new(move |g| {
                let gs = g.as_slice();
                let xs = x_saved.as_slice();
                let gamma = gamma_saved.as_slice();
                let mut gx = vec![0.0f32; xs.len()];
                let mut ggamma = vec![0.0f64; d];
                let mut gbeta = vec![0.0f64; d];
                for r in 0..t {
                    let (mean, inv) = row_stats[r];
                    let row = &xs[r * d..(r + 1) * d];
                    let grow = &gs[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0f64;
                    let mut mean_gh_xhat = 0.0f64;
                    for i in 0..d {
                        let xhat = (row[i] as f64 - mean) * inv;
                        let gh = grow[i] as f64 * gamma[i] as f64;
                        mean_gh += gh;
                        mean_gh_xhat += gh * xhat;
                        ggamma[i] += grow[i] as f64 * xhat;
                        gbeta[i] += grow[i] as f64;
                    }
                    mean_gh /= d as f64;
                    mean_gh_xhat /= d as f64;
                    for i in 0..d {
                        let xhat = (row[i] as f64 - mean) * inv;
                        let gh = grow[i] as f64 * gamma[i] as f64;
                        gx[r * d + i] = (inv * (gh - mean_gh - xhat * mean_gh_xhat)) as f32;
                    }
                }
                vec![
                    Some(Tensor::from_vec(x_saved.shape(), gx).unwrap()),
                    Some(Tensor::from_vec(
                        &[d],
                        ggamma.into_iter().map(|v| v as f32).collect(),
                    )
                    .unwrap()),
                    Some(Tensor::from_vec(
                        &[d],
                        gbeta.into_iter().map(|v| v as f32).collect(),
                    )
                    .unwrap()),
                ]
            }),
        ))
    }
}

/// Biased per-channel mean and variance over batch and spatial axes,
/// accumulated in f64.
pub(crate) fn channel_stats(
    x: &Tensor,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Tensor, Tensor) {
    let xs = x.as_slice();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                sum += xs[base + i] as f64;
            }
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let d = xs[base + i] as f64 - m;
                sq += d * d;
            }
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count) as f32;
    }
    (
        Tensor::from_vec(&[c], mean).unwrap(),
        Tensor::from_vec(&[c], var).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u32) -> Tensor {
        let mut state = seed;
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            (state >> 8) as f32 / (1u32 << 24) as f32 * 4.0 - 2.0
        })
    }

    #[test]
    fn training_output_has_zero_mean_unit_variance_per_channel() {
        let cx = Ctx::inference();
        let x = cx.input(pseudo(&[3, 4, 5, 5], 41));
        let gamma = cx.input(Tensor::ones(&[4]));
        let beta = cx.input(Tensor::zeros(&[4]));
        let out = cx
            .batch_norm(
                &x,
                &gamma,
                &beta,
                &Tensor::zeros(&[4]),
                &Tensor::ones(&[4]),
                1e-5,
                true,
            )
            .unwrap();
        let y = out.out.value();
        let (mean, var) = channel_stats(y, 3, 4, 5, 5);
        for ch in 0..4 {
            assert!(mean.as_slice()[ch].abs() <= 1e-5);
            assert!((var.as_slice()[ch] - 1.0).abs() <= 1e-3);
        }
        assert!(out.batch_mean.is_some() && out.batch_var.is_some());
    }

    #[test]
    fn eval_mode_applies_running_statistics() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::full(&[1, 2, 2, 2], 3.0));
        let gamma = cx.input(Tensor::from_vec(&[2], vec![2.0, 1.0]).unwrap());
        let beta = cx.input(Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
        let rm = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
        let rv = Tensor::from_vec(&[2], vec![4.0, 1.0]).unwrap();
        let out = cx
            .batch_norm(&x, &gamma, &beta, &rm, &rv, 0.0, false)
            .unwrap();
        // channel 0: (3-1)/2*2 + 0.5 = 2.5; channel 1: (3-3)/1*1 - 0.5 = -0.5
        assert!((out.out.value().at(&[0, 0, 1, 1]) - 2.5).abs() <= 1e-6);
        assert!((out.out.value().at(&[0, 1, 0, 0]) + 0.5).abs() <= 1e-6);
        assert!(out.batch_mean.is_none());
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::full(&[3, 8], 7.25));
        let gamma = cx.input(Tensor::ones(&[8]));
        let beta = cx.input(Tensor::from_fn(&[8], |i| i as f32 * 0.1));
        let y = cx.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for r in 0..3 {
            for i in 0..8 {
                assert!((y.value().at(&[r, i]) - i as f32 * 0.1).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_normalized() {
        let cx = Ctx::inference();
        let x = cx.input(pseudo(&[6, 16], 11));
        let gamma = cx.input(Tensor::ones(&[16]));
        let beta = cx.input(Tensor::zeros(&[16]));
        let y = cx.layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for r in 0..6 {
            let row: Vec<f32> = (0..16).map(|i| y.value().at(&[r, i])).collect();
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn batch_norm_train_gradient_matches_finite_differences() {
        let x = pseudo(&[2, 3, 4, 4], 401);
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| {
                let gamma = cx.input(Tensor::from_vec(&[3], vec![1.2, 0.8, -0.5]).unwrap());
                let beta = cx.input(Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap());
                let out = cx.batch_norm(
                    v,
                    &gamma,
                    &beta,
                    &Tensor::zeros(&[3]),
                    &Tensor::ones(&[3]),
                    1e-5,
                    true,
                )?;
                Ok(out.out)
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn batch_norm_eval_gradient_matches_finite_differences() {
        let x = pseudo(&[2, 3, 3, 3], 103);
        let rm = Tensor::from_vec(&[3], vec![0.3, -0.2, 0.0]).unwrap();
        let rv = Tensor::from_vec(&[3], vec![1.5, 0.7, 2.0]).unwrap();
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| {
                let gamma = cx.input(Tensor::from_vec(&[3], vec![1.2, 0.8, -0.5]).unwrap());
                let beta = cx.input(Tensor::zeros(&[3]));
                let out = cx.batch_norm(v, &gamma, &beta, &rm, &rv, 1e-5, false)?;
                Ok(out.out)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = pseudo(&[4, 12], 107);
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| {
                let gamma = cx.input(pseudo(&[12], 109));
                let beta = cx.input(pseudo(&[12], 113));
                cx.layer_norm(v, &gamma, &beta, 1e-5)
            },
            &x,
            3e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn layer_norm_gamma_gradient_matches_finite_differences() {
        let gamma = pseudo(&[10], 127);
        let x = pseudo(&[5, 10], 131);
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| {
                let xv = cx.input(x.clone());
                let beta = cx.input(Tensor::zeros(&[10]));
                cx.layer_norm(&xv, v, &beta, 1e-5)
            },
            &gamma,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }
}
