use prl_tensor::gradcheck::{
    grad_check_directional, grad_check_probes, grad_check_probes_norm, sample_probes,
};
use prl_tensor::{Ctx, Result as TensorResult, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coarse::{CoarseModule, GatingController};
use crate::config::{HmgConfig, ModelConfig};
use crate::error::{Result, TrackError};
use crate::heads::{HeadOutput, Heads};
use crate::hmg::HmgBlock;
use crate::model::Model;
use crate::train::{build_labels, sample_loss};

/// Outcome of one finite-difference check: the relative error of the probed
/// gradient entries against the shared tolerance. Primitive operators are
/// held to the worst single entry; the composite blocks are compared as
/// whole probed vectors, since 32-bit central differences on their
/// near-zero entries are pure roundoff while a genuine backward defect
/// shifts the entire vector; the deepest compositions are held to the
/// derivative along the gradient's own direction, the one projection whose
/// signal stands above the quantization of their values.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub error: f32,
    pub tolerance: f32,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

/// Relative-error tolerance shared by every entry in the suite.
pub const SUITE_TOLERANCE: f32 = 1e-3;

fn adapt<T>(r: Result<T>) -> TensorResult<T> {
    r.map_err(|e| match e {
        TrackError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            context: "gradient suite",
            message: other.to_string(),
        },
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn constant(shape: &[usize], value: f32) -> Tensor {
    Tensor::from_fn(shape, |_| value)
}

/// Each projection channel reads a single input channel with a positive
/// weight, so the value order within a channel survives the projection (and
/// the batch normalization behind it, which is affine per channel).
fn diagonal_projection(cin: usize, cout: usize) -> Tensor {
    Tensor::from_fn(&[cout, cin, 1, 1], |i| {
        if i % cin == (i / cin) % cin {
            0.8
        } else {
            0.0
        }
    })
}

/// Features with one cell per pooling window boosted far above its
/// neighbors in every channel: cells whose row and column are `offset`
/// modulo two. Probing an element by the finite-difference step then cannot
/// flip any pooling argmax, which would otherwise put a kink between the
/// two evaluation points. Offset 0 marks the disjoint windows of an
/// even-to-half adaptive pool; offset 1 marks the window centers of a 3x3
/// stride-2 pool.
fn peaked_features(rng: &mut ChaCha8Rng, n: usize, c: usize, side: usize, offset: usize) -> Tensor {
    let base = random_tensor(rng, &[n, c, side, side], 1.0);
    Tensor::from_fn(&[n, c, side, side], |i| {
        let h = (i / side) % side;
        let w = i % side;
        let boosted = h % 2 == offset && w % 2 == offset;
        base.as_slice()[i] + if boosted { 3.0 } else { 0.0 }
    })
}

/// Values kept clear of zero so a rectifier probed on them stays on one
/// side of its kink throughout the central difference.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let base = random_tensor(rng, shape, 1.0);
    Tensor::from_fn(shape, |i| {
        let v = base.as_slice()[i];
        if v < 0.0 {
            v - 0.3
        } else {
            v + 0.3
        }
    })
}

/// Wraps a map as x -> f(x) - f(x0) with the baseline taken at the probe
/// point. The gradient is untouched, but the values the central difference
/// subtracts sit near zero instead of near the map's offset, so the
/// difference is not quantized away by the offset's floating-point spacing.
fn centered<F>(f: F, at: &Tensor) -> TensorResult<impl Fn(&Ctx, &Var) -> TensorResult<Var>>
where
    F: Fn(&Ctx, &Var) -> TensorResult<Var>,
{
    let cx0 = Ctx::inference().with_training(true);
    let base = f(&cx0, &cx0.input(at.clone()))?.value().clone();
    Ok(move |cx: &Ctx, x: &Var| {
        let y = f(cx, x)?;
        cx.sub(&y, &cx.input(base.clone()))
    })
}

#[derive(Clone, Copy)]
enum Metric {
    MaxElement,
    Norm,
}

struct Suite {
    reports: Vec<CheckReport>,
}

impl Suite {
    fn run<F>(
        &mut self,
        name: &str,
        metric: Metric,
        f: F,
        input: &Tensor,
        step: f32,
        probes: usize,
    ) -> Result<()>
    where
        F: Fn(&Ctx, &Var) -> TensorResult<Var>,
    {
        let seed = 0xC0DE ^ self.reports.len() as u64;
        let idx = sample_probes(input.numel(), probes, seed);
        let error = match metric {
            Metric::MaxElement => grad_check_probes(&f, input, step, &idx)?,
            Metric::Norm => grad_check_probes_norm(&f, input, step, &idx)?,
        };
        self.reports.push(CheckReport {
            name: name.to_string(),
            error,
            tolerance: SUITE_TOLERANCE,
        });
        Ok(())
    }

    fn run_directional<F>(&mut self, name: &str, f: F, input: &Tensor, step: f32) -> Result<()>
    where
        F: Fn(&Ctx, &Var) -> TensorResult<Var>,
    {
        let error = grad_check_directional(&f, input, step)?;
        self.reports.push(CheckReport {
            name: name.to_string(),
            error,
            tolerance: SUITE_TOLERANCE,
        });
        Ok(())
    }
}

/// Checks reverse-mode gradients against central differences for each core
/// operator and for the composite regulator, fusion, and head blocks at
/// reduced sizes, probing a sample of input elements each.
///
/// Central differences are only trustworthy where the function is smooth
/// between the two evaluation points, so the kinked operators are probed at
/// conditioned points: rectifier inputs are kept away from zero (raised
/// normalization offsets and gate biases inside the composites), pooling
/// windows are given decisive maxima, and the pooled template projection is
/// diagonal so the maxima survive the normalization in front of the pool.
/// Gradient correctness does not depend on where the weights sit, so the
/// conditioned points probe the same backward code as random ones.
pub fn run_gradient_suite() -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut suite = Suite {
        reports: Vec::new(),
    };

    {
        let w = random_tensor(&mut rng, &[4, 3, 3, 3], 0.6);
        let b = random_tensor(&mut rng, &[4], 0.3);
        let x = random_tensor(&mut rng, &[2, 3, 8, 8], 1.2);
        suite.run(
            "conv2d 3x3 with bias",
            Metric::MaxElement,
            move |cx, x| {
                let wv = cx.input(w.clone());
                let bv = cx.input(b.clone());
                cx.conv2d(x, &wv, Some(&bv), 1, 1)
            },
            &x,
            1e-2,
            14,
        )?;
    }

    {
        let x = signed_away_from_zero(&mut rng, &[3, 4, 6, 6]);
        suite.run(
            "relu clear of its kink",
            Metric::MaxElement,
            |cx, x| cx.relu(x),
            &x,
            1e-2,
            14,
        )?;
    }

    {
        let x = peaked_features(&mut rng, 2, 3, 9, 1);
        suite.run(
            "max pooling 3x3 stride 2",
            Metric::MaxElement,
            |cx, x| cx.max_pool(x, 3, 2),
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let x = peaked_features(&mut rng, 2, 3, 18, 0);
        suite.run(
            "adaptive max pooling",
            Metric::MaxElement,
            |cx, x| cx.adaptive_max_pool(x, 9, 9),
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let spread = random_tensor(&mut rng, &[3], 0.4);
        let gamma = Tensor::from_fn(&[3], |i| 1.0 + spread.as_slice()[i]);
        let beta = random_tensor(&mut rng, &[3], 0.5);
        let mean = Tensor::zeros(&[3]);
        let var = Tensor::ones(&[3]);
        let x = random_tensor(&mut rng, &[4, 3, 7, 7], 1.0);
        suite.run(
            "batch normalization, training statistics",
            Metric::MaxElement,
            move |cx, x| {
                let g = cx.input(gamma.clone());
                let b = cx.input(beta.clone());
                Ok(cx.batch_norm(x, &g, &b, &mean, &var, 1e-5, true)?.out)
            },
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let spread = random_tensor(&mut rng, &[16], 0.3);
        let gamma = Tensor::from_fn(&[16], |i| 1.0 + spread.as_slice()[i]);
        let beta = random_tensor(&mut rng, &[16], 0.5);
        let x = random_tensor(&mut rng, &[6, 16], 1.2);
        suite.run(
            "layer normalization",
            Metric::MaxElement,
            move |cx, x| {
                let g = cx.input(gamma.clone());
                let b = cx.input(beta.clone());
                cx.layer_norm(x, &g, &b, 1e-5)
            },
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let x = random_tensor(&mut rng, &[6, 10], 1.4);
        suite.run(
            "softmax over rows",
            Metric::MaxElement,
            |cx, x| {
                let scaled = cx.scale(x, 1.3)?;
                cx.softmax_rows(&scaled)
            },
            &x,
            1.2e-2,
            12,
        )?;
    }

    {
        let x = random_tensor(&mut rng, &[5, 9], 2.0);
        suite.run(
            "sigmoid",
            Metric::MaxElement,
            |cx, x| cx.sigmoid(x),
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let x = random_tensor(&mut rng, &[4, 8], 1.0);
        suite.run(
            "exponential",
            Metric::MaxElement,
            |cx, x| cx.exp(x),
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let k = random_tensor(&mut rng, &[6, 7], 0.8);
        let v = random_tensor(&mut rng, &[6, 4], 0.8);
        let x = random_tensor(&mut rng, &[5, 7], 1.0);
        suite.run(
            "matrix products",
            Metric::MaxElement,
            move |cx, x| {
                let scores = cx.matmul_tb(x, &cx.input(k.clone()))?;
                cx.matmul(&scores, &cx.input(v.clone()))
            },
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let x = random_tensor(&mut rng, &[1, 3, 6, 6], 1.0);
        suite.run(
            "bilinear upsampling",
            Metric::MaxElement,
            |cx, x| cx.bilinear_resize(x, 11, 11),
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let template = random_tensor(&mut rng, &[4, 3, 3], 0.8);
        let x = random_tensor(&mut rng, &[4, 7, 7], 1.0);
        suite.run(
            "depthwise correlation",
            Metric::MaxElement,
            move |cx, x| cx.depthwise_xcorr(x, &cx.input(template.clone())),
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let extra = random_tensor(&mut rng, &[3, 4], 1.0);
        let x = random_tensor(&mut rng, &[4, 5, 5], 1.0);
        suite.run(
            "token plumbing",
            Metric::MaxElement,
            move |cx, x| {
                let tokens = cx.map_to_tokens(x)?;
                let rows = cx.concat_rows(&[&tokens, &cx.input(extra.clone())])?;
                let left = cx.slice_cols(&rows, 0, 2)?;
                let right = cx.slice_cols(&rows, 2, 2)?;
                cx.concat_cols(&[&right, &left])
            },
            &x,
            1e-2,
            12,
        )?;
    }

    {
        let mut gc = GatingController::new(&mut rng, 4, 5, 6, 8);
        gc.visit_mut(&mut |p| match p.name() {
            "coarse.gc.proj1.weight" => p.set_value(diagonal_projection(4, 8)),
            "coarse.gc.gate.bias" => p.set_value(constant(&[6], 5.0)),
            _ => {}
        });
        let f2 = random_tensor(&mut rng, &[2, 5, 9, 9], 1.0);
        let x = peaked_features(&mut rng, 2, 4, 18, 0);
        let mut gc2 = GatingController::new(&mut rng, 4, 5, 6, 8);
        gc2.visit_mut(&mut |p| {
            if p.name() == "coarse.gc.gate.bias" {
                p.set_value(constant(&[6], 5.0));
            }
        });
        let f1 = random_tensor(&mut rng, &[2, 4, 17, 17], 1.0);
        let x2 = random_tensor(&mut rng, &[2, 5, 9, 9], 1.0);
        suite.run(
            "gating controller, template branch",
            Metric::Norm,
            move |cx, x| adapt(gc.forward(cx, x, &cx.input(f2.clone())).map(|g| g.alpha)),
            &x,
            1e-2,
            12,
        )?;
        suite.run(
            "gating controller, detail branch",
            Metric::Norm,
            move |cx, x| adapt(gc2.forward(cx, &cx.input(f1.clone()), x).map(|g| g.alpha)),
            &x2,
            1e-2,
            12,
        )?;
    }

    {
        let channels = [3usize, 4, 5, 6, 7];
        // Raised offsets push every fused-level rectifier input clear of its
        // kink. Used for the strongly coupled short paths, where a probe
        // moves the rectifier inputs far enough to flip a borderline cell.
        let mut lifted = CoarseModule::new(&mut rng, channels, 6, true, true);
        lifted.visit_mut(&mut |p| match p.name() {
            "coarse.gc.proj1.weight" => p.set_value(diagonal_projection(3, 6)),
            "coarse.gc.gate.bias" => p.set_value(constant(&[5], 3.0)),
            "coarse.ar.bn.beta" | "coarse.sr4.bn.beta" | "coarse.sr5.bn.beta" => {
                p.set_value(constant(&[6], 4.0))
            }
            _ => {}
        });
        // Stock normalization for the long, heavily attenuated paths: their
        // probes barely move the rectifier inputs, and any extra offset only
        // raises the output values whose quantization noise the central
        // difference must rise above.
        let mut coarse = CoarseModule::new(&mut rng, channels, 6, true, true);
        coarse.visit_mut(&mut |p| match p.name() {
            "coarse.gc.proj1.weight" => p.set_value(diagonal_projection(3, 6)),
            "coarse.gc.gate.bias" => p.set_value(constant(&[5], 2.5)),
            _ => {}
        });
        let f1 = peaked_features(&mut rng, 2, 3, 18, 0);
        let f2 = random_tensor(&mut rng, &[2, 4, 9, 9], 1.0);
        let f3 = random_tensor(&mut rng, &[2, 5, 7, 7], 1.0);
        let f4 = random_tensor(&mut rng, &[2, 6, 5, 5], 1.0);
        let f5 = random_tensor(&mut rng, &[2, 7, 3, 3], 1.0);
        let pyramid = move |cx: &Ctx, x: &Var, slot: usize| {
            let mut levels = [
                cx.input(f1.clone()),
                cx.input(f2.clone()),
                cx.input(f3.clone()),
                cx.input(f4.clone()),
                cx.input(f5.clone()),
            ];
            levels[slot] = x.clone();
            crate::backbone::FeaturePyramid { levels }
        };
        let x3 = random_tensor(&mut rng, &[2, 5, 7, 7], 1.0);
        let x1 = peaked_features(&mut rng, 2, 3, 18, 0);
        let x4 = random_tensor(&mut rng, &[2, 6, 5, 5], 1.0);
        let x3b = random_tensor(&mut rng, &[2, 5, 7, 7], 1.0);
        suite.run(
            "appearance regulator, feature path",
            Metric::Norm,
            centered(level_probe(&pyramid, &lifted, 2, 0), &x3)?,
            &x3,
            1e-2,
            12,
        )?;
        suite.run_directional(
            "appearance regulator, gate path",
            centered(level_probe(&pyramid, &coarse, 0, 0), &x1)?,
            &x1,
            1e-2,
        )?;
        suite.run(
            "semantic regulator, detail path",
            Metric::Norm,
            centered(level_probe(&pyramid, &lifted, 3, 1), &x4)?,
            &x4,
            1e-2,
            12,
        )?;
        suite.run(
            "semantic regulator, carry path",
            Metric::Norm,
            centered(level_probe(&pyramid, &coarse, 2, 2), &x3b)?,
            &x3b,
            1e-2,
            12,
        )?;
    }

    {
        let cfg = HmgConfig {
            d_model: 24,
            tier_dim: 8,
            num_blocks: 1,
            ffn_hidden: 48,
            attn_scale_dim: 8,
        };
        let block = HmgBlock::new(&mut rng, 0, &cfg);
        let x = random_tensor(&mut rng, &[12, 24], 1.0);
        suite.run_directional(
            "token fusion block",
            move |cx, x| adapt(block.forward(cx, x)),
            &x,
            8e-3,
        )?;
    }

    {
        let mut heads = Heads::new(&mut rng, 6, 8, 8);
        heads.visit_mut(&mut |p| {
            if p.name() == "head.cls1.bias" || p.name() == "head.reg1.bias" {
                p.set_value(constant(&[8], 1.5));
            }
        });
        let x = random_tensor(&mut rng, &[6, 7, 7], 1.0);
        suite.run(
            "prediction heads",
            Metric::Norm,
            move |cx, x| {
                adapt((|| {
                    let out = heads.forward(cx, x)?;
                    let cls = cx.reshape(&out.cls, &[1, 1, 7, 7])?;
                    let reg = cx.reshape(&out.reg, &[1, 4, 7, 7])?;
                    Ok(cx.concat_channels(&[&cls, &reg])?)
                })())
            },
            &x,
            1e-2,
            14,
        )?;
    }

    {
        let grid = 6;
        let target = crate::bbox::BBox::from_center(66.0, 58.0, 30.0, 24.0);
        let labels = build_labels(&target, grid, 8, 127);
        let logits = random_tensor(&mut rng, &[grid, grid], 2.0);
        let x = random_tensor(&mut rng, &[4, grid, grid], 0.8);
        suite.run(
            "box overlap loss",
            Metric::Norm,
            move |cx, x| {
                adapt((|| {
                    let reg = cx.scale(&cx.exp(&cx.scale(x, 0.5)?)?, 8.0)?;
                    let out = HeadOutput {
                        cls: cx.input(logits.clone()),
                        reg,
                    };
                    sample_loss(cx, &out, &labels, 1.0, 1.2)
                })())
            },
            &x,
            1.2e-2,
            14,
        )?;
    }

    // The remaining checks cover the pipeline at full composition depth in
    // three overlapping segments: raw patch to deepest coarse map, raw patch
    // to correlation responses, and correlation responses to predictions.
    // One fused patch-to-prediction map is beyond 32-bit probing: the raw
    // correlation values at initialization are large enough that the probe
    // displacement falls under their unit of least precision, which bends
    // the realized probe direction away from the gradient by a fixed angle
    // no step size can recover.

    {
        // Template-extent inputs leave the deepest stage at 1x1 where batch
        // normalization degenerates, so the stack is exercised at the search
        // extent instead.
        let cfg = ModelConfig::compact();
        let search = cfg.search_size;
        let model = Model::new(cfg, 0xF00D)?;
        let mut prng = ChaCha8Rng::seed_from_u64(0xE57);
        let x = {
            let half = random_tensor(&mut prng, &[1, 3, search, search], 0.5);
            Tensor::from_fn(half.shape(), |i| half.as_slice()[i] + 0.5)
        };
        suite.run_directional(
            "stacked extractor at search extent",
            centered(
                move |cx, x| {
                    adapt((|| {
                        let reps = model.embed(cx, x)?;
                        let rows: Vec<Var> = reps
                            .levels()
                            .iter()
                            .map(|v| cx.reshape(v, &[1, v.shape().iter().product()]))
                            .collect::<TensorResult<_>>()?;
                        Ok(cx.concat_cols(&[&rows[0], &rows[1], &rows[2]])?)
                    })())
                },
                &x,
            )?,
            &x,
            3e-4,
        )?;
    }

    {
        let cfg = ModelConfig::compact();
        let template = cfg.template_size;
        let search = cfg.search_size;
        let c = cfg.coarse_channels;
        let model = Model::new(cfg, 0xBEEF)?;
        let grid = model.grid();
        let mut prng = ChaCha8Rng::seed_from_u64(0xC0A1);
        let pixels = |rng: &mut ChaCha8Rng, side: usize| {
            let half = random_tensor(rng, &[1, 3, side, side], 0.5);
            Tensor::from_fn(half.shape(), |i| half.as_slice()[i] + 0.5)
        };
        let z = pixels(&mut prng, template);
        let x = pixels(&mut prng, search);
        let cx0 = Ctx::inference().with_training(true);
        let reps = adapt(model.embed(&cx0, &cx0.input(z)))?;
        let kernels: Vec<Tensor> = adapt(model.sample(&cx0, &reps, 0))?
            .iter()
            .map(|v| v.value().clone())
            .collect();
        let m = &model;
        suite.run_directional(
            "search embedding and correlation",
            centered(
                move |cx, x| {
                    adapt((|| {
                        let reps = m.embed(cx, x)?;
                        let windows = m.sample(cx, &reps, 0)?;
                        let k = [
                            cx.input(kernels[0].clone()),
                            cx.input(kernels[1].clone()),
                            cx.input(kernels[2].clone()),
                        ];
                        let maps = m.correlate(cx, &k, &windows)?;
                        let batched: Vec<Var> = maps
                            .iter()
                            .map(|v| cx.reshape(v, &[1, v.shape()[0], grid, grid]))
                            .collect::<TensorResult<_>>()?;
                        Ok(cx.concat_channels(&[&batched[0], &batched[1], &batched[2]])?)
                    })())
                },
                &x,
            )?,
            &x,
            3e-4,
        )?;

        let maps = random_tensor(&mut prng, &[3 * c * grid * grid], 1.0);
        let m = &model;
        suite.run_directional(
            "fusion and prediction at response extent",
            centered(
                move |cx, x| {
                    adapt((|| {
                        let k = c * grid * grid;
                        let row = cx.reshape(x, &[1, 3 * k])?;
                        let level = |s: usize| -> TensorResult<Var> {
                            cx.reshape(&cx.slice_cols(&row, s * k, k)?, &[c, grid, grid])
                        };
                        let fused = m.fuse(cx, [&level(0)?, &level(1)?, &level(2)?])?;
                        let out = m.predict(cx, &fused)?;
                        let cls = cx.reshape(&out.cls, &[1, 1, grid, grid])?;
                        let reg = cx.reshape(&out.reg, &[1, 4, grid, grid])?;
                        Ok(cx.concat_channels(&[&cls, &reg])?)
                    })())
                },
                &maps,
            )?,
            &maps,
            1e-3,
        )?;
    }

    Ok(suite.reports)
}

fn level_probe<'a>(
    pyramid: &'a (impl Fn(&Ctx, &Var, usize) -> crate::backbone::FeaturePyramid + 'a),
    coarse: &'a CoarseModule,
    slot: usize,
    target: usize,
) -> impl Fn(&Ctx, &Var) -> TensorResult<Var> + 'a {
    move |cx, x| {
        let pyr = pyramid(cx, x, slot);
        adapt(coarse.forward(cx, &pyr).map(|r| match target {
            0 => r.w3,
            1 => r.w4,
            _ => r.w5,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_whole_suite_passes_its_tolerance() {
        let reports = run_gradient_suite().unwrap();
        assert!(reports.len() >= 10);
        for r in &reports {
            assert!(
                r.passed(),
                "{}: relative error {} over tolerance {}",
                r.name,
                r.error,
                r.tolerance
            );
        }
    }

    #[test]
    fn reports_flag_failures() {
        let good = CheckReport {
            name: "x".into(),
            error: 5e-4,
            tolerance: 1e-3,
        };
        assert!(good.passed());
        let bad = CheckReport {
            name: "x".into(),
            error: 2e-3,
            tolerance: 1e-3,
        };
        assert!(!bad.passed());
        let nan = CheckReport {
            name: "x".into(),
            error: f32::NAN,
            tolerance: 1e-3,
        };
        assert!(!nan.passed());
    }
}
