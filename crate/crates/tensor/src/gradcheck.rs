//! Finite-difference validation of reverse-mode gradients.
//!
//! A checked map may produce a tensor of any shape; the checker contracts it
//! to a scalar through a fixed random-sign weighting, so every output element
//! influences the loss and systematic cancellation cannot hide errors. The
//! weighting depends only on the output size, which keeps repeated runs
//! bit-identical.

use crate::error::{Result, TensorError};
use crate::graph::{Ctx, GradGraph, Var};
use crate::tensor::Tensor;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn functional_weights(n: usize) -> Vec<f32> {
    let mut state = 0x5EED_0F_C0FFEE ^ n as u64;
    (0..n)
        .map(|_| {
            let r = splitmix64(&mut state);
            let mag = 0.5 + (r >> 11) as f64 / (1u64 << 53) as f64;
            if r & 1 == 0 {
                mag as f32
            } else {
                -(mag as f32)
            }
        })
        .collect()
}

/// Central-difference check of `f` at `input`, over every input element.
/// Returns the maximum relative error
/// `|analytic - estimate| / max(|analytic|, |estimate|, 1e-6)`.
pub fn grad_check<F>(f: &F, input: &Tensor, step: f32) -> Result<f32>
where
    F: Fn(&Ctx, &Var) -> Result<Var>,
{
    let probes: Vec<usize> = (0..input.numel()).collect();
    grad_check_probes(f, input, step, &probes)
}

/// Same check restricted to the given input elements. For large inputs a
/// sampled probe set (see [`sample_probes`]) keeps the quadratic cost of
/// finite differences in check.
pub fn grad_check_probes<F>(f: &F, input: &Tensor, step: f32, probes: &[usize]) -> Result<f32>
where
    F: Fn(&Ctx, &Var) -> Result<Var>,
{
    let (analytic, estimates) = probe_gradients(f, input, step, probes)?;
    let mut max_rel = 0.0f32;
    for (a, e) in analytic.iter().zip(&estimates) {
        let rel = (a - e).abs() / a.abs().max(e.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Norm-relative variant of [`grad_check_probes`]: compares the probed
/// gradient entries as whole vectors, `|a - e| / max(|a|, |e|, 1e-6)` on
/// their Euclidean norms. Deep compositions put some entries near zero
/// where 32-bit central differences are all roundoff; those entries cannot
/// dominate this verdict, while a misrouted or rescaled backward still
/// shifts the vector as a whole.
pub fn grad_check_probes_norm<F>(f: &F, input: &Tensor, step: f32, probes: &[usize]) -> Result<f32>
where
    F: Fn(&Ctx, &Var) -> Result<Var>,
{
    let (analytic, estimates) = probe_gradients(f, input, step, probes)?;
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut ne = 0.0f64;
    for (&a, &e) in analytic.iter().zip(&estimates) {
        diff += (a as f64 - e as f64).powi(2);
        na += (a as f64).powi(2);
        ne += (e as f64).powi(2);
    }
    Ok((diff.sqrt() / na.sqrt().max(ne.sqrt()).max(1e-6)) as f32)
}

/// Directional variant for deep compositions: estimates the derivative
/// along the analytic gradient's own direction and compares it against the
/// gradient norm. Every input element is perturbed at once, so the signal
/// is the whole gradient rather than a single entry, which keeps the
/// comparison above the 32-bit quantization of the map's values where
/// elementwise probing of such maps measures only roundoff. A rescaled,
/// sign-flipped, or misrouted backward changes the norm and fails; only
/// defects orthogonal to the true gradient can hide, and those have no
/// aligned elementwise counterpart to hide from either.
pub fn grad_check_directional<F>(f: &F, input: &Tensor, step: f32) -> Result<f32>
where
    F: Fn(&Ctx, &Var) -> Result<Var>,
{
    check_step(step)?;
    let (analytic, weights) = weighted_gradient(f, input)?;
    let norm = analytic
        .as_slice()
        .iter()
        .map(|&g| (g as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm < 1e-20 {
        return Err(TensorError::InvalidArgument {
            context: "grad_check",
            message: "gradient is identically zero at the probe point".into(),
        });
    }

    let shift = |sign: f64| -> Tensor {
        let g = analytic.as_slice();
        let x = input.as_slice();
        let scale = sign * step as f64 / norm;
        Tensor::from_fn(input.shape(), |i| {
            (x[i] as f64 + scale * g[i] as f64) as f32
        })
    };
    let plus = weighted_eval(f, &shift(1.0), &weights)?;
    let minus = weighted_eval(f, &shift(-1.0), &weights)?;
    let estimate = (plus - minus) / (2.0 * step as f64);
    let rel = (estimate - norm).abs() / norm.max(estimate.abs()).max(1e-6);
    Ok(rel as f32)
}

fn check_step(step: f32) -> Result<()> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(TensorError::InvalidArgument {
            context: "grad_check",
            message: format!("step must be positive and finite, got {step}"),
        });
    }
    Ok(())
}

/// Reverse-mode gradient of the weighted output sum, with the weighting
/// returned for the finite-difference evaluations of the same functional.
fn weighted_gradient<F>(f: &F, input: &Tensor) -> Result<(Tensor, Vec<f32>)>
where
    F: Fn(&Ctx, &Var) -> Result<Var>,
{
    let graph = GradGraph::new();
    let cx = Ctx::train(&graph);
    let x = cx.input(input.clone());
    let y = f(&cx, &x)?;
    let weights = functional_weights(y.value().numel());
    let wt = Tensor::from_vec(y.shape(), weights.clone())?;
    let weighted = cx.mul_const(&y, &wt)?;
    let loss = cx.sum_all(&weighted)?;
    let store = graph.backward(&loss)?;
    let analytic = store
        .grad_of(&x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));
    Ok((analytic, weights))
}

/// One weighted evaluation without tracing. Training stays set so
/// batch-statistics paths match the analytic pass.
fn weighted_eval<F>(f: &F, t: &Tensor, weights: &[f32]) -> Result<f64>
where
    F: Fn(&Ctx, &Var) -> Result<Var>,
{
    let cx = Ctx::inference().with_training(true);
    let out = f(&cx, &cx.input(t.clone()))?;
    if out.value().numel() != weights.len() {
        return Err(TensorError::InvalidArgument {
            context: "grad_check",
            message: "map output size changed between evaluations".into(),
        });
    }
    Ok(out
        .value()
        .as_slice()
        .iter()
        .zip(weights)
        .map(|(&v, &w)| v as f64 * w as f64)
        .sum())
}

fn probe_gradients<F>(
    f: &F,
    input: &Tensor,
    step: f32,
    probes: &[usize],
) -> Result<(Vec<f32>, Vec<f32>)>
where
    F: Fn(&Ctx, &Var) -> Result<Var>,
{
    check_step(step)?;
    for &p in probes {
        if p >= input.numel() {
            return Err(TensorError::InvalidArgument {
                context: "grad_check",
                message: format!("probe index {p} out of {} elements", input.numel()),
            });
        }
    }

    let (analytic, weights) = weighted_gradient(f, input)?;

    let mut probe_input = input.clone();
    let mut picked = Vec::with_capacity(probes.len());
    let mut estimates = Vec::with_capacity(probes.len());
    for &i in probes {
        let orig = input.as_slice()[i];
        probe_input.make_mut()[i] = orig + step;
        let plus = weighted_eval(f, &probe_input, &weights)?;
        probe_input.make_mut()[i] = orig - step;
        let minus = weighted_eval(f, &probe_input, &weights)?;
        probe_input.make_mut()[i] = orig;
        estimates.push(((plus - minus) / (2.0 * step as f64)) as f32);
        picked.push(analytic.as_slice()[i]);
    }
    Ok((picked, estimates))
}

/// Deterministic sample of `count` distinct indices out of `numel`, sorted
/// ascending. Returns all indices when `count >= numel`.
pub fn sample_probes(numel: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= numel {
        return (0..numel).collect();
    }
    let mut idx: Vec<usize> = (0..numel).collect();
    let mut state = seed ^ 0xD1B54A32D192ED03;
    for i in 0..count {
        let j = i + (splitmix64(&mut state) as usize) % (numel - i);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}
