use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use prl_tensor::{value_and_grad, Ctx, GradGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{io_err, Result, TrackError};
use crate::heads::HeadOutput;
use crate::model::Model;
use crate::patch::{crop_patch, Frame};
use crate::tracker::{search_side, template_side};

/// Learning rate for one optimizer step: geometric ramp from the warmup
/// start to the peak over the warmup steps, then geometric decay from the
/// peak to the final rate over the rest. The first step, the last warmup
/// step, and the last step hit their configured rates exactly.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let total = cfg.total_steps();
    let warmup = cfg.warmup_steps();
    debug_assert!(step < total);
    let geometric = |a: f64, b: f64, frac: f64| a.powf(1.0 - frac) * b.powf(frac);
    if step < warmup {
        geometric(
            cfg.warmup_lr_start,
            cfg.peak_lr,
            step as f64 / (warmup - 1) as f64,
        )
    } else {
        geometric(
            cfg.peak_lr,
            cfg.final_lr,
            (step - warmup + 1) as f64 / (total - warmup) as f64,
        )
    }
}

/// Dense supervision for one search patch: cell labels, per-cell box-side
/// distances, and the positive-cell mask.
pub struct Labels {
    /// 0/1 objectness target per cell, [grid, grid].
    pub cls: Tensor,
    /// Distances to the box sides in patch pixels, [4, grid, grid], order
    /// l, t, r, b, clamped to at least one pixel.
    pub reg: Tensor,
    /// 1.0 at positive cells, [1, grid, grid].
    pub mask: Tensor,
    pub positives: usize,
}

/// Builds labels for a target box given in search-patch coordinates. Cells
/// within a two-cell Euclidean radius of the cell nearest the box center
/// are positive; away from patch borders that is 13 cells.
pub fn build_labels(target: &BBox, grid: usize, stride: usize, patch: usize) -> Labels {
    let mid = (patch - 1) as f32 / 2.0;
    let off = (grid - 1) as f32 / 2.0;
    let s = stride as f32;
    let (gcx, gcy) = target.center();
    let limit = (grid - 1) as i64;
    let col0 = (((gcx - mid) / s + off).round() as i64).clamp(0, limit);
    let row0 = (((gcy - mid) / s + off).round() as i64).clamp(0, limit);

    let cells = grid * grid;
    let mut cls = vec![0.0f32; cells];
    let mut reg = vec![0.0f32; 4 * cells];
    let mut mask = vec![0.0f32; cells];
    let mut positives = 0;
    let (x2, y2) = (target.x + target.w, target.y + target.h);
    for row in 0..grid {
        for col in 0..grid {
            let cell = row * grid + col;
            let px = mid + s * (col as f32 - off);
            let py = mid + s * (row as f32 - off);
            reg[cell] = (px - target.x).max(1.0);
            reg[cells + cell] = (py - target.y).max(1.0);
            reg[2 * cells + cell] = (x2 - px).max(1.0);
            reg[3 * cells + cell] = (y2 - py).max(1.0);
            let dr = row as i64 - row0;
            let dc = col as i64 - col0;
            if dr * dr + dc * dc <= 4 {
                cls[cell] = 1.0;
                mask[cell] = 1.0;
                positives += 1;
            }
        }
    }
    Labels {
        cls: Tensor::from_vec(&[grid, grid], cls).unwrap(),
        reg: Tensor::from_vec(&[4, grid, grid], reg).unwrap(),
        mask: Tensor::from_vec(&[1, grid, grid], mask).unwrap(),
        positives,
    }
}

/// Loss for one search patch: binary cross-entropy over every cell plus the
/// weighted mean of (1 - IoU) between predicted and target boxes over the
/// positive cells. Both boxes at a cell are expressed as side distances
/// from the same cell center, so the intersection extent along each axis is
/// the sum of the smaller distances.
pub fn sample_loss(
    cx: &Ctx,
    out: &HeadOutput,
    labels: &Labels,
    cls_weight: f32,
    reg_weight: f32,
) -> Result<prl_tensor::Var> {
    let bce = cx.bce_with_logits_mean(&out.cls, &labels.cls)?;
    let cls_term = cx.scale(&bce, cls_weight)?;
    if labels.positives == 0 {
        return Ok(cls_term);
    }

    let grid = labels.cls.extent(0);
    let cells = grid * grid;
    let reg4 = cx.reshape(&out.reg, &[4, 1, grid, grid])?;
    let side = |i: usize| cx.batch_select(&reg4, i);
    let (l, t, r, b) = (side(0)?, side(1)?, side(2)?, side(3)?);

    let gt = labels.reg.as_slice();
    let channel = |i: usize| {
        Tensor::from_vec(&[1, grid, grid], gt[i * cells..(i + 1) * cells].to_vec()).unwrap()
    };
    let (gl, gtop, gr, gb) = (channel(0), channel(1), channel(2), channel(3));

    let iw = cx.add(&cx.min_const(&l, &gl)?, &cx.min_const(&r, &gr)?)?;
    let ih = cx.add(&cx.min_const(&t, &gtop)?, &cx.min_const(&b, &gb)?)?;
    let inter = cx.mul(&iw, &ih)?;
    let pred_area = cx.mul(&cx.add(&l, &r)?, &cx.add(&t, &b)?)?;
    let gt_area = Tensor::from_fn(&[1, grid, grid], |i| {
        (gt[i] + gt[2 * cells + i]) * (gt[cells + i] + gt[3 * cells + i])
    });
    let union = cx.sub(&cx.add(&pred_area, &cx.input(gt_area))?, &inter)?;
    let iou = cx.div(&inter, &union)?;
    let deficit = cx.mul_const(&cx.rsub_scalar(&iou, 1.0)?, &labels.mask)?;
    let reg_mean = cx.scale(&cx.sum_all(&deficit)?, 1.0 / labels.positives as f32)?;
    let reg_term = cx.scale(&reg_mean, reg_weight)?;
    Ok(cx.add(&cls_term, &reg_term)?)
}

/// One training pair plus its supervision.
pub struct TrainSample {
    pub template: Tensor,
    pub search: Tensor,
    pub labels: Labels,
}

/// A fully loaded training sequence: frames with one box each.
pub struct TrainSequence {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
}

pub struct PairSampler<'d> {
    data: &'d [TrainSequence],
    rng: ChaCha8Rng,
}

impl<'d> PairSampler<'d> {
    pub fn new(data: &'d [TrainSequence], seed: u64) -> Self {
        PairSampler {
            data,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PairSampler<'_> {
    /// Draws one pair: the template is always the first frame cropped
    /// around its box; the search patch comes from a random frame with the
    /// crop center and extent jittered so the target is not always centered
    /// at training time.
    pub fn draw(&mut self, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainSample> {
        let grid = model_cfg.grid()?;
        let stride = model_cfg.backbone.total_stride();
        let seq = &self.data[self.rng.gen_range(0..self.data.len())];

        let tb = seq.boxes[0];
        let (template, _) = crop_patch(
            &seq.frames[0],
            tb.center(),
            template_side(&tb),
            model_cfg.template_size,
        )?;

        let idx = self.rng.gen_range(0..seq.frames.len());
        let gt = seq.boxes[idx];
        let j = cfg.translate_jitter;
        let dx = self.rng.gen_range(-j..=j);
        let dy = self.rng.gen_range(-j..=j);
        let u = self.rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter);
        let side =
            search_side(&gt, model_cfg.template_size, model_cfg.search_size) * 2f32.powf(u);
        let (gcx, gcy) = gt.center();
        let (search, map) =
            crop_patch(&seq.frames[idx], (gcx + dx, gcy + dy), side, model_cfg.search_size)?;

        let (x1, y1) = map.to_patch(gt.x, gt.y);
        let scale = map.scale();
        let gt_patch = BBox::new(x1, y1, gt.w / scale, gt.h / scale);
        let labels = build_labels(&gt_patch, grid, stride, model_cfg.search_size);
        Ok(TrainSample {
            template,
            search,
            labels,
        })
    }
}

/// Stochastic gradient descent with classical momentum, velocity kept per
/// parameter name.
pub struct Sgd {
    momentum: f32,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Sgd {
        Sgd {
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update: v = momentum * v + grad, parameter -= lr * v.
    /// Parameters without a gradient entry are left untouched.
    pub fn apply(&mut self, model: &mut Model, grads: &HashMap<String, Tensor>, lr: f32) {
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        model.visit_params_mut(|p| {
            let Some(g) = grads.get(p.name()) else {
                return;
            };
            let v = velocity
                .entry(p.name().to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let gs = g.as_slice();
            let mut next = v.to_vec();
            for (vi, &gi) in next.iter_mut().zip(gs) {
                *vi = momentum * *vi + gi;
            }
            *v = Tensor::from_vec(g.shape(), next).unwrap();
            let step: Vec<f32> = v.as_slice().iter().map(|&vi| lr * vi).collect();
            p.apply_step(&step);
        });
    }
}

/// Stacks per-sample [3, S, S] patches into one [B, 3, S, S] batch.
fn stack_patches(patches: &[&Tensor]) -> Result<Tensor> {
    let shape = patches[0].shape().to_vec();
    let mut data = Vec::with_capacity(patches.len() * patches[0].numel());
    for p in patches {
        if p.shape() != shape {
            return Err(TrackError::Data(format!(
                "cannot batch patches of shapes {:?} and {:?}",
                shape,
                p.shape()
            )));
        }
        data.extend_from_slice(p.as_slice());
    }
    let mut batched = vec![patches.len()];
    batched.extend_from_slice(&shape);
    Ok(Tensor::from_vec(&batched, data)?)
}

/// One optimization step's forward and backward pass. The extractor runs
/// batched (templates first, then search patches, so normalization
/// statistics are updated in a fixed order); correlation, fusion, and the
/// heads run per sample. Returns the batch loss and gradients by parameter
/// name.
pub fn training_step(
    model: &Model,
    batch: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<(f32, HashMap<String, Tensor>)> {
    let graph = GradGraph::new();
    let cx = Ctx::train(&graph);

    let templates: Vec<&Tensor> = batch.iter().map(|s| &s.template).collect();
    let searches: Vec<&Tensor> = batch.iter().map(|s| &s.search).collect();
    let t_reps = model.embed(&cx, &cx.input(stack_patches(&templates)?))?;
    let s_reps = model.embed(&cx, &cx.input(stack_patches(&searches)?))?;

    let mut total = None;
    for (i, sample) in batch.iter().enumerate() {
        let t = model.sample(&cx, &t_reps, i)?;
        let s = model.sample(&cx, &s_reps, i)?;
        let out = model.respond(&cx, &t, &s)?;
        let loss = sample_loss(&cx, &out, &sample.labels, cfg.cls_weight, cfg.reg_weight)?;
        total = Some(match total {
            None => loss,
            Some(acc) => cx.add(&acc, &loss)?,
        });
    }
    let total = cx.scale(&total.expect("batch is nonempty"), 1.0 / batch.len() as f32)?;

    let params = model.params();
    let (value, grads) = value_and_grad(&graph, &total, &params)?;
    let named = params
        .iter()
        .zip(grads)
        .map(|(p, g)| (p.name().to_string(), g))
        .collect();
    Ok((value, named))
}

pub struct TrainReport {
    /// Batch loss per optimizer step.
    pub losses: Vec<f32>,
}

/// Runs the full schedule over the given sequences, mutating the model in
/// place. `progress` is called after every step with (step, lr, loss).
pub fn train(
    model: &mut Model,
    data: &[TrainSequence],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64, f32),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrackError::Data("training needs at least one sequence".into()));
    }
    for (i, seq) in data.iter().enumerate() {
        if seq.frames.is_empty() {
            return Err(TrackError::Data(format!("sequence {i} has no frames")));
        }
        if seq.frames.len() != seq.boxes.len() {
            return Err(TrackError::Data(format!(
                "sequence {i}: frames={} gt={}",
                seq.frames.len(),
                seq.boxes.len()
            )));
        }
    }

    let mut sampler = PairSampler {
        data,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut sgd = Sgd::new(cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.total_steps());
    for step in 0..cfg.total_steps() {
        let lr = lr_at(cfg, step);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            batch.push(sampler.draw(model.config(), cfg)?);
        }
        let (loss, grads) = training_step(model, &batch, cfg)?;
        sgd.apply(model, &grads, lr as f32);
        losses.push(loss);
        progress(step, lr, loss);
    }
    Ok(TrainReport { losses })
}

/// Sidecar description of a weights file: where training stopped and the
/// exact model shape, so a checkpoint can be rebuilt without the original
/// command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub lr: f64,
    pub loss: f32,
    pub model: ModelConfig,
}

pub fn checkpoint_meta_path(weights: &Path) -> PathBuf {
    weights.with_extension("meta")
}

pub fn checkpoint_trace_path(weights: &Path) -> PathBuf {
    weights.with_extension("loss.txt")
}

/// Writes the weights container plus its sidecars: a TOML description and
/// the loss trace, one value per line in shortest round-trip form.
pub fn save_checkpoint(
    weights: &Path,
    model: &Model,
    meta: &CheckpointMeta,
    losses: &[f32],
) -> Result<()> {
    model.save_weights(weights)?;
    let text = toml::to_string_pretty(meta)
        .map_err(|e| TrackError::Config(format!("cannot serialize checkpoint meta: {e}")))?;
    let meta_path = checkpoint_meta_path(weights);
    fs::write(&meta_path, text).map_err(|e| io_err(&meta_path, e))?;
    let mut trace = String::with_capacity(losses.len() * 12);
    for v in losses {
        trace.push_str(&format!("{v}\n"));
    }
    let trace_path = checkpoint_trace_path(weights);
    fs::write(&trace_path, trace).map_err(|e| io_err(&trace_path, e))?;
    Ok(())
}

/// Rebuilds a model from a weights file and its TOML sidecar.
pub fn load_checkpoint(weights: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta_path = checkpoint_meta_path(weights);
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: CheckpointMeta = toml::from_str(&text)
        .map_err(|e| TrackError::Config(format!("{}: {e}", meta_path.display())))?;
    let mut model = Model::new(meta.model.clone(), 0)?;
    model.load_weights(weights)?;
    Ok((model, meta))
}
