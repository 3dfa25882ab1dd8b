use prl_tensor::{Ctx, Tensor};

use crate::bbox::BBox;
use crate::error::{Result, TrackError};
use crate::model::Model;
use crate::patch::{crop_patch, Frame};

/// Symmetric raised-cosine taper peaking at 1 in the middle and reaching 0
/// at both ends.
pub fn hanning(n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
            (0.5 * (1.0 - phase.cos())) as f32
        })
        .collect()
}

/// Outer product of two raised-cosine tapers over the response grid,
/// favoring cells near the previous position.
pub fn penalty_window(grid: usize) -> Vec<f32> {
    let line = hanning(grid);
    let mut out = Vec::with_capacity(grid * grid);
    for r in &line {
        for c in &line {
            out.push(r * c);
        }
    }
    out
}

/// Context-padded template extent for a target box: both sides are grown by
/// half the perimeter term before taking the geometric mean.
pub fn template_side(bbox: &BBox) -> f32 {
    let pad = (bbox.w + bbox.h) / 2.0;
    ((bbox.w + pad) * (bbox.h + pad)).sqrt()
}

/// Search extent for a target box, scaled up from the template extent by
/// the configured patch ratio.
pub fn search_side(bbox: &BBox, template_size: usize, search_size: usize) -> f32 {
    template_side(bbox) * search_size as f32 / template_size as f32
}

pub(crate) struct Peak {
    pub row: usize,
    pub col: usize,
    /// Penalized score at the peak, in [0, 1].
    pub score: f32,
}

/// Argmax over the penalized response: sigmoid of the logits blended with
/// the cosine window. Ties resolve to the first cell in row-major order.
pub(crate) fn find_peak(cls: &[f32], window: &[f32], influence: f32, grid: usize) -> Peak {
    debug_assert_eq!(cls.len(), grid * grid);
    debug_assert_eq!(window.len(), grid * grid);
    let mut best = 0;
    let mut best_score = f32::NEG_INFINITY;
    for (i, (&logit, &w)) in cls.iter().zip(window).enumerate() {
        let prob = 1.0 / (1.0 + (-logit).exp());
        let score = prob * (1.0 - influence) + w * influence;
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Peak {
        row: best / grid,
        col: best % grid,
        score: best_score,
    }
}

/// Patch-pixel position of a response cell: the grid is stride-spaced and
/// centered on the patch, so cell (row, col) sits at
/// `(patch-1)/2 + stride * (col - (grid-1)/2)` along x and the row analogue
/// along y.
pub(crate) fn cell_to_patch(
    row: usize,
    col: usize,
    grid: usize,
    stride: usize,
    patch: usize,
) -> (f32, f32) {
    let mid = (patch - 1) as f32 / 2.0;
    let off = (grid - 1) as f32 / 2.0;
    (
        mid + stride as f32 * (col as f32 - off),
        mid + stride as f32 * (row as f32 - off),
    )
}

/// Online tracker state: the template embedding captured on the first
/// frame and the current box estimate. The template is never updated.
pub struct Tracker<'m> {
    model: &'m Model,
    window: Vec<f32>,
    template: [Tensor; 3],
    bbox: BBox,
}

impl<'m> Tracker<'m> {
    /// Embeds the template crop around the initial box and fixes it for the
    /// rest of the sequence.
    pub fn init(model: &'m Model, frame: &Frame, init: BBox) -> Result<Tracker<'m>> {
        if !(init.w > 0.0 && init.h > 0.0) {
            return Err(TrackError::Data(format!(
                "initial box must have positive size, got {} x {}",
                init.w, init.h
            )));
        }
        let cfg = model.config();
        let side = template_side(&init);
        let (patch, _) = crop_patch(frame, init.center(), side, cfg.template_size)?;
        let cx = Ctx::inference();
        let t = model.embed_patch(&cx, &patch)?;
        Ok(Tracker {
            model,
            window: penalty_window(model.grid()),
            template: [
                t[0].value().clone(),
                t[1].value().clone(),
                t[2].value().clone(),
            ],
            bbox: init,
        })
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    /// Locates the target in the next frame and updates the estimate. The
    /// box center moves to the decoded peak; the size follows it with a
    /// rate proportional to the peak score, then the box is clamped inside
    /// the frame.
    pub fn step(&mut self, frame: &Frame) -> Result<BBox> {
        let cfg = self.model.config();
        let grid = self.model.grid();
        let stride = cfg.backbone.total_stride();
        let side = search_side(&self.bbox, cfg.template_size, cfg.search_size);
        let (patch, map) = crop_patch(frame, self.bbox.center(), side, cfg.search_size)?;

        let cx = Ctx::inference();
        let search = self.model.embed_patch(&cx, &patch)?;
        let template = [
            cx.input(self.template[0].clone()),
            cx.input(self.template[1].clone()),
            cx.input(self.template[2].clone()),
        ];
        let out = self.model.respond(&cx, &template, &search)?;

        let peak = find_peak(
            out.cls.value().as_slice(),
            &self.window,
            cfg.track.window_influence,
            grid,
        );
        let reg = out.reg.value().as_slice();
        let cell = peak.row * grid + peak.col;
        let cells = grid * grid;
        let (l, t, r, b) = (
            reg[cell],
            reg[cells + cell],
            reg[2 * cells + cell],
            reg[3 * cells + cell],
        );
        let (px, py) = cell_to_patch(peak.row, peak.col, grid, stride, cfg.search_size);
        let (fx, fy) = map.to_frame(px + (r - l) / 2.0, py + (b - t) / 2.0);
        let scale = map.scale();
        let (cand_w, cand_h) = ((l + r) * scale, (t + b) * scale);

        let rate = cfg.track.size_lr * peak.score;
        let (fw, fh) = (frame.width() as f32, frame.height() as f32);
        let w = lerp(self.bbox.w, cand_w, rate).max(2.0f32.min(fw)).min(fw);
        let h = lerp(self.bbox.h, cand_h, rate).max(2.0f32.min(fh)).min(fh);
        let cx_f = fx.clamp(w / 2.0, fw - w / 2.0);
        let cy_f = fy.clamp(h / 2.0, fh - h / 2.0);
        self.bbox = BBox::from_center(cx_f, cy_f, w, h);
        Ok(self.bbox)
    }
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a * (1.0 - t) + b * t
}

/// Runs the tracker over a whole sequence. The first output is the initial
/// box unchanged; every later frame gets one tracking step.
pub fn track_sequence<I>(model: &Model, mut frames: I, init: BBox) -> Result<Vec<BBox>>
where
    I: Iterator<Item = Result<Frame>>,
{
    let first = frames
        .next()
        .ok_or_else(|| TrackError::Data("sequence has no frames".into()))??;
    let mut tracker = Tracker::init(model, &first, init)?;
    let mut out = vec![init];
    for frame in frames {
        out.push(tracker.step(&frame?)?);
    }
    Ok(out)
}
