use std::collections::HashMap;

use prl_tensor::{Ctx, Tensor, Var};
use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{Result, TrackError};
use crate::layers::{BatchNorm2d, Cnr, Conv2d, Visitor, VisitorMut};

/// Intermediate products of the gating controller, exposed so the gate's
/// range and alignment contracts can be checked directly.
pub struct GateIntermediates {
    pub i1: Var,
    pub i2: Var,
    /// Nonnegative weight map matching the stage-3 feature shape.
    pub alpha: Var,
}

/// The three fused pyramid levels for one branch, uniform in channel width.
pub struct CoarseReps {
    pub w3: Var,
    pub w4: Var,
    pub w5: Var,
}

impl CoarseReps {
    pub fn levels(&self) -> [&Var; 3] {
        [&self.w3, &self.w4, &self.w5]
    }
}

/// Fuses the two shallow stages into a weight map for the stage-3 features:
/// both are projected to a common width, the shallower one is pooled down to
/// match, and a 3x3 valid convolution over their concatenation bridges the
/// two-pixel gap to the stage-3 extent before a ReLU clamps the map
/// nonnegative.
pub struct GatingController {
    proj1: Conv2d,
    norm1: BatchNorm2d,
    proj2: Conv2d,
    gate: Conv2d,
}

impl GatingController {
    pub fn new<R: Rng>(rng: &mut R, c1: usize, c2: usize, c3: usize, width: usize) -> Self {
        GatingController {
            proj1: Conv2d::new(rng, "coarse.gc.proj1", c1, width, 1, 1, 0, false),
            norm1: BatchNorm2d::new("coarse.gc.norm1", width),
            proj2: Conv2d::new(rng, "coarse.gc.proj2", c2, width, 1, 1, 0, true),
            gate: Conv2d::new(rng, "coarse.gc.gate", 2 * width, c3, 3, 1, 0, true),
        }
    }

    pub fn forward(&self, cx: &Ctx, f1: &Var, f2: &Var) -> Result<GateIntermediates> {
        let (h2, w2) = match f2.shape() {
            &[_, _, h, w] => (h, w),
            s => {
                return Err(TrackError::Config(format!(
                    "gating controller expects NCHW stage outputs, got {s:?}"
                )))
            }
        };
        let i1 = self.proj1.forward(cx, f1)?;
        let i1 = self.norm1.forward(cx, &i1)?;
        let i1 = cx.adaptive_max_pool(&i1, h2, w2)?;
        let i2 = self.proj2.forward(cx, f2)?;
        let cat = cx.concat_channels(&[&i1, &i2])?;
        let alpha = cx.relu(&self.gate.forward(cx, &cat)?)?;
        Ok(GateIntermediates { i1, i2, alpha })
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        self.proj1.visit(f);
        self.norm1.visit(f);
        self.proj2.visit(f);
        self.gate.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.proj1.visit_mut(f);
        self.norm1.visit_mut(f);
        self.proj2.visit_mut(f);
        self.gate.visit_mut(f);
    }
}

/// Coarse fusion over the pyramid: an appearance-gated projection of stage 3
/// and two semantically modulated projections of stages 4 and 5, each fused
/// level feeding the modulation of the next.
pub struct CoarseModule {
    gc: GatingController,
    cnr3: Cnr,
    mod4: Conv2d,
    cnr4: Cnr,
    mod5: Conv2d,
    cnr5: Cnr,
    gating: bool,
    semantic: bool,
}

impl CoarseModule {
    pub fn new<R: Rng>(
        rng: &mut R,
        channels: [usize; 5],
        width: usize,
        gating: bool,
        semantic: bool,
    ) -> Self {
        let [c1, c2, c3, c4, c5] = channels;
        CoarseModule {
            gc: GatingController::new(rng, c1, c2, c3, width),
            cnr3: Cnr::new(rng, "coarse.ar", c3, width, 1),
            mod4: Conv2d::new(rng, "coarse.sr4.mod", width, c4, 1, 1, 0, true),
            cnr4: Cnr::new(rng, "coarse.sr4", c4, width, 1),
            mod5: Conv2d::new(rng, "coarse.sr5.mod", width, c5, 1, 1, 0, true),
            cnr5: Cnr::new(rng, "coarse.sr5", c5, width, 1),
            gating,
            semantic,
        }
    }

    pub fn gate(&self, cx: &Ctx, f1: &Var, f2: &Var) -> Result<GateIntermediates> {
        self.gc.forward(cx, f1, f2)
    }

    pub fn forward(&self, cx: &Ctx, pyramid: &FeaturePyramid) -> Result<CoarseReps> {
        self.forward_with(cx, pyramid, self.gating, self.semantic)
    }

    /// Forward pass with explicit stage switches, so degenerate forms can be
    /// compared against the gated ones on the same weights.
    pub fn forward_with(
        &self,
        cx: &Ctx,
        pyramid: &FeaturePyramid,
        gating: bool,
        semantic: bool,
    ) -> Result<CoarseReps> {
        let [f1, f2, f3, f4, f5] = &pyramid.levels;
        let w3 = if gating {
            let gate = self.gc.forward(cx, f1, f2)?;
            if gate.alpha.shape() != f3.shape() {
                return Err(TrackError::Config(format!(
                    "gate map shape {:?} does not match the stage-3 shape {:?}",
                    gate.alpha.shape(),
                    f3.shape()
                )));
            }
            let gated = cx.add(f3, &cx.mul(&gate.alpha, f3)?)?;
            self.cnr3.forward(cx, &gated)?
        } else {
            self.cnr3.forward(cx, f3)?
        };
        let w4 = self.level_up(cx, &w3, f4, &self.mod4, &self.cnr4, semantic)?;
        let w5 = self.level_up(cx, &w4, f5, &self.mod5, &self.cnr5, semantic)?;
        Ok(CoarseReps { w3, w4, w5 })
    }

    /// One semantic step: resize the previous fused level onto the current
    /// stage, project it to that stage's width, and use it as a
    /// multiplicative modulation before the shared projection block.
    fn level_up(
        &self,
        cx: &Ctx,
        w_prev: &Var,
        f_cur: &Var,
        modulation: &Conv2d,
        cnr: &Cnr,
        semantic: bool,
    ) -> Result<Var> {
        if !semantic {
            return Ok(cnr.forward(cx, f_cur)?);
        }
        let (h, w) = match f_cur.shape() {
            &[_, _, h, w] => (h, w),
            s => {
                return Err(TrackError::Config(format!(
                    "semantic step expects NCHW stage outputs, got {s:?}"
                )))
            }
        };
        let aligned = cx.bilinear_resize(w_prev, h, w)?;
        let m = modulation.forward(cx, &aligned)?;
        let refined = cx.add(f_cur, &cx.mul(f_cur, &m)?)?;
        Ok(cnr.forward(cx, &refined)?)
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        self.gc.visit(f);
        self.cnr3.visit(f);
        self.mod4.visit(f);
        self.cnr4.visit(f);
        self.mod5.visit(f);
        self.cnr5.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.gc.visit_mut(f);
        self.cnr3.visit_mut(f);
        self.mod4.visit_mut(f);
        self.cnr4.visit_mut(f);
        self.mod5.visit_mut(f);
        self.cnr5.visit_mut(f);
    }

    pub(crate) fn buffers(&self, out: &mut Vec<(String, Tensor)>) {
        self.gc.norm1.buffers(out);
        self.cnr3.buffers(out);
        self.cnr4.buffers(out);
        self.cnr5.buffers(out);
    }

    pub(crate) fn load_buffers(&mut self, map: &mut HashMap<String, Tensor>) -> Result<()> {
        self.gc.norm1.load_buffers(map)?;
        self.cnr3.load_buffers(map)?;
        self.cnr4.load_buffers(map)?;
        self.cnr5.load_buffers(map)
    }
}
