use prl_tensor::{Ctx, Var};
use rand::Rng;

use crate::error::Result;
use crate::layers::{Conv2d, Visitor, VisitorMut};

/// Dense per-cell predictions over the correlation grid: classification
/// logits and box distances (left, top, right, bottom) in search-patch
/// pixels, measured from each cell's center.
pub struct HeadOutput {
    /// Objectness logits, one per grid cell.
    pub cls: Var,
    /// Positive distances to the four box sides, channel order l, t, r, b.
    pub reg: Var,
}

/// Anchor-free prediction heads. Each branch is a padded 3x3 convolution
/// pair with a ReLU between, so the grid extent is preserved. Regression
/// outputs pass through exp and are scaled by the backbone stride, which
/// keeps distances positive and puts the zero-weight operating point at one
/// stride cell.
pub struct Heads {
    cls1: Conv2d,
    cls2: Conv2d,
    reg1: Conv2d,
    reg2: Conv2d,
    stride: f32,
}

impl Heads {
    pub fn new<R: Rng>(rng: &mut R, in_channels: usize, hidden: usize, stride: usize) -> Self {
        Heads {
            cls1: Conv2d::new(rng, "head.cls1", in_channels, hidden, 3, 1, 1, true),
            cls2: Conv2d::new(rng, "head.cls2", hidden, 1, 3, 1, 1, true),
            reg1: Conv2d::new(rng, "head.reg1", in_channels, hidden, 3, 1, 1, true),
            reg2: Conv2d::new(rng, "head.reg2", hidden, 4, 3, 1, 1, true),
            stride: stride as f32,
        }
    }

    /// Runs both branches over a fused [C, g, g] map.
    pub fn forward(&self, cx: &Ctx, map: &Var) -> Result<HeadOutput> {
        let &[c, h, w] = map.shape() else {
            return Err(crate::error::TrackError::Config(format!(
                "head input must be a channel map, got shape {:?}",
                map.shape()
            )));
        };
        let x = cx.reshape(map, &[1, c, h, w])?;
        let cls = self.cls2.forward(cx, &cx.relu(&self.cls1.forward(cx, &x)?)?)?;
        let cls = cx.reshape(&cls, &[h, w])?;
        let raw = self.reg2.forward(cx, &cx.relu(&self.reg1.forward(cx, &x)?)?)?;
        let reg = cx.scale(&cx.exp(&raw)?, self.stride)?;
        let reg = cx.reshape(&reg, &[4, h, w])?;
        Ok(HeadOutput { cls, reg })
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        self.cls1.visit(f);
        self.cls2.visit(f);
        self.reg1.visit(f);
        self.reg2.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.cls1.visit_mut(f);
        self.cls2.visit_mut(f);
        self.reg1.visit_mut(f);
        self.reg2.visit_mut(f);
    }
}
