use std::collections::HashMap;

use prl_tensor::{Ctx, Tensor, Var};
use rand::Rng;

use crate::config::BackboneConfig;
use crate::error::{Result, TrackError};
use crate::layers::{BatchNorm2d, Conv2d, Visitor, VisitorMut};

/// The five stage outputs for one image patch, shallow to deep. Both
/// branches of the tracker are extracted by the same instance, so the
/// Siamese weight-sharing contract holds by construction.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
}

impl FeaturePyramid {
    pub fn spatial_extents(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for (o, level) in out.iter_mut().zip(&self.levels) {
            *o = level.shape()[2];
        }
        out
    }
}

struct Stage {
    conv: Conv2d,
    bn: BatchNorm2d,
    pool: bool,
}

/// Five-stage convolutional feature extractor with batch norm and ReLU after
/// every convolution and stride-2 max pools after the first two stages.
pub struct Backbone {
    stages: Vec<Stage>,
    cfg: BackboneConfig,
}

impl Backbone {
    pub fn new<R: Rng>(rng: &mut R, cfg: &BackboneConfig) -> Backbone {
        let mut stages = Vec::with_capacity(5);
        let mut cin = 3;
        for (k, spec) in cfg.stages.iter().enumerate() {
            let n = k + 1;
            stages.push(Stage {
                conv: Conv2d::new(
                    rng,
                    &format!("backbone.conv{n}"),
                    cin,
                    spec.out_channels,
                    spec.kernel,
                    spec.stride,
                    0,
                    false,
                ),
                bn: BatchNorm2d::new(&format!("backbone.bn{n}"), spec.out_channels),
                pool: spec.pool,
            });
            cin = spec.out_channels;
        }
        Backbone {
            stages,
            cfg: cfg.clone(),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the stack over a square patch batch and returns all five stage
    /// outputs. Inputs too small for some layer are rejected up front with
    /// that layer named.
    pub fn extract_pyramid(&self, cx: &Ctx, patch: &Var) -> Result<FeaturePyramid> {
        let shape = patch.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
            return Err(TrackError::Config(format!(
                "expected a square NCHW patch batch with 3 channels, got {shape:?}"
            )));
        }
        self.cfg.shape_trace(shape[2])?;

        let mut x = patch.clone();
        let mut levels = Vec::with_capacity(5);
        for stage in &self.stages {
            x = stage.conv.forward(cx, &x)?;
            x = stage.bn.forward(cx, &x)?;
            x = cx.relu(&x)?;
            if stage.pool {
                x = cx.max_pool(&x, 3, 2)?;
            }
            levels.push(x.clone());
        }
        let levels: [Var; 5] = levels.try_into().ok().expect("five stages");
        Ok(FeaturePyramid { levels })
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        for stage in &self.stages {
            stage.conv.visit(f);
            stage.bn.visit(f);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        for stage in &mut self.stages {
            stage.conv.visit_mut(f);
            stage.bn.visit_mut(f);
        }
    }

    pub(crate) fn buffers(&self, out: &mut Vec<(String, Tensor)>) {
        for stage in &self.stages {
            stage.bn.buffers(out);
        }
    }

    pub(crate) fn load_buffers(&mut self, map: &mut HashMap<String, Tensor>) -> Result<()> {
        for stage in &mut self.stages {
            stage.bn.load_buffers(map)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_backbone() -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Backbone::new(&mut rng, &ModelConfig::reduced().backbone)
    }

    fn ramp_patch(side: usize) -> Tensor {
        Tensor::from_fn(&[1, 3, side, side], |i| ((i % 97) as f32) * 0.01 - 0.4)
    }

    #[test]
    fn pyramid_extents_match_the_shape_trace() {
        let bb = small_backbone();
        let cx = Ctx::inference();
        for side in [127usize, 287, 87] {
            let pyr = bb.extract_pyramid(&cx, &cx.input(ramp_patch(side))).unwrap();
            let want = bb.config().shape_trace(side).unwrap();
            assert_eq!(pyr.spatial_extents(), want, "input {side}");
            let e = pyr.spatial_extents();
            for k in [1, 2, 3] {
                assert_eq!(e[k + 1], e[k] - 2, "stage {} to {}", k + 2, k + 3);
            }
        }
    }

    #[test]
    fn undersized_input_is_rejected_before_any_arithmetic() {
        let bb = small_backbone();
        let cx = Ctx::inference();
        let err = bb
            .extract_pyramid(&cx, &cx.input(ramp_patch(10)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("conv1"), "{err}");
        let err = bb
            .extract_pyramid(&cx, &cx.input(ramp_patch(39)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("conv3"), "{err}");
    }

    #[test]
    fn extraction_is_reproducible_across_calls() {
        let bb = small_backbone();
        let cx = Ctx::inference();
        let a = bb.extract_pyramid(&cx, &cx.input(ramp_patch(127))).unwrap();
        let b = bb.extract_pyramid(&cx, &cx.input(ramp_patch(127))).unwrap();
        for k in 0..5 {
            assert!(a.levels[k].value().bitwise_eq(b.levels[k].value()));
        }
    }

    #[test]
    fn non_square_or_wrong_channel_input_is_rejected() {
        let bb = small_backbone();
        let cx = Ctx::inference();
        let bad = Tensor::zeros(&[1, 1, 127, 127]);
        assert!(bb.extract_pyramid(&cx, &cx.input(bad)).is_err());
        let bad = Tensor::zeros(&[1, 3, 127, 120]);
        assert!(bb.extract_pyramid(&cx, &cx.input(bad)).is_err());
    }
}
