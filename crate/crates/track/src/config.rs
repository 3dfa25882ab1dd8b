use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};

/// One backbone stage: a valid-padding convolution, batch norm, ReLU, and an
/// optional trailing 3x3 stride-2 max pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

/// Five-stage convolutional feature extractor configuration. The default is
/// the stride-reduced AlexNet layout used by Siamese trackers: total stride 8
/// and a two-pixel spatial shrink per stage from stage 3 on, which is what
/// the level alignment in the fusion stages relies on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: [StageSpec; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let s = |out_channels, kernel, stride, pool| StageSpec {
            out_channels,
            kernel,
            stride,
            pool,
        };
        BackboneConfig {
            stages: [
                s(96, 11, 2, true),
                s(256, 5, 1, true),
                s(384, 3, 1, false),
                s(384, 3, 1, false),
                s(256, 3, 1, false),
            ],
        }
    }
}

impl BackboneConfig {
    /// Spatial extent of each stage output for a square input, or an error
    /// naming the first layer the input is too small for.
    pub fn shape_trace(&self, input: usize) -> Result<[usize; 5]> {
        let mut extent = input;
        let mut out = [0usize; 5];
        for (k, stage) in self.stages.iter().enumerate() {
            let n = k + 1;
            if stage.kernel > extent {
                return Err(TrackError::Config(format!(
                    "conv{n}: kernel {k}x{k} does not fit the {e}x{e} input",
                    k = stage.kernel,
                    e = extent
                )));
            }
            extent = (extent - stage.kernel) / stage.stride + 1;
            if stage.pool {
                if extent < 3 {
                    return Err(TrackError::Config(format!(
                        "pool{n}: window 3x3 does not fit the {extent}x{extent} input"
                    )));
                }
                extent = (extent - 3) / 2 + 1;
            }
            out[k] = extent;
        }
        Ok(out)
    }

    /// Total spatial stride of the stack (conv strides times pool strides).
    pub fn total_stride(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.stride * if s.pool { 2 } else { 1 })
            .product()
    }
}

/// Token-attention fusion configuration. `d_model` must be exactly three
/// tiers wide: the per-level query/key/value tiers are contiguous channel
/// thirds of the projected tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmgConfig {
    pub d_model: usize,
    pub tier_dim: usize,
    pub num_blocks: usize,
    pub ffn_hidden: usize,
    /// Dimension under the square root in the attention score scaling.
    pub attn_scale_dim: usize,
}

impl Default for HmgConfig {
    fn default() -> Self {
        HmgConfig {
            d_model: 384,
            tier_dim: 128,
            num_blocks: 2,
            ffn_hidden: 768,
            attn_scale_dim: 128,
        }
    }
}

/// Which representation-learning stages are active. Every combination runs
/// end-to-end; the flags exist so the contribution of each stage can be
/// measured on the same footing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Appearance gate: modulate the stage-3 features by the gating
    /// controller's nonnegative weight map before projecting.
    pub gating: bool,
    /// Semantic modulation: scale each deeper stage by a projection of the
    /// previous fused level before projecting.
    pub semantic: bool,
    /// Token-attention fusion over all three correlation levels; when off
    /// the heads read the level-5 correlation map directly.
    pub attention: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            gating: true,
            semantic: true,
            attention: true,
        }
    }
}

impl AblationConfig {
    pub fn baseline() -> Self {
        AblationConfig {
            gating: false,
            semantic: false,
            attention: false,
        }
    }
}

/// Post-processing knobs for the frame-by-frame tracking loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    /// Blend weight of the Hanning window against the sigmoid score map.
    pub window_influence: f32,
    /// Size smoothing gain; the per-frame learning rate is this times the
    /// peak penalized score.
    pub size_lr: f32,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            window_influence: 0.40,
            size_lr: 0.30,
        }
    }
}

/// Full model configuration: backbone, fusion widths, attention stack, head
/// width, patch geometry, and the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Channel width shared by the three fused pyramid levels.
    pub coarse_channels: usize,
    pub hmg: HmgConfig,
    /// Hidden width of the classification and regression heads.
    pub head_channels: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub ablation: AblationConfig,
    pub track: TrackConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            coarse_channels: 256,
            hmg: HmgConfig::default(),
            head_channels: 192,
            template_size: 127,
            search_size: 287,
            ablation: AblationConfig::default(),
            track: TrackConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow variant with the default geometry. Spatial extents and the
    /// correlation grid are unchanged; channel widths are cut so tests and
    /// desk-scale training runs fit a single-core budget.
    pub fn reduced() -> Self {
        let s = |out_channels, kernel, stride, pool| StageSpec {
            out_channels,
            kernel,
            stride,
            pool,
        };
        ModelConfig {
            backbone: BackboneConfig {
                stages: [
                    s(16, 11, 2, true),
                    s(32, 5, 1, true),
                    s(48, 3, 1, false),
                    s(48, 3, 1, false),
                    s(48, 3, 1, false),
                ],
            },
            coarse_channels: 48,
            hmg: HmgConfig {
                d_model: 96,
                tier_dim: 32,
                num_blocks: 2,
                ffn_hidden: 192,
                attn_scale_dim: 32,
            },
            head_channels: 48,
            ..ModelConfig::default()
        }
    }

    /// Reduced widths on the smallest admissible patch geometry (87 and 127,
    /// a 6x6 correlation grid), for tests that exercise the full pipeline
    /// but do not care about the working resolution.
    pub fn compact() -> Self {
        ModelConfig {
            template_size: 87,
            search_size: 127,
            ..ModelConfig::reduced()
        }
    }

    /// Correlation grid side length: the search-branch stage-5 extent minus
    /// the template-branch extent plus one, identical across levels 3..5 by
    /// the two-pixel shrink chain.
    pub fn grid(&self) -> Result<usize> {
        let t = self.backbone.shape_trace(self.template_size)?;
        let s = self.backbone.shape_trace(self.search_size)?;
        for k in [2, 3, 4] {
            if t[k] > s[k] {
                return Err(TrackError::Config(format!(
                    "template stage {} extent {} exceeds the search extent {}",
                    k + 1,
                    t[k],
                    s[k]
                )));
            }
        }
        let g = s[4] - t[4] + 1;
        for k in [2, 3] {
            if s[k] - t[k] + 1 != g {
                return Err(TrackError::Config(format!(
                    "correlation extents disagree across levels: stage {} gives {}, stage 5 gives {g}",
                    k + 1,
                    s[k] - t[k] + 1
                )));
            }
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hmg.d_model != 3 * self.hmg.tier_dim {
            return Err(TrackError::Config(format!(
                "d_model {} must be three tiers of {}",
                self.hmg.d_model, self.hmg.tier_dim
            )));
        }
        if self.hmg.attn_scale_dim == 0 {
            return Err(TrackError::Config(
                "attn_scale_dim must be positive".into(),
            ));
        }
        if self.coarse_channels == 0 || self.head_channels == 0 {
            return Err(TrackError::Config(
                "channel widths must be positive".into(),
            ));
        }
        self.grid()?;
        Ok(())
    }
}

/// Optimization schedule and sampling parameters for the trainer. The
/// learning rate rises geometrically from `warmup_lr_start` to `peak_lr`
/// over the warmup epochs and then decays geometrically to `final_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub warmup_lr_start: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub momentum: f32,
    pub cls_weight: f32,
    pub reg_weight: f32,
    /// Search-crop center jitter in frame pixels, drawn uniformly per sample.
    pub translate_jitter: f32,
    /// Search-crop scale jitter: the side is multiplied by 2^u with u drawn
    /// uniformly from [-scale_jitter, scale_jitter].
    pub scale_jitter: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            warmup_epochs: 1,
            steps_per_epoch: 100,
            batch_size: 4,
            warmup_lr_start: 5e-4,
            peak_lr: 1e-2,
            final_lr: 1e-4,
            momentum: 0.9,
            cls_weight: 1.0,
            reg_weight: 1.2,
            translate_jitter: 16.0,
            scale_jitter: 0.2,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_lr_start > 0.0 && self.warmup_lr_start <= self.peak_lr) {
            return Err(TrackError::Config(
                "warmup_lr_start must satisfy 0 < start <= peak_lr".into(),
            ));
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr) {
            return Err(TrackError::Config(
                "final_lr must satisfy 0 < final <= peak_lr".into(),
            ));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(TrackError::Config(
                "batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(TrackError::Config(
                "warmup_epochs must satisfy 1 <= warmup < epochs".into(),
            ));
        }
        if self.warmup_steps() < 2 {
            return Err(TrackError::Config(
                "the warmup phase needs at least two steps".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrackError::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_backbone_traces_the_standard_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.shape_trace(127).unwrap(), [29, 12, 10, 8, 6]);
        assert_eq!(cfg.shape_trace(287).unwrap(), [69, 32, 30, 28, 26]);
        assert_eq!(cfg.total_stride(), 8);
    }

    #[test]
    fn trace_names_the_first_failing_layer() {
        let cfg = BackboneConfig::default();
        let err = cfg.shape_trace(10).unwrap_err().to_string();
        assert!(err.contains("conv1"), "{err}");
        let err = cfg.shape_trace(39).unwrap_err().to_string();
        assert!(err.contains("conv3"), "{err}");
    }

    #[test]
    fn smallest_admissible_input_is_87() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.shape_trace(87).unwrap(), [19, 7, 5, 3, 1]);
        assert!(cfg.shape_trace(86).is_err());
    }

    #[test]
    fn default_and_reduced_configs_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::reduced().validate().unwrap();
        assert_eq!(ModelConfig::default().grid().unwrap(), 21);
        assert_eq!(ModelConfig::reduced().grid().unwrap(), 21);
    }

    #[test]
    fn mismatched_tier_width_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.hmg.tier_dim = 100;
        assert!(matches!(cfg.validate(), Err(TrackError::Config(_))));
    }

    #[test]
    fn train_config_bounds_are_enforced() {
        TrainConfig::default().validate().unwrap();
        let mut cfg = TrainConfig::default();
        cfg.final_lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.warmup_epochs = cfg.epochs;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn configs_roundtrip_through_toml() {
        let cfg = ModelConfig::reduced();
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
