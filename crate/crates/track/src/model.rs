use std::collections::HashMap;
use std::path::Path;

use prl_tensor::{io, Ctx, Parameter, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::coarse::{CoarseModule, CoarseReps};
use crate::config::ModelConfig;
use crate::error::{io_err, Result, TrackError};
use crate::heads::{HeadOutput, Heads};
use crate::hmg::Hmg;
use crate::layers::take_tensor;

/// The assembled tracker: shared feature extractor, gated pyramid fusion,
/// depthwise correlation, token-attention fusion, and prediction heads.
///
/// Every stage is built regardless of the ablation switches so that the same
/// seed yields the same extractor and fusion weights across variants and a
/// variant's degenerate paths can be compared on identical parameters. The
/// switches choose which stages the forward pass actually consults; the one
/// structural difference is the head input width, which follows the
/// attention switch.
pub struct Model {
    cfg: ModelConfig,
    backbone: Backbone,
    coarse: CoarseModule,
    hmg: Hmg,
    heads: Heads,
    grid: usize,
}

impl Model {
    /// Builds a freshly initialized model. All weights are drawn from a
    /// single seeded stream in construction order, so a seed fully
    /// determines the parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut rng, &cfg.backbone);
        let mut channels = [0usize; 5];
        for (c, stage) in channels.iter_mut().zip(&cfg.backbone.stages) {
            *c = stage.out_channels;
        }
        let coarse = CoarseModule::new(
            &mut rng,
            channels,
            cfg.coarse_channels,
            cfg.ablation.gating,
            cfg.ablation.semantic,
        );
        let hmg = Hmg::new(&mut rng, &cfg.hmg, cfg.coarse_channels, grid);
        let head_in = if cfg.ablation.attention {
            cfg.hmg.d_model
        } else {
            cfg.coarse_channels
        };
        let heads = Heads::new(
            &mut rng,
            head_in,
            cfg.head_channels,
            cfg.backbone.total_stride(),
        );
        Ok(Model {
            cfg,
            backbone,
            coarse,
            hmg,
            heads,
            grid,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Side length of the square correlation grid.
    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Extracts the fused coarse representations for a batch of patches.
    /// Both branches go through here; the weights are shared.
    pub fn embed(&self, cx: &Ctx, patches: &Var) -> Result<CoarseReps> {
        let pyramid = self.backbone.extract_pyramid(cx, patches)?;
        self.coarse.forward(cx, &pyramid)
    }

    /// Pulls one sample's three coarse maps out of a batched embedding.
    pub fn sample(&self, cx: &Ctx, reps: &CoarseReps, index: usize) -> Result<[Var; 3]> {
        let levels = reps.levels();
        Ok([
            cx.batch_select(levels[0], index)?,
            cx.batch_select(levels[1], index)?,
            cx.batch_select(levels[2], index)?,
        ])
    }

    /// Channel-wise correlation of one template/search pair, level by level.
    /// All three responses share the same grid extent.
    pub fn correlate(
        &self,
        cx: &Ctx,
        template: &[Var; 3],
        search: &[Var; 3],
    ) -> Result<[Var; 3]> {
        Ok([
            cx.depthwise_xcorr(&search[0], &template[0])?,
            cx.depthwise_xcorr(&search[1], &template[1])?,
            cx.depthwise_xcorr(&search[2], &template[2])?,
        ])
    }

    /// Reduces the three correlation maps to the single map the heads see:
    /// token-attention fusion when enabled, otherwise the deepest response
    /// alone.
    pub fn fuse(&self, cx: &Ctx, maps: [&Var; 3]) -> Result<Var> {
        if self.cfg.ablation.attention {
            self.hmg.forward_map(cx, maps)
        } else {
            Ok(maps[2].clone())
        }
    }

    pub fn predict(&self, cx: &Ctx, fused: &Var) -> Result<HeadOutput> {
        self.heads.forward(cx, fused)
    }

    /// Correlate, fuse, predict for one pair of per-sample embeddings.
    pub fn respond(
        &self,
        cx: &Ctx,
        template: &[Var; 3],
        search: &[Var; 3],
    ) -> Result<HeadOutput> {
        let maps = self.correlate(cx, template, search)?;
        let fused = self.fuse(cx, [&maps[0], &maps[1], &maps[2]])?;
        self.predict(cx, &fused)
    }

    /// Embeds one raw [3, S, S] patch and returns its per-sample coarse
    /// maps.
    pub fn embed_patch(&self, cx: &Ctx, patch: &Tensor) -> Result<[Var; 3]> {
        let v = cx.input(patch.clone());
        let &[c, h, w] = v.shape() else {
            return Err(TrackError::Config(format!(
                "patch must be a 3-channel image map, got shape {:?}",
                v.shape()
            )));
        };
        let batch = cx.reshape(&v, &[1, c, h, w])?;
        let reps = self.embed(cx, &batch)?;
        self.sample(cx, &reps, 0)
    }

    /// End-to-end pass over one raw template/search patch pair, each [3, S, S].
    pub fn forward_pair(
        &self,
        cx: &Ctx,
        template_patch: &Tensor,
        search_patch: &Tensor,
    ) -> Result<HeadOutput> {
        let t = self.embed_patch(cx, template_patch)?;
        let s = self.embed_patch(cx, search_patch)?;
        self.respond(cx, &t, &s)
    }

    /// Visits every parameter in a stable construction order.
    pub fn visit_params<'p>(&'p self, mut f: impl FnMut(&'p Parameter)) {
        self.backbone.visit(&mut f);
        self.coarse.visit(&mut f);
        self.hmg.visit(&mut f);
        self.heads.visit(&mut f);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Parameter)) {
        self.backbone.visit_mut(&mut f);
        self.coarse.visit_mut(&mut f);
        self.hmg.visit_mut(&mut f);
        self.heads.visit_mut(&mut f);
    }

    /// Parameters in visitation order, for gradient computation.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit_params(|p| out.push(p));
        out
    }

    /// Every persisted tensor: parameters followed by normalization running
    /// buffers.
    pub fn weight_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(|p| out.push((p.name().to_string(), p.value().clone())));
        self.backbone.buffers(&mut out);
        self.coarse.buffers(&mut out);
        out
    }

    /// Writes all weights and buffers to a container file.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let entries = self.weight_entries();
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        io::save_tensors(path, &refs).map_err(|e| match e {
            prl_tensor::TensorError::Io(source) => io_err(path, source),
            other => other.into(),
        })
    }

    /// Replaces all weights and buffers from a container file. Every tensor
    /// must be present with its exact shape, and no unknown tensors may
    /// remain afterwards.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let entries = io::load_tensors(path).map_err(|e| match e {
            prl_tensor::TensorError::Io(source) => io_err(path, source),
            other => other.into(),
        })?;
        let mut map: HashMap<String, Tensor> = HashMap::with_capacity(entries.len());
        for (name, tensor) in entries {
            if map.insert(name.clone(), tensor).is_some() {
                return Err(TrackError::Config(format!(
                    "checkpoint has duplicate tensor {name}"
                )));
            }
        }
        let mut failed = None;
        self.visit_params_mut(|p| {
            if failed.is_some() {
                return;
            }
            match take_tensor(&mut map, p.name(), p.value().shape()) {
                Ok(t) => p.set_value(t),
                Err(e) => failed = Some(e),
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        self.backbone.load_buffers(&mut map)?;
        self.coarse.load_buffers(&mut map)?;
        if let Some(name) = map.keys().next() {
            return Err(TrackError::Config(format!(
                "checkpoint has {} unknown tensor(s), first: {name}",
                map.len()
            )));
        }
        Ok(())
    }
}
