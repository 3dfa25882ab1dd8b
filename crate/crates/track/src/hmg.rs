use prl_tensor::{init, Ctx, Parameter, Tensor, Var};
use rand::Rng;

use crate::config::HmgConfig;
use crate::error::{Result, TrackError};
use crate::layers::{LayerNorm, Linear, Visitor, VisitorMut};

/// Number of score-matrix entries evaluated by the tiered attention versus
/// attending every tier's queries over every tier's keys, for `t` tokens per
/// tier. The tiered form computes three T-by-2T score matrices; the
/// all-pairs form computes nine T-by-T matrices.
pub fn attention_entry_counts(t: u64) -> (u64, u64) {
    (3 * t * (2 * t), 9 * t * t)
}

/// One cross-attention read: queries against the token-axis concatenation of
/// the given key tensors, mixing the matching value concatenation. Returns
/// the normalized attention map alongside the output so row-sum and oracle
/// checks can look inside.
pub fn cross_attention(
    cx: &Ctx,
    q: &Var,
    keys: &[&Var],
    values: &[&Var],
    scale_dim: usize,
) -> Result<(Var, Var)> {
    if scale_dim == 0 {
        return Err(TrackError::Config("attention scale dimension is zero".into()));
    }
    let kcat = cx.concat_rows(keys)?;
    let vcat = cx.concat_rows(values)?;
    let scores = cx.matmul_tb(q, &kcat)?;
    let scores = cx.scale(&scores, 1.0 / (scale_dim as f32).sqrt())?;
    let attn = cx.softmax_rows(&scores)?;
    let out = cx.matmul(&attn, &vcat)?;
    Ok((attn, out))
}

/// The three hierarchy reads over per-tier query/key/value triples, ordered
/// shallow to deep: level-4 queries over levels 3+4, level-5 queries over
/// levels 3+5, and level-5 queries over levels 4+5. Shallow queries are
/// never issued.
pub fn hierarchy_cross_attention(
    cx: &Ctx,
    q: &[Var; 3],
    k: &[Var; 3],
    v: &[Var; 3],
    scale_dim: usize,
) -> Result<([Var; 3], [Var; 3])> {
    let (a34, h34) = cross_attention(cx, &q[1], &[&k[0], &k[1]], &[&v[0], &v[1]], scale_dim)?;
    let (a35, h35) = cross_attention(cx, &q[2], &[&k[0], &k[2]], &[&v[0], &v[2]], scale_dim)?;
    let (a45, h45) = cross_attention(cx, &q[2], &[&k[1], &k[2]], &[&v[1], &v[2]], scale_dim)?;
    Ok(([a34, a35, a45], [h34, h35, h45]))
}

/// Reference form that attends every tier's queries over every tier's keys
/// and values, used by the benchmark to price the tiered variant against
/// full pairwise attention. Returns the nine outputs in row-major tier
/// order.
pub fn full_pairwise_attention(
    cx: &Ctx,
    q: &[Var; 3],
    k: &[Var; 3],
    v: &[Var; 3],
    scale_dim: usize,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(9);
    for qi in q {
        for (kj, vj) in k.iter().zip(v) {
            let (_, h) = cross_attention(cx, qi, &[kj], &[vj], scale_dim)?;
            out.push(h);
        }
    }
    Ok(out)
}

/// Everything one block computes, kept for inspection: the tier pairings,
/// attention maps, hierarchy outputs, and both normalized residual stages.
pub struct TokenBundle {
    pub x: Var,
    pub qhat: Var,
    pub khat: Var,
    pub vhat: Var,
    /// Per-tier concatenation of query, key, and value slices.
    pub m: [Var; 3],
    pub attn: [Var; 3],
    pub h: [Var; 3],
    pub wc: Var,
    pub xo: Var,
}

/// One fusion block: tier-split projections, hierarchy cross-attention, and
/// a feed-forward stage, each with a residual connection and token
/// normalization.
pub struct HmgBlock {
    qproj: Linear,
    kproj: Linear,
    vproj: Linear,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
    cfg: HmgConfig,
}

impl HmgBlock {
    pub fn new<R: Rng>(rng: &mut R, index: usize, cfg: &HmgConfig) -> Self {
        let name = |part: &str| format!("hmg.block{index}.{part}");
        let d = cfg.d_model;
        HmgBlock {
            qproj: Linear::new(rng, &name("qproj"), d, d),
            kproj: Linear::new(rng, &name("kproj"), d, d),
            vproj: Linear::new(rng, &name("vproj"), d, d),
            ln1: LayerNorm::new(&name("ln1"), d),
            ffn1: Linear::new(rng, &name("ffn1"), d, cfg.ffn_hidden),
            ffn2: Linear::new(rng, &name("ffn2"), cfg.ffn_hidden, d),
            ln2: LayerNorm::new(&name("ln2"), d),
            cfg: *cfg,
        }
    }

    /// Splits a projected token matrix into its three contiguous channel
    /// tiers, shallow first.
    fn tiers(&self, cx: &Ctx, x: &Var) -> Result<[Var; 3]> {
        let t = self.cfg.tier_dim;
        Ok([
            cx.slice_cols(x, 0, t)?,
            cx.slice_cols(x, t, t)?,
            cx.slice_cols(x, 2 * t, t)?,
        ])
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> Result<Var> {
        Ok(self.forward_detailed(cx, x)?.xo)
    }

    pub fn forward_detailed(&self, cx: &Ctx, x: &Var) -> Result<TokenBundle> {
        let qhat = self.qproj.forward(cx, x)?;
        let khat = self.kproj.forward(cx, x)?;
        let vhat = self.vproj.forward(cx, x)?;
        let q = self.tiers(cx, &qhat)?;
        let k = self.tiers(cx, &khat)?;
        let v = self.tiers(cx, &vhat)?;
        let m = [
            cx.concat_cols(&[&q[0], &k[0], &v[0]])?,
            cx.concat_cols(&[&q[1], &k[1], &v[1]])?,
            cx.concat_cols(&[&q[2], &k[2], &v[2]])?,
        ];
        let (attn, h) = hierarchy_cross_attention(cx, &q, &k, &v, self.cfg.attn_scale_dim)?;
        let fused = cx.concat_cols(&[&h[0], &h[1], &h[2]])?;
        let wc = self.ln1.forward(cx, &cx.add(&fused, x)?)?;
        let ff = self.ffn2.forward(cx, &cx.relu(&self.ffn1.forward(cx, &wc)?)?)?;
        let xo = self.ln2.forward(cx, &cx.add(&ff, &wc)?)?;
        Ok(TokenBundle {
            x: x.clone(),
            qhat,
            khat,
            vhat,
            m,
            attn,
            h,
            wc,
            xo,
        })
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        self.qproj.visit(f);
        self.kproj.visit(f);
        self.vproj.visit(f);
        self.ln1.visit(f);
        self.ffn1.visit(f);
        self.ffn2.visit(f);
        self.ln2.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.qproj.visit_mut(f);
        self.kproj.visit_mut(f);
        self.vproj.visit_mut(f);
        self.ln1.visit_mut(f);
        self.ffn1.visit_mut(f);
        self.ffn2.visit_mut(f);
        self.ln2.visit_mut(f);
    }
}

/// Token-attention fusion over the three correlation maps: one token per
/// map cell, channel concatenation across levels, a linear embedding with a
/// learned positional term, and a stack of fusion blocks.
pub struct Hmg {
    embed: Linear,
    posembed: Parameter,
    blocks: Vec<HmgBlock>,
    cfg: HmgConfig,
    grid: usize,
}

impl Hmg {
    pub fn new<R: Rng>(rng: &mut R, cfg: &HmgConfig, level_channels: usize, grid: usize) -> Self {
        let tokens = grid * grid;
        let embed = Linear::new(rng, "hmg.embed", 3 * level_channels, cfg.d_model);
        let posembed = Parameter::new(
            "hmg.posembed",
            init::uniform(rng, &[tokens, cfg.d_model], -0.02, 0.02),
        );
        let blocks = (0..cfg.num_blocks)
            .map(|i| HmgBlock::new(rng, i, cfg))
            .collect();
        Hmg {
            embed,
            posembed,
            blocks,
            cfg: *cfg,
            grid,
        }
    }

    pub fn config(&self) -> &HmgConfig {
        &self.cfg
    }

    /// Flattens the three equally sized correlation maps to tokens: cell
    /// (r, c) becomes token r*grid + c with the three levels' channels
    /// concatenated, then embedded and given the positional term.
    pub fn tokenize(&self, cx: &Ctx, maps: [&Var; 3]) -> Result<Var> {
        let spatial = maps[0].shape()[1..].to_vec();
        for m in &maps[1..] {
            if m.shape()[1..] != spatial[..] {
                return Err(TrackError::Config(format!(
                    "correlation maps disagree in extent: {:?} vs {:?}",
                    &m.shape()[1..],
                    spatial
                )));
            }
        }
        if spatial != [self.grid, self.grid] {
            return Err(TrackError::Config(format!(
                "correlation maps are {spatial:?}, the fusion stack was built for {g}x{g}",
                g = self.grid
            )));
        }
        let tokens = [
            cx.map_to_tokens(maps[0])?,
            cx.map_to_tokens(maps[1])?,
            cx.map_to_tokens(maps[2])?,
        ];
        let cat = cx.concat_cols(&[&tokens[0], &tokens[1], &tokens[2]])?;
        let x = self.embed.forward(cx, &cat)?;
        let pos = cx.bind(&self.posembed);
        Ok(cx.add(&x, &pos)?)
    }

    /// Full fusion pass returning the per-block inspection bundles.
    pub fn forward_detailed(&self, cx: &Ctx, maps: [&Var; 3]) -> Result<(Var, Vec<TokenBundle>)> {
        let mut x = self.tokenize(cx, maps)?;
        let mut bundles = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let bundle = block.forward_detailed(cx, &x)?;
            x = bundle.xo.clone();
            bundles.push(bundle);
        }
        Ok((x, bundles))
    }

    /// Fusion pass reshaped back to a channel map for the heads.
    pub fn forward_map(&self, cx: &Ctx, maps: [&Var; 3]) -> Result<Var> {
        let (tokens, _) = self.forward_detailed(cx, maps)?;
        Ok(cx.tokens_to_map(&tokens, self.grid, self.grid)?)
    }

    pub(crate) fn visit<'p>(&'p self, f: &mut Visitor<'_, 'p>) {
        self.embed.visit(f);
        f(&self.posembed);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.embed.visit_mut(f);
        f(&mut self.posembed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

/// Nested-loop attention reference in 64-bit arithmetic: explicit score
/// matrix, explicit stabilized softmax, explicit mixing. Written directly
/// from the definition so the operator pipeline can be checked against it.
pub fn dense_attention_oracle(
    q: &Tensor,
    keys: &[&Tensor],
    values: &[&Tensor],
    scale_dim: usize,
) -> Vec<f32> {
    let t = q.extent(0);
    let d = q.extent(1);
    let kq = q.as_slice();
    let total_keys: usize = keys.iter().map(|k| k.extent(0)).sum();
    let mut kcat = Vec::with_capacity(total_keys * d);
    for k in keys {
        kcat.extend_from_slice(k.as_slice());
    }
    let mut vcat = Vec::with_capacity(total_keys * d);
    for v in values {
        vcat.extend_from_slice(v.as_slice());
    }
    let scale = 1.0 / (scale_dim as f64).sqrt();
    let mut out = vec![0.0f32; t * d];
    for i in 0..t {
        let mut scores = vec![0.0f64; total_keys];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0f64;
            for c in 0..d {
                dot += kq[i * d + c] as f64 * kcat[j * d + c] as f64;
            }
            *s = dot * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        for c in 0..d {
            let mut acc = 0.0f64;
            for (j, w) in weights.iter().enumerate() {
                acc += w * vcat[j * d + c] as f64;
            }
            out[i * d + c] = acc as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn small_cfg() -> HmgConfig {
        HmgConfig {
            d_model: 12,
            tier_dim: 4,
            num_blocks: 2,
            ffn_hidden: 24,
            attn_scale_dim: 4,
        }
    }

    #[test]
    fn tiered_attention_matches_the_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cx = Ctx::inference();
        for case in 0..20 {
            let t = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=8);
            let mk = |rng: &mut ChaCha8Rng| random_tensor(rng, &[t, d], 2.0);
            let q = [
                cx.input(mk(&mut rng)),
                cx.input(mk(&mut rng)),
                cx.input(mk(&mut rng)),
            ];
            let k = [
                cx.input(mk(&mut rng)),
                cx.input(mk(&mut rng)),
                cx.input(mk(&mut rng)),
            ];
            let v = [
                cx.input(mk(&mut rng)),
                cx.input(mk(&mut rng)),
                cx.input(mk(&mut rng)),
            ];
            let (attn, h) = hierarchy_cross_attention(&cx, &q, &k, &v, d).unwrap();
            let pairs = [(1, [0, 1]), (2, [0, 2]), (2, [1, 2])];
            for (slot, (qi, kv)) in pairs.iter().enumerate() {
                let want = dense_attention_oracle(
                    q[*qi].value(),
                    &[k[kv[0]].value(), k[kv[1]].value()],
                    &[v[kv[0]].value(), v[kv[1]].value()],
                    d,
                );
                let got = h[slot].value().as_slice();
                let diff = got
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(diff <= 1e-5, "case {case} pair {slot}: diff {diff}");
                for row in attn[slot].value().as_slice().chunks(2 * t) {
                    let sum: f32 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn identical_keys_average_the_concatenated_values() {
        let cx = Ctx::inference();
        let t = 3;
        let d = 4;
        let q = cx.input(Tensor::from_fn(&[t, d], |i| i as f32 * 0.3));
        let k = cx.input(Tensor::ones(&[t, d]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v1 = random_tensor(&mut rng, &[t, d], 1.0);
        let v2 = random_tensor(&mut rng, &[t, d], 1.0);
        let (_, h) = cross_attention(
            &cx,
            &q,
            &[&k, &k],
            &[&cx.input(v1.clone()), &cx.input(v2.clone())],
            d,
        )
        .unwrap();
        for i in 0..t {
            for c in 0..d {
                let mut mean = 0.0;
                for row in 0..t {
                    mean += v1.as_slice()[row * d + c] + v2.as_slice()[row * d + c];
                }
                mean /= (2 * t) as f32;
                let got = h.value().as_slice()[i * d + c];
                assert!((got - mean).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn attention_commutes_with_token_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cx = Ctx::inference();
        let t = 5;
        let d = 3;
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |m: &Tensor| {
            let src = m.as_slice();
            Tensor::from_fn(&[t, d], |i| src[perm[i / d] * d + i % d])
        };
        let qs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[t, d], 1.5)).collect();
        let ks: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[t, d], 1.5)).collect();
        let vs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[t, d], 1.5)).collect();
        let pack = |ms: &[Tensor]| [cx.input(ms[0].clone()), cx.input(ms[1].clone()), cx.input(ms[2].clone())];
        let packp = |ms: &[Tensor]| {
            [
                cx.input(permute(&ms[0])),
                cx.input(permute(&ms[1])),
                cx.input(permute(&ms[2])),
            ]
        };
        let (_, base) =
            hierarchy_cross_attention(&cx, &pack(&qs), &pack(&ks), &pack(&vs), d).unwrap();
        let (_, perm_out) =
            hierarchy_cross_attention(&cx, &packp(&qs), &packp(&ks), &packp(&vs), d).unwrap();
        for slot in 0..3 {
            let want = permute(base[slot].value());
            assert!(perm_out[slot].value().max_abs_diff(&want) <= 1e-5);
        }
    }

    #[test]
    fn identity_projections_make_tiers_plain_column_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg();
        let mut block = HmgBlock::new(&mut rng, 0, &cfg);
        let d = cfg.d_model;
        let identity = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        block.visit_mut(&mut |p| {
            if p.name().ends_with("qproj.weight") {
                p.set_value(identity.clone());
            } else if p.name().ends_with("qproj.bias") {
                p.set_value(Tensor::zeros(&[d]));
            }
        });
        let cx = Ctx::inference();
        let x = random_tensor(&mut rng, &[6, d], 1.0);
        let bundle = block.forward_detailed(&cx, &cx.input(x.clone())).unwrap();
        assert!(bundle.qhat.value().bitwise_eq(&x));
        let tiers = [
            &bundle.m[0].value().as_slice()[..],
            &bundle.m[1].value().as_slice()[..],
            &bundle.m[2].value().as_slice()[..],
        ];
        for (tier, m) in tiers.iter().enumerate() {
            for row in 0..6 {
                for c in 0..cfg.tier_dim {
                    let got = m[row * 3 * cfg.tier_dim + c];
                    let want = x.as_slice()[row * d + tier * cfg.tier_dim + c];
                    assert_eq!(got.to_bits(), want.to_bits());
                }
            }
        }
        let roundtrip = cx
            .concat_cols(&[
                &cx.slice_cols(&bundle.qhat, 0, cfg.tier_dim).unwrap(),
                &cx.slice_cols(&bundle.qhat, cfg.tier_dim, cfg.tier_dim).unwrap(),
                &cx.slice_cols(&bundle.qhat, 2 * cfg.tier_dim, cfg.tier_dim).unwrap(),
            ])
            .unwrap();
        assert!(roundtrip.value().bitwise_eq(bundle.qhat.value()));
    }

    #[test]
    fn zeroed_ffn_leaves_only_the_normalized_attention_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = small_cfg();
        let mut block = HmgBlock::new(&mut rng, 0, &cfg);
        block.visit_mut(&mut |p| {
            if p.name().contains("ffn") {
                p.set_value(Tensor::zeros(p.value().shape()));
            }
        });
        let cx = Ctx::inference();
        let x = random_tensor(&mut rng, &[5, cfg.d_model], 1.0);
        let bundle = block.forward_detailed(&cx, &cx.input(x)).unwrap();
        let want = block.ln2.forward(&cx, &bundle.wc).unwrap();
        assert!(bundle.xo.value().bitwise_eq(want.value()));
    }

    #[test]
    fn fusion_stack_keeps_token_shape_and_empty_stack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let grid = 5;
        let cw = 6;
        let cfg = small_cfg();
        let hmg = Hmg::new(&mut rng, &cfg, cw, grid);
        let cx = Ctx::inference();
        let maps: Vec<Tensor> = (0..3)
            .map(|_| random_tensor(&mut rng, &[cw, grid, grid], 1.0))
            .collect();
        let vars = [cx.input(maps[0].clone()), cx.input(maps[1].clone()), cx.input(maps[2].clone())];
        let refs = [&vars[0], &vars[1], &vars[2]];
        let (tokens, bundles) = hmg.forward_detailed(&cx, refs).unwrap();
        assert_eq!(tokens.shape(), &[grid * grid, cfg.d_model]);
        assert_eq!(bundles.len(), cfg.num_blocks);
        let map = hmg.forward_map(&cx, refs).unwrap();
        assert_eq!(map.shape(), &[cfg.d_model, grid, grid]);

        let empty = Hmg::new(
            &mut rng,
            &HmgConfig {
                num_blocks: 0,
                ..cfg
            },
            cw,
            grid,
        );
        let (tokens, bundles) = empty.forward_detailed(&cx, refs).unwrap();
        let plain = empty.tokenize(&cx, refs).unwrap();
        assert!(bundles.is_empty());
        assert!(tokens.value().bitwise_eq(plain.value()));
    }

    #[test]
    fn tokenize_maps_cell_row_col_to_token_row_times_grid_plus_col() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = 4;
        let cw = 2;
        let cfg = HmgConfig {
            d_model: 6,
            tier_dim: 2,
            num_blocks: 0,
            ffn_hidden: 12,
            attn_scale_dim: 2,
        };
        let mut hmg = Hmg::new(&mut rng, &cfg, cw, grid);
        hmg.visit_mut(&mut |p| {
            if p.name() == "hmg.posembed" || p.name() == "hmg.embed.bias" {
                p.set_value(Tensor::zeros(p.value().shape()));
            }
        });
        let cx = Ctx::inference();
        let (r, c) = (2usize, 3usize);
        let marker = Tensor::from_fn(&[cw, grid, grid], |i| {
            if i % (grid * grid) == r * grid + c {
                1.0
            } else {
                0.0
            }
        });
        let zero = cx.input(Tensor::zeros(&[cw, grid, grid]));
        let tokens = hmg
            .tokenize(&cx, [&cx.input(marker), &zero, &zero])
            .unwrap();
        let data = tokens.value().as_slice();
        for row in 0..grid * grid {
            let nonzero = data[row * cfg.d_model..(row + 1) * cfg.d_model]
                .iter()
                .any(|&v| v != 0.0);
            assert_eq!(nonzero, row == r * grid + c, "token {row}");
        }
    }

    #[test]
    fn mismatched_map_extents_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hmg = Hmg::new(&mut rng, &small_cfg(), 4, 5);
        let cx = Ctx::inference();
        let a = cx.input(Tensor::zeros(&[4, 5, 5]));
        let b = cx.input(Tensor::zeros(&[4, 4, 4]));
        assert!(hmg.tokenize(&cx, [&a, &b, &a]).is_err());
        assert!(hmg.tokenize(&cx, [&b, &b, &b]).is_err());
    }

    #[test]
    fn entry_counts_favor_the_tiered_form() {
        let (tiered, full) = attention_entry_counts(441);
        assert_eq!(tiered, 3 * 441 * 882);
        assert_eq!(full, 9 * 441 * 441);
        assert!(tiered < full);
    }
}
