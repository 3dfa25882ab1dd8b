use crate::error::{fmt_shape, Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

impl Ctx<'_> {
    /// Channel-wise valid cross-correlation: the template slides over the
    /// search map within bounds, each channel independently. Output extents
    /// are search minus template plus one.
    pub fn depthwise_xcorr(&self, search: &Var, template: &Var) -> Result<Var> {
        let (c, hs, ws) = match search.shape() {
            &[c, h, w] => (c, h, w),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "depthwise_xcorr search",
                    expected: "3 (CHW)",
                    got: s.len(),
                })
            }
        };
        let (ct, ht, wt) = match template.shape() {
            &[c, h, w] => (c, h, w),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "depthwise_xcorr template",
                    expected: "3 (CHW)",
                    got: s.len(),
                })
            }
        };
        if c != ct {
            return Err(TensorError::ShapeMismatch {
                context: "depthwise_xcorr channels",
                expected: format!("{c}"),
                got: format!("{ct}"),
            });
        }
        if ht > hs || wt > ws {
            return Err(TensorError::InvalidArgument {
                context: "depthwise_xcorr",
                message: format!(
                    "template {} does not fit search {}",
                    fmt_shape(template.shape()),
                    fmt_shape(search.shape())
                ),
            });
        }
        let (ho, wo) = (hs - ht + 1, ws - wt + 1);

        let sv = search.value().as_slice();
        let tv = template.value().as_slice();
        let mut y = vec![0.0f32; c * ho * wo];
        for ch in 0..c {
            let splane = &sv[ch * hs * ws..(ch + 1) * hs * ws];
            let tplane = &tv[ch * ht * wt..(ch + 1) * ht * wt];
            let out = &mut y[ch * ho * wo..(ch + 1) * ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f32;
                    for u in 0..ht {
                        let srow = &splane[(oh + u) * ws + ow..(oh + u) * ws + ow + wt];
                        let trow = &tplane[u * wt..(u + 1) * wt];
                        for (s, t) in srow.iter().zip(trow) {
                            acc += s * t;
                        }
                    }
                    out[oh * wo + ow] = acc;
                }
            }
        }
        let out = Tensor::from_vec(&[c, ho, wo], y)?;

        let s_saved = search.value().clone();
        let t_saved = template.value().clone();
        Ok(self.register(
            out,
            &[search, template],
            Box::new(move |g| {
                let gs = g.as_slice();
                let sv = s_saved.as_slice();
                let tv = t_saved.as_slice();
                let mut gsearch = vec![0.0f32; sv.len()];
                let mut gtemplate = vec![0.0f32; tv.len()];
                for ch in 0..c {
                    let gplane = &gs[ch * ho * wo..(ch + 1) * ho * wo];
                    let splane = &sv[ch * hs * ws..(ch + 1) * hs * ws];
                    let tplane = &tv[ch * ht * wt..(ch + 1) * ht * wt];
                    let gsp = &mut gsearch[ch * hs * ws..(ch + 1) * hs * ws];
                    let gtp = &mut gtemplate[ch * ht * wt..(ch + 1) * ht * wt];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv = gplane[oh * wo + ow];
                            if gv == 0.0 {
                                continue;
                            }
                            for u in 0..ht {
                                let s_base = (oh + u) * ws + ow;
                                let t_base = u * wt;
                                for v in 0..wt {
                                    gsp[s_base + v] += gv * tplane[t_base + v];
                                    gtp[t_base + v] += gv * splane[s_base + v];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(s_saved.shape(), gsearch).unwrap()),
                    Some(Tensor::from_vec(t_saved.shape(), gtemplate).unwrap()),
                ]
            }),
        ))
    }
}
