use crate::error::{fmt_shape, Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

impl Ctx<'_> {
    /// New shape over the same elements. Zero-copy on the forward value.
    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = x.value().reshaped(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.register(
            y,
            &[x],
            Box::new(move |g| vec![Some(g.reshaped(&orig).unwrap())]),
        ))
    }

    /// Concatenation of NCHW tensors along the channel axis. All inputs must
    /// agree on batch and spatial extents.
    pub fn concat_channels(&self, parts: &[&Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                context: "concat_channels",
                message: "no inputs".into(),
            });
        }
        let first = parts[0].shape();
        if first.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "concat_channels",
                expected: "4 (NCHW)",
                got: first.len(),
            });
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_channels",
                    expected: format!("{n}xCx{h}x{w}"),
                    got: fmt_shape(s),
                });
            }
            channels.push(s[1]);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut y = vec![0.0f32; n * c_total * plane];
        for s in 0..n {
            let mut dst_c = 0;
            for (p, &c) in parts.iter().zip(&channels) {
                let src = p.value().as_slice();
                let src_off = s * c * plane;
                let dst_off = (s * c_total + dst_c) * plane;
                y[dst_off..dst_off + c * plane]
                    .copy_from_slice(&src[src_off..src_off + c * plane]);
                dst_c += c;
            }
        }
        let out = Tensor::from_vec(&[n, c_total, h, w], y)?;
        let parts_refs: Vec<&Var> = parts.to_vec();
        let channels_b = channels.clone();
        Ok(self.register(
            out,
            &parts_refs,
            Box::new(move |g| {
                let gs = g.as_slice();
                let mut outs = Vec::with_capacity(channels_b.len());
                let mut src_c = 0;
                for &c in &channels_b {
                    let mut part = vec![0.0f32; n * c * plane];
                    for s in 0..n {
                        let src_off = (s * c_total + src_c) * plane;
                        part[s * c * plane..(s + 1) * c * plane]
                            .copy_from_slice(&gs[src_off..src_off + c * plane]);
                    }
                    outs.push(Some(Tensor::from_vec(&[n, c, h, w], part).unwrap()));
                    src_c += c;
                }
                outs
            }),
        ))
    }

    /// Concatenation of [T_i, D] matrices along the row (token) axis.
    pub fn concat_rows(&self, parts: &[&Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                context: "concat_rows",
                message: "no inputs".into(),
            });
        }
        let d = match parts[0].shape() {
            &[_, d] => d,
            s => {
                return Err(TensorError::RankMismatch {
                    context: "concat_rows",
                    expected: "2",
                    got: s.len(),
                })
            }
        };
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            match p.shape() {
                &[t, dp] if dp == d => rows.push(t),
                s => {
                    return Err(TensorError::ShapeMismatch {
                        context: "concat_rows",
                        expected: format!("Tx{d}"),
                        got: fmt_shape(s),
                    })
                }
            }
        }
        let t_total: usize = rows.iter().sum();
        let mut y = Vec::with_capacity(t_total * d);
        for p in parts {
            y.extend_from_slice(p.value().as_slice());
        }
        let out = Tensor::from_vec(&[t_total, d], y)?;
        let rows_b = rows.clone();
        Ok(self.register(
            out,
            &parts.to_vec(),
            Box::new(move |g| {
                let gs = g.as_slice();
                let mut outs = Vec::with_capacity(rows_b.len());
                let mut off = 0;
                for &t in &rows_b {
                    let part = gs[off * d..(off + t) * d].to_vec();
                    outs.push(Some(Tensor::from_vec(&[t, d], part).unwrap()));
                    off += t;
                }
                outs
            }),
        ))
    }

    /// Concatenation of [T, D_i] matrices along the column axis.
    pub fn concat_cols(&self, parts: &[&Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                context: "concat_cols",
                message: "no inputs".into(),
            });
        }
        let t = match parts[0].shape() {
            &[t, _] => t,
            s => {
                return Err(TensorError::RankMismatch {
                    context: "concat_cols",
                    expected: "2",
                    got: s.len(),
                })
            }
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            match p.shape() {
                &[tp, d] if tp == t => widths.push(d),
                s => {
                    return Err(TensorError::ShapeMismatch {
                        context: "concat_cols",
                        expected: format!("{t}xD"),
                        got: fmt_shape(s),
                    })
                }
            }
        }
        let d_total: usize = widths.iter().sum();
        let mut y = vec![0.0f32; t * d_total];
        for r in 0..t {
            let mut dst = r * d_total;
            for (p, &d) in parts.iter().zip(&widths) {
                let src = &p.value().as_slice()[r * d..(r + 1) * d];
                y[dst..dst + d].copy_from_slice(src);
                dst += d;
            }
        }
        let out = Tensor::from_vec(&[t, d_total], y)?;
        let widths_b = widths.clone();
        Ok(self.register(
            out,
            &parts.to_vec(),
            Box::new(move |g| {
                let gs = g.as_slice();
                let mut outs = Vec::with_capacity(widths_b.len());
                let mut col = 0;
                for &d in &widths_b {
                    let mut part = vec![0.0f32; t * d];
                    for r in 0..t {
                        part[r * d..(r + 1) * d]
                            .copy_from_slice(&gs[r * d_total + col..r * d_total + col + d]);
                    }
                    outs.push(Some(Tensor::from_vec(&[t, d], part).unwrap()));
                    col += d;
                }
                outs
            }),
        ))
    }

    /// Column slice [start, start+len) of a [T, D] matrix.
    pub fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = match x.shape() {
            &[t, d] => (t, d),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "slice_cols",
                    expected: "2",
                    got: s.len(),
                })
            }
        };
        if len == 0 || start + len > d {
            return Err(TensorError::InvalidArgument {
                context: "slice_cols",
                message: format!("slice [{start}, {}) out of width {d}", start + len),
            });
        }
        let xs = x.value().as_slice();
        let mut y = vec![0.0f32; t * len];
        for r in 0..t {
            y[r * len..(r + 1) * len].copy_from_slice(&xs[r * d + start..r * d + start + len]);
        }
        let out = Tensor::from_vec(&[t, len], y)?;
        Ok(self.register(
            out,
            &[x],
            Box::new(move |g| {
                let gs = g.as_slice();
                let mut gx = vec![0.0f32; t * d];
                for r in 0..t {
                    gx[r * d + start..r * d + start + len]
                        .copy_from_slice(&gs[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::from_vec(&[t, d], gx).unwrap())]
            }),
        ))
    }

    /// Extracts sample `index` of a batched NCHW tensor as a CHW tensor.
    pub fn batch_select(&self, x: &Var, index: usize) -> Result<Var> {
        let (n, c, h, w) = match x.shape() {
            &[n, c, h, w] => (n, c, h, w),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "batch_select",
                    expected: "4 (NCHW)",
                    got: s.len(),
                })
            }
        };
        if index >= n {
            return Err(TensorError::InvalidArgument {
                context: "batch_select",
                message: format!("index {index} out of batch {n}"),
            });
        }
        let len = c * h * w;
        let y = x.value().as_slice()[index * len..(index + 1) * len].to_vec();
        let out = Tensor::from_vec(&[c, h, w], y)?;
        Ok(self.register(
            out,
            &[x],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; n * len];
                gx[index * len..(index + 1) * len].copy_from_slice(g.as_slice());
                vec![Some(Tensor::from_vec(&[n, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// CHW feature map to a [H*W, C] token matrix, row-major over positions.
    pub fn map_to_tokens(&self, x: &Var) -> Result<Var> {
        let (c, h, w) = match x.shape() {
            &[c, h, w] => (c, h, w),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "map_to_tokens",
                    expected: "3 (CHW)",
                    got: s.len(),
                })
            }
        };
        let t = h * w;
        let xs = x.value().as_slice();
        let mut y = vec![0.0f32; t * c];
        for ch in 0..c {
            let plane = &xs[ch * t..(ch + 1) * t];
            for (pos, &v) in plane.iter().enumerate() {
                y[pos * c + ch] = v;
            }
        }
        let out = Tensor::from_vec(&[t, c], y)?;
        Ok(self.register(
            out,
            &[x],
            Box::new(move |g| {
                let gs = g.as_slice();
                let mut gx = vec![0.0f32; c * t];
                for ch in 0..c {
                    let plane = &mut gx[ch * t..(ch + 1) * t];
                    for (pos, slot) in plane.iter_mut().enumerate() {
                        *slot = gs[pos * c + ch];
                    }
                }
                vec![Some(Tensor::from_vec(&[c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// [H*W, C] token matrix back to a CHW map. Inverse of [`map_to_tokens`].
    pub fn tokens_to_map(&self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let (t, c) = match x.shape() {
            &[t, c] => (t, c),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "tokens_to_map",
                    expected: "2 (tokens x channels)",
                    got: s.len(),
                })
            }
        };
        if t != h * w {
            return Err(TensorError::ShapeMismatch {
                context: "tokens_to_map",
                expected: format!("{} tokens for a {h}x{w} grid", h * w),
                got: format!("{t}"),
            });
        }
        let xs = x.value().as_slice();
        let mut y = vec![0.0f32; c * t];
        for ch in 0..c {
            let plane = &mut y[ch * t..(ch + 1) * t];
            for (pos, slot) in plane.iter_mut().enumerate() {
                *slot = xs[pos * c + ch];
            }
        }
        let out = Tensor::from_vec(&[c, h, w], y)?;
        Ok(self.register(
            out,
            &[x],
            Box::new(move |g| {
                let gs = g.as_slice();
                let mut gx = vec![0.0f32; t * c];
                for ch in 0..c {
                    let plane = &gs[ch * t..(ch + 1) * t];
                    for (pos, &v) in plane.iter().enumerate() {
                        gx[pos * c + ch] = v;
                    }
                }
                vec![Some(Tensor::from_vec(&[t, c], gx).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GradGraph;

    #[test]
    fn concat_channels_stacks_in_order() {
        let cx = Ctx::inference();
        let a = cx.input(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = cx.input(Tensor::full(&[2, 2, 2, 2], 2.0));
        let y = cx.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        assert_eq!(y.value().at(&[1, 0, 0, 0]), 1.0);
        assert_eq!(y.value().at(&[1, 2, 1, 1]), 2.0);
    }

    #[test]
    fn concat_rows_then_slice_roundtrips() {
        let cx = Ctx::inference();
        let a = Tensor::from_fn(&[2, 3], |i| i as f32);
        let b = Tensor::from_fn(&[1, 3], |i| 10.0 + i as f32);
        let va = cx.input(a.clone());
        let vb = cx.input(b.clone());
        let y = cx.concat_rows(&[&va, &vb]).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        assert_eq!(y.value().at(&[2, 1]), 11.0);
    }

    #[test]
    fn concat_cols_interleaves_rows() {
        let cx = Ctx::inference();
        let a = cx.input(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = cx.input(Tensor::from_vec(&[2, 1], vec![9.0, 8.0]).unwrap());
        let y = cx.concat_cols(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.value().as_slice(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn slice_cols_picks_the_window() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::from_fn(&[2, 5], |i| i as f32));
        let y = cx.slice_cols(&x, 1, 3).unwrap();
        assert_eq!(y.value().as_slice(), &[1.0, 2.0, 3.0, 6.0, 7.0, 8.0]);
        assert!(cx.slice_cols(&x, 3, 3).is_err());
    }

    #[test]
    fn tokens_roundtrip_is_identity() {
        let cx = Ctx::inference();
        let x = Tensor::from_fn(&[3, 4, 5], |i| (i as f32).sqrt());
        let v = cx.input(x.clone());
        let tokens = cx.map_to_tokens(&v).unwrap();
        assert_eq!(tokens.shape(), &[20, 3]);
        let back = cx.tokens_to_map(&tokens, 4, 5).unwrap();
        assert!(back.value().bitwise_eq(&x));
    }

    #[test]
    fn map_to_tokens_places_positions_in_rows() {
        let cx = Ctx::inference();
        // Channel c holds constant value c; token rows must read [0, 1, 2].
        let x = cx.input(Tensor::from_fn(&[3, 2, 2], |i| (i / 4) as f32));
        let tokens = cx.map_to_tokens(&x).unwrap();
        for pos in 0..4 {
            for ch in 0..3 {
                assert_eq!(tokens.value().at(&[pos, ch]), ch as f32);
            }
        }
    }

    #[test]
    fn batch_select_gradient_hits_only_that_sample() {
        let graph = GradGraph::new();
        let cx = Ctx::traced(&graph);
        let x = cx.input(Tensor::ones(&[3, 1, 2, 2]));
        let s = cx.batch_select(&x, 1).unwrap();
        let loss = cx.sum_all(&s).unwrap();
        let store = graph.backward(&loss).unwrap();
        let g = store.grad_of(&x).unwrap();
        let expected = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(g.as_slice(), &expected);
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let graph = GradGraph::new();
        let cx = Ctx::traced(&graph);
        let a = cx.input(Tensor::ones(&[2, 2]));
        let b = cx.input(Tensor::ones(&[2, 3]));
        let y = cx.concat_cols(&[&a, &b]).unwrap();
        let scaled = cx.scale(&y, 2.0).unwrap();
        let loss = cx.sum_all(&scaled).unwrap();
        let store = graph.backward(&loss).unwrap();
        assert_eq!(store.grad_of(&a).unwrap().as_slice(), &[2.0; 4]);
        assert_eq!(store.grad_of(&b).unwrap().as_slice(), &[2.0; 6]);
    }
}
