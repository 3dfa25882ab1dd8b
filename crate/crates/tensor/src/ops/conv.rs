use super::gemm::sgemm;
use crate::error::{fmt_shape, Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn m(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_dims(x: &Var, w: &Var, stride: usize, padding: usize) -> Result<ConvDims> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "conv2d input",
            expected: "4 (NCHW)",
            got: xs.len(),
        });
    }
    if ws.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "conv2d weight",
            expected: "4 (OIHW)",
            got: ws.len(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            context: "conv2d",
            message: "stride must be at least 1".into(),
        });
    }
    let (n, cin, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_w, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin != cin_w {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d input channels",
            expected: format!("{cin} (input has {cin} channels)"),
            got: format!("weight {}", fmt_shape(ws)),
        });
    }
    let (hp, wp) = (h + 2 * padding, w_in + 2 * padding);
    if kh > hp || kw > wp {
        return Err(TensorError::InvalidArgument {
            context: "conv2d",
            message: format!(
                "kernel {kh}x{kw} does not fit padded input {hp}x{wp} (input {h}x{w_in}, padding {padding})"
            ),
        });
    }
    Ok(ConvDims {
        n,
        cin,
        h,
        w: w_in,
        cout,
        kh,
        kw,
        stride,
        padding,
        ho: (hp - kh) / stride + 1,
        wo: (wp - kw) / stride + 1,
    })
}

/// Unfolds one sample into a [K, M] patch matrix with K = Cin*kh*kw rows and
/// M = Ho*Wo columns. Out-of-bounds taps read as zero.
fn im2col(x: &[f32], d: &ConvDims, col: &mut [f32]) {
    debug_assert_eq!(col.len(), d.k() * d.m());
    col.fill(0.0);
    let m = d.m();
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for u in 0..d.kh {
            for v in 0..d.kw {
                let row = ((ci * d.kh + u) * d.kw + v) * m;
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + u) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let dst = &mut col[row + oh * d.wo..row + (oh + 1) * d.wo];
                    for ow in 0..d.wo {
                        let iw = (ow * d.stride + v) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.w as isize {
                            dst[ow] = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Folds a [K, M] gradient matrix back onto the input plane, accumulating
/// overlapping taps. Exact adjoint of [`im2col`].
fn col2im(col: &[f32], d: &ConvDims, gx: &mut [f32]) {
    let m = d.m();
    for ci in 0..d.cin {
        let plane = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for u in 0..d.kh {
            for v in 0..d.kw {
                let row = ((ci * d.kh + u) * d.kw + v) * m;
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + u) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let src = &col[row + oh * d.wo..row + (oh + 1) * d.wo];
                    for ow in 0..d.wo {
                        let iw = (ow * d.stride + v) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.w as isize {
                            dst_row[iw as usize] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

impl Ctx<'_> {
    /// 2-D convolution over NCHW input with OIHW weights, zero padding, and a
    /// shared stride for both spatial axes.
    pub fn conv2d(
        &self,
        x: &Var,
        w: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let d = conv_dims(x, w, stride, padding)?;
        if let Some(b) = bias {
            if b.shape() != [d.cout] {
                return Err(TensorError::ShapeMismatch {
                    context: "conv2d bias",
                    expected: format!("{}", d.cout),
                    got: fmt_shape(b.shape()),
                });
            }
        }

        let (k, m) = (d.k(), d.m());
        let mut col = vec![0.0f32; k * m];
        let mut y = vec![0.0f32; d.n * d.cout * m];
        let xv = x.value().as_slice();
        let wv = w.value().as_slice();
        for s in 0..d.n {
            im2col(&xv[s * d.cin * d.h * d.w..], &d, &mut col);
            sgemm(
                d.cout,
                k,
                m,
                1.0,
                wv,
                k as isize,
                1,
                &col,
                m as isize,
                1,
                0.0,
                &mut y[s * d.cout * m..(s + 1) * d.cout * m],
                m as isize,
                1,
            );
        }
        if let Some(b) = bias {
            let bv = b.value().as_slice();
            for s in 0..d.n {
                for co in 0..d.cout {
                    let chunk = &mut y[(s * d.cout + co) * m..(s * d.cout + co + 1) * m];
                    for v in chunk {
                        *v += bv[co];
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[d.n, d.cout, d.ho, d.wo], y)?;

        let x_saved = x.value().clone();
        let w_saved = w.value().clone();
        let has_bias = bias.is_some();
        let backward = Box::new(move |g: &Tensor| {
            let gs = g.as_slice();
            let (k, m) = (d.k(), d.m());
            let mut col = vec![0.0f32; k * m];
            let mut gcol = vec![0.0f32; k * m];
            let mut gx = vec![0.0f32; x_saved.numel()];
            let mut gw = vec![0.0f32; w_saved.numel()];
            let xv = x_saved.as_slice();
            let wv = w_saved.as_slice();
            for s in 0..d.n {
                let gy = &gs[s * d.cout * m..(s + 1) * d.cout * m];
                im2col(&xv[s * d.cin * d.h * d.w..], &d, &mut col);
                // gw += gy @ col^T
                sgemm(
                    d.cout,
                    m,
                    k,
                    1.0,
                    gy,
                    m as isize,
                    1,
                    &col,
                    1,
                    m as isize,
                    1.0,
                    &mut gw,
                    k as isize,
                    1,
                );
                // gcol = w^T @ gy
                sgemm(
                    k,
                    d.cout,
                    m,
                    1.0,
                    wv,
                    1,
                    k as isize,
                    gy,
                    m as isize,
                    1,
                    0.0,
                    &mut gcol,
                    m as isize,
                    1,
                );
                col2im(&gcol, &d, &mut gx[s * d.cin * d.h * d.w..]);
            }
            let mut out = vec![
                Some(Tensor::from_vec(x_saved.shape(), gx).unwrap()),
                Some(Tensor::from_vec(w_saved.shape(), gw).unwrap()),
            ];
            if has_bias {
                let mut gb = vec![0.0f32; d.cout];
                for s in 0..d.n {
                    for co in 0..d.cout {
                        let chunk = &gs[(s * d.cout + co) * m..(s * d.cout + co + 1) * m];
                        gb[co] += chunk.iter().sum::<f32>();
                    }
                }
                out.push(Some(Tensor::from_vec(&[d.cout], gb).unwrap()));
            }
            out
        });

        Ok(match bias {
            Some(b) => self.register(y, &[x, w, b], backward),
            None => self.register(y, &[x, w], backward),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution by definition, the oracle for the gemm-backed path.
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (n, cin, h, win) = (x.extent(0), x.extent(1), x.extent(2), x.extent(3));
        let (cout, _, kh, kw) = (w.extent(0), w.extent(1), w.extent(2), w.extent(3));
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (win + 2 * padding - kw) / stride + 1;
        let mut y = Tensor::zeros(&[n, cout, ho, wo]);
        {
            let out = y.make_mut();
            for s in 0..n {
                for co in 0..cout {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = 0.0f32;
                            for ci in 0..cin {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let ih = (oh * stride + u) as isize - padding as isize;
                                        let iw = (ow * stride + v) as isize - padding as isize;
                                        if ih < 0
                                            || iw < 0
                                            || ih >= h as isize
                                            || iw >= win as isize
                                        {
                                            continue;
                                        }
                                        acc += x.at(&[s, ci, ih as usize, iw as usize])
                                            * w.at(&[co, ci, u, v]);
                                    }
                                }
                            }
                            if let Some(b) = bias {
                                acc += b.as_slice()[co];
                            }
                            out[((s * cout + co) * ho + oh) * wo + ow] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(shape: &[usize], seed: u32) -> Tensor {
        let mut state = seed;
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            (state >> 8) as f32 / (1u32 << 24) as f32 - 0.5
        })
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        // Constant c through a 3x3 all-ones kernel sums Cin*9 copies of c.
        let cx = Ctx::inference();
        let c = 0.37f32;
        let x = cx.input(Tensor::full(&[1, 5, 9, 9], c));
        let w = cx.input(Tensor::ones(&[2, 5, 3, 3]));
        let y = cx.conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 7, 7]);
        let expected = 9.0 * c * 5.0;
        for &v in y.value().as_slice() {
            assert!((v - expected).abs() <= 1e-4);
        }
    }

    #[test]
    fn matches_direct_convolution() {
        let cases = [
            (&[2usize, 3, 9, 11][..], &[4usize, 3, 3, 3][..], 1, 0),
            (&[1, 2, 13, 13], &[5, 2, 5, 5], 2, 0),
            (&[2, 4, 7, 7], &[3, 4, 3, 3], 1, 1),
            (&[1, 1, 12, 9], &[2, 1, 11, 5], 2, 0),
            (&[1, 3, 6, 6], &[2, 3, 1, 1], 1, 0),
        ];
        for (i, (xs, ws, stride, padding)) in cases.into_iter().enumerate() {
            let x = pseudo(xs, 11 + i as u32);
            let w = pseudo(ws, 77 + i as u32);
            let b = pseudo(&[ws[0]], 131 + i as u32);
            let expected = conv_oracle(&x, &w, Some(&b), stride, padding);
            let cx = Ctx::inference();
            let y = cx
                .conv2d(&cx.input(x), &cx.input(w), Some(&cx.input(b)), stride, padding)
                .unwrap();
            assert_eq!(y.shape(), expected.shape());
            assert!(
                y.value().max_abs_diff(&expected) <= 1e-4,
                "case {i} diverged from direct convolution"
            );
        }
    }

    #[test]
    fn channel_mismatch_is_reported_with_dimensions() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::zeros(&[1, 3, 8, 8]));
        let w = cx.input(Tensor::zeros(&[4, 5, 3, 3]));
        let err = cx.conv2d(&x, &w, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('5'), "got {msg}");
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::zeros(&[1, 1, 10, 10]));
        let w = cx.input(Tensor::zeros(&[1, 1, 11, 11]));
        assert!(cx.conv2d(&x, &w, None, 2, 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = pseudo(&[1, 2, 6, 7], 3);
        let w = pseudo(&[3, 2, 3, 3], 5);
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| {
                let wv = cx.input(w.clone());
                cx.conv2d(v, &wv, None, 2, 1)
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let x = pseudo(&[2, 2, 5, 5], 7);
        let w = pseudo(&[2, 2, 3, 3], 9);
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| {
                let xv = cx.input(x.clone());
                cx.conv2d(&xv, v, None, 1, 0)
            },
            &w,
            1e-2,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn bias_gradient_matches_finite_differences() {
        let x = pseudo(&[1, 2, 5, 5], 13);
        let w = pseudo(&[3, 2, 3, 3], 17);
        let b = pseudo(&[3], 19);
        let err = crate::gradcheck::grad_check(
            &|cx: &Ctx, v: &Var| {
                let xv = cx.input(x.clone());
                let wv = cx.input(w.clone());
                cx.conv2d(&xv, &wv, Some(v), 1, 0)
            },
            &b,
            1e-2,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }
}
