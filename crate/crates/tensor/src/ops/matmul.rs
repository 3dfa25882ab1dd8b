use super::gemm::sgemm;
use crate::error::{fmt_shape, Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

fn expect_rank2(context: &'static str, v: &Var) -> Result<(usize, usize)> {
    match v.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(TensorError::RankMismatch {
            context,
            expected: "2",
            got: s.len(),
        }),
    }
}

impl Ctx<'_> {
    /// y = x @ w + bias with x: [T, Din], w: [Din, Dout], bias: [Dout].
    pub fn linear(&self, x: &Var, w: &Var, bias: Option<&Var>) -> Result<Var> {
        let (t, din) = expect_rank2("linear input", x)?;
        let (din_w, dout) = expect_rank2("linear weight", w)?;
        if din != din_w {
            return Err(TensorError::ShapeMismatch {
                context: "linear input vs weight",
                expected: format!("inner dimension {din}"),
                got: format!("weight {}", fmt_shape(w.shape())),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(TensorError::ShapeMismatch {
                    context: "linear bias",
                    expected: format!("{dout}"),
                    got: fmt_shape(b.shape()),
                });
            }
        }

        let mut y = vec![0.0f32; t * dout];
        sgemm(
            t,
            din,
            dout,
            1.0,
            x.value().as_slice(),
            din as isize,
            1,
            w.value().as_slice(),
            dout as isize,
            1,
            0.0,
            &mut y,
            dout as isize,
            1,
        );
        if let Some(b) = bias {
            let bv = b.value().as_slice();
            for row in y.chunks_exact_mut(dout) {
                for (v, &bi) in row.iter_mut().zip(bv) {
                    *v += bi;
                }
            }
        }
        let y = Tensor::from_vec(&[t, dout], y)?;

        let xv = x.value().clone();
        let wv = w.value().clone();
        let has_bias = bias.is_some();
        let backward = Box::new(move |g: &Tensor| {
            let gs = g.as_slice();
            let mut gx = vec![0.0f32; t * din];
            sgemm(
                t,
                dout,
                din,
                1.0,
                gs,
                dout as isize,
                1,
                wv.as_slice(),
                1,
                dout as isize,
                0.0,
                &mut gx,
                din as isize,
                1,
            );
            let mut gw = vec![0.0f32; din * dout];
            sgemm(
                din,
                t,
                dout,
                1.0,
                xv.as_slice(),
                1,
                din as isize,
                gs,
                dout as isize,
                1,
                0.0,
                &mut gw,
                dout as isize,
                1,
            );
            let mut out = vec![
                Some(Tensor::from_vec(&[t, din], gx).unwrap()),
                Some(Tensor::from_vec(&[din, dout], gw).unwrap()),
            ];
            if has_bias {
                let mut gb = vec![0.0f32; dout];
                for row in gs.chunks_exact(dout) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push(Some(Tensor::from_vec(&[dout], gb).unwrap()));
            }
            out
        });

        Ok(match bias {
            Some(b) => self.register(y, &[x, w, b], backward),
            None => self.register(y, &[x, w], backward),
        })
    }

    /// y = a @ b with a: [M, K], b: [K, N].
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = expect_rank2("matmul lhs", a)?;
        let (k_b, n) = expect_rank2("matmul rhs", b)?;
        if k != k_b {
            return Err(TensorError::ShapeMismatch {
                context: "matmul inner dimension",
                expected: format!("{k}"),
                got: format!("{k_b}"),
            });
        }
        let mut y = vec![0.0f32; m * n];
        sgemm(
            m,
            k,
            n,
            1.0,
            a.value().as_slice(),
            k as isize,
            1,
            b.value().as_slice(),
            n as isize,
            1,
            0.0,
            &mut y,
            n as isize,
            1,
        );
        let y = Tensor::from_vec(&[m, n], y)?;
        let av = a.value().clone();
        let bv = b.value().clone();
        Ok(self.register(
            y,
            &[a, b],
            Box::new(move |g| {
                let gs = g.as_slice();
                // ga = g @ b^T
                let mut ga = vec![0.0f32; m * k];
                sgemm(
                    m,
                    n,
                    k,
                    1.0,
                    gs,
                    n as isize,
                    1,
                    bv.as_slice(),
                    1,
                    n as isize,
                    0.0,
                    &mut ga,
                    k as isize,
                    1,
                );
                // gb = a^T @ g
                let mut gb = vec![0.0f32; k * n];
                sgemm(
                    k,
                    m,
                    n,
                    1.0,
                    av.as_slice(),
                    1,
                    k as isize,
                    gs,
                    n as isize,
                    1,
                    0.0,
                    &mut gb,
                    n as isize,
                    1,
                );
                vec![
                    Some(Tensor::from_vec(&[m, k], ga).unwrap()),
                    Some(Tensor::from_vec(&[k, n], gb).unwrap()),
                ]
            }),
        ))
    }

    /// y = a @ b^T with a: [M, K], b: [N, K]. The natural shape for
    /// query-times-key score matrices.
    pub fn matmul_tb(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = expect_rank2("matmul_tb lhs", a)?;
        let (n, k_b) = expect_rank2("matmul_tb rhs", b)?;
        if k != k_b {
            return Err(TensorError::ShapeMismatch {
                context: "matmul_tb inner dimension",
                expected: format!("{k}"),
                got: format!("{k_b}"),
            });
        }
        let mut y = vec![0.0f32; m * n];
        sgemm(
            m,
            k,
            n,
            1.0,
            a.value().as_slice(),
            k as isize,
            1,
            b.value().as_slice(),
            1,
            k as isize,
            0.0,
            &mut y,
            n as isize,
            1,
        );
        let y = Tensor::from_vec(&[m, n], y)?;
        let av = a.value().clone();
        let bv = b.value().clone();
        Ok(self.register(
            y,
            &[a, b],
            Box::new(move |g| {
                let gs = g.as_slice();
                // ga = g @ b
                let mut ga = vec![0.0f32; m * k];
                sgemm(
                    m,
                    n,
                    k,
                    1.0,
                    gs,
                    n as isize,
                    1,
                    bv.as_slice(),
                    k as isize,
                    1,
                    0.0,
                    &mut ga,
                    k as isize,
                    1,
                );
                // gb = g^T @ a
                let mut gb = vec![0.0f32; n * k];
                sgemm(
                    n,
                    m,
                    k,
                    1.0,
                    gs,
                    1,
                    n as isize,
                    av.as_slice(),
                    k as isize,
                    1,
                    0.0,
                    &mut gb,
                    k as isize,
                    1,
                );
                vec![
                    Some(Tensor::from_vec(&[m, k], ga).unwrap()),
                    Some(Tensor::from_vec(&[n, k], gb).unwrap()),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Plain triple-loop product, the oracle for the gemm-backed ops.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k) = (a.extent(0), a.extent(1));
        let n = b.extent(1);
        let mut y = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.as_slice()[i * k + p] * b.as_slice()[p * n + j];
                }
                y[i * n + j] = acc;
            }
        }
        y
    }

    #[test]
    fn linear_with_identity_weight_reproduces_input() {
        let cx = Ctx::inference();
        let x = cx.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let w = cx.input(eye);
        let y = cx.linear(&x, &w, None).unwrap();
        assert!(y.value().bitwise_eq(x.value()));
    }

    #[test]
    fn linear_bias_shifts_every_row() {
        let cx = Ctx::inference();
        let x = cx.input(Tensor::zeros(&[3, 2]));
        let w = cx.input(Tensor::zeros(&[2, 4]));
        let b = cx.input(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = cx.linear(&x, &w, Some(&b)).unwrap();
        for row in 0..3 {
            for col in 0..4 {
                assert_eq!(y.value().at(&[row, col]), (col + 1) as f32);
            }
        }
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let cx = Ctx::inference();
        let a = Tensor::from_fn(&[5, 7], |i| ((i * 37 + 11) % 23) as f32 * 0.25 - 2.0);
        let b = Tensor::from_fn(&[7, 4], |i| ((i * 53 + 5) % 19) as f32 * 0.5 - 4.0);
        let expected = matmul_oracle(&a, &b);
        let y = cx.matmul(&cx.input(a), &cx.input(b)).unwrap();
        for (got, want) in y.value().as_slice().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_tb_equals_matmul_of_transpose() {
        let cx = Ctx::inference();
        let a = Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.713).cos());
        let b = Tensor::from_fn(&[3, 6], |i| (i as f32 * 0.271).sin());
        let bt = Tensor::from_fn(&[6, 3], |i| {
            let (r, c) = (i / 3, i % 3);
            b.at(&[c, r])
        });
        let via_tb = cx.matmul_tb(&cx.input(a.clone()), &cx.input(b)).unwrap();
        let via_plain = cx.matmul(&cx.input(a), &cx.input(bt)).unwrap();
        assert!(via_tb.value().max_abs_diff(via_plain.value()) <= 1e-6);
    }

    #[test]
    fn inner_dimension_mismatch_is_reported() {
        let cx = Ctx::inference();
        let a = cx.input(Tensor::zeros(&[2, 3]));
        let b = cx.input(Tensor::zeros(&[4, 5]));
        assert!(cx.matmul(&a, &b).is_err());
        assert!(cx.matmul_tb(&a, &b).is_err());
    }
}
