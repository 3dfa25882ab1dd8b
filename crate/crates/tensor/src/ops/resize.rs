use crate::error::{Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

/// Align-corners source coordinate for output index `a`: the first and last
/// samples land exactly on the first and last input positions. Returns the
/// two neighbor indices and the interpolation fraction.
fn source_taps(a: usize, out_len: usize, in_len: usize) -> (usize, usize, f32) {
    let src = if out_len == 1 {
        (in_len - 1) as f64 / 2.0
    } else {
        a as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    };
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

impl Ctx<'_> {
    /// Bilinear interpolation of NCHW maps onto a new spatial grid with
    /// align-corners coordinates. Upsampling back to the same extents is the
    /// identity.
    pub fn bilinear_resize(&self, x: &Var, target_h: usize, target_w: usize) -> Result<Var> {
        let (n, c, h, w) = match x.shape() {
            &[n, c, h, w] => (n, c, h, w),
            s => {
                return Err(TensorError::RankMismatch {
                    context: "bilinear_resize",
                    expected: "4 (NCHW)",
                    got: s.len(),
                })
            }
        };
        if target_h == 0 || target_w == 0 {
            return Err(TensorError::InvalidArgument {
                context: "bilinear_resize",
                message: "target extents must be at least 1".into(),
            });
        }

        let rows: Vec<(usize, usize, f32)> =
            (0..target_h).map(|a| source_taps(a, target_h, h)).collect();
        let cols: Vec<(usize, usize, f32)> =
            (0..target_w).map(|a| source_taps(a, target_w, w)).collect();

        let xs = x.value().as_slice();
        let mut y = vec![0.0f32; n * c * target_h * target_w];
        let mut o = 0;
        for plane_idx in 0..n * c {
            let plane = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
            for &(y0, y1, fy) in &rows {
                for &(x0, x1, fx) in &cols {
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bottom = v10 + (v11 - v10) * fx;
                    y[o] = top + (bottom - top) * fy;
                    o += 1;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, target_h, target_w], y)?;

        let in_shape = x.shape().to_vec();
        let in_numel = x.value().numel();
        Ok(self.register(
            out,
            &[x],
            Box::new(move |g| {
                let gs = g.as_slice();
                let mut gx = vec![0.0f32; in_numel];
                let mut o = 0;
                for plane_idx in 0..n * c {
                    let plane = &mut gx[plane_idx * h * w..(plane_idx + 1) * h * w];
                    for &(y0, y1, fy) in &rows {
                        for &(x0, x1, fx) in &cols {
                            let gv = gs[o];
                            o += 1;
                            plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, gx).unwrap())]
            }),
        ))
    }
}
