use crate::error::{fmt_shape, Result, TensorError};
use crate::graph::{Ctx, Var};
use crate::tensor::Tensor;

/// Inputs above this value saturate in [`Ctx::exp`], keeping the output
/// finite for any finite input. exp(30) is around 1.07e13, far beyond any
/// meaningful box dimension or attention weight.
pub const EXP_SATURATION: f32 = 30.0;

pub(crate) fn same_shape(context: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            context,
            expected: fmt_shape(a.shape()),
            got: fmt_shape(b.shape()),
        });
    }
    Ok(())
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<f32> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip preserves shape")
}

impl Ctx<'_> {
    pub fn relu(&self, x: &Var) -> Result<Var> {
        let y = x.value().map(|v| if v > 0.0 { v } else { 0.0 });
        let xv = x.value().clone();
        Ok(self.register(
            y,
            &[x],
            Box::new(move |g| {
                let gx = zip(g, &xv, |gi, vi| if vi > 0.0 { gi } else { 0.0 });
                vec![Some(gx)]
            }),
        ))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let y = zip(a.value(), b.value(), |x, y| x + y);
        Ok(self.register(
            y,
            &[a, b],
            Box::new(move |g| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let y = zip(a.value(), b.value(), |x, y| x - y);
        Ok(self.register(
            y,
            &[a, b],
            Box::new(move |g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let y = zip(a.value(), b.value(), |x, y| x * y);
        let av = a.value().clone();
        let bv = b.value().clone();
        Ok(self.register(
            y,
            &[a, b],
            Box::new(move |g| {
                let ga = zip(g, &bv, |gi, v| gi * v);
                let gb = zip(g, &av, |gi, v| gi * v);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("div", a, b)?;
        let y = zip(a.value(), b.value(), |x, y| x / y);
        let av = a.value().clone();
        let bv = b.value().clone();
        Ok(self.register(
            y,
            &[a, b],
            Box::new(move |g| {
                let ga = zip(g, &bv, |gi, v| gi / v);
                let mut gb = g.clone();
                {
                    let dst = gb.make_mut();
                    for ((d, &x), &y) in dst.iter_mut().zip(av.as_slice()).zip(bv.as_slice()) {
                        *d = -*d * x / (y * y);
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Elementwise product with a constant tensor. No gradient flows to the
    /// constant, which makes this the right op for masks and fixed weights.
    pub fn mul_const(&self, a: &Var, constant: &Tensor) -> Result<Var> {
        if a.shape() != constant.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "mul_const",
                expected: fmt_shape(a.shape()),
                got: fmt_shape(constant.shape()),
            });
        }
        let y = zip(a.value(), constant, |x, c| x * c);
        let cv = constant.clone();
        Ok(self.register(
            y,
            &[a],
            Box::new(move |g| vec![Some(zip(g, &cv, |gi, c| gi * c))]),
        ))
    }

    /// Elementwise minimum against a constant tensor. Ties route the gradient
    /// to the variable input.
    pub fn min_const(&self, a: &Var, constant: &Tensor) -> Result<Var> {
        if a.shape() != constant.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "min_const",
                expected: fmt_shape(a.shape()),
                got: fmt_shape(constant.shape()),
            });
        }
        let y = zip(a.value(), constant, f32::min);
        let av = a.value().clone();
        let cv = constant.clone();
        Ok(self.register(
            y,
            &[a],
            Box::new(move |g| {
                let mut gx = g.clone();
                {
                    let dst = gx.make_mut();
                    for ((d, &x), &c) in dst.iter_mut().zip(av.as_slice()).zip(cv.as_slice()) {
                        if x > c {
                            *d = 0.0;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// y = mul * x + add, elementwise with scalars.
    pub fn affine(&self, a: &Var, mul: f32, add: f32) -> Result<Var> {
        let y = a.value().map(|v| mul * v + add);
        Ok(self.register(
            y,
            &[a],
            Box::new(move |g| vec![Some(g.map(|v| mul * v))]),
        ))
    }

    pub fn scale(&self, a: &Var, factor: f32) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    pub fn add_scalar(&self, a: &Var, value: f32) -> Result<Var> {
        self.affine(a, 1.0, value)
    }

    /// y = value - x.
    pub fn rsub_scalar(&self, a: &Var, value: f32) -> Result<Var> {
        self.affine(a, -1.0, value)
    }

    /// Elementwise exponential, saturating at [`EXP_SATURATION`] so finite
    /// inputs always produce finite outputs. The gradient is zero in the
    /// saturated region.
    pub fn exp(&self, a: &Var) -> Result<Var> {
        let y = a.value().map(|v| v.min(EXP_SATURATION).exp());
        let av = a.value().clone();
        let yv = y.clone();
        Ok(self.register(
            y,
            &[a],
            Box::new(move |g| {
                let mut gx = zip(g, &yv, |gi, v| gi * v);
                {
                    let dst = gx.make_mut();
                    for (d, &x) in dst.iter_mut().zip(av.as_slice()) {
                        if x >= EXP_SATURATION {
                            *d = 0.0;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn sigmoid(&self, a: &Var) -> Result<Var> {
        let y = a.value().map(sigmoid_stable);
        let yv = y.clone();
        Ok(self.register(
            y,
            &[a],
            Box::new(move |g| {
                let gx = zip(g, &yv, |gi, s| gi * s * (1.0 - s));
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn sigmoid_stable(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
