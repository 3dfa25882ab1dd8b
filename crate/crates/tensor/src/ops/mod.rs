//! Operator implementations. Every public operator is a method on
//! [`crate::Ctx`]: it validates shapes, computes the forward value, and when
//! the context records to a [`crate::GradGraph`] it registers a closure
//! producing the parents' gradient contributions.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod pool;
mod reduce;
mod resize;
mod shape;
mod softmax;
mod xcorr;

pub use norm::BatchNormOutput;

pub(crate) mod gemm {
    /// Thin safe wrapper over `matrixmultiply::sgemm` for row-major buffers
    /// with explicit strides. C must already have the right length.
    #[allow(clippy::too_many_arguments)]
    pub fn sgemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        debug_assert!(span(m, k, rsa, csa) <= a.len());
        debug_assert!(span(k, n, rsb, csb) <= b.len());
        debug_assert!(span(m, n, rsc, csc) <= c.len());
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
        let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
        debug_assert!(last >= 0, "negative strides unsupported");
        last as usize + 1
    }
}
