//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything the Transformer needs is here: 2-D matrix products, elementwise
//! arithmetic, softmax, layer normalisation, row gathers (embedding lookup),
//! masked cross-entropy and a fused multi-head attention kernel. Production
//! code runs in `f32`; the same graph can be instantiated in `f64` for
//! finite-difference gradient verification.

mod graph;
pub mod gten;
mod tensor;

pub use graph::{AttnBlock, Graph, Var};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Epsilon added to the variance under the square root in layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Real scalar type the graph can run on.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on strided row-major buffers.
    ///
    /// Callers guarantee the strides address memory inside the slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output buffer too small");
                if k == 0 {
                    for x in &mut c[..m * n] {
                        *x *= beta;
                    }
                    return;
                }
                let last = |rs: isize, cs: isize, r: usize, col: usize| {
                    (r as isize - 1) * rs + (col as isize - 1) * cs
                };
                assert!((last(rsa, csa, m, k) as usize) < a.len(), "gemm lhs out of bounds");
                assert!((last(rsb, csb, k, n) as usize) < b.len(), "gemm rhs out of bounds");
                // SAFETY: bounds of all three operands checked above; the
                // output is a dense m x n row-major block.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
