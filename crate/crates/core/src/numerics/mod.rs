//! Dense arrays, eager kernels and a tape-based reverse-mode differentiator.
//!
//! Everything is row-major. Training runs in `f32`; every kernel is generic
//! over [`Scalar`] so the same code path can be replayed in `f64` when
//! checking gradients or exact equivalences.

mod array;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod kernels;
mod params;
mod resize;

pub use array::Array;
pub use graph::{Grads, Graph, Var};
pub use kernels::{embedding_lookup, gelu, layer_norm, matmul, softmax};
pub use params::{AdamW, AdamWConfig, Param, ParamId, ParamStore};
pub use resize::{bilinear_resize, ResizePlan};

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type understood by the kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * A * B + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// The strided views described by the arguments must lie inside the
    /// allocations the pointers come from.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    /// Row-major `rows x cols` block, optionally read transposed.
    pub fn dense(rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            // stored as cols x rows
            MatView {
                offset: 0,
                rows,
                cols,
                rs: 1,
                cs: rows,
            }
        } else {
            MatView {
                offset: 0,
                rows,
                cols,
                rs: cols,
                cs: 1,
            }
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c[cv] = a[av] * b[bv] (+ c[cv] if accumulate)`.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    c: &mut [T],
    cv: MatView,
    accumulate: bool,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last_index() < c.len(), "gemm output view out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[cv.offset + i * cv.rs + j * cv.cs] = T::zero();
                }
            }
        }
        return;
    }
    assert!(av.last_index() < a.len(), "gemm lhs view out of bounds");
    assert!(bv.last_index() < b.len(), "gemm rhs view out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: every view was bounds-checked against its slice above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
