use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type usable in tensors and graphs.
///
/// `f32` is used for training runs, `f64` for gradient checks.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static + std::iter::Sum {
    const DTYPE: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// memory regions of the stated extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major view descriptor for [`gemm_view`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(cols: usize) -> Self {
        Self { offset: 0, rs: cols as isize, cs: 1 }
    }

    pub fn transposed(cols: usize) -> Self {
        Self { offset: 0, rs: 1, cs: cols as isize }
    }
}

/// Safe wrapper over [`Scalar::gemm`] with bounds checks on the extreme
/// element of every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: MatView, r: usize, cc: usize| {
        v.offset as isize + (r.saturating_sub(1)) as isize * v.rs + (cc.saturating_sub(1)) as isize * v.cs
    };
    assert!(k == 0 || (last(av, m, k) as usize) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || (last(bv, k, n) as usize) < b.len(), "gemm: rhs out of bounds");
    assert!((last(cv, m, n) as usize) < c.len(), "gemm: output out of bounds");
    // SAFETY: extents checked above; `c` is a unique borrow distinct from `a`/`b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}
