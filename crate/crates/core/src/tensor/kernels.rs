use super::Scalar;

/// Strided 2-D view into a flat buffer: element `(r, c)` lives at
/// `offset + r * rs + c * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(cols: usize) -> Self {
        View {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `[_, cols]` matrix.
    pub fn transposed(cols: usize) -> Self {
        View {
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    fn last_index(self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C[m×n] <- alpha * A[m×k] * B[k×n] + beta * C`, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                let i = cv.offset + r * cv.rs + col * cv.cs;
                c[i] = beta * c[i];
            }
        }
        return;
    }
    assert!(av.last_index(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(bv.last_index(k, n) < b.len(), "gemm: B view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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

/// Plain row-major product `a[m×k] · b[k×n]`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_view(
        m,
        k,
        n,
        T::one(),
        a,
        View::rows(k),
        b,
        View::rows(n),
        T::zero(),
        &mut out,
        View::rows(n),
    );
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `x · Φ(x)` with the exact Gaussian CDF.
#[inline]
pub fn gelu_exact<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

/// d/dx of [`gelu_exact`]: `Φ(x) + x · φ(x)`.
#[inline]
pub(crate) fn gelu_exact_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    cdf + x * pdf
}

/// In-place numerically stable softmax over one row.
#[inline]
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
