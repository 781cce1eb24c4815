//! Slice-level dense kernels shared by forward and backward rules.
//!
//! All matrices are row-major and every routine accumulates into `out`.

/// Products at or above this many multiply-adds go to the blocked GEMM.
const GEMM_MIN_WORK: usize = 2048;

/// `out[m×n] += a · b` where element `(i, p)` of `a` sits at
/// `a[i·ra + p·ca]` and element `(p, j)` of `b` at `b[p·rb + j·cb]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    ra: usize,
    ca: usize,
    b: &[f64],
    rb: usize,
    cb: usize,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * ra + (k - 1) * ca < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rb + (n - 1) * cb < b.len());
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the strides above address only elements inside `a`, `b` and
    // `out` (checked in debug builds and guaranteed by every caller's shape
    // contract), and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ra as isize,
            ca as isize,
            b.as_ptr(),
            rb as isize,
            cb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= GEMM_MIN_WORK {
        return gemm(a, k, 1, b, n, 1, m, k, n, out);
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= GEMM_MIN_WORK {
        return gemm(a, k, 1, b, 1, k, m, k, n, out);
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= GEMM_MIN_WORK {
        return gemm(a, 1, m, b, n, 1, m, k, n, out);
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent partial sums so the loop vectorizes.
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// True when no element is NaN or infinite. `v · 0` is zero for finite `v`
/// and NaN otherwise, so one branch-free reduction suffices.
pub(crate) fn all_finite(x: &[f64]) -> bool {
    let mut acc = [0.0; 4];
    let chunks = x.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|v| v * 0.0).sum();
    for c in chunks {
        for k in 0..4 {
            acc[k] += c[k] * 0.0;
        }
    }
    acc.iter().sum::<f64>() + tail == 0.0
}

/// Transpose of a row-major `[m×n]` matrix.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
