//! Tiny dense kernels shared by the adaptive filters and the CNN.
//!
//! Accumulation order is fixed (four-lane unrolled) so results are identical
//! from run to run regardless of call site.

/// Dot product with a fixed four-accumulator reduction order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut sum = (s0 + s1) + (s2 + s3);
    for j in 4 * chunks..n {
        sum += a[j] * b[j];
    }
    sum
}

/// `acc += scale * values`, element-wise.
#[inline]
pub(crate) fn axpy(acc: &mut [f64], scale: f64, values: &[f64]) {
    debug_assert_eq!(acc.len(), values.len());
    for (a, &v) in acc.iter_mut().zip(values) {
        *a += scale * v;
    }
}
