//! Dense inner loops. Reductions accumulate in eight fixed lanes so the
//! compiler can vectorize them while the summation order stays fixed.

use super::tensor::Real;

const LANES: usize = 8;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
pub fn lane_sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let ch = a.chunks_exact(LANES);
    let rem = ch.remainder();
    for x in ch {
        for i in 0..LANES {
            acc[i] += x[i];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for &v in rem {
        s += v;
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// c[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_strided(m, k, n, a, (k, 1), b, (n, 1), c, (n, 1), T::one());
}

/// c[m×n] += aᵀ · b with a stored [k×m] and b stored [k×n]
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_strided(m, k, n, a, (1, m), b, (n, 1), c, (n, 1), T::one());
}

/// c[m×n] = aᵀ · b, ignoring the prior contents of c
pub fn gemm_tn_into<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_strided(m, k, n, a, (1, m), b, (n, 1), c, (n, 1), T::zero());
}

/// c[m×n] += a · bᵀ with a stored [m×k] and b stored [n×k]
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_strided(m, k, n, a, (k, 1), b, (1, k), c, (n, 1), T::one());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        let mut c2 = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c2);
        let mut c3 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c3);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let want: f64 = a.iter().map(|v| v * v).sum();
        assert_eq!(dot(&a, &a), want);
        assert_eq!(lane_sum(&a), 171.0);
    }
}
