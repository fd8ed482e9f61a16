//! Dense matrix kernels. Each output row is accumulated by one sequential
//! loop, so results do not depend on whether rows run in parallel.

use super::Scalar;
use crate::parallel::for_each_row;

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    out
}

/// `a[k,m]ᵀ · b[k,n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

pub(crate) fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let close = |x: &[f64]| x.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul_nn(&a, &b, m, k, n)));
        assert!(close(&matmul_nt(&a, &transpose(&b, k, n), m, k, n)));
        assert!(close(&matmul_tn(&transpose(&a, m, k), &b, k, m, n)));
    }
}
