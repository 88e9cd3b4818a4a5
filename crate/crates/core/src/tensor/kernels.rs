//! Dense row-major matrix kernels shared by the tape ops.
//!
//! All kernels accumulate into `c`; callers zero the output when they want a
//! plain product.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Floating-point operations (2 per multiply-add) performed by matrix
/// products on this thread since the last reset.
pub fn flop_count() -> u64 {
    FLOPS.with(|f| f.get())
}

pub fn reset_flop_count() {
    FLOPS.with(|f| f.set(0));
}

pub(crate) fn count_matmul(p: usize, q: usize, r: usize) {
    FLOPS.with(|f| f.set(f.get() + 2 * (p * q * r) as u64));
}

/// `c[m,n] += A[m,k] · B[k,n]` with element strides `(row, col)` for each
/// operand.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers assert every operand length against its stated
    // shape, so all strided accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[p,r] += a[p,q] · b[q,r]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    assert!(a.len() == p * q && b.len() == q * r && c.len() == p * r);
    dgemm(p, q, r, a, (q as isize, 1), b, (r as isize, 1), c);
}

/// `c[p,r] += a[p,q] · b[r,q]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    assert!(a.len() == p * q && b.len() == r * q && c.len() == p * r);
    dgemm(p, q, r, a, (q as isize, 1), b, (1, q as isize), c);
}

/// `c[q,r] += a[p,q]ᵀ · b[p,r]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    assert!(a.len() == p * q && b.len() == p * r && c.len() == q * r);
    dgemm(q, p, r, a, (1, q as isize), b, (r as isize, 1), c);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    c[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        c
    }

    fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; m.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = m[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn kernels_accumulate_and_skip_empty_dims() {
        let mut c = vec![1.0; 4];
        gemm_nn(&[1.0, 2.0], &[3.0, 4.0], &mut c, 2, 1, 2);
        assert_eq!(c, vec![4.0, 5.0, 7.0, 9.0]);
        let mut c = vec![0.5; 6];
        gemm_nn(&[], &[], &mut c, 2, 0, 3);
        assert_eq!(c, vec![0.5; 6]);
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (p, q, r) = (3, 4, 5);
        let a: Vec<f64> = (0..p * q).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..q * r).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, p, q, r);

        let mut c = vec![0.0; p * r];
        gemm_nn(&a, &b, &mut c, p, q, r);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        let mut c = vec![0.0; p * r];
        gemm_nt(&a, &transpose(&b, q, r), &mut c, p, q, r);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        let mut c = vec![0.0; p * r];
        gemm_tn(&transpose(&a, p, q), &b, &mut c, q, p, r);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
