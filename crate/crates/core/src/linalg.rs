//! Symmetric eigendecomposition and PSD matrix square roots, used by the
//! Fréchet distance between Gaussians.

use crate::tensor::Mat;

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns `(eigenvalues, v)` with `a ≈ v · diag(w) · vᵀ`; eigenvectors are
/// the columns of `v`. The input is symmetrized first.
pub fn sym_eig(a: &Mat<f64>) -> (Vec<f64>, Mat<f64>) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "sym_eig needs a square matrix");
    let mut m = Mat::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rotate rows/cols p and q of m
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let w = (0..n).map(|i| m.get(i, i)).collect();
    (w, v)
}

fn frob(a: &Mat<f64>) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetric square root of a PSD matrix; negative eigenvalues from rounding
/// are clamped at zero.
pub fn sqrtm_psd(a: &Mat<f64>) -> Mat<f64> {
    let n = a.rows();
    let (w, v) = sym_eig(a);
    let sq: Vec<f64> = w.iter().map(|&x| x.max(0.0).sqrt()).collect();
    // v · diag(sq) · vᵀ
    let scaled = Mat::from_fn(n, n, |i, j| v.get(i, j) * sq[j]);
    let out = scaled.matmul_nt(&v);
    // symmetrize the rounding residue away
    Mat::from_fn(n, n, |i, j| 0.5 * (out.get(i, j) + out.get(j, i)))
}

/// Sum of square roots of the (clamped) eigenvalues, i.e. tr(A^{1/2}).
pub fn trace_sqrtm_psd(a: &Mat<f64>) -> f64 {
    let (w, _) = sym_eig(a);
    w.iter().map(|&x| x.max(0.0).sqrt()).sum()
}
