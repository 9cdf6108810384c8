//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition and
//! the PSD matrix square root used by the Fréchet distance.

use ndarray::Array2;

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns): `a = v * diag(e) * v^T`.
pub fn sym_eig(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eig: square matrix required");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);

    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let e: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    (e, v)
}

/// Symmetric PSD square root with negative eigenvalues clipped at `-clip_tol`
/// (values in [-clip_tol, 0) clamp to 0; anything more negative panics,
/// signalling a genuinely non-PSD input).
pub fn sym_sqrt(a: &Array2<f64>, clip_tol: f64) -> Array2<f64> {
    let (e, v) = sym_eig(a);
    let n = a.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let ev = e[i];
        assert!(
            ev >= -clip_tol,
            "sym_sqrt: eigenvalue {ev} below clip tolerance -{clip_tol}"
        );
        d[[i, i]] = ev.max(0.0).sqrt();
    }
    v.dot(&d).dot(&v.t())
}

/// Trace of a square matrix.
pub fn trace(a: &Array2<f64>) -> f64 {
    (0..a.nrows()).map(|i| a[[i, i]]).sum()
}
