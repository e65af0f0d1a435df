//! Cyclic Jacobi eigenvalue iteration for dense real symmetric matrices.
//!
//! Each sweep visits every off-diagonal pair `(p, q)` once and applies the
//! plane rotation that annihilates `a[p][q]`. Off-diagonal mass decreases
//! quadratically once the diagonal is nearly dominant, so the matrices used
//! here (D ≤ 64) converge in well under twenty sweeps.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues and an orthonormal eigenvector matrix (as columns) of the
/// symmetric `n × n` matrix stored row-major in `a`. The eigenvalues are
/// unsorted; `a` is destroyed.
pub(crate) fn jacobi_in_place(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), n * n);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n <= 1 {
        return (a.to_vec(), v);
    }

    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off == 0.0 {
            break;
        }

        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let g = 100.0 * apq.abs();
                // Once the element is negligible against both diagonal
                // entries it cannot change them; drop it instead of rotating.
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }

                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // A <- A J (columns p, q)
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                // A <- J^T A (rows p, q)
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let values = (0..n).map(|i| a[i * n + i]).collect();
    (values, v)
}

/// Sorts eigenpairs by descending eigenvalue and fixes the sign of every
/// eigenvector so that its first non-negligible component is positive.
pub(crate) fn canonicalize(values: &[f64], vectors_row_major: &[f64], n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: ties keep the solver's column order, which is itself a
    // deterministic function of the input.
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    let sorted = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let scale = (0..n).map(|r| vectors_row_major[r * n + src].abs()).fold(0.0, f64::max);
        let lead = (0..n)
            .map(|r| vectors_row_major[r * n + src])
            .find(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE))
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[(r, col)] = sign * vectors_row_major[r * n + src];
        }
    }
    (sorted, vecs)
}
