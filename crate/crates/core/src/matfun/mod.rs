//! Symmetric eigendecomposition and spectral matrix functions.
//!
//! Every manifold operation in this crate reduces to `U · diag(f(λ)) · Uᵀ`
//! for some scalar `f`. [`SymMatrix`] and [`SpdMatrix`] cache their
//! eigendecomposition on first use, and matrices produced spectrally carry
//! their decomposition along, so chains such as `Z ↦ Z^p ↦ log(Z^p)` pay for
//! a single Jacobi solve.

mod jacobi;
mod scalar;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

pub use scalar::ScalarFun;

use crate::error::{Error, Result};

/// Absolute symmetry tolerance accepted by checked constructors.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Minimum ratio `λ_min / λ_max` accepted by [`SpdMatrix::new`].
pub const SPD_REL_TOL: f64 = 1e-12;

/// Eigenvalues sorted descending with orthonormal eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn min(&self) -> f64 {
        self.values[self.dim() - 1]
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }

    /// `U · diag(values) · Uᵀ`, symmetrized.
    pub fn reconstruct_with(&self, values: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= values[j];
        }
        symmetrize(&(scaled * self.vectors.transpose()))
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Fails if `m` is not square or deviates from symmetry by more than
/// [`SYMMETRY_TOL`].
pub fn sym_eig(m: &DMatrix<f64>) -> Result<EigenPair> {
    check_symmetric(m)?;
    Ok(eig_unchecked(m))
}

fn eig_unchecked(m: &DMatrix<f64>) -> EigenPair {
    let n = m.nrows();
    // Row-major copy of the symmetrized input.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    let (values, vectors) = jacobi::jacobi_in_place(&mut a, n);
    let (values, vectors) = jacobi::canonicalize(&values, &vectors, n);
    EigenPair { values, vectors }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::invalid(format!("expected a non-empty square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if !(d <= SYMMETRY_TOL) {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {d:e}"
                )));
            }
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    Ok(())
}

/// `(X + Xᵀ) / 2`.
pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

/// `A · Z · Aᵀ`, symmetrized to remove rounding asymmetry.
pub fn congruence(a: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(a * z * a.transpose()))
}

/// A real symmetric matrix with a lazily cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    mat: DMatrix<f64>,
    eig: OnceLock<EigenPair>,
}

impl PartialEq for SymMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.mat == other.mat
    }
}

impl SymMatrix {
    /// Checked constructor: square and symmetric within [`SYMMETRY_TOL`].
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&mat)?;
        Ok(Self::from_symmetrized(mat))
    }

    /// Replaces `mat` by `(mat + matᵀ)/2`; for results of computations that
    /// are symmetric up to rounding.
    pub fn from_symmetrized(mat: DMatrix<f64>) -> Self {
        assert!(mat.is_square(), "symmetric matrix must be square");
        let mat = symmetrize(&mat);
        Self { mat, eig: OnceLock::new() }
    }

    /// Builds `U · diag(values) · Uᵀ` and keeps the decomposition cached.
    pub fn from_spectrum(values: DVector<f64>, vectors: DMatrix<f64>) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
        let pair = if order.iter().enumerate().all(|(k, &i)| k == i) {
            EigenPair { values, vectors }
        } else {
            let sorted = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
            let cols: Vec<_> = order.iter().map(|&i| vectors.column(i).into_owned()).collect();
            EigenPair { values: sorted, vectors: DMatrix::from_columns(&cols) }
        };
        let mat = pair.reconstruct_with(&pair.values);
        let eig = OnceLock::new();
        let _ = eig.set(pair);
        Self { mat, eig }
    }

    /// Restores a serialized matrix together with its cached
    /// decomposition, bit for bit. No checks are made.
    pub fn from_parts(mat: DMatrix<f64>, eig: Option<EigenPair>) -> Self {
        let cell = OnceLock::new();
        if let Some(e) = eig {
            let _ = cell.set(e);
        }
        Self { mat, eig: cell }
    }

    /// The decomposition if it has been computed.
    pub fn cached_eig(&self) -> Option<&EigenPair> {
        self.eig.get()
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_symmetrized(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_symmetrized(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self::from_symmetrized(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn eig(&self) -> &EigenPair {
        self.eig.get_or_init(|| eig_unchecked(&self.mat))
    }

    pub fn norm(&self) -> f64 {
        self.mat.norm()
    }
}

/// A symmetric positive-definite matrix: a point on the SPD manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(SymMatrix);

impl SpdMatrix {
    /// Checked constructor: symmetric, with `λ_min > SPD_REL_TOL · λ_max`.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        Self::from_sym(SymMatrix::new(mat)?)
    }

    /// Validates positive definiteness of an already symmetric matrix.
    pub fn from_sym(sym: SymMatrix) -> Result<Self> {
        let eig = sym.eig();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || !(lo > SPD_REL_TOL * hi) {
            return Err(Error::Domain { op: "spd_matrix", min_eigenvalue: lo });
        }
        Ok(Self(sym))
    }

    /// Symmetrizes a computed matrix and validates it.
    pub fn from_computed(mat: DMatrix<f64>, context: &str) -> Result<Self> {
        Self::from_sym(SymMatrix::from_symmetrized(mat)).map_err(|e| match e {
            Error::Domain { min_eigenvalue, .. } => Error::numeric(format!(
                "{context}: result is not positive definite (smallest eigenvalue {min_eigenvalue:e})"
            )),
            other => other,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self(SymMatrix::identity(dim))
    }

    /// Panics unless every entry is positive.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        assert!(diag.iter().all(|&d| d > 0.0), "diagonal SPD matrix needs positive entries");
        Self(SymMatrix::from_diagonal(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.0.matrix()
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    pub fn into_sym(self) -> SymMatrix {
        self.0
    }

    pub fn eig(&self) -> &EigenPair {
        self.0.eig()
    }

    /// `f(Z)` for functions that keep the spectrum positive.
    pub fn map_positive(&self, f: ScalarFun) -> Result<SpdMatrix> {
        if matches!(f, ScalarFun::Log) {
            return Err(Error::invalid("map_positive: log does not map to positive definite matrices"));
        }
        let out = spd_map(self.as_sym(), f)?;
        Self::from_sym(out)
    }

    pub fn sqrt(&self) -> SpdMatrix {
        self.map_positive(ScalarFun::Sqrt).expect("sqrt of SPD is SPD")
    }

    pub fn inv_sqrt(&self) -> SpdMatrix {
        self.map_positive(ScalarFun::InvSqrt).expect("inverse square root of SPD is SPD")
    }

    pub fn inverse(&self) -> SpdMatrix {
        self.map_positive(ScalarFun::Power(-1.0)).expect("inverse of SPD is SPD")
    }

    pub fn powf(&self, p: f64) -> SpdMatrix {
        self.map_positive(ScalarFun::Power(p)).expect("power of SPD is SPD")
    }

    pub fn log(&self) -> SymMatrix {
        spd_map(self.as_sym(), ScalarFun::Log).expect("log of SPD is defined")
    }
}

fn check_domain(eig: &EigenPair, f: ScalarFun) -> Result<()> {
    if f.requires_positive() && !(eig.min() > 0.0) {
        return Err(Error::Domain { op: f.name(), min_eigenvalue: eig.min() });
    }
    Ok(())
}

/// `U · diag(f(λ)) · Uᵀ` with `(λ, U) = sym_eig(Z)`.
pub fn spd_map(z: &SymMatrix, f: ScalarFun) -> Result<SymMatrix> {
    let eig = z.eig();
    check_domain(eig, f)?;
    let values = eig.values.map(|l| f.value(l));
    Ok(SymMatrix::from_spectrum(values, eig.vectors.clone()))
}

/// Tie tolerance below which the Loewner quotient is replaced by `f'`.
pub fn eig_tie_tolerance(eig: &EigenPair) -> f64 {
    let scale = eig.values.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    1e-10 * scale.max(1.0)
}

/// First divided differences of `f` on the spectrum (the Loewner matrix).
pub fn loewner_matrix(eig: &EigenPair, f: ScalarFun) -> DMatrix<f64> {
    let n = eig.dim();
    let tau = eig_tie_tolerance(eig);
    let fl: Vec<f64> = eig.values.iter().map(|&l| f.value(l)).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let (li, lj) = (eig.values[i], eig.values[j]);
        if (li - lj).abs() > tau {
            (fl[i] - fl[j]) / (li - lj)
        } else {
            f.derivative(0.5 * (li + lj))
        }
    })
}

/// Adjoint of [`spd_map`] with respect to `Z` (Daleckii–Krein rule):
/// `U · (K ⊙ (Uᵀ · sym(upstream) · U)) · Uᵀ`.
pub fn spd_map_backward(z: &SymMatrix, f: ScalarFun, upstream: &DMatrix<f64>) -> Result<SymMatrix> {
    let eig = z.eig();
    check_domain(eig, f)?;
    if upstream.shape() != (z.dim(), z.dim()) {
        return Err(Error::invalid("spd_map_backward: upstream shape mismatch"));
    }
    let u = &eig.vectors;
    let inner = u.transpose() * symmetrize(upstream) * u;
    let k = loewner_matrix(eig, f);
    let masked = inner.component_mul(&k);
    Ok(SymMatrix::from_symmetrized(u * masked * u.transpose()))
}

/// Derivative of `⟨upstream, Z^p⟩` with respect to the exponent `p`.
pub fn power_exponent_backward(z: &SpdMatrix, p: f64, upstream: &DMatrix<f64>) -> f64 {
    let eig = z.eig();
    let u = &eig.vectors;
    let inner = u.transpose() * symmetrize(upstream) * u;
    eig.values.iter().enumerate().map(|(i, &l)| inner[(i, i)] * l.powf(p) * l.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_spd, random_sym, rng};

    /// Classical textbook Jacobi with max-element pivoting, kept separate from
    /// the cyclic solver under test.
    fn pivot_jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        for _ in 0..10_000 {
            let (mut p, mut q, mut best) = (0, 1, 0.0);
            for i in 0..n {
                for j in (i + 1)..n {
                    if a[(i, j)].abs() > best {
                        best = a[(i, j)].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if best < 1e-15 {
                break;
            }
            let phi = 0.5 * (2.0 * a[(p, q)]).atan2(a[(q, q)] - a[(p, p)]);
            let (s, c) = phi.sin_cos();
            let mut rot = DMatrix::<f64>::identity(n, n);
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * &a * &rot;
        }
        let mut vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        vals.sort_by(|x, y| y.total_cmp(x));
        vals
    }

    #[test]
    fn identity_and_diagonal_cases() {
        let e = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 1.0, 1.0]);
        assert!((e.reconstruct_with(&e.values) - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);

        let e = sym_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]))).unwrap();
        assert_eq!(e.values.as_slice(), &[4.0, 1.0]);
        assert_eq!(e.vectors, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn random_matrix_matches_pivoting_oracle() {
        let mut r = rng(11);
        let s = random_sym(&mut r, 5, 1.0);
        let e = sym_eig(s.matrix()).unwrap();
        let oracle = pivot_jacobi_eigenvalues(s.matrix());
        for (a, b) in e.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let orth = e.vectors.transpose() * &e.vectors - DMatrix::<f64>::identity(5, 5);
        assert!(orth.norm() < 1e-10);
        let rec = e.reconstruct_with(&e.values) - s.matrix();
        assert!(rec.norm() / s.norm() < 1e-9);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 1.0]);
        assert!(matches!(sym_eig(&m), Err(Error::InvalidInput(_))));
        assert!(SymMatrix::new(m).is_err());
    }

    #[test]
    fn deterministic_signs() {
        let mut r = rng(3);
        let s = random_sym(&mut r, 6, 1.0);
        let a = sym_eig(s.matrix()).unwrap();
        let b = sym_eig(s.matrix()).unwrap();
        assert_eq!(a, b);
        for col in a.vectors.column_iter() {
            let lead = col.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*lead > 0.0);
        }
    }

    #[test]
    fn spd_map_examples() {
        let l = spd_map(&SymMatrix::identity(3), ScalarFun::Log).unwrap();
        assert!(l.norm() < 1e-15);

        let s = spd_map(&SymMatrix::from_diagonal(&[4.0, 9.0]), ScalarFun::Power(0.5)).unwrap();
        assert!((s.matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-14);

        let mut r = rng(5);
        for d in 2..=6 {
            let s = random_sym(&mut r, d, 1.0);
            let back = spd_map(&spd_map(&s, ScalarFun::Exp).unwrap(), ScalarFun::Log).unwrap();
            assert!((back.matrix() - s.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn domain_errors_name_smallest_eigenvalue() {
        let s = SymMatrix::from_diagonal(&[1.0, -0.5]);
        match spd_map(&s, ScalarFun::Log) {
            Err(Error::Domain { op, min_eigenvalue }) => {
                assert_eq!(op, "log");
                assert_eq!(min_eigenvalue, -0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(spd_map(&s, ScalarFun::Power(2.0)).is_ok());
        assert!(spd_map(&s, ScalarFun::Power(0.5)).is_err());
        assert!(SpdMatrix::new(s.into_matrix()).is_err());
    }

    #[test]
    fn functional_calculus_identities() {
        let mut r = rng(21);
        for d in 2..=8 {
            let z = random_spd(&mut r, d, 0.8);
            let back = z.sqrt().powf(2.0);
            assert!((back.matrix() - z.matrix()).norm() / z.matrix().norm() < 1e-9);
            let w = z.inv_sqrt();
            let prod = w.matrix() * z.matrix() * w.matrix();
            assert!((prod - DMatrix::<f64>::identity(d, d)).norm() < 1e-8);
        }
    }

    #[test]
    fn backward_of_identity_function_is_passthrough() {
        let mut r = rng(8);
        let z = random_spd(&mut r, 4, 0.5);
        let up = DMatrix::from_fn(4, 4, |i, j| (i * 3 + j) as f64 * 0.1);
        let g = spd_map_backward(z.as_sym(), ScalarFun::Power(1.0), &up).unwrap();
        assert!((g.matrix() - symmetrize(&up)).norm() < 1e-12);
    }

    #[test]
    fn backward_at_scalar_identity_uses_derivative() {
        let z = SymMatrix::from_symmetrized(DMatrix::identity(3, 3) * 2.5);
        let up = DMatrix::from_fn(3, 3, |i, j| (i as f64) - 2.0 * (j as f64));
        for f in [ScalarFun::Log, ScalarFun::Sqrt, ScalarFun::Exp, ScalarFun::Power(0.3)] {
            let g = spd_map_backward(&z, f, &up).unwrap();
            let want = symmetrize(&up) * f.derivative(2.5);
            assert!((g.matrix() - want).norm() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn from_spectrum_sorts_descending() {
        let s = SymMatrix::from_spectrum(DVector::from_vec(vec![1.0, 3.0]), DMatrix::identity(2, 2));
        assert_eq!(s.eig().values.as_slice(), &[3.0, 1.0]);
        assert_eq!(s.matrix()[(1, 1)], 3.0);
    }
}
