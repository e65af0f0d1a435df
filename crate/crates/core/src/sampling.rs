//! Seeded random matrices for experiments and tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matfun::{spd_map, ScalarFun, SpdMatrix, SymMatrix};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Symmetric matrix with entries uniform in `[-scale, scale]`.
pub fn random_sym<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> SymMatrix {
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let v = scale * (2.0 * rng.random::<f64>() - 1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    SymMatrix::from_symmetrized(m)
}

/// `exp(S)` for a random symmetric `S`; `spread` bounds the log-eigenvalues
/// loosely.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, dim: usize, spread: f64) -> SpdMatrix {
    let s = random_sym(rng, dim, spread / (dim as f64).sqrt());
    SpdMatrix::from_sym(spd_map(&s, ScalarFun::Exp).expect("exp is total")).expect("exp is SPD")
}

/// Gaussian matrix conditioned away from singularity (`I + G/√d` rescaled).
pub fn random_invertible<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    loop {
        let g = gaussian_matrix(rng, dim, dim, 1.0);
        let svd = g.clone().svd(false, false);
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        if smin > 1e-2 * smax {
            return g;
        }
    }
}

/// Orthonormal columns: Q factor of a Gaussian matrix with sign-fixed R.
pub fn random_stiefel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    assert!(cols <= rows);
    let g = gaussian_matrix(rng, rows, cols, 1.0);
    crate::optim::qr_orthonormalize(&g).expect("Gaussian matrices have full rank almost surely")
}
