//! Affine-invariant Riemannian geometry on SPD matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matfun::{congruence, spd_map, ScalarFun, SpdMatrix, SymMatrix};

/// Upper bound on Karcher-flow iterations in convergence mode.
pub const KARCHER_MAX_ITERS: usize = 100;

/// Convergence threshold per dimension on the whitened tangent mean.
pub const KARCHER_TOL_PER_DIM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KarcherSteps {
    Fixed(usize),
    UntilConvergence,
}

#[derive(Debug, Clone)]
pub struct FrechetStats {
    pub mean: SpdMatrix,
    pub variance: f64,
    pub iterations_used: usize,
    /// Frobenius norm of the last whitened tangent mean that was computed.
    pub gradient_norm: f64,
}

/// Precomputed `Z^{1/2}` and `Z^{-1/2}` of a base point.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl Whitener {
    pub fn new(base: &SpdMatrix) -> Self {
        Self { sqrt: base.sqrt().matrix().clone(), inv_sqrt: base.inv_sqrt().matrix().clone() }
    }

    /// `base^{-1/2} · Z · base^{-1/2}`.
    pub fn whiten(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        congruence(&self.inv_sqrt, z)
    }

    /// `base^{1/2} · S · base^{1/2}`.
    pub fn color(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        congruence(&self.sqrt, s)
    }
}

fn check_dims(a: usize, b: usize, op: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{op}: dimension mismatch ({a} vs {b})")));
    }
    Ok(())
}

/// `‖log(Z1^{-1/2} Z2 Z1^{-1/2})‖_F`.
pub fn airm_dist(z1: &SpdMatrix, z2: &SpdMatrix) -> Result<f64> {
    check_dims(z1.dim(), z2.dim(), "airm_dist")?;
    let w = z1.inv_sqrt();
    Ok(whitened_log_norm(&congruence(w.matrix(), z2.matrix())))
}

fn whitened_log_norm(m: &DMatrix<f64>) -> f64 {
    let s = SymMatrix::from_symmetrized(m.clone());
    let eig = s.eig();
    eig.values.iter().map(|&l| l.max(f64::MIN_POSITIVE).ln().powi(2)).sum::<f64>().sqrt()
}

/// Riemannian logarithm at `base`.
pub fn log_map(base: &SpdMatrix, z: &SpdMatrix) -> Result<SymMatrix> {
    check_dims(base.dim(), z.dim(), "log_map")?;
    let w = Whitener::new(base);
    let inner = whitened_spd(&w, z.matrix(), "log_map")?;
    Ok(SymMatrix::from_symmetrized(w.color(inner.log().matrix())))
}

/// Riemannian exponential at `base`.
pub fn exp_map(base: &SpdMatrix, s: &SymMatrix) -> Result<SpdMatrix> {
    check_dims(base.dim(), s.dim(), "exp_map")?;
    let w = Whitener::new(base);
    let inner = spd_map(&SymMatrix::from_symmetrized(w.whiten(s.matrix())), ScalarFun::Exp)?;
    SpdMatrix::from_computed(w.color(inner.matrix()), "exp_map")
}

fn whitened_spd(w: &Whitener, z: &DMatrix<f64>, ctx: &str) -> Result<SpdMatrix> {
    SpdMatrix::from_computed(w.whiten(z), ctx)
}

/// Point at fraction `gamma` along the geodesic from `z1` to `z2`.
pub fn geodesic(z1: &SpdMatrix, z2: &SpdMatrix, gamma: f64) -> Result<SpdMatrix> {
    check_dims(z1.dim(), z2.dim(), "geodesic")?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("geodesic weight {gamma} outside [0, 1]")));
    }
    if gamma == 0.0 {
        return Ok(z1.clone());
    }
    if gamma == 1.0 {
        return Ok(z2.clone());
    }
    let w = Whitener::new(z1);
    let inner = whitened_spd(&w, z2.matrix(), "geodesic")?.powf(gamma);
    SpdMatrix::from_computed(w.color(inner.matrix()), "geodesic")
}

/// Karcher flow with unit step size. Returns the mean, the iteration count
/// and the norm of the last whitened tangent mean.
pub(crate) fn karcher_flow(points: &[SpdMatrix], steps: KarcherSteps, init: &SpdMatrix) -> Result<(SpdMatrix, usize, f64)> {
    if points.is_empty() {
        return Err(Error::invalid("Fréchet mean of an empty set"));
    }
    let d = init.dim();
    for p in points {
        check_dims(d, p.dim(), "frechet_mean")?;
    }
    let max_iters = match steps {
        KarcherSteps::Fixed(n) => n,
        KarcherSteps::UntilConvergence => KARCHER_MAX_ITERS,
    };
    let tol = KARCHER_TOL_PER_DIM * d as f64;

    let mut mean = init.clone();
    let mut used = 0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iters {
        let w = Whitener::new(&mean);
        let mut tangent = DMatrix::zeros(d, d);
        for p in points {
            tangent += whitened_spd(&w, p.matrix(), "karcher_flow")?.log().matrix();
        }
        tangent /= points.len() as f64;
        grad_norm = tangent.norm();
        if grad_norm < tol {
            break;
        }
        let step = spd_map(&SymMatrix::from_symmetrized(tangent), ScalarFun::Exp)?;
        mean = SpdMatrix::from_computed(w.color(step.matrix()), "karcher_flow")?;
        used += 1;
    }
    Ok((mean, used, grad_norm))
}

/// Fréchet mean by Karcher flow from `init`, with the attained variance.
pub fn frechet_mean(points: &[SpdMatrix], steps: KarcherSteps, init: &SpdMatrix) -> Result<FrechetStats> {
    let (mean, iterations_used, gradient_norm) = karcher_flow(points, steps, init)?;
    let variance = frechet_variance(points, &mean)?;
    Ok(FrechetStats { mean, variance, iterations_used, gradient_norm })
}

/// `(1/M) Σ δ²(reference, Z_j)`.
pub fn frechet_variance(points: &[SpdMatrix], reference: &SpdMatrix) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("Fréchet variance of an empty set"));
    }
    let w = reference.inv_sqrt();
    let mut acc = 0.0;
    for p in points {
        check_dims(reference.dim(), p.dim(), "frechet_variance")?;
        acc += whitened_log_norm(&congruence(w.matrix(), p.matrix())).powi(2);
    }
    Ok(acc / points.len() as f64)
}

/// The congruence `Z ↦ Eᵀ Z E` transporting `from` onto `to`.
///
/// `E = from^{-1/2} (from^{1/2} to^{-1} from^{1/2})^{-1/2} from^{1/2}` is a
/// square root of `from^{-1} to` and satisfies `Eᵀ · from · E = to`.
#[derive(Debug, Clone)]
pub struct Transport {
    e: DMatrix<f64>,
    // Exact identity: `apply` passes points through untouched, keeping
    // their cached eigendecomposition.
    identity: bool,
}

fn is_identity(m: &SpdMatrix) -> bool {
    let d = m.dim();
    m.matrix() == &DMatrix::<f64>::identity(d, d)
}

impl Transport {
    pub fn new(from: &SpdMatrix, to: &SpdMatrix) -> Result<Self> {
        check_dims(from.dim(), to.dim(), "parallel_transport")?;
        let d = from.dim();
        if from == to {
            return Ok(Self { e: DMatrix::identity(d, d), identity: true });
        }
        let e = if is_identity(to) {
            from.inv_sqrt().matrix().clone()
        } else if is_identity(from) {
            to.sqrt().matrix().clone()
        } else {
            let w = Whitener::new(from);
            let inner = SpdMatrix::from_computed(congruence(&w.sqrt, to.inverse().matrix()), "parallel_transport")?;
            &w.inv_sqrt * inner.inv_sqrt().matrix() * &w.sqrt
        };
        Ok(Self { e, identity: false })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn apply(&self, z: &SpdMatrix) -> Result<SpdMatrix> {
        if z.dim() != self.e.nrows() {
            return Err(Error::invalid("parallel_transport: dimension mismatch"));
        }
        if self.identity {
            return Ok(z.clone());
        }
        SpdMatrix::from_computed(congruence(&self.e.transpose(), z.matrix()), "parallel_transport")
    }

    /// Adjoint of [`Transport::apply`] in `Z`: `E · upstream · Eᵀ`.
    pub fn backward(&self, upstream: &DMatrix<f64>) -> DMatrix<f64> {
        if self.identity {
            return upstream.clone();
        }
        &self.e * upstream * self.e.transpose()
    }
}

pub fn parallel_transport(z: &SpdMatrix, from: &SpdMatrix, to: &SpdMatrix) -> Result<SpdMatrix> {
    check_dims(z.dim(), from.dim(), "parallel_transport")?;
    Transport::new(from, to)?.apply(z)
}
