//! Geometry checks shared by the property tests and the acceptance suite.
//! Each check draws one seeded case and returns its error; oracles are
//! computed with nalgebra's own decompositions, independent of the crate's
//! Jacobi solver.

#![allow(dead_code)]

use nalgebra::DMatrix;
use tsmnet::manifold::{airm_dist, exp_map, frechet_mean, geodesic, log_map, parallel_transport, KarcherSteps};
use tsmnet::matfun::{congruence, SpdMatrix};
use tsmnet::sampling::{random_invertible, random_spd, random_sym, SeededRng};

pub type Check = fn(&mut SeededRng, usize) -> f64;

/// `(name, check, tolerance)`.
pub const GEOMETRY_CHECKS: [(&str, Check, f64); 11] = [
    ("airm_matches_oracle", airm_matches_oracle, 1e-8),
    ("airm_affine_invariance", airm_affine_invariance, 1e-8),
    ("log_exp_round_trip", log_exp_round_trip, 1e-8),
    ("exp_arclength", exp_arclength, 1e-8),
    ("geodesic_endpoints", geodesic_endpoints, 1e-8),
    ("geodesic_reversal", geodesic_reversal, 1e-8),
    ("two_point_mean_closed_form", two_point_mean_closed_form, 1e-8),
    ("transport_lands_on_target", transport_lands_on_target, 1e-9),
    ("transported_mean_is_identity", transported_mean_is_identity, 1e-6),
    ("mean_affine_equivariance", mean_affine_equivariance, 1e-6),
    ("one_step_is_log_euclidean", one_step_is_log_euclidean, 1e-10),
];

fn spd(r: &mut SeededRng, d: usize) -> SpdMatrix {
    random_spd(r, d, 1.5)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn oracle_fun(z: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let e = z.clone().symmetric_eigen();
    let vals = e.eigenvalues.map(f);
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `sqrt(Σ log² λ)` over the eigenvalues of `L⁻¹ Z₂ L⁻ᵀ`, `Z₁ = L Lᵀ`.
pub fn oracle_airm(z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> f64 {
    let l = z1.clone().cholesky().expect("SPD").l();
    let li = l.try_inverse().expect("invertible");
    let m = &li * z2 * li.transpose();
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigen().eigenvalues.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt()
}

/// `Z₁^{1/2} (Z₁^{-1/2} Z₂ Z₁^{-1/2})^{1/2} Z₁^{1/2}`.
pub fn oracle_midpoint(z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> DMatrix<f64> {
    let s = oracle_fun(z1, f64::sqrt);
    let si = oracle_fun(z1, |x| 1.0 / x.sqrt());
    let inner = &si * z2 * &si;
    &s * oracle_fun(&((&inner + inner.transpose()) * 0.5), f64::sqrt) * &s
}

/// `exp(mean_j log Z_j)`.
pub fn oracle_log_euclidean(zs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = zs[0].nrows();
    let mut acc = DMatrix::zeros(d, d);
    for z in zs {
        acc += oracle_fun(z, f64::ln);
    }
    oracle_fun(&(acc / zs.len() as f64), f64::exp)
}

pub fn airm_matches_oracle(r: &mut SeededRng, d: usize) -> f64 {
    let (a, b) = (spd(r, d), spd(r, d));
    let o = oracle_airm(a.matrix(), b.matrix());
    (airm_dist(&a, &b).unwrap() - o).abs() / o.max(1.0)
}

pub fn airm_affine_invariance(r: &mut SeededRng, d: usize) -> f64 {
    let (z1, z2) = (spd(r, d), spd(r, d));
    let a = random_invertible(r, d);
    let t = |z: &SpdMatrix| SpdMatrix::new(congruence(&a, z.matrix())).unwrap();
    let base = airm_dist(&z1, &z2).unwrap();
    (airm_dist(&t(&z1), &t(&z2)).unwrap() - base).abs() / base.max(1.0)
}

pub fn log_exp_round_trip(r: &mut SeededRng, d: usize) -> f64 {
    let (g, z) = (spd(r, d), spd(r, d));
    let back = exp_map(&g, &log_map(&g, &z).unwrap()).unwrap();
    rel(back.matrix(), z.matrix())
}

pub fn exp_arclength(r: &mut SeededRng, d: usize) -> f64 {
    let g = spd(r, d);
    let s = random_sym(r, d, 1.0);
    let w = g.inv_sqrt();
    let expected = congruence(w.matrix(), s.matrix()).norm();
    (airm_dist(&g, &exp_map(&g, &s).unwrap()).unwrap() - expected).abs() / expected.max(1.0)
}

pub fn geodesic_endpoints(r: &mut SeededRng, d: usize) -> f64 {
    let (z1, z2) = (spd(r, d), spd(r, d));
    let e0 = rel(geodesic(&z1, &z2, 0.0).unwrap().matrix(), z1.matrix());
    let e1 = rel(geodesic(&z1, &z2, 1.0).unwrap().matrix(), z2.matrix());
    let em = rel(geodesic(&z1, &z2, 0.5).unwrap().matrix(), &oracle_midpoint(z1.matrix(), z2.matrix()));
    e0.max(e1).max(em)
}

pub fn geodesic_reversal(r: &mut SeededRng, d: usize) -> f64 {
    let (z1, z2) = (spd(r, d), spd(r, d));
    let mut worst = 0.0f64;
    for g in [0.1, 0.37, 0.8] {
        let a = geodesic(&z1, &z2, g).unwrap();
        let b = geodesic(&z2, &z1, 1.0 - g).unwrap();
        worst = worst.max(rel(a.matrix(), b.matrix()));
        // The point sits a fraction `g` along the geodesic.
        let total = airm_dist(&z1, &z2).unwrap();
        worst = worst.max((airm_dist(&z1, &a).unwrap() - g * total).abs() / total.max(1.0));
    }
    worst
}

pub fn two_point_mean_closed_form(r: &mut SeededRng, d: usize) -> f64 {
    let (z1, z2) = (spd(r, d), spd(r, d));
    let fm = frechet_mean(&[z1.clone(), z2.clone()], KarcherSteps::UntilConvergence, &SpdMatrix::identity(d)).unwrap();
    rel(fm.mean.matrix(), &oracle_midpoint(z1.matrix(), z2.matrix()))
}

pub fn transport_lands_on_target(r: &mut SeededRng, d: usize) -> f64 {
    let (from, to) = (spd(r, d), spd(r, d));
    rel(parallel_transport(&from, &from, &to).unwrap().matrix(), to.matrix())
}

fn cloud(r: &mut SeededRng, d: usize, n: usize) -> Vec<SpdMatrix> {
    let centre = spd(r, d);
    let c = centre.sqrt();
    (0..n).map(|_| SpdMatrix::new(congruence(c.matrix(), random_spd(r, d, 0.8).matrix())).unwrap()).collect()
}

pub fn transported_mean_is_identity(r: &mut SeededRng, d: usize) -> f64 {
    let zs = cloud(r, d, 12);
    let g = frechet_mean(&zs, KarcherSteps::UntilConvergence, &zs[0]).unwrap().mean;
    let id = SpdMatrix::identity(d);
    let moved: Vec<SpdMatrix> = zs.iter().map(|z| parallel_transport(z, &g, &id).unwrap()).collect();
    let m = frechet_mean(&moved, KarcherSteps::UntilConvergence, &moved[0]).unwrap().mean;
    rel(m.matrix(), id.matrix())
}

pub fn mean_affine_equivariance(r: &mut SeededRng, d: usize) -> f64 {
    let zs = cloud(r, d, 10);
    let a = random_invertible(r, d);
    let moved: Vec<SpdMatrix> = zs.iter().map(|z| SpdMatrix::new(congruence(&a, z.matrix())).unwrap()).collect();
    let m = frechet_mean(&zs, KarcherSteps::UntilConvergence, &zs[0]).unwrap().mean;
    let mm = frechet_mean(&moved, KarcherSteps::UntilConvergence, &moved[0]).unwrap().mean;
    rel(mm.matrix(), &congruence(&a, m.matrix()))
}

pub fn one_step_is_log_euclidean(r: &mut SeededRng, d: usize) -> f64 {
    let zs: Vec<SpdMatrix> = (0..7).map(|_| spd(r, d)).collect();
    let fm = frechet_mean(&zs, KarcherSteps::Fixed(1), &SpdMatrix::identity(d)).unwrap();
    let mats: Vec<DMatrix<f64>> = zs.iter().map(|z| z.matrix().clone()).collect();
    rel(fm.mean.matrix(), &oracle_log_euclidean(&mats))
}

/// Worst error of every check over `cases` seeded draws per dimension 2–8.
pub fn geometry_suite(cases: usize, seed: u64) -> Vec<(&'static str, f64, f64)> {
    GEOMETRY_CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, check, tol))| {
            let mut worst = 0.0f64;
            for d in 2..=8 {
                let mut r = tsmnet::sampling::rng(seed ^ ((i as u64) << 32) ^ d as u64);
                for _ in 0..cases {
                    worst = worst.max(check(&mut r, d));
                }
            }
            (name, worst, tol)
        })
        .collect()
}
