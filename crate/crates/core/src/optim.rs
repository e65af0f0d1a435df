//! Riemannian Adam over Euclidean tensors and Stiefel-constrained matrices.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::symmetrize;

/// Tolerated `‖WᵀW − I‖_F` before a Stiefel parameter counts as corrupted.
pub const STIEFEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Euclidean,
    Stiefel,
}

/// A parameter tensor handed to [`Adam::step`] together with its gradient.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub kind: ParamKind,
    /// Decoupled weight decay; never honoured for Stiefel parameters.
    pub weight_decay: bool,
    pub value: &'a mut DMatrix<f64>,
    pub grad: &'a DMatrix<f64>,
}

pub fn stiefel_defect(w: &DMatrix<f64>) -> f64 {
    let k = w.ncols();
    (w.transpose() * w - DMatrix::<f64>::identity(k, k)).norm()
}

fn check_stiefel(w: &DMatrix<f64>) -> Result<()> {
    let defect = stiefel_defect(w);
    if !(defect < STIEFEL_TOL) {
        return Err(Error::ModelState(format!("matrix left the Stiefel manifold: ‖WᵀW − I‖_F = {defect:e}")));
    }
    Ok(())
}

/// Tangent projection at `w`: `G − W · sym(Wᵀ G)`.
pub fn stiefel_project(w: &DMatrix<f64>, grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_stiefel(w)?;
    Ok(project_unchecked(w, grad))
}

fn project_unchecked(w: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    g - w * symmetrize(&(w.transpose() * g))
}

/// Q factor with a non-negative R diagonal.
pub fn qr_orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return Err(Error::invalid(format!("cannot orthonormalize {cols} columns in dimension {rows}")));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    let scale = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..cols {
        let rii = r[(i, i)];
        if !(rii.abs() > 1e-12 * scale) {
            return Err(Error::numeric("QR retraction: rank-deficient argument"));
        }
        if rii < 0.0 {
            q.column_mut(i).neg_mut();
        }
    }
    Ok(q)
}

/// QR retraction `W' = qf(W + step)`.
pub fn stiefel_retract(w: &DMatrix<f64>, step: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_stiefel(w)?;
    qr_orthonormalize(&(w + step))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, weight_decay: 1e-4, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut [ParamSlot<'_>]) -> Result<()> {
        for p in params.iter() {
            if p.value.shape() != p.grad.shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for `{}`", p.name)));
            }
            if let Some((idx, bad)) = p.grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient {bad} in `{}` at flat index {idx}", p.name)));
            }
            if p.kind == ParamKind::Stiefel {
                check_stiefel(p.value)?;
            }
        }

        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        for p in params.iter_mut() {
            let shape = p.value.shape();
            let mom = self.moments.entry(p.name.to_string()).or_insert_with(|| Moments {
                first: DMatrix::zeros(shape.0, shape.1),
                second: DMatrix::zeros(shape.0, shape.1),
            });
            let grad = match p.kind {
                ParamKind::Euclidean => p.grad.clone(),
                ParamKind::Stiefel => project_unchecked(p.value, p.grad),
            };
            mom.first = &mom.first * cfg.beta1 + &grad * (1.0 - cfg.beta1);
            mom.second = &mom.second * cfg.beta2 + grad.component_mul(&grad) * (1.0 - cfg.beta2);
            let direction = mom.first.zip_map(&mom.second, |m, v| (m / bc1) / ((v / bc2).sqrt() + cfg.eps));

            match p.kind {
                ParamKind::Euclidean => {
                    if p.weight_decay && cfg.weight_decay != 0.0 {
                        *p.value *= 1.0 - cfg.lr * cfg.weight_decay;
                    }
                    *p.value -= direction * cfg.lr;
                }
                ParamKind::Stiefel => {
                    let step = project_unchecked(p.value, &direction) * (-cfg.lr);
                    let next = qr_orthonormalize(&(&*p.value + step))?;
                    mom.first = project_unchecked(&next, &mom.first);
                    *p.value = next;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{gaussian_matrix, random_stiefel, rng};

    #[test]
    fn projection_examples() {
        let mut r = rng(1);
        let w = random_stiefel(&mut r, 6, 3);
        let g = gaussian_matrix(&mut r, 6, 3, 1.0);
        let t = stiefel_project(&w, &g).unwrap();
        let wt = w.transpose() * &t;
        assert!((&wt + wt.transpose()).norm() < 1e-10);
        // Already tangent: unchanged.
        assert!((stiefel_project(&w, &t).unwrap() - &t).norm() < 1e-12);
        // Normal direction annihilated.
        assert!(stiefel_project(&w, &w).unwrap().norm() < 1e-12);
        assert!(stiefel_project(&(w * 2.0), &g).is_err());
    }

    #[test]
    fn retraction_contract() {
        let mut r = rng(2);
        let w = random_stiefel(&mut r, 8, 4);
        assert!((stiefel_retract(&w, &DMatrix::zeros(8, 4)).unwrap() - &w).norm() < 1e-12);
        let big = gaussian_matrix(&mut r, 8, 4, 3.0);
        assert!(stiefel_defect(&stiefel_retract(&w, &big).unwrap()) < 1e-10);

        // First-order agreement: the residual shrinks quadratically.
        let dir = stiefel_project(&w, &gaussian_matrix(&mut r, 8, 4, 1.0)).unwrap();
        let resid = |h: f64| (stiefel_retract(&w, &(&dir * h)).unwrap() - (&w + &dir * h)).norm();
        let (r1, r2) = (resid(1e-2), resid(5e-3));
        let slope = (r1 / r2).log2();
        assert!(slope > 1.8 && slope < 2.2, "slope {slope}");
    }

    #[test]
    fn zero_gradients_only_decay() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut v = DMatrix::from_element(2, 2, 1.0);
        let g = DMatrix::zeros(2, 2);
        adam.step(&mut [ParamSlot { name: "x", kind: ParamKind::Euclidean, weight_decay: false, value: &mut v, grad: &g }])
            .unwrap();
        assert_eq!(v, DMatrix::from_element(2, 2, 1.0));
        adam.step(&mut [ParamSlot { name: "x", kind: ParamKind::Euclidean, weight_decay: true, value: &mut v, grad: &g }])
            .unwrap();
        assert!((v[(0, 0)] - (1.0 - 1e-3 * 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn scalar_trace_matches_hand_computation() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg);
        let mut x = DMatrix::from_element(1, 1, 0.5);
        let g = DMatrix::from_element(1, 1, 0.2);
        let mut expected = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=5 {
            adam.step(&mut [ParamSlot { name: "s", kind: ParamKind::Euclidean, weight_decay: true, value: &mut x, grad: &g }])
                .unwrap();
            m = 0.9 * m + 0.1 * 0.2;
            v = 0.999 * v + 0.001 * 0.04;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            expected -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            if t == 1 {
                assert!((x[(0, 0)] - (0.5 - 1e-3 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
            }
            assert!((x[(0, 0)] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_betas_give_sign_descent() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.0, beta2: 0.0, weight_decay: 0.0, eps: 1e-8 };
        let mut adam = Adam::new(cfg);
        for g in [3.0, -0.01, 250.0] {
            let mut x = DMatrix::from_element(1, 1, 0.0);
            let gm = DMatrix::from_element(1, 1, g);
            adam.step(&mut [ParamSlot { name: "s", kind: ParamKind::Euclidean, weight_decay: false, value: &mut x, grad: &gm }])
                .unwrap();
            assert!((x[(0, 0)] + 0.1 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut x = DMatrix::zeros(1, 2);
        let g = DMatrix::from_row_slice(1, 2, &[0.0, f64::NAN]);
        let err = adam
            .step(&mut [ParamSlot { name: "w", kind: ParamKind::Euclidean, weight_decay: false, value: &mut x, grad: &g }])
            .unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn stiefel_least_squares_smoke() {
        for seed in 0..5 {
            let mut r = rng(seed);
            let target = random_stiefel(&mut r, 6, 3);
            let mut w = random_stiefel(&mut r, 6, 3);
            let mut adam = Adam::new(AdamConfig { lr: 0.02, beta1: 0.5, weight_decay: 0.0, ..AdamConfig::default() });
            let mut last = (&w - &target).norm_squared();
            for _ in 0..100 {
                let grad = (&w - &target) * 2.0;
                adam.step(&mut [ParamSlot { name: "w", kind: ParamKind::Stiefel, weight_decay: true, value: &mut w, grad: &grad }])
                    .unwrap();
                assert!(stiefel_defect(&w) < 1e-8);
                let f = (&w - &target).norm_squared();
                assert!(f < last, "seed {seed}: objective increased: {f} >= {last}");
                last = f;
            }
            assert!(last < 1e-4, "seed {seed}: final objective {last}");
        }
    }
}
