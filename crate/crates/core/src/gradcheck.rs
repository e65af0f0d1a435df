//! Finite-difference verification of every backward pass.
//!
//! Each check compares analytic directional derivatives against central
//! differences along seeded random directions and reports the worst
//! relative error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matfun::{spd_map, spd_map_backward, ScalarFun, SpdMatrix, SymMatrix};
use crate::net::layers::{self, SpatConv, TempConv};
use crate::net::{Architecture, EpochBatch, ModelConfig, Network, TsmNetConfig};
use crate::optim::stiefel_project;
use crate::sampling::{gaussian_matrix, random_spd, random_stiefel, random_sym, rng, SeededRng};
use crate::spdbn::{dispersion_exponent, DomainId, Mode, NormParams, NormTape, SpdBnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub step: f64,
    pub directions: usize,
    pub layer_tolerance: f64,
    pub end_to_end_tolerance: f64,
    pub classifier_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { seed: 0, step: 1e-5, directions: 4, layer_tolerance: 1e-5, end_to_end_tolerance: 1e-4, classifier_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub check: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Symmetric relative error with a small absolute floor.
pub fn rel_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

struct Checker {
    rng: SeededRng,
    cfg: GradCheckConfig,
    rows: Vec<GradCheckRow>,
}

impl Checker {
    fn central(&self, f: &dyn Fn(f64) -> Result<f64>) -> Result<f64> {
        let h = self.cfg.step;
        Ok((f(h)? - f(-h)?) / (2.0 * h))
    }

    fn record(&mut self, name: &str, errors: impl IntoIterator<Item = f64>, tolerance: f64) {
        let worst = errors.into_iter().fold(0.0, f64::max);
        log::debug!("gradcheck {name}: {worst:e}");
        self.rows.push(GradCheckRow { check: name.to_string(), max_rel_error: worst, tolerance, passed: worst < tolerance });
    }

    fn matfun(&mut self) -> Result<()> {
        let funs = [
            ("log", ScalarFun::Log),
            ("exp", ScalarFun::Exp),
            ("power", ScalarFun::Power(0.37)),
            ("sqrt", ScalarFun::Sqrt),
            ("inv_sqrt", ScalarFun::InvSqrt),
            ("re_threshold", ScalarFun::ReThreshold(1e-4)),
        ];
        for (name, f) in funs {
            let mut errs = Vec::new();
            for d in 2..=8 {
                let z = random_spd(&mut self.rng, d, 1.0);
                let up = random_sym(&mut self.rng, d, 1.0).into_matrix();
                let g = spd_map_backward(z.as_sym(), f, &up)?.into_matrix();
                for _ in 0..self.cfg.directions {
                    let dir = random_sym(&mut self.rng, d, 1.0).into_matrix();
                    let num = self.central(&|h| Ok(inner(spd_map(&SymMatrix::new(z.matrix() + &dir * h)?, f)?.matrix(), &up)))?;
                    errs.push(rel_error(num, inner(&g, &dir)));
                }
            }
            self.record(&format!("matfun/{name}"), errs, self.cfg.layer_tolerance);
        }
        Ok(())
    }

    fn spdbn(&mut self) -> Result<()> {
        let (mut e_in, mut e_nu) = (Vec::new(), Vec::new());
        for d in 3..=6 {
            let batch: Vec<_> = (0..3).map(|_| random_spd(&mut self.rng, d, 1.0)).collect();
            let mean = random_spd(&mut self.rng, d, 0.5);
            let var = 0.9;
            let params = NormParams { log_nu: 0.2, bias_mean: random_spd(&mut self.rng, d, 0.5) };
            let ups: Vec<_> = (0..3).map(|_| random_sym(&mut self.rng, d, 1.0).into_matrix()).collect();
            let loss = |b: &[SpdMatrix], p: &NormParams| -> Result<f64> {
                let (out, _) = NormTape::record(b, &mean, Some(dispersion_exponent(p, var, 1e-5)), p, true)?;
                Ok(out.iter().zip(&ups).map(|(o, u)| inner(o.matrix(), u)).sum())
            };
            let (_, tape) = NormTape::record(&batch, &mean, Some(dispersion_exponent(&params, var, 1e-5)), &params, true)?;
            let (grads, d_nu) = tape.backward(&ups)?;
            let num = self.central(&|h| loss(&batch, &NormParams { log_nu: params.log_nu + h, ..params.clone() }))?;
            e_nu.push(rel_error(num, d_nu));
            for _ in 0..self.cfg.directions {
                let j = 1;
                let dir = random_sym(&mut self.rng, d, 1.0).into_matrix();
                let num = self.central(&|h| {
                    let mut b = batch.clone();
                    b[j] = SpdMatrix::new(batch[j].matrix() + &dir * h)?;
                    loss(&b, &params)
                })?;
                e_in.push(rel_error(num, inner(&grads[j], &dir)));
            }
        }
        self.record("spdbn/inputs", e_in, self.cfg.layer_tolerance);
        self.record("spdbn/log_nu", e_nu, self.cfg.layer_tolerance);
        Ok(())
    }

    fn layers(&mut self) -> Result<()> {
        let n = self.cfg.directions;
        let r = &mut self.rng;

        let x = gaussian_matrix(r, 3, 32, 1.0);
        let conv = TempConv { kernels: gaussian_matrix(r, 2, 7, 0.5) };
        let up = gaussian_matrix(r, 6, 32, 1.0);
        let (_, tape) = conv.forward(&x)?;
        let (dk, dx) = conv.backward(&tape, &up);
        let dirs_k: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 2, 7, 1.0)).collect();
        let dirs_x: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 3, 32, 1.0)).collect();
        let mut errs = Vec::new();
        for d in &dirs_k {
            let num = self.central(&|h| Ok(inner(&TempConv { kernels: &conv.kernels + d * h }.forward(&x)?.0, &up)))?;
            errs.push(rel_error(num, inner(&dk, d)));
        }
        for d in &dirs_x {
            let num = self.central(&|h| Ok(inner(&conv.forward(&(&x + d * h))?.0, &up)))?;
            errs.push(rel_error(num, inner(&dx, d)));
        }
        self.record("net/temp_conv", errs, self.cfg.layer_tolerance);

        let r = &mut self.rng;
        let h_in = gaussian_matrix(r, 8, 20, 1.0);
        let spat = SpatConv { weights: gaussian_matrix(r, 5, 8, 1.0) };
        let up = gaussian_matrix(r, 5, 20, 1.0);
        let (dw, dh) = spat.backward(&h_in, &up);
        let dirs_w: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 5, 8, 1.0)).collect();
        let dirs_h: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 8, 20, 1.0)).collect();
        let mut errs = Vec::new();
        for d in &dirs_w {
            let num = self.central(&|s| Ok(inner(&SpatConv { weights: &spat.weights + d * s }.forward(&h_in)?, &up)))?;
            errs.push(rel_error(num, inner(&dw, d)));
        }
        for d in &dirs_h {
            let num = self.central(&|s| Ok(inner(&spat.forward(&(&h_in + d * s))?, &up)))?;
            errs.push(rel_error(num, inner(&dh, d)));
        }
        self.record("net/spat_conv", errs, self.cfg.layer_tolerance);

        let r = &mut self.rng;
        let xc = gaussian_matrix(r, 5, 24, 1.0);
        let up = random_sym(r, 5, 1.0).into_matrix();
        let (_, centered) = layers::cov_pool_forward(&xc)?;
        let g = layers::cov_pool_backward(&centered, &up);
        let dirs: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 5, 24, 1.0)).collect();
        let mut errs = Vec::new();
        for d in &dirs {
            let num = self.central(&|s| Ok(inner(layers::cov_pool_forward(&(&xc + d * s))?.0.matrix(), &up)))?;
            errs.push(rel_error(num, inner(&g, d)));
        }
        self.record("net/cov_pool", errs, self.cfg.layer_tolerance);

        let r = &mut self.rng;
        let z = random_spd(r, 6, 1.0);
        let w = random_stiefel(r, 6, 3);
        let up = random_sym(r, 3, 1.0).into_matrix();
        let (dz, dw) = layers::bimap_backward(z.as_sym(), &w, &up);
        let dirs_z: Vec<_> = (0..n).map(|_| random_sym(r, 6, 1.0).into_matrix()).collect();
        let dirs_w: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 6, 3, 1.0)).collect();
        let mut errs = Vec::new();
        for d in &dirs_z {
            let num = self.central(&|s| Ok(inner(&(w.transpose() * (z.matrix() + d * s) * &w), &up)))?;
            errs.push(rel_error(num, inner(&dz, d)));
        }
        for d in &dirs_w {
            let num = self.central(&|s| {
                let ws = &w + d * s;
                Ok(inner(&(ws.transpose() * z.matrix() * &ws), &up))
            })?;
            errs.push(rel_error(num, inner(&dw, d)));
        }
        self.record("net/bimap", errs, self.cfg.layer_tolerance);

        let r = &mut self.rng;
        let q = random_stiefel(r, 5, 5);
        let s_in = SymMatrix::from_symmetrized(&q * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.7, 0.3, 0.02, -0.4])) * q.transpose());
        let eps = 0.1;
        let up = random_sym(r, 5, 1.0).into_matrix();
        let g = layers::reeig_backward(&s_in, eps, &up)?;
        let dirs: Vec<_> = (0..n).map(|_| random_sym(r, 5, 1.0).into_matrix()).collect();
        let mut errs = Vec::new();
        for d in &dirs {
            let num = self.central(&|s| Ok(inner(layers::reeig_forward(&SymMatrix::from_symmetrized(s_in.matrix() + d * s), eps)?.0.matrix(), &up)))?;
            errs.push(rel_error(num, inner(&g, d)));
        }
        self.record("net/reeig", errs, self.cfg.layer_tolerance);

        let r = &mut self.rng;
        let z = random_spd(r, 5, 1.0);
        let gv = DVector::from_column_slice(gaussian_matrix(r, 15, 1, 1.0).as_slice());
        let g = layers::log_eig_backward(&z, &gv)?;
        let dirs: Vec<_> = (0..n).map(|_| random_sym(r, 5, 1.0).into_matrix()).collect();
        let mut errs = Vec::new();
        for d in &dirs {
            let num = self.central(&|s| Ok(layers::log_eig_forward(&SpdMatrix::new(z.matrix() + d * s)?).dot(&gv)))?;
            errs.push(rel_error(num, inner(&g, d)));
        }
        self.record("net/log_eig", errs, self.cfg.layer_tolerance);

        let r = &mut self.rng;
        let v = gaussian_matrix(r, 6, 5, 1.0);
        let labels = [0, 1, 2, 0, 1, 2];
        let w = gaussian_matrix(r, 6, 3, 0.5);
        let out = layers::classifier_forward(&v, &w, Some(&labels))?;
        let (dw, dv) = layers::classifier_backward(&v, &w, &out.probs, &labels);
        let dirs_w: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 6, 3, 1.0)).collect();
        let dirs_v: Vec<_> = (0..n).map(|_| gaussian_matrix(r, 6, 5, 1.0)).collect();
        let mut errs = Vec::new();
        for d in &dirs_w {
            let num = self.central(&|s| Ok(layers::classifier_forward(&v, &(&w + d * s), Some(&labels))?.loss))?;
            errs.push(rel_error(num, inner(&dw, d)));
        }
        for d in &dirs_v {
            let num = self.central(&|s| Ok(layers::classifier_forward(&(&v + d * s), &w, Some(&labels))?.loss))?;
            errs.push(rel_error(num, inner(&dv, d)));
        }
        self.record("net/classifier", errs, self.cfg.classifier_tolerance);
        Ok(())
    }

    fn end_to_end(&mut self, architecture: Architecture) -> Result<()> {
        let (net, batch) = tiny_model(architecture, &mut self.rng)?;
        let pass = net.forward_eval(&batch)?;
        let grads = net.backward(&pass, &batch.labels)?;
        let label = match architecture {
            Architecture::Spd => "end_to_end/spd",
            Architecture::Euclidean => "end_to_end/euclidean",
        };
        let names: Vec<&'static str> = grads.0.iter().map(|(n, _)| *n).collect();
        for name in names {
            let g = grads.get(name).expect("listed").clone();
            let mut errs = Vec::new();
            for _ in 0..self.cfg.directions {
                let mut probe = net.clone();
                let value = param(&mut probe, name).clone();
                let raw = gaussian_matrix(&mut self.rng, g.nrows(), g.ncols(), 1.0);
                let dir = if name == "bimap" { stiefel_project(&value, &raw)? } else { raw };
                let num = self.central(&|h| {
                    let mut m = probe.clone();
                    *param(&mut m, name) = &value + &dir * h;
                    Ok(m.forward_eval(&batch)?.loss)
                })?;
                errs.push(rel_error(num, inner(&g, &dir)));
            }
            self.record(&format!("{label}/{name}"), errs, self.cfg.end_to_end_tolerance);
        }
        Ok(())
    }
}

fn param<'a>(net: &'a mut Network, name: &str) -> &'a mut DMatrix<f64> {
    net.params_mut().into_iter().find(|p| p.name == name).expect("known parameter").value
}

/// Configuration of the small model used for end-to-end checks.
pub fn tiny_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        net: TsmNetConfig {
            temporal_filters: 2,
            temporal_kernel: 5,
            spatio_spectral_filters: 8,
            subspace_dim: 4,
            reeig_eps: 1e-4,
            classes: 3,
            channels: 4,
            time: 32,
        },
        bn: SpdBnConfig::default(),
        domain_specific: true,
    }
}

/// Tiny model with populated statistics and non-trivial parameters, plus a
/// two-domain batch to differentiate on.
pub fn tiny_model(architecture: Architecture, r: &mut SeededRng) -> Result<(Network, EpochBatch)> {
    let cfg = tiny_config(architecture);
    let mut net = Network::new(cfg, r)?;
    let batch = EpochBatch {
        data: (0..6).map(|_| gaussian_matrix(r, 4, 32, 1.0)).collect(),
        labels: vec![0, 1, 2, 2, 1, 0],
        domains: vec![DomainId(0), DomainId(0), DomainId(0), DomainId(1), DomainId(1), DomainId(1)],
    };
    for k in 0..3 {
        net.forward(&batch, Mode::Train { k })?;
    }
    for p in net.params_mut() {
        match p.name {
            "classifier" | "bn_shift" => *p.value = gaussian_matrix(r, p.value.nrows(), p.value.ncols(), 0.5),
            "log_nu" | "bn_log_scale" => *p.value = gaussian_matrix(r, p.value.nrows(), p.value.ncols(), 0.2),
            _ => {}
        }
    }
    Ok((net, batch))
}

/// Runs every check; the statistics are frozen (eval mode) for the
/// end-to-end checks since they are treated as constants by the backward.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    let mut c = Checker { rng: rng(cfg.seed), cfg: *cfg, rows: Vec::new() };
    c.matfun()?;
    c.spdbn()?;
    c.layers()?;
    c.end_to_end(Architecture::Spd)?;
    c.end_to_end(Architecture::Euclidean)?;
    Ok(c.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let rows = run_suite(&GradCheckConfig::default()).unwrap();
        for row in &rows {
            assert!(row.passed, "{}: {:e} >= {:e}", row.check, row.max_rel_error, row.tolerance);
        }
        assert!(rows.iter().any(|r| r.check == "end_to_end/spd/bimap"));
        assert!(rows.iter().any(|r| r.check == "end_to_end/euclidean/bn_log_scale"));
    }
}
