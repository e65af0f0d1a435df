//! Batch normalization on the SPD manifold.
//!
//! The layer family shares one normalization step: transport the batch from
//! a reference mean to the identity, rescale its dispersion with a matrix
//! power, and transport it to the learnable bias mean. The modes differ only
//! in which statistics feed that step:
//!
//! * [`BnMode::Rbn`] uses the one-step batch mean during training and does
//!   not touch the dispersion.
//! * [`BnMode::SpdBn`] uses running estimates updated with a fixed momentum
//!   in both phases.
//! * [`BnMode::SpdMbn`] keeps separate training and testing estimates; the
//!   training momentum follows a decaying [`MomentumSchedule`].
//!
//! [`DomainSpdBn`] routes observations to one such layer per domain.

mod dispatch;
mod layer;
mod schedule;

use serde::{Deserialize, Serialize};

pub use dispatch::{DispatchOutput, DispatchTape, DomainSpdBn, RoutingCounter, SHARED_LAYER};
pub use layer::{NormTape, SpdMbn};
pub use schedule::MomentumSchedule;

use crate::error::{Error, Result};
use crate::manifold::{frechet_mean, frechet_variance, geodesic, karcher_flow, KarcherSteps};
use crate::matfun::SpdMatrix;

/// Identifier of a recording domain (one session of one subject).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Display::fmt(&self.0, f)
    }
}

/// Train or eval phase. `k` is the momentum-schedule position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { k: usize },
    Eval,
}

/// Running Fréchet statistics, one pair for training and one for testing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningGeoStats {
    pub train_mean: SpdMatrix,
    pub train_var: f64,
    pub test_mean: SpdMatrix,
    pub test_var: f64,
    pub step: u64,
}

impl RunningGeoStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            train_mean: SpdMatrix::identity(dim),
            train_var: 1.0,
            test_mean: SpdMatrix::identity(dim),
            test_var: 1.0,
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.train_mean.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Rbn,
    SpdBn,
    SpdMbn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpdBnConfig {
    pub mode: BnMode,
    pub eps: f64,
    pub gamma_test: f64,
    pub schedule: MomentumSchedule,
    pub learn_variance: bool,
}

impl Default for SpdBnConfig {
    fn default() -> Self {
        Self {
            mode: BnMode::SpdMbn,
            eps: 1e-5,
            gamma_test: 0.1,
            schedule: MomentumSchedule::ClampedExponential { gamma_min: 0.2, k_attain: 40 },
            learn_variance: true,
        }
    }
}

impl SpdBnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.gamma_test) {
            return Err(Error::config(format!("gamma_test must lie in [0, 1], got {}", self.gamma_test)));
        }
        self.schedule.validate()
    }
}

/// Learnable normalization parameters shared by all domain layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    /// `ν_φ = exp(log_nu)`.
    pub log_nu: f64,
    pub bias_mean: SpdMatrix,
}

impl NormParams {
    pub fn identity(dim: usize) -> Self {
        Self { log_nu: 0.0, bias_mean: SpdMatrix::identity(dim) }
    }

    pub fn nu(&self) -> f64 {
        self.log_nu.exp()
    }
}

/// One Karcher step from the identity: the log-Euclidean mean.
pub fn batch_mean_estimate(batch: &[SpdMatrix]) -> Result<SpdMatrix> {
    let first = batch.first().ok_or_else(|| Error::invalid("batch mean of an empty batch"))?;
    let (mean, _, _) = karcher_flow(batch, KarcherSteps::Fixed(1), &SpdMatrix::identity(first.dim()))?;
    Ok(mean)
}

/// Momentum update of both statistic pairs.
pub fn update_running(
    stats: &RunningGeoStats,
    batch_mean: &SpdMatrix,
    batch: &[SpdMatrix],
    gamma_train: f64,
    gamma_test: f64,
) -> Result<RunningGeoStats> {
    let train_mean = geodesic(&stats.train_mean, batch_mean, gamma_train)?;
    let train_var = blend(stats.train_var, batch, &train_mean, gamma_train)?;
    let (test_mean, test_var) = if gamma_test == gamma_train && stats.test_mean == stats.train_mean && stats.test_var == stats.train_var {
        (train_mean.clone(), train_var)
    } else {
        let m = geodesic(&stats.test_mean, batch_mean, gamma_test)?;
        let v = blend(stats.test_var, batch, &m, gamma_test)?;
        (m, v)
    };
    Ok(RunningGeoStats { train_mean, train_var, test_mean, test_var, step: stats.step + 1 })
}

fn blend(previous: f64, batch: &[SpdMatrix], mean: &SpdMatrix, gamma: f64) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(previous);
    }
    Ok((1.0 - gamma) * previous + gamma * frechet_variance(batch, mean)?)
}

/// Power exponent `ν_φ / (√variance + ε)` applied at the identity.
pub fn dispersion_exponent(params: &NormParams, variance: f64, eps: f64) -> f64 {
    params.nu() / (variance.max(0.0).sqrt() + eps)
}

/// Whiten at `use_mean`, rescale the dispersion, and re-bias at `G_φ`.
pub fn normalize_batch(
    batch: &[SpdMatrix],
    use_mean: &SpdMatrix,
    use_var: f64,
    params: &NormParams,
    eps: f64,
) -> Result<Vec<SpdMatrix>> {
    if !(use_var > 0.0) {
        return Err(Error::invalid(format!("normalize_batch: variance must be positive, got {use_var}")));
    }
    Ok(NormTape::record(batch, use_mean, Some(dispersion_exponent(params, use_var, eps)), params, true)?.0)
}

/// Full-data Karcher statistics of an unlabeled domain, stored as test
/// statistics of `base` (the training statistics are kept).
pub fn fit_domain_stats(base: &RunningGeoStats, domain_data: &[SpdMatrix]) -> Result<RunningGeoStats> {
    if domain_data.len() < 2 {
        return Err(Error::invalid(format!(
            "fitting domain statistics needs at least 2 observations, got {}",
            domain_data.len()
        )));
    }
    let init = batch_mean_estimate(domain_data)?;
    let fm = frechet_mean(domain_data, KarcherSteps::UntilConvergence, &init)?;
    Ok(RunningGeoStats { test_mean: fm.mean, test_var: fm.variance, ..base.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::airm_dist;
    use crate::sampling::{random_spd, rng};

    fn frechet(points: &[SpdMatrix]) -> crate::manifold::FrechetStats {
        frechet_mean(points, KarcherSteps::UntilConvergence, &SpdMatrix::identity(points[0].dim())).unwrap()
    }

    #[test]
    fn batch_mean_examples() {
        let mut r = rng(1);
        let z = random_spd(&mut r, 3, 1.0);
        let m = batch_mean_estimate(&[z.clone(), z.clone(), z.clone()]).unwrap();
        assert!((m.matrix() - z.matrix()).norm() < 1e-12);

        let m = batch_mean_estimate(&[SpdMatrix::from_diagonal(&[1.0, 4.0]), SpdMatrix::from_diagonal(&[4.0, 1.0])]).unwrap();
        assert!((m.matrix() - SpdMatrix::from_diagonal(&[2.0, 2.0]).matrix()).norm() < 1e-12);

        let batch: Vec<_> = (0..7).map(|_| random_spd(&mut r, 4, 1.0)).collect();
        let via_manifold = frechet_mean(&batch, KarcherSteps::Fixed(1), &SpdMatrix::identity(4)).unwrap().mean;
        assert_eq!(batch_mean_estimate(&batch).unwrap(), via_manifold);
        assert!(batch_mean_estimate(&[]).is_err());
    }

    #[test]
    fn running_update_endpoints() {
        let mut r = rng(2);
        let batch: Vec<_> = (0..5).map(|_| random_spd(&mut r, 3, 1.0)).collect();
        let bm = batch_mean_estimate(&batch).unwrap();
        let s0 = RunningGeoStats::identity(3);
        let s1 = update_running(&s0, &bm, &batch, 1.0, 0.0).unwrap();
        assert_eq!(s1.train_mean, bm);
        assert!((s1.train_var - frechet_variance(&batch, &bm).unwrap()).abs() < 1e-15);
        assert_eq!(s1.test_mean, s0.test_mean);
        assert_eq!(s1.test_var, s0.test_var);
        assert_eq!(s1.step, 1);

        let s2 = update_running(&s1, &bm, &batch, 0.0, 0.0).unwrap();
        assert_eq!(s2.train_mean, s1.train_mean);
        assert_eq!(s2.train_var, s1.train_var);
    }

    #[test]
    fn running_mean_converges_under_power_decay() {
        let mut r = rng(3);
        let center = random_spd(&mut r, 4, 1.0);
        let w = crate::manifold::Whitener::new(&center);
        let data: Vec<_> = (0..400)
            .map(|_| SpdMatrix::from_computed(w.color(random_spd(&mut r, 4, 0.6).matrix()), "t").unwrap())
            .collect();
        let truth = frechet(&data).mean;
        let sched = MomentumSchedule::PowerDecay { alpha: 0.6 };
        let mut stats = RunningGeoStats::identity(4);
        use rand::seq::IndexedRandom;
        for k in 1..=500 {
            let batch: Vec<_> = data.choose_multiple(&mut r, 10).cloned().collect();
            let bm = batch_mean_estimate(&batch).unwrap();
            stats = update_running(&stats, &bm, &batch, sched.value(k).unwrap(), 0.1).unwrap();
        }
        let dist = airm_dist(&stats.train_mean, &truth).unwrap();
        assert!(dist < 0.05, "distance after 500 steps: {dist}");
    }

    #[test]
    fn normalize_identity_configuration_is_noop() {
        let mut r = rng(4);
        let batch: Vec<_> = (0..4).map(|_| random_spd(&mut r, 3, 1.0)).collect();
        // With ε = 0 the exponent is exactly 1.
        let out = normalize_batch(&batch, &SpdMatrix::identity(3), 1.0, &NormParams::identity(3), 0.0).unwrap();
        for (a, b) in out.iter().zip(&batch) {
            assert!((a.matrix() - b.matrix()).norm() < 1e-10);
        }
        assert!(normalize_batch(&batch, &SpdMatrix::identity(3), 0.0, &NormParams::identity(3), 1e-5).is_err());
    }

    #[test]
    fn normalize_whitens_and_rescales() {
        let mut r = rng(5);
        let batch: Vec<_> = (0..30).map(|_| random_spd(&mut r, 4, 1.2)).collect();
        let st = frechet(&batch);
        let out = normalize_batch(&batch, &st.mean, st.variance, &NormParams::identity(4), 1e-5).unwrap();
        let ost = frechet(&out);
        assert!((ost.mean.matrix() - SpdMatrix::identity(4).matrix()).norm() < 1e-6);
        assert!((ost.variance - 1.0).abs() < 1e-3, "variance {}", ost.variance);

        let params = NormParams { log_nu: 2f64.ln(), bias_mean: SpdMatrix::identity(4) };
        let out = normalize_batch(&batch, &st.mean, st.variance, &params, 1e-5).unwrap();
        let ost = frechet(&out);
        assert!((ost.variance - 4.0).abs() < 1e-2, "variance {}", ost.variance);
    }

    #[test]
    fn normalize_commutes_with_permutation() {
        let mut r = rng(6);
        let batch: Vec<_> = (0..5).map(|_| random_spd(&mut r, 3, 1.0)).collect();
        let mean = random_spd(&mut r, 3, 0.5);
        let params = NormParams { log_nu: 0.3, bias_mean: random_spd(&mut r, 3, 0.5) };
        let out = normalize_batch(&batch, &mean, 0.7, &params, 1e-5).unwrap();
        let perm = [3, 0, 4, 2, 1];
        let shuffled: Vec<_> = perm.iter().map(|&i| batch[i].clone()).collect();
        let out_p = normalize_batch(&shuffled, &mean, 0.7, &params, 1e-5).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out_p[k], out[i]);
        }
    }

    #[test]
    fn fit_domain_examples() {
        let mut r = rng(7);
        let z = random_spd(&mut r, 3, 1.0);
        let st = fit_domain_stats(&RunningGeoStats::identity(3), &[z.clone(), z.clone(), z.clone()]).unwrap();
        assert!((st.test_mean.matrix() - z.matrix()).norm() < 1e-10);
        assert!(st.test_var < 1e-18);

        let (a, b) = (random_spd(&mut r, 3, 1.0), random_spd(&mut r, 3, 1.0));
        let st = fit_domain_stats(&RunningGeoStats::identity(3), &[a.clone(), b.clone()]).unwrap();
        assert!((st.test_mean.matrix() - geodesic(&a, &b, 0.5).unwrap().matrix()).norm() < 1e-8);

        assert!(fit_domain_stats(&RunningGeoStats::identity(3), &[a]).is_err());

        let domain: Vec<_> = (0..60).map(|_| random_spd(&mut r, 5, 1.0)).collect();
        let st = fit_domain_stats(&RunningGeoStats::identity(5), &domain).unwrap();
        let out = normalize_batch(&domain, &st.test_mean, st.test_var, &NormParams::identity(5), 1e-5).unwrap();
        let m = frechet(&out).mean;
        assert!((m.matrix() - SpdMatrix::identity(5).matrix()).norm() < 1e-6);
    }

    #[test]
    fn harmonic_momentum_streams_the_karcher_mean() {
        let mut r = rng(8);
        let center = random_spd(&mut r, 3, 1.0);
        let w = crate::manifold::Whitener::new(&center);
        let data: Vec<_> = (0..50)
            .map(|_| SpdMatrix::from_computed(w.color(random_spd(&mut r, 3, 1e-3).matrix()), "t").unwrap())
            .collect();
        let sched = MomentumSchedule::PowerDecay { alpha: 1.0 };
        let mut stats = RunningGeoStats::identity(3);
        for (k, z) in data.iter().enumerate() {
            let batch = std::slice::from_ref(z);
            stats = update_running(&stats, z, batch, sched.value(k + 1).unwrap(), 0.0).unwrap();
        }
        let truth = frechet(&data).mean;
        let dist = airm_dist(&stats.train_mean, &truth).unwrap();
        assert!(dist < 1e-6, "incremental estimate off by {dist}");
    }
}
