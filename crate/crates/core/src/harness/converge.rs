//! Streaming behavior of the SPDMBN running mean: convergence to the
//! full-data Fréchet mean under a decaying momentum, and the decay of its
//! Monte-Carlo variance under a slowly moving feature extractor.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::manifold::{airm_dist, frechet_mean, KarcherSteps};
use crate::matfun::{congruence, spd_map, ScalarFun, SpdMatrix};
use crate::sampling::{random_spd, random_sym, rng, SeededRng};
use crate::net::{ModelConfig, TsmNet, TsmNetConfig};
use crate::spdbn::{batch_mean_estimate, update_running, MomentumSchedule, RunningGeoStats};
use crate::synthdata::{generate, GenConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub dim: usize,
    pub steps: usize,
    pub batch: usize,
    /// Exponent of `γ(k) = 1/k^α`.
    pub alpha: f64,
    pub population: Population,
    /// Log-eigenvalue spread of the `random_spd` population.
    pub spread: f64,
    /// Size of the `random_spd` population.
    pub population_size: usize,
    pub seeds: usize,
    /// Monte-Carlo replicate streams for the variance experiment.
    pub replicates: usize,
    /// Fraction of the admissible step bound used by the moving extractor.
    pub drift: f64,
    /// Records the variance every `record_every` steps.
    pub record_every: usize,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            dim: 6,
            steps: 2000,
            batch: 10,
            alpha: 0.6,
            population: Population::FrozenEncoder,
            spread: 0.5,
            population_size: 500,
            seeds: 20,
            replicates: 100,
            drift: 0.01,
            record_every: 10,
            seed: 0,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("steps", self.steps),
            ("batch", self.batch),
            ("population_size", self.population_size),
            ("seeds", self.seeds),
            ("record_every", self.record_every),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.replicates < 2 {
            return Err(Error::config("replicates must be at least 2"));
        }
        if !(self.drift >= 0.0 && self.drift <= 1.0) {
            return Err(Error::config("drift must lie in [0, 1]"));
        }
        Ok(())
    }

    fn schedule(&self) -> MomentumSchedule {
        MomentumSchedule::PowerDecay { alpha: self.alpha }
    }
}

/// Where the streamed SPD features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    /// A randomly initialized, frozen TSMNet encoder with `subspace_dim =
    /// dim` applied to every trial of a default synthetic dataset.
    FrozenEncoder,
    /// `population_size` random SPD matrices around a random center.
    RandomSpd,
}

/// Seeded fixed population of SPD features.
pub fn feature_population(cfg: &ConvergenceConfig, seed: u64) -> Result<Vec<SpdMatrix>> {
    let mut r = rng(seed);
    match cfg.population {
        Population::FrozenEncoder => {
            let data = generate(&GenConfig { seed, ..GenConfig::default() })?;
            let model = ModelConfig {
                net: TsmNetConfig {
                    subspace_dim: cfg.dim,
                    channels: data.config.channels,
                    time: data.config.time,
                    ..TsmNetConfig::default()
                },
                ..ModelConfig::default()
            };
            let trials: Vec<_> = data.domains.into_iter().flat_map(|d| d.trials).collect();
            TsmNet::new(model, &mut r)?.encode(&trials)
        }
        Population::RandomSpd => {
            let center = random_spd(&mut r, cfg.dim, 1.0);
            let half = center.sqrt();
            (0..cfg.population_size)
                .map(|_| SpdMatrix::from_computed(congruence(half.matrix(), random_spd(&mut r, cfg.dim, cfg.spread).matrix()), "population"))
                .collect()
        }
    }
}

fn draw_batch(points: &[SpdMatrix], batch: usize, r: &mut SeededRng) -> Vec<SpdMatrix> {
    (0..batch).map(|_| points[r.random_range(0..points.len())].clone()).collect()
}

/// One streamed momentum update of the training statistics.
fn stream_step(stats: &RunningGeoStats, batch: &[SpdMatrix], gamma: f64) -> Result<RunningGeoStats> {
    let mean = batch_mean_estimate(batch)?;
    update_running(stats, &mean, batch, gamma, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanTrace {
    pub seed: u64,
    /// `δ(G_k, G*)` for `k = 1..=steps`.
    pub distance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanConvergenceReport {
    pub config: ConvergenceConfig,
    pub traces: Vec<MeanTrace>,
    pub final_distances: Vec<f64>,
    pub median_final_distance: f64,
}

impl MeanConvergenceReport {
    /// `step,seed_0,seed_1,...` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("step");
        for t in &self.traces {
            write!(s, ",seed_{}", t.seed).unwrap();
        }
        s.push('\n');
        for k in 0..self.config.steps {
            write!(s, "{}", k + 1).unwrap();
            for t in &self.traces {
                write!(s, ",{:e}", t.distance[k]).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Frozen extractor: streams batches through the running-mean update and
/// tracks the distance to the full-population Karcher mean.
pub fn mean_convergence(cfg: &ConvergenceConfig) -> Result<MeanConvergenceReport> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let mut traces = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        let points = feature_population(cfg, seed)?;
        let mut r = rng(seed);
        r.set_stream(u64::MAX);
        let target = frechet_mean(&points, KarcherSteps::UntilConvergence, &batch_mean_estimate(&points)?)?.mean;
        let mut stats = RunningGeoStats::identity(cfg.dim);
        let mut distance = Vec::with_capacity(cfg.steps);
        for k in 1..=cfg.steps {
            let batch = draw_batch(&points, cfg.batch, &mut r);
            stats = stream_step(&stats, &batch, schedule.value(k)?)?;
            distance.push(airm_dist(&stats.train_mean, &target)?);
        }
        traces.push(MeanTrace { seed, distance });
    }
    let final_distances: Vec<f64> = traces.iter().map(|t| *t.distance.last().expect("steps > 0")).collect();
    let median_final_distance = median(&final_distances);
    Ok(MeanConvergenceReport { config: *cfg, traces, final_distances, median_final_distance })
}

/// `‖θ_k − θ_{k−1}‖ ≤ (1−γ²)/(1−γ)² − 1`, which simplifies to `2γ/(1−γ)`.
pub fn step_bound(gamma: f64) -> f64 {
    if gamma >= 1.0 {
        f64::INFINITY
    } else {
        (1.0 - gamma * gamma) / (1.0 - gamma).powi(2) - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub config: ConvergenceConfig,
    pub steps: Vec<usize>,
    /// Mean squared distance of the replicate running means to their
    /// Karcher mean, per recorded step.
    pub variance: Vec<f64>,
    /// Extractor parameter `θ_k` per recorded step.
    pub theta: Vec<f64>,
    pub slope: f64,
    pub slope_t: f64,
    /// One-sided p-value of `slope > 0`.
    pub p_positive: f64,
    /// The largest `|θ_k − θ_{k−1}| / bound(γ_k)` over the run.
    pub max_bound_ratio: f64,
}

impl VarianceReport {
    pub fn passes(&self, level: f64) -> bool {
        self.p_positive >= level
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,theta,variance\n");
        for ((k, th), v) in self.steps.iter().zip(&self.theta).zip(&self.variance) {
            writeln!(s, "{k},{th:e},{v:e}").unwrap();
        }
        s
    }
}

/// Ordinary least squares slope, its t statistic and the one-sided p-value
/// of a positive slope.
pub fn slope_test(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::invalid("slope test needs at least 3 paired points"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let t = if se > 0.0 { slope / se } else if slope > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
    let dist = StudentsT::new(0.0, 1.0, nf - 2.0).map_err(|e| Error::numeric(e.to_string()))?;
    Ok((slope, t, 1.0 - dist.cdf(t)))
}

/// Slowly moving extractor `Z(θ) = exp(θB)·Z·exp(θB)` with steps at a
/// `drift` fraction of the admissible bound (capped at `drift`), streamed
/// through `replicates` independent batch sequences sharing one parameter
/// path.
pub fn variance_decay(cfg: &ConvergenceConfig) -> Result<VarianceReport> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let points = feature_population(cfg, cfg.seed)?;
    let mut r = rng(cfg.seed);
    r.set_stream(u64::MAX);
    let b = random_sym(&mut r, cfg.dim, 1.0).into_matrix();
    let b = &b / b.norm();
    let mut thetas = vec![0.0];
    let mut max_ratio: f64 = 0.0;
    for k in 1..=cfg.steps {
        let bound = step_bound(schedule.value(k)?);
        let step = cfg.drift * bound.min(1.0);
        max_ratio = max_ratio.max(if bound.is_finite() { step / bound } else { 0.0 });
        thetas.push(thetas[k - 1] + step);
    }
    let moved = |theta: f64, z: &SpdMatrix| -> Result<SpdMatrix> {
        let m = spd_map(&crate::matfun::SymMatrix::from_symmetrized(&b * theta), ScalarFun::Exp)?;
        SpdMatrix::from_computed(congruence(m.matrix(), z.matrix()), "moved feature")
    };

    let mut streams: Vec<(SeededRng, RunningGeoStats)> = (0..cfg.replicates)
        .map(|i| {
            let mut s = rng(cfg.seed);
            s.set_stream(i as u64 + 1);
            (s, RunningGeoStats::identity(cfg.dim))
        })
        .collect();
    let (mut steps, mut variance, mut theta) = (Vec::new(), Vec::new(), Vec::new());
    for k in 1..=cfg.steps {
        let gamma = schedule.value(k)?;
        for (sr, stats) in streams.iter_mut() {
            let batch = draw_batch(&points, cfg.batch, sr).iter().map(|z| moved(thetas[k], z)).collect::<Result<Vec<_>>>()?;
            *stats = stream_step(stats, &batch, gamma)?;
        }
        if k % cfg.record_every == 0 {
            let means: Vec<SpdMatrix> = streams.iter().map(|(_, s)| s.train_mean.clone()).collect();
            let center = frechet_mean(&means, KarcherSteps::UntilConvergence, &batch_mean_estimate(&means)?)?;
            steps.push(k);
            variance.push(center.variance);
            theta.push(thetas[k]);
        }
    }
    let x: Vec<f64> = steps.iter().map(|&k| k as f64).collect();
    let (slope, slope_t, p_positive) = slope_test(&x, &variance)?;
    Ok(VarianceReport { config: *cfg, steps, variance, theta, slope, slope_t, p_positive, max_bound_ratio: max_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ConvergenceConfig {
        ConvergenceConfig {
            dim: 4,
            steps: 200,
            seeds: 3,
            population: Population::RandomSpd,
            population_size: 100,
            replicates: 10,
            ..ConvergenceConfig::default()
        }
    }

    #[test]
    fn gamma_one_forgets_everything() {
        let mut r = rng(0);
        let pts = feature_population(&small(), 0).unwrap();
        let mut stats = RunningGeoStats::identity(4);
        for _ in 0..5 {
            let batch = draw_batch(&pts, 10, &mut r);
            stats = stream_step(&stats, &batch, 1.0).unwrap();
            assert!(airm_dist(&stats.train_mean, &batch_mean_estimate(&batch).unwrap()).unwrap() < 1e-10);
        }
    }

    #[test]
    fn running_mean_approaches_population_mean() {
        let rep = mean_convergence(&small()).unwrap();
        for t in &rep.traces {
            assert!(t.distance[199] < t.distance[0], "{:?}", (t.distance[0], t.distance[199]));
        }
        assert_eq!(rep.csv().lines().count(), 201);
    }

    #[test]
    fn non_positive_alpha_is_rejected() {
        assert!(matches!(mean_convergence(&ConvergenceConfig { alpha: 0.0, ..small() }), Err(Error::Config(_))));
    }

    #[test]
    fn step_bound_simplifies() {
        for g in [0.1, 0.5, 0.9] {
            assert!((step_bound(g) - 2.0 * g / (1.0 - g)).abs() < 1e-12);
        }
        assert!(step_bound(1.0).is_infinite());
    }

    #[test]
    fn slope_test_signs() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let up: Vec<f64> = x.iter().map(|v| 2.0 * v + (v * 7.3).sin()).collect();
        let down: Vec<f64> = x.iter().map(|v| -2.0 * v + (v * 7.3).sin()).collect();
        assert!(slope_test(&x, &up).unwrap().2 < 0.01);
        assert!(slope_test(&x, &down).unwrap().2 > 0.99);
    }

    #[test]
    fn variance_decays_on_small_run() {
        let rep = variance_decay(&small()).unwrap();
        assert!(rep.slope < 0.0);
        assert!(rep.max_bound_ratio <= small().drift + 1e-15);
        assert!(rep.passes(0.05));
    }
}
