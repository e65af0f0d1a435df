use nalgebra::DMatrix;

use super::{batch_mean_estimate, dispersion_exponent, fit_domain_stats, update_running, BnMode, Mode, NormParams, RunningGeoStats, SpdBnConfig};
use crate::error::{Error, Result};
use crate::manifold::Transport;
use crate::matfun::{power_exponent_backward, spd_map_backward, symmetrize, ScalarFun, SpdMatrix};

/// Intermediates of one whiten-rescale-rebias pass, kept for the backward.
///
/// The reference mean and variance are constants of the tape: gradients do
/// not flow into the running or batch statistics.
#[derive(Debug, Clone)]
pub struct NormTape {
    whiten: Transport,
    rebias: Transport,
    whitened: Vec<SpdMatrix>,
    exponent: Option<f64>,
    learn_variance: bool,
}

impl NormTape {
    /// Forward pass `Γ_{I→G_φ}(Γ_{M→I}(Z)^p)`; `exponent = None` skips the power.
    pub(crate) fn record(
        batch: &[SpdMatrix],
        use_mean: &SpdMatrix,
        exponent: Option<f64>,
        params: &NormParams,
        learn_variance: bool,
    ) -> Result<(Vec<SpdMatrix>, NormTape)> {
        let d = use_mean.dim();
        if let Some(bad) = batch.iter().position(|z| z.dim() != d) {
            return Err(Error::invalid(format!("observation {bad} has dimension {}, expected {d}", batch[bad].dim())));
        }
        let whiten = Transport::new(use_mean, &SpdMatrix::identity(d))?;
        let rebias = Transport::new(&SpdMatrix::identity(d), &params.bias_mean)?;
        let mut whitened = Vec::with_capacity(batch.len());
        let mut out = Vec::with_capacity(batch.len());
        for z in batch {
            let w = whiten.apply(z)?;
            let scaled = match exponent {
                Some(p) if p != 1.0 => w.map_positive(ScalarFun::Power(p)).map_err(|_| {
                    Error::numeric(format!("dispersion rescaling with exponent {p:e} left the SPD cone"))
                })?,
                _ => w.clone(),
            };
            if scaled.matrix().iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("dispersion rescaling with exponent {exponent:?} overflowed")));
            }
            out.push(rebias.apply(&scaled)?);
            whitened.push(w);
        }
        Ok((out, NormTape { whiten, rebias, whitened, exponent, learn_variance }))
    }

    pub fn len(&self) -> usize {
        self.whitened.len()
    }

    pub fn is_empty(&self) -> bool {
        self.whitened.is_empty()
    }

    /// Input gradients and the gradient with respect to `log_nu`.
    pub fn backward(&self, upstream: &[DMatrix<f64>]) -> Result<(Vec<DMatrix<f64>>, f64)> {
        if upstream.len() != self.whitened.len() {
            return Err(Error::invalid(format!(
                "normalization backward: {} upstream gradients for {} recorded outputs",
                upstream.len(),
                self.whitened.len()
            )));
        }
        let mut d_log_nu = 0.0;
        let mut grads = Vec::with_capacity(upstream.len());
        for (w, up) in self.whitened.iter().zip(upstream) {
            let d_scaled = self.rebias.backward(up);
            let d_white = match self.exponent {
                Some(p) => {
                    if self.learn_variance {
                        // p = exp(log_nu) / (ν_T + ε), so dp/dlog_nu = p.
                        d_log_nu += p * power_exponent_backward(w, p, &d_scaled);
                    }
                    if p == 1.0 {
                        symmetrize(&d_scaled)
                    } else {
                        spd_map_backward(w.as_sym(), ScalarFun::Power(p), &d_scaled)?.into_matrix()
                    }
                }
                None => symmetrize(&d_scaled),
            };
            grads.push(symmetrize(&self.whiten.backward(&d_white)));
        }
        Ok((grads, d_log_nu))
    }
}

/// One SPD momentum batch-normalization layer with its running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMbn {
    pub config: SpdBnConfig,
    pub stats: RunningGeoStats,
}

impl SpdMbn {
    pub fn new(dim: usize, config: SpdBnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, stats: RunningGeoStats::identity(dim) })
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    fn exponent(&self, params: &NormParams, variance: f64) -> Option<f64> {
        match self.config.mode {
            BnMode::Rbn => None,
            BnMode::SpdBn | BnMode::SpdMbn => Some(dispersion_exponent(params, variance, self.config.eps)),
        }
    }

    fn learns_variance(&self) -> bool {
        self.config.learn_variance && self.config.mode != BnMode::Rbn
    }

    pub fn forward(&mut self, batch: &[SpdMatrix], params: &NormParams, mode: Mode) -> Result<(Vec<SpdMatrix>, NormTape)> {
        match mode {
            Mode::Train { k } => self.forward_train(batch, params, k),
            Mode::Eval => self.forward_eval(batch, params),
        }
    }

    /// Updates the running statistics with the batch, then normalizes it.
    pub fn forward_train(&mut self, batch: &[SpdMatrix], params: &NormParams, k: usize) -> Result<(Vec<SpdMatrix>, NormTape)> {
        if batch.is_empty() {
            return Err(Error::InvalidBatch("training batch is empty".into()));
        }
        let batch_mean = batch_mean_estimate(batch)?;
        let gamma_train = match self.config.mode {
            BnMode::SpdMbn => self.config.schedule.value(k)?,
            BnMode::Rbn | BnMode::SpdBn => self.config.gamma_test,
        };
        self.stats = update_running(&self.stats, &batch_mean, batch, gamma_train, self.config.gamma_test)?;
        let (mean, var) = match self.config.mode {
            BnMode::Rbn => (&batch_mean, 1.0),
            BnMode::SpdBn | BnMode::SpdMbn => (&self.stats.train_mean, self.stats.train_var),
        };
        let exponent = self.exponent(params, var);
        NormTape::record(batch, mean, exponent, params, self.learns_variance())
    }

    /// Normalizes with the testing statistics; the layer is left untouched.
    pub fn forward_eval(&self, batch: &[SpdMatrix], params: &NormParams) -> Result<(Vec<SpdMatrix>, NormTape)> {
        let exponent = self.exponent(params, self.stats.test_var);
        NormTape::record(batch, &self.stats.test_mean, exponent, params, self.learns_variance())
    }

    /// Replaces the testing statistics with full-data Karcher estimates.
    pub fn fit_domain(&mut self, domain_data: &[SpdMatrix]) -> Result<()> {
        self.stats = fit_domain_stats(&self.stats, domain_data)?;
        Ok(())
    }
}
