use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training-momentum schedule `γ_train(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentumSchedule {
    /// `1 − γ_min^{max(K−k, 0)/(K−1)} + γ_min`, clamped to `[γ_min, 1]`.
    ClampedExponential { gamma_min: f64, k_attain: usize },
    /// `1 / k^α` for `k ≥ 1`.
    PowerDecay { alpha: f64 },
    Constant { gamma: f64 },
}

impl MomentumSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MomentumSchedule::ClampedExponential { gamma_min, k_attain } => {
                if !(0.0..=1.0).contains(&gamma_min) {
                    return Err(Error::config(format!("gamma_min must lie in [0, 1], got {gamma_min}")));
                }
                if k_attain < 2 {
                    return Err(Error::config(format!("k_attain must be at least 2, got {k_attain}")));
                }
            }
            MomentumSchedule::PowerDecay { alpha } => {
                if !(alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::config(format!("alpha must be positive, got {alpha}")));
                }
            }
            MomentumSchedule::Constant { gamma } => {
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(Error::config(format!("constant momentum must lie in [0, 1], got {gamma}")));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, k: usize) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            MomentumSchedule::ClampedExponential { gamma_min, k_attain } => {
                let exponent = k_attain.saturating_sub(k) as f64 / (k_attain - 1) as f64;
                (1.0 - gamma_min.powf(exponent) + gamma_min).clamp(gamma_min, 1.0)
            }
            MomentumSchedule::PowerDecay { alpha } => {
                if k == 0 {
                    return Err(Error::config("power-decay momentum is defined for k >= 1"));
                }
                (k as f64).powf(-alpha)
            }
            MomentumSchedule::Constant { gamma } => gamma,
        })
    }
}
