//! Brute-force reference pipeline used to calibrate what the synthetic
//! data allows: per-domain tangent space mapping at each domain's own
//! Karcher mean of trial covariances, followed by shrinkage LDA trained on
//! source domains and applied to target domains.

use nalgebra::{DMatrix, DVector};

use super::metrics::balanced_accuracy;
use crate::error::{Error, Result};
use crate::manifold::{frechet_mean, KarcherSteps, Whitener};
use crate::matfun::{spd_map, ScalarFun, SpdMatrix, SymMatrix};
use crate::net::layers::{cov_pool_forward, upper_vec};
use crate::spdbn::{batch_mean_estimate, DomainId};
use crate::synthdata::{Dataset, DomainData};

/// Tangent vectors of one domain at its unlabeled Fréchet mean.
pub fn domain_tangent_features(domain: &DomainData) -> Result<Vec<DVector<f64>>> {
    let covs = domain
        .trials
        .iter()
        .map(|x| SpdMatrix::from_sym(cov_pool_forward(x)?.0))
        .collect::<Result<Vec<_>>>()?;
    let mean = frechet_mean(&covs, KarcherSteps::UntilConvergence, &batch_mean_estimate(&covs)?)?.mean;
    let w = Whitener::new(&mean);
    covs.iter()
        .map(|z| Ok(upper_vec(spd_map(&SymMatrix::from_symmetrized(w.whiten(z.matrix())), ScalarFun::Log)?.matrix())))
        .collect()
}

/// Linear discriminant with a shared, shrunk covariance.
#[derive(Debug, Clone)]
pub struct Lda {
    weights: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl Lda {
    pub fn fit(features: &[DVector<f64>], labels: &[usize], classes: usize, shrinkage: f64) -> Result<Self> {
        let n = features.len();
        let d = features.first().ok_or_else(|| Error::invalid("LDA needs training data"))?.len();
        let mut means = vec![DVector::zeros(d); classes];
        let mut counts = vec![0usize; classes];
        for (f, &y) in features.iter().zip(labels) {
            means[y] += f;
            counts[y] += 1;
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            if c > 0 {
                *m /= c as f64;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for (f, &y) in features.iter().zip(labels) {
            let r = f - &means[y];
            cov += &r * r.transpose();
        }
        cov /= (n.saturating_sub(classes)).max(1) as f64;
        let scale = cov.trace() / d as f64;
        let cov = cov * (1.0 - shrinkage) + DMatrix::identity(d, d) * (shrinkage * scale);
        let chol = cov.cholesky().ok_or_else(|| Error::numeric("LDA covariance is not positive definite"))?;
        let mut weights = DMatrix::zeros(d, classes);
        let mut offsets = DVector::zeros(classes);
        for (c, m) in means.iter().enumerate() {
            let w = chol.solve(m);
            offsets[c] = if counts[c] > 0 { -0.5 * m.dot(&w) } else { f64::NEG_INFINITY };
            weights.set_column(c, &w);
        }
        Ok(Self { weights, offsets })
    }

    pub fn predict(&self, f: &DVector<f64>) -> usize {
        (self.weights.transpose() * f + &self.offsets).argmax().0
    }
}

/// Mean target balanced accuracy of the oracle pipeline together with the
/// per-domain scores.
pub fn oracle_tsm_accuracy(dataset: &Dataset, source: &[DomainId], target: &[DomainId], shrinkage: f64) -> Result<(f64, Vec<(DomainId, f64)>)> {
    let domain = |id: DomainId| dataset.domain(id).ok_or_else(|| Error::invalid(format!("dataset has no domain {id}")));
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &id in source {
        let d = domain(id)?;
        xs.extend(domain_tangent_features(d)?);
        ys.extend_from_slice(&d.labels);
    }
    let lda = Lda::fit(&xs, &ys, dataset.classes(), shrinkage)?;
    let mut scores = Vec::with_capacity(target.len());
    for &id in target {
        let d = domain(id)?;
        let preds: Vec<usize> = domain_tangent_features(d)?.iter().map(|f| lda.predict(f)).collect();
        scores.push((id, balanced_accuracy(&preds, &d.labels)?));
    }
    let mean = scores.iter().map(|s| s.1).sum::<f64>() / scores.len().max(1) as f64;
    Ok((mean, scores))
}
