use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::layers::{center_rows, classifier_backward, classifier_forward, SpatConv, TempConv, TempConvTape};
use super::{EpochBatch, ForwardPass, Gradients, ModelConfig, ParamRef};
use crate::error::{Error, Result};
use crate::optim::ParamKind;
use crate::sampling::{gaussian_matrix, SeededRng};
use crate::spdbn::{BnMode, DomainId, Mode, SpdBnConfig, SHARED_LAYER};

/// Floor applied to channel variances before the logarithm.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Running per-feature moments, one pair for training and one for testing.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    pub train_mean: DVector<f64>,
    pub train_var: DVector<f64>,
    pub test_mean: DVector<f64>,
    pub test_var: DVector<f64>,
    pub step: u64,
}

impl MomentStats {
    pub fn standard(dim: usize) -> Self {
        Self {
            train_mean: DVector::zeros(dim),
            train_var: DVector::from_element(dim, 1.0),
            test_mean: DVector::zeros(dim),
            test_var: DVector::from_element(dim, 1.0),
            step: 0,
        }
    }
}

fn batch_moments(rows: &[DVector<f64>], center: &DVector<f64>) -> DVector<f64> {
    let mut var = DVector::zeros(center.len());
    for v in rows {
        let d = v - center;
        var += d.component_mul(&d);
    }
    var / rows.len() as f64
}

fn mean_of(rows: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(rows[0].len());
    for v in rows {
        m += v;
    }
    m / rows.len() as f64
}

/// Euclidean momentum batch normalization with optional per-domain statistics.
#[derive(Debug, Clone)]
pub struct EuclideanMbn {
    pub config: SpdBnConfig,
    pub domain_specific: bool,
    dim: usize,
    layers: BTreeMap<DomainId, MomentStats>,
}

#[derive(Debug, Clone)]
pub struct MbnTape {
    /// Per observation: `1/√(var + ε)` of the statistics used.
    inv_std: Vec<DVector<f64>>,
    standardized: Vec<DVector<f64>>,
}

impl EuclideanMbn {
    pub fn new(dim: usize, config: SpdBnConfig, domain_specific: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, domain_specific, dim, layers: BTreeMap::new() })
    }

    pub fn layer_key(&self, domain: DomainId) -> DomainId {
        if self.domain_specific {
            domain
        } else {
            SHARED_LAYER
        }
    }

    pub fn layers(&self) -> &BTreeMap<DomainId, MomentStats> {
        &self.layers
    }

    pub fn insert_layer(&mut self, key: DomainId, stats: MomentStats) -> Result<()> {
        if stats.train_mean.len() != self.dim {
            return Err(Error::ModelState(format!("moment statistics for domain {key} have the wrong dimension")));
        }
        self.layers.insert(key, stats);
        Ok(())
    }

    fn groups(&self, domains: &[DomainId]) -> BTreeMap<DomainId, Vec<usize>> {
        let mut g: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
        for (i, &d) in domains.iter().enumerate() {
            g.entry(self.layer_key(d)).or_default().push(i);
        }
        g
    }

    fn apply(
        &self,
        rows: &[DVector<f64>],
        idx: &[usize],
        mean: &DVector<f64>,
        var: &DVector<f64>,
        scale_shift: (&DMatrix<f64>, &DMatrix<f64>),
        out: &mut [Option<(DVector<f64>, DVector<f64>, DVector<f64>)>],
    ) {
        let inv_std = var.map(|v| 1.0 / (v.max(0.0) + self.config.eps).sqrt());
        let scale = DVector::from_iterator(self.dim, scale_shift.0.iter().map(|s| s.exp()));
        let shift = DVector::from_iterator(self.dim, scale_shift.1.iter().copied());
        for &i in idx {
            let standardized = match self.config.mode {
                BnMode::Rbn => &rows[i] - mean,
                BnMode::SpdBn | BnMode::SpdMbn => (&rows[i] - mean).component_mul(&inv_std),
            };
            let y = standardized.component_mul(&scale) + &shift;
            let used = match self.config.mode {
                BnMode::Rbn => DVector::from_element(self.dim, 1.0),
                _ => inv_std.clone(),
            };
            out[i] = Some((y, used, standardized));
        }
    }

    fn collect(out: Vec<Option<(DVector<f64>, DVector<f64>, DVector<f64>)>>) -> (Vec<DVector<f64>>, MbnTape) {
        let mut ys = Vec::with_capacity(out.len());
        let mut inv_std = Vec::with_capacity(out.len());
        let mut standardized = Vec::with_capacity(out.len());
        for o in out {
            let (y, s, z) = o.expect("every observation belongs to a group");
            ys.push(y);
            inv_std.push(s);
            standardized.push(z);
        }
        (ys, MbnTape { inv_std, standardized })
    }

    pub fn forward_train(
        &mut self,
        rows: &[DVector<f64>],
        domains: &[DomainId],
        scale_shift: (&DMatrix<f64>, &DMatrix<f64>),
        k: usize,
    ) -> Result<(Vec<DVector<f64>>, MbnTape)> {
        let groups = self.groups(domains);
        if let Some(idx) = groups.values().find(|idx| idx.len() < 2) {
            return Err(Error::InvalidBatch(format!(
                "domain {} has {} observation in a training batch; at least 2 are needed",
                domains[idx[0]],
                idx.len()
            )));
        }
        let gamma_train = match self.config.mode {
            BnMode::SpdMbn => self.config.schedule.value(k)?,
            _ => self.config.gamma_test,
        };
        let gamma_test = self.config.gamma_test;
        let mut out = vec![None; rows.len()];
        for (key, idx) in groups {
            let sub: Vec<_> = idx.iter().map(|&i| rows[i].clone()).collect();
            let batch_mean = mean_of(&sub);
            let stats = self.layers.entry(key).or_insert_with(|| MomentStats::standard(self.dim));
            let blend = |m: &DVector<f64>, v: &DVector<f64>, g: f64| {
                let m_new = m * (1.0 - g) + &batch_mean * g;
                let v_new = v * (1.0 - g) + batch_moments(&sub, &m_new) * g;
                (m_new, v_new)
            };
            let (tm, tv) = blend(&stats.train_mean, &stats.train_var, gamma_train);
            let (sm, sv) = blend(&stats.test_mean, &stats.test_var, gamma_test);
            *stats = MomentStats { train_mean: tm, train_var: tv, test_mean: sm, test_var: sv, step: stats.step + 1 };
            let stats = stats.clone();
            let (mean, var) = match self.config.mode {
                BnMode::Rbn => (batch_mean.clone(), DVector::from_element(self.dim, 1.0)),
                _ => (stats.train_mean, stats.train_var),
            };
            self.apply(rows, &idx, &mean, &var, scale_shift, &mut out);
        }
        Ok(Self::collect(out))
    }

    pub fn forward_eval(
        &self,
        rows: &[DVector<f64>],
        domains: &[DomainId],
        scale_shift: (&DMatrix<f64>, &DMatrix<f64>),
    ) -> (Vec<DVector<f64>>, MbnTape, Vec<DomainId>) {
        let mut out = vec![None; rows.len()];
        let mut fallback = Vec::new();
        let standard = MomentStats::standard(self.dim);
        for (key, idx) in self.groups(domains) {
            let stats = match self.layers.get(&key) {
                Some(s) => s,
                None => {
                    fallback.extend(idx.iter().map(|&i| domains[i]));
                    &standard
                }
            };
            self.apply(rows, &idx, &stats.test_mean, &stats.test_var, scale_shift, &mut out);
        }
        fallback.sort();
        fallback.dedup();
        let (ys, tape) = Self::collect(out);
        (ys, tape, fallback)
    }

    /// Gradients for the inputs, the log-scales and the shifts.
    pub fn backward(&self, tape: &MbnTape, log_scale: &DMatrix<f64>, upstream: &[DVector<f64>]) -> (Vec<DVector<f64>>, DMatrix<f64>, DMatrix<f64>) {
        let scale = DVector::from_iterator(self.dim, log_scale.iter().map(|s| s.exp()));
        let mut d_scale = DMatrix::zeros(1, self.dim);
        let mut d_shift = DMatrix::zeros(1, self.dim);
        let mut d_in = Vec::with_capacity(upstream.len());
        for ((up, inv), z) in upstream.iter().zip(&tape.inv_std).zip(&tape.standardized) {
            for f in 0..self.dim {
                d_scale[(0, f)] += up[f] * z[f] * scale[f];
                d_shift[(0, f)] += up[f];
            }
            d_in.push(up.component_mul(&scale).component_mul(inv));
        }
        (d_in, d_scale, d_shift)
    }

    /// Full-data moments of one domain as its testing statistics.
    pub fn adapt(&mut self, domain: DomainId, rows: &[DVector<f64>]) -> Result<()> {
        if rows.len() < 2 {
            return Err(Error::invalid(format!("fitting domain statistics needs at least 2 observations, got {}", rows.len())));
        }
        let key = self.layer_key(domain);
        let mean = mean_of(rows);
        let var = batch_moments(rows, &mean);
        let stats = self.layers.entry(key).or_insert_with(|| MomentStats::standard(self.dim));
        stats.test_mean = mean;
        stats.test_var = var;
        Ok(())
    }
}

/// Ablation variant: log-variance features and Euclidean (DS)MBN.
#[derive(Debug, Clone)]
pub struct EuclideanNet {
    pub config: ModelConfig,
    pub temp: TempConv,
    pub spat: SpatConv,
    pub log_scale: DMatrix<f64>,
    pub shift: DMatrix<f64>,
    /// `(S + 1) × C`, bias in the last row.
    pub classifier: DMatrix<f64>,
    pub bn: EuclideanMbn,
}

struct EncoderTape {
    temp: TempConvTape,
    stacked: DMatrix<f64>,
    centered: DMatrix<f64>,
    variance: DVector<f64>,
}

pub struct EuclidTape {
    encoder: Vec<EncoderTape>,
    norm: MbnTape,
    features: DMatrix<f64>,
}

impl EuclidTape {
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }
}

impl EuclideanNet {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let n = config.net;
        n.validate()?;
        let stacked = n.temporal_filters * n.channels;
        let s = n.spatio_spectral_filters;
        Ok(Self {
            config,
            temp: TempConv { kernels: gaussian_matrix(rng, n.temporal_filters, n.temporal_kernel, 1.0 / (n.temporal_kernel as f64).sqrt()) },
            spat: SpatConv { weights: gaussian_matrix(rng, s, stacked, 1.0 / (stacked as f64).sqrt()) },
            log_scale: DMatrix::zeros(1, s),
            shift: DMatrix::zeros(1, s),
            classifier: DMatrix::zeros(s + 1, n.classes),
            bn: EuclideanMbn::new(s, config.bn, config.domain_specific)?,
        })
    }

    fn encode_one(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, EncoderTape)> {
        let (stacked, temp) = self.temp.forward(x)?;
        let filtered = self.spat.forward(&stacked)?;
        let t = filtered.ncols();
        if t < 2 {
            return Err(Error::invalid("variance pooling needs at least 2 samples"));
        }
        let centered = center_rows(&filtered);
        let variance = DVector::from_iterator(centered.nrows(), centered.row_iter().map(|r| r.norm_squared() / (t as f64 - 1.0)));
        let feat = variance.map(|v| v.max(VARIANCE_FLOOR).ln());
        Ok((feat, EncoderTape { temp, stacked, centered, variance }))
    }

    /// Log-variance features of raw trials.
    pub fn encode(&self, trials: &[DMatrix<f64>]) -> Result<Vec<DVector<f64>>> {
        trials.iter().map(|x| Ok(self.encode_one(x)?.0)).collect()
    }

    fn encode_batch(&self, batch: &EpochBatch, labelled: bool) -> Result<(Vec<DVector<f64>>, Vec<EncoderTape>)> {
        let n = &self.config.net;
        batch.validate(n.channels, n.time, n.classes, labelled)?;
        let mut feats = Vec::with_capacity(batch.len());
        let mut tapes = Vec::with_capacity(batch.len());
        for x in &batch.data {
            let (f, t) = self.encode_one(x)?;
            feats.push(f);
            tapes.push(t);
        }
        Ok((feats, tapes))
    }

    pub fn forward(&mut self, batch: &EpochBatch, mode: Mode) -> Result<ForwardPass<EuclidTape>> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train { k } => {
                let (feats, encoder) = self.encode_batch(batch, true)?;
                let (ys, norm) = self.bn.forward_train(&feats, &batch.domains, (&self.log_scale, &self.shift), k)?;
                self.finish(batch.len(), Some(&batch.labels), encoder, ys, norm, Vec::new())
            }
        }
    }

    pub fn forward_eval(&self, batch: &EpochBatch) -> Result<ForwardPass<EuclidTape>> {
        self.forward_eval_with(batch, Some(&batch.labels))
    }

    /// Eval pass; without labels the returned loss is zero.
    pub(crate) fn forward_eval_with(&self, batch: &EpochBatch, labels: Option<&[usize]>) -> Result<ForwardPass<EuclidTape>> {
        let (feats, encoder) = self.encode_batch(batch, labels.is_some())?;
        let (ys, norm, fallback) = self.bn.forward_eval(&feats, &batch.domains, (&self.log_scale, &self.shift));
        self.finish(batch.len(), labels, encoder, ys, norm, fallback)
    }

    fn finish(
        &self,
        m: usize,
        labels: Option<&[usize]>,
        encoder: Vec<EncoderTape>,
        ys: Vec<DVector<f64>>,
        norm: MbnTape,
        fallback_domains: Vec<DomainId>,
    ) -> Result<ForwardPass<EuclidTape>> {
        let s = self.config.net.spatio_spectral_filters;
        let features = DMatrix::from_fn(m, s, |i, j| ys[i][j]);
        let cls = classifier_forward(&features, &self.classifier, labels)?;
        if !cls.loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {}", cls.loss)));
        }
        Ok(ForwardPass {
            probs: cls.probs,
            loss: cls.loss,
            reeig_activations: 0,
            fallback_domains,
            tape: EuclidTape { encoder, norm, features },
        })
    }

    pub fn backward(&self, tape: &EuclidTape, probs: &DMatrix<f64>, labels: &[usize]) -> Result<Gradients> {
        let (d_cls, d_feat) = classifier_backward(&tape.features, &self.classifier, probs, labels);
        let ups: Vec<DVector<f64>> = d_feat.row_iter().map(|r| r.transpose()).collect();
        let (d_logvar, d_scale, d_shift) = self.bn.backward(&tape.norm, &self.log_scale, &ups);
        let mut d_temp = DMatrix::zeros(self.temp.kernels.nrows(), self.temp.kernels.ncols());
        let mut d_spat = DMatrix::zeros(self.spat.weights.nrows(), self.spat.weights.ncols());
        for (enc, g) in tape.encoder.iter().zip(&d_logvar) {
            let t = enc.centered.ncols() as f64;
            let mut d_filtered = enc.centered.clone();
            for (r, mut row) in d_filtered.row_iter_mut().enumerate() {
                let v = enc.variance[r];
                let d_var = if v > VARIANCE_FLOOR { g[r] / v } else { 0.0 };
                row *= 2.0 * d_var / (t - 1.0);
            }
            let (d_s, d_stacked) = self.spat.backward(&enc.stacked, &d_filtered);
            d_spat += d_s;
            d_temp += self.temp.kernel_grad(&enc.temp, &d_stacked);
        }
        Ok(Gradients(vec![
            ("temporal_kernels", d_temp),
            ("spatial_filters", d_spat),
            ("bn_log_scale", d_scale),
            ("bn_shift", d_shift),
            ("classifier", d_cls),
        ]))
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "temporal_kernels", kind: ParamKind::Euclidean, value: &mut self.temp.kernels },
            ParamRef { name: "spatial_filters", kind: ParamKind::Euclidean, value: &mut self.spat.weights },
            ParamRef { name: "bn_log_scale", kind: ParamKind::Euclidean, value: &mut self.log_scale },
            ParamRef { name: "bn_shift", kind: ParamKind::Euclidean, value: &mut self.shift },
            ParamRef { name: "classifier", kind: ParamKind::Euclidean, value: &mut self.classifier },
        ]
    }

    pub fn adapt(&mut self, domain: DomainId, trials: &[DMatrix<f64>]) -> Result<()> {
        let feats = self.encode(trials)?;
        self.bn.adapt(domain, &feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::rng;

    #[test]
    fn constant_channel_hits_the_variance_floor() {
        let mut r = rng(1);
        let cfg = ModelConfig {
            architecture: super::super::Architecture::Euclidean,
            net: super::super::TsmNetConfig { temporal_filters: 1, temporal_kernel: 1, spatio_spectral_filters: 2, subspace_dim: 1, channels: 2, time: 8, ..Default::default() },
            ..ModelConfig::default()
        };
        let mut net = EuclideanNet::new(cfg, &mut r).unwrap();
        net.temp.kernels = DMatrix::from_element(1, 1, 1.0);
        net.spat.weights = DMatrix::identity(2, 2);
        let mut x = gaussian_matrix(&mut r, 2, 8, 1.0);
        x.row_mut(1).fill(3.0);
        let f = net.encode(&[x]).unwrap();
        assert_eq!(f[0][1], VARIANCE_FLOOR.ln());
        assert!(f[0][0].is_finite());
    }

    #[test]
    fn exact_statistics_standardize_features() {
        let mut r = rng(2);
        let cfg = SpdBnConfig { eps: 1e-12, ..SpdBnConfig::default() };
        let mut bn = EuclideanMbn::new(3, cfg, true).unwrap();
        let rows: Vec<_> = (0..50).map(|_| gaussian_matrix(&mut r, 3, 1, 2.0).column(0) * 1.0 + DVector::from_vec(vec![1.0, -2.0, 5.0])).collect();
        bn.adapt(DomainId(0), &rows).unwrap();
        let (ys, _, fb) = bn.forward_eval(&rows, &vec![DomainId(0); 50], (&DMatrix::zeros(1, 3), &DMatrix::zeros(1, 3)));
        assert!(fb.is_empty());
        let mean = mean_of(&ys);
        let var = batch_moments(&ys, &mean);
        assert!(mean.norm() < 1e-6);
        assert!((var - DVector::from_element(3, 1.0)).norm() < 1e-6);
    }
}
