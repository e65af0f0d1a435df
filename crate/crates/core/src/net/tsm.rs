use nalgebra::{DMatrix, DVector};

use super::layers::{
    bimap_backward, bimap_forward, classifier_backward, classifier_forward, cov_pool_backward, cov_pool_forward,
    log_eig_backward, log_eig_forward, reeig_backward, reeig_forward, tangent_dim, SpatConv, TempConv, TempConvTape,
};
use super::{EpochBatch, ForwardPass, Gradients, ModelConfig, ParamRef};
use crate::error::{Error, Result};
use crate::matfun::{SpdMatrix, SymMatrix};
use crate::optim::ParamKind;
use crate::sampling::{gaussian_matrix, random_stiefel, SeededRng};
use crate::spdbn::{DispatchTape, DomainId, DomainSpdBn, Mode, NormParams};

/// The SPD architecture.
#[derive(Debug, Clone)]
pub struct TsmNet {
    pub config: ModelConfig,
    pub temp: TempConv,
    pub spat: SpatConv,
    /// `S × D` Stiefel matrix.
    pub bimap: DMatrix<f64>,
    /// `1 × 1` holding `log ν_φ`.
    pub log_nu: DMatrix<f64>,
    /// `(D(D+1)/2 + 1) × C`, bias in the last row.
    pub classifier: DMatrix<f64>,
    pub bn: DomainSpdBn,
}

#[derive(Debug, Clone)]
struct EncoderTape {
    temp: TempConvTape,
    stacked: DMatrix<f64>,
    centered: DMatrix<f64>,
    cov: SymMatrix,
    projected: SymMatrix,
}

pub struct TsmTape {
    encoder: Vec<EncoderTape>,
    norm: DispatchTape,
    normalized: Vec<SpdMatrix>,
    features: DMatrix<f64>,
}

impl TsmTape {
    /// Tangent vectors fed to the classifier, one row per observation.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// SPDDSMBN outputs.
    pub fn normalized(&self) -> &[SpdMatrix] {
        &self.normalized
    }
}

impl TsmNet {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let n = config.net;
        n.validate()?;
        let stacked = n.temporal_filters * n.channels;
        let temp = TempConv { kernels: gaussian_matrix(rng, n.temporal_filters, n.temporal_kernel, 1.0 / (n.temporal_kernel as f64).sqrt()) };
        let spat = SpatConv { weights: gaussian_matrix(rng, n.spatio_spectral_filters, stacked, 1.0 / (stacked as f64).sqrt()) };
        let bimap = random_stiefel(rng, n.spatio_spectral_filters, n.subspace_dim);
        Ok(Self {
            config,
            temp,
            spat,
            bimap,
            log_nu: DMatrix::zeros(1, 1),
            classifier: DMatrix::zeros(tangent_dim(n.subspace_dim) + 1, n.classes),
            bn: DomainSpdBn::new(n.subspace_dim, config.bn, config.domain_specific)?,
        })
    }

    pub fn norm_params(&self) -> NormParams {
        NormParams { log_nu: self.log_nu[(0, 0)], bias_mean: SpdMatrix::identity(self.config.net.subspace_dim) }
    }

    fn encode_one(&self, x: &DMatrix<f64>) -> Result<(SpdMatrix, usize, EncoderTape)> {
        let (stacked, temp) = self.temp.forward(x)?;
        let filtered = self.spat.forward(&stacked)?;
        let (cov, centered) = cov_pool_forward(&filtered)?;
        let projected = bimap_forward(&cov, &self.bimap)?;
        let (rect, clipped) = reeig_forward(&projected, self.config.net.reeig_eps)?;
        Ok((rect, clipped, EncoderTape { temp, stacked, centered, cov, projected }))
    }

    /// `f_θ`: SPD features of raw trials.
    pub fn encode(&self, trials: &[DMatrix<f64>]) -> Result<Vec<SpdMatrix>> {
        trials.iter().map(|x| Ok(self.encode_one(x)?.0)).collect()
    }

    fn check(&self, batch: &EpochBatch, labelled: bool) -> Result<()> {
        let n = &self.config.net;
        batch.validate(n.channels, n.time, n.classes, labelled)
    }

    pub fn forward(&mut self, batch: &EpochBatch, mode: Mode) -> Result<ForwardPass<TsmTape>> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train { k } => {
                self.check(batch, true)?;
                let (spd, clipped, encoder) = self.encode_batch(batch)?;
                let params = self.norm_params();
                let out = self.bn.forward_train(&spd, &batch.domains, &params, k)?;
                self.finish(batch, Some(&batch.labels), encoder, clipped, out)
            }
        }
    }

    /// Eval-mode pass; every statistic stays frozen.
    pub fn forward_eval(&self, batch: &EpochBatch) -> Result<ForwardPass<TsmTape>> {
        self.forward_eval_with(batch, Some(&batch.labels))
    }

    /// Eval pass; without labels the returned loss is zero.
    pub(crate) fn forward_eval_with(&self, batch: &EpochBatch, labels: Option<&[usize]>) -> Result<ForwardPass<TsmTape>> {
        self.check(batch, labels.is_some())?;
        let (spd, clipped, encoder) = self.encode_batch(batch)?;
        let out = self.bn.forward_eval(&spd, &batch.domains, &self.norm_params())?;
        self.finish(batch, labels, encoder, clipped, out)
    }

    fn encode_batch(&self, batch: &EpochBatch) -> Result<(Vec<SpdMatrix>, usize, Vec<EncoderTape>)> {
        let mut spd = Vec::with_capacity(batch.len());
        let mut tapes = Vec::with_capacity(batch.len());
        let mut clipped = 0;
        for x in &batch.data {
            let (z, c, t) = self.encode_one(x)?;
            spd.push(z);
            clipped += c;
            tapes.push(t);
        }
        Ok((spd, clipped, tapes))
    }

    fn finish(
        &self,
        batch: &EpochBatch,
        labels: Option<&[usize]>,
        encoder: Vec<EncoderTape>,
        clipped: usize,
        out: crate::spdbn::DispatchOutput,
    ) -> Result<ForwardPass<TsmTape>> {
        let dt = tangent_dim(self.config.net.subspace_dim);
        let mut features = DMatrix::zeros(batch.len(), dt);
        for (j, z) in out.outputs.iter().enumerate() {
            features.set_row(j, &log_eig_forward(z).transpose());
        }
        let cls = classifier_forward(&features, &self.classifier, labels)?;
        if !cls.loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {}", cls.loss)));
        }
        Ok(ForwardPass {
            probs: cls.probs,
            loss: cls.loss,
            reeig_activations: clipped,
            fallback_domains: out.fallback_domains,
            tape: TsmTape { encoder, norm: out.tape, normalized: out.outputs, features },
        })
    }

    pub fn backward(&self, tape: &TsmTape, probs: &DMatrix<f64>, labels: &[usize]) -> Result<Gradients> {
        let (d_cls, d_feat) = classifier_backward(&tape.features, &self.classifier, probs, labels);
        let d_norm: Vec<DMatrix<f64>> = tape
            .normalized
            .iter()
            .enumerate()
            .map(|(j, z)| log_eig_backward(z, &DVector::from_iterator(d_feat.ncols(), d_feat.row(j).iter().copied())))
            .collect::<Result<_>>()?;
        let (d_rect, d_log_nu) = tape.norm.backward(&d_norm)?;
        let mut d_temp = DMatrix::zeros(self.temp.kernels.nrows(), self.temp.kernels.ncols());
        let mut d_spat = DMatrix::zeros(self.spat.weights.nrows(), self.spat.weights.ncols());
        let mut d_bimap = DMatrix::zeros(self.bimap.nrows(), self.bimap.ncols());
        let eps = self.config.net.reeig_eps;
        for (enc, up) in tape.encoder.iter().zip(&d_rect) {
            let d_proj = reeig_backward(&enc.projected, eps, up)?;
            let (d_cov, d_w) = bimap_backward(&enc.cov, &self.bimap, &d_proj);
            d_bimap += d_w;
            let d_filtered = cov_pool_backward(&enc.centered, &d_cov);
            let (d_s, d_stacked) = self.spat.backward(&enc.stacked, &d_filtered);
            d_spat += d_s;
            d_temp += self.temp.kernel_grad(&enc.temp, &d_stacked);
        }
        Ok(Gradients(vec![
            ("temporal_kernels", d_temp),
            ("spatial_filters", d_spat),
            ("bimap", d_bimap),
            ("log_nu", DMatrix::from_element(1, 1, d_log_nu)),
            ("classifier", d_cls),
        ]))
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "temporal_kernels", kind: ParamKind::Euclidean, value: &mut self.temp.kernels },
            ParamRef { name: "spatial_filters", kind: ParamKind::Euclidean, value: &mut self.spat.weights },
            ParamRef { name: "bimap", kind: ParamKind::Stiefel, value: &mut self.bimap },
            ParamRef { name: "log_nu", kind: ParamKind::Euclidean, value: &mut self.log_nu },
            ParamRef { name: "classifier", kind: ParamKind::Euclidean, value: &mut self.classifier },
        ]
    }

    pub fn adapt(&mut self, domain: DomainId, trials: &[DMatrix<f64>]) -> Result<()> {
        let spd = self.encode(trials)?;
        self.bn.adapt(domain, &spd)
    }
}
