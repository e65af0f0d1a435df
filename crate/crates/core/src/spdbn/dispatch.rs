use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{DomainId, Mode, NormParams, NormTape, SpdBnConfig, SpdMbn};
use crate::error::{Error, Result};
use crate::matfun::SpdMatrix;

/// Key of the single layer used when dispatch is not domain specific.
pub const SHARED_LAYER: DomainId = DomainId(u32::MAX);

/// Counts observations received by each layer, split by their domain label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingCounter {
    counts: BTreeMap<(DomainId, DomainId), usize>,
}

impl RoutingCounter {
    fn record(&mut self, layer: DomainId, observed: DomainId) {
        *self.counts.entry((layer, observed)).or_default() += 1;
    }

    pub fn count(&self, layer: DomainId, observed: DomainId) -> usize {
        self.counts.get(&(layer, observed)).copied().unwrap_or(0)
    }

    /// Whether some domain layer ever received another domain's observation.
    pub fn mixed(&self) -> bool {
        self.counts.keys().any(|&(layer, obs)| layer != SHARED_LAYER && layer != obs)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct DispatchTape {
    groups: Vec<(Vec<usize>, NormTape)>,
    len: usize,
}

impl DispatchTape {
    /// Input gradients scattered back to batch order, plus the summed `d log_nu`.
    pub fn backward(&self, upstream: &[DMatrix<f64>]) -> Result<(Vec<DMatrix<f64>>, f64)> {
        if upstream.len() != self.len {
            return Err(Error::invalid(format!("dispatch backward: {} gradients for {} outputs", upstream.len(), self.len)));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.len];
        let mut d_log_nu = 0.0;
        for (idx, tape) in &self.groups {
            let ups: Vec<_> = idx.iter().map(|&i| upstream[i].clone()).collect();
            let (g, dn) = tape.backward(&ups)?;
            d_log_nu += dn;
            for (&i, gi) in idx.iter().zip(g) {
                grads[i] = Some(gi);
            }
        }
        Ok((grads.into_iter().map(|g| g.expect("every observation belongs to a group")).collect(), d_log_nu))
    }
}

#[derive(Debug, Clone)]
pub struct DispatchOutput {
    pub outputs: Vec<SpdMatrix>,
    /// Domains normalized with identity statistics because no layer existed.
    pub fallback_domains: Vec<DomainId>,
    pub tape: DispatchTape,
}

/// Parallel SPDMBN layers, one per domain, sharing one [`NormParams`].
#[derive(Debug, Clone)]
pub struct DomainSpdBn {
    pub config: SpdBnConfig,
    pub domain_specific: bool,
    dim: usize,
    layers: BTreeMap<DomainId, SpdMbn>,
    pub counter: RoutingCounter,
}

impl DomainSpdBn {
    pub fn new(dim: usize, config: SpdBnConfig, domain_specific: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, domain_specific, dim, layers: BTreeMap::new(), counter: RoutingCounter::default() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer_key(&self, domain: DomainId) -> DomainId {
        if self.domain_specific {
            domain
        } else {
            SHARED_LAYER
        }
    }

    pub fn layers(&self) -> &BTreeMap<DomainId, SpdMbn> {
        &self.layers
    }

    pub fn layer(&self, domain: DomainId) -> Option<&SpdMbn> {
        self.layers.get(&self.layer_key(domain))
    }

    pub fn insert_layer(&mut self, key: DomainId, layer: SpdMbn) -> Result<()> {
        if layer.dim() != self.dim {
            return Err(Error::ModelState(format!("layer for domain {key} has dimension {}, expected {}", layer.dim(), self.dim)));
        }
        self.layers.insert(key, layer);
        Ok(())
    }

    fn fresh(&self) -> SpdMbn {
        SpdMbn::new(self.dim, self.config).expect("config validated at construction")
    }

    fn group(&self, domains: &[DomainId]) -> BTreeMap<DomainId, Vec<usize>> {
        let mut groups: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
        for (i, &d) in domains.iter().enumerate() {
            groups.entry(self.layer_key(d)).or_default().push(i);
        }
        groups
    }

    fn check(batch: &[SpdMatrix], domains: &[DomainId]) -> Result<()> {
        if batch.len() != domains.len() {
            return Err(Error::invalid(format!("{} observations but {} domain labels", batch.len(), domains.len())));
        }
        Ok(())
    }

    pub fn forward(&mut self, batch: &[SpdMatrix], domains: &[DomainId], params: &NormParams, mode: Mode) -> Result<DispatchOutput> {
        match mode {
            Mode::Train { k } => self.forward_train(batch, domains, params, k),
            Mode::Eval => self.forward_eval(batch, domains, params),
        }
    }

    /// Routes each domain's observations to its layer, creating layers on the fly.
    pub fn forward_train(&mut self, batch: &[SpdMatrix], domains: &[DomainId], params: &NormParams, k: usize) -> Result<DispatchOutput> {
        Self::check(batch, domains)?;
        let groups = self.group(domains);
        if let Some(idx) = groups.values().find(|idx| idx.len() < 2) {
            return Err(Error::InvalidBatch(format!(
                "domain {} has {} observation in a training batch; at least 2 are needed",
                domains[idx[0]],
                idx.len()
            )));
        }
        let mut outputs: Vec<Option<SpdMatrix>> = vec![None; batch.len()];
        let mut tapes = Vec::with_capacity(groups.len());
        for (key, idx) in groups {
            let sub: Vec<_> = idx.iter().map(|&i| batch[i].clone()).collect();
            let fresh = self.fresh();
            let layer = self.layers.entry(key).or_insert(fresh);
            let (out, tape) = layer.forward_train(&sub, params, k)?;
            for (&i, o) in idx.iter().zip(out) {
                self.counter.record(key, domains[i]);
                outputs[i] = Some(o);
            }
            tapes.push((idx, tape));
        }
        Ok(DispatchOutput {
            outputs: outputs.into_iter().map(|o| o.expect("grouped")).collect(),
            fallback_domains: Vec::new(),
            tape: DispatchTape { groups: tapes, len: batch.len() },
        })
    }

    /// Normalizes with each layer's testing statistics. Unknown domains fall
    /// back to identity statistics and are listed in the output.
    pub fn forward_eval(&self, batch: &[SpdMatrix], domains: &[DomainId], params: &NormParams) -> Result<DispatchOutput> {
        Self::check(batch, domains)?;
        let mut outputs: Vec<Option<SpdMatrix>> = vec![None; batch.len()];
        let mut tapes = Vec::new();
        let mut fallback_domains = Vec::new();
        for (key, idx) in self.group(domains) {
            let sub: Vec<_> = idx.iter().map(|&i| batch[i].clone()).collect();
            let (out, tape) = match self.layers.get(&key) {
                Some(layer) => layer.forward_eval(&sub, params)?,
                None => {
                    let mut seen: Vec<_> = idx.iter().map(|&i| domains[i]).collect();
                    seen.dedup();
                    fallback_domains.extend(seen);
                    self.fresh().forward_eval(&sub, params)?
                }
            };
            for (&i, o) in idx.iter().zip(out) {
                outputs[i] = Some(o);
            }
            tapes.push((idx, tape));
        }
        fallback_domains.sort();
        fallback_domains.dedup();
        Ok(DispatchOutput {
            outputs: outputs.into_iter().map(|o| o.expect("grouped")).collect(),
            fallback_domains,
            tape: DispatchTape { groups: tapes, len: batch.len() },
        })
    }

    /// Unsupervised adaptation: fit the domain's testing statistics on all its data.
    pub fn adapt(&mut self, domain: DomainId, data: &[SpdMatrix]) -> Result<()> {
        let key = self.layer_key(domain);
        let fresh = self.fresh();
        self.layers.entry(key).or_insert(fresh).fit_domain(data)
    }
}
