//! Store of pristine per-domain sub-network states over one frozen trunk.

use std::collections::BTreeMap;

use crate::backbone::{Backbone, SubNetworkState};
use crate::data::DomainId;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::signature::{compute_fingerprint, Probe, SignatureNet};
use crate::train::dot;

#[derive(Clone, Debug, PartialEq)]
pub struct Bank<T> {
    trunk: Backbone<T>,
    states: BTreeMap<DomainId, SubNetworkState<T>>,
}

impl<T: Scalar> Bank<T> {
    /// `trunk` supplies the frozen conv weights; its own state is ignored.
    /// Every state must come from a distinct seen domain, clean included.
    pub fn new(trunk: Backbone<T>, states: Vec<SubNetworkState<T>>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in states {
            trunk.state.check_compatible(&s)?;
            if !s.origin.is_seen() {
                return Err(Error::GuardViolation(format!("sub-network for unseen domain {}", s.origin)));
            }
            if map.insert(s.origin, s).is_some() {
                return Err(Error::config("two sub-networks for one domain"));
            }
        }
        if !map.contains_key(&DomainId::CLEAN) {
            return Err(Error::config("the bank needs a clean sub-network"));
        }
        let mut trunk = trunk;
        trunk.freeze_trunk();
        Ok(Bank { trunk, states: map })
    }

    pub fn lookup(&self, domain: DomainId) -> Result<&SubNetworkState<T>> {
        self.states.get(&domain).ok_or_else(|| Error::NotFound(format!("no sub-network for {domain}")))
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.states.keys().copied().collect()
    }

    pub fn states(&self) -> impl Iterator<Item = &SubNetworkState<T>> {
        self.states.values()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn trunk(&self) -> &Backbone<T> {
        &self.trunk
    }

    /// A live network running a pristine copy of `domain`'s state.
    pub fn instantiate(&self, domain: DomainId) -> Result<Backbone<T>> {
        let mut net = self.trunk.clone();
        net.swap_in(self.lookup(domain)?)?;
        Ok(net)
    }

    /// Computes and stores every state's fingerprint.
    pub fn attach_fingerprints(&mut self, probe: &Probe<T>) -> Result<()> {
        for s in self.states.values_mut() {
            s.fingerprint = Some(compute_fingerprint(&self.trunk, s, probe)?);
        }
        Ok(())
    }

    /// Fingerprints stacked `[d_s, F]` in domain order.
    pub fn fingerprint_matrix(&self) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = self
            .states
            .values()
            .map(|s| s.fingerprint.as_ref().ok_or_else(|| Error::NotFound(format!("fingerprint of {}", s.origin))))
            .collect::<Result<_>>()?;
        Tensor::cat_batch(&parts)
    }

    /// Computes and stores every state's signature.
    pub fn attach_signatures(&mut self, net: &SignatureNet<T>) -> Result<()> {
        let s = net.signature(&self.fingerprint_matrix()?)?;
        for (i, st) in self.states.values_mut().enumerate() {
            st.signature = Some(s.row(i).to_vec());
        }
        Ok(())
    }

    /// Domain whose stored signature is most similar to `c` (lowest id on ties).
    pub fn select_by_signature(&self, c: &[T]) -> Result<(DomainId, T)> {
        let mut best: Option<(DomainId, T)> = None;
        for (d, s) in &self.states {
            let sig = s.signature.as_ref().ok_or_else(|| Error::NotFound(format!("signature of {d}")))?;
            let v = dot(sig, c);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((*d, v));
            }
        }
        best.ok_or(Error::NotFound("empty bank".into()))
    }
}
