//! Posterior computation over `(S, θ_S, η)`: exact enumeration over supports
//! for fixed `η`, and a reversible-jump sampler for the full joint posterior.

mod enumerate;
pub mod reparam;
mod rjmcmc;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, serde_rows_opt};

pub(crate) use enumerate::{check_budget, size_log_prior};
pub use enumerate::{
    enumerate_posterior_laplace_slab, enumerate_posterior_normal_slab, laplace_support_integral, LaplaceIntegral,
    QuadratureOptions,
};
pub use rjmcmc::{
    rjmcmc_sample, support_marginals, ChainRecord, McmcChain, McmcOptions, MoveKind, MoveMix, MoveStats, SlabKind,
};

/// One support with its posterior log-probability and, when available, the
/// conditional posterior mean and covariance of `θ_S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub support: Vec<usize>,
    pub log_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "serde_rows_opt")]
    pub cov: Option<DMatrix<f64>>,
}

impl SupportEntry {
    pub fn new(support: Vec<usize>, log_weight: f64) -> Self {
        Self {
            support,
            log_weight,
            mean: None,
            cov: None,
        }
    }

    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// A distribution over supports, normalized in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportPosterior {
    pub p: usize,
    pub entries: Vec<SupportEntry>,
    pub inclusion_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl SupportPosterior {
    /// Normalizes unnormalized log-weights; entries with weight `−∞` are kept.
    pub fn from_log_weights(p: usize, mut entries: Vec<SupportEntry>, flags: Vec<String>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("no supports to normalize".into()));
        }
        let logs: Vec<f64> = entries.iter().map(|e| e.log_weight).collect();
        let z = log_sum_exp(&logs);
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("support log-normalizer {z}")));
        }
        let mut inclusion = vec![0.0; p];
        for e in &mut entries {
            if e.support.iter().any(|&j| j >= p) {
                return Err(Error::Shape(format!("support {:?} outside 0..{p}", e.support)));
            }
            e.log_weight -= z;
            let w = e.weight();
            for &j in &e.support {
                inclusion[j] += w;
            }
        }
        for v in &mut inclusion {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            p,
            entries,
            inclusion_probs: inclusion,
            flags,
        })
    }

    /// Support frequencies of `(support, θ_S)` draws, with the empirical mean
    /// and covariance of `θ_S` within each support.
    pub fn from_draws<'a>(p: usize, draws: impl IntoIterator<Item = (&'a [usize], &'a [f64])>) -> Result<Self> {
        let mut groups: BTreeMap<&[usize], Vec<&[f64]>> = BTreeMap::new();
        for (s, t) in draws {
            if s.len() != t.len() {
                return Err(Error::Shape(format!("support {s:?} with {} values", t.len())));
            }
            groups.entry(s).or_default().push(t);
        }
        if groups.is_empty() {
            return Err(Error::Config("no draws".into()));
        }
        let entries = groups
            .into_iter()
            .map(|(support, draws)| {
                let k = support.len();
                let n = draws.len() as f64;
                let mut mean = DVector::zeros(k);
                for d in &draws {
                    mean += DVector::from_column_slice(d);
                }
                mean /= n;
                let mut cov = DMatrix::zeros(k, k);
                for d in &draws {
                    let c = DVector::from_column_slice(d) - &mean;
                    cov += &c * c.transpose();
                }
                cov /= n;
                let mut e = SupportEntry::new(support.to_vec(), n.ln());
                e.mean = Some(mean.iter().copied().collect());
                e.cov = Some(cov);
                e
            })
            .collect();
        Self::from_log_weights(p, entries, vec![])
    }

    pub fn weight(&self, support: &[usize]) -> f64 {
        self.entries
            .iter()
            .find(|e| e.support == support)
            .map_or(0.0, SupportEntry::weight)
    }

    pub fn probabilities(&self) -> BTreeMap<Vec<usize>, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.support.clone()).or_insert(0.0) += e.weight();
        }
        out
    }

    /// The most probable support; ties go to the first entry.
    pub fn modal(&self) -> &SupportEntry {
        let mut best = &self.entries[0];
        for e in &self.entries[1..] {
            if e.log_weight > best.log_weight {
                best = e;
            }
        }
        best
    }

    /// `P(|S| = s)` for `s = 0..=p`.
    pub fn size_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.p + 1];
        for e in &self.entries {
            out[e.support.len()] += e.weight();
        }
        out
    }

    /// `E[θ]` when every entry carries a conditional mean.
    pub fn posterior_mean(&self) -> Option<DVector<f64>> {
        let mut out = DVector::zeros(self.p);
        for e in &self.entries {
            let m = e.mean.as_ref()?;
            let w = e.weight();
            for (&j, v) in e.support.iter().zip(m) {
                out[j] += w * v;
            }
        }
        Some(out)
    }

    /// `½ Σ_S |P(S) − Q(S)|`.
    pub fn support_tv(&self, other: &SupportPosterior) -> f64 {
        let a = self.probabilities();
        let b = other.probabilities();
        let mut total = 0.0;
        for (s, pa) in &a {
            total += (pa - b.get(s).copied().unwrap_or(0.0)).abs();
        }
        for (s, pb) in &b {
            if !a.contains_key(s) {
                total += pb;
            }
        }
        (0.5 * total).min(1.0)
    }
}
