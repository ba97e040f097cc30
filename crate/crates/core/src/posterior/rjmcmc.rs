use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reparam::{average, from_unconstrained, to_unconstrained};
use super::SupportPosterior;
use crate::error::{Error, Result};
use crate::linalg::{ln_binomial, LN_2PI};
use crate::model::{GroupedDataset, NuisanceEval, NuisanceState, SparseVector};
use crate::priors::{dimension_log_prior, normal_log_pdf, nuisance_prior_log_density, NuisancePriorSpec, SpikeSlabSpec};
use crate::rng::{std_normal, stream_rng};
use crate::zoo::FamilySpec;

/// Slab density on the nonzero coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlabKind {
    /// Laplace with the rate of the spike-and-slab specification.
    Laplace,
    /// `N(0, 1/precision)`.
    Normal { precision: f64 },
}

impl SlabKind {
    fn log_density(self, v: f64, lambda: f64) -> f64 {
        match self {
            SlabKind::Laplace => (0.5 * lambda).ln() - lambda * v.abs(),
            SlabKind::Normal { precision } => normal_log_pdf(v, 0.0, 1.0 / precision),
        }
    }

    fn variance(self, lambda: f64) -> f64 {
        match self {
            SlabKind::Laplace => 2.0 / (lambda * lambda),
            SlabKind::Normal { precision } => 1.0 / precision,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Add,
    Delete,
    Swap,
    Within,
    Nuisance,
    Edge,
}

/// Probabilities of the move types; they must sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveMix {
    pub add: f64,
    pub delete: f64,
    pub swap: f64,
    pub within: f64,
    pub nuisance: f64,
}

impl Default for MoveMix {
    fn default() -> Self {
        Self {
            add: 0.25,
            delete: 0.25,
            swap: 0.2,
            within: 0.2,
            nuisance: 0.1,
        }
    }
}

impl MoveMix {
    pub fn validate(&self) -> Result<()> {
        let all = [self.add, self.delete, self.swap, self.within, self.nuisance];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("move probabilities {all:?} must be nonnegative and sum to 1")));
        }
        Ok(())
    }

    fn without_nuisance(&self) -> Self {
        let rest = 1.0 - self.nuisance;
        if rest <= 0.0 {
            return *self;
        }
        Self {
            add: self.add / rest,
            delete: self.delete / rest,
            swap: self.swap / rest,
            within: self.within / rest,
            nuisance: 0.0,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> MoveKind {
        let u: f64 = rng.random();
        let cuts = [
            (self.add, MoveKind::Add),
            (self.delete, MoveKind::Delete),
            (self.swap, MoveKind::Swap),
            (self.within, MoveKind::Within),
        ];
        let mut acc = 0.0;
        for (p, k) in cuts {
            acc += p;
            if u < acc {
                return k;
            }
        }
        MoveKind::Nuisance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcOptions {
    pub n_iter: usize,
    /// Defaults to a fifth of the chain.
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub move_mix: MoveMix,
    #[serde(default = "laplace")]
    pub slab: SlabKind,
    /// Largest support size the chain may visit.
    #[serde(default)]
    pub s_max: Option<usize>,
    /// Switching this off samples the prior.
    #[serde(default = "yes")]
    pub likelihood: bool,
    /// Keep `η` at its initial value when false.
    #[serde(default = "yes")]
    pub update_eta: bool,
    /// Initial scale of within-model steps, in units of the conditional standard deviation.
    #[serde(default = "one_f")]
    pub within_step: f64,
    /// Initial scale of nuisance steps in unconstrained coordinates.
    #[serde(default = "tenth")]
    pub nuisance_step: f64,
    /// Standard deviation of proposed new precision-matrix edges.
    #[serde(default = "third")]
    pub edge_sd: f64,
    /// Tune step sizes during burn-in.
    #[serde(default = "yes")]
    pub adapt: bool,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn tenth() -> f64 {
    0.1
}
fn third() -> f64 {
    0.3
}
fn yes() -> bool {
    true
}
fn laplace() -> SlabKind {
    SlabKind::Laplace
}

impl McmcOptions {
    pub fn new(n_iter: usize, seed: u64) -> Self {
        Self {
            n_iter,
            burn_in: None,
            thin: 1,
            seed,
            move_mix: MoveMix::default(),
            slab: SlabKind::Laplace,
            s_max: None,
            likelihood: true,
            update_eta: true,
            within_step: 1.0,
            nuisance_step: 0.1,
            edge_sd: 0.3,
            adapt: true,
        }
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.n_iter / 5)
    }

    fn validate(&self) -> Result<()> {
        self.move_mix.validate()?;
        if self.thin == 0 || self.burn_in() > self.n_iter {
            return Err(Error::Config(format!("thin {} and burn-in {} for {} iterations", self.thin, self.burn_in(), self.n_iter)));
        }
        if let SlabKind::Normal { precision } = self.slab {
            if !(precision > 0.0 && precision.is_finite()) {
                return Err(Error::ParamRange(format!("slab precision {precision}")));
            }
        }
        for v in [self.within_step, self.nuisance_step, self.edge_sd] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::ParamRange(format!("step size {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// One kept iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iter: usize,
    pub support: Vec<usize>,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<FamilySpec>,
    pub log_post: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    pub seed: u64,
    pub p: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub records: Vec<ChainRecord>,
    pub stats: BTreeMap<MoveKind, MoveStats>,
}

impl McmcChain {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn log_post_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.log_post).collect()
    }

    pub fn acceptance_rate(&self, kind: MoveKind) -> f64 {
        self.stats.get(&kind).map_or(0.0, MoveStats::rate)
    }

    /// `θ` of a record as a sparse vector.
    pub fn theta(&self, k: usize) -> Result<SparseVector> {
        let r = &self.records[k];
        SparseVector::from_support(self.p, &r.support, &r.theta)
    }

    /// Average of the recorded `η` in constrained coordinates, if `η` was sampled.
    pub fn eta_mean(&self) -> Result<Option<FamilySpec>> {
        let etas: Vec<FamilySpec> = self.records.iter().filter_map(|r| r.eta.clone()).collect();
        if etas.is_empty() {
            return Ok(None);
        }
        average(&etas).map(Some)
    }

    /// One record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<ChainRecord>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

/// Empirical support frequencies and within-support moments of records
/// with `iter ≥ burn_in`.
pub fn support_marginals(chain: &McmcChain, burn_in: usize) -> Result<SupportPosterior> {
    let draws = chain.records.iter().filter(|r| r.iter >= burn_in).map(|r| (r.support.as_slice(), r.theta.as_slice()));
    SupportPosterior::from_draws(chain.p, draws)
        .map_err(|_| Error::Config(format!("no records at or after iteration {burn_in}")))
}

/// Per-`η` quantities for the whitened likelihood, with whitened design
/// columns filled in on demand.
struct Cache {
    eval: NuisanceEval,
    target: DVector<f64>,
    log_det_half: f64,
    cols: Vec<Option<(Arc<DVector<f64>>, f64)>>,
}

impl Cache {
    fn new(data: &GroupedDataset, eta: &FamilySpec) -> Result<Self> {
        let eval = eta.evaluate(data)?;
        let mut target = DVector::zeros(data.n_star());
        let mut log_det_half = 0.0;
        for (i, g) in data.groups().iter().enumerate() {
            let off = data.offsets()[i];
            let w = eval.cov[i].inv_sqrt();
            target.rows_mut(off, g.len()).copy_from(&(w * (&g.y - &eval.xi[i])));
            log_det_half += 0.5 * eval.cov[i].log_det();
        }
        Ok(Self {
            eval,
            target,
            log_det_half,
            cols: vec![None; data.p()],
        })
    }

    fn column(&mut self, data: &GroupedDataset, j: usize) -> (Arc<DVector<f64>>, f64) {
        if let Some((c, nn)) = &self.cols[j] {
            return (c.clone(), *nn);
        }
        let mut c = DVector::zeros(data.n_star());
        for (i, g) in data.groups().iter().enumerate() {
            let off = data.offsets()[i];
            let w = self.eval.cov[i].inv_sqrt();
            if g.len() == 1 {
                c[off] = w[(0, 0)] * g.x[(0, j)];
            } else {
                c.rows_mut(off, g.len()).copy_from(&(w * g.x.column(j)));
            }
        }
        let nn = c.norm_squared();
        let c = Arc::new(c);
        self.cols[j] = Some((c.clone(), nn));
        (c, nn)
    }
}

struct Sampler<'a> {
    data: &'a GroupedDataset,
    spec: &'a SpikeSlabSpec,
    priors: &'a NuisancePriorSpec,
    opts: &'a McmcOptions,
    mix: MoveMix,
    p: usize,
    s_cap: usize,
    size_prior: Vec<f64>,
    ll_const: f64,
    eta: FamilySpec,
    u: Vec<f64>,
    log_jac: f64,
    eta_prior: f64,
    cache: Option<Cache>,
    support: Vec<usize>,
    values: Vec<f64>,
    resid: DVector<f64>,
    ll: f64,
    within_step: f64,
    steps: Vec<f64>,
    batch: BTreeMap<usize, MoveStats>,
    stats: BTreeMap<MoveKind, MoveStats>,
    rng: ChaCha8Rng,
}

const WITHIN_SLOT: usize = usize::MAX;
const TARGET_RATE: f64 = 0.3;
const ADAPT_EVERY: usize = 50;

impl<'a> Sampler<'a> {
    fn graphical_dim(&self) -> Option<usize> {
        match &self.eta {
            FamilySpec::Graphical(g) => Some(g.omega.nrows()),
            _ => None,
        }
    }

    /// Step slot of an unconstrained coordinate; graphical off-diagonals share one.
    fn step_slot(&self, c: usize) -> usize {
        match self.graphical_dim() {
            Some(m) => c.min(m),
            None => c,
        }
    }

    fn slab(&self, v: f64) -> f64 {
        self.opts.slab.log_density(v, self.spec.lambda)
    }

    fn slab_sum(&self) -> f64 {
        self.values.iter().map(|&v| self.slab(v)).sum()
    }

    fn loglik_of(&self, cache: &Cache, resid: &DVector<f64>) -> f64 {
        self.ll_const - cache.log_det_half - 0.5 * resid.norm_squared()
    }

    fn log_post(&self) -> f64 {
        let mut lp = self.size_prior[self.support.len()] + self.slab_sum();
        if self.opts.likelihood {
            lp += self.ll;
        }
        if self.opts.update_eta {
            lp += self.eta_prior;
        }
        lp
    }

    fn column(&mut self, j: usize) -> (Arc<DVector<f64>>, f64) {
        let data = self.data;
        self.cache.as_mut().expect("likelihood cache").column(data, j)
    }

    /// Proposal mean and variance for coordinate `j` against residual `r`.
    fn proposal(&mut self, j: usize, r: &DVector<f64>) -> (f64, f64, Option<Arc<DVector<f64>>>) {
        if !self.opts.likelihood {
            return (0.0, self.opts.slab.variance(self.spec.lambda), None);
        }
        let (c, nn) = self.column(j);
        if nn == 0.0 {
            return (0.0, self.opts.slab.variance(self.spec.lambda), Some(c));
        }
        (c.dot(r) / nn, 1.0 / nn, Some(c))
    }

    fn residual_loglik(&self, r: &DVector<f64>) -> f64 {
        match &self.cache {
            Some(c) if self.opts.likelihood => self.loglik_of(c, r),
            _ => 0.0,
        }
    }

    fn accept(&mut self, log_a: f64) -> bool {
        log_a.is_finite() && (log_a >= 0.0 || self.rng.random::<f64>().ln() < log_a)
            || log_a == f64::INFINITY
    }

    fn record(&mut self, kind: MoveKind, accepted: bool) {
        let s = self.stats.entry(kind).or_default();
        s.proposed += 1;
        s.accepted += accepted as u64;
    }

    fn inactive(&mut self) -> usize {
        let s = self.support.len();
        let mut r = self.rng.random_range(0..self.p - s);
        let mut k = 0;
        for j in 0..self.p {
            if k < s && self.support[k] == j {
                k += 1;
                continue;
            }
            if r == 0 {
                return j;
            }
            r -= 1;
        }
        unreachable!("inactive index out of range")
    }

    fn add_move(&mut self) {
        let s = self.support.len();
        if s >= self.s_cap || s == self.p {
            self.record(MoveKind::Add, false);
            return;
        }
        let j = self.inactive();
        let resid = self.resid.clone();
        let (c, var, col) = self.proposal(j, &resid);
        let v = c + var.sqrt() * std_normal(&mut self.rng);
        let new_resid = match &col {
            Some(x) => &resid - &**x * v,
            None => resid,
        };
        let ll_new = self.residual_loglik(&new_resid);
        let log_a = ll_new - self.residual_loglik(&self.resid)
            + self.size_prior[s + 1]
            - self.size_prior[s]
            + self.slab(v)
            + (self.mix.delete / (s + 1) as f64).ln()
            - (self.mix.add / (self.p - s) as f64).ln()
            - normal_log_pdf(v, c, var);
        let ok = self.accept(log_a);
        if ok {
            let pos = self.support.partition_point(|&k| k < j);
            self.support.insert(pos, j);
            self.values.insert(pos, v);
            self.resid = new_resid;
            self.ll = ll_new;
        }
        self.record(MoveKind::Add, ok);
    }

    fn delete_move(&mut self) {
        let s = self.support.len();
        if s == 0 {
            self.record(MoveKind::Delete, false);
            return;
        }
        let idx = self.rng.random_range(0..s);
        let (j, v) = (self.support[idx], self.values[idx]);
        let mid = match self.opts.likelihood {
            true => {
                let (x, _) = self.column(j);
                &self.resid + &*x * v
            }
            false => self.resid.clone(),
        };
        let (c, var, _) = self.proposal(j, &mid);
        let ll_new = self.residual_loglik(&mid);
        let log_a = ll_new - self.residual_loglik(&self.resid)
            + self.size_prior[s - 1]
            - self.size_prior[s]
            - self.slab(v)
            + normal_log_pdf(v, c, var)
            + (self.mix.add / (self.p - s + 1) as f64).ln()
            - (self.mix.delete / s as f64).ln();
        let ok = self.accept(log_a);
        if ok {
            self.support.remove(idx);
            self.values.remove(idx);
            self.resid = mid;
            self.ll = ll_new;
        }
        self.record(MoveKind::Delete, ok);
    }

    fn swap_move(&mut self) {
        let s = self.support.len();
        if s == 0 || s == self.p {
            self.record(MoveKind::Swap, false);
            return;
        }
        let idx = self.rng.random_range(0..s);
        let (j, vj) = (self.support[idx], self.values[idx]);
        let k = self.inactive();
        let mid = match self.opts.likelihood {
            true => {
                let (x, _) = self.column(j);
                &self.resid + &*x * vj
            }
            false => self.resid.clone(),
        };
        let (ck, vark, colk) = self.proposal(k, &mid);
        let (cj, varj, _) = self.proposal(j, &mid);
        let vk = ck + vark.sqrt() * std_normal(&mut self.rng);
        let new_resid = match &colk {
            Some(x) => &mid - &**x * vk,
            None => mid,
        };
        let ll_new = self.residual_loglik(&new_resid);
        let log_a = ll_new - self.residual_loglik(&self.resid) + self.slab(vk) - self.slab(vj) + normal_log_pdf(vj, cj, varj)
            - normal_log_pdf(vk, ck, vark);
        let ok = self.accept(log_a);
        if ok {
            self.support.remove(idx);
            self.values.remove(idx);
            let pos = self.support.partition_point(|&a| a < k);
            self.support.insert(pos, k);
            self.values.insert(pos, vk);
            self.resid = new_resid;
            self.ll = ll_new;
        }
        self.record(MoveKind::Swap, ok);
    }

    fn within_move(&mut self) {
        let s = self.support.len();
        if s == 0 {
            self.record(MoveKind::Within, false);
            return;
        }
        let idx = self.rng.random_range(0..s);
        let (j, v) = (self.support[idx], self.values[idx]);
        let (scale, col) = if self.opts.likelihood {
            let (x, nn) = self.column(j);
            (if nn > 0.0 { 1.0 / nn.sqrt() } else { self.opts.slab.variance(self.spec.lambda).sqrt() }, Some(x))
        } else {
            (self.opts.slab.variance(self.spec.lambda).sqrt(), None)
        };
        let v_new = v + self.within_step * scale * std_normal(&mut self.rng);
        let new_resid = match &col {
            Some(x) => &self.resid - &**x * (v_new - v),
            None => self.resid.clone(),
        };
        let ll_new = self.residual_loglik(&new_resid);
        let log_a = ll_new - self.residual_loglik(&self.resid) + self.slab(v_new) - self.slab(v);
        let ok = self.accept(log_a);
        if ok {
            self.values[idx] = v_new;
            self.resid = new_resid;
            self.ll = ll_new;
        }
        self.record(MoveKind::Within, ok);
        let b = self.batch.entry(WITHIN_SLOT).or_default();
        b.proposed += 1;
        b.accepted += ok as u64;
    }

    /// Likelihood pieces at a proposed `η`; `None` when `η` is inadmissible.
    fn evaluate_eta(&self, eta: &FamilySpec) -> Option<(Option<Cache>, DVector<f64>, f64)> {
        if !self.opts.likelihood {
            return Some((None, self.resid.clone(), 0.0));
        }
        let mut cache = Cache::new(self.data, eta).ok()?;
        let mut resid = cache.target.clone();
        for (&j, &v) in self.support.iter().zip(&self.values) {
            let (x, _) = cache.column(self.data, j);
            resid.axpy(-v, &x, 1.0);
        }
        let ll = self.loglik_of(&cache, &resid);
        ll.is_finite().then_some((Some(cache), resid, ll))
    }

    fn install_eta(&mut self, eta: FamilySpec, prior: f64, eval: (Option<Cache>, DVector<f64>, f64)) -> Result<()> {
        let u = to_unconstrained(&eta)?;
        let (_, lj) = from_unconstrained(&eta, &u)?;
        self.u = u;
        self.log_jac = lj;
        self.eta = eta;
        self.eta_prior = prior;
        if self.opts.likelihood {
            self.cache = eval.0;
            self.resid = eval.1;
            self.ll = eval.2;
        }
        Ok(())
    }

    fn nuisance_move(&mut self) -> Result<()> {
        if self.graphical_dim().is_some_and(|m| m > 1) && self.rng.random::<f64>() < 0.5 {
            return self.edge_move();
        }
        let c = self.rng.random_range(0..self.u.len());
        let slot = self.step_slot(c);
        let mut u = self.u.clone();
        u[c] += self.steps[slot] * std_normal(&mut self.rng);
        let mut ok = false;
        if let Ok((eta, lj)) = from_unconstrained(&self.eta, &u) {
            if eta.validate().is_ok() {
                if let Ok(prior) = nuisance_prior_log_density(&eta, self.priors) {
                    if prior.in_support {
                        if let Some(eval) = self.evaluate_eta(&eta) {
                            let log_a = eval.2 - self.residual_loglik(&self.resid) + prior.value - self.eta_prior + lj - self.log_jac;
                            if self.accept(log_a) {
                                self.install_eta(eta, prior.value, eval)?;
                                ok = true;
                            }
                        }
                    }
                }
            }
        }
        self.record(MoveKind::Nuisance, ok);
        let b = self.batch.entry(slot).or_default();
        b.proposed += 1;
        b.accepted += ok as u64;
        Ok(())
    }

    fn edge_move(&mut self) -> Result<()> {
        let FamilySpec::Graphical(g) = &self.eta else {
            unreachable!("edge move on a non-graphical family")
        };
        let m = g.omega.nrows();
        let pair = self.rng.random_range(0..m * (m - 1) / 2);
        let (mut a, mut rem) = (0, pair);
        while rem >= m - 1 - a {
            rem -= m - 1 - a;
            a += 1;
        }
        let b = a + 1 + rem;
        let mut next = g.clone();
        let sd = self.opts.edge_sd;
        let old = g.omega[(a, b)];
        let log_q = if old != 0.0 {
            next.omega[(a, b)] = 0.0;
            next.omega[(b, a)] = 0.0;
            normal_log_pdf(old, 0.0, sd * sd)
        } else {
            let v = sd * std_normal(&mut self.rng);
            next.omega[(a, b)] = v;
            next.omega[(b, a)] = v;
            -normal_log_pdf(v, 0.0, sd * sd)
        };
        let eta = FamilySpec::Graphical(next);
        let mut ok = false;
        if let Ok(prior) = nuisance_prior_log_density(&eta, self.priors) {
            if prior.in_support {
                if let Some(eval) = self.evaluate_eta(&eta) {
                    let log_a = eval.2 - self.residual_loglik(&self.resid) + prior.value - self.eta_prior + log_q;
                    if self.accept(log_a) {
                        self.install_eta(eta, prior.value, eval)?;
                        ok = true;
                    }
                }
            }
        }
        self.record(MoveKind::Edge, ok);
        Ok(())
    }

    fn adapt(&mut self) {
        let batch = std::mem::take(&mut self.batch);
        for (slot, st) in batch {
            if st.proposed < 5 {
                self.batch.insert(slot, st);
                continue;
            }
            let factor = (2.0 * (st.rate() - TARGET_RATE)).exp();
            if slot == WITHIN_SLOT {
                self.within_step = (self.within_step * factor).clamp(1e-3, 1e3);
            } else if let Some(s) = self.steps.get_mut(slot) {
                *s = (*s * factor).clamp(1e-4, 1e2);
            }
        }
    }
}

/// Reversible-jump sampler for `(S, θ_S, η)`.
///
/// Birth proposals draw the new coordinate from its conditional
/// least-squares distribution given the current residual, `N(x̃ⱼᵀr̃/‖x̃ⱼ‖², 1/‖x̃ⱼ‖²)`;
/// deaths use the same density for the reverse move. With the likelihood
/// switched off the proposal is the zero-centered normal matching the slab
/// variance. `η` moves are single-coordinate random walks in unconstrained
/// coordinates, plus edge births and deaths for the graphical family.
pub fn rjmcmc_sample(
    data: &GroupedDataset,
    spec: &SpikeSlabSpec,
    family_priors: &NuisancePriorSpec,
    init: (&SparseVector, &NuisanceState),
    opts: &McmcOptions,
) -> Result<McmcChain> {
    opts.validate()?;
    spec.validate()?;
    family_priors.validate()?;
    let p = data.p();
    if spec.p != p || init.0.p() != p {
        return Err(Error::Shape(format!("prior p = {}, data p = {p}, initial θ p = {}", spec.p, init.0.p())));
    }
    let s_cap = opts.s_max.unwrap_or(p).min(p);
    if init.0.len() > s_cap {
        return Err(Error::Config(format!("initial support of size {} exceeds s_max {s_cap}", init.0.len())));
    }
    let mix = if opts.update_eta { opts.move_mix } else { opts.move_mix.without_nuisance() };
    let size_prior = (0..=p)
        .map(|s| Ok(dimension_log_prior(s, spec)? - ln_binomial(p, s)))
        .collect::<Result<Vec<f64>>>()?;
    let eta = init.1.clone();
    let u = to_unconstrained(&eta)?;
    let (_, log_jac) = from_unconstrained(&eta, &u)?;
    let eta_prior = nuisance_prior_log_density(&eta, family_priors)?;
    if opts.update_eta && !eta_prior.in_support {
        return Err(Error::NonFinite("initial η outside the prior support".into()));
    }
    let n_slots = match &eta {
        FamilySpec::Graphical(g) => g.omega.nrows() + 1,
        _ => u.len(),
    };
    let mut sampler = Sampler {
        data,
        spec,
        priors: family_priors,
        opts,
        mix,
        p,
        s_cap,
        size_prior,
        ll_const: -0.5 * data.n_star() as f64 * LN_2PI,
        eta: eta.clone(),
        u,
        log_jac,
        eta_prior: eta_prior.value,
        cache: None,
        support: init.0.support().to_vec(),
        values: init.0.values().to_vec(),
        resid: DVector::zeros(0),
        ll: 0.0,
        within_step: opts.within_step,
        steps: vec![opts.nuisance_step; n_slots],
        batch: BTreeMap::new(),
        stats: BTreeMap::new(),
        rng: stream_rng(opts.seed, 0),
    };
    if opts.likelihood {
        let eval = sampler
            .evaluate_eta(&eta)
            .ok_or(Error::NonFinite("log-likelihood at the initial state".into()))?;
        sampler.cache = eval.0;
        sampler.resid = eval.1;
        sampler.ll = eval.2;
    }
    if !sampler.log_post().is_finite() {
        return Err(Error::NonFinite("log-posterior at the initial state".into()));
    }

    let burn_in = opts.burn_in();
    let mut records = Vec::with_capacity((opts.n_iter - burn_in) / opts.thin + 1);
    for it in 0..opts.n_iter {
        match mix.draw(&mut sampler.rng) {
            MoveKind::Add => sampler.add_move(),
            MoveKind::Delete => sampler.delete_move(),
            MoveKind::Swap => sampler.swap_move(),
            MoveKind::Within => sampler.within_move(),
            _ => sampler.nuisance_move()?,
        }
        if it < burn_in {
            if opts.adapt && (it + 1) % ADAPT_EVERY == 0 {
                sampler.adapt();
            }
        } else if (it - burn_in) % opts.thin == 0 {
            records.push(ChainRecord {
                iter: it,
                support: sampler.support.clone(),
                theta: sampler.values.clone(),
                eta: opts.update_eta.then(|| sampler.eta.clone()),
                log_post: sampler.log_post(),
            });
        }
    }
    Ok(McmcChain {
        seed: opts.seed,
        p,
        n_iter: opts.n_iter,
        burn_in,
        thin: opts.thin,
        records,
        stats: sampler.stats,
    })
}
