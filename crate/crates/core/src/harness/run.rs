use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics, EngineConfig, ExperimentConfig, LambdaPolicy, LambdaRule, Signal};
use crate::bvm::{build_bvm, credible_intervals, tv_support_mixture, BvmMode};
use crate::diagnostics::{beta_min_threshold, x_norm_star, EnumerationOptions};
use crate::divergences::pseudo_metrics;
use crate::error::{Error, Result};
use crate::model::{whiten, GroupedDataset, NuisanceState, SparseVector};
use crate::posterior::{
    enumerate_posterior_laplace_slab, enumerate_posterior_normal_slab, reparam, rjmcmc_sample, McmcOptions,
    QuadratureOptions, SlabKind, SupportPosterior,
};
use crate::priors::{lambda_bounds, SpikeSlabSpec};
use crate::rng::stream_rng;
use crate::splines::{spline_design, SplineBasis};
use crate::zoo::{resimulate_responses, simulate, FamilySpec, HeteroParams, PartialLinearParams};

const RESULTS: &str = "results.jsonl";
const TIMING: &str = "timing.jsonl";
const SUMMARY: &str = "summary.csv";
const CONFIG: &str = "config.toml";
// at most this many flags are kept per record
const MAX_FLAGS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
}

/// Center and standard deviation of a credible interval; the interval at
/// any level is `center ± z·sd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub coord: usize,
    pub center: f64,
    pub sd: f64,
    /// Whether the interval at the configured level contains `θ₀,j`.
    pub covered: bool,
}

/// Whether a replicate produced a posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Failed,
    /// The numerics failed (non-SPD matrices, singular systems, overflow).
    NumericalFailure,
}

/// Everything measured on one `(grid point, replicate)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub grid: usize,
    pub replicate: usize,
    pub n: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    pub seed: u64,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub truth_support: Vec<usize>,
    pub truth_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modal_support: Option<Vec<usize>>,
    /// Modal support equals the true support.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_s0: Option<f64>,
    /// `‖θ̄ − θ₀‖₁` for the posterior mean `θ̄`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_error: Option<f64>,
    /// `‖X̃(θ̄ − θ₀)‖₂` with the design whitened at the true `η₀`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_error: Option<f64>,
    /// `d_n(η̂, η₀)` for the posterior-mean nuisance, when `η` is sampled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_dist: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intervals: Vec<IntervalRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ResultRecord {
    fn blank(grid: usize, replicate: usize, point: GridPoint, seed: u64) -> Self {
        Self {
            grid,
            replicate,
            n: point.n,
            p: point.p,
            j: point.j,
            seed,
            outcome: Outcome::Ok,
            error: None,
            truth_support: vec![],
            truth_values: vec![],
            beta_min: None,
            lambda: None,
            modal_support: None,
            selected: None,
            mass_s0: None,
            l1_error: None,
            l2_error: None,
            pred_error: None,
            eta_dist: None,
            tv: None,
            intervals: vec![],
            flags: vec![],
        }
    }

    pub fn point(&self) -> GridPoint {
        GridPoint {
            n: self.n,
            p: self.p,
            j: self.j,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.outcome == Outcome::Ok
    }

    fn fail(&mut self, e: &Error) {
        self.outcome = if e.is_numerical() {
            Outcome::NumericalFailure
        } else {
            Outcome::Failed
        };
        self.error = Some(e.to_string());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TimingRecord {
    grid: usize,
    replicate: usize,
    seconds: f64,
}

/// Records in `(grid index, replicate)` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub records: Vec<ResultRecord>,
}

impl ResultsTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            write_line(&mut w, r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (k, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Config(format!("{}: line {}: {e}", path.display(), k + 1)))?,
            );
        }
        Ok(Self { records })
    }

    /// Read a results file, or the `results.jsonl` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::read_jsonl(&path.join(RESULTS))
        } else {
            Self::read_jsonl(path)
        }
    }

    /// Per-grid-point medians and rates, one CSV row each.
    pub fn summary_csv(&self) -> String {
        let selection = metrics::selection_metrics(self);
        let mut out = String::from(
            "grid,n,p,j,replicates,failures,exact_rate,superset_rate,subset_rate,\
             median_mass_s0,median_l1,median_l2,median_pred,median_eta_dist,median_tv,coverage\n",
        );
        for sel in &selection {
            let recs: Vec<&ResultRecord> = self.records.iter().filter(|r| r.grid == sel.grid).collect();
            let ok: Vec<&ResultRecord> = recs.iter().copied().filter(|r| r.is_ok()).collect();
            let med = |f: fn(&ResultRecord) -> Option<f64>| fmt_opt(metrics::median(ok.iter().filter_map(|r| f(r)).collect()));
            let (hits, total) = ok
                .iter()
                .flat_map(|r| r.intervals.iter())
                .fold((0usize, 0usize), |(h, t), iv| (h + iv.covered as usize, t + 1));
            let coverage = (total > 0).then(|| hits as f64 / total as f64);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                sel.grid,
                sel.n,
                sel.p,
                sel.j.map_or(String::new(), |j| j.to_string()),
                recs.len(),
                recs.len() - ok.len(),
                fmt_opt(sel.exact),
                fmt_opt(sel.superset),
                fmt_opt(sel.subset),
                med(|r| r.mass_s0),
                med(|r| r.l1_error),
                med(|r| r.l2_error),
                med(|r| r.pred_error),
                med(|r| r.eta_dist),
                med(|r| r.tv),
                fmt_opt(coverage),
            ));
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Seed of replicate `rep` at grid index `grid`.
pub fn replicate_seed(base: u64, grid: usize, rep: usize) -> u64 {
    stream_rng(base, ((grid as u64) << 32) | rep as u64).random::<u64>()
}

/// Nonzero values of `θ₀` on `support`, alternating in sign.
fn alternating(magnitude: f64, s0: usize) -> Vec<f64> {
    (0..s0).map(|k| if k % 2 == 0 { magnitude } else { -magnitude }).collect()
}

/// The replicate's dataset and `θ₀`, plus the beta-min threshold when the
/// signal is tied to it.
pub fn draw_truth(
    config: &ExperimentConfig,
    point: GridPoint,
    seed: u64,
) -> Result<(GroupedDataset, SparseVector, Option<f64>)> {
    let support = config.support();
    let s0 = support.len();
    let family = &config.family;
    let fixed = |values: Vec<f64>| -> Result<(GroupedDataset, SparseVector, Option<f64>)> {
        let theta0 = SparseVector::from_support(point.p, &support, &values)?;
        let data = simulate(family, &theta0, point.n, point.p, &config.design, seed)?;
        Ok((data, theta0, None))
    };
    match &config.truth.signal {
        Signal::Values { values } => fixed(values.clone()),
        Signal::Fixed { magnitude } => fixed(alternating(*magnitude, s0)),
        Signal::BetaMin { margin, k4, k5 } => {
            let skeleton = simulate(family, &SparseVector::zeros(point.p), point.n, point.p, &config.design, seed)?;
            let wd = whiten(&skeleton, family)?;
            let bm = beta_min_threshold(&wd.x_tilde, s0, *k4, *k5, &EnumerationOptions::default())?;
            if bm.infinite {
                return Err(Error::Singular("φ₂ vanishes; the beta-min threshold is infinite".into()));
            }
            let theta0 = SparseVector::from_support(point.p, &support, &alternating(margin * bm.value, s0))?;
            let data = resimulate_responses(family, &theta0, &skeleton, seed)?;
            Ok((data, theta0, Some(bm.value)))
        }
    }
}

/// The nuisance value the analysis works with: the truth, or for a `J`
/// grid its least-squares projection onto a `J`-dimensional spline basis
/// of the same order, fitted at the observed covariates.
pub fn working_eta(family: &FamilySpec, data: &GroupedDataset, j: Option<usize>) -> Result<FamilySpec> {
    let Some(j) = j else {
        return Ok(family.clone());
    };
    let z: Vec<f64> = data
        .groups()
        .iter()
        .map(|g| g.meta.z.ok_or_else(|| Error::Config("spline family without covariates".into())))
        .collect::<Result<_>>()?;
    let refit = |beta: &DVector<f64>, basis: &SplineBasis| -> Result<(DVector<f64>, SplineBasis)> {
        let target = DVector::from_iterator(z.len(), z.iter().map(|&zi| basis.combine(beta, zi)).collect::<Result<Vec<_>>>()?);
        let new_basis = SplineBasis::new(j, basis.order())?;
        let w = spline_design(&new_basis, &z)?;
        let coef = w
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| Error::Singular(format!("spline refit with J = {j}: {e}")))?;
        Ok((coef, new_basis))
    };
    Ok(match family {
        FamilySpec::HeteroSpline(h) => {
            let (beta, basis) = refit(&h.beta, &h.basis)?;
            FamilySpec::HeteroSpline(HeteroParams { beta, basis })
        }
        FamilySpec::PartialLinear(pl) => {
            let (beta, basis) = refit(&pl.beta, &pl.basis)?;
            FamilySpec::PartialLinear(PartialLinearParams {
                beta,
                sigma2: pl.sigma2,
                basis,
            })
        }
        other => return Err(Error::Config(format!("a J grid needs a spline family, not {}", other.name()))),
    })
}

pub fn prior_for(config: &ExperimentConfig, data: &GroupedDataset) -> Result<SpikeSlabSpec> {
    let norm = x_norm_star(&data.stacked_x());
    let lambda = match config.prior.lambda {
        LambdaPolicy::Value(v) => v,
        LambdaPolicy::Rule(rule) => {
            let (lo, hi) = lambda_bounds(norm, data.p(), data.n(), 1.0, 1.0, 1.0)
                .or_else(|_| Ok::<_, Error>((norm / data.p() as f64, norm / (data.n() as f64).sqrt())))?;
            match rule {
                LambdaRule::Upper => hi,
                LambdaRule::Lower => lo,
            }
        }
    };
    SpikeSlabSpec::new(data.p(), config.prior.dim_decay, lambda)
}

/// Output of the configured engine.
#[derive(Clone, Debug)]
pub struct Fit {
    /// `None` for engine `none`.
    pub posterior: Option<SupportPosterior>,
    /// Posterior mean of `η` after burn-in, when the sampler moved `η`.
    pub eta_hat: Option<NuisanceState>,
}

/// Run the configured engine on one dataset. Enumeration conditions on
/// `eta`; the sampler starts from `θ = 0` and `eta`.
pub fn fit_posterior(
    config: &ExperimentConfig,
    data: &GroupedDataset,
    spec: &SpikeSlabSpec,
    eta: &NuisanceState,
    seed: u64,
) -> Result<Fit> {
    let mut eta_hat = None;
    let posterior = match &config.engine {
        EngineConfig::Enumeration { s_max, slab } => Some(match slab {
            SlabKind::Laplace => enumerate_posterior_laplace_slab(data, spec, eta, *s_max, &QuadratureOptions::default())?,
            SlabKind::Normal { precision } => enumerate_posterior_normal_slab(data, spec, eta, *s_max, *precision)?,
        }),
        EngineConfig::Rjmcmc {
            n_iter,
            burn_in,
            thin,
            s_max,
            update_eta,
            slab,
        } => {
            let mut opts = McmcOptions::new(*n_iter, stream_rng(seed, 7).random());
            opts.burn_in = *burn_in;
            opts.thin = *thin;
            opts.s_max = *s_max;
            opts.update_eta = *update_eta;
            opts.slab = *slab;
            let burn = opts.burn_in();
            let chain = rjmcmc_sample(data, spec, &config.nuisance_prior, (&SparseVector::zeros(data.p()), eta), &opts)?;
            if *update_eta {
                let etas: Vec<FamilySpec> =
                    chain.records.iter().filter(|r| r.iter >= burn).filter_map(|r| r.eta.clone()).collect();
                if !etas.is_empty() {
                    eta_hat = Some(reparam::average(&etas)?);
                }
            }
            Some(crate::posterior::support_marginals(&chain, burn)?)
        }
        EngineConfig::None => None,
    };
    Ok(Fit { posterior, eta_hat })
}

/// Posterior mean restricted to the modal support.
pub fn plug_in_theta(post: &SupportPosterior) -> Result<SparseVector> {
    let modal = post.modal();
    let mean = post.posterior_mean().unwrap_or_else(|| DVector::zeros(post.p));
    SparseVector::from_pairs(post.p, modal.support.iter().map(|&j| (j, mean[j])))
}

/// Run one replicate; failures are recorded in the returned record.
pub fn run_replicate(config: &ExperimentConfig, grid: usize, point: GridPoint, replicate: usize) -> ResultRecord {
    let seed = replicate_seed(config.seed, grid, replicate);
    let mut rec = ResultRecord::blank(grid, replicate, point, seed);
    let outcome = catch_unwind(AssertUnwindSafe(|| fill_record(config, point, seed, &mut rec)));
    match outcome {
        Ok(Ok(())) => {}
        Ok(Err(e)) => rec.fail(&e),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            rec.outcome = Outcome::Failed;
            rec.error = Some(format!("panic: {msg}"));
        }
    }
    rec.flags.sort();
    rec.flags.dedup();
    if rec.flags.len() > MAX_FLAGS {
        let extra = rec.flags.len() - MAX_FLAGS;
        rec.flags.truncate(MAX_FLAGS);
        rec.flags.push(format!("... and {extra} more"));
    }
    rec
}

fn fill_record(config: &ExperimentConfig, point: GridPoint, seed: u64, rec: &mut ResultRecord) -> Result<()> {
    let (data, theta0, beta_min) = draw_truth(config, point, seed)?;
    rec.truth_support = theta0.support().to_vec();
    rec.truth_values = theta0.values().to_vec();
    rec.beta_min = beta_min;
    let eta_true = &config.family;
    let eta_work = working_eta(eta_true, &data, point.j)?;
    let spec = prior_for(config, &data)?;
    rec.lambda = Some(spec.lambda);

    let Fit { posterior, eta_hat } = fit_posterior(config, &data, &spec, &eta_work, seed)?;

    let mixture = match &config.bvm {
        Some(b) => {
            let (t0, e0) = match b.mode {
                BvmMode::Oracle => (theta0.clone(), eta_true.clone()),
                BvmMode::PlugIn => {
                    let post = posterior
                        .as_ref()
                        .ok_or_else(|| Error::Config("plug-in mode needs a posterior engine".into()))?;
                    (plug_in_theta(post)?, eta_hat.clone().unwrap_or_else(|| eta_work.clone()))
                }
            };
            let s_max = b.s_max.unwrap_or(rec.truth_support.len());
            let mix = build_bvm(&data, &t0, &e0, &spec, &b.h, s_max, b.mode)?;
            rec.flags.extend(mix.flags.iter().cloned());
            Some(mix)
        }
        None => None,
    };

    let post = match (posterior, &mixture) {
        (Some(p), _) => p,
        (None, Some(m)) => m.support_posterior()?,
        (None, None) => return Err(Error::Config("no posterior engine and no mixture".into())),
    };
    rec.flags.extend(post.flags.iter().cloned());
    let modal = post.modal().support.clone();
    rec.selected = Some(modal == rec.truth_support);
    rec.modal_support = Some(modal);
    rec.mass_s0 = Some(post.weight(&rec.truth_support));

    if let Some(mean) = post.posterior_mean() {
        let diff = &mean - theta0.to_dense();
        rec.l1_error = Some(diff.lp_norm(1));
        rec.l2_error = Some(diff.norm());
        let wd = whiten(&data, eta_true)?;
        rec.pred_error = Some((&wd.x_tilde * &diff).norm());
    }
    if let Some(eta) = &eta_hat {
        rec.eta_dist = Some(pseudo_metrics(eta, eta_true, &data)?.2);
    }
    if let (Some(b), Some(mix)) = (&config.bvm, &mixture) {
        if !matches!(config.engine, EngineConfig::None) {
            rec.tv = Some(tv_support_mixture(&post, mix)?.value);
        }
        let truth: BTreeMap<usize, f64> =
            rec.truth_support.iter().copied().zip(rec.truth_values.iter().copied()).collect();
        match credible_intervals(mix, &rec.truth_support, b.level) {
            Ok(ivs) => {
                rec.intervals = ivs
                    .iter()
                    .map(|iv| IntervalRecord {
                        coord: iv.coord,
                        center: iv.center,
                        sd: iv.sd,
                        covered: iv.contains(truth[&iv.coord]),
                    })
                    .collect();
            }
            Err(e) => rec.flags.push(format!("no credible intervals: {e}")),
        }
    }
    Ok(())
}

/// Valid leading records of an existing results file; a torn last line or
/// records out of task order end the prefix.
fn read_prefix(path: &Path, tasks: &[(usize, GridPoint, usize)]) -> Result<(Vec<ResultRecord>, u64)> {
    let mut out = Vec::new();
    let mut valid_bytes = 0u64;
    if !path.exists() {
        return Ok((out, 0));
    }
    let text = fs::read_to_string(path)?;
    for chunk in text.split_inclusive('\n') {
        if !chunk.ends_with('\n') {
            break;
        }
        let Ok(rec) = serde_json::from_str::<ResultRecord>(chunk.trim_end()) else {
            break;
        };
        match tasks.get(out.len()) {
            Some(&(g, point, rep)) if rec.grid == g && rec.replicate == rep && rec.point() == point => {}
            _ => break,
        }
        valid_bytes += chunk.len() as u64;
        out.push(rec);
    }
    Ok((out, valid_bytes))
}

fn open_truncated(path: &Path, len: u64) -> Result<File> {
    let f = OpenOptions::new().create(true).truncate(false).write(true).read(true).open(path)?;
    f.set_len(len)?;
    let mut f = f;
    use std::io::Seek;
    f.seek(std::io::SeekFrom::End(0))?;
    Ok(f)
}

/// Run every `(grid point, replicate)` of the configuration.
///
/// With an output directory, records are appended to `results.jsonl` in
/// task order as they complete, so an interrupted run resumes from the
/// records already on disk; wall times go to `timing.jsonl` and per-point
/// aggregates to `summary.csv`. A directory holding results of a different
/// configuration is refused.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ResultsTable> {
    config.validate()?;
    let tasks: Vec<(usize, GridPoint, usize)> = config
        .grid_points()
        .into_iter()
        .enumerate()
        .flat_map(|(g, point)| (0..config.replicates).map(move |r| (g, point, r)))
        .collect();

    let mut done = Vec::new();
    let mut sinks = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let cfg_path = dir.join(CONFIG);
        if cfg_path.exists() {
            let previous = ExperimentConfig::load(&cfg_path)?;
            if !same_experiment(&previous, config) {
                return Err(Error::Config(format!(
                    "{} holds results of a different configuration",
                    dir.display()
                )));
            }
        } else {
            fs::write(&cfg_path, config.to_toml()?)?;
        }
        let (prefix, bytes) = read_prefix(&dir.join(RESULTS), &tasks)?;
        done = prefix;
        let results = open_truncated(&dir.join(RESULTS), bytes)?;
        let timing = OpenOptions::new().create(true).append(true).open(dir.join(TIMING))?;
        sinks = Some((BufWriter::new(results), BufWriter::new(timing)));
    }

    let remaining = &tasks[done.len()..];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<(usize, ResultRecord, f64)>();
    let start = done.len();
    let mut fresh: Vec<ResultRecord> = Vec::with_capacity(remaining.len());

    std::thread::scope(|scope| -> Result<()> {
        let writer = scope.spawn(move || -> Result<Vec<ResultRecord>> {
            let mut pending: BTreeMap<usize, (ResultRecord, f64)> = BTreeMap::new();
            let mut next = start;
            let mut ordered = Vec::new();
            let mut sinks = sinks;
            for (k, rec, secs) in rx {
                pending.insert(k, (rec, secs));
                while let Some((rec, secs)) = pending.remove(&next) {
                    if let Some((res, tim)) = sinks.as_mut() {
                        write_line(res, &rec)?;
                        res.flush()?;
                        write_line(
                            tim,
                            &TimingRecord {
                                grid: rec.grid,
                                replicate: rec.replicate,
                                seconds: secs,
                            },
                        )?;
                        tim.flush()?;
                    }
                    ordered.push(rec);
                    next += 1;
                }
            }
            Ok(ordered)
        });
        pool.install(|| {
            remaining.par_iter().enumerate().for_each_with(tx, |tx, (k, &(g, point, rep))| {
                let t = Instant::now();
                let rec = run_replicate(config, g, point, rep);
                // the receiver only goes away if writing failed; that error is reported below
                let _ = tx.send((start + k, rec, t.elapsed().as_secs_f64()));
            });
        });
        fresh = writer.join().expect("result writer panicked")?;
        Ok(())
    })?;

    done.extend(fresh);
    let table = ResultsTable { records: done };
    if let Some(dir) = out {
        fs::write(dir.join(SUMMARY), table.summary_csv())?;
    }
    Ok(table)
}

/// Configurations that produce the same records; worker count and output
/// location do not matter.
fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.workers = None;
        c.output = None;
        c
    };
    strip(a) == strip(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(engine: &str, extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
seed = 11
replicates = 3
workers = 2

[family]
family = "linear"
sigma2 = 1.0

[truth]
s0 = 2
signal = {{ kind = "fixed", magnitude = 1.5 }}

[grid]
n = [40, 80]
p = [5]

[engine]
{engine}
{extra}
"#
        ))
        .unwrap()
    }

    fn enumeration() -> ExperimentConfig {
        config("kind = \"enumeration\"\ns_max = 2\nslab = { kind = \"normal\", precision = 1.0 }", "")
    }

    #[test]
    fn single_task_gives_complete_record() {
        let mut cfg = enumeration();
        cfg.replicates = 1;
        cfg.grid.n = vec![60];
        let table = run_experiment(&cfg, None).unwrap();
        assert_eq!(table.len(), 1);
        let r = &table.records[0];
        assert!(r.is_ok(), "{:?}", r.error);
        assert_eq!(r.truth_support, vec![0, 1]);
        assert_eq!(r.truth_values, vec![1.5, -1.5]);
        for v in [r.l1_error, r.l2_error, r.pred_error, r.mass_s0, r.lambda] {
            assert!(v.unwrap() >= 0.0);
        }
        assert!(r.selected.is_some() && r.modal_support.is_some());
        assert!(r.eta_dist.is_none() && r.tv.is_none());
    }

    #[test]
    fn reruns_and_worker_counts_agree_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = enumeration();
        cfg.bvm = Some(super::super::BvmConfig {
            h: Default::default(),
            s_max: Some(2),
            level: 0.9,
            mode: BvmMode::Oracle,
        });
        run_experiment(&cfg, Some(&dir.path().join("a"))).unwrap();
        cfg.workers = Some(1);
        run_experiment(&cfg, Some(&dir.path().join("b"))).unwrap();
        for f in [RESULTS, SUMMARY] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let table = ResultsTable::load(&dir.path().join("a")).unwrap();
        assert_eq!(table.len(), 6);
        assert!(table.records.iter().all(|r| r.tv.is_some() && r.intervals.len() == 2));
        let order: Vec<(usize, usize)> = table.records.iter().map(|r| (r.grid, r.replicate)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = enumeration();
        let full_dir = dir.path().join("full");
        run_experiment(&cfg, Some(&full_dir)).unwrap();
        let full = fs::read_to_string(full_dir.join(RESULTS)).unwrap();

        let cut_dir = dir.path().join("cut");
        fs::create_dir_all(&cut_dir).unwrap();
        fs::write(cut_dir.join(CONFIG), cfg.to_toml().unwrap()).unwrap();
        let lines: Vec<&str> = full.lines().collect();
        let torn = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        fs::write(cut_dir.join(RESULTS), torn).unwrap();
        run_experiment(&cfg, Some(&cut_dir)).unwrap();
        assert_eq!(fs::read_to_string(cut_dir.join(RESULTS)).unwrap(), full);

        // rerunning a finished directory changes nothing
        run_experiment(&cfg, Some(&cut_dir)).unwrap();
        assert_eq!(fs::read_to_string(cut_dir.join(RESULTS)).unwrap(), full);
    }

    #[test]
    fn directory_of_another_experiment_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&enumeration(), Some(dir.path())).unwrap();
        let mut other = enumeration();
        other.seed += 1;
        assert!(matches!(run_experiment(&other, Some(dir.path())), Err(Error::Config(_))));
    }

    #[test]
    fn engine_failures_are_recorded_not_fatal() {
        // unreachable co-observation floor
        let mut cfg = enumeration();
        cfg.family = FamilySpec::MissingResponse(crate::zoo::MissingParams {
            sigma: nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        });
        cfg.design.observe_prob = 0.01;
        cfg.design.co_observe_floor = 0.99;
        let table = run_experiment(&cfg, None).unwrap();
        assert_eq!(table.len(), 6);
        assert_eq!(table.failures(), 6);
        assert!(table.records.iter().all(|r| r.error.is_some() && r.outcome == Outcome::Failed));
    }

    #[test]
    fn errors_shrink_with_n_for_known_variance_linear_model() {
        let mut cfg = enumeration();
        cfg.replicates = 50;
        cfg.grid.n = vec![50, 200, 800];
        cfg.workers = None;
        let table = run_experiment(&cfg, None).unwrap();
        let medians: Vec<f64> = (0..3)
            .map(|g| {
                metrics::median(table.records.iter().filter(|r| r.grid == g).filter_map(|r| r.l2_error).collect())
                    .unwrap()
            })
            .collect();
        let decreases = medians.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreases >= 2, "{medians:?}");
    }

    #[test]
    fn rjmcmc_with_nuisance_records_eta_distance() {
        let cfg = config(
            "kind = \"rjmcmc\"\nn_iter = 2000\ns_max = 3",
            "[bvm]\ns_max = 2",
        );
        let mut cfg = cfg;
        cfg.replicates = 1;
        cfg.grid.n = vec![80];
        let table = run_experiment(&cfg, None).unwrap();
        let r = &table.records[0];
        assert!(r.is_ok(), "{:?}", r.error);
        assert!(r.eta_dist.unwrap() >= 0.0);
        assert!(r.tv.is_some());
    }

    #[test]
    fn spline_refit_reproduces_the_truth_at_its_own_dimension() {
        let basis = SplineBasis::new(6, 4).unwrap();
        let family = FamilySpec::PartialLinear(PartialLinearParams {
            beta: DVector::from_vec(vec![0.1, -0.4, 0.8, 0.2, -0.3, 0.5]),
            sigma2: 1.0,
            basis,
        });
        let data = simulate(&family, &SparseVector::zeros(3), 40, 3, &Default::default(), 4).unwrap();
        let same = working_eta(&family, &data, Some(6)).unwrap();
        let (FamilySpec::PartialLinear(a), FamilySpec::PartialLinear(b)) = (&family, &same) else {
            panic!()
        };
        assert!((&a.beta - &b.beta).amax() < 1e-10);
        assert!(working_eta(&family, &data, Some(4)).is_ok());
        assert!(working_eta(&FamilySpec::Linear(crate::zoo::LinearParams { sigma2: 1.0 }), &data, Some(4)).is_err());
    }

    #[test]
    fn beta_min_signal_scales_with_the_threshold() {
        let mut cfg = enumeration();
        cfg.truth.signal = Signal::BetaMin {
            margin: 2.0,
            k4: 0.0,
            k5: 1.0,
        };
        let (_, theta0, bm) = draw_truth(&cfg, GridPoint { n: 60, p: 5, j: None }, 3).unwrap();
        let bm = bm.unwrap();
        assert!(bm > 0.0);
        for v in theta0.values() {
            assert!((v.abs() - 2.0 * bm).abs() < 1e-12);
        }
    }
}
