//! Simulation experiments: configuration, replicated runs with resumable
//! output, and the metrics computed from the results table.

mod metrics;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bvm::{BvmMode, HChoice};
use crate::error::{Error, Result};
use crate::linalg::support_count;
use crate::posterior::SlabKind;
use crate::priors::NuisancePriorSpec;
use crate::zoo::{DesignSpec, FamilySpec};

pub use metrics::{
    contraction_slope, coverage_metrics, median, median_by_n, np_error_curve, report, selection_metrics, CoverageRow,
    ErrorColumn, NpPoint, SelectionRates,
};
pub use run::{
    draw_truth, fit_posterior, plug_in_theta, prior_for, replicate_seed, run_experiment, run_replicate, working_eta, Fit, GridPoint,
    IntervalRecord, Outcome, ResultRecord, ResultsTable,
};

/// A complete experiment, read from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub replicates: usize,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Directory for results; may be overridden on the command line.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// True nuisance parameter `η₀`.
    pub family: FamilySpec,
    pub truth: TruthSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub nuisance_prior: NuisancePriorSpec,
    #[serde(default)]
    pub design: DesignSpec,
    pub engine: EngineConfig,
    #[serde(default)]
    pub bvm: Option<BvmConfig>,
    #[serde(default)]
    pub np: Option<NpConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub s0: usize,
    /// Active coordinates; `0..s0` when absent.
    #[serde(default)]
    pub support: Option<Vec<usize>>,
    pub signal: Signal,
}

/// Nonzero values of `θ₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    Values { values: Vec<f64> },
    /// `±magnitude` with alternating signs.
    Fixed { magnitude: f64 },
    /// `±margin · β_min(X̃)` with alternating signs, where the beta-min
    /// threshold is computed from each replicate's whitened design.
    BetaMin {
        margin: f64,
        #[serde(default)]
        k4: f64,
        #[serde(default = "one_f")]
        k5: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    /// Spline dimensions of the working nuisance model; empty keeps the
    /// family's own basis.
    #[serde(default)]
    pub j: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// `L₃‖X‖_*/√n`.
    #[default]
    Upper,
    /// `‖X‖_*/(L₁p^{L₂})`.
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaPolicy {
    Rule(LambdaRule),
    Value(f64),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Rule(LambdaRule::Upper)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "two_f")]
    pub dim_decay: f64,
    #[serde(default)]
    pub lambda: LambdaPolicy,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            dim_decay: 2.0,
            lambda: LambdaPolicy::default(),
        }
    }
}

/// How the posterior is computed for each replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineConfig {
    /// Exact support enumeration at the true `η₀`.
    Enumeration {
        s_max: usize,
        #[serde(default = "laplace")]
        slab: SlabKind,
    },
    /// Reversible-jump MCMC, started at `θ = 0` and the working `η₀`.
    Rjmcmc {
        n_iter: usize,
        #[serde(default)]
        burn_in: Option<usize>,
        #[serde(default = "one")]
        thin: usize,
        #[serde(default)]
        s_max: Option<usize>,
        #[serde(default = "yes")]
        update_eta: bool,
        #[serde(default = "laplace")]
        slab: SlabKind,
    },
    /// No posterior; only the `Π^∞` quantities are recorded.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BvmConfig {
    #[serde(default)]
    pub h: HChoice,
    /// Largest support in the mixture; `s0` when absent.
    #[serde(default)]
    pub s_max: Option<usize>,
    #[serde(default = "level")]
    pub level: f64,
    #[serde(default)]
    pub mode: BvmMode,
}

/// Type-I error of the likelihood-ratio test of `(θ₀, η₀)` against a fixed
/// alternative `(θ₀ + shift·sign(θ₀), η₁)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpConfig {
    pub alternative: FamilySpec,
    #[serde(default)]
    pub theta_shift: f64,
    pub replicates: usize,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn two_f() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}
impl Default for BvmConfig {
    fn default() -> Self {
        Self {
            h: HChoice::default(),
            s_max: None,
            level: level(),
            mode: BvmMode::default(),
        }
    }
}

fn level() -> f64 {
    0.95
}
fn laplace() -> SlabKind {
    SlabKind::Laplace
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        if self.grid.n.is_empty() || self.grid.p.is_empty() {
            return Err(Error::Config("grids over n and p must be nonempty".into()));
        }
        if self.grid.n.contains(&0) || self.grid.p.contains(&0) {
            return Err(Error::Config("grid values must be positive".into()));
        }
        self.family.validate()?;
        let t = &self.truth;
        let p_min = *self.grid.p.iter().min().expect("nonempty");
        if t.s0 > p_min {
            return Err(Error::Config(format!("s0 = {} exceeds the smallest p = {p_min}", t.s0)));
        }
        if let Some(s) = &t.support {
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != t.s0 || sorted.iter().any(|&j| j >= p_min) {
                return Err(Error::Config(format!("support {s:?} must list s0 = {} distinct indices below {p_min}", t.s0)));
            }
        }
        match &t.signal {
            Signal::Values { values } if values.len() != t.s0 || values.iter().any(|v| *v == 0.0 || !v.is_finite()) => {
                return Err(Error::Config(format!("{} signal values for s0 = {}; all must be finite and nonzero", values.len(), t.s0)));
            }
            Signal::Fixed { magnitude } if !(magnitude.is_finite() && *magnitude > 0.0) => {
                return Err(Error::Config(format!("signal magnitude {magnitude}")));
            }
            Signal::BetaMin { margin, k4, k5 } if !(*margin > 0.0 && *k4 >= 0.0 && *k5 > 0.0) => {
                return Err(Error::Config(format!("beta-min margin {margin}, K4 {k4}, K5 {k5}")));
            }
            _ => {}
        }
        if !self.grid.j.is_empty() && !matches!(self.family, FamilySpec::HeteroSpline(_) | FamilySpec::PartialLinear(_)) {
            return Err(Error::Config(format!("a J grid needs a spline family, not {}", self.family.name())));
        }
        if let LambdaPolicy::Value(v) = self.prior.lambda {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("slab rate {v}")));
            }
        }
        self.nuisance_prior.validate()?;
        let p_max = *self.grid.p.iter().max().expect("nonempty");
        match &self.engine {
            EngineConfig::Enumeration { s_max, slab } => {
                let needed = support_count(p_max, *s_max);
                if needed > crate::diagnostics::DEFAULT_BUDGET {
                    return Err(Error::Budget {
                        needed,
                        budget: crate::diagnostics::DEFAULT_BUDGET,
                    });
                }
                if *slab == SlabKind::Laplace && *s_max > 3 {
                    return Err(Error::Config(format!("Laplace-slab enumeration supports s_max ≤ 3, got {s_max}")));
                }
            }
            EngineConfig::Rjmcmc { n_iter, burn_in, thin, .. } => {
                if *n_iter == 0 || *thin == 0 || burn_in.is_some_and(|b| b >= *n_iter) {
                    return Err(Error::Config(format!("rjmcmc: n_iter {n_iter}, burn_in {burn_in:?}, thin {thin}")));
                }
            }
            EngineConfig::None => {
                if self.bvm.is_none() {
                    return Err(Error::Config("engine `none` needs a [bvm] section".into()));
                }
            }
        }
        if let Some(b) = &self.bvm {
            if !(0.0..1.0).contains(&b.level) {
                return Err(Error::Config(format!("credible level {}", b.level)));
            }
            let s_max = b.s_max.unwrap_or(t.s0);
            let needed = support_count(p_max, s_max);
            if needed > crate::diagnostics::DEFAULT_BUDGET {
                return Err(Error::Budget {
                    needed,
                    budget: crate::diagnostics::DEFAULT_BUDGET,
                });
            }
        }
        if let Some(np) = &self.np {
            np.alternative.validate()?;
            if np.replicates == 0 {
                return Err(Error::Config("np replicates must be positive".into()));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    /// Grid points in output order: `p`, then `J`, then `n`.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let js: Vec<Option<usize>> = if self.grid.j.is_empty() {
            vec![None]
        } else {
            self.grid.j.iter().map(|&j| Some(j)).collect()
        };
        let mut out = Vec::new();
        for &p in &self.grid.p {
            for &j in &js {
                for &n in &self.grid.n {
                    out.push(GridPoint { n, p, j });
                }
            }
        }
        out
    }

    pub fn support(&self) -> Vec<usize> {
        let mut s = self.truth.support.clone().unwrap_or_else(|| (0..self.truth.s0).collect());
        s.sort_unstable();
        s
    }
}
