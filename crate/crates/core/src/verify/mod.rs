//! The acceptance checks, grouped into suites that can be run on their own.

mod oracles;
mod simulation;

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Divergences,
    Correlation,
    Diagnostics,
    Sampler,
    Bvm,
    Selection,
    Contraction,
    Coverage,
    Np,
    Splines,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 11] = [
        "divergences",
        "correlation",
        "diagnostics",
        "sampler",
        "bvm",
        "selection",
        "contraction",
        "coverage",
        "np",
        "splines",
        "all",
    ];

    pub fn criteria(self) -> Vec<u8> {
        match self {
            Suite::Divergences => vec![1, 2],
            Suite::Correlation => vec![3],
            Suite::Diagnostics => vec![4],
            Suite::Sampler => vec![5],
            Suite::Bvm => vec![6, 11],
            Suite::Selection => vec![7],
            Suite::Contraction => vec![8],
            Suite::Coverage => vec![9],
            Suite::Np => vec![10],
            Suite::Splines => vec![12],
            Suite::All => (1..=12).collect(),
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "divergences" => Suite::Divergences,
            "correlation" => Suite::Correlation,
            "diagnostics" => Suite::Diagnostics,
            "sampler" => Suite::Sampler,
            "bvm" => Suite::Bvm,
            "selection" => Suite::Selection,
            "contraction" => Suite::Contraction,
            "coverage" => Suite::Coverage,
            "np" => Suite::Np,
            "splines" => Suite::Splines,
            "all" => Suite::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown suite {other:?}; expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

/// The property part of a criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub check: Check,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl CriterionReport {
    pub fn within_budget(&self) -> bool {
        self.elapsed <= self.budget
    }

    /// The property holds and the run finished inside its time budget.
    pub fn passed(&self) -> bool {
        self.check.passed && self.within_budget()
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<28} {:>8.1}s / {:>5.0}s  {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs_f64(),
            self.check.detail
        )
    }
}

pub fn name(id: u8) -> &'static str {
    match id {
        1 => "divergence oracles",
        2 => "eigenvalue sandwich",
        3 => "correlation eigen bounds",
        4 => "compatibility numbers",
        5 => "sampler vs enumeration",
        6 => "BvM shape",
        7 => "selection consistency",
        8 => "contraction slope",
        9 => "credible coverage",
        10 => "Neyman-Pearson bound",
        11 => "measurement-error center",
        12 => "B-spline approximation",
        _ => "unknown",
    }
}

fn budget(id: u8) -> Duration {
    let minutes = |m: u64| Duration::from_secs(60 * m);
    match id {
        1 | 11 | 12 => minutes(1),
        2 | 3 => Duration::from_secs(10),
        4 => minutes(2),
        5 | 10 => minutes(5),
        6 | 9 => minutes(10),
        7 => minutes(15),
        // three families at fifteen minutes each
        8 => minutes(45),
        _ => Duration::ZERO,
    }
}

pub fn run_criterion(id: u8) -> Result<CriterionReport> {
    let start = Instant::now();
    let check = match id {
        1 => oracles::divergences(),
        2 => oracles::sandwich(),
        3 => oracles::correlation_bounds(),
        4 => oracles::compatibility(),
        5 => simulation::sampler_vs_enumeration(),
        6 => simulation::bvm_shape(),
        7 => simulation::selection(),
        8 => simulation::contraction(),
        9 => simulation::coverage(),
        10 => simulation::neyman_pearson(),
        11 => oracles::measurement_error_center(),
        12 => oracles::splines(),
        other => return Err(Error::Config(format!("no acceptance criterion {other}"))),
    };
    let check = check.unwrap_or_else(|e| Check::new(false, format!("error: {e}")));
    Ok(CriterionReport {
        id,
        name: name(id),
        check,
        elapsed: start.elapsed(),
        budget: budget(id),
    })
}

pub fn run_suite(suite: Suite) -> Vec<CriterionReport> {
    suite
        .criteria()
        .into_iter()
        .map(|id| run_criterion(id).expect("suites list known criteria"))
        .collect()
}

pub fn format_table(reports: &[CriterionReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "{}", r.line());
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    let _ = writeln!(out, "{passed}/{} criteria passed", reports.len());
    out
}
