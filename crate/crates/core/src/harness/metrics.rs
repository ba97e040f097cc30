use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{draw_truth, replicate_seed, GridPoint, ResultRecord, ResultsTable};
use super::ExperimentConfig;
use crate::divergences::{avg_renyi, np_test, NpDecision};
use crate::error::{Error, Result};
use crate::linalg::norm_quantile;
use crate::model::SparseVector;
use crate::splines::log_log_slope;
use crate::zoo::resimulate_responses;

// replicate slot reserved for the fixed design of the NP curve
const DESIGN_SLOT: usize = u32::MAX as usize;

/// Median of the finite values, `None` when there are none.
pub fn median(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorColumn {
    L1,
    L2,
    Pred,
    EtaDist,
    Tv,
}

impl ErrorColumn {
    pub fn get(self, r: &ResultRecord) -> Option<f64> {
        match self {
            ErrorColumn::L1 => r.l1_error,
            ErrorColumn::L2 => r.l2_error,
            ErrorColumn::Pred => r.pred_error,
            ErrorColumn::EtaDist => r.eta_dist,
            ErrorColumn::Tv => r.tv,
        }
    }
}

impl std::str::FromStr for ErrorColumn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "l1" => ErrorColumn::L1,
            "l2" => ErrorColumn::L2,
            "pred" => ErrorColumn::Pred,
            "eta_dist" => ErrorColumn::EtaDist,
            "tv" => ErrorColumn::Tv,
            other => return Err(Error::Config(format!("unknown error column {other:?}"))),
        })
    }
}

/// Per-`n` medians of a column over successful replicates.
pub fn median_by_n(table: &ResultsTable, column: ErrorColumn) -> Result<Vec<(usize, f64)>> {
    let fixed: BTreeSet<(usize, Option<usize>)> = table.records.iter().map(|r| (r.p, r.j)).collect();
    if fixed.len() > 1 {
        return Err(Error::Config(format!(
            "contraction slopes need a single (p, J); the table has {}",
            fixed.len()
        )));
    }
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in table.records.iter().filter(|r| r.is_ok()) {
        if let Some(v) = column.get(r) {
            by_n.entry(r.n).or_default().push(v);
        }
    }
    Ok(by_n.into_iter().filter_map(|(n, v)| median(v).map(|m| (n, m))).collect())
}

/// Least-squares slope of log median error against log `n`.
pub fn contraction_slope(table: &ResultsTable, column: ErrorColumn) -> Result<f64> {
    let pts = median_by_n(table, column)?;
    if pts.len() < 2 {
        return Err(Error::Config(format!("{} sample sizes with {column:?} values; need at least 2", pts.len())));
    }
    if let Some((n, _)) = pts.iter().find(|(_, m)| *m <= 0.0) {
        return Err(Error::NonFinite(format!("median {column:?} error is zero at n = {n}")));
    }
    let ns: Vec<f64> = pts.iter().map(|(n, _)| *n as f64).collect();
    let ms: Vec<f64> = pts.iter().map(|(_, m)| *m).collect();
    Ok(log_log_slope(&ns, &ms))
}

/// Modal-support recovery rates at one grid point; `None` when no
/// replicate produced a posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRates {
    pub grid: usize,
    pub n: usize,
    pub p: usize,
    pub j: Option<usize>,
    pub replicates: usize,
    /// Modal support equals `S₀`.
    pub exact: Option<f64>,
    /// Modal support strictly contains `S₀`.
    pub superset: Option<f64>,
    /// Modal support is strictly contained in `S₀`.
    pub subset: Option<f64>,
}

fn by_grid(table: &ResultsTable) -> BTreeMap<usize, (GridPoint, Vec<&ResultRecord>)> {
    let mut out: BTreeMap<usize, (GridPoint, Vec<&ResultRecord>)> = BTreeMap::new();
    for r in &table.records {
        out.entry(r.grid).or_insert_with(|| (r.point(), vec![])).1.push(r);
    }
    out
}

pub fn selection_metrics(table: &ResultsTable) -> Vec<SelectionRates> {
    by_grid(table)
        .into_iter()
        .map(|(grid, (pt, recs))| {
            let mut exact = 0usize;
            let mut sup = 0usize;
            let mut sub = 0usize;
            let mut total = 0usize;
            for r in recs.iter().filter(|r| r.is_ok()) {
                let Some(modal) = &r.modal_support else { continue };
                total += 1;
                let m: BTreeSet<usize> = modal.iter().copied().collect();
                let s: BTreeSet<usize> = r.truth_support.iter().copied().collect();
                if m == s {
                    exact += 1;
                } else if m.is_superset(&s) {
                    sup += 1;
                } else if m.is_subset(&s) {
                    sub += 1;
                }
            }
            let rate = |k: usize| (total > 0).then(|| k as f64 / total as f64);
            SelectionRates {
                grid,
                n: pt.n,
                p: pt.p,
                j: pt.j,
                replicates: total,
                exact: rate(exact),
                superset: rate(sup),
                subset: rate(sub),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub grid: usize,
    pub n: usize,
    pub p: usize,
    pub j: Option<usize>,
    pub coord: usize,
    pub replicates: usize,
    pub coverage: f64,
}

/// Fraction of replicates whose `center ± z·sd` interval at `level`
/// contains `θ₀,j`, per grid point and coordinate.
pub fn coverage_metrics(table: &ResultsTable, level: f64) -> Result<Vec<CoverageRow>> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::ParamRange(format!("credible level {level}")));
    }
    let z = if level == 0.0 { 0.0 } else { norm_quantile(0.5 * (1.0 + level)) };
    let mut rows = Vec::new();
    for (grid, (pt, recs)) in by_grid(table) {
        let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.is_ok()) {
            for iv in &r.intervals {
                let truth = r
                    .truth_support
                    .iter()
                    .position(|&j| j == iv.coord)
                    .map_or(0.0, |k| r.truth_values[k]);
                let half = if iv.sd.is_infinite() { f64::INFINITY } else { z * iv.sd };
                let hit = (truth - iv.center).abs() <= half;
                let e = counts.entry(iv.coord).or_default();
                e.0 += hit as usize;
                e.1 += 1;
            }
        }
        for (coord, (hits, total)) in counts {
            rows.push(CoverageRow {
                grid,
                n: pt.n,
                p: pt.p,
                j: pt.j,
                coord,
                replicates: total,
                coverage: hits as f64 / total as f64,
            });
        }
    }
    Ok(rows)
}

/// Type-I error of the likelihood-ratio test at one sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpPoint {
    pub n: usize,
    pub replicates: usize,
    pub rejections: usize,
    pub empirical: f64,
    /// Monte Carlo standard error of `empirical`.
    pub se: f64,
    /// Average order-½ Rényi divergence `R_n` between the hypotheses.
    pub renyi: f64,
    /// `exp(−n·R_n)`.
    pub bound: f64,
}

impl NpPoint {
    pub fn dominated(&self, n_se: f64) -> bool {
        self.empirical <= self.bound + n_se * self.se
    }
}

/// For each `n` (at the first `p`), fix one design, draw null datasets at
/// `(θ₀, η₀)` and count rejections of the test against the alternative.
pub fn np_error_curve(config: &ExperimentConfig) -> Result<Vec<NpPoint>> {
    config.validate()?;
    let np = config
        .np
        .as_ref()
        .ok_or_else(|| Error::Config("np_error_curve needs an [np] section".into()))?;
    let p = config.grid.p[0];
    let mut out = Vec::new();
    for (g, &n) in config.grid.n.iter().enumerate() {
        let point = GridPoint { n, p, j: None };
        let (skeleton, theta0, _) = draw_truth(config, point, replicate_seed(config.seed, g, DESIGN_SLOT))?;
        let shifted: Vec<(usize, f64)> = theta0
            .support()
            .iter()
            .zip(theta0.values())
            .map(|(&j, &v)| (j, v + np.theta_shift * v.signum()))
            .collect();
        let theta1 = SparseVector::from_pairs(p, shifted)?;
        let renyi = avg_renyi(&theta1, &np.alternative, &theta0, &config.family, &skeleton)?;
        let decisions: Vec<Result<bool>> = (0..np.replicates)
            .into_par_iter()
            .map(|r| {
                let data = resimulate_responses(&config.family, &theta0, &skeleton, replicate_seed(config.seed, g, r))?;
                Ok(np_test(&data, (&theta1, &np.alternative), (&theta0, &config.family))? == NpDecision::Reject)
            })
            .collect();
        let mut rejections = 0;
        for d in decisions {
            rejections += d? as usize;
        }
        let e = rejections as f64 / np.replicates as f64;
        out.push(NpPoint {
            n,
            replicates: np.replicates,
            rejections,
            empirical: e,
            se: (e * (1.0 - e) / np.replicates as f64).sqrt(),
            renyi,
            bound: (-(n as f64) * renyi).exp(),
        });
    }
    Ok(out)
}

/// Plain-text report of a results table: per-point summary, contraction
/// slopes of the posterior-mean errors for every `(p, J)` with at least two
/// sample sizes, and interval coverage at `level`. Errors are aggregated by
/// medians before the slope regression.
pub fn report(table: &ResultsTable, level: f64) -> Result<String> {
    let mut out = String::new();
    out.push_str(&table.summary_csv());
    let groups: BTreeSet<(usize, Option<usize>)> = table.records.iter().map(|r| (r.p, r.j)).collect();
    for (p, j) in groups {
        let sub = ResultsTable {
            records: table.records.iter().filter(|r| r.p == p && r.j == j).cloned().collect(),
        };
        for (label, col) in [("l1", ErrorColumn::L1), ("l2", ErrorColumn::L2), ("pred", ErrorColumn::Pred), ("eta_dist", ErrorColumn::EtaDist), ("tv", ErrorColumn::Tv)] {
            if let Ok(slope) = contraction_slope(&sub, col) {
                let j = j.map_or(String::new(), |j| format!(", J = {j}"));
                out.push_str(&format!("contraction slope ({label}, p = {p}{j}): {slope:.6}\n"));
            }
        }
    }
    for row in coverage_metrics(table, level)? {
        out.push_str(&format!(
            "coverage (n = {}, p = {}, coord {}, level {level}): {:.4} over {}\n",
            row.n, row.p, row.coord, row.coverage, row.replicates
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::{IntervalRecord, Outcome};

    fn record(grid: usize, n: usize, modal: &[usize]) -> ResultRecord {
        serde_json::from_value(serde_json::json!({
            "grid": grid, "replicate": 0, "n": n, "p": 10, "seed": 0, "outcome": "ok",
            "truth_support": [1, 4], "truth_values": [1.0, -2.0],
            "modal_support": modal,
        }))
        .unwrap()
    }

    fn table_with(errors: &[(usize, f64)]) -> ResultsTable {
        let records = errors
            .iter()
            .enumerate()
            .map(|(k, &(n, e))| {
                let mut r = record(k / 3, n, &[1, 4]);
                r.l2_error = Some(e);
                r
            })
            .collect();
        ResultsTable { records }
    }

    #[test]
    fn exact_power_law_gives_its_exponent() {
        let mut errs = vec![];
        for n in [50usize, 100, 200, 400, 800] {
            for scale in [0.9, 1.0, 1.3] {
                errs.push((n, scale * 3.0 * (n as f64).powf(-0.5)));
            }
        }
        let slope = contraction_slope(&table_with(&errs), ErrorColumn::L2).unwrap();
        assert!((slope + 0.5).abs() < 1e-6, "{slope}");
    }

    #[test]
    fn constant_errors_give_zero_slope() {
        let errs: Vec<(usize, f64)> = [10usize, 20, 40].iter().flat_map(|&n| [(n, 0.7); 3]).collect();
        assert!(contraction_slope(&table_with(&errs), ErrorColumn::L2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn slope_needs_single_design_and_two_sizes() {
        let mut t = table_with(&[(10, 1.0), (20, 0.5)]);
        assert!(contraction_slope(&t, ErrorColumn::L1).is_err());
        t.records[1].p = 11;
        assert!(contraction_slope(&t, ErrorColumn::L2).is_err());
    }

    #[test]
    fn failed_replicates_are_ignored_by_medians() {
        let mut t = table_with(&[(10, 1.0), (10, 1.0), (10, 1.0), (40, 0.5), (40, 0.5), (40, 0.5)]);
        t.records[0].outcome = Outcome::Failed;
        t.records[0].l2_error = Some(1e9);
        assert!((contraction_slope(&t, ErrorColumn::L2).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn selection_rates_in_the_pure_cases() {
        let exact = ResultsTable {
            records: (0..4).map(|_| record(0, 10, &[1, 4])).collect(),
        };
        let s = &selection_metrics(&exact)[0];
        assert_eq!((s.exact, s.superset, s.subset), (Some(1.0), Some(0.0), Some(0.0)));
        let sup = ResultsTable {
            records: vec![record(0, 10, &[1, 2, 4]), record(0, 10, &[0, 1, 4, 9])],
        };
        let s = &selection_metrics(&sup)[0];
        assert_eq!((s.exact, s.superset, s.subset), (Some(0.0), Some(1.0), Some(0.0)));
        let mixed = ResultsTable {
            records: vec![record(0, 10, &[1]), record(0, 10, &[]), record(0, 10, &[2, 4]), record(0, 10, &[1, 4])],
        };
        let s = &selection_metrics(&mixed)[0];
        assert_eq!((s.exact, s.superset, s.subset), (Some(0.25), Some(0.0), Some(0.5)));
    }

    fn with_intervals(center: f64, sd: f64) -> ResultsTable {
        let records = (0..5)
            .map(|_| {
                let mut r = record(0, 10, &[1, 4]);
                r.intervals = vec![
                    IntervalRecord { coord: 1, center, sd, covered: false },
                    IntervalRecord { coord: 4, center, sd, covered: false },
                ];
                r
            })
            .collect();
        ResultsTable { records }
    }

    #[test]
    fn coverage_extremes() {
        let whole_line = coverage_metrics(&with_intervals(0.0, f64::INFINITY), 0.95).unwrap();
        assert!(whole_line.iter().all(|c| c.coverage == 1.0 && c.replicates == 5));
        let point = coverage_metrics(&with_intervals(0.3, 0.0), 0.95).unwrap();
        assert_eq!(point.len(), 2);
        assert!(point.iter().all(|c| c.coverage == 0.0));
        assert!(coverage_metrics(&with_intervals(0.3, 0.0), 1.0).is_err());
    }

    #[test]
    fn coverage_depends_on_level() {
        // center 0, sd 1: θ₀ = 1 is inside at 90% (z = 1.64), outside at 50% (z = 0.67)
        let t = with_intervals(0.0, 1.0);
        let c90 = coverage_metrics(&t, 0.9).unwrap();
        let c50 = coverage_metrics(&t, 0.5).unwrap();
        assert_eq!(c90.iter().find(|c| c.coord == 1).unwrap().coverage, 1.0);
        assert_eq!(c50.iter().find(|c| c.coord == 1).unwrap().coverage, 0.0);
        assert_eq!(c90.iter().find(|c| c.coord == 4).unwrap().coverage, 0.0);
    }

    fn np_config(alt_sigma2: f64, shift: f64) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
seed = 5
replicates = 1

[family]
family = "linear"
sigma2 = 1.0

[truth]
s0 = 1
signal = {{ kind = "fixed", magnitude = 1.0 }}

[grid]
n = [20, 40]
p = [3]

[engine]
kind = "enumeration"
s_max = 1

[np]
alternative = {{ family = "linear", sigma2 = {alt_sigma2} }}
theta_shift = {shift}
replicates = 500
"#
        ))
        .unwrap()
    }

    #[test]
    fn identical_hypotheses_have_unit_bound() {
        for pt in np_error_curve(&np_config(1.0, 0.0)).unwrap() {
            assert!(pt.renyi.abs() < 1e-12);
            assert!((pt.bound - 1.0).abs() < 1e-10);
            assert!(pt.dominated(3.0));
        }
    }

    #[test]
    fn far_alternatives_are_never_chosen() {
        for pt in np_error_curve(&np_config(1.0, 30.0)).unwrap() {
            assert_eq!(pt.rejections, 0);
            assert!(pt.bound < 1e-6);
        }
    }

    #[test]
    fn moderate_alternatives_stay_under_the_bound() {
        let pts = np_error_curve(&np_config(1.3, 0.15)).unwrap();
        for pt in &pts {
            assert!(pt.dominated(3.0), "{pt:?}");
            assert!(pt.bound < 1.0);
        }
    }

    #[test]
    fn median_handles_even_odd_and_empty() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![f64::NAN]), None);
    }
}
