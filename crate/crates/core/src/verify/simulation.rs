use rand::Rng;
use rayon::prelude::*;

use super::Check;
use crate::bvm::{build_bvm, tv_support_mixture, BvmMode, HChoice};
use crate::diagnostics::{beta_min_threshold, x_norm_star, EnumerationOptions};
use crate::error::Result;
use crate::harness::{
    contraction_slope, coverage_metrics, median_by_n, np_error_curve, run_experiment, selection_metrics, ErrorColumn,
    ExperimentConfig,
};
use crate::model::SparseVector;
use crate::posterior::{
    enumerate_posterior_laplace_slab, enumerate_posterior_normal_slab, rjmcmc_sample, support_marginals,
    McmcOptions, QuadratureOptions, SlabKind,
};
use crate::priors::{NuisancePriorSpec, SpikeSlabSpec};
use crate::rng::stream_rng;
use crate::zoo::{resimulate_responses, simulate, DesignSpec, FamilySpec, LinearParams};

const SEED: u64 = 7_730_211;

fn unit_linear() -> FamilySpec {
    FamilySpec::Linear(LinearParams { sigma2: 1.0 })
}

pub(super) fn sampler_vs_enumeration() -> Result<Check> {
    let p = 6;
    let fam = unit_linear();
    let slab = SlabKind::Normal { precision: 1.0 };
    let tvs: Vec<f64> = (0..20u64)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let mut rng = stream_rng(SEED, k);
            let n = rng.random_range(30..=80);
            let s0 = (k % 4) as usize;
            let pairs: Vec<(usize, f64)> = rand::seq::index::sample(&mut rng, p, s0)
                .into_iter()
                .map(|j| (j, rng.random_range(0.15..0.8) * if rng.random::<bool>() { 1.0 } else { -1.0 }))
                .collect();
            let theta0 = SparseVector::from_pairs(p, pairs)?;
            let data = simulate(&fam, &theta0, n, p, &DesignSpec::default(), k)?;
            let spec = SpikeSlabSpec::for_design(p, x_norm_star(&data.stacked_x()), n)?;
            let exact = enumerate_posterior_normal_slab(&data, &spec, &fam, 3, 1.0)?;
            let mut opts = McmcOptions::new(100_000, k);
            opts.slab = slab;
            opts.s_max = Some(3);
            opts.update_eta = false;
            let chain =
                rjmcmc_sample(&data, &spec, &NuisancePriorSpec::default(), (&SparseVector::zeros(p), &fam), &opts)?;
            Ok(support_marginals(&chain, opts.burn_in())?.support_tv(&exact))
        })
        .collect::<Result<_>>()?;
    let good = tvs.iter().filter(|&&t| t <= 0.05).count();
    let worst = tvs.iter().copied().fold(0.0, f64::max);
    Ok(Check::new(
        good >= 18,
        format!("{good}/20 benchmarks with support TV ≤ 0.05 (worst {worst:.3})"),
    ))
}

pub(super) fn bvm_shape() -> Result<Check> {
    let (p, s0) = (8, 2);
    let ns = [50usize, 100, 200, 400];
    let fam = unit_linear();
    let curves: Vec<Vec<f64>> = (0..50u64)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let seed = SEED + 100 + k;
            let skeleton = simulate(&fam, &SparseVector::zeros(p), ns[3], p, &DesignSpec::default(), seed)?;
            // twice the threshold at the smallest sample size, so it holds at every n
            let small = skeleton.prefix(ns[0])?;
            let bm = beta_min_threshold(&small.stacked_x(), s0, 1.0, 1.0, &EnumerationOptions::default())?;
            let b = 2.0 * bm.value;
            let theta0 = SparseVector::from_pairs(p, [(0, b), (1, -b)])?;
            let full = resimulate_responses(&fam, &theta0, &skeleton, seed)?;
            ns.iter()
                .map(|&n| {
                    let data = full.prefix(n)?;
                    let spec = SpikeSlabSpec::for_design(p, x_norm_star(&data.stacked_x()), n)?;
                    let post = enumerate_posterior_laplace_slab(&data, &spec, &fam, 3, &QuadratureOptions::default())?;
                    let mix = build_bvm(&data, &theta0, &fam, &spec, &HChoice::ZProjection, 3, BvmMode::Oracle)?;
                    Ok(tv_support_mixture(&post, &mix)?.value)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let good = curves
        .iter()
        .filter(|c| c.windows(2).all(|w| w[1] < w[0]) && c[3] <= 0.15)
        .count();
    let med_last = crate::harness::median(curves.iter().map(|c| c[3]).collect()).unwrap_or(f64::NAN);
    let med_first = crate::harness::median(curves.iter().map(|c| c[0]).collect()).unwrap_or(f64::NAN);
    Ok(Check::new(
        good >= 40,
        format!("{good}/50 replicates decreasing with TV ≤ 0.15 at n=400 (median TV {med_first:.3} → {med_last:.3})"),
    ))
}

fn config(text: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(text)
}

pub(super) fn selection() -> Result<Check> {
    let cfg = config(&format!(
        r#"
name = "selection"
seed = {SEED}
replicates = 200

[family]
family = "linear"
sigma2 = 1.0

[truth]
s0 = 3
signal = {{ kind = "beta_min", margin = 2.0, k4 = 0.0, k5 = 1.0 }}

[grid]
n = [100, 200, 400]
p = [100]

[engine]
kind = "rjmcmc"
n_iter = 6000
burn_in = 1500
s_max = 10
update_eta = false
"#
    ))?;
    let table = run_experiment(&cfg, None)?;
    let rates = selection_metrics(&table);
    let at = |n: usize| rates.iter().find(|r| r.n == n).expect("grid point");
    let last = at(400);
    let exact = last.exact.unwrap_or(0.0);
    let sup = last.superset.unwrap_or(1.0);
    let path: Vec<String> = [100, 200, 400]
        .iter()
        .map(|&n| format!("{:.3}", at(n).exact.unwrap_or(f64::NAN)))
        .collect();
    Ok(Check::new(
        exact >= 0.95 && sup <= 0.05 && table.failures() == 0,
        format!(
            "exact recovery {} over n = 100/200/400; superset rate {sup:.3} at n=400; {} failures",
            path.join("/"),
            table.failures()
        ),
    ))
}

fn contraction_config(family: &str, update_eta: bool) -> String {
    format!(
        r#"
seed = {SEED}
replicates = 40

{family}

[truth]
s0 = 3
signal = {{ kind = "fixed", magnitude = 1.0 }}

[grid]
n = [100, 200, 400, 800]
p = [20]

[design]
group_size = 3

[engine]
kind = "rjmcmc"
n_iter = 4000
burn_in = 1000
s_max = 8
update_eta = {update_eta}
"#
    )
}

pub(super) fn contraction() -> Result<Check> {
    let families = [
        ("known-variance linear", "[family]\nfamily = \"linear\"\nsigma2 = 1.0", false),
        (
            "AR correlation",
            "[family]\nfamily = \"param_correlation\"\nkind = \"ar\"\nalpha = 0.5\nsigma2 = 1.0",
            true,
        ),
        (
            "mixed effects",
            "[family]\nfamily = \"mixed_effects\"\npsi = [[1.0, 0.3], [0.3, 0.5]]\nsigma2 = 1.0",
            true,
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, fam, update) in families {
        let cfg = config(&contraction_config(fam, update))?;
        let table = run_experiment(&cfg, None)?;
        let slope = contraction_slope(&table, ErrorColumn::L2)?;
        let pass = (-0.65..=-0.35).contains(&slope);
        ok &= pass;
        let med: Vec<String> = median_by_n(&table, ErrorColumn::L2)?
            .iter()
            .map(|(_, m)| format!("{m:.3}"))
            .collect();
        parts.push(format!("{label} {slope:.3} [{}]", med.join(" ")));
    }
    Ok(Check::new(ok, format!("slopes: {}", parts.join("; "))))
}

pub(super) fn coverage() -> Result<Check> {
    let cfg = config(&format!(
        r#"
name = "coverage"
seed = {SEED}
replicates = 200

[family]
family = "linear"
sigma2 = 1.0

[truth]
s0 = 3
support = [2, 7, 11]
signal = {{ kind = "fixed", magnitude = 0.5 }}

[grid]
n = [400]
p = [20]

[engine]
kind = "none"

[bvm]
s_max = 3
level = 0.95
mode = "oracle"
"#
    ))?;
    let table = run_experiment(&cfg, None)?;
    let rows = coverage_metrics(&table, 0.95)?;
    let ok = rows.len() == 3 && rows.iter().all(|r| (0.90..=0.99).contains(&r.coverage) && r.replicates == 200);
    let detail: Vec<String> = rows.iter().map(|r| format!("θ{}: {:.3}", r.coord, r.coverage)).collect();
    Ok(Check::new(ok, format!("coverage at n=400 over 200 replicates: {}", detail.join(", "))))
}

pub(super) fn neyman_pearson() -> Result<Check> {
    let cfg = config(&format!(
        r#"
seed = {SEED}
replicates = 1

[family]
family = "linear"
sigma2 = 1.0

[truth]
s0 = 2
signal = {{ kind = "fixed", magnitude = 1.0 }}

[grid]
n = [5, 10, 20, 40, 80]
p = [5]

[engine]
kind = "enumeration"
s_max = 1

[np]
alternative = {{ family = "linear", sigma2 = 1.5 }}
theta_shift = 0.2
replicates = 10000
"#
    ))?;
    let pts = np_error_curve(&cfg)?;
    let ok = pts.iter().all(|p| p.dominated(3.0));
    let detail: Vec<String> = pts
        .iter()
        .map(|p| format!("n={}: {:.4} ≤ {:.4}", p.n, p.empirical, p.bound))
        .collect();
    Ok(Check::new(ok, detail.join(", ")))
}
