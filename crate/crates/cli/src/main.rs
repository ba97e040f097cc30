use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sparsebayes::bvm::{build_bvm, credible_intervals, tv_support_mixture, BvmMode};
use sparsebayes::diagnostics::{diagnose, DiagnoseRequest, EnumerationOptions};
use sparsebayes::harness::{
    self, draw_truth, fit_posterior, prior_for, replicate_seed, run_experiment, working_eta, ExperimentConfig,
    ResultsTable,
};
use sparsebayes::model::whiten;
use sparsebayes::verify::{format_table, run_suite, Suite};
use sparsebayes::{Error, GroupedDataset, Result, SparseVector};

#[derive(Parser)]
#[command(name = "sparsebayes", version, about = "Sparse Bayesian regression with nuisance parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and print its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Results directory; an interrupted run in it is resumed.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate the datasets of an experiment.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Posterior for one dataset, or for every dataset of a `simulate` directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the configuration saved by `simulate`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON-lines output; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the Gaussian-mixture approximation and compare it with the posterior.
    Bvm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compatibility numbers and the beta-min threshold of the whitened design.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        s_max: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run acceptance checks and print a pass/fail table.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Summaries, contraction slopes and coverage of a finished results table.
    Report {
        /// Results directory or `results.jsonl` file.
        #[arg(long)]
        out: PathBuf,
        /// Credible level; defaults to the saved configuration's.
        #[arg(long)]
        level: Option<f64>,
    },
}

/// One generated dataset.
#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    grid: usize,
    replicate: usize,
    n: usize,
    p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    j: Option<usize>,
    seed: u64,
    file: String,
    theta0: SparseVector,
}

const MANIFEST: &str = "manifest.json";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Datasets with their generating entry, from a `simulate` directory or a
/// single dataset file.
fn datasets(path: &Path) -> Result<Vec<(Option<ManifestEntry>, GroupedDataset)>> {
    if path.is_dir() {
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(path.join(MANIFEST))?)?;
        manifest
            .into_iter()
            .map(|e| {
                let data = GroupedDataset::load(&path.join(&e.file))?;
                Ok((Some(e), data))
            })
            .collect()
    } else {
        Ok(vec![(None, GroupedDataset::load(path)?)])
    }
}

fn config_for(data: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    match config {
        Some(c) => load_config(c, seed),
        None if data.is_dir() => load_config(&data.join("config.toml"), seed),
        None => Err(Error::Config("--config is required for a single dataset file".into())),
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            workers,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if workers.is_some() {
                cfg.workers = workers;
            }
            let out = out.or_else(|| cfg.output.clone());
            let table = run_experiment(&cfg, out.as_deref())?;
            let level = cfg.bvm.as_ref().map_or(0.95, |b| b.level);
            print!("{}", harness::report(&table, level)?);
            if let Some(np) = cfg.np.as_ref().map(|_| harness::np_error_curve(&cfg)).transpose()? {
                for pt in np {
                    println!(
                        "type-I error (n = {}): {:.5} ± {:.5}, bound {:.5}",
                        pt.n, pt.empirical, pt.se, pt.bound
                    );
                }
            }
            eprintln!("{} records, {} failed", table.len(), table.failures());
        }
        Command::Simulate { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            fs::create_dir_all(out.join("data"))?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let mut manifest = Vec::new();
            for (g, point) in cfg.grid_points().into_iter().enumerate() {
                for r in 0..cfg.replicates {
                    let s = replicate_seed(cfg.seed, g, r);
                    let (data, theta0, _) = draw_truth(&cfg, point, s)?;
                    let file = format!("data/g{g:03}_r{r:04}.json");
                    data.save(&out.join(&file))?;
                    manifest.push(ManifestEntry {
                        grid: g,
                        replicate: r,
                        n: point.n,
                        p: point.p,
                        j: point.j,
                        seed: s,
                        file,
                        theta0,
                    });
                }
            }
            fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
            eprintln!("{} datasets written to {}", manifest.len(), out.display());
        }
        Command::Fit {
            data,
            config,
            out,
            seed,
        } => {
            let cfg = config_for(&data, config.as_deref(), seed)?;
            let mut lines = Vec::new();
            for (entry, ds) in datasets(&data)? {
                let j = entry.as_ref().and_then(|e| e.j);
                let s = entry.as_ref().map_or(cfg.seed, |e| e.seed);
                let eta = working_eta(&cfg.family, &ds, j)?;
                let spec = prior_for(&cfg, &ds)?;
                let fit = fit_posterior(&cfg, &ds, &spec, &eta, s)?;
                let post = fit
                    .posterior
                    .ok_or_else(|| Error::Config("fit needs an enumeration or rjmcmc engine".into()))?;
                let mut top: Vec<_> = post.entries.iter().map(|e| (e.support.clone(), e.weight())).collect();
                top.sort_by(|a, b| b.1.total_cmp(&a.1));
                top.truncate(10);
                lines.push(serde_json::to_string(&serde_json::json!({
                    "file": entry.as_ref().map(|e| e.file.clone()),
                    "lambda": spec.lambda,
                    "modal_support": post.modal().support,
                    "inclusion_probs": post.inclusion_probs,
                    "posterior_mean": post.posterior_mean().map(|m| m.iter().copied().collect::<Vec<f64>>()),
                    "top_supports": top,
                    "eta_hat": fit.eta_hat,
                    "flags": post.flags,
                }))?);
            }
            emit(out.as_deref(), &lines)?;
        }
        Command::Bvm {
            data,
            config,
            out,
            seed,
        } => {
            let cfg = config_for(&data, config.as_deref(), seed)?;
            let b = cfg.bvm.clone().unwrap_or_default();
            let mut lines = Vec::new();
            for (entry, ds) in datasets(&data)? {
                let j = entry.as_ref().and_then(|e| e.j);
                let s = entry.as_ref().map_or(cfg.seed, |e| e.seed);
                let eta = working_eta(&cfg.family, &ds, j)?;
                let spec = prior_for(&cfg, &ds)?;
                let fit = fit_posterior(&cfg, &ds, &spec, &eta, s)?;
                let (theta0, eta0) = match (b.mode, &entry) {
                    (BvmMode::Oracle, Some(e)) => (e.theta0.clone(), cfg.family.clone()),
                    (BvmMode::Oracle, None) => {
                        return Err(Error::Config("oracle mode needs the truth; pass a simulate directory".into()))
                    }
                    (BvmMode::PlugIn, _) => {
                        let post = fit
                            .posterior
                            .as_ref()
                            .ok_or_else(|| Error::Config("plug-in mode needs a posterior engine".into()))?;
                        (harness::plug_in_theta(post)?, fit.eta_hat.clone().unwrap_or(eta))
                    }
                };
                let s_max = b.s_max.unwrap_or(theta0.support().len().max(1));
                let mix = build_bvm(&ds, &theta0, &eta0, &spec, &b.h, s_max, b.mode)?;
                let tv = fit.posterior.as_ref().map(|p| tv_support_mixture(p, &mix)).transpose()?;
                let target = if theta0.support().is_empty() {
                    mix.modal().support.clone()
                } else {
                    theta0.support().to_vec()
                };
                let intervals = credible_intervals(&mix, &target, b.level).ok();
                let mut comps: Vec<_> = mix.components.iter().map(|c| (c.support.clone(), c.weight())).collect();
                comps.sort_by(|a, b| b.1.total_cmp(&a.1));
                comps.truncate(10);
                lines.push(serde_json::to_string(&serde_json::json!({
                    "file": entry.as_ref().map(|e| e.file.clone()),
                    "mode": mix.mode,
                    "h_rank": mix.h_rank,
                    "top_components": comps,
                    "tv": tv,
                    "intervals": intervals,
                    "flags": mix.flags,
                }))?);
            }
            emit(out.as_deref(), &lines)?;
        }
        Command::Diagnose {
            data,
            config,
            s_max,
            out,
        } => {
            let cfg = match config_for(&data, config.as_deref(), None) {
                Ok(c) => Some(c),
                Err(_) if config.is_none() => None,
                Err(e) => return Err(e),
            };
            let mut lines = Vec::new();
            for (entry, ds) in datasets(&data)? {
                let x = match &cfg {
                    Some(c) => whiten(&ds, &c.family)?.x_tilde,
                    None => ds.stacked_x(),
                };
                let s0 = entry.as_ref().map(|e| e.theta0.support().len()).filter(|&s| s > 0);
                let req = DiagnoseRequest {
                    s_max: s_max.min(ds.p()),
                    z: None,
                    beta_min: s0.map(|s| (s, 0.0, 1.0)),
                    options: EnumerationOptions {
                        randomized: Some((20_000, 1)),
                        ..Default::default()
                    },
                };
                let report = diagnose(&x, &req)?;
                lines.push(serde_json::to_string(&serde_json::json!({
                    "file": entry.as_ref().map(|e| e.file.clone()),
                    "report": report,
                }))?);
            }
            emit(out.as_deref(), &lines)?;
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let reports = run_suite(suite);
            print!("{}", format_table(&reports));
            if reports.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { out, level } => {
            let table = ResultsTable::load(&out)?;
            let saved = if out.is_dir() && out.join("config.toml").exists() {
                ExperimentConfig::load(&out.join("config.toml"))?.bvm.map(|b| b.level)
            } else {
                None
            };
            print!("{}", harness::report(&table, level.or(saved).unwrap_or(0.95))?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
