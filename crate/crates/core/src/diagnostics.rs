//! Computable design quantities: `‖X‖_*`, the compatibility numbers `φ₁`
//! and `φ₂`, joint minimum singular values and beta-min thresholds.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{principal_submatrix, support_count, Combinations};
use crate::rng::stream_rng;

/// Default cap on the number of supports visited by exact enumeration.
pub const DEFAULT_BUDGET: f64 = 1e6;

/// Largest support size for which `φ₁` is computed exactly.
pub const PHI1_EXACT_MAX: usize = 6;

// eigenvalues of a Gram block below this fraction of its trace count as zero
const GRAM_ZERO_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    RandomizedLowerBound,
}

/// How supports are visited when exact enumeration would exceed `budget`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnumerationOptions {
    pub budget: f64,
    /// `(samples per size, seed)`; `None` turns an over-budget request into an error.
    pub randomized: Option<(usize, u64)>,
}

impl Default for EnumerationOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            randomized: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub method: Method,
}

pub fn x_norm_star(x: &DMatrix<f64>) -> f64 {
    x.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * x
}

/// Smallest singular value of the columns behind a Gram block.
fn sigma_min_from_gram(g: &DMatrix<f64>) -> f64 {
    if g.nrows() == 0 {
        return f64::INFINITY;
    }
    let lam = g.clone().symmetric_eigenvalues().min();
    if lam <= GRAM_ZERO_TOL * g.trace().max(f64::MIN_POSITIVE) {
        0.0
    } else {
        lam.sqrt()
    }
}

/// Supports of size exactly `k`, either all of them or a random sample.
fn supports_of_size(p: usize, k: usize, opts: &EnumerationOptions, count_total: f64, stream: u64) -> Result<(Vec<Vec<usize>>, Method)> {
    let exact = support_count_exact(p, k);
    if count_total <= opts.budget {
        return Ok((Combinations::new(p, k).collect(), Method::Exact));
    }
    match opts.randomized {
        None => Err(Error::Budget {
            needed: count_total,
            budget: opts.budget,
        }),
        Some((samples, _)) if samples as f64 >= exact => Ok((Combinations::new(p, k).collect(), Method::Exact)),
        Some((samples, seed)) => {
            let mut rng = stream_rng(seed, stream);
            let sets = (0..samples)
                .map(|_| {
                    let mut s = sample(&mut rng, p, k).into_vec();
                    s.sort_unstable();
                    s
                })
                .collect();
            Ok((sets, Method::RandomizedLowerBound))
        }
    }
}

fn support_count_exact(p: usize, k: usize) -> f64 {
    support_count(p, k) - if k == 0 { 0.0 } else { support_count(p, k - 1) }
}

fn combine_methods(a: Method, b: Method) -> Method {
    if a == Method::Exact && b == Method::Exact {
        Method::Exact
    } else {
        Method::RandomizedLowerBound
    }
}

/// `φ₂(s) = min_{|S|≤s} σ_min(X_S)/‖X‖_*`.
///
/// By eigenvalue interlacing only supports of size `min(s, p)` need visiting.
/// Sizes below one give 1.
pub fn phi2(x: &DMatrix<f64>, s: usize, opts: &EnumerationOptions) -> Result<Estimate> {
    phi2_with_gram(&gram(x), x_norm_star(x), s, opts)
}

fn phi2_with_gram(g: &DMatrix<f64>, norm: f64, s: usize, opts: &EnumerationOptions) -> Result<Estimate> {
    if s == 0 {
        return Ok(Estimate {
            value: 1.0,
            method: Method::Exact,
        });
    }
    let p = g.nrows();
    let k = s.min(p);
    if norm == 0.0 {
        return Ok(Estimate {
            value: 0.0,
            method: Method::Exact,
        });
    }
    let (sets, method) = supports_of_size(p, k, opts, support_count_exact(p, k), 2)?;
    let min = sets
        .par_iter()
        .map(|set| sigma_min_from_gram(&principal_submatrix(g, set)))
        .reduce(|| f64::INFINITY, f64::min);
    Ok(Estimate {
        value: min / norm,
        method,
    })
}

/// `min_{‖u‖₁=1, supp u ⊆ T} ‖X_T u‖²` restricted to points whose support is
/// all of `T`: the minimum of `uᵀGu` on `σᵀu = 1` over sign patterns `σ`
/// whose minimizer `G⁻¹σ/(σᵀG⁻¹σ)` keeps the signs `σ`. `None` when no
/// pattern qualifies; `Some(0)` when `X_T` has deficient rank.
fn l1_face_minimum(g: &DMatrix<f64>) -> Option<f64> {
    let k = g.nrows();
    if sigma_min_from_gram(g) == 0.0 {
        return Some(0.0);
    }
    let chol = g.clone().cholesky()?;
    let mut best: Option<f64> = None;
    // σ and −σ give the same value; fix the first sign
    for mask in 0..(1u32 << (k - 1)) {
        let sigma = nalgebra::DVector::from_fn(k, |j, _| if j > 0 && mask >> (j - 1) & 1 == 1 { -1.0 } else { 1.0 });
        let u = chol.solve(&sigma);
        if u.iter().zip(sigma.iter()).all(|(a, b)| a * b > 0.0) {
            let val = 1.0 / sigma.dot(&u);
            best = Some(best.map_or(val, |b: f64| b.min(val)));
        }
    }
    best
}

/// `φ₁(s) = min_{|S|≤s} √|S| min_{‖u‖₁=1, supp u ⊆ S} ‖X_S u‖₂ / ‖X‖_*`.
///
/// The inner problem is split by orthant: every point of the ℓ₁ sphere lies in
/// the relative interior of a face indexed by a support `T` and a sign
/// pattern, and the best `S ⊇ T` is `T` itself.
pub fn phi1(x: &DMatrix<f64>, s: usize, opts: &EnumerationOptions) -> Result<Estimate> {
    phi1_with_gram(&gram(x), x_norm_star(x), s, opts)
}

fn phi1_with_gram(g: &DMatrix<f64>, norm: f64, s: usize, opts: &EnumerationOptions) -> Result<Estimate> {
    if s == 0 {
        return Ok(Estimate {
            value: 1.0,
            method: Method::Exact,
        });
    }
    let p = g.nrows();
    let s = s.min(p);
    if norm == 0.0 {
        return Ok(Estimate {
            value: 0.0,
            method: Method::Exact,
        });
    }
    let total = support_count(p, s) - 1.0;
    let mut strict = *opts;
    if s > PHI1_EXACT_MAX {
        strict.budget = -1.0;
    }
    let mut method = Method::Exact;
    let mut best = f64::INFINITY;
    for k in 1..=s {
        let (sets, m) = supports_of_size(p, k, &strict, total, 10 + k as u64)?;
        method = combine_methods(method, m);
        let local = sets
            .par_iter()
            .filter_map(|set| l1_face_minimum(&principal_submatrix(g, set)).map(|v| set.len() as f64 * v))
            .reduce(|| f64::INFINITY, f64::min);
        best = best.min(local);
        if best == 0.0 {
            break;
        }
    }
    Ok(Estimate {
        value: best.sqrt() / norm,
        method,
    })
}

/// `min_{|S|≤s} σ_min([X_S, Z])`, unscaled.
pub fn joint_min_singular(x: &DMatrix<f64>, z: Option<&DMatrix<f64>>, s: usize, opts: &EnumerationOptions) -> Result<Estimate> {
    let p = x.ncols();
    let q = z.map_or(0, |z| z.ncols());
    let full = match z {
        Some(z) if q > 0 => {
            if z.nrows() != x.nrows() {
                return Err(Error::Shape(format!("Z has {} rows, X has {}", z.nrows(), x.nrows())));
            }
            let mut m = DMatrix::zeros(x.nrows(), p + q);
            m.columns_mut(0, p).copy_from(x);
            m.columns_mut(p, q).copy_from(z);
            m
        }
        _ => x.clone(),
    };
    let k = s.min(p);
    let (sets, method) = supports_of_size(p, k, opts, support_count_exact(p, k), 3)?;
    let min = sets
        .par_iter()
        .map(|set| {
            let cols: Vec<usize> = set.iter().copied().chain(p..p + q).collect();
            let block = DMatrix::from_fn(full.nrows(), cols.len(), |r, c| full[(r, cols[c])]);
            if cols.is_empty() {
                return f64::INFINITY;
            }
            if cols.len() > block.nrows() {
                return 0.0;
            }
            let sv = block.singular_values();
            let (lo, hi) = (sv.min(), sv.max());
            if lo <= 1e-13 * hi.max(f64::MIN_POSITIVE) {
                0.0
            } else {
                lo
            }
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(Estimate { value: min, method })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaMin {
    pub value: f64,
    /// Set when `φ₂` vanished and the threshold is `+∞`.
    pub infinite: bool,
    pub method: Method,
}

/// `K₅√(s₀ log p) / (φ₂((K₄+1)s₀)‖X‖_*)`; the constants are only defined up
/// to unspecified factors, so `K₄ = K₅ = 1` are conventional defaults.
pub fn beta_min_threshold(x: &DMatrix<f64>, s0: usize, k4: f64, k5: f64, opts: &EnumerationOptions) -> Result<BetaMin> {
    if k4 < 0.0 || k5 <= 0.0 || !k4.is_finite() || !k5.is_finite() {
        return Err(Error::ParamRange(format!("K4 = {k4}, K5 = {k5}")));
    }
    let size = ((k4 + 1.0) * s0 as f64).floor() as usize;
    let phi = phi2(x, size, opts)?;
    let norm = x_norm_star(x);
    let p = x.ncols() as f64;
    if phi.value == 0.0 || norm == 0.0 {
        return Ok(BetaMin {
            value: f64::INFINITY,
            infinite: true,
            method: phi.method,
        });
    }
    Ok(BetaMin {
        value: k5 * (s0 as f64 * p.ln()).sqrt() / (phi.value * norm),
        infinite: false,
        method: phi.method,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub x_norm_star: f64,
    pub phi1: BTreeMap<usize, f64>,
    pub phi2: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_sv: Option<BTreeMap<usize, f64>>,
    /// `None` both when not requested and when infinite; see `beta_min_infinite`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_min_threshold: Option<f64>,
    #[serde(default)]
    pub beta_min_infinite: bool,
    pub phi1_method: BTreeMap<usize, Method>,
    pub phi2_method: BTreeMap<usize, Method>,
}

#[derive(Clone, Debug)]
pub struct DiagnoseRequest<'a> {
    pub s_max: usize,
    pub z: Option<&'a DMatrix<f64>>,
    pub beta_min: Option<(usize, f64, f64)>,
    pub options: EnumerationOptions,
}

/// Full report for sizes `1..=s_max`. Reported values are running minima in
/// `s` so randomized estimates stay monotone, and `φ₁ ≥ φ₂` is checked.
pub fn diagnose(x: &DMatrix<f64>, req: &DiagnoseRequest) -> Result<DiagnosticsReport> {
    let g = gram(x);
    let norm = x_norm_star(x);
    let mut report = DiagnosticsReport {
        x_norm_star: norm,
        phi1: BTreeMap::new(),
        phi2: BTreeMap::new(),
        joint_sv: None,
        beta_min_threshold: None,
        beta_min_infinite: false,
        phi1_method: BTreeMap::new(),
        phi2_method: BTreeMap::new(),
    };
    let (mut run1, mut run2) = (f64::INFINITY, f64::INFINITY);
    for s in 1..=req.s_max {
        let e2 = phi2_with_gram(&g, norm, s, &req.options)?;
        let e1 = phi1_with_gram(&g, norm, s, &req.options)?;
        run1 = run1.min(e1.value);
        run2 = run2.min(e2.value);
        if run1 < run2 * (1.0 - 1e-9) {
            return Err(Error::Singular(format!("phi1({s}) = {run1} below phi2({s}) = {run2}")));
        }
        report.phi1.insert(s, run1.max(run2));
        report.phi2.insert(s, run2);
        report.phi1_method.insert(s, e1.method);
        report.phi2_method.insert(s, e2.method);
    }
    if let Some(z) = req.z {
        let mut map = BTreeMap::new();
        for s in 1..=req.s_max {
            map.insert(s, joint_min_singular(x, Some(z), s, &req.options)?.value);
        }
        report.joint_sv = Some(map);
    }
    if let Some((s0, k4, k5)) = req.beta_min {
        let b = beta_min_threshold(x, s0, k4, k5, &req.options)?;
        report.beta_min_infinite = b.infinite;
        report.beta_min_threshold = (!b.infinite).then_some(b.value);
    }
    Ok(report)
}
