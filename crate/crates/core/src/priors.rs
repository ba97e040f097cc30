//! Spike-and-slab prior on `(S, θ_S)` and the nuisance priors of each family.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp, Gamma, InverseGaussian};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{ln_binomial, log_sum_exp, SpdFactor, LN_2PI};
use crate::model::SparseVector;
use crate::rng::{normal_vector, std_normal};
use crate::zoo::{
    edges, in_m0_plus, CorrelationKind, CorrelationParams, FamilySpec, GraphicalParams, HeteroParams, LinearParams,
    MemParams, MissingParams, MixedParams, PartialLinearParams,
};

fn default_decay() -> f64 {
    2.0
}

fn one() -> f64 {
    1.0
}

/// Dimension prior `π_p(s) ∝ p^{−a s}` and Laplace slab with rate `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSlabSpec {
    pub p: usize,
    #[serde(default = "default_decay")]
    pub dim_decay: f64,
    pub lambda: f64,
    #[serde(default = "one")]
    pub l1: f64,
    #[serde(default = "one")]
    pub l2: f64,
    #[serde(default = "one")]
    pub l3: f64,
}

impl SpikeSlabSpec {
    pub fn new(p: usize, dim_decay: f64, lambda: f64) -> Result<Self> {
        let spec = Self {
            p,
            dim_decay,
            lambda,
            l1: 1.0,
            l2: 1.0,
            l3: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default prior for a design: `a = 2` and `λ = ‖X‖_*/√n`.
    pub fn for_design(p: usize, x_norm_star: f64, n: usize) -> Result<Self> {
        Self::new(p, default_decay(), x_norm_star / (n as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::ParamRange("p must be positive".into()));
        }
        if !(self.dim_decay.is_finite() && self.dim_decay >= 0.0) {
            return Err(Error::ParamRange(format!("dimension decay {} must be nonnegative", self.dim_decay)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::ParamRange(format!("slab rate {} must be positive", self.lambda)));
        }
        for (name, v) in [("L1", self.l1), ("L2", self.l2), ("L3", self.l3)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ParamRange(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Errors unless `λ` lies in the admissible range for the design.
    pub fn check_lambda(&self, x_norm_star: f64, n: usize) -> Result<()> {
        let (lo, hi) = lambda_bounds(x_norm_star, self.p, n, self.l1, self.l2, self.l3)?;
        if self.lambda < lo * (1.0 - 1e-12) || self.lambda > hi * (1.0 + 1e-12) {
            return Err(Error::ParamRange(format!(
                "slab rate {} outside [{lo}, {hi}]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `log π_p(s)`, normalized over `0..=p`.
pub fn dimension_log_prior(s: usize, spec: &SpikeSlabSpec) -> Result<f64> {
    if s > spec.p {
        return Err(Error::ParamRange(format!("support size {s} exceeds p = {}", spec.p)));
    }
    let log_r = -spec.dim_decay * (spec.p as f64).ln();
    Ok(s as f64 * log_r - log_geometric_sum(log_r, spec.p + 1))
}

/// `log Σ_{k<terms} r^k` for `r = exp(log_r) ≤ 1`.
fn log_geometric_sum(log_r: f64, terms: usize) -> f64 {
    if log_r == 0.0 {
        return (terms as f64).ln();
    }
    // (1 − r^terms)/(1 − r)
    (-(terms as f64 * log_r).exp_m1()).ln() - (-log_r.exp_m1()).ln()
}

/// `Σ_j [log(λ/2) − λ|θ_j|]`.
pub fn slab_log_density(theta_s: &[f64], lambda: f64) -> f64 {
    let c = (0.5 * lambda).ln();
    theta_s.iter().map(|t| c - lambda * t.abs()).sum()
}

/// `(‖X‖_*/(L₁p^{L₂}), L₃‖X‖_*/√n)`.
pub fn lambda_bounds(x_norm_star: f64, p: usize, n: usize, l1: f64, l2: f64, l3: f64) -> Result<(f64, f64)> {
    let lo = x_norm_star / (l1 * (p as f64).powf(l2));
    let hi = l3 * x_norm_star / (n as f64).sqrt();
    if lo > hi {
        return Err(Error::ParamRange(format!("empty slab-rate range: lower {lo} exceeds upper {hi}")));
    }
    Ok((lo, hi))
}

/// `log π_p(s) − log C(p, s) + log g_S(θ_S)`.
pub fn joint_log_prior(theta: &SparseVector, spec: &SpikeSlabSpec) -> Result<f64> {
    if theta.p() != spec.p {
        return Err(Error::Shape(format!("θ has dimension {}, prior has p = {}", theta.p(), spec.p)));
    }
    let s = theta.len();
    Ok(dimension_log_prior(s, spec)? - ln_binomial(spec.p, s) + slab_log_density(theta.values(), spec.lambda))
}

/// A log density value together with a support indicator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    pub in_support: bool,
}

impl LogDensity {
    pub fn inside(value: f64) -> Self {
        Self {
            value,
            in_support: true,
        }
    }

    pub fn outside() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            in_support: false,
        }
    }
}

/// Boundary-avoiding prior `∝ exp{−(α−b₁)^{−c₁}(b₂−α)^{−c₂}}` on `(b₁, b₂)`.
#[derive(Clone, Debug)]
pub struct AlphaPrior {
    pub b1: f64,
    pub b2: f64,
    pub c1: f64,
    pub c2: f64,
    grid: Vec<f64>,
    cdf: Vec<f64>,
    log_norm: f64,
}

pub const ALPHA_GRID: usize = 10_000;

impl AlphaPrior {
    pub fn new(b1: f64, b2: f64, c1: f64, c2: f64) -> Result<Self> {
        if !(b1 < b2 && c1 > 0.0 && c2 > 0.0 && b1.is_finite() && b2.is_finite()) {
            return Err(Error::ParamRange(format!(
                "α prior needs b1 < b2 and positive exponents, got ({b1}, {b2}, {c1}, {c2})"
            )));
        }
        let h = (b2 - b1) / ALPHA_GRID as f64;
        let grid: Vec<f64> = (0..=ALPHA_GRID).map(|k| b1 + h * k as f64).collect();
        let dens: Vec<f64> = grid
            .iter()
            .map(|&a| {
                let v = unnormalized(a, b1, b2, c1, c2);
                if v.is_finite() {
                    v.exp()
                } else {
                    0.0
                }
            })
            .collect();
        let mut cdf = vec![0.0; grid.len()];
        for k in 1..grid.len() {
            cdf[k] = cdf[k - 1] + 0.5 * h * (dens[k - 1] + dens[k]);
        }
        let total = *cdf.last().unwrap();
        if !(total > 0.0) {
            return Err(Error::NonFinite("α prior normalizer underflows".into()));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(Self {
            b1,
            b2,
            c1,
            c2,
            grid,
            cdf,
            log_norm: total.ln(),
        })
    }

    /// Prior on the admissible interval of a correlation kind.
    pub fn for_kind(kind: CorrelationKind, c1: f64, c2: f64) -> Result<Self> {
        let (b1, b2) = kind.interval();
        Self::new(b1, b2, c1, c2)
    }

    /// `log` of the numerically computed normalizing constant.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    pub fn unnormalized_log_density(&self, alpha: f64) -> LogDensity {
        if alpha > self.b1 && alpha < self.b2 {
            LogDensity::inside(unnormalized(alpha, self.b1, self.b2, self.c1, self.c2))
        } else {
            LogDensity::outside()
        }
    }

    pub fn log_density(&self, alpha: f64) -> LogDensity {
        let mut d = self.unnormalized_log_density(alpha);
        if d.in_support {
            d.value -= self.log_norm;
        }
        d
    }

    pub fn cdf(&self, alpha: f64) -> f64 {
        if alpha <= self.b1 {
            return 0.0;
        }
        if alpha >= self.b2 {
            return 1.0;
        }
        let h = (self.b2 - self.b1) / ALPHA_GRID as f64;
        let k = (((alpha - self.b1) / h) as usize).min(ALPHA_GRID - 1);
        let w = (alpha - self.grid[k]) / h;
        self.cdf[k] + w * (self.cdf[k + 1] - self.cdf[k])
    }

    /// Inverse-CDF draw on the cached grid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, ALPHA_GRID);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        let a = self.grid[k - 1] + w * (self.grid[k] - self.grid[k - 1]);
        a.clamp(self.b1 + f64::EPSILON * (self.b2 - self.b1), self.b2 - f64::EPSILON * (self.b2 - self.b1))
    }
}

fn unnormalized(alpha: f64, b1: f64, b2: f64, c1: f64, c2: f64) -> f64 {
    if !(alpha > b1 && alpha < b2) {
        return f64::NEG_INFINITY;
    }
    -((alpha - b1).powf(-c1) * (b2 - alpha).powf(-c2))
}

/// Unnormalized `log` of the α prior, with support flag.
pub fn alpha_prior_log_density(alpha: f64, b1: f64, b2: f64, c1: f64, c2: f64) -> LogDensity {
    let v = unnormalized(alpha, b1, b2, c1, c2);
    if v == f64::NEG_INFINITY {
        LogDensity::outside()
    } else {
        LogDensity::inside(v)
    }
}

fn two() -> f64 {
    2.0
}

fn three() -> f64 {
    3.0
}

fn ten() -> f64 {
    10.0
}

fn edge_default() -> f64 {
    0.3
}

/// Hyperparameters of every nuisance prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisancePriorSpec {
    /// Inverse-gamma shape for variances.
    #[serde(default = "two")]
    pub ig_shape: f64,
    #[serde(default = "one")]
    pub ig_rate: f64,
    /// Inverse-Wishart degrees of freedom in excess of the dimension.
    #[serde(default = "three")]
    pub iw_df_extra: f64,
    /// Inverse-Wishart scale is this multiple of the identity.
    #[serde(default = "two")]
    pub iw_scale: f64,
    /// Variance of the normal priors on location parameters.
    #[serde(default = "ten")]
    pub location_var: f64,
    #[serde(default = "one")]
    pub alpha_c1: f64,
    #[serde(default = "one")]
    pub alpha_c2: f64,
    #[serde(default = "one")]
    pub invgauss_mean: f64,
    #[serde(default = "one")]
    pub invgauss_shape: f64,
    /// Edge-inclusion probability `ϖ`.
    #[serde(default = "edge_default")]
    pub edge_prob: f64,
    /// Laplace rate of the off-diagonal precision entries.
    #[serde(default = "one")]
    pub offdiag_rate: f64,
    /// Exponential rate of the diagonal precision entries.
    #[serde(default = "one")]
    pub diag_rate: f64,
    /// Standard deviation of the mean-spline coefficients.
    #[serde(default = "one")]
    pub spline_sd: f64,
}

impl Default for NuisancePriorSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl NuisancePriorSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ig_shape,
            self.ig_rate,
            self.iw_df_extra,
            self.iw_scale,
            self.location_var,
            self.alpha_c1,
            self.alpha_c2,
            self.invgauss_mean,
            self.invgauss_shape,
            self.offdiag_rate,
            self.diag_rate,
            self.spline_sd,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::ParamRange("nuisance hyperparameters must be positive".into()));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob < 1.0) {
            return Err(Error::ParamRange("edge probability must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn iw_df(&self, dim: usize) -> f64 {
        dim as f64 + self.iw_df_extra
    }

    pub fn iw_scale_matrix(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::identity(dim, dim) * self.iw_scale
    }

    pub fn alpha_prior(&self, kind: CorrelationKind) -> Result<AlphaPrior> {
        AlphaPrior::for_kind(kind, self.alpha_c1, self.alpha_c2)
    }
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

pub fn inv_gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

pub fn inv_gaussian_log_pdf(x: f64, mean: f64, shape: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    0.5 * (shape / (LN_2PI.exp() * x * x * x)).ln() - shape * (x - mean) * (x - mean) / (2.0 * mean * mean * x)
}

/// `log Γ_q(a)`.
pub fn ln_multigamma(q: usize, a: f64) -> f64 {
    let qf = q as f64;
    qf * (qf - 1.0) / 4.0 * std::f64::consts::PI.ln() + (1..=q).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Inverse-Wishart `IW(ν, Ψ)` log density; `−∞` off the SPD cone.
pub fn inv_wishart_log_pdf(sigma: &DMatrix<f64>, df: f64, scale: &DMatrix<f64>) -> LogDensity {
    let q = sigma.nrows();
    let Ok(fs) = SpdFactor::new(sigma.clone()) else {
        return LogDensity::outside();
    };
    let Ok(fscale) = SpdFactor::new(scale.clone()) else {
        return LogDensity::outside();
    };
    let qf = q as f64;
    let trace = (scale * fs.inverse()).trace();
    LogDensity::inside(
        0.5 * df * fscale.log_det()
            - 0.5 * df * qf * std::f64::consts::LN_2
            - ln_multigamma(q, 0.5 * df)
            - 0.5 * (df + qf + 1.0) * fs.log_det()
            - 0.5 * trace,
    )
}

/// Draw from `IW(ν, Ψ)` by inverting a Bartlett-decomposed Wishart draw.
pub fn inv_wishart_sample<R: Rng + ?Sized>(rng: &mut R, df: f64, scale: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = scale.nrows();
    if df <= q as f64 - 1.0 {
        return Err(Error::ParamRange(format!("inverse-Wishart df {df} too small for dimension {q}")));
    }
    let precision_scale = SpdFactor::new(scale.clone())?.inverse();
    let l = precision_scale
        .cholesky()
        .ok_or_else(|| Error::Singular("inverse-Wishart scale".into()))?
        .l();
    let mut a = DMatrix::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::ParamRange(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let la = &l * a;
    let wishart = &la * la.transpose();
    let inv = wishart
        .try_inverse()
        .ok_or_else(|| Error::Singular("Wishart draw".into()))?;
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `log Π(|Υ| = r) ∝ −r log max(r, 2)`, normalized over `0..=max`.
pub fn edge_count_log_prior(r: usize, max: usize) -> f64 {
    let un = |k: usize| -(k as f64) * (k.max(2) as f64).ln();
    let all: Vec<f64> = (0..=max).map(un).collect();
    un(r) - log_sum_exp(&all)
}

/// `log Π(Υ)` for an edge set of size `r` out of `C(m̄, 2)` possible edges.
pub fn edge_set_log_prior(r: usize, mbar: usize, edge_prob: f64) -> f64 {
    let total = mbar * mbar.saturating_sub(1) / 2;
    let term = |k: usize| k as f64 * edge_prob.ln() + (total - k) as f64 * (1.0 - edge_prob).ln() + edge_count_log_prior(k, total);
    let norm: Vec<f64> = (0..=total).map(|k| ln_binomial(total, k) + term(k)).collect();
    term(r) - log_sum_exp(&norm)
}

/// Family-dispatched nuisance prior; the truncated graphical prior is
/// unnormalized with respect to the truncation.
pub fn nuisance_prior_log_density(eta: &FamilySpec, spec: &NuisancePriorSpec) -> Result<LogDensity> {
    spec.validate()?;
    let ig = |s2: f64| inv_gamma_log_pdf(s2, spec.ig_shape, spec.ig_rate);
    let finish = |v: f64| {
        if v.is_finite() {
            LogDensity::inside(v)
        } else {
            LogDensity::outside()
        }
    };
    Ok(match eta {
        FamilySpec::Linear(p) => finish(ig(p.sigma2)),
        FamilySpec::MissingResponse(p) => {
            let q = p.sigma.nrows();
            inv_wishart_log_pdf(&p.sigma, spec.iw_df(q), &spec.iw_scale_matrix(q))
        }
        FamilySpec::MeasurementError(p) => {
            let q = p.q();
            let iw = inv_wishart_log_pdf(&p.sigma, spec.iw_df(q), &spec.iw_scale_matrix(q));
            if !iw.in_support {
                return Ok(iw);
            }
            let loc: f64 = std::iter::once(p.alpha)
                .chain(p.beta.iter().copied())
                .chain(p.mu.iter().copied())
                .map(|v| normal_log_pdf(v, 0.0, spec.location_var))
                .sum();
            finish(iw.value + loc + ig(p.sigma2))
        }
        FamilySpec::ParamCorrelation(p) => {
            let a = spec.alpha_prior(p.kind)?.log_density(p.alpha);
            if !a.in_support {
                return Ok(a);
            }
            finish(a.value + ig(p.sigma2))
        }
        FamilySpec::MixedEffects(p) => {
            let q = p.psi.nrows();
            inv_wishart_log_pdf(&p.psi, spec.iw_df(q), &spec.iw_scale_matrix(q))
        }
        FamilySpec::Graphical(p) => graphical_log_prior(p, spec),
        FamilySpec::HeteroSpline(p) => finish(
            p.beta
                .iter()
                .map(|&b| inv_gaussian_log_pdf(b, spec.invgauss_mean, spec.invgauss_shape))
                .sum(),
        ),
        FamilySpec::PartialLinear(p) => {
            let v = spec.spline_sd * spec.spline_sd;
            finish(p.beta.iter().map(|&b| normal_log_pdf(b, 0.0, v)).sum::<f64>() + ig(p.sigma2))
        }
    })
}

fn graphical_log_prior(p: &GraphicalParams, spec: &NuisancePriorSpec) -> LogDensity {
    if !in_m0_plus(&p.omega, p.bound) {
        return LogDensity::outside();
    }
    let m = p.omega.nrows();
    let e = edges(&p.omega);
    let off: f64 = e
        .iter()
        .map(|&(j, k)| (0.5 * spec.offdiag_rate).ln() - spec.offdiag_rate * p.omega[(j, k)].abs())
        .sum();
    let diag: f64 = (0..m)
        .map(|j| spec.diag_rate.ln() - spec.diag_rate * p.omega[(j, j)])
        .sum();
    LogDensity::inside(off + diag + edge_set_log_prior(e.len(), m, spec.edge_prob))
}

const MAX_REJECTIONS: usize = 100_000;

/// Draw `η` from its prior. Shapes and known components (measurement-error
/// `Ψ`, mixed-effects `σ²`, correlation kind, spline basis, graphical bound)
/// are copied from `template`.
pub fn nuisance_prior_sample<R: Rng + ?Sized>(
    template: &FamilySpec,
    spec: &NuisancePriorSpec,
    rng: &mut R,
) -> Result<FamilySpec> {
    spec.validate()?;
    let ig = |rng: &mut R| -> Result<f64> {
        let g = Gamma::new(spec.ig_shape, 1.0 / spec.ig_rate).map_err(|e| Error::ParamRange(e.to_string()))?;
        Ok(1.0 / g.sample(rng))
    };
    Ok(match template {
        FamilySpec::Linear(_) => FamilySpec::Linear(LinearParams { sigma2: ig(rng)? }),
        FamilySpec::MissingResponse(p) => {
            let q = p.sigma.nrows();
            FamilySpec::MissingResponse(MissingParams {
                sigma: inv_wishart_sample(rng, spec.iw_df(q), &spec.iw_scale_matrix(q))?,
            })
        }
        FamilySpec::MeasurementError(p) => {
            let q = p.q();
            let sd = spec.location_var.sqrt();
            FamilySpec::MeasurementError(MemParams {
                alpha: sd * std_normal(rng),
                beta: normal_vector(rng, q) * sd,
                mu: normal_vector(rng, q) * sd,
                sigma2: ig(rng)?,
                sigma: inv_wishart_sample(rng, spec.iw_df(q), &spec.iw_scale_matrix(q))?,
                psi: p.psi.clone(),
            })
        }
        FamilySpec::ParamCorrelation(p) => FamilySpec::ParamCorrelation(CorrelationParams {
            kind: p.kind,
            alpha: spec.alpha_prior(p.kind)?.sample(rng),
            sigma2: ig(rng)?,
        }),
        FamilySpec::MixedEffects(p) => {
            let q = p.psi.nrows();
            FamilySpec::MixedEffects(MixedParams {
                psi: inv_wishart_sample(rng, spec.iw_df(q), &spec.iw_scale_matrix(q))?,
                sigma2: p.sigma2,
            })
        }
        FamilySpec::Graphical(p) => FamilySpec::Graphical(graphical_sample(p, spec, rng)?),
        FamilySpec::HeteroSpline(p) => {
            let ig = InverseGaussian::new(spec.invgauss_mean, spec.invgauss_shape)
                .map_err(|e| Error::ParamRange(e.to_string()))?;
            FamilySpec::HeteroSpline(HeteroParams {
                beta: DVector::from_fn(p.basis.dim(), |_, _| ig.sample(rng)),
                basis: p.basis.clone(),
            })
        }
        FamilySpec::PartialLinear(p) => FamilySpec::PartialLinear(PartialLinearParams {
            beta: normal_vector(rng, p.basis.dim()) * spec.spline_sd,
            sigma2: ig(rng)?,
            basis: p.basis.clone(),
        }),
    })
}

/// Rejection sampler for the truncated graphical prior.
fn graphical_sample<R: Rng + ?Sized>(
    template: &GraphicalParams,
    spec: &NuisancePriorSpec,
    rng: &mut R,
) -> Result<GraphicalParams> {
    let m = template.omega.nrows();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|j| (j + 1..m).map(move |k| (j, k))).collect();
    let total = pairs.len();
    let weights: Vec<f64> = (0..=total)
        .map(|r| ln_binomial(total, r) + edge_set_log_prior(r, m, spec.edge_prob))
        .collect();
    let diag = Exp::new(spec.diag_rate).map_err(|e| Error::ParamRange(e.to_string()))?;
    let off = Exp::new(spec.offdiag_rate).map_err(|e| Error::ParamRange(e.to_string()))?;
    for _ in 0..MAX_REJECTIONS {
        let r = sample_log_weights(&weights, rng);
        let mut chosen = pairs.clone();
        // partial Fisher–Yates for a uniform r-subset
        for i in 0..r {
            let k = rng.random_range(i..total);
            chosen.swap(i, k);
        }
        let mut omega = DMatrix::zeros(m, m);
        for j in 0..m {
            omega[(j, j)] = diag.sample(rng);
        }
        for &(j, k) in &chosen[..r] {
            let mag: f64 = off.sample(rng);
            let v = if rng.random::<bool>() { mag } else { -mag };
            omega[(j, k)] = v;
            omega[(k, j)] = v;
        }
        if in_m0_plus(&omega, template.bound) {
            return Ok(GraphicalParams {
                omega,
                bound: template.bound,
            });
        }
    }
    Err(Error::NonFinite("graphical prior rejection sampler exhausted its budget".into()))
}

/// Index drawn with probabilities `∝ exp(log_w)`.
pub fn sample_log_weights<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}
