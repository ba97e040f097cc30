//! The concrete model families: each maps its nuisance parameters to per-group
//! mean shifts and covariances, validates them and simulates data.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{serde_rows, serde_vec, SpdFactor};
use crate::model::{Group, GroupMeta, GroupedDataset, NuisanceEval, SparseVector};
use crate::rng::{mvn_with_factor, normal_matrix, normal_vector, std_normal, stream_rng};
use crate::splines::{equispaced, SplineBasis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    /// Compound symmetry.
    Cs,
    /// First-order autoregressive.
    Ar,
    /// First-order moving average.
    Ma,
}

impl CorrelationKind {
    /// Open interval of admissible `α`.
    pub fn interval(self) -> (f64, f64) {
        match self {
            CorrelationKind::Cs => (0.0, 1.0),
            CorrelationKind::Ar => (-1.0, 1.0),
            CorrelationKind::Ma => (-0.5, 0.5),
        }
    }

    fn check(self, alpha: f64) -> Result<()> {
        let (lo, hi) = self.interval();
        if alpha.is_finite() && alpha > lo && alpha < hi {
            Ok(())
        } else {
            Err(Error::ParamRange(format!(
                "{self:?} correlation parameter {alpha} outside ({lo}, {hi})"
            )))
        }
    }
}

pub fn correlation_matrix(kind: CorrelationKind, alpha: f64, m: usize) -> Result<DMatrix<f64>> {
    kind.check(alpha)?;
    Ok(DMatrix::from_fn(m, m, |j, k| {
        let d = j.abs_diff(k);
        match (kind, d) {
            (_, 0) => 1.0,
            (CorrelationKind::Cs, _) => alpha,
            (CorrelationKind::Ar, d) => alpha.powi(d as i32),
            (CorrelationKind::Ma, 1) => alpha,
            (CorrelationKind::Ma, _) => 0.0,
        }
    }))
}

/// Interval enclosing the spectrum of `correlation_matrix(kind, alpha, m)`.
pub fn correlation_eigen_bounds(kind: CorrelationKind, alpha: f64, m: usize) -> Result<(f64, f64)> {
    kind.check(alpha)?;
    let a = alpha.abs();
    Ok(match kind {
        CorrelationKind::Cs => (1.0 - alpha, 1.0 + (m as f64 - 1.0) * alpha),
        CorrelationKind::Ar => ((1.0 - a * a) / ((1.0 + a) * (1.0 + a)), (1.0 - a * a) / ((1.0 - a) * (1.0 - a))),
        CorrelationKind::Ma => (1.0 - 2.0 * a, 1.0 + 2.0 * a),
    })
}

/// Principal submatrix `E_iᵀΣE_i` at the observed coordinates.
pub fn missing_covariance(sigma: &DMatrix<f64>, pattern: &[bool]) -> Result<DMatrix<f64>> {
    if pattern.len() != sigma.nrows() || !sigma.is_square() {
        return Err(Error::Shape(format!(
            "pattern of length {} for a {}x{} covariance",
            pattern.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let idx: Vec<usize> = observed(pattern);
    if idx.is_empty() {
        return Err(Error::EmptyGroup(0));
    }
    Ok(DMatrix::from_fn(idx.len(), idx.len(), |a, b| sigma[(idx[a], idx[b])]))
}

fn observed(pattern: &[bool]) -> Vec<usize> {
    pattern.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
}

pub fn mixed_effects_cov(sigma2: f64, z: &DMatrix<f64>, psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.ncols() != psi.nrows() || !psi.is_square() {
        return Err(Error::Shape(format!(
            "random-effect design has {} columns, Ψ is {}x{}",
            z.ncols(),
            psi.nrows(),
            psi.ncols()
        )));
    }
    positive("σ²", sigma2)?;
    let m = z.nrows();
    Ok(DMatrix::identity(m, m) * sigma2 + z * psi * z.transpose())
}

/// `Δ = Ω⁻¹`.
pub fn graphical_delta(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(SpdFactor::new(omega.clone())?.inverse())
}

/// Membership in `M₀⁺(L)`: spectrum inside `[L⁻¹, L]` and every entry at most `L` in absolute value.
pub fn in_m0_plus(omega: &DMatrix<f64>, bound: f64) -> bool {
    if !omega.is_square() || omega.iter().any(|v| !v.is_finite() || v.abs() > bound) {
        return false;
    }
    if (omega - omega.transpose()).amax() > 1e-12 * omega.amax().max(1.0) {
        return false;
    }
    let eig = omega.clone().symmetric_eigenvalues();
    eig.min() >= 1.0 / bound && eig.max() <= bound
}

/// Upper-triangular off-diagonal nonzeros of `Ω`.
pub fn edges(omega: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let m = omega.nrows();
    (0..m)
        .flat_map(|j| (j + 1..m).map(move |k| (j, k)))
        .filter(|&(j, k)| omega[(j, k)] != 0.0)
        .collect()
}

/// Variance function `v_β(z) = βᵀB_J(z)`.
pub fn hetero_variance(beta: &DVector<f64>, basis: &SplineBasis, z: f64) -> Result<f64> {
    basis.combine(beta, z)
}

/// Mean function `g_β(z) = βᵀB_J(z)`.
pub fn partial_linear_mean(beta: &DVector<f64>, basis: &SplineBasis, z: f64) -> Result<f64> {
    basis.combine(beta, z)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::ParamRange(format!("{name} = {v} must be positive")))
    }
}

fn spd(name: &str, m: &DMatrix<f64>) -> Result<SpdFactor> {
    SpdFactor::new(m.clone()).map_err(|e| match e {
        Error::Shape(msg) => Error::Shape(format!("{name}: {msg}")),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingParams {
    #[serde(with = "serde_rows")]
    pub sigma: DMatrix<f64>,
}

/// Regression of `Y*` on `(x*, Z)` where `Z` is observed only through `W = Z + U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemParams {
    pub alpha: f64,
    #[serde(with = "serde_vec")]
    pub beta: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub mu: DVector<f64>,
    pub sigma2: f64,
    #[serde(with = "serde_rows")]
    pub sigma: DMatrix<f64>,
    /// Known covariance of the measurement error `U`.
    #[serde(with = "serde_rows")]
    pub psi: DMatrix<f64>,
}

impl MemParams {
    pub fn q(&self) -> usize {
        self.beta.len()
    }

    pub fn mean_shift(&self) -> DVector<f64> {
        let q = self.q();
        let mut xi = DVector::zeros(q + 1);
        xi[0] = self.alpha + self.mu.dot(&self.beta);
        xi.rows_mut(1, q).copy_from(&self.mu);
        xi
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let q = self.q();
        let sb = &self.sigma * &self.beta;
        let mut d = DMatrix::zeros(q + 1, q + 1);
        d[(0, 0)] = self.beta.dot(&sb) + self.sigma2;
        for j in 0..q {
            d[(0, j + 1)] = sb[j];
            d[(j + 1, 0)] = sb[j];
        }
        d.view_mut((1, 1), (q, q)).copy_from(&(&self.sigma + &self.psi));
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationParams {
    pub kind: CorrelationKind,
    pub alpha: f64,
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedParams {
    #[serde(with = "serde_rows")]
    pub psi: DMatrix<f64>,
    /// Known error variance.
    pub sigma2: f64,
}

fn default_bound() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphicalParams {
    /// Precision matrix; its off-diagonal nonzeros are the edge set.
    #[serde(with = "serde_rows")]
    pub omega: DMatrix<f64>,
    #[serde(default = "default_bound")]
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroParams {
    #[serde(with = "serde_vec")]
    pub beta: DVector<f64>,
    pub basis: SplineBasis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialLinearParams {
    #[serde(with = "serde_vec")]
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub basis: SplineBasis,
}

/// Family tag plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilySpec {
    /// Independent errors with common variance, `ξ = 0`.
    Linear(LinearParams),
    MissingResponse(MissingParams),
    MeasurementError(MemParams),
    ParamCorrelation(CorrelationParams),
    MixedEffects(MixedParams),
    Graphical(GraphicalParams),
    HeteroSpline(HeteroParams),
    PartialLinear(PartialLinearParams),
}

impl FamilySpec {
    pub fn name(&self) -> &'static str {
        match self {
            FamilySpec::Linear(_) => "linear",
            FamilySpec::MissingResponse(_) => "missing_response",
            FamilySpec::MeasurementError(_) => "measurement_error",
            FamilySpec::ParamCorrelation(_) => "param_correlation",
            FamilySpec::MixedEffects(_) => "mixed_effects",
            FamilySpec::Graphical(_) => "graphical",
            FamilySpec::HeteroSpline(_) => "hetero_spline",
            FamilySpec::PartialLinear(_) => "partial_linear",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FamilySpec::Linear(p) => positive("σ²", p.sigma2),
            FamilySpec::MissingResponse(p) => spd("Σ", &p.sigma).map(drop),
            FamilySpec::MeasurementError(p) => {
                let q = p.q();
                if q == 0 || p.mu.len() != q || p.sigma.shape() != (q, q) || p.psi.shape() != (q, q) {
                    return Err(Error::Shape(format!(
                        "measurement-error dimensions: β {}, μ {}, Σ {:?}, Ψ {:?}",
                        q,
                        p.mu.len(),
                        p.sigma.shape(),
                        p.psi.shape()
                    )));
                }
                if !p.alpha.is_finite() || p.beta.iter().chain(p.mu.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("measurement-error location".into()));
                }
                positive("σ²", p.sigma2)?;
                spd("Σ", &p.sigma)?;
                spd("Ψ", &p.psi)?;
                Ok(())
            }
            FamilySpec::ParamCorrelation(p) => {
                p.kind.check(p.alpha)?;
                positive("σ²", p.sigma2)
            }
            FamilySpec::MixedEffects(p) => {
                positive("σ²", p.sigma2)?;
                spd("Ψ", &p.psi).map(drop)
            }
            FamilySpec::Graphical(p) => {
                positive("L", p.bound)?;
                spd("Ω", &p.omega)?;
                if !in_m0_plus(&p.omega, p.bound) {
                    return Err(Error::ParamRange(format!("Ω outside M₀⁺({})", p.bound)));
                }
                Ok(())
            }
            FamilySpec::HeteroSpline(p) => {
                check_len(&p.beta, &p.basis)?;
                if p.beta.iter().all(|&b| b.is_finite() && b > 0.0) {
                    Ok(())
                } else {
                    Err(Error::ParamRange("variance spline coefficients must be positive".into()))
                }
            }
            FamilySpec::PartialLinear(p) => {
                check_len(&p.beta, &p.basis)?;
                if p.beta.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("mean spline coefficient".into()));
                }
                positive("σ²", p.sigma2)
            }
        }
    }

    /// Per-group `(ξ_{η,i}, Δ_{η,i})` on `data`.
    pub fn evaluate(&self, data: &GroupedDataset) -> Result<NuisanceEval> {
        self.validate()?;
        let groups = data.groups();
        let n = groups.len();
        let zeros = || groups.iter().map(|g| DVector::zeros(g.len())).collect::<Vec<_>>();
        match self {
            FamilySpec::Linear(p) => Ok(NuisanceEval {
                xi: zeros(),
                cov: shared(groups, |_, g| Ok(g.len()), |m| Ok(DMatrix::identity(m, m) * p.sigma2))?,
            }),
            FamilySpec::MissingResponse(p) => {
                let mbar = p.sigma.nrows();
                let cov = shared(
                    groups,
                    |i, g| match &g.meta.pattern {
                        Some(pat) if pat.len() == mbar && observed(pat).len() == g.len() => Ok(pat.clone()),
                        Some(pat) => Err(Error::Shape(format!(
                            "group {i}: pattern of length {} observing {} coordinates, response has {}",
                            pat.len(),
                            observed(pat).len(),
                            g.len()
                        ))),
                        None if g.len() == mbar => Ok(vec![true; mbar]),
                        None => Err(Error::Shape(format!("group {i}: missing observation pattern"))),
                    },
                    |pat| missing_covariance(&p.sigma, &pat),
                )?;
                Ok(NuisanceEval { xi: zeros(), cov })
            }
            FamilySpec::MeasurementError(p) => {
                let q = p.q();
                require_len(groups, q + 1)?;
                let factor = Arc::new(SpdFactor::new(p.covariance())?);
                let xi = p.mean_shift();
                Ok(NuisanceEval {
                    xi: vec![xi; n],
                    cov: vec![factor; n],
                })
            }
            FamilySpec::ParamCorrelation(p) => Ok(NuisanceEval {
                xi: zeros(),
                cov: shared(
                    groups,
                    |_, g| Ok(g.len()),
                    |m| Ok(correlation_matrix(p.kind, p.alpha, m)? * p.sigma2),
                )?,
            }),
            FamilySpec::MixedEffects(p) => {
                let mut cov = Vec::with_capacity(n);
                for (i, g) in groups.iter().enumerate() {
                    let z = g
                        .meta
                        .random_design
                        .as_ref()
                        .ok_or_else(|| Error::Shape(format!("group {i}: missing random-effect design")))?;
                    let d = mixed_effects_cov(p.sigma2, z, &p.psi)?;
                    cov.push(Arc::new(SpdFactor::new(d).map_err(|e| e.in_group(i))?));
                }
                Ok(NuisanceEval { xi: zeros(), cov })
            }
            FamilySpec::Graphical(p) => {
                require_len(groups, p.omega.nrows())?;
                let factor = Arc::new(SpdFactor::new(graphical_delta(&p.omega)?)?);
                Ok(NuisanceEval {
                    xi: zeros(),
                    cov: vec![factor; n],
                })
            }
            FamilySpec::HeteroSpline(p) => {
                require_len(groups, 1)?;
                let mut cov = Vec::with_capacity(n);
                for (i, g) in groups.iter().enumerate() {
                    let v = hetero_variance(&p.beta, &p.basis, covariate(i, g)?)?;
                    let d = DMatrix::from_element(1, 1, v);
                    cov.push(Arc::new(SpdFactor::new(d).map_err(|e| e.in_group(i))?));
                }
                Ok(NuisanceEval { xi: zeros(), cov })
            }
            FamilySpec::PartialLinear(p) => {
                require_len(groups, 1)?;
                let factor = Arc::new(SpdFactor::new(DMatrix::from_element(1, 1, p.sigma2))?);
                let mut xi = Vec::with_capacity(n);
                for (i, g) in groups.iter().enumerate() {
                    xi.push(DVector::from_element(1, partial_linear_mean(&p.beta, &p.basis, covariate(i, g)?)?));
                }
                Ok(NuisanceEval {
                    xi,
                    cov: vec![factor; n],
                })
            }
        }
    }
}

fn check_len(beta: &DVector<f64>, basis: &SplineBasis) -> Result<()> {
    if beta.len() == basis.dim() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{} spline coefficients for a basis of dimension {}",
            beta.len(),
            basis.dim()
        )))
    }
}

fn covariate(i: usize, g: &Group) -> Result<f64> {
    g.meta
        .z
        .ok_or_else(|| Error::Shape(format!("group {i}: missing covariate z")))
}

fn require_len(groups: &[Group], m: usize) -> Result<()> {
    match groups.iter().position(|g| g.len() != m) {
        None => Ok(()),
        Some(i) => Err(Error::Shape(format!(
            "group {i} has {} responses, family requires {m}",
            groups[i].len()
        ))),
    }
}

/// One factorization per distinct key.
fn shared<K: Hash + Eq + Clone>(
    groups: &[Group],
    key: impl Fn(usize, &Group) -> Result<K>,
    build: impl Fn(K) -> Result<DMatrix<f64>>,
) -> Result<Vec<Arc<SpdFactor>>> {
    let mut cache: HashMap<K, Arc<SpdFactor>> = HashMap::new();
    let mut out = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let k = key(i, g)?;
        let f = match cache.get(&k) {
            Some(f) => f.clone(),
            None => {
                let f = Arc::new(SpdFactor::new(build(k.clone())?).map_err(|e| e.in_group(i))?);
                cache.insert(k, f.clone());
                f
            }
        };
        out.push(f);
    }
    Ok(out)
}

/// Assemble the joint Gaussian law of `(Y*_i, W_i)` for one subject.
///
/// Returns `(ξ_i, Δ_i, X_i)` with `X_i = (x*_i, 0)ᵀ`.
pub fn mem_assemble(
    spec: &MemParams,
    x_star: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    FamilySpec::MeasurementError(spec.clone()).validate()?;
    let q = spec.q();
    let mut x = DMatrix::zeros(q + 1, x_star.len());
    x.row_mut(0).copy_from(&x_star.transpose());
    Ok((spec.mean_shift(), spec.covariance(), x))
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_observe_prob() -> f64 {
    0.8
}

fn default_floor() -> f64 {
    0.3
}

/// How designs, observation patterns and covariates are generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    /// Responses per group for the linear, correlation and mixed-effects families.
    #[serde(default = "one")]
    pub group_size: usize,
    /// Rescale every design column to Euclidean norm `√n_*`.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Per-coordinate observation probability for missing responses.
    #[serde(default = "default_observe_prob")]
    pub observe_prob: f64,
    /// Required minimum co-observation frequency of every coordinate pair.
    #[serde(default = "default_floor")]
    pub co_observe_floor: f64,
    /// Explicit observation patterns, cycled over groups.
    #[serde(default)]
    pub patterns: Option<Vec<Vec<bool>>>,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            group_size: 1,
            normalize: true,
            observe_prob: default_observe_prob(),
            co_observe_floor: default_floor(),
            patterns: None,
        }
    }
}

/// Group sizes, observation patterns and covariates for `n` groups.
fn layout<R: Rng>(family: &FamilySpec, n: usize, design: &DesignSpec, rng: &mut R) -> Result<Vec<GroupMeta>> {
    let mut metas = vec![GroupMeta::default(); n];
    match family {
        FamilySpec::MissingResponse(p) => {
            let mbar = p.sigma.nrows();
            let patterns = match &design.patterns {
                Some(list) => {
                    if list.is_empty() || list.iter().any(|pat| pat.len() != mbar || !pat.contains(&true)) {
                        return Err(Error::Config(format!(
                            "explicit patterns must have length {mbar} and observe at least one coordinate"
                        )));
                    }
                    (0..n).map(|i| list[i % list.len()].clone()).collect()
                }
                None => random_patterns(n, mbar, design, rng)?,
            };
            for (meta, pat) in metas.iter_mut().zip(patterns) {
                meta.pattern = Some(pat);
            }
        }
        FamilySpec::MixedEffects(p) => {
            let q = p.psi.nrows();
            for meta in metas.iter_mut() {
                let mut z = normal_matrix(rng, design.group_size, q);
                z.column_mut(0).fill(1.0);
                meta.random_design = Some(z);
            }
        }
        FamilySpec::HeteroSpline(_) | FamilySpec::PartialLinear(_) => {
            for (meta, z) in metas.iter_mut().zip(equispaced(n)) {
                meta.z = Some(z);
            }
        }
        _ => {}
    }
    Ok(metas)
}

fn random_patterns<R: Rng>(n: usize, mbar: usize, design: &DesignSpec, rng: &mut R) -> Result<Vec<Vec<bool>>> {
    if !(design.observe_prob > 0.0 && design.observe_prob <= 1.0) {
        return Err(Error::Config("observe_prob must lie in (0, 1]".into()));
    }
    for _ in 0..100 {
        let pats: Vec<Vec<bool>> = (0..n)
            .map(|_| loop {
                let pat: Vec<bool> = (0..mbar).map(|_| rng.random::<f64>() < design.observe_prob).collect();
                if pat.contains(&true) {
                    break pat;
                }
            })
            .collect();
        if min_co_observation(&pats) >= design.co_observe_floor {
            return Ok(pats);
        }
    }
    Err(Error::Config(format!(
        "could not reach co-observation frequency {} with observe_prob {}",
        design.co_observe_floor, design.observe_prob
    )))
}

/// `min_{j,k} n⁻¹ Σ_i e_ij e_ik`.
pub fn min_co_observation(patterns: &[Vec<bool>]) -> f64 {
    let mbar = patterns.first().map_or(0, Vec::len);
    let n = patterns.len() as f64;
    let mut best = f64::INFINITY;
    for j in 0..mbar {
        for k in j..mbar {
            let c = patterns.iter().filter(|p| p[j] && p[k]).count() as f64 / n;
            best = best.min(c);
        }
    }
    best
}

fn group_len(family: &FamilySpec, design: &DesignSpec, meta: &GroupMeta) -> usize {
    match family {
        FamilySpec::Linear(_) | FamilySpec::ParamCorrelation(_) | FamilySpec::MixedEffects(_) => design.group_size,
        FamilySpec::MissingResponse(_) => meta.pattern.as_ref().map_or(0, |p| observed(p).len()),
        FamilySpec::MeasurementError(p) => p.q() + 1,
        FamilySpec::Graphical(p) => p.omega.nrows(),
        FamilySpec::HeteroSpline(_) | FamilySpec::PartialLinear(_) => 1,
    }
}

/// Draw a dataset of `n` groups from the family at `(θ₀, η)`.
///
/// Designs have i.i.d. standard normal entries (the measurement-error family
/// fills only the first row of each block). Everything is a function of
/// `seed` alone.
pub fn simulate(
    family: &FamilySpec,
    theta0: &SparseVector,
    n: usize,
    p: usize,
    design: &DesignSpec,
    seed: u64,
) -> Result<GroupedDataset> {
    family.validate()?;
    if n == 0 || p == 0 {
        return Err(Error::ParamRange("n and p must be positive".into()));
    }
    if theta0.p() != p {
        return Err(Error::Shape(format!("θ₀ has dimension {}, expected {p}", theta0.p())));
    }
    if design.group_size == 0 {
        return Err(Error::Config("group_size must be positive".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let metas = layout(family, n, design, &mut rng)?;
    let lens: Vec<usize> = metas.iter().map(|m| group_len(family, design, m)).collect();

    let mut xs: Vec<DMatrix<f64>> = lens
        .iter()
        .map(|&m| match family {
            FamilySpec::MeasurementError(_) => {
                let mut x = DMatrix::zeros(m, p);
                x.row_mut(0).copy_from(&normal_matrix(&mut rng, 1, p));
                x
            }
            _ => normal_matrix(&mut rng, m, p),
        })
        .collect();
    if design.normalize {
        let n_star: usize = lens.iter().sum();
        let mut sq = vec![0.0; p];
        for x in &xs {
            for (j, col) in x.column_iter().enumerate() {
                sq[j] += col.norm_squared();
            }
        }
        let scale: Vec<f64> = sq.iter().map(|s| (n_star as f64 / s).sqrt()).collect();
        for x in xs.iter_mut() {
            for (j, mut col) in x.column_iter_mut().enumerate() {
                col *= scale[j];
            }
        }
    }

    let groups: Vec<Group> = xs
        .into_iter()
        .zip(metas)
        .map(|(x, meta)| Group::new(DVector::zeros(x.nrows()), x).with_meta(meta))
        .collect();
    let skeleton = GroupedDataset::new(p, groups)?;
    let mut noise_rng = stream_rng(seed, 1);
    let groups = draw_responses(family, theta0, &skeleton, &mut noise_rng)?;
    GroupedDataset::new(p, groups)
}

/// Fresh responses at `(θ₀, η)` on the design, layout and covariates of
/// `skeleton`; the draw depends on `seed` alone.
pub fn resimulate_responses(
    family: &FamilySpec,
    theta0: &SparseVector,
    skeleton: &GroupedDataset,
    seed: u64,
) -> Result<GroupedDataset> {
    family.validate()?;
    if theta0.p() != skeleton.p() {
        return Err(Error::Shape(format!("θ₀ has dimension {}, design has p = {}", theta0.p(), skeleton.p())));
    }
    let groups = draw_responses(family, theta0, skeleton, &mut stream_rng(seed, 1))?;
    GroupedDataset::new(skeleton.p(), groups)
}

fn draw_responses<R: Rng>(
    family: &FamilySpec,
    theta0: &SparseVector,
    skeleton: &GroupedDataset,
    rng: &mut R,
) -> Result<Vec<Group>> {
    let mut out = Vec::with_capacity(skeleton.n());
    match family {
        FamilySpec::MeasurementError(p) => {
            // latent covariate and surrogate drawn explicitly
            let q = p.q();
            let lz = cholesky(&p.sigma)?;
            let lu = cholesky(&p.psi)?;
            let sd = p.sigma2.sqrt();
            for g in skeleton.groups() {
                let z = mvn_with_factor(rng, &p.mu, &lz);
                let w = &z + mvn_with_factor(rng, &DVector::zeros(q), &lu);
                let mut y = DVector::zeros(q + 1);
                y[0] = p.alpha + theta0.apply(&g.x)[0] + p.beta.dot(&z) + sd * std_normal(rng);
                y.rows_mut(1, q).copy_from(&w);
                out.push(Group { y, ..g.clone() });
            }
        }
        FamilySpec::MixedEffects(p) => {
            let lpsi = cholesky(&p.psi)?;
            let sd = p.sigma2.sqrt();
            let q = p.psi.nrows();
            for g in skeleton.groups() {
                let b = mvn_with_factor(rng, &DVector::zeros(q), &lpsi);
                let z = g.meta.random_design.as_ref().expect("layout sets random designs");
                let y = theta0.apply(&g.x) + z * b + normal_vector(rng, g.len()) * sd;
                out.push(Group { y, ..g.clone() });
            }
        }
        _ => {
            let eval = family.evaluate(skeleton)?;
            let mut chol_cache: HashMap<*const SpdFactor, DMatrix<f64>> = HashMap::new();
            for (i, g) in skeleton.groups().iter().enumerate() {
                let key = Arc::as_ptr(&eval.cov[i]);
                if !chol_cache.contains_key(&key) {
                    chol_cache.insert(key, cholesky(eval.cov[i].matrix())?);
                }
                let mean = theta0.apply(&g.x) + &eval.xi[i];
                let y = mvn_with_factor(rng, &mean, &chol_cache[&key]);
                out.push(Group { y, ..g.clone() });
            }
        }
    }
    Ok(out)
}

fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = SpdFactor::new(m.clone())?;
    Ok(f.matrix().clone().cholesky().map(|c| c.l()).unwrap_or_else(|| f.sqrt()))
}
