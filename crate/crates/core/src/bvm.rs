//! The Gaussian-mixture approximation `Π^∞` of the posterior of `θ`.
//!
//! With `X̃`, `U` the design and standardized residual whitened at `η₀`, and a
//! projection `H` that absorbs the directions the nuisance mean can explain,
//! each support `S` contributes the component `N(θ̂_S, Γ_S⁻¹)` where
//! `Γ_S = X̃_Sᵀ(I − H)X̃_S` and `θ̂_S = Γ_S⁻¹X̃_Sᵀ(I − H)(U + X̃θ₀)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergences::{bhattacharyya, GaussianPair};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, norm_quantile, select_columns, serde_rows, LN_2PI};
use crate::model::{whiten_with, GroupedDataset, NuisanceState, SparseVector};
use crate::posterior::{check_budget, size_log_prior, SupportPosterior};
use crate::priors::{sample_log_weights, SpikeSlabSpec};
use crate::rng::mvn_with_factor;
use crate::splines::{Projection, SplineBasis};
use crate::zoo::FamilySpec;

/// How the nuisance-absorbing projection `H` is chosen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HChoice {
    Zero,
    /// Projection onto the columns of a whitened `n_* × k` matrix.
    Given {
        #[serde(with = "serde_rows")]
        columns: DMatrix<f64>,
    },
    /// `Z_i = 1_{m_i} B_J(z_i)ᵀ` for a spline basis in the group covariate.
    Spline { dim: usize, order: usize },
    /// `Z_i` read off the family's mean structure `ξ_{η,i} = Z_i h(η)`;
    /// families without a nuisance mean get `H = 0`.
    #[default]
    ZProjection,
}

/// Whether `(θ₀, η₀)` is the simulation truth or a user estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BvmMode {
    #[default]
    Oracle,
    PlugIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub support: Vec<usize>,
    pub log_weight: f64,
    pub center: Vec<f64>,
    /// `Γ_S`, the precision of the component.
    #[serde(with = "serde_rows")]
    pub gram: DMatrix<f64>,
}

impl MixtureComponent {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.gram
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Singular(format!("Γ at support {:?}", self.support)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportMixture {
    pub p: usize,
    pub mode: BvmMode,
    pub h: HChoice,
    pub h_rank: usize,
    pub theta0: SparseVector,
    pub eta0: NuisanceState,
    pub components: Vec<MixtureComponent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl SupportMixture {
    pub fn component(&self, support: &[usize]) -> Option<&MixtureComponent> {
        self.components.iter().find(|c| c.support == support)
    }

    pub fn weight(&self, support: &[usize]) -> f64 {
        self.component(support).map_or(0.0, MixtureComponent::weight)
    }

    pub fn modal(&self) -> &MixtureComponent {
        self.components
            .iter()
            .reduce(|a, b| if b.log_weight > a.log_weight { b } else { a })
            .expect("mixtures are nonempty")
    }

    /// The mixture as a distribution over supports with component moments.
    pub fn support_posterior(&self) -> Result<SupportPosterior> {
        let entries = self
            .components
            .iter()
            .map(|c| {
                let mut e = crate::posterior::SupportEntry::new(c.support.clone(), c.log_weight);
                e.mean = Some(c.center.clone());
                e.cov = c.covariance().ok();
                e
            })
            .collect();
        SupportPosterior::from_log_weights(self.p, entries, self.flags.clone())
    }

    /// `n` draws of `(S, θ_S)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
        let logs: Vec<f64> = self.components.iter().map(|c| c.log_weight).collect();
        let factors = self
            .components
            .iter()
            .map(|c| {
                c.covariance()?
                    .cholesky()
                    .map(|f| f.l())
                    .ok_or_else(|| Error::Singular(format!("covariance at support {:?}", c.support)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((0..n)
            .map(|_| {
                let k = sample_log_weights(&logs, rng);
                let c = &self.components[k];
                let t = mvn_with_factor(rng, &DVector::from_column_slice(&c.center), &factors[k]);
                (c.support.clone(), t.iter().copied().collect())
            })
            .collect())
    }
}

/// `Γ_S = X̃_Sᵀ(I − H)X̃_S`.
pub fn gram(support: &[usize], x_tilde: &DMatrix<f64>, h: &Projection) -> DMatrix<f64> {
    let xs = select_columns(x_tilde, support);
    let g = xs.transpose() * h.complement_matrix(&xs);
    (&g + g.transpose()) * 0.5
}

fn solve_spd(g: &DMatrix<f64>, b: &DVector<f64>, support: &[usize]) -> Result<DVector<f64>> {
    let scale = g.diagonal().amax();
    let chol = g.clone().cholesky().ok_or_else(|| Error::Singular(format!("Γ at support {support:?}")))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > 1e-12 * scale) {
        return Err(Error::Singular(format!("Γ at support {support:?}: pivot {min_pivot:e}")));
    }
    Ok(chol.solve(b))
}

/// `θ̂_S = Γ_S⁻¹X̃_Sᵀ(I − H)(U + X̃θ₀)`.
pub fn ls_center(
    support: &[usize],
    x_tilde: &DMatrix<f64>,
    h: &Projection,
    u: &DVector<f64>,
    theta0: &SparseVector,
) -> Result<DVector<f64>> {
    let xs = select_columns(x_tilde, support);
    let target = h.complement(&(u + theta0.apply(x_tilde)));
    solve_spd(&gram(support, x_tilde, h), &(xs.transpose() * target), support)
}

/// `log Λ_n^⋆(θ) = −½‖(I − H)X̃(θ − θ₀)‖² + Uᵀ(I − H)X̃(θ − θ₀)`.
pub fn log_lambda_star(
    theta: &SparseVector,
    x_tilde: &DMatrix<f64>,
    h: &Projection,
    u: &DVector<f64>,
    theta0: &SparseVector,
) -> f64 {
    let v = h.complement(&(theta.apply(x_tilde) - theta0.apply(x_tilde)));
    -0.5 * v.norm_squared() + u.dot(&v)
}

fn component_log_weight(
    support: &[usize],
    spec: &SpikeSlabSpec,
    x_tilde: &DMatrix<f64>,
    h: &Projection,
    u: &DVector<f64>,
    theta0: &SparseVector,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let s = support.len();
    let g = gram(support, x_tilde, h);
    let center = if s == 0 {
        DVector::zeros(0)
    } else {
        ls_center(support, x_tilde, h, u, theta0)?
    };
    let log_det = match s {
        0 => 0.0,
        _ => 2.0 * g.clone().cholesky().expect("checked by ls_center").l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
    };
    let lw = size_log_prior(spec, s)? + s as f64 * (0.5 * spec.lambda).ln() + 0.5 * s as f64 * LN_2PI - 0.5 * log_det
        + 0.5 * center.dot(&(&g * &center));
    Ok((lw, center, g))
}

/// Normalized `log ŵ_S` for the given supports.
pub fn mixture_weights(
    supports: &[Vec<usize>],
    spec: &SpikeSlabSpec,
    x_tilde: &DMatrix<f64>,
    h: &Projection,
    u: &DVector<f64>,
    theta0: &SparseVector,
) -> Result<Vec<f64>> {
    let logs = supports
        .iter()
        .map(|s| component_log_weight(s, spec, x_tilde, h, u, theta0).map(|r| r.0))
        .collect::<Result<Vec<f64>>>()?;
    let z = log_sum_exp(&logs);
    Ok(logs.into_iter().map(|v| v - z).collect())
}

fn z_blocks(data: &GroupedDataset, eta0: &NuisanceState, h: &HChoice) -> Result<Option<Vec<DMatrix<f64>>>> {
    let spline_rows = |basis: &SplineBasis| -> Result<Vec<DMatrix<f64>>> {
        data.groups()
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let z = g.meta.z.ok_or_else(|| Error::Shape(format!("group {i}: missing covariate z")))?;
                let b = basis.eval(z)?;
                Ok(DMatrix::from_fn(g.len(), b.len(), |_, c| b[c]))
            })
            .collect()
    };
    match h {
        HChoice::Spline { dim, order } => spline_rows(&SplineBasis::new(*dim, *order)?).map(Some),
        HChoice::ZProjection => match eta0 {
            FamilySpec::MeasurementError(p) => Ok(Some(vec![DMatrix::identity(p.q() + 1, p.q() + 1); data.n()])),
            FamilySpec::PartialLinear(p) => spline_rows(&p.basis).map(Some),
            _ => Ok(None),
        },
        _ => Ok(None),
    }
}

/// `H` in whitened coordinates for the chosen strategy.
pub fn projection_for(
    data: &GroupedDataset,
    eta0: &NuisanceState,
    choice: &HChoice,
    cov: &crate::model::NuisanceEval,
) -> Result<Projection> {
    let n_star = data.n_star();
    match choice {
        HChoice::Zero => Ok(Projection::zero(n_star)),
        HChoice::Given { columns } => {
            if columns.nrows() != n_star {
                return Err(Error::Shape(format!("H columns have {} rows, expected {n_star}", columns.nrows())));
            }
            Projection::onto(columns, false)
        }
        _ => match z_blocks(data, eta0, choice)? {
            None => Ok(Projection::zero(n_star)),
            Some(blocks) => {
                let k = blocks[0].ncols();
                let mut zt = DMatrix::zeros(n_star, k);
                for (i, z) in blocks.iter().enumerate() {
                    let off = data.offsets()[i];
                    zt.rows_mut(off, z.nrows()).copy_from(&(cov.cov[i].inv_sqrt() * z));
                }
                Projection::onto(&zt, false)
            }
        },
    }
}

/// `Π^∞` over all supports of size at most `s_max`.
///
/// Supports whose `Γ_S` is singular cannot carry a Gaussian component; they
/// are dropped and listed in `flags`.
pub fn build_bvm(
    data: &GroupedDataset,
    theta0: &SparseVector,
    eta0: &NuisanceState,
    spec: &SpikeSlabSpec,
    h_choice: &HChoice,
    s_max: usize,
    mode: BvmMode,
) -> Result<SupportMixture> {
    spec.validate()?;
    let p = data.p();
    if theta0.p() != p || spec.p != p {
        return Err(Error::Shape(format!("θ₀ has p = {}, prior p = {}, data p = {p}", theta0.p(), spec.p)));
    }
    let supports = check_budget(p, s_max.min(p))?;
    let eval = eta0.evaluate(data)?;
    let wd = whiten_with(data, &eval)?;
    let u = wd.u(theta0);
    let h = projection_for(data, eta0, h_choice, &eval)?;
    let results: Vec<(Vec<usize>, Result<(f64, DVector<f64>, DMatrix<f64>)>)> = supports
        .into_par_iter()
        .map(|s| {
            let r = component_log_weight(&s, spec, &wd.x_tilde, &h, &u, theta0);
            (s, r)
        })
        .collect();
    let mut flags = Vec::new();
    let mut components = Vec::with_capacity(results.len());
    for (support, r) in results {
        match r {
            Ok((log_weight, center, gram)) => components.push(MixtureComponent {
                support,
                log_weight,
                center: center.iter().copied().collect(),
                gram,
            }),
            Err(Error::Singular(_)) => flags.push(format!("singular Γ at support {support:?}; component dropped")),
            Err(e) => return Err(e),
        }
    }
    if components.is_empty() {
        return Err(Error::Singular("every support has a singular Γ".into()));
    }
    let logs: Vec<f64> = components.iter().map(|c| c.log_weight).collect();
    let z = log_sum_exp(&logs);
    for c in &mut components {
        c.log_weight -= z;
    }
    if mode == BvmMode::PlugIn {
        flags.push("plug-in mode: (θ₀, η₀) are estimates, not the truth".into());
    }
    Ok(SupportMixture {
        p,
        mode,
        h: h_choice.clone(),
        h_rank: h.rank(),
        theta0: theta0.clone(),
        eta0: eta0.clone(),
        components,
        flags,
    })
}

/// Surrogate for the total variation between a posterior and `Π^∞`.
///
/// `support_tv = ½ Σ_S |P̂(S) − ŵ_S|`. For the modal support of the sample,
/// if the mixture has a component there and the sample carries an SPD
/// within-support covariance, the Gaussian fit `N(m̂, Ĉ)` is compared with
/// `N(θ̂_S, Γ_S⁻¹)` through the Hellinger-type bound `TV ≤ √(1 − BC²)`,
/// weighted by `min(P̂(S), ŵ_S)`, and added to `support_tv`. This is an
/// estimator of the total variation, not a bound in either direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub support_tv: f64,
    pub modal_support: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modal_term: Option<f64>,
    pub value: f64,
}

pub fn tv_support_mixture(sample: &SupportPosterior, mixture: &SupportMixture) -> Result<TvEstimate> {
    if sample.p != mixture.p {
        return Err(Error::Shape(format!("sample p = {}, mixture p = {}", sample.p, mixture.p)));
    }
    let mixture_post = SupportPosterior::from_log_weights(
        mixture.p,
        mixture
            .components
            .iter()
            .map(|c| crate::posterior::SupportEntry::new(c.support.clone(), c.log_weight))
            .collect(),
        vec![],
    )?;
    let support_tv = sample.support_tv(&mixture_post);
    let modal = sample.modal();
    let modal_term = match (mixture.component(&modal.support), &modal.mean, &modal.cov) {
        (Some(c), _, _) if c.support.is_empty() => Some(0.0),
        (Some(c), Some(m), Some(cov)) => {
            let pair = GaussianPair::new(
                DVector::from_column_slice(m),
                cov.clone(),
                DVector::from_column_slice(&c.center),
                c.covariance()?,
            );
            match pair {
                Ok(pair) => {
                    let bc = (-bhattacharyya(&pair)?).exp();
                    Some(modal.weight().min(c.weight()) * (1.0 - bc * bc).max(0.0).sqrt())
                }
                Err(_) => None,
            }
        }
        _ => None,
    };
    Ok(TvEstimate {
        support_tv,
        modal_support: modal.support.clone(),
        modal_term,
        value: (support_tv + modal_term.unwrap_or(0.0)).min(1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub coord: usize,
    pub center: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CredibleInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// `θ̂_{S₀,j} ± z_{(1+level)/2} √(Γ_{S₀}⁻¹)_{jj}` for each `j ∈ S₀`.
pub fn credible_intervals(mixture: &SupportMixture, s0: &[usize], level: f64) -> Result<Vec<CredibleInterval>> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::ParamRange(format!("credible level {level}")));
    }
    let c = mixture
        .component(s0)
        .ok_or_else(|| Error::Config(format!("no mixture component at support {s0:?}")))?;
    let cov = c.covariance()?;
    let z = if level == 0.0 { 0.0 } else { norm_quantile(0.5 * (1.0 + level)) };
    Ok(s0
        .iter()
        .enumerate()
        .map(|(a, &j)| {
            let sd = cov[(a, a)].sqrt();
            let center = c.center[a];
            CredibleInterval {
                coord: j,
                center,
                sd,
                lo: center - z * sd,
                hi: center + z * sd,
            }
        })
        .collect())
}
