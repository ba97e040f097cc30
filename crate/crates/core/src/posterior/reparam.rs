//! Maps between the free components of `η` and unconstrained coordinates.
//!
//! Scales go through `log`, covariance matrices through the log-diagonal
//! Cholesky factor, and the correlation parameter through a logit scaled to
//! its admissible interval. `from_unconstrained` also returns
//! `log |∂η/∂u|`, so a random walk in `u` targets the right density.
//!
//! Known components (measurement-error `Ψ`, mixed-effects `σ²`, spline bases,
//! correlation kind, graphical bound and edge set) come from a template.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::zoo::{edges, FamilySpec};

/// Lower-triangular Cholesky entries, row by row, with the diagonal logged.
pub fn chol_log_pack(sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let l = sigma
        .clone()
        .cholesky()
        .ok_or(Error::NotSpd {
            group: None,
            min_eig: f64::NAN,
            max_eig: f64::NAN,
        })?
        .l();
    let q = l.nrows();
    let mut out = Vec::with_capacity(q * (q + 1) / 2);
    for i in 0..q {
        for j in 0..i {
            out.push(l[(i, j)]);
        }
        out.push(l[(i, i)].ln());
    }
    Ok(out)
}

/// Inverse of [`chol_log_pack`], returning `Σ = LLᵀ` and the log-Jacobian
/// `q log 2 + Σ_i (q − i + 1) l_ii` (0-based `i`) of the map from packed
/// coordinates to the lower triangle of `Σ`.
pub fn chol_log_unpack(v: &[f64], q: usize) -> Result<(DMatrix<f64>, f64)> {
    if v.len() != q * (q + 1) / 2 {
        return Err(Error::Shape(format!("{} packed entries for a {q}x{q} matrix", v.len())));
    }
    let mut l = DMatrix::zeros(q, q);
    let mut log_jac = q as f64 * std::f64::consts::LN_2;
    let mut k = 0;
    for i in 0..q {
        for j in 0..i {
            l[(i, j)] = v[k];
            k += 1;
        }
        l[(i, i)] = v[k].exp();
        log_jac += (q - i + 1) as f64 * v[k];
        k += 1;
    }
    Ok((&l * l.transpose(), log_jac))
}

fn logit_in(x: f64, lo: f64, hi: f64) -> f64 {
    let s = (x - lo) / (hi - lo);
    (s / (1.0 - s)).ln()
}

/// `(α, log dα/du)` for `α = lo + (hi − lo)·sigmoid(u)`.
fn expit_in(u: f64, lo: f64, hi: f64) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-u).exp());
    // log σ(u) = −softplus(−u), log(1 − σ(u)) = −softplus(u)
    let softplus = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
    let log_s = -softplus(-u);
    let log_1ms = -softplus(u);
    (lo + (hi - lo) * s, (hi - lo).ln() + log_s + log_1ms)
}

/// Unconstrained coordinates of the free components of `eta`.
pub fn to_unconstrained(eta: &FamilySpec) -> Result<Vec<f64>> {
    eta.validate()?;
    Ok(match eta {
        FamilySpec::Linear(p) => vec![p.sigma2.ln()],
        FamilySpec::MissingResponse(p) => chol_log_pack(&p.sigma)?,
        FamilySpec::MeasurementError(p) => {
            let mut v = vec![p.alpha];
            v.extend(p.beta.iter());
            v.extend(p.mu.iter());
            v.push(p.sigma2.ln());
            v.extend(chol_log_pack(&p.sigma)?);
            v
        }
        FamilySpec::ParamCorrelation(p) => {
            let (lo, hi) = p.kind.interval();
            vec![logit_in(p.alpha, lo, hi), p.sigma2.ln()]
        }
        FamilySpec::MixedEffects(p) => chol_log_pack(&p.psi)?,
        FamilySpec::Graphical(p) => {
            let m = p.omega.nrows();
            let mut v: Vec<f64> = (0..m).map(|j| p.omega[(j, j)].ln()).collect();
            v.extend(edges(&p.omega).iter().map(|&(j, k)| p.omega[(j, k)]));
            v
        }
        FamilySpec::HeteroSpline(p) => p.beta.iter().map(|b| b.ln()).collect(),
        FamilySpec::PartialLinear(p) => {
            let mut v: Vec<f64> = p.beta.iter().copied().collect();
            v.push(p.sigma2.ln());
            v
        }
    })
}

/// Rebuilds `η` from unconstrained coordinates. The returned value is not
/// validated; callers reject states the family does not admit.
pub fn from_unconstrained(template: &FamilySpec, u: &[f64]) -> Result<(FamilySpec, f64)> {
    let expect = to_unconstrained(template)?.len();
    if u.len() != expect {
        return Err(Error::Shape(format!("{} unconstrained coordinates, expected {expect}", u.len())));
    }
    let mut out = template.clone();
    let log_jac = match &mut out {
        FamilySpec::Linear(p) => {
            p.sigma2 = u[0].exp();
            u[0]
        }
        FamilySpec::MissingResponse(p) => {
            let (s, lj) = chol_log_unpack(u, p.sigma.nrows())?;
            p.sigma = s;
            lj
        }
        FamilySpec::MeasurementError(p) => {
            let q = p.q();
            p.alpha = u[0];
            p.beta = DVector::from_column_slice(&u[1..1 + q]);
            p.mu = DVector::from_column_slice(&u[1 + q..1 + 2 * q]);
            p.sigma2 = u[1 + 2 * q].exp();
            let (s, lj) = chol_log_unpack(&u[2 + 2 * q..], q)?;
            p.sigma = s;
            u[1 + 2 * q] + lj
        }
        FamilySpec::ParamCorrelation(p) => {
            let (lo, hi) = p.kind.interval();
            let (alpha, lj) = expit_in(u[0], lo, hi);
            p.alpha = alpha;
            p.sigma2 = u[1].exp();
            lj + u[1]
        }
        FamilySpec::MixedEffects(p) => {
            let (s, lj) = chol_log_unpack(u, p.psi.nrows())?;
            p.psi = s;
            lj
        }
        FamilySpec::Graphical(p) => {
            let m = p.omega.nrows();
            let e = edges(&p.omega);
            for j in 0..m {
                p.omega[(j, j)] = u[j].exp();
            }
            for (k, &(a, b)) in e.iter().enumerate() {
                p.omega[(a, b)] = u[m + k];
                p.omega[(b, a)] = u[m + k];
            }
            u[..m].iter().sum()
        }
        FamilySpec::HeteroSpline(p) => {
            p.beta = DVector::from_iterator(u.len(), u.iter().map(|v| v.exp()));
            u.iter().sum()
        }
        FamilySpec::PartialLinear(p) => {
            let j = p.beta.len();
            p.beta = DVector::from_column_slice(&u[..j]);
            p.sigma2 = u[j].exp();
            u[j]
        }
    };
    if !log_jac.is_finite() {
        return Err(Error::NonFinite("reparameterization Jacobian".into()));
    }
    Ok((out, log_jac))
}

/// Constrained free components of `η` as a flat vector: scalars as they
/// are, matrices column-major in full.
pub fn natural(eta: &FamilySpec) -> Vec<f64> {
    match eta {
        FamilySpec::Linear(p) => vec![p.sigma2],
        FamilySpec::MissingResponse(p) => p.sigma.as_slice().to_vec(),
        FamilySpec::MeasurementError(p) => {
            let mut v = vec![p.alpha];
            v.extend(p.beta.iter());
            v.extend(p.mu.iter());
            v.push(p.sigma2);
            v.extend(p.sigma.iter());
            v
        }
        FamilySpec::ParamCorrelation(p) => vec![p.alpha, p.sigma2],
        FamilySpec::MixedEffects(p) => p.psi.as_slice().to_vec(),
        FamilySpec::Graphical(p) => p.omega.as_slice().to_vec(),
        FamilySpec::HeteroSpline(p) => p.beta.as_slice().to_vec(),
        FamilySpec::PartialLinear(p) => {
            let mut v = p.beta.as_slice().to_vec();
            v.push(p.sigma2);
            v
        }
    }
}

/// Inverse of [`natural`] given a template for the fixed components.
pub fn with_natural(template: &FamilySpec, v: &[f64]) -> Result<FamilySpec> {
    if v.len() != natural(template).len() {
        return Err(Error::Shape(format!("{} natural coordinates for {}", v.len(), template.name())));
    }
    let mut out = template.clone();
    match &mut out {
        FamilySpec::Linear(p) => p.sigma2 = v[0],
        FamilySpec::MissingResponse(p) => p.sigma.as_mut_slice().copy_from_slice(v),
        FamilySpec::MeasurementError(p) => {
            let q = p.q();
            p.alpha = v[0];
            p.beta.as_mut_slice().copy_from_slice(&v[1..1 + q]);
            p.mu.as_mut_slice().copy_from_slice(&v[1 + q..1 + 2 * q]);
            p.sigma2 = v[1 + 2 * q];
            p.sigma.as_mut_slice().copy_from_slice(&v[2 + 2 * q..]);
        }
        FamilySpec::ParamCorrelation(p) => {
            p.alpha = v[0];
            p.sigma2 = v[1];
        }
        FamilySpec::MixedEffects(p) => p.psi.as_mut_slice().copy_from_slice(v),
        FamilySpec::Graphical(p) => p.omega.as_mut_slice().copy_from_slice(v),
        FamilySpec::HeteroSpline(p) => p.beta.as_mut_slice().copy_from_slice(v),
        FamilySpec::PartialLinear(p) => {
            let j = p.beta.len();
            p.beta.as_mut_slice().copy_from_slice(&v[..j]);
            p.sigma2 = v[j];
        }
    }
    Ok(out)
}

/// Componentwise average of nuisance states in constrained coordinates.
/// Every admissible parameter set is convex, so the average is admissible.
pub fn average(etas: &[FamilySpec]) -> Result<FamilySpec> {
    let first = etas.first().ok_or(Error::Config("no nuisance states to average".into()))?;
    let mut acc = vec![0.0; natural(first).len()];
    for e in etas {
        if e.name() != first.name() {
            return Err(Error::Config("mixed families in nuisance average".into()));
        }
        let v = natural(e);
        if v.len() != acc.len() {
            return Err(Error::Shape("nuisance states of different shapes".into()));
        }
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = etas.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let out = with_natural(first, &acc)?;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, stream_rng};
    use crate::splines::SplineBasis;
    use crate::zoo::{
        CorrelationKind, CorrelationParams, GraphicalParams, HeteroParams, LinearParams, MemParams, MissingParams,
        MixedParams, PartialLinearParams,
    };
    use approx::assert_relative_eq;

    fn spd(seed: u64, q: usize) -> DMatrix<f64> {
        let a = normal_matrix(&mut stream_rng(seed, 0), q, q);
        &a * a.transpose() + DMatrix::identity(q, q)
    }

    fn examples() -> Vec<FamilySpec> {
        let basis = SplineBasis::new(5, 4).unwrap();
        let mut omega = DMatrix::identity(3, 3) * 2.0;
        omega[(0, 2)] = 0.4;
        omega[(2, 0)] = 0.4;
        vec![
            FamilySpec::Linear(LinearParams { sigma2: 0.7 }),
            FamilySpec::MissingResponse(MissingParams { sigma: spd(1, 3) }),
            FamilySpec::MeasurementError(MemParams {
                alpha: 0.3,
                beta: DVector::from_vec(vec![1.0, -0.5]),
                mu: DVector::from_vec(vec![0.2, 0.1]),
                sigma2: 0.4,
                sigma: spd(2, 2),
                psi: DMatrix::identity(2, 2) * 0.3,
            }),
            FamilySpec::ParamCorrelation(CorrelationParams {
                kind: CorrelationKind::Ma,
                alpha: -0.3,
                sigma2: 1.4,
            }),
            FamilySpec::MixedEffects(MixedParams {
                psi: spd(3, 2),
                sigma2: 1.0,
            }),
            FamilySpec::Graphical(GraphicalParams { omega, bound: 10.0 }),
            FamilySpec::HeteroSpline(HeteroParams {
                beta: DVector::from_vec(vec![0.5, 1.0, 2.0, 1.5, 0.8]),
                basis: basis.clone(),
            }),
            FamilySpec::PartialLinear(PartialLinearParams {
                beta: DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 1.0]),
                sigma2: 2.0,
                basis,
            }),
        ]
    }

    #[test]
    fn round_trips_every_family() {
        for eta in examples() {
            let u = to_unconstrained(&eta).unwrap();
            let (back, _) = from_unconstrained(&eta, &u).unwrap();
            let u2 = to_unconstrained(&back).unwrap();
            for (a, b) in u.iter().zip(&u2) {
                assert_relative_eq!(a, b, epsilon = 1e-10);
            }
            back.validate().unwrap();
        }
    }

    /// log |det| of the Jacobian of `u ↦ free entries of η`, by central differences.
    fn numeric_log_jac(template: &FamilySpec, u: &[f64], free: impl Fn(&FamilySpec) -> Vec<f64>) -> f64 {
        let k = u.len();
        let h = 1e-6;
        let mut jac = DMatrix::zeros(k, k);
        for c in 0..k {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[c] += h;
            dn[c] -= h;
            let fp = free(&from_unconstrained(template, &up).unwrap().0);
            let fm = free(&from_unconstrained(template, &dn).unwrap().0);
            for r in 0..k {
                jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    fn lower(m: &DMatrix<f64>) -> Vec<f64> {
        (0..m.nrows()).flat_map(|i| (0..=i).map(move |j| m[(i, j)])).collect()
    }

    #[test]
    fn cholesky_jacobian_matches_finite_differences() {
        for q in 1..=4 {
            let sigma = spd(10 + q as u64, q);
            let eta = FamilySpec::MissingResponse(MissingParams { sigma });
            let u = to_unconstrained(&eta).unwrap();
            let (_, lj) = from_unconstrained(&eta, &u).unwrap();
            let num = numeric_log_jac(&eta, &u, |e| match e {
                FamilySpec::MissingResponse(p) => lower(&p.sigma),
                _ => unreachable!(),
            });
            assert_relative_eq!(lj, num, epsilon = 1e-5);
        }
    }

    #[test]
    fn all_jacobians_match_finite_differences() {
        for eta in examples() {
            let u = to_unconstrained(&eta).unwrap();
            let (_, lj) = from_unconstrained(&eta, &u).unwrap();
            let num = numeric_log_jac(&eta, &u, |e| match e {
                FamilySpec::Linear(p) => vec![p.sigma2],
                FamilySpec::MissingResponse(p) => lower(&p.sigma),
                FamilySpec::MeasurementError(p) => {
                    let mut v = vec![p.alpha];
                    v.extend(p.beta.iter());
                    v.extend(p.mu.iter());
                    v.push(p.sigma2);
                    v.extend(lower(&p.sigma));
                    v
                }
                FamilySpec::ParamCorrelation(p) => vec![p.alpha, p.sigma2],
                FamilySpec::MixedEffects(p) => lower(&p.psi),
                FamilySpec::Graphical(p) => {
                    let mut v: Vec<f64> = (0..3).map(|j| p.omega[(j, j)]).collect();
                    v.push(p.omega[(0, 2)]);
                    v
                }
                FamilySpec::HeteroSpline(p) => p.beta.iter().copied().collect(),
                FamilySpec::PartialLinear(p) => {
                    let mut v: Vec<f64> = p.beta.iter().copied().collect();
                    v.push(p.sigma2);
                    v
                }
            });
            assert_relative_eq!(lj, num, epsilon = 1e-5);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let (a, lj) = expit_in(30.0, -1.0, 1.0);
        assert!(a < 1.0 && lj.is_finite());
        let (a, lj) = expit_in(-800.0, -1.0, 1.0);
        assert!(a >= -1.0 && lj.is_finite());
    }

    #[test]
    fn averages_stay_admissible() {
        for eta in examples() {
            let u = to_unconstrained(&eta).unwrap();
            let shifted: Vec<f64> = u.iter().map(|v| v + 0.1).collect();
            let (other, _) = from_unconstrained(&eta, &shifted).unwrap();
            let avg = average(&[eta.clone(), other.clone()]).unwrap();
            let (a, b, c) = (natural(&eta), natural(&other), natural(&avg));
            for k in 0..a.len() {
                assert_relative_eq!(c[k], 0.5 * (a[k] + b[k]), epsilon = 1e-12);
            }
            assert_eq!(average(&[eta.clone()]).unwrap(), eta);
        }
        assert!(average(&[]).is_err());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let eta = FamilySpec::Linear(LinearParams { sigma2: 1.0 });
        assert!(from_unconstrained(&eta, &[0.0, 1.0]).is_err());
    }
}
