//! Closed-form divergences between Gaussian models, pseudo-metrics on the
//! nuisance parameter and the likelihood-ratio test.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{log_likelihood_ratio, GroupedDataset, NuisanceEval, NuisanceState, SparseVector};

/// Two Gaussian laws `N(μ₁, Σ₁)` and `N(μ₂, Σ₂)` of a common dimension.
#[derive(Clone, Debug)]
pub struct GaussianPair {
    pub mu1: DVector<f64>,
    pub sigma1: DMatrix<f64>,
    pub mu2: DVector<f64>,
    pub sigma2: DMatrix<f64>,
}

impl GaussianPair {
    pub fn new(mu1: DVector<f64>, sigma1: DMatrix<f64>, mu2: DVector<f64>, sigma2: DMatrix<f64>) -> Result<Self> {
        let r = mu1.len();
        if mu2.len() != r || sigma1.shape() != (r, r) || sigma2.shape() != (r, r) {
            return Err(Error::Shape(format!(
                "means of length {} and {}, covariances {:?} and {:?}",
                r,
                mu2.len(),
                sigma1.shape(),
                sigma2.shape()
            )));
        }
        SpdFactor::new(sigma1.clone())?;
        SpdFactor::new(sigma2.clone())?;
        Ok(Self {
            mu1,
            sigma1,
            mu2,
            sigma2,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu1.len()
    }
}

fn chol(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    m.clone().cholesky().ok_or(Error::NotSpd {
        group: None,
        min_eig: f64::NAN,
        max_eig: f64::NAN,
    })
}

fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `KL(N(μ₁,Σ₁) ‖ N(μ₂,Σ₂))`.
pub fn gaussian_kl(pair: &GaussianPair) -> Result<f64> {
    let c1 = chol(&pair.sigma1)?;
    let c2 = chol(&pair.sigma2)?;
    let d = &pair.mu1 - &pair.mu2;
    let b = c2.solve(&pair.sigma1);
    let quad = d.dot(&c2.solve(&d));
    let r = pair.dim() as f64;
    Ok((0.5 * (chol_log_det(&c2) - chol_log_det(&c1) + b.trace() - r + quad)).max(0.0))
}

/// Variance of `log(p₁/p₂)` under `p₁`.
pub fn gaussian_kl_variation(pair: &GaussianPair) -> Result<f64> {
    let c2 = chol(&pair.sigma2)?;
    chol(&pair.sigma1)?;
    let d = &pair.mu1 - &pair.mu2;
    // B = Σ₂⁻¹Σ₁ is similar to Σ₁Σ₂⁻¹
    let b = c2.solve(&pair.sigma1);
    let r = pair.dim() as f64;
    let tr_bb = (&b * &b).trace();
    let w = c2.solve(&d);
    let lin = w.dot(&(&pair.sigma1 * &w));
    Ok((0.5 * (tr_bb - 2.0 * b.trace() + r) + lin).max(0.0))
}

/// `g² = 1 − det(Σ₁)^{1/4} det(Σ₂)^{1/4} / det((Σ₁+Σ₂)/2)^{1/2}`.
pub fn affinity_defect(sigma1: &DMatrix<f64>, sigma2: &DMatrix<f64>) -> Result<f64> {
    Ok(-log_affinity_ratio(sigma1, sigma2)?.exp_m1())
}

/// `log[det(Σ₁)^{1/4} det(Σ₂)^{1/4} / det((Σ₁+Σ₂)/2)^{1/2}] ≤ 0`.
fn log_affinity_ratio(sigma1: &DMatrix<f64>, sigma2: &DMatrix<f64>) -> Result<f64> {
    if sigma1.shape() != sigma2.shape() {
        return Err(Error::Shape("covariances of different dimension".into()));
    }
    let mid = (sigma1 + sigma2) * 0.5;
    let v = 0.25 * chol_log_det(&chol(sigma1)?) + 0.25 * chol_log_det(&chol(sigma2)?) - 0.5 * chol_log_det(&chol(&mid)?);
    Ok(v.min(0.0))
}

/// Bhattacharyya distance `−log ∫√(p₁p₂)` of one Gaussian pair.
pub fn bhattacharyya(pair: &GaussianPair) -> Result<f64> {
    let d = &pair.mu1 - &pair.mu2;
    let sum = &pair.sigma1 + &pair.sigma2;
    let quad = d.dot(&chol(&sum)?.solve(&d));
    Ok(-log_affinity_ratio(&pair.sigma1, &pair.sigma2)? + 0.25 * quad)
}

/// Average order-½ Rényi divergence `−n⁻¹ Σ_i log ∫√(p_i q_i)` between the
/// models at `(θ, η)` and `(θ₀, η₀)`.
pub fn avg_renyi(
    theta: &SparseVector,
    eta: &NuisanceState,
    theta0: &SparseVector,
    eta0: &NuisanceState,
    data: &GroupedDataset,
) -> Result<f64> {
    avg_renyi_eval(data, theta, &eta.evaluate(data)?, theta0, &eta0.evaluate(data)?)
}

pub fn avg_renyi_eval(
    data: &GroupedDataset,
    theta: &SparseVector,
    eval: &NuisanceEval,
    theta0: &SparseVector,
    eval0: &NuisanceEval,
) -> Result<f64> {
    let mut affinity = 0.0;
    let mut mean_term = 0.0;
    let mut diff = theta.to_dense();
    diff -= theta0.to_dense();
    let diff = SparseVector::from_dense(&diff);
    for (i, g) in data.groups().iter().enumerate() {
        let (d, d0) = (eval.cov[i].matrix(), eval0.cov[i].matrix());
        affinity += log_affinity_ratio(d, d0).map_err(|e| e.in_group(i))?;
        let mu = diff.apply(&g.x) + &eval.xi[i] - &eval0.xi[i];
        let sum = d + d0;
        mean_term += mu.dot(&chol(&sum).map_err(|e| e.in_group(i))?.solve(&mu));
    }
    let n = data.n() as f64;
    Ok(-affinity / n + mean_term / (4.0 * n))
}

/// `(d_A, d_B, d_n)` with `d_A² = n⁻¹Σ‖ξ₁ᵢ−ξ₂ᵢ‖²`, `d_B² = n⁻¹Σ‖Δ₁ᵢ−Δ₂ᵢ‖_F²`, `d_n² = d_A² + d_B²`.
pub fn pseudo_metrics(eta1: &NuisanceState, eta2: &NuisanceState, data: &GroupedDataset) -> Result<(f64, f64, f64)> {
    let e1 = eta1.evaluate(data)?;
    let e2 = eta2.evaluate(data)?;
    let n = data.n() as f64;
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..data.n() {
        a += (&e1.xi[i] - &e2.xi[i]).norm_squared();
        b += (e1.cov[i].matrix() - e2.cov[i].matrix()).norm_squared();
    }
    let (a, b) = (a / n, b / n);
    Ok((a.sqrt(), b.sqrt(), (a + b).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NpDecision {
    Reject,
    Accept,
}

/// Most powerful test of `null` against `alt`: reject when the likelihood
/// ratio of the alternative is at least one.
pub fn np_test(
    data: &GroupedDataset,
    alt: (&SparseVector, &NuisanceState),
    null: (&SparseVector, &NuisanceState),
) -> Result<NpDecision> {
    Ok(if log_likelihood_ratio(data, alt, null)? >= 0.0 {
        NpDecision::Reject
    } else {
        NpDecision::Accept
    })
}

/// The three terms of the eigenvalue sandwich
/// `ρ_max⁻²(Σ₂)‖Σ₁−Σ₂‖_F² ≤ Σ_k(d_k⁻¹−1)² ≤ ρ_min⁻²(Σ₂)‖Σ₁−Σ₂‖_F²`,
/// where `d_k` are the eigenvalues of `Σ₂^{1/2}Σ₁⁻¹Σ₂^{1/2}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenSandwich {
    pub lhs: f64,
    pub mid: f64,
    pub rhs: f64,
}

impl EigenSandwich {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.mid + slack && self.mid <= self.rhs + slack
    }
}

pub fn eigen_ratio_check(sigma1: &DMatrix<f64>, sigma2: &DMatrix<f64>) -> Result<EigenSandwich> {
    if sigma1.shape() != sigma2.shape() {
        return Err(Error::Shape("covariances of different dimension".into()));
    }
    let f1 = SpdFactor::new(sigma1.clone())?;
    let f2 = SpdFactor::new(sigma2.clone())?;
    let root2 = f2.sqrt();
    let m = &root2 * f1.inverse() * &root2;
    let d = ((&m + m.transpose()) * 0.5).symmetric_eigenvalues();
    let mid: f64 = d.iter().map(|dk| (1.0 / dk - 1.0).powi(2)).sum();
    let frob = (sigma1 - sigma2).norm_squared();
    let (lo, hi) = (f2.min_eigenvalue(), f2.max_eigenvalue());
    Ok(EigenSandwich {
        lhs: frob / (hi * hi),
        mid,
        rhs: frob / (lo * lo),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gauss_legendre;
    use crate::model::Group;
    use crate::rng::{normal_matrix, normal_vector, stream_rng};
    use crate::zoo::{FamilySpec, LinearParams, MissingParams};
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn random_spd<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
        let a = normal_matrix(rng, m, m);
        &a * a.transpose() / m as f64 + DMatrix::identity(m, m) * 0.2
    }

    fn scalar(mu: f64, var: f64) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::from_element(1, mu), DMatrix::from_element(1, 1, var))
    }

    fn pdf(x: f64, mu: f64, var: f64) -> f64 {
        (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    // composite Gauss–Legendre over ±14 sd of the wider law
    fn integrate(f: impl Fn(f64) -> f64, center: f64, half: f64) -> f64 {
        let (x, w) = gauss_legendre(20);
        let panels = 400;
        let h = 2.0 * half / panels as f64;
        let mut total = 0.0;
        for k in 0..panels {
            let a = center - half + k as f64 * h;
            for (xi, wi) in x.iter().zip(&w) {
                total += 0.5 * h * wi * f(a + 0.5 * h * (xi + 1.0));
            }
        }
        total
    }

    #[test]
    fn identical_pairs_vanish() {
        let mut rng = stream_rng(1, 0);
        let s = random_spd(&mut rng, 3);
        let mu = normal_vector(&mut rng, 3);
        let pair = GaussianPair::new(mu.clone(), s.clone(), mu, s.clone()).unwrap();
        assert!(gaussian_kl(&pair).unwrap().abs() < 1e-12);
        assert!(gaussian_kl_variation(&pair).unwrap().abs() < 1e-12);
        assert!(bhattacharyya(&pair).unwrap().abs() < 1e-12);
        assert!(affinity_defect(&s, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scalar_closed_forms_match_quadrature() {
        let (m1, s1) = scalar(0.0, 1.0);
        let (m2, s2) = scalar(0.0, 2.0);
        let pair = GaussianPair::new(m1, s1, m2, s2).unwrap();
        let kl = gaussian_kl(&pair).unwrap();
        assert_relative_eq!(kl, 0.5 * (2f64.ln() - 0.5), epsilon = 1e-12);
        let q = integrate(|x| pdf(x, 0.0, 1.0) * (pdf(x, 0.0, 1.0) / pdf(x, 0.0, 2.0)).ln(), 0.0, 20.0);
        assert_relative_eq!(kl, q, epsilon = 1e-10);

        let (m1, s1) = scalar(1.5, 1.0);
        let (m2, s2) = scalar(0.0, 1.0);
        let pair = GaussianPair::new(m1, s1, m2, s2).unwrap();
        assert_relative_eq!(gaussian_kl_variation(&pair).unwrap(), 2.25, epsilon = 1e-12);
        assert_relative_eq!(bhattacharyya(&pair).unwrap(), 2.25 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn affinity_defect_scalar_and_eigen_form() {
        let g = affinity_defect(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_relative_eq!(g, 1.0 - 4f64.powf(0.25) / 2.5f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(g, 0.105_572_809, epsilon = 1e-8);
        // eigen form: ∏(½(d^{1/2} + d^{−1/2}))^{−1/2} with d eigenvalues of Σ₂^{-1/2}Σ₁Σ₂^{-1/2}
        let mut rng = stream_rng(2, 0);
        let s1 = random_spd(&mut rng, 4);
        let s2 = random_spd(&mut rng, 4);
        let f2 = SpdFactor::new(s2.clone()).unwrap();
        let m = f2.inv_sqrt() * &s1 * f2.inv_sqrt();
        let d = ((&m + m.transpose()) * 0.5).symmetric_eigenvalues();
        let prod: f64 = d.iter().map(|dk| (0.5 * (dk.sqrt() + 1.0 / dk.sqrt())).powf(-0.5)).product();
        assert_relative_eq!(affinity_defect(&s1, &s2).unwrap(), 1.0 - prod, epsilon = 1e-12);
    }

    #[test]
    fn affinity_defect_is_locally_quadratic() {
        let mut rng = stream_rng(3, 0);
        let s = random_spd(&mut rng, 3);
        let e = normal_matrix(&mut rng, 3, 3);
        let e = (&e + e.transpose()) * 0.5;
        let ratios: Vec<f64> = [1e-2, 5e-3, 1e-3]
            .iter()
            .map(|&t| affinity_defect(&(&s + &e * t), &s).unwrap() / (&e * t).norm_squared())
            .collect();
        assert!(ratios.iter().all(|&r| r > 1e-3));
        assert_relative_eq!(ratios[1], ratios[2], max_relative = 0.05);
    }

    #[test]
    fn renyi_matches_scalar_quadrature() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -0.5]);
        let data = GroupedDataset::new(1, vec![Group::new(DVector::zeros(1), x.rows(0, 1).into_owned()), Group::new(DVector::zeros(1), x.rows(1, 1).into_owned())]).unwrap();
        let theta = SparseVector::from_pairs(1, [(0, 0.8)]).unwrap();
        let eta = FamilySpec::Linear(LinearParams { sigma2: 1.3 });
        let eta0 = FamilySpec::Linear(LinearParams { sigma2: 0.6 });
        let r = avg_renyi(&theta, &eta, &SparseVector::zeros(1), &eta0, &data).unwrap();
        let mut oracle = 0.0;
        for xi in [1.0, -0.5] {
            let mu = 0.8 * xi;
            oracle += -integrate(|y| (pdf(y, mu, 1.3) * pdf(y, 0.0, 0.6)).sqrt(), 0.0, 20.0).ln();
        }
        assert_relative_eq!(r, oracle / 2.0, epsilon = 1e-9);
        // equal variances reduce to d²/(8σ²)
        let r = avg_renyi(&theta, &eta0, &SparseVector::zeros(1), &eta0, &data).unwrap();
        let expect = ((0.8f64).powi(2) + (0.4f64).powi(2)) / (8.0 * 0.6) / 2.0;
        assert_relative_eq!(r, expect, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_metric_cases() {
        let data = GroupedDataset::new(1, vec![Group::new(DVector::zeros(2), DMatrix::zeros(2, 1))]).unwrap();
        let a = FamilySpec::Linear(LinearParams { sigma2: 1.0 });
        assert_eq!(pseudo_metrics(&a, &a, &data).unwrap(), (0.0, 0.0, 0.0));
        let b = FamilySpec::Linear(LinearParams { sigma2: 2.0 });
        let (da, db, dn) = pseudo_metrics(&a, &b, &data).unwrap();
        assert_eq!(da, 0.0);
        assert_relative_eq!(db, 2f64.sqrt());
        assert_relative_eq!(dn, db);
    }

    #[test]
    fn pseudo_metric_mean_gap() {
        use crate::zoo::{PartialLinearParams};
        use crate::splines::SplineBasis;
        let basis = SplineBasis::new(4, 4).unwrap();
        let mut meta = crate::model::GroupMeta::default();
        meta.z = Some(0.0);
        let data = GroupedDataset::new(1, vec![Group::new(DVector::zeros(1), DMatrix::zeros(1, 1)).with_meta(meta)]).unwrap();
        let mk = |b0: f64| FamilySpec::PartialLinear(PartialLinearParams { beta: DVector::from_vec(vec![b0, 0.0, 0.0, 0.0]), sigma2: 1.0, basis: basis.clone() });
        let (da, db, _) = pseudo_metrics(&mk(0.0), &mk(5.0), &data).unwrap();
        assert_relative_eq!(da, 5.0);
        assert_eq!(db, 0.0);
    }

    #[test]
    fn sandwich_collapses_for_identity() {
        let mut rng = stream_rng(4, 0);
        let s1 = random_spd(&mut rng, 4);
        let id = DMatrix::identity(4, 4);
        let t = eigen_ratio_check(&s1, &id).unwrap();
        let frob = (&s1 - &id).norm_squared();
        assert_relative_eq!(t.lhs, frob, epsilon = 1e-12);
        assert_relative_eq!(t.rhs, frob, epsilon = 1e-12);
        let d = s1.clone().try_inverse().unwrap().symmetric_eigenvalues();
        let mid: f64 = d.iter().map(|dk| (1.0 / dk - 1.0).powi(2)).sum();
        assert_relative_eq!(t.mid, mid, epsilon = 1e-10);
        assert_relative_eq!(t.mid, frob, epsilon = 1e-10);
        let z = eigen_ratio_check(&s1, &s1).unwrap();
        assert!(z.lhs.abs() < 1e-20 && z.mid.abs() < 1e-20 && z.rhs.abs() < 1e-20);
    }

    #[test]
    fn np_test_follows_likelihood_ratio() {
        let mut rng = stream_rng(5, 0);
        let x = normal_matrix(&mut rng, 20, 1);
        let theta1 = SparseVector::from_pairs(1, [(0, 3.0)]).unwrap();
        let zero = SparseVector::zeros(1);
        let eta = FamilySpec::Linear(LinearParams { sigma2: 1.0 });
        let groups: Vec<Group> = (0..20).map(|i| Group::new(DVector::from_element(1, 3.0 * x[(i, 0)]), x.rows(i, 1).into_owned())).collect();
        let data = GroupedDataset::new(1, groups).unwrap();
        assert_eq!(np_test(&data, (&theta1, &eta), (&zero, &eta)).unwrap(), NpDecision::Reject);
        assert_eq!(np_test(&data, (&zero, &eta), (&theta1, &eta)).unwrap(), NpDecision::Accept);
        assert_eq!(np_test(&data, (&zero, &eta), (&zero, &eta)).unwrap(), NpDecision::Reject);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn kl_nonnegative_and_renyi_symmetric(seed in 0u64..100_000, r in 1usize..5) {
            let mut rng = stream_rng(seed, 0);
            let pair = GaussianPair::new(normal_vector(&mut rng, r), random_spd(&mut rng, r), normal_vector(&mut rng, r), random_spd(&mut rng, r)).unwrap();
            prop_assert!(gaussian_kl(&pair).unwrap() > 0.0);
            prop_assert!(gaussian_kl_variation(&pair).unwrap() >= 0.0);
            let swapped = GaussianPair::new(pair.mu2.clone(), pair.sigma2.clone(), pair.mu1.clone(), pair.sigma1.clone()).unwrap();
            prop_assert!((bhattacharyya(&pair).unwrap() - bhattacharyya(&swapped).unwrap()).abs() <= 1e-10);
            // dropping the mean term never increases the value
            prop_assert!(bhattacharyya(&pair).unwrap() >= -log_affinity_ratio(&pair.sigma1, &pair.sigma2).unwrap());
            let g = affinity_defect(&pair.sigma1, &pair.sigma2).unwrap();
            prop_assert!((0.0..1.0).contains(&g));
        }

        #[test]
        fn sandwich_holds(seed in 0u64..100_000, r in 1usize..=8) {
            let mut rng = stream_rng(seed, 1);
            let t = eigen_ratio_check(&random_spd(&mut rng, r), &random_spd(&mut rng, r)).unwrap();
            prop_assert!(t.holds(1e-10 * t.rhs.max(1.0)));
        }

        #[test]
        fn pseudo_metric_triangle_inequality(seed in 0u64..100_000) {
            let mut rng = stream_rng(seed, 2);
            let data = GroupedDataset::new(1, vec![Group::new(DVector::zeros(3), DMatrix::zeros(3, 1))]).unwrap();
            let etas: Vec<FamilySpec> = (0..3).map(|_| FamilySpec::MissingResponse(MissingParams { sigma: random_spd(&mut rng, 3) })).collect();
            let d = |a: usize, b: usize| pseudo_metrics(&etas[a], &etas[b], &data).unwrap().2;
            prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        }
    }
}
