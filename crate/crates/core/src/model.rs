//! Grouped Gaussian regression: data containers, sparse coefficients,
//! likelihood evaluation and whitening.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{serde_rows, serde_rows_opt, SpdFactor, LN_2PI};
use crate::zoo::FamilySpec;

/// The nuisance parameter `η` is the family-tagged parameter bundle.
pub type NuisanceState = FamilySpec;

/// Optional per-group payload consumed by the families that need it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMeta {
    /// Which of the `m̄` coordinates were observed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<bool>>,
    /// Scalar covariate in `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    /// Random-effect design `Z_i` (`m_i × q`).
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "serde_rows_opt"
    )]
    pub random_design: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub meta: GroupMeta,
}

impl Group {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Self {
        Self {
            y,
            x,
            meta: GroupMeta::default(),
        }
    }

    pub fn with_meta(mut self, meta: GroupMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `n` independent response groups sharing the coefficient dimension `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    p: usize,
    groups: Vec<Group>,
    offsets: Vec<usize>,
}

impl GroupedDataset {
    pub fn new(p: usize, groups: Vec<Group>) -> Result<Self> {
        if p == 0 {
            return Err(Error::Shape("p must be positive".into()));
        }
        if groups.is_empty() {
            return Err(Error::Shape("dataset needs at least one group".into()));
        }
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        offsets.push(0);
        for (i, g) in groups.iter().enumerate() {
            if g.y.is_empty() {
                return Err(Error::EmptyGroup(i));
            }
            if g.x.nrows() != g.y.len() || g.x.ncols() != p {
                return Err(Error::Shape(format!(
                    "group {i}: x is {}x{}, expected {}x{p}",
                    g.x.nrows(),
                    g.x.ncols(),
                    g.y.len()
                )));
            }
            if let Some(z) = g.meta.z {
                if !(0.0..=1.0).contains(&z) {
                    return Err(Error::ParamRange(format!("group {i}: z = {z} outside [0, 1]")));
                }
            }
            if let Some(zd) = &g.meta.random_design {
                if zd.nrows() != g.y.len() {
                    return Err(Error::Shape(format!(
                        "group {i}: random-effect design has {} rows, expected {}",
                        zd.nrows(),
                        g.y.len()
                    )));
                }
            }
            offsets.push(offsets[i] + g.y.len());
        }
        Ok(Self { p, groups, offsets })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of groups.
    pub fn n(&self) -> usize {
        self.groups.len()
    }

    /// Total response length `n_*`.
    pub fn n_star(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &Group {
        &self.groups[i]
    }

    /// First stacked row of each group, followed by `n_*`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_star(), self.p);
        for (g, &off) in self.groups.iter().zip(&self.offsets) {
            out.rows_mut(off, g.len()).copy_from(&g.x);
        }
        out
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_star());
        for (g, &off) in self.groups.iter().zip(&self.offsets) {
            out.rows_mut(off, g.len()).copy_from(&g.y);
        }
        out
    }

    /// Same data with the groups reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let groups = order.iter().map(|&i| self.groups[i].clone()).collect();
        Self::new(self.p, groups)
    }

    /// Leading `n` groups.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.p, self.groups[..n.min(self.n())].to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DatasetFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    p: usize,
    n: usize,
    groups: Vec<GroupFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupFile {
    y: Vec<f64>,
    #[serde(with = "serde_rows")]
    x: DMatrix<f64>,
    #[serde(default)]
    meta: GroupMeta,
}

impl From<&GroupedDataset> for DatasetFile {
    fn from(d: &GroupedDataset) -> Self {
        Self {
            p: d.p,
            n: d.n(),
            groups: d
                .groups
                .iter()
                .map(|g| GroupFile {
                    y: g.y.iter().copied().collect(),
                    x: g.x.clone(),
                    meta: g.meta.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<DatasetFile> for GroupedDataset {
    type Error = Error;

    fn try_from(f: DatasetFile) -> Result<Self> {
        if f.n != f.groups.len() {
            return Err(Error::Shape(format!(
                "header says n = {} but {} groups present",
                f.n,
                f.groups.len()
            )));
        }
        let groups = f
            .groups
            .into_iter()
            .map(|g| {
                let x = if g.x.nrows() == 0 {
                    DMatrix::zeros(0, f.p)
                } else {
                    g.x
                };
                Group {
                    y: DVector::from_vec(g.y),
                    x,
                    meta: g.meta,
                }
            })
            .collect();
        GroupedDataset::new(f.p, groups)
    }
}

/// Coefficient vector stored by its support (0-based, strictly increasing)
/// and the nonzero values on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SparseVectorFile", into = "SparseVectorFile")]
pub struct SparseVector {
    p: usize,
    support: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseVectorFile {
    p: usize,
    support: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<SparseVectorFile> for SparseVector {
    type Error = Error;

    fn try_from(f: SparseVectorFile) -> Result<Self> {
        if f.support.len() != f.values.len() {
            return Err(Error::Shape("support and values differ in length".into()));
        }
        SparseVector::from_pairs(f.p, f.support.into_iter().zip(f.values))
    }
}

impl From<SparseVector> for SparseVectorFile {
    fn from(v: SparseVector) -> Self {
        Self {
            p: v.p,
            support: v.support,
            values: v.values,
        }
    }
}

impl SparseVector {
    pub fn zeros(p: usize) -> Self {
        Self {
            p,
            support: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Canonicalizes: sorts by index and drops explicit zeros.
    pub fn from_pairs(p: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut pairs: Vec<(usize, f64)> = pairs.into_iter().collect();
        pairs.sort_by_key(|&(j, _)| j);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Shape(format!("duplicate index {}", w[0].0)));
            }
        }
        if let Some(&(j, _)) = pairs.last() {
            if j >= p {
                return Err(Error::Shape(format!("index {j} out of range for p = {p}")));
            }
        }
        if pairs.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient value".into()));
        }
        let (support, values) = pairs.into_iter().filter(|&(_, v)| v != 0.0).unzip();
        Ok(Self { p, support, values })
    }

    pub fn from_support(p: usize, support: &[usize], values: &[f64]) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::Shape("support and values differ in length".into()));
        }
        Self::from_pairs(p, support.iter().copied().zip(values.iter().copied()))
    }

    pub fn from_dense(v: &DVector<f64>) -> Self {
        Self::from_pairs(v.len(), v.iter().copied().enumerate()).expect("dense vector is canonical")
    }

    pub fn to_dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.p);
        for (&j, &v) in self.support.iter().zip(&self.values) {
            out[j] = v;
        }
        out
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Support size `s_θ`.
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn norm_l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// `X θ` using only the columns in the support.
    pub fn apply(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.nrows());
        for (&j, &v) in self.support.iter().zip(&self.values) {
            out.axpy(v, &x.column(j), 1.0);
        }
        out
    }
}

/// Per-group mean shifts `ξ_{η,i}` and covariance factors `Δ_{η,i}`.
///
/// Groups with identical covariances share one factor.
#[derive(Clone, Debug)]
pub struct NuisanceEval {
    pub xi: Vec<DVector<f64>>,
    pub cov: Vec<Arc<SpdFactor>>,
}

impl NuisanceEval {
    pub fn n(&self) -> usize {
        self.xi.len()
    }

    pub fn log_likelihood(&self, data: &GroupedDataset, theta: &SparseVector) -> Result<f64> {
        self.check(data, theta)?;
        let mut total = 0.0;
        for (i, g) in data.groups().iter().enumerate() {
            let r = &g.y - theta.apply(&g.x) - &self.xi[i];
            total += gaussian_log_density(&r, &self.cov[i]);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("log-likelihood".into()));
        }
        Ok(total)
    }

    fn check(&self, data: &GroupedDataset, theta: &SparseVector) -> Result<()> {
        if theta.p() != data.p() {
            return Err(Error::Shape(format!(
                "theta has dimension {}, data has p = {}",
                theta.p(),
                data.p()
            )));
        }
        if self.n() != data.n() {
            return Err(Error::Shape("nuisance evaluated on a different dataset".into()));
        }
        Ok(())
    }
}

/// `log N(r; 0, Δ)`.
pub fn gaussian_log_density(r: &DVector<f64>, cov: &SpdFactor) -> f64 {
    -0.5 * (r.len() as f64 * LN_2PI + cov.log_det() + cov.inv_quad(r))
}

/// `Σ_i log N(y_i; X_i θ + ξ_{η,i}, Δ_{η,i})`.
pub fn log_likelihood(data: &GroupedDataset, theta: &SparseVector, eta: &NuisanceState) -> Result<f64> {
    eta.evaluate(data)?.log_likelihood(data, theta)
}

pub fn log_likelihood_ratio(
    data: &GroupedDataset,
    num: (&SparseVector, &NuisanceState),
    den: (&SparseVector, &NuisanceState),
) -> Result<f64> {
    Ok(log_likelihood(data, num.0, num.1)? - log_likelihood(data, den.0, den.1)?)
}

/// Design, mean shift and response premultiplied blockwise by `Δ_{η₀,i}^{-1/2}`.
#[derive(Clone, Debug)]
pub struct WhitenedDesign {
    pub x_tilde: DMatrix<f64>,
    pub xi_tilde: DVector<f64>,
    pub y_tilde: DVector<f64>,
    pub offsets: Vec<usize>,
}

impl WhitenedDesign {
    /// Standardized residual `U = ỹ − X̃θ₀ − ξ̃`.
    pub fn u(&self, theta0: &SparseVector) -> DVector<f64> {
        &self.y_tilde - theta0.apply(&self.x_tilde) - &self.xi_tilde
    }
}

pub fn whiten(data: &GroupedDataset, eta0: &NuisanceState) -> Result<WhitenedDesign> {
    whiten_with(data, &eta0.evaluate(data)?)
}

pub fn whiten_with(data: &GroupedDataset, eval: &NuisanceEval) -> Result<WhitenedDesign> {
    let n_star = data.n_star();
    let mut x_tilde = DMatrix::zeros(n_star, data.p());
    let mut xi_tilde = DVector::zeros(n_star);
    let mut y_tilde = DVector::zeros(n_star);
    for (i, g) in data.groups().iter().enumerate() {
        let off = data.offsets()[i];
        let w = eval.cov[i].inv_sqrt();
        x_tilde.rows_mut(off, g.len()).copy_from(&(w * &g.x));
        xi_tilde.rows_mut(off, g.len()).copy_from(&(w * &eval.xi[i]));
        y_tilde.rows_mut(off, g.len()).copy_from(&(w * &g.y));
    }
    Ok(WhitenedDesign {
        x_tilde,
        xi_tilde,
        y_tilde,
        offsets: data.offsets().to_vec(),
    })
}

/// Blocks `Δ_{η₀,i}^{-1/2}(y_i − X_iθ₀ − ξ_{η₀,i})`.
pub fn standardized_residual(
    data: &GroupedDataset,
    theta0: &SparseVector,
    eta0: &NuisanceState,
) -> Result<DVector<f64>> {
    Ok(whiten(data, eta0)?.u(theta0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, normal_vector, stream_rng};
    use crate::zoo::{LinearParams, MissingParams};
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn linear(sigma2: f64) -> NuisanceState {
        FamilySpec::Linear(LinearParams { sigma2 })
    }

    fn random_spd(rng: &mut rand_chacha::ChaCha8Rng, m: usize) -> DMatrix<f64> {
        let a = normal_matrix(rng, m, m);
        &a * a.transpose() + DMatrix::identity(m, m) * 0.5
    }

    // Dense density via LU inverse and determinant, no eigen factors.
    fn dense_mvn_log_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let r = y - mean;
        let lu = cov.clone().lu();
        let inv = lu.try_inverse().unwrap();
        let det = cov.determinant();
        -0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + (r.transpose() * inv * &r)[0])
    }

    fn missing_dataset(seed: u64) -> (GroupedDataset, DMatrix<f64>, SparseVector) {
        let mut rng = stream_rng(seed, 0);
        let sigma = random_spd(&mut rng, 3);
        let patterns = [vec![true, true, true], vec![true, false, true], vec![false, true, false]];
        let groups = patterns
            .iter()
            .map(|pat| {
                let m = pat.iter().filter(|b| **b).count();
                Group::new(normal_vector(&mut rng, m), normal_matrix(&mut rng, m, 4)).with_meta(GroupMeta {
                    pattern: Some(pat.clone()),
                    ..Default::default()
                })
            })
            .collect();
        let data = GroupedDataset::new(4, groups).unwrap();
        let theta = SparseVector::from_pairs(4, [(1, 0.7), (3, -1.2)]).unwrap();
        (data, sigma, theta)
    }

    #[test]
    fn scalar_standard_normal_at_zero() {
        let data = GroupedDataset::new(1, vec![Group::new(DVector::zeros(1), DMatrix::zeros(1, 1))]).unwrap();
        let ll = log_likelihood(&data, &SparseVector::zeros(1), &linear(1.0)).unwrap();
        assert_relative_eq!(ll, -0.918_938_533_204_672_8, epsilon = 1e-12);
    }

    #[test]
    fn bivariate_zero_residual() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let data = GroupedDataset::new(1, vec![Group::new(DVector::from_vec(vec![0.5, 1.0]), x)]).unwrap();
        let theta = SparseVector::from_pairs(1, [(0, 0.5)]).unwrap();
        let ll = log_likelihood(&data, &theta, &linear(1.0)).unwrap();
        assert_relative_eq!(ll, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn likelihood_matches_dense_density_oracle() {
        let (data, sigma, theta) = missing_dataset(11);
        let eta = FamilySpec::MissingResponse(MissingParams { sigma: sigma.clone() });
        let ll = log_likelihood(&data, &theta, &eta).unwrap();
        let mut oracle = 0.0;
        for g in data.groups() {
            let idx: Vec<usize> = g.meta.pattern.as_ref().unwrap().iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j).collect();
            let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| sigma[(idx[a], idx[b])]);
            let mean = &g.x * theta.to_dense();
            oracle += dense_mvn_log_density(&g.y, &mean, &cov);
        }
        assert_relative_eq!(ll, oracle, epsilon = 1e-10, max_relative = 1e-12);
    }

    #[test]
    fn likelihood_ratio_is_antisymmetric_difference() {
        let (data, sigma, theta) = missing_dataset(12);
        let eta = FamilySpec::MissingResponse(MissingParams { sigma: sigma.clone() });
        let eta2 = FamilySpec::MissingResponse(MissingParams { sigma: sigma * 2.0 });
        let zero = SparseVector::zeros(4);
        let a = log_likelihood_ratio(&data, (&theta, &eta), (&zero, &eta2)).unwrap();
        let b = log_likelihood_ratio(&data, (&zero, &eta2), (&theta, &eta)).unwrap();
        assert_eq!(a, -b);
        assert_eq!(log_likelihood_ratio(&data, (&theta, &eta), (&theta, &eta)).unwrap(), 0.0);
        let direct = log_likelihood(&data, &theta, &eta).unwrap() - log_likelihood(&data, &zero, &eta2).unwrap();
        assert_relative_eq!(a, direct, epsilon = 1e-12);
    }

    #[test]
    fn likelihood_invariant_under_group_permutation() {
        let (data, sigma, theta) = missing_dataset(13);
        let eta = FamilySpec::MissingResponse(MissingParams { sigma });
        let a = log_likelihood(&data, &theta, &eta).unwrap();
        let b = log_likelihood(&data.permuted(&[2, 0, 1]).unwrap(), &theta, &eta).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn non_spd_covariance_names_group() {
        // valid parameters whose group covariance is numerically singular
        let mut groups = Vec::new();
        for m in [1usize, 3] {
            let zd = DMatrix::from_element(m, 1, 1.0);
            groups.push(Group::new(DVector::zeros(m), DMatrix::zeros(m, 2)).with_meta(GroupMeta {
                random_design: Some(zd),
                ..Default::default()
            }));
        }
        let data = GroupedDataset::new(2, groups).unwrap();
        let eta = FamilySpec::MixedEffects(crate::zoo::MixedParams {
            psi: DMatrix::from_element(1, 1, 1.0),
            sigma2: 1e-13,
        });
        let err = log_likelihood(&data, &SparseVector::zeros(2), &eta).unwrap_err();
        assert!(matches!(err, Error::NotSpd { group: Some(1), .. }), "{err}");
        assert!(err.to_string().contains("group 1"));
    }

    #[test]
    fn identity_and_scalar_whitening() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let data = GroupedDataset::new(2, vec![Group::new(DVector::zeros(2), x.clone())]).unwrap();
        assert_eq!(whiten(&data, &linear(1.0)).unwrap().x_tilde, x);
        assert_relative_eq!(whiten(&data, &linear(4.0)).unwrap().x_tilde, x / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn whitened_gram_matches_inverse_accumulation() {
        let (data, sigma, _) = missing_dataset(15);
        let eta = FamilySpec::MissingResponse(MissingParams { sigma: sigma.clone() });
        let w = whiten(&data, &eta).unwrap();
        let mut oracle = DMatrix::zeros(4, 4);
        for g in data.groups() {
            let idx: Vec<usize> = g.meta.pattern.as_ref().unwrap().iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j).collect();
            let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| sigma[(idx[a], idx[b])]);
            oracle += g.x.transpose() * cov.try_inverse().unwrap() * &g.x;
        }
        assert_relative_eq!(w.x_tilde.transpose() * &w.x_tilde, oracle, max_relative = 1e-9);
    }

    #[test]
    fn residual_vanishes_at_truth_and_reduces_to_plain_residual() {
        let (data, sigma, theta) = missing_dataset(16);
        let eta = FamilySpec::MissingResponse(MissingParams { sigma });
        let exact: Vec<Group> = data
            .groups()
            .iter()
            .map(|g| Group::new(theta.apply(&g.x), g.x.clone()).with_meta(g.meta.clone()))
            .collect();
        let exact = GroupedDataset::new(4, exact).unwrap();
        let u = standardized_residual(&exact, &theta, &eta).unwrap();
        assert!(u.amax() < 1e-12);

        let u = standardized_residual(&data, &theta, &linear(1.0));
        // plain linear family ignores the pattern payload
        let u = u.unwrap();
        let direct = data.stacked_y() - data.stacked_x() * theta.to_dense();
        assert_relative_eq!(u, direct, epsilon = 1e-12);
    }

    #[test]
    fn residual_moments_at_truth() {
        let mut rng = stream_rng(17, 0);
        let sigma = random_spd(&mut rng, 3);
        let chol = sigma.clone().cholesky().unwrap().l();
        let x = normal_matrix(&mut rng, 3, 2);
        let theta = SparseVector::from_pairs(2, [(0, 1.0)]).unwrap();
        let eta = FamilySpec::MissingResponse(MissingParams { sigma });
        let reps = 10_000;
        let pattern = GroupMeta {
            pattern: Some(vec![true; 3]),
            ..Default::default()
        };
        let groups: Vec<Group> = (0..reps)
            .map(|_| {
                let y = theta.apply(&x) + &chol * normal_vector(&mut rng, 3);
                Group::new(y, x.clone()).with_meta(pattern.clone())
            })
            .collect();
        let data = GroupedDataset::new(2, groups).unwrap();
        let u = standardized_residual(&data, &theta, &eta).unwrap();
        let mut mean = DVector::zeros(3);
        let mut cov = DMatrix::zeros(3, 3);
        for i in 0..reps {
            let b = u.rows(3 * i, 3).into_owned();
            mean += &b;
            cov += &b * b.transpose();
        }
        mean /= reps as f64;
        cov = cov / reps as f64 - &mean * mean.transpose();
        let n = reps as f64;
        assert!(mean.amax() <= 4.0 / n.sqrt());
        assert!((cov - DMatrix::<f64>::identity(3, 3)).amax() <= 10.0 * (1.0 / n).sqrt());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let (data, _, _) = missing_dataset(18);
        let mut groups = data.groups().to_vec();
        groups[0].meta.z = Some(0.1 + 0.2);
        groups[1].meta.random_design = Some(DMatrix::from_row_slice(2, 1, &[1.0 / 3.0, std::f64::consts::E]));
        let data = GroupedDataset::new(4, groups).unwrap();
        let back = GroupedDataset::from_json(&data.to_json().unwrap()).unwrap();
        assert_eq!(back, data);
        for (a, b) in back.groups().iter().zip(data.groups()) {
            for (u, v) in a.x.iter().zip(b.x.iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn sparse_vector_is_canonical() {
        let v = SparseVector::from_pairs(5, [(3, 1.0), (0, 0.0), (1, -2.0)]).unwrap();
        assert_eq!(v.support(), &[1, 3]);
        assert_eq!(v.values(), &[-2.0, 1.0]);
        assert!(SparseVector::from_pairs(5, [(5, 1.0)]).is_err());
        assert!(SparseVector::from_pairs(5, [(1, 1.0), (1, 2.0)]).is_err());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<SparseVector>(&json).unwrap(), v);
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        let g = Group::new(DVector::zeros(2), DMatrix::zeros(3, 2));
        assert!(matches!(GroupedDataset::new(2, vec![g]), Err(Error::Shape(_))));
        let g = Group::new(DVector::zeros(0), DMatrix::zeros(0, 2));
        assert!(matches!(GroupedDataset::new(2, vec![g]), Err(Error::EmptyGroup(0))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn whitening_is_an_isometry(seed in 0u64..10_000) {
            let (data, sigma, _) = missing_dataset(seed);
            let mut rng = stream_rng(seed, 1);
            let theta = SparseVector::from_dense(&normal_vector(&mut rng, 4));
            let eta = FamilySpec::MissingResponse(MissingParams { sigma: sigma.clone() });
            let w = whiten(&data, &eta).unwrap();
            let lhs = theta.apply(&w.x_tilde).norm_squared();
            let rhs: f64 = data
                .groups()
                .iter()
                .map(|g| {
                    let cov = crate::zoo::missing_covariance(&sigma, g.meta.pattern.as_ref().unwrap()).unwrap();
                    let v = theta.apply(&g.x);
                    (v.transpose() * cov.try_inverse().unwrap() * &v)[0]
                })
                .sum();
            prop_assert!((lhs - rhs).abs() <= 1e-8 * rhs.max(1e-300));
        }
    }
}
