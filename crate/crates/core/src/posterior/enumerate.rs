use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{SupportEntry, SupportPosterior};
use crate::diagnostics::DEFAULT_BUDGET;
use crate::error::{Error, Result};
use crate::linalg::{
    gauss_legendre, ln_binomial, log_add_exp, log_norm_cdf, log_sum_exp, norm_log_pdf, principal_submatrix,
    support_count, supports_up_to, LN_2PI,
};
use crate::model::{whiten, GroupedDataset, NuisanceState};
use crate::priors::{dimension_log_prior, SpikeSlabSpec};

/// Whitened Gram matrix `X̃ᵀX̃` and score `X̃ᵀ(ỹ − ξ̃)` at fixed `η`.
fn sufficient_statistics(data: &GroupedDataset, eta: &NuisanceState) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let w = whiten(data, eta)?;
    let target = &w.y_tilde - &w.xi_tilde;
    Ok((w.x_tilde.transpose() * &w.x_tilde, w.x_tilde.transpose() * target))
}

pub(crate) fn check_budget(p: usize, s_max: usize) -> Result<Vec<Vec<usize>>> {
    let needed = support_count(p, s_max);
    if needed > DEFAULT_BUDGET {
        return Err(Error::Budget {
            needed,
            budget: DEFAULT_BUDGET,
        });
    }
    Ok(supports_up_to(p, s_max).collect())
}

fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |a, _| v[idx[a]])
}

pub(crate) fn size_log_prior(spec: &SpikeSlabSpec, s: usize) -> Result<f64> {
    Ok(dimension_log_prior(s, spec)? - ln_binomial(spec.p, s))
}

/// Exact support posterior at known `η` under the slab `θ_j ~ N(0, 1/precision)`.
pub fn enumerate_posterior_normal_slab(
    data: &GroupedDataset,
    spec: &SpikeSlabSpec,
    eta: &NuisanceState,
    s_max: usize,
    precision: f64,
) -> Result<SupportPosterior> {
    if !(precision > 0.0 && precision.is_finite()) {
        return Err(Error::ParamRange(format!("slab precision {precision}")));
    }
    spec.validate()?;
    if spec.p != data.p() {
        return Err(Error::Shape(format!("prior has p = {}, data has p = {}", spec.p, data.p())));
    }
    let supports = check_budget(data.p(), s_max)?;
    let (g, b) = sufficient_statistics(data, eta)?;
    let results: Vec<Result<(SupportEntry, bool)>> = supports
        .into_par_iter()
        .map(|s| {
            let k = s.len();
            let mut a = principal_submatrix(&g, &s);
            for j in 0..k {
                a[(j, j)] += precision;
            }
            let bs = subvector(&b, &s);
            let (chol, ridge) = match a.clone().cholesky() {
                Some(c) => (c, false),
                None => {
                    let eps = 1e-8 * (a.trace() / k.max(1) as f64).max(1.0);
                    let c = (a + DMatrix::identity(k, k) * eps).cholesky().ok_or(Error::Singular(format!("slab-regularized Gram at {s:?}")))?;
                    (c, true)
                }
            };
            let mean = chol.solve(&bs);
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_ev = 0.5 * k as f64 * precision.ln() - 0.5 * log_det + 0.5 * bs.dot(&mean);
            let mut e = SupportEntry::new(s.clone(), size_log_prior(spec, k)? + log_ev);
            e.mean = Some(mean.iter().copied().collect());
            e.cov = Some(chol.inverse());
            Ok((e, ridge))
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut flags = Vec::new();
    for r in results {
        let (e, ridge) = r?;
        if ridge {
            flags.push(format!("ridge fallback at support {:?}", e.support));
        }
        entries.push(e);
    }
    SupportPosterior::from_log_weights(data.p(), entries, flags)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureOptions {
    /// Relative change between refinement levels accepted as converged.
    pub tol: f64,
    /// Relative change above which a result is flagged.
    pub flag_tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            flag_tol: 1e-4,
        }
    }
}

/// `log ∫ exp(−½θᵀGθ + bᵀθ − λ‖θ‖₁) dθ` together with the mean and
/// covariance of the normalized integrand.
#[derive(Clone, Debug)]
pub struct LaplaceIntegral {
    pub log_value: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Relative change at the last refinement.
    pub rel_change: f64,
    pub converged: bool,
    pub ridge: bool,
}

/// Integral of `exp(−½aθ² + cθ − λ|θ|)` over the line, with the first two
/// moments of the normalized integrand.
#[derive(Clone, Copy, Debug)]
struct LastCoordinate {
    log_mass: f64,
    m1: f64,
    m2: f64,
}

/// `φ(x)/Φ(x)`.
fn mills(x: f64) -> f64 {
    (norm_log_pdf(x) - log_norm_cdf(x)).exp()
}

/// Variance factor `1 − xρ(x) − ρ(x)²` of a normal truncated to `(−x, ∞)` after standardization.
fn truncated_var_factor(x: f64) -> f64 {
    if x < -30.0 {
        let e = 1.0 / (x * x);
        e * (1.0 + e * (-6.0 + e * (50.0 - 518.0 * e)))
    } else {
        let r = mills(x);
        (1.0 - x * r - r * r).max(0.0)
    }
}

fn last_coordinate(a: f64, c: f64, lambda: f64) -> LastCoordinate {
    let sa = a.sqrt();
    let (xp, xn) = ((c - lambda) / sa, -(c + lambda) / sa);
    let lp = 0.5 * xp * xp + log_norm_cdf(xp);
    let ln = 0.5 * xn * xn + log_norm_cdf(xn);
    let total = log_add_exp(lp, ln);
    let (wp, wn) = ((lp - total).exp(), (ln - total).exp());
    let mean_p = (xp + mills(xp)) / sa;
    let mean_n = -(xn + mills(xn)) / sa;
    let second_p = truncated_var_factor(xp) / a + mean_p * mean_p;
    let second_n = truncated_var_factor(xn) / a + mean_n * mean_n;
    LastCoordinate {
        log_mass: 0.5 * (LN_2PI - a.ln()) + total,
        m1: wp * mean_p + wn * mean_n,
        m2: wp * second_p + wn * second_n,
    }
}

// (Gauss–Legendre nodes per panel, panel subdivision)
const LEVELS: [(usize, usize); 5] = [(6, 1), (12, 1), (24, 1), (24, 2), (24, 4)];

/// Composite Gauss–Legendre nodes and log-weights on `[lo, hi]`, with a break
/// at zero and panels no wider than `2·sd/split`.
fn axis_nodes(lo: f64, hi: f64, sd: f64, order: usize, split: usize, rule: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    let mut cuts = vec![lo];
    if lo < 0.0 && hi > 0.0 {
        cuts.push(0.0);
    }
    cuts.push(hi);
    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        let panels = ((len / (2.0 * sd)).ceil() as usize).max(1) * split;
        let h = len / panels as f64;
        for k in 0..panels {
            let a = w[0] + k as f64 * h;
            for (x, wt) in rule.0.iter().zip(&rule.1).take(order) {
                out.push((a + 0.5 * h * (x + 1.0), (0.5 * h * wt).ln()));
            }
        }
    }
    out
}

/// Evaluates the Laplace-slab integral by integrating the last coordinate in
/// closed form and the others by tensor Gauss–Legendre over a box around the
/// least-squares point, refining until the value stabilizes.
pub fn laplace_support_integral(g: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, opts: &QuadratureOptions) -> Result<LaplaceIntegral> {
    let s = b.len();
    if g.shape() != (s, s) {
        return Err(Error::Shape(format!("Gram {:?} with score of length {s}", g.shape())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::ParamRange(format!("slab rate {lambda}")));
    }
    if s == 0 {
        return Ok(LaplaceIntegral {
            log_value: 0.0,
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
            rel_change: 0.0,
            converged: true,
            ridge: false,
        });
    }
    if g.diagonal().iter().any(|&v| v <= 0.0) {
        return Err(Error::Singular("Gram matrix with a null column".into()));
    }
    if s == 1 {
        let lc = last_coordinate(g[(0, 0)], b[0], lambda);
        return Ok(LaplaceIntegral {
            log_value: lc.log_mass,
            mean: DVector::from_element(1, lc.m1),
            cov: DMatrix::from_element(1, 1, (lc.m2 - lc.m1 * lc.m1).max(0.0)),
            rel_change: 0.0,
            converged: true,
            ridge: false,
        });
    }
    let (chol, ridge) = match g.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let eps = 1e-8 * g.trace() / s as f64;
            let c = (g + DMatrix::identity(s, s) * eps).cholesky().ok_or(Error::Singular("Laplace-slab Gram".into()))?;
            (c, true)
        }
    };
    let ls = chol.solve(b);
    let ginv = chol.inverse();
    let d = s - 1;
    let a = g[(d, d)];
    let g11 = g.view((0, 0), (d, d)).into_owned();
    let g_last: DVector<f64> = g.view((d, 0), (1, d)).transpose().column(0).into_owned();
    let b1 = b.rows(0, d).into_owned();
    let boxes: Vec<(f64, f64, f64)> = (0..d)
        .map(|j| {
            let sd = ginv[(j, j)].sqrt();
            let half = 8.0 * sd + lambda * ginv.row(j).iter().map(|v| v.abs()).sum::<f64>();
            (ls[j] - half, ls[j] + half, sd)
        })
        .collect();

    let mut prev: Option<f64> = None;
    let mut rel_change = f64::INFINITY;
    let mut result = None;
    let rule = gauss_legendre(24);
    let rules: Vec<(Vec<f64>, Vec<f64>)> = [6, 12].iter().map(|&k| gauss_legendre(k)).collect();
    for &(order, split) in LEVELS.iter() {
        let r = match order {
            6 => &rules[0],
            12 => &rules[1],
            _ => &rule,
        };
        let axes: Vec<Vec<(f64, f64)>> = boxes.iter().map(|&(lo, hi, sd)| axis_nodes(lo, hi, sd, order, split, r)).collect();
        let level = tensor_pass(&axes, &g11, &g_last, &b1, a, b[d], lambda);
        if let Some(p) = prev {
            rel_change = (level.0 - p).exp_m1().abs();
        }
        prev = Some(level.0);
        result = Some(level);
        if rel_change <= opts.tol {
            break;
        }
    }
    let (log_value, mean, cov) = result.expect("at least one refinement level");
    Ok(LaplaceIntegral {
        log_value,
        mean,
        cov,
        rel_change,
        converged: rel_change <= opts.flag_tol,
        ridge,
    })
}

fn tensor_pass(
    axes: &[Vec<(f64, f64)>],
    g11: &DMatrix<f64>,
    g_last: &DVector<f64>,
    b1: &DVector<f64>,
    a: f64,
    b_last: f64,
    lambda: f64,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = axes.len();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut idx = vec![0usize; d];
    let mut t = DVector::zeros(d);
    let mut logs = Vec::with_capacity(total);
    let mut lasts = Vec::with_capacity(total);
    for _ in 0..total {
        let mut logw = 0.0;
        for j in 0..d {
            let (x, w) = axes[j][idx[j]];
            t[j] = x;
            logw += w;
        }
        let quad = -0.5 * t.dot(&(g11 * &t)) + b1.dot(&t) - lambda * t.iter().map(|v| v.abs()).sum::<f64>();
        let lc = last_coordinate(a, b_last - g_last.dot(&t), lambda);
        logs.push(logw + quad + lc.log_mass);
        lasts.push(lc);
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    let log_z = log_sum_exp(&logs);
    let s = d + 1;
    let mut m = DVector::zeros(s);
    let mut second = DMatrix::zeros(s, s);
    let mut full = DVector::zeros(s);
    idx.iter_mut().for_each(|v| *v = 0);
    for (lw, lc) in logs.iter().zip(&lasts) {
        let w = (lw - log_z).exp();
        for j in 0..d {
            full[j] = axes[j][idx[j]].0;
        }
        if w > 0.0 {
            full[d] = lc.m1;
            m.axpy(w, &full, 1.0);
            for j in 0..d {
                for k in 0..=j {
                    second[(j, k)] += w * full[j] * full[k];
                }
                second[(d, j)] += w * full[j] * lc.m1;
            }
            second[(d, d)] += w * lc.m2;
        }
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    for j in 0..s {
        for k in 0..j {
            second[(k, j)] = second[(j, k)];
        }
    }
    let cov = second - &m * m.transpose();
    (log_z, m, cov)
}

/// Exact support posterior at known `η` under the Laplace slab, for
/// supports of size at most three.
pub fn enumerate_posterior_laplace_slab(
    data: &GroupedDataset,
    spec: &SpikeSlabSpec,
    eta: &NuisanceState,
    s_max: usize,
    opts: &QuadratureOptions,
) -> Result<SupportPosterior> {
    if s_max > 3 {
        return Err(Error::Config(format!("Laplace-slab enumeration supports s_max ≤ 3, got {s_max}")));
    }
    spec.validate()?;
    if spec.p != data.p() {
        return Err(Error::Shape(format!("prior has p = {}, data has p = {}", spec.p, data.p())));
    }
    let supports = check_budget(data.p(), s_max)?;
    let (g, b) = sufficient_statistics(data, eta)?;
    laplace_from_statistics(&g, &b, spec, supports, opts)
}

pub(crate) fn laplace_from_statistics(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    spec: &SpikeSlabSpec,
    supports: Vec<Vec<usize>>,
    opts: &QuadratureOptions,
) -> Result<SupportPosterior> {
    let log_half_lambda = (0.5 * spec.lambda).ln();
    let results: Vec<Result<(SupportEntry, LaplaceIntegral)>> = supports
        .into_par_iter()
        .map(|s| {
            let k = s.len();
            let li = laplace_support_integral(&principal_submatrix(g, &s), &subvector(b, &s), spec.lambda, opts)?;
            let mut e = SupportEntry::new(s, size_log_prior(spec, k)? + k as f64 * log_half_lambda + li.log_value);
            e.mean = Some(li.mean.iter().copied().collect());
            e.cov = Some(li.cov.clone());
            Ok((e, li))
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut flags = Vec::new();
    for r in results {
        let (e, li) = r?;
        if !li.converged {
            flags.push(format!("quadrature unconverged at support {:?}: relative change {:.3e}", e.support, li.rel_change));
        }
        if li.ridge {
            flags.push(format!("ridge-centered quadrature box at support {:?}", e.support));
        }
        entries.push(e);
    }
    SupportPosterior::from_log_weights(spec.p, entries, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, SparseVector};
    use crate::rng::{normal_matrix, normal_vector, stream_rng};
    use crate::zoo::{FamilySpec, LinearParams};
    use approx::assert_relative_eq;

    fn dataset(x: &DMatrix<f64>, y: &DVector<f64>) -> GroupedDataset {
        let groups = (0..x.nrows())
            .map(|i| Group::new(DVector::from_element(1, y[i]), x.rows(i, 1).into_owned()))
            .collect();
        GroupedDataset::new(x.ncols(), groups).unwrap()
    }

    fn unit_noise() -> FamilySpec {
        FamilySpec::Linear(LinearParams { sigma2: 1.0 })
    }

    /// Composite Simpson on each side of the kink at 0.
    fn trapezoid_moments(a: f64, c: f64, lambda: f64, n: usize) -> (f64, f64, f64) {
        let center = c / a;
        let half = 40.0 / a.sqrt() + (c.abs() + lambda) / a;
        let (lo, hi) = (center - half, center + half);
        let f = |t: f64| -0.5 * a * t * t + c * t - lambda * t.abs();
        let peak = f(center.clamp(-half, half)).max(f(0.0)).max(f((c - lambda) / a)).max(f((c + lambda) / a));
        let mut pieces = vec![];
        if lo < 0.0 {
            pieces.push((lo, hi.min(0.0)));
        }
        if hi > 0.0 {
            pieces.push((lo.max(0.0), hi));
        }
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (l, u) in pieces {
            let h = (u - l) / n as f64;
            for k in 0..=n {
                let t = l + k as f64 * h;
                let coef = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                let w = coef * h / 3.0 * (f(t) - peak).exp();
                z += w;
                m1 += w * t;
                m2 += w * t * t;
            }
        }
        (z.ln() + peak, m1 / z, m2 / z)
    }

    #[test]
    fn last_coordinate_matches_trapezoid() {
        for &(a, c, lambda) in &[(1.0, 0.3, 1.0), (25.0, 40.0, 2.0), (4.0, -7.0, 0.5), (0.5, 0.0, 3.0), (9.0, 1.0, 0.0)] {
            let lc = last_coordinate(a, c, lambda);
            let (lz, m1, m2) = trapezoid_moments(a, c, lambda, 1_000_000);
            assert_relative_eq!(lc.log_mass, lz, epsilon = 1e-8);
            assert_relative_eq!(lc.m1, m1, epsilon = 1e-8);
            assert_relative_eq!(lc.m2, m2, epsilon = 1e-8);
        }
    }

    #[test]
    fn truncated_variance_tail_branches_agree() {
        // 1 − xρ − ρ², mpmath at 50 digits
        for (x, exact) in [(-25.0, 0.0015848414703928894), (-30.0, 0.001103771511890091), (-40.0, 0.0006226683785913888)] {
            let r = mills(x);
            assert_relative_eq!(truncated_var_factor(x), exact, max_relative = 1e-7);
            if x > -35.0 {
                assert_relative_eq!(1.0 - x * r - r * r, exact, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn zero_rate_reduces_to_gaussian_integral() {
        let mut rng = stream_rng(1, 0);
        let x = normal_matrix(&mut rng, 30, 3);
        let g = x.transpose() * &x;
        let b = normal_vector(&mut rng, 3) * 3.0;
        let li = laplace_support_integral(&g, &b, 0.0, &QuadratureOptions::default()).unwrap();
        let chol = g.clone().cholesky().unwrap();
        let mean = chol.solve(&b);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let exact = 1.5 * LN_2PI - 0.5 * log_det + 0.5 * b.dot(&mean);
        assert_relative_eq!(li.log_value, exact, epsilon = 1e-8);
        assert!((li.mean - mean).amax() < 1e-8);
        assert!((li.cov - chol.inverse()).amax() < 1e-8);
        assert!(li.converged);
    }

    #[test]
    fn diagonal_gram_factorizes() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 2.5]));
        let b = DVector::from_vec(vec![1.0, -6.0, 0.2]);
        let lambda = 1.3;
        let li = laplace_support_integral(&g, &b, lambda, &QuadratureOptions::default()).unwrap();
        let mut total = 0.0;
        for j in 0..3 {
            let (lz, m1, m2) = trapezoid_moments(g[(j, j)], b[j], lambda, 400_000);
            total += lz;
            assert_relative_eq!(li.mean[j], m1, epsilon = 1e-7);
            assert_relative_eq!(li.cov[(j, j)], m2 - m1 * m1, epsilon = 1e-7);
        }
        assert_relative_eq!(li.log_value, total, epsilon = 1e-7);
        assert!(li.cov[(0, 1)].abs() < 1e-8);
    }

    #[test]
    fn correlated_pair_matches_grid_integration() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.2, 1.2, 1.5]);
        let b = DVector::from_vec(vec![0.8, -0.4]);
        let lambda = 1.0;
        let li = laplace_support_integral(&g, &b, lambda, &QuadratureOptions::default()).unwrap();
        // midpoint rule on a fine grid with a cell edge on each axis
        let (n, half) = (3000usize, 9.0);
        let h = 2.0 * half / n as f64;
        let (mut z, mut m0) = (0.0, 0.0);
        for i in 0..n {
            let t0 = -half + (i as f64 + 0.5) * h;
            for k in 0..n {
                let t1 = -half + (k as f64 + 0.5) * h;
                let q = -0.5 * (g[(0, 0)] * t0 * t0 + 2.0 * g[(0, 1)] * t0 * t1 + g[(1, 1)] * t1 * t1) + b[0] * t0 + b[1] * t1 - lambda * (t0.abs() + t1.abs());
                let w = q.exp() * h * h;
                z += w;
                m0 += w * t0;
            }
        }
        assert_relative_eq!(li.log_value, z.ln(), epsilon = 1e-5);
        assert_relative_eq!(li.mean[0], m0 / z, epsilon = 1e-5);
    }

    #[test]
    fn normal_slab_matches_marginal_likelihood_oracle() {
        let mut rng = stream_rng(2, 0);
        let (n, p) = (25, 6);
        let x = normal_matrix(&mut rng, n, p);
        let y = &x.column(1) * 1.0 + normal_vector(&mut rng, n);
        let data = dataset(&x, &y);
        let spec = SpikeSlabSpec::new(p, 2.0, 1.0).unwrap();
        let tau = 0.5;
        let post = enumerate_posterior_normal_slab(&data, &spec, &unit_noise(), 3, tau).unwrap();
        assert_eq!(post.entries.len(), 42);
        let total: f64 = post.entries.iter().map(|e| e.weight()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        // y ~ N(0, I + X_S X_Sᵀ/τ) marginally on each support
        let oracle: Vec<f64> = post
            .entries
            .iter()
            .map(|e| {
                let xs = DMatrix::from_fn(n, e.support.len(), |r, c| x[(r, e.support[c])]);
                let cov = DMatrix::identity(n, n) + &xs * xs.transpose() / tau;
                let lu = cov.clone().lu();
                let quad = y.dot(&lu.solve(&y).unwrap());
                let k = e.support.len();
                dimension_log_prior(k, &spec).unwrap() - ln_binomial(p, k) - 0.5 * lu.determinant().ln() - 0.5 * quad
            })
            .collect();
        let z = log_sum_exp(&oracle);
        for (e, o) in post.entries.iter().zip(&oracle) {
            assert_relative_eq!(e.log_weight, o - z, epsilon = 1e-9);
        }
        assert_eq!(post.modal().support, vec![1]);
    }

    #[test]
    fn scalar_bayes_factor() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 0.5, 2.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0]);
        let spec = SpikeSlabSpec::new(1, 2.0, 1.0).unwrap();
        let tau = 1e-3;
        let post = enumerate_posterior_normal_slab(&dataset(&x, &y), &spec, &unit_noise(), 1, tau).unwrap();
        // zero data: the Bayes factor of {0} over ∅ is sqrt(τ/(τ + ‖x‖²)); π_1(1)/π_1(0) = 1 for p = 1
        let xx = x.norm_squared();
        let odds = (tau / (tau + xx)).sqrt();
        assert_relative_eq!(post.weight(&[0]), odds / (1.0 + odds), epsilon = 1e-12);
    }

    #[test]
    fn strong_signal_prefers_the_active_support() {
        let x = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, -1.0, 0.5, 1.5]);
        let y = &x.column(0) * 4.0;
        let spec = SpikeSlabSpec::new(1, 2.0, 1.0).unwrap();
        let d = dataset(&x, &y.into_owned());
        let n = enumerate_posterior_normal_slab(&d, &spec, &unit_noise(), 1, 0.01).unwrap();
        assert!(n.weight(&[0]) > n.weight(&[]));
        let l = enumerate_posterior_laplace_slab(&d, &spec, &unit_noise(), 1, &QuadratureOptions::default()).unwrap();
        assert!(l.weight(&[0]) > l.weight(&[]));
    }

    #[test]
    fn exchangeable_columns_share_weight() {
        let x0 = [0.3, -1.2, 0.8, 1.9, -0.4, 0.1, -0.7, 1.1];
        let x = DMatrix::from_fn(8, 2, |r, c| if c == 0 { x0[r] } else { x0[7 - r] });
        let y = DVector::from_fn(8, |r, _| x0[r] + x0[7 - r]);
        let spec = SpikeSlabSpec::new(2, 2.0, 0.7).unwrap();
        let post = enumerate_posterior_laplace_slab(&dataset(&x, &y), &spec, &unit_noise(), 2, &QuadratureOptions::default()).unwrap();
        assert_relative_eq!(post.weight(&[0]), post.weight(&[1]), max_relative = 1e-6);
        assert!(post.flags.is_empty());
    }

    #[test]
    fn vanishing_rate_matches_vanishing_precision() {
        let mut rng = stream_rng(3, 0);
        let x = normal_matrix(&mut rng, 40, 4);
        let y = &x.column(0) * 0.8 - &x.column(2) * 0.6 + normal_vector(&mut rng, 40);
        let data = dataset(&x, &y);
        let lambda = 1e-4;
        let spec = SpikeSlabSpec::new(4, 2.0, lambda).unwrap();
        // equal slab densities at zero
        let tau = 2.0 * std::f64::consts::PI * (0.5 * lambda).powi(2);
        let lp = enumerate_posterior_laplace_slab(&data, &spec, &unit_noise(), 3, &QuadratureOptions::default()).unwrap();
        let np = enumerate_posterior_normal_slab(&data, &spec, &unit_noise(), 3, tau).unwrap();
        let rank = |p: &SupportPosterior| {
            let mut v: Vec<(Vec<usize>, f64)> = p.entries.iter().map(|e| (e.support.clone(), e.log_weight)).collect();
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            v.into_iter().map(|e| e.0).collect::<Vec<_>>()
        };
        assert_eq!(rank(&lp), rank(&np));
        for (a, b) in lp.entries.iter().zip(&np.entries) {
            assert!((a.log_weight - b.log_weight).abs() < 1e-2);
        }
    }

    #[test]
    fn normal_and_laplace_means_sit_near_truth() {
        let mut rng = stream_rng(4, 0);
        let x = normal_matrix(&mut rng, 200, 5);
        let theta = SparseVector::from_pairs(5, [(1, 1.0), (3, -1.0)]).unwrap();
        let y = theta.apply(&x) + normal_vector(&mut rng, 200);
        let spec = SpikeSlabSpec::new(5, 2.0, 1.0).unwrap();
        let post = enumerate_posterior_laplace_slab(&dataset(&x, &y), &spec, &unit_noise(), 3, &QuadratureOptions::default()).unwrap();
        assert_eq!(post.modal().support, vec![1, 3]);
        let mean = post.posterior_mean().unwrap();
        assert!((mean - theta.to_dense()).amax() < 0.25);
        assert!(post.inclusion_probs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn laplace_rejects_large_supports() {
        let x = DMatrix::identity(5, 5);
        let y = DVector::zeros(5);
        let spec = SpikeSlabSpec::new(5, 2.0, 1.0).unwrap();
        assert!(enumerate_posterior_laplace_slab(&dataset(&x, &y), &spec, &unit_noise(), 4, &QuadratureOptions::default()).is_err());
    }
}
