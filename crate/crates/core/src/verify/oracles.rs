use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::Check;
use crate::bvm::{build_bvm, BvmMode, HChoice};
use crate::diagnostics::{phi1, phi2, EnumerationOptions};
use crate::divergences::{avg_renyi, eigen_ratio_check, gaussian_kl, gaussian_kl_variation, GaussianPair};
use crate::error::{Error, Result};
use crate::linalg::{gauss_legendre, select_columns, supports_up_to};
use crate::model::{Group, GroupMeta, GroupedDataset, SparseVector};
use crate::priors::SpikeSlabSpec;
use crate::rng::{normal_matrix, normal_vector, std_normal, stream_rng};
use crate::splines::{approx_error, log_log_slope, SplineBasis};
use crate::zoo::{
    correlation_eigen_bounds, correlation_matrix, simulate, CorrelationKind, DesignSpec, FamilySpec, MemParams,
    MissingParams,
};

const SEED: u64 = 20_240_611;

fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, d, d);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * rng.random_range(0.2..1.0)
}

fn log_pdf(x: &DVector<f64>, mu: &DVector<f64>, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let d = x - mu;
    let z = chol.l().solve_lower_triangular(&d).expect("triangular solve");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * z.norm_squared() - log_det - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// `∫ f` over the real line by composite Gauss–Legendre on a window wide
/// enough that both densities are negligible outside it.
fn integrate_line(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (nodes, weights) = gauss_legendre(20);
    let panels = 600;
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let a = lo + k as f64 * h;
        for (t, w) in nodes.iter().zip(&weights) {
            total += 0.5 * h * w * f(a + 0.5 * h * (t + 1.0));
        }
    }
    total
}

/// The three divergences of a one-group dataset built from `pair`, with
/// means entering through `X = I` and covariances through the
/// missing-response family with every coordinate observed.
fn library_values(pair: &GaussianPair) -> Result<[f64; 3]> {
    let r = pair.dim();
    let meta = GroupMeta {
        pattern: Some(vec![true; r]),
        ..Default::default()
    };
    let data = GroupedDataset::new(r, vec![Group::new(DVector::zeros(r), DMatrix::identity(r, r)).with_meta(meta)])?;
    let eta1 = FamilySpec::MissingResponse(MissingParams {
        sigma: pair.sigma1.clone(),
    });
    let eta2 = FamilySpec::MissingResponse(MissingParams {
        sigma: pair.sigma2.clone(),
    });
    let renyi = avg_renyi(
        &SparseVector::from_dense(&pair.mu1),
        &eta1,
        &SparseVector::from_dense(&pair.mu2),
        &eta2,
        &data,
    )?;
    Ok([gaussian_kl(pair)?, gaussian_kl_variation(pair)?, renyi])
}

fn quadrature_values(pair: &GaussianPair) -> [f64; 3] {
    let (m1, m2) = (pair.mu1[0], pair.mu2[0]);
    let (v1, v2) = (pair.sigma1[(0, 0)], pair.sigma2[(0, 0)]);
    let lp = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
    let width = 20.0 * v1.max(v2).sqrt();
    let (lo, hi) = (m1.min(m2) - width, m1.max(m2) + width);
    let llr = |x: f64| lp(x, m1, v1) - lp(x, m2, v2);
    let kl = integrate_line(|x| lp(x, m1, v1).exp() * llr(x), lo, hi);
    let var = integrate_line(|x| lp(x, m1, v1).exp() * (llr(x) - kl).powi(2), lo, hi);
    let bc = integrate_line(|x| (0.5 * (lp(x, m1, v1) + lp(x, m2, v2))).exp(), lo, hi);
    [kl, var, -bc.ln()]
}

/// `(KL, SE)`, `(variance, SE)` and `(BC, SE)` from draws of the first law.
fn monte_carlo(pair: &GaussianPair, draws: usize, seed: u64) -> Result<[(f64, f64); 3]> {
    let c1 = pair.sigma1.clone().cholesky().ok_or_else(|| Error::Singular("Σ₁".into()))?;
    let c2 = pair.sigma2.clone().cholesky().ok_or_else(|| Error::Singular("Σ₂".into()))?;
    let l1 = c1.l();
    let chunks = 64;
    let per = draws / chunks;
    let sums: Vec<[f64; 6]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let mut s = [0.0; 6];
            for _ in 0..per {
                let x = &pair.mu1 + &l1 * normal_vector(&mut rng, pair.dim());
                let l = log_pdf(&x, &pair.mu1, &c1) - log_pdf(&x, &pair.mu2, &c2);
                s[0] += l;
                s[1] += l * l;
                s[2] += l * l * l;
                s[3] += l * l * l * l;
                let b = (-0.5 * l).exp();
                s[4] += b;
                s[5] += b * b;
            }
            s
        })
        .collect();
    let n = (per * chunks) as f64;
    let mut s = [0.0; 6];
    for part in &sums {
        for k in 0..6 {
            s[k] += part[k];
        }
    }
    let mean = s[0] / n;
    let var = s[1] / n - mean * mean;
    // fourth central moment from raw moments
    let m4 = s[3] / n - 4.0 * mean * s[2] / n + 6.0 * mean * mean * s[1] / n - 3.0 * mean.powi(4);
    let bc = s[4] / n;
    let bc_var = s[5] / n - bc * bc;
    Ok([
        (mean, (var / n).sqrt()),
        (var, ((m4 - var * var).max(0.0) / n).sqrt()),
        (bc, (bc_var / n).sqrt()),
    ])
}

fn random_pair<R: Rng>(rng: &mut R, r: usize) -> Result<GaussianPair> {
    GaussianPair::new(
        normal_vector(rng, r),
        random_spd(rng, r),
        normal_vector(rng, r) * 0.7,
        random_spd(rng, r),
    )
}

pub(super) fn divergences() -> Result<Check> {
    let instances = 100;
    let mut quad_worst = 0.0f64;
    let mut mc_worst = 0.0f64;
    let mut failures = Vec::new();
    for k in 0..instances {
        let mut rng = stream_rng(SEED, k as u64);
        let r = 1 + k % 3;
        let pair = random_pair(&mut rng, r)?;
        let lib = library_values(&pair)?;
        if r == 1 {
            let q = quadrature_values(&pair);
            for (a, b) in lib.iter().zip(&q) {
                let err = (a - b).abs();
                quad_worst = quad_worst.max(err);
                if err > 1e-6 {
                    failures.push(format!("instance {k}: quadrature gap {err:.2e}"));
                }
            }
        } else {
            let mc = monte_carlo(&pair, 1_000_000, SEED ^ (k as u64 + 1))?;
            let targets = [lib[0], lib[1], (-lib[2]).exp()];
            for (name, ((est, se), target)) in ["KL", "V", "BC"].iter().zip(mc.iter().zip(targets)) {
                let z = (est - target).abs() / se;
                mc_worst = mc_worst.max(z);
                if z > 3.0 {
                    failures.push(format!("instance {k} (r = {r}): {name} off by {z:.2} SE"));
                }
            }
        }
    }
    Ok(Check::new(
        failures.is_empty(),
        format!(
            "{instances} instances; max quadrature gap {quad_worst:.1e}, max MC deviation {mc_worst:.2} SE{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    ))
}

pub(super) fn sandwich() -> Result<Check> {
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for k in 0..1000u64 {
        let mut rng = stream_rng(SEED + 1, k);
        let d = rng.random_range(1..=8);
        let s1 = random_spd(&mut rng, d);
        let s2 = random_spd(&mut rng, d);
        let e = eigen_ratio_check(&s1, &s2)?;
        if !e.holds(1e-10) {
            violations += 1;
        }
        tightest = tightest.min((e.mid - e.lhs).min(e.rhs - e.mid));
    }
    Ok(Check::new(
        violations == 0,
        format!("1000 pairs, {violations} violations; smallest margin {tightest:.2e}"),
    ))
}

pub(super) fn correlation_bounds() -> Result<Check> {
    let kinds = [CorrelationKind::Cs, CorrelationKind::Ar, CorrelationKind::Ma];
    let mut violations = 0;
    for k in 0..1000u64 {
        let mut rng = stream_rng(SEED + 2, k);
        let kind = kinds[rng.random_range(0..3)];
        let (lo, hi) = kind.interval();
        let alpha = lo + (hi - lo) * rng.random_range(0.001..0.999);
        let m = rng.random_range(1..=30);
        let (blo, bhi) = correlation_eigen_bounds(kind, alpha, m)?;
        let eig = correlation_matrix(kind, alpha, m)?.symmetric_eigenvalues();
        if eig.min() < blo - 1e-10 || eig.max() > bhi + 1e-10 {
            violations += 1;
        }
    }
    Ok(Check::new(violations == 0, format!("1000 draws, {violations} spectra outside their bounds")))
}

fn max_col_norm(x: &DMatrix<f64>) -> f64 {
    (0..x.ncols()).map(|j| x.column(j).norm()).fold(0.0, f64::max)
}

/// `min_{|S|≤s} σ_min(X_S)/‖X‖_*` by SVD of every block.
fn phi2_oracle(x: &DMatrix<f64>, s: usize) -> f64 {
    supports_up_to(x.ncols(), s)
        .filter(|set| !set.is_empty())
        .map(|set| select_columns(x, &set).singular_values().min())
        .fold(f64::INFINITY, f64::min)
        / max_col_norm(x)
}

/// `φ₁` for `s ≤ 2` by scanning the ℓ₁ sphere of each support on a grid.
fn phi1_grid(x: &DMatrix<f64>, s: usize, points: usize) -> f64 {
    let p = x.ncols();
    let mut best = f64::INFINITY;
    for j in 0..p {
        best = best.min(x.column(j).norm());
    }
    if s >= 2 {
        for a in 0..p {
            for b in a + 1..p {
                for k in 0..=points {
                    let t = -1.0 + 2.0 * k as f64 / points as f64;
                    for sign in [1.0, -1.0] {
                        let v = x.column(a) * t + x.column(b) * (sign * (1.0 - t.abs()));
                        best = best.min(2f64.sqrt() * v.norm());
                    }
                }
            }
        }
    }
    best / max_col_norm(x)
}

pub(super) fn compatibility() -> Result<Check> {
    let opts = EnumerationOptions::default();
    let mut worst1 = 0.0f64;
    let mut worst2 = 0.0f64;
    let mut order_violations = 0;
    for k in 0..50u64 {
        let mut rng = stream_rng(SEED + 3, k);
        let p = rng.random_range(2..=6);
        let n = rng.random_range(p..=p + 8);
        let mut x = normal_matrix(&mut rng, n, p);
        // correlated columns every third design
        if k % 3 == 0 {
            let shared = normal_vector(&mut rng, n);
            for j in 0..p {
                let mut c = x.column_mut(j);
                c += &shared * 1.5;
            }
        }
        for s in 1..=2 {
            let f1 = phi1(&x, s, &opts)?.value;
            let f2 = phi2(&x, s, &opts)?.value;
            worst2 = worst2.max((f2 - phi2_oracle(&x, s)).abs());
            worst1 = worst1.max((f1 - phi1_grid(&x, s, 20_000)).abs());
            if f1 < f2 - 1e-12 {
                order_violations += 1;
            }
        }
    }
    Ok(Check::new(
        worst2 <= 1e-10 && worst1 <= 1e-3 && order_violations == 0,
        format!("50 designs; φ₂ gap {worst2:.1e}, φ₁ grid gap {worst1:.1e}, {order_violations} cases with φ₁ < φ₂"),
    ))
}

fn mem_params<R: Rng>(rng: &mut R, q: usize) -> MemParams {
    let a = normal_matrix(rng, q, q);
    let b = normal_matrix(rng, q, q);
    MemParams {
        alpha: rng.random_range(-1.0..1.0),
        beta: normal_vector(rng, q),
        mu: normal_vector(rng, q),
        sigma2: rng.random_range(0.5..2.0),
        sigma: &a * a.transpose() + DMatrix::identity(q, q),
        psi: &b * b.transpose() * 0.3 + DMatrix::identity(q, q) * 0.2,
    }
}

/// `(X_Sᵀ H* X_S)⁻¹ X_Sᵀ H* (Y − α − μᵀβ − βᵀΣ(Σ+Ψ)⁻¹(W − μ))` with
/// `H* = I − 11ᵀ/n`.
fn mem_center(data: &GroupedDataset, s: &[usize], p: &MemParams) -> Result<DVector<f64>> {
    let n = data.n();
    let q = p.q();
    let xstar = DMatrix::from_fn(n, data.p(), |i, j| data.group(i).x[(0, j)]);
    let xs = select_columns(&xstar, s);
    let hstar = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let shift = p.alpha + p.mu.dot(&p.beta);
    let inv = (&p.sigma + &p.psi).try_inverse().ok_or_else(|| Error::Singular("Σ + Ψ".into()))?;
    let coef = p.beta.transpose() * &p.sigma * inv;
    let bracket = DVector::from_fn(n, |i, _| {
        let g = data.group(i);
        let w = g.y.rows(1, q) - &p.mu;
        g.y[0] - shift - (&coef * w)[0]
    });
    let a = xs.transpose() * &hstar * &xs;
    let ainv = a.try_inverse().ok_or_else(|| Error::Singular("X_Sᵀ H* X_S".into()))?;
    Ok(ainv * (xs.transpose() * &hstar * bracket))
}

pub(super) fn measurement_error_center() -> Result<Check> {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for k in 0..20u64 {
        let mut rng = stream_rng(SEED + 4, k);
        let q = rng.random_range(1..=3);
        let p = rng.random_range(3..=6);
        let n = rng.random_range(20..=60);
        let params = mem_params(&mut rng, q);
        let fam = FamilySpec::MeasurementError(params.clone());
        let pairs: Vec<(usize, f64)> = (0..rng.random_range(1..=2)).map(|j| (j, std_normal(&mut rng))).collect();
        let theta0 = SparseVector::from_pairs(p, pairs)?;
        let data = simulate(&fam, &theta0, n, p, &DesignSpec::default(), k)?;
        let spec = SpikeSlabSpec::new(p, 2.0, 1.0)?;
        let mix = build_bvm(&data, &theta0, &fam, &spec, &HChoice::ZProjection, 2, BvmMode::Oracle)?;
        for c in &mix.components {
            if c.support.is_empty() {
                continue;
            }
            let explicit = mem_center(&data, &c.support, &params)?;
            let err = (DVector::from_column_slice(&c.center) - &explicit).amax() / explicit.amax().max(1.0);
            worst = worst.max(err);
            compared += 1;
        }
    }
    Ok(Check::new(
        worst <= 1e-10,
        format!("20 instances, {compared} supports; max relative gap {worst:.1e}"),
    ))
}

pub(super) fn splines() -> Result<Check> {
    let f = |z: f64| (2.0 * std::f64::consts::PI * z).sin() + (1.5 * z).exp();
    let dims = [8usize, 16, 32, 64];
    let mut slope_ok = true;
    let mut slopes = Vec::new();
    for q in 2..=4usize {
        let errs: Vec<f64> = dims
            .iter()
            .map(|&j| approx_error(f, &SplineBasis::new(j, q)?, 4000))
            .collect::<Result<_>>()?;
        let x: Vec<f64> = dims.iter().map(|&j| j as f64).collect();
        let slope = log_log_slope(&x, &errs);
        slope_ok &= slope <= -(q as f64 - 0.5);
        slopes.push(format!("q={q}: {slope:.2}"));
    }
    let mut unity_gap = 0.0f64;
    let mut endpoint_gap = 0.0f64;
    for q in 1..=5usize {
        for j in [q, q + 1, q + 7, 20] {
            let basis = SplineBasis::new(j, q)?;
            for k in 0..=1000 {
                let z = k as f64 / 1000.0;
                unity_gap = unity_gap.max((basis.eval(z)?.sum() - 1.0).abs());
            }
            let at0 = basis.eval(0.0)?;
            let at1 = basis.eval(1.0)?;
            let mut e0 = DVector::zeros(j);
            e0[0] = 1.0;
            let mut e1 = DVector::zeros(j);
            e1[j - 1] = 1.0;
            endpoint_gap = endpoint_gap.max((at0 - e0).amax()).max((at1 - e1).amax());
        }
    }
    let exact = unity_gap <= 1e-14 && endpoint_gap == 0.0;
    Ok(Check::new(
        slope_ok && exact,
        format!(
            "slopes {}; partition-of-unity gap {unity_gap:.1e}, endpoint gap {endpoint_gap:.1e}",
            slopes.join(", ")
        ),
    ))
}
