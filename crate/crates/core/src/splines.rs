//! B-spline bases on `[0, 1]`, spline design matrices and orthogonal projections.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// B-spline basis of dimension `J` and order `q` (degree `q − 1`) with
/// equispaced interior knots and boundary knots repeated `q` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisShape", into = "BasisShape")]
pub struct SplineBasis {
    dim: usize,
    order: usize,
    knots: Vec<f64>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisShape {
    dim: usize,
    order: usize,
}

impl TryFrom<BasisShape> for SplineBasis {
    type Error = Error;
    fn try_from(s: BasisShape) -> Result<Self> {
        SplineBasis::new(s.dim, s.order)
    }
}

impl From<SplineBasis> for BasisShape {
    fn from(b: SplineBasis) -> Self {
        Self {
            dim: b.dim,
            order: b.order,
        }
    }
}

impl SplineBasis {
    pub fn new(dim: usize, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::ParamRange("spline order must be at least 1".into()));
        }
        if dim < order {
            return Err(Error::ParamRange(format!(
                "spline dimension {dim} smaller than order {order}"
            )));
        }
        let interior = dim - order;
        let mut knots = vec![0.0; order];
        knots.extend((1..=interior).map(|k| k as f64 / (interior + 1) as f64));
        knots.extend(std::iter::repeat_n(1.0, order));
        Ok(Self { dim, order, knots })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index `μ` of the knot span `[t_μ, t_{μ+1})` holding `z`; the right
    /// endpoint belongs to the last nondegenerate span.
    fn span(&self, z: f64) -> usize {
        let q = self.order;
        let last = self.dim - 1;
        if z >= self.knots[last + 1] {
            return last;
        }
        // knots[q-1] = 0 <= z < knots[last + 1] = 1
        let (mut lo, mut hi) = (q - 1, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if z < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// The `q` possibly-nonzero basis values at `z` and the index of the first.
    pub fn eval_local(&self, z: f64) -> Result<(usize, Vec<f64>)> {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::ParamRange(format!("spline argument {z} outside [0, 1]")));
        }
        let k = self.order;
        let t = &self.knots;
        let mu = self.span(z);
        let mut b = vec![0.0; k];
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        b[0] = 1.0;
        for j in 1..k {
            left[j] = z - t[mu + 1 - j];
            right[j] = t[mu + j] - z;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = b[r] / (right[r + 1] + left[j - r]);
                b[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            b[j] = saved;
        }
        Ok((mu + 1 - k, b))
    }

    /// `B_J(z)`, all `J` basis functions at `z`.
    pub fn eval(&self, z: f64) -> Result<DVector<f64>> {
        let (first, local) = self.eval_local(z)?;
        let mut out = DVector::zeros(self.dim);
        for (r, v) in local.into_iter().enumerate() {
            out[first + r] = v;
        }
        Ok(out)
    }

    /// `βᵀB_J(z)`.
    pub fn combine(&self, beta: &DVector<f64>, z: f64) -> Result<f64> {
        if beta.len() != self.dim {
            return Err(Error::Shape(format!(
                "coefficient length {} does not match spline dimension {}",
                beta.len(),
                self.dim
            )));
        }
        let (first, local) = self.eval_local(z)?;
        Ok(local.iter().enumerate().map(|(r, v)| v * beta[first + r]).sum())
    }

    /// Greville abscissae, the knot averages `(t_{j+1} + … + t_{j+q−1})/(q − 1)`.
    pub fn greville(&self) -> Vec<f64> {
        let q = self.order;
        (0..self.dim)
            .map(|j| {
                if q == 1 {
                    0.5 * (self.knots[j] + self.knots[j + 1])
                } else {
                    self.knots[j + 1..j + q].iter().sum::<f64>() / (q - 1) as f64
                }
            })
            .collect()
    }
}

/// Spline design matrix `W_J` with row `i` equal to `B_J(z_i)`.
pub fn spline_design(basis: &SplineBasis, z: &[f64]) -> Result<DMatrix<f64>> {
    let mut w = DMatrix::zeros(z.len(), basis.dim());
    for (i, &zi) in z.iter().enumerate() {
        let (first, local) = basis.eval_local(zi)?;
        for (r, v) in local.into_iter().enumerate() {
            w[(i, first + r)] = v;
        }
    }
    Ok(w)
}

/// Equispaced covariate values `z_i = (i − ½)/n`.
pub fn equispaced(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Orthogonal projection `H` onto a column space, stored through an
/// orthonormal basis `Q` so that `H = QQᵀ`.
#[derive(Clone, Debug)]
pub struct Projection {
    basis: DMatrix<f64>,
    pseudo_inverse: bool,
}

/// Relative singular-value cutoff for the numerical rank.
pub const RANK_TOL: f64 = 1e-10;

impl Projection {
    /// The zero projection on `R^n`.
    pub fn zero(n: usize) -> Self {
        Self {
            basis: DMatrix::zeros(n, 0),
            pseudo_inverse: false,
        }
    }

    /// `W(WᵀW)⁻¹Wᵀ`. Rank-deficient `W` is an error unless `allow_pinv`, in
    /// which case the projection onto the column space is returned and flagged.
    pub fn onto(w: &DMatrix<f64>, allow_pinv: bool) -> Result<Self> {
        let (n, k) = w.shape();
        if k == 0 {
            return Ok(Self::zero(n));
        }
        if k > n && !allow_pinv {
            return Err(Error::RankDeficient { rank: n, cols: k });
        }
        let svd = w.clone().svd(true, false);
        let smax = svd.singular_values.max();
        let cutoff = RANK_TOL * smax.max(f64::MIN_POSITIVE);
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        if rank == k {
            let qr = w.clone().qr();
            return Ok(Self {
                basis: qr.q(),
                pseudo_inverse: false,
            });
        }
        if !allow_pinv {
            return Err(Error::RankDeficient { rank, cols: k });
        }
        let u = svd.u.expect("left singular vectors requested");
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > cutoff)
            .collect();
        Ok(Self {
            basis: u.select_columns(&keep),
            pseudo_inverse: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.basis.ncols() == 0
    }

    /// True when the projection came from the rank-deficient fallback.
    pub fn used_pseudo_inverse(&self) -> bool {
        self.pseudo_inverse
    }

    pub fn orthonormal_basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.is_zero() {
            return DVector::zeros(v.len());
        }
        &self.basis * (self.basis.transpose() * v)
    }

    /// `(I − H)v`.
    pub fn complement(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.apply(v)
    }

    /// `(I − H)M`.
    pub fn complement_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.is_zero() {
            return m.clone();
        }
        m - &self.basis * (self.basis.transpose() * m)
    }
}

/// Grid sup-norm error of the least-squares spline fit to `f` on
/// `grid_size` equispaced points of `[0, 1]`.
pub fn approx_error(f: impl Fn(f64) -> f64, basis: &SplineBasis, grid_size: usize) -> Result<f64> {
    if grid_size < basis.dim() {
        return Err(Error::ParamRange(format!(
            "grid of {grid_size} points cannot determine {} coefficients",
            basis.dim()
        )));
    }
    let z: Vec<f64> = (0..grid_size).map(|k| k as f64 / (grid_size - 1) as f64).collect();
    let w = spline_design(basis, &z)?;
    let target = DVector::from_iterator(grid_size, z.iter().map(|&zi| f(zi)));
    let qr = w.clone().qr();
    let rhs = qr.q().transpose() * &target;
    let beta = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Singular("spline least-squares system".into()))?;
    Ok((w * beta - target).amax())
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Extreme values of `√J‖f_β‖_{2,n} / ‖β‖₂` over the supplied coefficient
/// vectors, with `‖f‖_{2,n}² = n⁻¹Σ f(z_i)²`.
pub fn norm_equivalence(basis: &SplineBasis, z: &[f64], betas: &[DVector<f64>]) -> Result<(f64, f64)> {
    let w = spline_design(basis, z)?;
    let scale = (basis.dim() as f64 / z.len() as f64).sqrt();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for beta in betas {
        let ratio = scale * (&w * beta).norm() / beta.norm();
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, normal_vector, stream_rng};
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    // Plain recursive Cox–de Boor definition, no span search.
    fn naive(t: &[f64], j: usize, k: usize, z: f64, last_span: usize) -> f64 {
        if k == 1 {
            let inside = t[j] <= z && z < t[j + 1];
            let right_end = z == 1.0 && j == last_span;
            return if inside || right_end { 1.0 } else { 0.0 };
        }
        let mut out = 0.0;
        let d1 = t[j + k - 1] - t[j];
        if d1 > 0.0 {
            out += (z - t[j]) / d1 * naive(t, j, k - 1, z, last_span);
        }
        let d2 = t[j + k] - t[j + 1];
        if d2 > 0.0 {
            out += (t[j + k] - z) / d2 * naive(t, j + 1, k - 1, z, last_span);
        }
        out
    }

    #[test]
    fn left_endpoint_is_first_unit_vector() {
        for (j, q) in [(4, 4), (7, 3), (5, 1), (9, 2)] {
            let b = SplineBasis::new(j, q).unwrap();
            let v = b.eval(0.0).unwrap();
            assert_eq!(v[0], 1.0);
            assert_eq!(v.iter().skip(1).map(|x| x.abs()).sum::<f64>(), 0.0);
            let v = b.eval(1.0).unwrap();
            assert_relative_eq!(v[j - 1], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn order_one_is_interval_indicator() {
        let b = SplineBasis::new(4, 1).unwrap();
        assert_eq!(b.eval(0.3).unwrap().as_slice(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.eval(0.75).unwrap().as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matches_naive_recursion() {
        let mut rng = stream_rng(3, 0);
        for (j, q) in [(8, 4), (6, 3), (10, 2), (5, 5), (12, 4)] {
            let b = SplineBasis::new(j, q).unwrap();
            let last_span = j - 1;
            for _ in 0..200 {
                let z: f64 = rng.random();
                let fast = b.eval(z).unwrap();
                for idx in 0..j {
                    assert_relative_eq!(fast[idx], naive(b.knots(), idx, q, z, last_span), epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn rejects_arguments_outside_unit_interval() {
        let b = SplineBasis::new(6, 4).unwrap();
        assert!(b.eval(1.0 + 1e-12).is_err());
        assert!(b.eval(-0.1).is_err());
        assert!(SplineBasis::new(3, 4).is_err());
    }

    #[test]
    fn greville_design_is_nonsingular_and_rows_sum_to_one() {
        for (j, q) in [(8, 4), (12, 3), (6, 2)] {
            let b = SplineBasis::new(j, q).unwrap();
            let w = spline_design(&b, &b.greville()).unwrap();
            assert!(w.determinant().abs() > 1e-8);
            for row in w.row_iter() {
                assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
            }
        }
        let b = SplineBasis::new(8, 4).unwrap();
        let w = spline_design(&b, &[0.37; 10]).unwrap();
        assert_eq!(w.rank(1e-10), 1);
    }

    #[test]
    fn projection_trivial_cases() {
        let mut w = DMatrix::zeros(4, 1);
        w[(0, 0)] = 1.0;
        let h = Projection::onto(&w, false).unwrap().to_dense();
        let mut e = DMatrix::zeros(4, 4);
        e[(0, 0)] = 1.0;
        assert_relative_eq!(h, e, epsilon = 1e-15);
        let mut rng = stream_rng(4, 0);
        let sq = normal_matrix(&mut rng, 5, 5);
        let h = Projection::onto(&sq, false).unwrap().to_dense();
        assert_relative_eq!(h, DMatrix::identity(5, 5), epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_normal_equations() {
        let mut rng = stream_rng(5, 0);
        let w = normal_matrix(&mut rng, 30, 6);
        let p = Projection::onto(&w, false).unwrap();
        let h = p.to_dense();
        let oracle = &w * (w.transpose() * &w).try_inverse().unwrap() * w.transpose();
        assert_relative_eq!(h, oracle, epsilon = 1e-8);
        assert!((&h * &h - &h).norm() <= 1e-8);
        assert_relative_eq!(&h * &w, w.clone(), epsilon = 1e-10);
        assert_relative_eq!(h.clone(), h.transpose(), epsilon = 1e-14);
        let v = normal_vector(&mut rng, 30);
        assert_relative_eq!(p.complement(&v), &v - &oracle * &v, epsilon = 1e-10);
    }

    #[test]
    fn rank_deficient_projection_errors_or_falls_back() {
        let b = SplineBasis::new(8, 4).unwrap();
        let w = spline_design(&b, &[0.5; 12]).unwrap();
        assert!(matches!(Projection::onto(&w, false), Err(Error::RankDeficient { rank: 1, cols: 8 })));
        let p = Projection::onto(&w, true).unwrap();
        assert!(p.used_pseudo_inverse());
        assert_eq!(p.rank(), 1);
        assert_relative_eq!(p.to_dense() * &w, w, epsilon = 1e-12);
    }

    #[test]
    fn approximation_reproduces_polynomials() {
        let b = SplineBasis::new(10, 4).unwrap();
        assert!(approx_error(|_| 2.5, &b, 10_000).unwrap() <= 1e-10);
        let b2 = SplineBasis::new(6, 2).unwrap();
        assert!(approx_error(|z| 3.0 * z - 1.0, &b2, 10_000).unwrap() <= 1e-8);
        assert!(approx_error(|z| z * z * z, &b, 10_000).unwrap() <= 1e-8);
    }

    #[test]
    fn smooth_function_error_decays_at_order_rate() {
        let dims = [8.0, 16.0, 32.0, 64.0];
        let errs: Vec<f64> = dims
            .iter()
            .map(|&j| approx_error(|z| (2.0 * std::f64::consts::PI * z).sin(), &SplineBasis::new(j as usize, 4).unwrap(), 10_000).unwrap())
            .collect();
        assert!(log_log_slope(&dims, &errs) <= -3.5);
    }

    #[test]
    fn log_log_slope_of_power_law() {
        let x = [50.0, 100.0, 200.0, 400.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert_relative_eq!(log_log_slope(&x, &y), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn norm_equivalence_constants_are_bounded() {
        let mut rng = stream_rng(6, 0);
        let b = SplineBasis::new(10, 4).unwrap();
        let betas: Vec<DVector<f64>> = (0..100).map(|_| normal_vector(&mut rng, 10)).collect();
        let (lo, hi) = norm_equivalence(&b, &equispaced(40), &betas).unwrap();
        assert!(lo > 0.1 && hi < 10.0 && lo <= hi);
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_nonnegativity(z in 0.0f64..=1.0, j in 4usize..40, q in 1usize..5) {
            let b = SplineBasis::new(j.max(q), q).unwrap();
            let v = b.eval(z).unwrap();
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!((v.sum() - 1.0).abs() <= 1e-12);
        }
    }
}
