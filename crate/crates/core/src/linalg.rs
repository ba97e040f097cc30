//! Dense linear-algebra and special-function helpers shared by every module.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest one mark a matrix as not SPD.
pub const SPD_RELATIVE_TOL: f64 = 1e-12;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Symmetric positive definite matrix with its eigendecomposition cached.
///
/// Square roots are the symmetric ones, `V diag(sqrt(d)) V^T`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    matrix: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    log_det: f64,
}

impl SpdFactor {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let r = matrix.nrows();
        if r != matrix.ncols() {
            return Err(Error::Shape(format!(
                "expected square matrix, got {}x{}",
                r,
                matrix.ncols()
            )));
        }
        if r == 0 {
            return Err(Error::Shape("empty covariance matrix".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance entry".into()));
        }
        let sym = symmetrize(&matrix);
        if r == 1 {
            let d = sym[(0, 0)];
            if d <= 0.0 {
                return Err(Error::NotSpd {
                    group: None,
                    min_eig: d,
                    max_eig: d,
                });
            }
            return Ok(Self {
                inv_sqrt: DMatrix::from_element(1, 1, 1.0 / d.sqrt()),
                eigenvalues: DVector::from_element(1, d),
                eigenvectors: DMatrix::identity(1, 1),
                log_det: d.ln(),
                matrix: sym,
            });
        }
        let eig = SymmetricEigen::new(sym.clone());
        let max_eig = eig.eigenvalues.max();
        let min_eig = eig.eigenvalues.min();
        if max_eig <= 0.0 || min_eig <= SPD_RELATIVE_TOL * max_eig {
            return Err(Error::NotSpd {
                group: None,
                min_eig,
                max_eig,
            });
        }
        let inv_sqrt_diag = eig.eigenvalues.map(|d| 1.0 / d.sqrt());
        let inv_sqrt = scaled_outer(&eig.eigenvectors, &inv_sqrt_diag);
        let log_det = eig.eigenvalues.iter().map(|d| d.ln()).sum();
        Ok(Self {
            matrix: sym,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            inv_sqrt,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.max()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Δ^{-1/2}` (symmetric root).
    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        scaled_outer(&self.eigenvectors, &self.eigenvalues.map(f64::sqrt))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        scaled_outer(&self.eigenvectors, &self.eigenvalues.map(|d| 1.0 / d))
    }

    /// `Δ^{-1/2} v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.inv_sqrt * v
    }

    /// `v^T Δ^{-1} v`.
    pub fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        (&self.inv_sqrt * v).norm_squared()
    }
}

/// `V diag(d) V^T`.
pub fn scaled_outer(v: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= d[j];
    }
    &scaled * v.transpose()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky-based log-determinant; errors when the matrix is not SPD.
pub fn chol_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m.clone().cholesky().ok_or(Error::NotSpd {
        group: None,
        min_eig: f64::NAN,
        max_eig: f64::NAN,
    })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => f64::INFINITY,
        1 => m[(0, 0)],
        2 => {
            let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            mean - rad
        }
        _ => SymmetricEigen::new(symmetrize(m)).eigenvalues.min(),
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `log Φ(x)`, accurate far into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -5.0 {
        norm_cdf(x).ln()
    } else {
        norm_log_pdf(x) + mills_tail(-x).ln()
    }
}

/// `Φ(−t)/φ(t)` for `t ≥ 5`, by backward evaluation of the continued fraction
/// `1/(t + 1/(t + 2/(t + 3/(t + …))))`.
fn mills_tail(t: f64) -> f64 {
    let mut acc = t;
    for k in (1..=120).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

pub fn norm_log_pdf(x: f64) -> f64 {
    -0.5 * (LN_2PI + x * x)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

pub fn ln_binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Number of supports of size at most `s_max` in dimension `p`, as a float.
pub fn support_count(p: usize, s_max: usize) -> f64 {
    (0..=s_max.min(p))
        .map(|s| ln_binomial(p, s).exp())
        .sum::<f64>()
        .round()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            if n == 1 {
                p1 = x;
                p0 = 1.0;
            } else {
                for k in 2..=n {
                    let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = pk;
                }
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        if n == 1 {
            return (vec![0.0], vec![2.0]);
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Lexicographic k-subsets of `0..n`.
#[derive(Clone, Debug)]
pub struct Combinations {
    n: usize,
    current: Vec<usize>,
    done: bool,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let k = self.current.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.current[i] < self.n - k + i {
                self.current[i] += 1;
                for j in i + 1..k {
                    self.current[j] = self.current[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// All supports of size `0..=s_max`, smallest first.
pub fn supports_up_to(p: usize, s_max: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..=s_max.min(p)).flat_map(move |s| Combinations::new(p, s))
}

/// Submatrix of `m` at rows and columns `idx`.
pub fn principal_submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

pub fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Serde helper storing a matrix as a list of rows.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(de)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

/// Serde helper for optional row-list matrices.
pub mod serde_rows_opt {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, ser: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(super::serde_rows::to_rows).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows: Option<Vec<Vec<f64>>> = Option::deserialize(de)?;
        rows.map(|r| super::serde_rows::from_rows(&r))
            .transpose()
            .map_err(serde::de::Error::custom)
    }
}

/// Serde helper storing a vector as a plain list.
pub mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, ser: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Vec::deserialize(de)?;
        Ok(DVector::from_vec(v))
    }
}
