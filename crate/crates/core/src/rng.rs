use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic generator for `(seed, stream)`; streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| std_normal(rng))
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // column-major fill keeps draws in a fixed order
    DMatrix::from_fn(rows, cols, |_, _| std_normal(rng))
}

/// Draw from `N(mean, L L^T)` given the lower Cholesky factor `L`.
pub fn mvn_with_factor<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    chol_lower: &DMatrix<f64>,
) -> DVector<f64> {
    mean + chol_lower * normal_vector(rng, mean.len())
}
