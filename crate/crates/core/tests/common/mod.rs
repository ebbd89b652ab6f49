//! Oracles shared by the integration tests. Nothing here calls into the
//! library's own filtering or identification code.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Exact log-likelihood of `y_t = C x_t + e_t`, `x_t = A x_{t-1} + u_t`,
/// `x_0 ~ N(0, I)`, in covariance form: predict,
/// then update with the explicit inverse of the innovation covariance.
pub fn kalman_loglik(a: &DMatrix<f64>, sigma: &[f64], c: &DMatrix<f64>, psi: &[f64], y: &[Vec<f64>]) -> f64 {
    let p = a.nrows();
    let q = c.nrows();
    let big_q = DMatrix::from_diagonal(&DVector::from_column_slice(sigma));
    let big_r = DMatrix::from_diagonal(&DVector::from_column_slice(psi));
    let mut m = DVector::zeros(p);
    let mut v = DMatrix::identity(p, p);
    let mut ll = 0.0;
    for row in y {
        let mp = a * &m;
        let vp = a * &v * a.transpose() + &big_q;
        let s = c * &vp * c.transpose() + &big_r;
        let s_inv = s.clone().try_inverse().expect("innovation covariance is invertible");
        let resid = DVector::from_column_slice(row) - c * &mp;
        let quad = (resid.transpose() * &s_inv * &resid)[(0, 0)];
        ll += -0.5 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad);
        let k = &vp * c.transpose() * &s_inv;
        m = &mp + &k * resid;
        // Joseph form
        let i_kc = DMatrix::identity(p, p) - &k * c;
        v = &i_kc * &vp * i_kc.transpose() + &k * &big_r * k.transpose();
    }
    ll
}

/// Stationary covariance from the Kronecker form `vec(G) = (I - A (x) A)^-1 vec(S)`.
pub fn kronecker_gamma(a: &DMatrix<f64>, sigma: &[f64]) -> DMatrix<f64> {
    let p = a.nrows();
    let lhs = DMatrix::identity(p * p, p * p) - a.kronecker(a);
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(sigma));
    let vec_s = DVector::from_column_slice(s.as_slice());
    let vec_g = lhs.lu().solve(&vec_s).expect("I - A (x) A is invertible");
    DMatrix::from_column_slice(p, p, vec_g.as_slice())
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Random `p x p` matrix rescaled to a spectral radius drawn from `(0.05, 0.95)`.
pub fn random_stationary<R: Rng>(p: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let rho = spectral_radius(&a);
        if rho < 1e-3 {
            continue;
        }
        let target = rng.random_range(0.05..0.95);
        return a * (target / rho);
    }
}

/// Simulates `T` steps of a linear-Gaussian model with its own generator.
pub fn simulate_linear<R: Rng>(
    a: &DMatrix<f64>,
    sigma: &[f64],
    c: &DMatrix<f64>,
    psi: &[f64],
    t: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let p = a.nrows();
    let mut x = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        x = a * &x + DVector::from_fn(p, |i, _| sigma[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let y = c * &x;
        out.push((0..c.nrows()).map(|i| y[i] + psi[i].sqrt() * rng.sample::<f64, _>(StandardNormal)).collect());
    }
    out
}

/// Mean and batch-means standard error of `x` split into `batches` equal batches.
pub fn batch_mean_se(x: &[f64], batches: usize) -> (f64, f64) {
    let n = x.len() / batches;
    let means: Vec<f64> = x.chunks_exact(n).map(|b| b.iter().sum::<f64>() / n as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (m, (var / batches as f64).sqrt())
}
