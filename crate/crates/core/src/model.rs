//! Linear state dynamics and the unit-variance identification constraint.
//!
//! The latent process is `x_{t+1} = A x_t + e_t` with `e_t ~ N(0, Sigma)`.
//! `Sigma` is diagonal and never estimated directly: for any admissible `A`
//! it is solved so that the stationary covariance `Gamma` has a unit
//! diagonal. Matrices that travel through hot loops are passed as row-major
//! slices; the [`DynamicsSpec`] wrapper uses nalgebra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spectral radius threshold used to reject transition matrices during estimation.
pub const ESTIMATION_STATIONARITY_MARGIN: f64 = 0.02;

const PIVOT_EPS: f64 = 1e-13;

fn check_square(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::invalid(format!(
            "transition matrix must be square and non-empty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("transition matrix has non-finite entries"));
    }
    Ok(())
}

/// Row-major copy of a square matrix.
pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let p = a.nrows();
    let mut out = Vec::with_capacity(p * a.ncols());
    for i in 0..p {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(p: usize, a: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(p, p, a)
}

/// Largest eigenvalue modulus of a row-major `p x p` matrix.
pub fn spectral_radius_slice(a: &[f64], p: usize) -> f64 {
    match p {
        1 => a[0].abs(),
        2 => {
            let half_tr = 0.5 * (a[0] + a[3]);
            let det = a[0] * a[3] - a[1] * a[2];
            let disc = half_tr * half_tr - det;
            if disc >= 0.0 {
                let s = disc.sqrt();
                (half_tr + s).abs().max((half_tr - s).abs())
            } else {
                det.sqrt()
            }
        }
        _ => from_row_major(p, a)
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    check_square(a)?;
    Ok(spectral_radius_slice(&to_row_major(a), a.nrows()))
}

/// `true` iff every eigenvalue of `a` has modulus below `1 - margin`.
pub fn spectral_radius_ok(a: &DMatrix<f64>, margin: f64) -> Result<bool> {
    Ok(spectral_radius(a)? < 1.0 - margin)
}

/// Solves `Gamma = A Gamma A' + Sigma` through `vec(Gamma) = (I - A (x) A)^-1 vec(Sigma)`.
pub fn stationary_covariance(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(a)?;
    let p = a.nrows();
    if sigma.nrows() != p || sigma.ncols() != p {
        return Err(Error::invalid("innovation covariance must match the state dimension"));
    }
    let n = p * p;
    let system = DMatrix::<f64>::identity(n, n) - a.kronecker(a);
    // nalgebra storage is column-major, which is exactly vec().
    let rhs = DVector::from_column_slice(sigma.as_slice());
    let lu = system.lu();
    let vec_gamma = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Stationarity("I - A (x) A is singular".into()))?;
    if vec_gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stationarity("stationary covariance is not finite".into()));
    }
    let gamma = DMatrix::from_column_slice(p, p, vec_gamma.as_slice());
    Ok((&gamma + gamma.transpose()) * 0.5)
}

/// Dense Gaussian elimination with partial pivoting; `m` is `n x n` row-major
/// and is overwritten. Returns `None` on a (numerically) singular pivot.
fn solve_dense(m: &mut [f64], rhs: &mut [f64], n: usize) -> Option<()> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[pivot * n + col].abs() <= PIVOT_EPS * scale {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    m[row * n + k] -= f * m[col * n + k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row * n + k] * rhs[k];
        }
        rhs[row] = acc / m[row * n + row];
    }
    Some(())
}

/// Innovation variances and the stationary correlation matrix implied by `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub sigma_diag: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

/// Slice form of [`solve_identification`]: fills `sigma_out` (length `p`) and
/// `gamma_out` (row-major `p x p`).
///
/// The off-diagonal stationary covariances do not depend on `Sigma` once it is
/// diagonal and `diag(Gamma) = 1`, so they are solved first from the
/// `p(p-1)/2` off-diagonal equations; each `sigma_i` then follows from the
/// matching diagonal equation.
pub fn identify_into(a: &[f64], p: usize, sigma_out: &mut [f64], gamma_out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(a.len(), p * p);
    let at = |i: usize, j: usize| a[i * p + j];

    for i in 0..p {
        gamma_out[i * p + i] = 1.0;
    }
    if p == 2 {
        let denom = 1.0 - a[0] * a[3] - a[1] * a[2];
        if denom.abs() < 1e-14 {
            return Err(Error::Identification("constrained stationary system is singular".into()));
        }
        let g = (a[0] * a[2] + a[1] * a[3]) / denom;
        gamma_out[1] = g;
        gamma_out[2] = g;
    } else if p > 2 {
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
        let n = pairs.len();
        let mut m = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        for (r, &(i, j)) in pairs.iter().enumerate() {
            rhs[r] = (0..p).map(|k| at(i, k) * at(j, k)).sum();
            for (c, &(k, l)) in pairs.iter().enumerate() {
                let coupling = at(i, k) * at(j, l) + at(i, l) * at(j, k);
                m[r * n + c] = if r == c { 1.0 - coupling } else { -coupling };
            }
        }
        solve_dense(&mut m, &mut rhs, n)
            .ok_or_else(|| Error::Identification("constrained stationary system is singular".into()))?;
        for (r, &(i, j)) in pairs.iter().enumerate() {
            gamma_out[i * p + j] = rhs[r];
            gamma_out[j * p + i] = rhs[r];
        }
    }

    for i in 0..p {
        let mut explained = 0.0;
        for k in 0..p {
            let aik = at(i, k);
            if aik == 0.0 {
                continue;
            }
            for l in 0..p {
                explained += aik * at(i, l) * gamma_out[k * p + l];
            }
        }
        let s = 1.0 - explained;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InfeasibleDynamics(format!(
                "innovation variance for state {} would be {s}",
                i + 1
            )));
        }
        sigma_out[i] = s;
    }
    Ok(())
}

/// Innovation variances that pin the stationary state variances at 1.
pub fn solve_identification(a: &DMatrix<f64>) -> Result<Identification> {
    check_square(a)?;
    if !spectral_radius_ok(a, 0.0)? {
        return Err(Error::Stationarity(format!(
            "spectral radius {} is not below 1",
            spectral_radius(a)?
        )));
    }
    let p = a.nrows();
    let mut sigma = vec![0.0; p];
    let mut gamma = vec![0.0; p * p];
    identify_into(&to_row_major(a), p, &mut sigma, &mut gamma)?;
    Ok(Identification {
        sigma_diag: DVector::from_vec(sigma),
        gamma: DMatrix::from_row_slice(p, p, &gamma),
    })
}

/// Admissibility test used during estimation: spectral radius below
/// `1 - margin` and a strictly positive innovation variance for every state.
/// On success `sigma_out` holds the innovation variances.
pub fn feasible_innovations(a: &[f64], p: usize, margin: f64, sigma_out: &mut [f64]) -> bool {
    if a.iter().any(|v| !v.is_finite()) || spectral_radius_slice(a, p) >= 1.0 - margin {
        return false;
    }
    let mut gamma = [0.0; 16];
    if p * p <= gamma.len() {
        identify_into(a, p, sigma_out, &mut gamma[..p * p]).is_ok()
    } else {
        let mut gamma = vec![0.0; p * p];
        identify_into(a, p, sigma_out, &mut gamma).is_ok()
    }
}

/// A transition matrix together with its identified innovation variances.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSpec {
    a: DMatrix<f64>,
    sigma_diag: DVector<f64>,
    gamma: DMatrix<f64>,
}

impl DynamicsSpec {
    /// Identified dynamics for a stationary `A`.
    pub fn identified(a: DMatrix<f64>) -> Result<Self> {
        let Identification { sigma_diag, gamma } = solve_identification(&a)?;
        Ok(Self { a, sigma_diag, gamma })
    }

    /// Dynamics with an explicitly supplied diagonal innovation covariance.
    /// The stationary covariance is whatever `A` and `sigma_diag` imply.
    pub fn with_innovations(a: DMatrix<f64>, sigma_diag: DVector<f64>) -> Result<Self> {
        check_square(&a)?;
        if sigma_diag.len() != a.nrows() || sigma_diag.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("innovation variances must be positive, one per state"));
        }
        if !spectral_radius_ok(&a, 0.0)? {
            return Err(Error::Stationarity("spectral radius is not below 1".into()));
        }
        let gamma = stationary_covariance(&a, &DMatrix::from_diagonal(&sigma_diag))?;
        Ok(Self { a, sigma_diag, gamma })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn sigma_diag(&self) -> &DVector<f64> {
        &self.sigma_diag
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn innovation_sd(&self) -> Vec<f64> {
        self.sigma_diag.iter().map(|s| s.sqrt()).collect()
    }

    pub fn a_row_major(&self) -> Vec<f64> {
        to_row_major(&self.a)
    }
}

/// A `T x p` sequence of state vectors stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    n_states: usize,
    values: Vec<f64>,
}

impl StatePath {
    pub fn new(n_states: usize, values: Vec<f64>) -> Result<Self> {
        if n_states == 0 || values.len() % n_states != 0 {
            return Err(Error::invalid("state path length is not a multiple of the state dimension"));
        }
        Ok(Self { n_states, values })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The trajectory of one state.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.iter().skip(i).step_by(self.n_states).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    #[test]
    fn spectral_radius_examples() {
        assert!(spectral_radius_ok(&DMatrix::zeros(2, 2), 0.0).unwrap());
        assert!(!spectral_radius_ok(&DMatrix::from_element(1, 1, 1.0), 0.0).unwrap());
        assert!(spectral_radius_ok(&m2(0.3, 0.25, 0.0, 0.3), 0.02).unwrap());
        // rotation-like matrix with complex eigenvalues of modulus 0.5
        let r = spectral_radius(&m2(0.0, -0.5, 0.5, 0.0)).unwrap();
        assert_abs_diff_eq!(r, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spectral_radius_general_matches_closed_form() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, -0.6, 0.2, 0.0, 0.0, 0.2]);
        assert_abs_diff_eq!(spectral_radius(&a).unwrap(), 0.6, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(spectral_radius_ok(&rect, 0.0), Err(Error::InvalidInput(_))));
        let nan = m2(f64::NAN, 0.0, 0.0, 0.1);
        assert!(matches!(spectral_radius_ok(&nan, 0.0), Err(Error::InvalidInput(_))));
        assert!(matches!(
            solve_identification(&m2(1.0, 0.0, 0.0, 0.5)),
            Err(Error::Stationarity(_))
        ));
    }

    #[test]
    fn stationary_covariance_examples() {
        let g = stationary_covariance(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(g, DMatrix::identity(2, 2), epsilon = 1e-14);

        let g = stationary_covariance(&DMatrix::from_element(1, 1, 0.5), &DMatrix::from_element(1, 1, 0.75)).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 1.0, epsilon = 1e-14);

        let a = m2(0.3, 0.25, 0.0, 0.3);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.835137, 0.91]));
        let g = stationary_covariance(&a, &sigma).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[(1, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(0, 1)], 0.0824176, epsilon = 1e-7);
        assert_eq!(g[(0, 1)], g[(1, 0)]);
    }

    /// Closed-form 2x2 solution for A = [[a, c], [0, a]].
    fn upper_triangular_oracle(a: f64, c: f64) -> (f64, f64, f64) {
        let gamma = a * c / (1.0 - a * a);
        let s2 = 1.0 - a * a;
        let s1 = 1.0 - a * a - c * c - 2.0 * a * c * gamma;
        (s1, s2, gamma)
    }

    #[test]
    fn identification_examples() {
        let id = solve_identification(&DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.3]))).unwrap();
        assert_abs_diff_eq!(id.sigma_diag[0], 0.91, epsilon = 1e-14);
        assert_abs_diff_eq!(id.sigma_diag[1], 0.91, epsilon = 1e-14);
        assert_eq!(id.gamma[(0, 1)], 0.0);

        let id = solve_identification(&DMatrix::from_element(1, 1, 0.7)).unwrap();
        assert_abs_diff_eq!(id.sigma_diag[0], 0.51, epsilon = 1e-14);

        let id = solve_identification(&m2(0.3, 0.25, 0.0, 0.3)).unwrap();
        let (s1, s2, g) = upper_triangular_oracle(0.3, 0.25);
        assert_abs_diff_eq!(id.sigma_diag[0], s1, epsilon = 1e-12);
        assert_abs_diff_eq!(id.sigma_diag[1], s2, epsilon = 1e-12);
        assert_abs_diff_eq!(id.gamma[(0, 1)], g, epsilon = 1e-12);
        assert_abs_diff_eq!(id.sigma_diag[0], 0.835137, epsilon = 1e-6);
        assert_abs_diff_eq!(id.gamma[(0, 1)], 0.0824176, epsilon = 1e-7);

        let id = solve_identification(&m2(0.7, 0.25, 0.0, 0.7)).unwrap();
        assert_abs_diff_eq!(id.sigma_diag[0], 0.3274020, epsilon = 1e-7);
        assert_abs_diff_eq!(id.sigma_diag[1], 0.51, epsilon = 1e-12);
        assert_abs_diff_eq!(id.gamma[(0, 1)], 0.3431373, epsilon = 1e-7);
    }

    #[test]
    fn infeasible_dynamics_is_reported() {
        // stationary but needs a negative innovation variance for unit variance
        let a = m2(0.9, 0.9, 0.0, 0.0);
        assert!(spectral_radius_ok(&a, 0.0).unwrap());
        assert!(matches!(solve_identification(&a), Err(Error::InfeasibleDynamics(_))));
        let mut s = [0.0; 2];
        assert!(!feasible_innovations(&to_row_major(&a), 2, 0.02, &mut s));
    }

    #[test]
    fn identification_fixed_point_three_states() {
        let a = DMatrix::from_row_slice(3, 3, &[0.4, 0.1, -0.2, 0.05, 0.3, 0.1, 0.0, -0.15, 0.5]);
        let id = solve_identification(&a).unwrap();
        let residual = &id.gamma - &a * &id.gamma * a.transpose() - DMatrix::from_diagonal(&id.sigma_diag);
        assert!(residual.amax() < 1e-12);
        let g = stationary_covariance(&a, &DMatrix::from_diagonal(&id.sigma_diag)).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(g[(i, i)], 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn identification_is_bitwise_deterministic() {
        let a = m2(0.45, -0.2, 0.3, 0.6);
        assert_eq!(solve_identification(&a).unwrap(), solve_identification(&a).unwrap());
    }

    #[test]
    fn dynamics_spec_accessors() {
        let d = DynamicsSpec::identified(m2(0.3, 0.25, 0.0, 0.3)).unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.a_row_major(), vec![0.3, 0.25, 0.0, 0.3]);
        assert_abs_diff_eq!(d.innovation_sd()[1], 0.91f64.sqrt(), epsilon = 1e-14);
        let free = DynamicsSpec::with_innovations(DMatrix::zeros(2, 2), DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_abs_diff_eq!(free.gamma()[(1, 1)], 3.0, epsilon = 1e-14);
    }
}
