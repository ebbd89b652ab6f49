//! Measurement models: graded response items and linear-Gaussian loadings.
//!
//! Items are conditionally independent given the latent state. Graded
//! response categories are 1-based, so an item with `J` categories accepts
//! `y` in `1..=J`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to category probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `logistic(hi) - logistic(lo)` for `hi >= lo`, computed on the side of zero
/// where the difference does not cancel.
#[inline]
pub fn logistic_diff(hi: f64, lo: f64) -> f64 {
    if lo >= 0.0 {
        logistic(-lo) - logistic(-hi)
    } else {
        logistic(hi) - logistic(lo)
    }
}

/// One ordinal item under the graded response model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedResponseItem {
    alpha: f64,
    betas: Vec<f64>,
    state_index: usize,
}

impl GradedResponseItem {
    pub fn new(alpha: f64, betas: Vec<f64>, state_index: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("discrimination must be positive, got {alpha}")));
        }
        if betas.is_empty() {
            return Err(Error::invalid("an item needs at least one threshold (two categories)"));
        }
        if betas.iter().any(|b| !b.is_finite()) || betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("thresholds must be finite and strictly increasing: {betas:?}")));
        }
        Ok(Self { alpha, betas, state_index })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn state_index(&self) -> usize {
        self.state_index
    }

    pub fn n_categories(&self) -> usize {
        self.betas.len() + 1
    }

    /// `P(y > j | x)`; `j = 0` is 1 by convention.
    pub fn exceedance_prob(&self, j: usize, x: &[f64]) -> Result<f64> {
        if j >= self.n_categories() {
            return Err(Error::invalid(format!(
                "exceedance index {j} outside 0..{}",
                self.n_categories() - 1
            )));
        }
        let eta = self.selected(x)?;
        Ok(if j == 0 { 1.0 } else { logistic(self.alpha * (eta - self.betas[j - 1])) })
    }

    /// `P(y = j | x)` for `j` in `1..=J`.
    pub fn category_prob(&self, j: usize, x: &[f64]) -> Result<f64> {
        if j == 0 || j > self.n_categories() {
            return Err(Error::invalid(format!("category {j} outside 1..={}", self.n_categories())));
        }
        Ok(self.category_prob_at(j, self.selected(x)?))
    }

    fn selected(&self, x: &[f64]) -> Result<f64> {
        x.get(self.state_index)
            .copied()
            .ok_or_else(|| Error::invalid(format!("state vector has no entry {}", self.state_index)))
    }

    /// Category probability given the selected state value `eta`.
    #[inline]
    pub fn category_prob_at(&self, j: usize, eta: f64) -> f64 {
        category_prob_from_bounds(
            self.alpha,
            eta,
            if j >= 2 { Some(self.betas[j - 2]) } else { None },
            self.betas.get(j - 1).copied(),
        )
    }

    fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> usize {
        let eta = x[self.state_index];
        let u: f64 = rng.random();
        1 + self
            .betas
            .iter()
            .take_while(|&&b| u < logistic(self.alpha * (eta - b)))
            .count()
    }
}

/// `P(lower < latent <= upper)` on the logistic scale, where a missing bound is infinite.
#[inline]
pub(crate) fn category_prob_from_bounds(alpha: f64, eta: f64, lower: Option<f64>, upper: Option<f64>) -> f64 {
    match (lower, upper) {
        (None, None) => 1.0,
        (None, Some(hi)) => logistic(-alpha * (eta - hi)),
        (Some(lo), None) => logistic(alpha * (eta - lo)),
        (Some(lo), Some(hi)) => logistic_diff(alpha * (eta - lo), alpha * (eta - hi)),
    }
}

/// `y = C x + e`, `e ~ N(0, diag(psi))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianMeasurement {
    loadings: DMatrix<f64>,
    psi_diag: Vec<f64>,
}

impl LinearGaussianMeasurement {
    pub fn new(loadings: DMatrix<f64>, psi_diag: Vec<f64>) -> Result<Self> {
        if loadings.nrows() != psi_diag.len() {
            return Err(Error::invalid("one measurement-error variance per row of C is required"));
        }
        if psi_diag.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("measurement-error variances must be positive and finite"));
        }
        if loadings.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("loadings must be finite"));
        }
        Ok(Self { loadings, psi_diag })
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn psi_diag(&self) -> &[f64] {
        &self.psi_diag
    }

    pub fn n_items(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.loadings.ncols()
    }

    fn mean(&self, i: usize, x: &[f64]) -> f64 {
        (0..self.loadings.ncols()).map(|j| self.loadings[(i, j)] * x[j]).sum()
    }
}

/// Log-density of `N(mean, var)` at `y`.
#[inline]
pub fn normal_log_density(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -HALF_LN_2PI - 0.5 * var.ln() - 0.5 * d * d / var
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementModel {
    GradedResponse(Vec<GradedResponseItem>),
    LinearGaussian(LinearGaussianMeasurement),
}

impl MeasurementModel {
    pub fn n_items(&self) -> usize {
        match self {
            MeasurementModel::GradedResponse(items) => items.len(),
            MeasurementModel::LinearGaussian(m) => m.n_items(),
        }
    }

    /// Checks that every row of `data` can be scored by this model.
    pub fn validate(&self, data: &Observations) -> Result<()> {
        if data.n_items() != self.n_items() {
            return Err(Error::invalid(format!(
                "data has {} items but the measurement model has {}",
                data.n_items(),
                self.n_items()
            )));
        }
        match self {
            MeasurementModel::GradedResponse(items) => {
                for t in 0..data.len() {
                    for (i, (item, &y)) in items.iter().zip(data.row(t)).enumerate() {
                        if y.fract() != 0.0 || y < 1.0 || y > item.n_categories() as f64 {
                            return Err(Error::invalid(format!(
                                "row {} item {}: category {y} outside 1..={}",
                                t + 1,
                                i + 1,
                                item.n_categories()
                            )));
                        }
                    }
                }
            }
            MeasurementModel::LinearGaussian(_) => {
                if data.values().iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("observations must be finite"));
                }
            }
        }
        Ok(())
    }

    /// `log p(y | x)`. Assumes `y` already passed [`validate`](Self::validate).
    pub fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        match self {
            MeasurementModel::GradedResponse(items) => items
                .iter()
                .zip(y)
                .map(|(item, &yi)| {
                    item.category_prob_at(yi as usize, x[item.state_index])
                        .max(PROB_FLOOR)
                        .ln()
                })
                .sum(),
            MeasurementModel::LinearGaussian(m) => m
                .psi_diag
                .iter()
                .zip(y)
                .enumerate()
                .map(|(i, (&psi, &yi))| normal_log_density(yi, m.mean(i, x), psi))
                .sum(),
        }
    }

    /// Draws item `i` given the state.
    pub fn sample_item<R: Rng + ?Sized>(&self, i: usize, x: &[f64], rng: &mut R) -> f64 {
        match self {
            MeasurementModel::GradedResponse(items) => items[i].sample(x, rng) as f64,
            MeasurementModel::LinearGaussian(m) => {
                let z: f64 = rng.sample(StandardNormal);
                m.mean(i, x) + m.psi_diag[i].sqrt() * z
            }
        }
    }

    pub fn sample_observation<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        (0..self.n_items()).map(|i| self.sample_item(i, x, rng)).collect()
    }
}

/// A `T x q` block of observations stored row-major. Graded response data
/// holds integer categories as `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    n_items: usize,
    values: Vec<f64>,
}

impl Observations {
    pub fn new(n_items: usize, values: Vec<f64>) -> Result<Self> {
        if n_items == 0 || values.len() % n_items != 0 {
            return Err(Error::invalid(format!(
                "{} values cannot be split into rows of {n_items} items",
                values.len()
            )));
        }
        Ok(Self { n_items, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let q = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != q) {
            return Err(Error::invalid("ragged observation rows"));
        }
        Self::new(q, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_items..(t + 1) * self.n_items]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest value in column `i`.
    pub fn column_max(&self, i: usize) -> f64 {
        (0..self.len()).map(|t| self.row(t)[i]).fold(f64::NEG_INFINITY, f64::max)
    }
}
