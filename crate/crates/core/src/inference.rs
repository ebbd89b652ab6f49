//! Slice-likelihood standard errors and Wald intervals.
//!
//! Each parameter is moved along an equispaced grid around the estimate while
//! the others stay fixed. The replicate-averaged log-likelihoods are fitted
//! with `a + b d + c d^2`, and `SE = 1 / sqrt(-2c)` (a diagonal Fisher
//! approximation).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{particle_filter, FilterOptions};
use crate::measurement::Observations;
use crate::mif2::FitResult;
use crate::rng::{mix, tag};

pub const Z_95: f64 = 1.96;
pub const Z_998: f64 = 3.09;

/// Which coordinates to slice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceTarget {
    #[default]
    All,
    /// Only the entries of `A`.
    Dynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    pub n_points: usize,
    /// Half-width of the grid in natural units.
    pub half_width: f64,
    /// Particle-filter evaluations averaged at every grid point.
    pub replicates: usize,
    pub particles: usize,
    pub seed: u64,
    /// Repeat the slice once with half-width `3 SE` when that is narrower than `half_width`.
    #[serde(default = "default_refine")]
    pub refine: bool,
    #[serde(default)]
    pub target: SliceTarget,
}

fn default_refine() -> bool {
    true
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            n_points: 21,
            half_width: 0.5,
            replicates: 3,
            particles: 1000,
            seed: 0,
            refine: true,
            target: SliceTarget::All,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 5 || self.n_points % 2 == 0 {
            return Err(Error::invalid(format!("n_points must be odd and at least 5, got {}", self.n_points)));
        }
        if !(self.half_width > 0.0) || !self.half_width.is_finite() {
            return Err(Error::invalid("half_width must be positive"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("need at least one replicate per grid point"));
        }
        if self.particles < 2 {
            return Err(Error::invalid("need at least 2 particles"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePoint {
    pub value: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSlice {
    pub name: String,
    pub estimate: f64,
    /// Missing when the fitted curvature is not negative.
    pub se: Option<f64>,
    /// Second derivative of the fitted quadratic, `2c`.
    pub curvature: f64,
    pub flat: bool,
    pub half_width: f64,
    pub points: Vec<SlicePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSEResult {
    pub config: SliceConfig,
    pub parameters: Vec<ParameterSlice>,
}

impl SliceSEResult {
    pub fn get(&self, name: &str) -> Option<&ParameterSlice> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|p| p.se)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParameterSlice> {
        self.parameters.iter().filter(|p| p.flat)
    }
}

/// Least-squares fit of `y = a + b d + c d^2`; returns `(a, b, c)`.
pub fn quadratic_fit(d: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if d.len() != y.len() {
        return Err(Error::invalid("abscissae and ordinates differ in length"));
    }
    if d.len() < 3 {
        return Err(Error::invalid("a quadratic needs at least 3 points"));
    }
    let x = DMatrix::from_fn(d.len(), 3, |i, j| d[i].powi(j as i32));
    let rhs = DVector::from_column_slice(y);
    let coef = x
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Numerical(format!("quadratic regression failed: {e}")))?;
    Ok((coef[0], coef[1], coef[2]))
}

/// `(SE, curvature)` from slice points around `center`; SE is missing when
/// the curvature is not negative.
pub fn se_from_points(center: f64, points: &[SlicePoint]) -> Result<(Option<f64>, f64)> {
    let d: Vec<f64> = points.iter().map(|p| p.value - center).collect();
    let y: Vec<f64> = points.iter().map(|p| p.log_likelihood).collect();
    let (a, _, c) = quadratic_fit(&d, &y)?;
    // curvature indistinguishable from rounding error counts as flat
    let reach = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let negligible = (c * reach * reach).abs() <= 1e-12 * (1.0 + a.abs());
    let se = (c < 0.0 && !negligible).then(|| 1.0 / (-2.0 * c).sqrt());
    Ok((se, 2.0 * c))
}

fn grid(center: f64, half_width: f64, n: usize) -> Vec<f64> {
    let step = 2.0 * half_width / (n - 1) as f64;
    (0..n).map(|i| center - half_width + i as f64 * step).collect()
}

/// Slices the coordinates `indices` of `center`. `eval(theta, replicate)`
/// returns a log-likelihood, or `None` where `theta` is not a valid model;
/// such points are left out of the regression.
pub fn slice_se_with<F>(
    center: &[f64],
    names: &[String],
    indices: &[usize],
    config: &SliceConfig,
    eval: F,
) -> Result<SliceSEResult>
where
    F: Fn(&[f64], usize) -> Option<f64> + Sync,
{
    config.validate()?;
    let slice_one = |idx: usize, h: f64| -> Vec<SlicePoint> {
        grid(center[idx], h, config.n_points)
            .into_par_iter()
            .filter_map(|v| {
                let mut theta = center.to_vec();
                theta[idx] = v;
                let mut total = 0.0;
                for r in 0..config.replicates {
                    total += eval(&theta, r).filter(|l| l.is_finite())?;
                }
                Some(SlicePoint { value: v, log_likelihood: total / config.replicates as f64 })
            })
            .collect()
    };

    let mut parameters = Vec::with_capacity(indices.len());
    for &idx in indices {
        let mut h = config.half_width;
        let mut points = slice_one(idx, h);
        let mut fitted = fit_points(center[idx], &points)?;
        if config.refine {
            if let (Some(se), _) = fitted {
                let narrower = 3.0 * se;
                if narrower < 0.75 * h {
                    h = narrower;
                    points = slice_one(idx, h);
                    fitted = fit_points(center[idx], &points)?;
                }
            }
        }
        let (se, curvature) = fitted;
        parameters.push(ParameterSlice {
            name: names[idx].clone(),
            estimate: center[idx],
            se,
            curvature,
            flat: se.is_none(),
            half_width: h,
            points,
        });
    }
    Ok(SliceSEResult { config: config.clone(), parameters })
}

fn fit_points(center: f64, points: &[SlicePoint]) -> Result<(Option<f64>, f64)> {
    if points.len() < 5 {
        // too few valid models along this slice to trust a curvature
        return Ok((None, f64::NAN));
    }
    se_from_points(center, points)
}

/// Slice SEs for a fitted model. Every grid point is filtered with the same
/// `replicates` seeds, so differences along a slice are not swamped by
/// Monte-Carlo noise. `A` slices re-identify the innovation variances.
pub fn slice_se(fit: &FitResult, data: &Observations, config: &SliceConfig) -> Result<SliceSEResult> {
    if !fit.is_converged() {
        return Err(Error::Precondition(format!(
            "fit has {} failed run(s); slice SEs need a converged fit",
            fit.failed_runs
        )));
    }
    let layout = &fit.layout;
    layout.validate_data(data)?;
    let center = layout.to_natural(&fit.estimate)?;
    let names = layout.natural_names();
    let indices: Vec<usize> = match config.target {
        SliceTarget::All => (0..center.len()).collect(),
        SliceTarget::Dynamics => (0..layout.n_dynamics()).collect(),
    };
    let seeds: Vec<u64> = (0..config.replicates)
        .map(|r| mix(config.seed, &[tag::SLICE, r as u64]))
        .collect();
    slice_se_with(&center, &names, &indices, config, |theta, r| {
        let params = layout.from_natural(theta).ok()?;
        let (dynamics, measurement) = layout.build(&params).ok()?;
        let options = FilterOptions { particles: config.particles, seed: seeds[r], resampling: fit.config.resampling };
        particle_filter(&dynamics, &measurement, data, &options).ok().map(|o| o.log_likelihood)
    })
}

/// `estimate -/+ z se` with `z = 1.96` for 95% and `3.09` for 99.8%.
pub fn wald_ci(estimate: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::invalid(format!("standard error must be positive, got {se}")));
    }
    let z = z_for_level(level)?;
    Ok((estimate - z * se, estimate + z * se))
}

pub fn z_for_level(level: f64) -> Result<f64> {
    if (level - 0.95).abs() < 1e-12 {
        Ok(Z_95)
    } else if (level - 0.998).abs() < 1e-12 {
        Ok(Z_998)
    } else {
        Err(Error::invalid(format!("unsupported confidence level {level}; use 0.95 or 0.998")))
    }
}
