//! Bootstrap particle filter and the exact Kalman filter for linear-Gaussian models.
//!
//! The particle filter starts from `x_0 ~ N(0, I)`, propagates every particle
//! through the dynamics, weights it by the measurement likelihood and resamples
//! at every timepoint. Per-particle draws come from substreams addressed by
//! `(seed, t, k)`, and every floating-point reduction runs sequentially, so the
//! output is identical for any rayon pool size.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{LinearGaussianMeasurement, MeasurementModel, Observations};
use crate::model::{DynamicsSpec, StatePath};
use crate::rng::{stream, tag, StreamRng};

/// Minimum number of particles handed to one rayon task.
pub(crate) const PAR_CHUNK: usize = 64;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResamplingScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOptions {
    pub particles: usize,
    pub seed: u64,
    #[serde(default)]
    pub resampling: ResamplingScheme,
}

impl FilterOptions {
    pub fn new(particles: usize, seed: u64) -> Self {
        Self { particles, seed, resampling: ResamplingScheme::Multinomial }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub log_likelihood: f64,
    /// `E[x_t | y_1..y_t]` for `t = 1..T`.
    pub filtered_means: StatePath,
    pub effective_sample_sizes: Vec<f64>,
}

/// Normalizes log-weights in place into probabilities and returns
/// `(log mean of the unnormalized weights, effective sample size)`.
pub(crate) fn normalize_log_weights(log_w: &[f64], weights: &mut [f64], t: usize) -> Result<(f64, f64)> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::FilterDegeneracy { t });
    }
    let mut sum = 0.0;
    for (w, &lw) in weights.iter_mut().zip(log_w) {
        *w = if lw.is_nan() { 0.0 } else { (lw - max).exp() };
        sum += *w;
    }
    let mut sum_sq = 0.0;
    for w in weights.iter_mut() {
        *w /= sum;
        sum_sq += *w * *w;
    }
    Ok((max + (sum / log_w.len() as f64).ln(), 1.0 / sum_sq))
}

fn check_normalized(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("cannot resample an empty weight vector"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Multinomial resampling: `K` independent draws with `P(k) = w_k`.
pub fn resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    check_normalized(weights)?;
    let mut out = Vec::with_capacity(weights.len());
    multinomial_into(weights, rng, &mut out);
    Ok(out)
}

pub(crate) fn multinomial_into<R: Rng + ?Sized>(weights: &[f64], rng: &mut R, out: &mut Vec<usize>) {
    let k = weights.len();
    let mut cumulative = Vec::with_capacity(k);
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let last = k - 1;
    out.clear();
    out.extend((0..k).map(|_| {
        let u: f64 = rng.random::<f64>() * acc;
        cumulative.partition_point(|&c| c <= u).min(last)
    }));
}

/// Systematic resampling; lower variance, but not the default.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    check_normalized(weights)?;
    let mut out = Vec::with_capacity(weights.len());
    systematic_into(weights, rng, &mut out);
    Ok(out)
}

pub(crate) fn systematic_into<R: Rng + ?Sized>(weights: &[f64], rng: &mut R, out: &mut Vec<usize>) {
    let k = weights.len();
    let step = 1.0 / k as f64;
    let u0: f64 = rng.random::<f64>() * step;
    out.clear();
    let mut acc = weights[0];
    let mut j = 0;
    for i in 0..k {
        let u = u0 + i as f64 * step;
        while u > acc && j + 1 < k {
            j += 1;
            acc += weights[j];
        }
        out.push(j);
    }
}

pub(crate) fn resample_into(
    scheme: ResamplingScheme,
    weights: &[f64],
    rng: &mut StreamRng,
    out: &mut Vec<usize>,
) {
    match scheme {
        ResamplingScheme::Multinomial => multinomial_into(weights, rng, out),
        ResamplingScheme::Systematic => systematic_into(weights, rng, out),
    }
}

/// Bootstrap particle filter for fixed parameters.
pub fn particle_filter(
    dynamics: &DynamicsSpec,
    measurement: &MeasurementModel,
    data: &Observations,
    options: &FilterOptions,
) -> Result<FilterOutput> {
    let k = options.particles;
    if k < 2 {
        return Err(Error::invalid("the particle filter needs at least 2 particles"));
    }
    measurement.validate(data)?;
    let p = dynamics.dim();
    let a = dynamics.a_row_major();
    let sd = dynamics.innovation_sd();
    let seed = options.seed;

    let mut x = vec![0.0; k * p];
    let mut next = vec![0.0; k * p];
    x.par_chunks_mut(p).enumerate().with_min_len(PAR_CHUNK).for_each(|(i, xi)| {
        let mut rng = stream(seed, &[tag::PARTICLE, 0, i as u64]);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    });

    let t_len = data.len();
    let mut log_w = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let mut indices = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(t_len * p);
    let mut ess = Vec::with_capacity(t_len);
    let mut loglik = 0.0;

    for t in 0..t_len {
        let y = data.row(t);
        let step = t as u64 + 1;
        next.par_chunks_mut(p)
            .zip(log_w.par_iter_mut())
            .enumerate()
            .with_min_len(PAR_CHUNK)
            .for_each(|(i, (xn, lw))| {
                let mut rng = stream(seed, &[tag::PARTICLE, step, i as u64]);
                let prev = &x[i * p..(i + 1) * p];
                for r in 0..p {
                    let mut m = 0.0;
                    for c in 0..p {
                        m += a[r * p + c] * prev[c];
                    }
                    xn[r] = m + sd[r] * rng.sample::<f64, _>(StandardNormal);
                }
                *lw = measurement.log_likelihood(y, xn);
            });

        let (ll_t, ess_t) = normalize_log_weights(&log_w, &mut weights, t + 1)?;
        loglik += ll_t;
        ess.push(ess_t);
        for r in 0..p {
            let mut m = 0.0;
            for (i, w) in weights.iter().enumerate() {
                m += w * next[i * p + r];
            }
            means.push(m);
        }

        let mut rrng = stream(seed, &[tag::RESAMPLE, step]);
        resample_into(options.resampling, &weights, &mut rrng, &mut indices);
        for (dst, &src) in x.chunks_mut(p).zip(&indices) {
            dst.copy_from_slice(&next[src * p..(src + 1) * p]);
        }
    }

    Ok(FilterOutput {
        log_likelihood: loglik,
        filtered_means: StatePath::new(p, means)?,
        effective_sample_sizes: ess,
    })
}

/// Exact filter for a linear-Gaussian measurement model with `x_0 ~ N(0, I)`.
pub fn kalman_filter(
    dynamics: &DynamicsSpec,
    measurement: &LinearGaussianMeasurement,
    data: &Observations,
) -> Result<FilterOutput> {
    let p = dynamics.dim();
    let q = measurement.n_items();
    if measurement.n_states() != p {
        return Err(Error::invalid("loading matrix does not match the state dimension"));
    }
    if data.n_items() != q {
        return Err(Error::invalid("data width does not match the number of items"));
    }
    let a = dynamics.a();
    let c = measurement.loadings();
    let sigma = DMatrix::from_diagonal(dynamics.sigma_diag());
    let psi = DMatrix::from_diagonal(&DVector::from_column_slice(measurement.psi_diag()));

    let mut mean = DVector::<f64>::zeros(p);
    let mut cov = DMatrix::<f64>::identity(p, p);
    let mut means = Vec::with_capacity(data.len() * p);
    let mut loglik = 0.0;

    for t in 0..data.len() {
        let pred_mean = a * &mean;
        let pred_cov = a * &cov * a.transpose() + &sigma;
        let y = DVector::from_column_slice(data.row(t));
        let innovation = y - c * &pred_mean;
        let s = c * &pred_cov * c.transpose() + &psi;
        let s = (&s + s.transpose()) * 0.5;
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("innovation covariance not positive definite at t = {}", t + 1)))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let s_inv_v = chol.solve(&innovation);
        loglik += -0.5 * (q as f64 * LN_2PI + log_det + innovation.dot(&s_inv_v));

        let pht = &pred_cov * c.transpose();
        mean = &pred_mean + &pht * &s_inv_v;
        let gain_t = chol.solve(&pht.transpose());
        cov = &pred_cov - &pht * gain_t;
        cov = (&cov + cov.transpose()) * 0.5;
        means.extend(mean.iter());
    }

    Ok(FilterOutput {
        log_likelihood: loglik,
        filtered_means: StatePath::new(p, means)?,
        effective_sample_sizes: vec![f64::INFINITY; data.len()],
    })
}
