//! Iterated filtering (MIF2) for graded-response and linear state-space models.
//!
//! Each iteration runs a particle filter in which every particle carries its
//! own parameter vector. Parameters take a Gaussian random-walk step before
//! every timepoint, states propagate under each particle's own dynamics, and
//! `(theta, x)` pairs are resampled together. The random-walk variance shrinks
//! geometrically across iterations, so the swarm contracts around the MLE.

mod params;

pub use params::{
    MeasurementParameters, ModelKind, ModelLayout, ModelParameters, ParameterVector, INITIAL_AR,
    INITIAL_FIRST_THRESHOLD, INITIAL_LOADING, INITIAL_PSI, INITIAL_THRESHOLD_GAP,
};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{normalize_log_weights, particle_filter, resample_into, FilterOptions, ResamplingScheme, PAR_CHUNK};
use crate::measurement::Observations;
use crate::model::{
    feasible_innovations, from_row_major, stationary_covariance, StatePath, ESTIMATION_STATIONARITY_MARGIN,
};
use crate::rng::{mix, stream, tag};

/// Iterations over which the perturbation variance shrinks by `cooling_fraction_50`.
pub const COOLING_HORIZON: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mif2Config {
    pub particles: usize,
    pub iterations: usize,
    /// Perturbation variance multiplier per 50 iterations.
    pub cooling_fraction_50: f64,
    /// Starting random-walk SD of every transformed parameter.
    pub perturb_sd: f64,
    pub runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub resampling: ResamplingScheme,
    /// Attempts at an admissible `A` per perturbation before giving up.
    #[serde(default = "default_max_redraws")]
    pub max_redraws: usize,
}

fn default_max_redraws() -> usize {
    100
}

impl Default for Mif2Config {
    fn default() -> Self {
        Self {
            particles: 1000,
            iterations: 250,
            cooling_fraction_50: 0.05,
            perturb_sd: 0.3,
            runs: 4,
            seed: 0,
            resampling: ResamplingScheme::Multinomial,
            max_redraws: default_max_redraws(),
        }
    }
}

impl Mif2Config {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::invalid("MIF2 needs at least 2 particles"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("MIF2 needs at least 1 iteration"));
        }
        if !(self.cooling_fraction_50 > 0.0 && self.cooling_fraction_50 < 1.0) {
            return Err(Error::invalid(format!(
                "cooling fraction must lie in (0, 1), got {}",
                self.cooling_fraction_50
            )));
        }
        if !(self.perturb_sd >= 0.0) || !self.perturb_sd.is_finite() {
            return Err(Error::invalid("perturbation SD must be finite and non-negative"));
        }
        if self.runs == 0 {
            return Err(Error::invalid("need at least one run"));
        }
        if self.max_redraws == 0 {
            return Err(Error::invalid("max_redraws must be at least 1"));
        }
        Ok(())
    }

    /// Random-walk SD used throughout iteration `m` (0-based).
    pub fn perturbation_sd(&self, m: usize) -> f64 {
        self.perturb_sd * cooling_factor(m, self.cooling_fraction_50).sqrt()
    }
}

/// Variance multiplier at iteration `m`: `fraction^(m / 50)`.
pub fn cooling_factor(m: usize, cooling_fraction_50: f64) -> f64 {
    let whole = m / 50;
    let rest = m % 50;
    // integer powers first keeps multiples of 50 as close to fraction^k as possible
    let mut f = cooling_fraction_50.powi(whole as i32);
    if rest > 0 {
        f *= cooling_fraction_50.powf(rest as f64 / COOLING_HORIZON);
    }
    f
}

/// Output of one MIF2 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    /// Mean of the final parameter swarm, in natural coordinates.
    pub estimate: ModelParameters,
    /// Particle-filter log-likelihood of every iteration.
    pub loglik_trace: Vec<f64>,
    /// `max_i |Gamma_ii - 1|` of the first particle after every iteration.
    pub identification_residual: Vec<f64>,
    /// Per iteration, how many perturbations found no admissible `A` and kept the old one.
    pub stalled_perturbations: Vec<usize>,
}

/// One run with its index, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub output: Option<RunOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub layout: ModelLayout,
    pub config: Mif2Config,
    /// Elementwise mean of the successful runs' estimates.
    pub estimate: ModelParameters,
    /// Innovation variances identified from the averaged `A`.
    pub sigma_diag: Vec<f64>,
    /// Stationary covariance of the averaged dynamics.
    pub gamma: Vec<Vec<f64>>,
    pub runs: Vec<RunRecord>,
    pub failed_runs: usize,
    /// Particle-filter log-likelihood at the averaged estimate.
    pub final_log_likelihood: f64,
    #[serde(skip)]
    pub filtered_means: Option<StatePath>,
}

impl FitResult {
    pub fn kind(&self) -> ModelKind {
        self.layout.kind
    }

    pub fn is_converged(&self) -> bool {
        self.failed_runs == 0 && self.final_log_likelihood.is_finite()
    }

    /// Estimated `A[i][j]`.
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.estimate.a[i][j]
    }

    pub fn successful_runs(&self) -> impl Iterator<Item = &RunOutput> {
        self.runs.iter().filter_map(|r| r.output.as_ref())
    }
}

/// Per-particle storage for one run. Parameters are kept in transformed
/// coordinates; `sigma` holds the innovation variances matching each particle's `A`.
struct Swarm {
    n: usize,
    theta: Vec<f64>,
    x: Vec<f64>,
    sigma: Vec<f64>,
}

impl Swarm {
    fn new(k: usize, init: &[f64], p: usize, sigma0: &[f64]) -> Self {
        let n = init.len();
        Self {
            n,
            theta: init.repeat(k),
            x: vec![0.0; k * p],
            sigma: sigma0.repeat(k),
        }
    }
}

/// Adds an `N(0, sd^2 I)` step to a transformed parameter vector, redrawing the
/// `A` block until it is admissible. When `max_redraws` proposals all fail, `A`
/// keeps its current value and false is returned.
fn perturb<R: Rng>(
    theta: &mut [f64],
    sigma: &mut [f64],
    p: usize,
    sd: f64,
    max_redraws: usize,
    rng: &mut R,
) -> bool {
    let n_a = p * p;
    if sd > 0.0 {
        // proposal for A followed by its innovation variances
        let mut stack = [0.0; 20];
        let mut heap;
        let buf: &mut [f64] = if n_a + p <= stack.len() {
            &mut stack[..n_a + p]
        } else {
            heap = vec![0.0; n_a + p];
            &mut heap
        };
        let (prop, prop_sigma) = buf.split_at_mut(n_a);
        let mut accepted = false;
        for _ in 0..max_redraws {
            for (dst, &src) in prop.iter_mut().zip(&theta[..n_a]) {
                *dst = src + sd * rng.sample::<f64, _>(StandardNormal);
            }
            if feasible_innovations(prop, p, ESTIMATION_STATIONARITY_MARGIN, prop_sigma) {
                theta[..n_a].copy_from_slice(prop);
                sigma.copy_from_slice(prop_sigma);
                accepted = true;
                break;
            }
        }
        for v in &mut theta[n_a..] {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
        return accepted;
    }
    true
}

fn identification_residual(a: &[f64], sigma: &[f64], p: usize) -> f64 {
    let a = from_row_major(p, a);
    let s = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(sigma));
    match stationary_covariance(&a, &s) {
        Ok(g) => (0..p).map(|i| (g[(i, i)] - 1.0).abs()).fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    }
}

/// One MIF2 run from `init`. Draws for iteration `m`, timepoint `t` and
/// particle `k` come from substream `(seed, RUN, run, m, t, k)`.
pub fn mif2_run(
    layout: &ModelLayout,
    data: &Observations,
    init: &ModelParameters,
    config: &Mif2Config,
    run: usize,
) -> Result<RunOutput> {
    config.validate()?;
    layout.validate_data(data)?;
    let init_theta = layout.encode(init)?;
    let p = layout.n_states;
    let n_a = layout.n_dynamics();
    let mut sigma0 = vec![0.0; p];
    if !feasible_innovations(&init_theta.0[..n_a], p, ESTIMATION_STATIONARITY_MARGIN, &mut sigma0) {
        return Err(Error::Precondition("initial A is not an admissible stationary transition matrix".into()));
    }

    let k = config.particles;
    let seed = config.seed;
    let mut swarm = Swarm::new(k, &init_theta.0, p, &sigma0);
    let n = swarm.n;
    let mut next_theta = vec![0.0; k * n];
    let mut next_x = vec![0.0; k * p];
    let mut next_sigma = vec![0.0; k * p];
    let mut log_w = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let mut indices = Vec::with_capacity(k);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut residuals = Vec::with_capacity(config.iterations);
    let mut stalls = Vec::with_capacity(config.iterations);
    let run_key = run as u64;

    for m in 0..config.iterations {
        let sd = config.perturbation_sd(m);
        let m_key = m as u64;

        // t = 0: perturb parameters and draw x_0 ~ N(0, I)
        let mut stalled = swarm
            .theta
            .par_chunks_mut(n)
            .zip(swarm.sigma.par_chunks_mut(p))
            .zip(swarm.x.par_chunks_mut(p))
            .enumerate()
            .with_min_len(PAR_CHUNK)
            .map(|(i, ((th, sg), xi))| {
                let mut rng = stream(seed, &[tag::RUN, run_key, m_key, 0, i as u64]);
                let ok = perturb(th, sg, p, sd, config.max_redraws, &mut rng);
                for v in xi.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                usize::from(!ok)
            })
            .collect::<Vec<usize>>()
            .iter()
            .sum::<usize>();

        let mut loglik = 0.0;
        for t in 0..data.len() {
            let y = data.row(t);
            let step = t as u64 + 1;
            let flags = swarm
                .theta
                .par_chunks_mut(n)
                .zip(swarm.sigma.par_chunks_mut(p))
                .zip(swarm.x.par_chunks_mut(p))
                .zip(log_w.par_iter_mut())
                .enumerate()
                .with_min_len(PAR_CHUNK)
                .map(|(i, (((th, sg), xi), lw))| {
                    let mut rng = stream(seed, &[tag::RUN, run_key, m_key, step, i as u64]);
                    let ok = perturb(th, sg, p, sd, config.max_redraws, &mut rng);
                    let mut prev = [0.0; 8];
                    let prev: &[f64] = if p <= prev.len() {
                        prev[..p].copy_from_slice(xi);
                        &prev[..p]
                    } else {
                        &xi.to_vec()
                    };
                    for r in 0..p {
                        let mut mean = 0.0;
                        for c in 0..p {
                            mean += th[r * p + c] * prev[c];
                        }
                        xi[r] = mean + sg[r].sqrt() * rng.sample::<f64, _>(StandardNormal);
                    }
                    *lw = layout.log_likelihood_transformed(&th[n_a..], y, xi);
                    usize::from(!ok)
                })
                .collect::<Vec<usize>>();
            stalled += flags.iter().sum::<usize>();

            let (ll_t, _) = normalize_log_weights(&log_w, &mut weights, t + 1).map_err(|e| {
                Error::EstimationFailure(format!("run {run}, iteration {}: {e}", m + 1))
            })?;
            loglik += ll_t;

            let mut rrng = stream(seed, &[tag::RUN, run_key, m_key, step, tag::RESAMPLE]);
            resample_into(config.resampling, &weights, &mut rrng, &mut indices);
            for (dst, &src) in indices.iter().enumerate() {
                next_theta[dst * n..(dst + 1) * n].copy_from_slice(&swarm.theta[src * n..(src + 1) * n]);
                next_x[dst * p..(dst + 1) * p].copy_from_slice(&swarm.x[src * p..(src + 1) * p]);
                next_sigma[dst * p..(dst + 1) * p].copy_from_slice(&swarm.sigma[src * p..(src + 1) * p]);
            }
            std::mem::swap(&mut swarm.theta, &mut next_theta);
            std::mem::swap(&mut swarm.x, &mut next_x);
            std::mem::swap(&mut swarm.sigma, &mut next_sigma);
        }
        trace.push(loglik);
        stalls.push(stalled);
        residuals.push(identification_residual(&swarm.theta[..n_a], &swarm.sigma[..p], p));
    }

    // mean of the final, equally weighted swarm in natural coordinates
    let mut mean = vec![0.0; n];
    let mut natural = vec![0.0; n];
    for th in swarm.theta.chunks(n) {
        natural.copy_from_slice(th);
        layout.decode_measurement_in_place(&mut natural[n_a..]);
        for (acc, v) in mean.iter_mut().zip(&natural) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= k as f64;
    }
    Ok(RunOutput {
        estimate: layout.from_natural(&mean)?,
        loglik_trace: trace,
        identification_residual: residuals,
        stalled_perturbations: stalls,
    })
}

/// Averages natural-coordinate estimates elementwise.
pub fn average_estimates(layout: &ModelLayout, estimates: &[&ModelParameters]) -> Result<ModelParameters> {
    if estimates.is_empty() {
        return Err(Error::EstimationFailure("no successful runs to average".into()));
    }
    let mut mean = vec![0.0; layout.n_params()];
    for e in estimates {
        for (acc, v) in mean.iter_mut().zip(layout.to_natural(e)?) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= estimates.len() as f64;
    }
    layout.from_natural(&mean)
}

/// Particle-filter log-likelihood and filtered means at fixed parameters.
pub fn evaluate(
    layout: &ModelLayout,
    params: &ModelParameters,
    data: &Observations,
    options: &FilterOptions,
) -> Result<crate::filtering::FilterOutput> {
    let (dynamics, measurement) = layout.build(params)?;
    particle_filter(&dynamics, &measurement, data, options)
}

/// Runs `config.runs` independent MIF2 runs from the standard starting values,
/// averages the successful runs and filters once more at the average.
pub fn fit(layout: &ModelLayout, data: &Observations, config: &Mif2Config) -> Result<FitResult> {
    fit_from(layout, data, &layout.initial_parameters(), config)
}

pub fn fit_from(
    layout: &ModelLayout,
    data: &Observations,
    init: &ModelParameters,
    config: &Mif2Config,
) -> Result<FitResult> {
    config.validate()?;
    layout.validate_data(data)?;
    let outcomes: Vec<Result<RunOutput>> = (0..config.runs)
        .into_par_iter()
        .map(|r| mif2_run(layout, data, init, config, r))
        .collect();

    let mut runs = Vec::with_capacity(config.runs);
    for (run, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(out) => runs.push(RunRecord { run, output: Some(out), error: None }),
            Err(e @ (Error::InvalidInput(_) | Error::Precondition(_))) => return Err(e),
            Err(e) => runs.push(RunRecord { run, output: None, error: Some(e.to_string()) }),
        }
    }
    let failed_runs = runs.iter().filter(|r| r.output.is_none()).count();
    let successes: Vec<&ModelParameters> = runs.iter().filter_map(|r| r.output.as_ref().map(|o| &o.estimate)).collect();
    if successes.is_empty() {
        let reasons: Vec<String> = runs.iter().filter_map(|r| r.error.clone()).collect();
        return Err(Error::EstimationFailure(format!("every run failed: {}", reasons.join("; "))));
    }
    let estimate = average_estimates(layout, &successes)?;
    let (dynamics, _) = layout.build(&estimate).map_err(|e| {
        Error::EstimationFailure(format!("averaged estimate is not a valid model: {e}"))
    })?;

    let options = FilterOptions {
        particles: config.particles,
        seed: mix(config.seed, &[tag::FINAL]),
        resampling: config.resampling,
    };
    let filtered = evaluate(layout, &estimate, data, &options)?;
    let p = layout.n_states;
    Ok(FitResult {
        layout: layout.clone(),
        config: config.clone(),
        sigma_diag: dynamics.sigma_diag().iter().copied().collect(),
        gamma: (0..p).map(|i| (0..p).map(|j| dynamics.gamma()[(i, j)]).collect()).collect(),
        estimate,
        runs,
        failed_runs,
        final_log_likelihood: filtered.log_likelihood,
        filtered_means: Some(filtered.filtered_means),
    })
}
