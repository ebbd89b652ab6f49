//! Data generation for two-state graded response models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{GradedResponseItem, MeasurementModel, Observations};
use crate::model::{DynamicsSpec, StatePath};
use crate::rng::{stream, tag};

/// Largest spacing between neighbouring items' threshold sets.
pub const MAX_THRESHOLD_OFFSET: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Equal,
    Offset,
}

impl ThresholdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdMode::Equal => "equal",
            ThresholdMode::Offset => "offset",
        }
    }
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "equal" => Ok(ThresholdMode::Equal),
            "offset" => Ok(ThresholdMode::Offset),
            other => Err(Error::invalid(format!("unknown threshold mode '{other}'"))),
        }
    }
}

/// The two-state data-generating design: `A = [[ar, cr], [0, ar]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRecipe {
    pub timepoints: usize,
    pub ar: f64,
    pub cr: f64,
    pub items_per_state: usize,
    pub categories: usize,
    pub thresholds: ThresholdMode,
    pub seed: u64,
}

impl SimulationRecipe {
    pub const N_STATES: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.timepoints == 0 {
            return Err(Error::invalid("timepoints must be at least 1"));
        }
        if self.categories < 2 {
            return Err(Error::invalid(format!("categories must be at least 2, got {}", self.categories)));
        }
        if self.items_per_state == 0 {
            return Err(Error::invalid("items per state must be at least 1"));
        }
        if !self.ar.is_finite() || !self.cr.is_finite() {
            return Err(Error::invalid("ar and cr must be finite"));
        }
        Ok(())
    }

    pub fn transition_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.ar, self.cr, 0.0, self.ar])
    }

    /// State that each item column measures: the first block of items loads on
    /// state 1, the second on state 2.
    pub fn item_states(&self) -> Vec<usize> {
        (0..Self::N_STATES)
            .flat_map(|s| std::iter::repeat_n(s, self.items_per_state))
            .collect()
    }
}

/// `[1, ..., J-1]` centred on zero.
pub fn make_equal_thresholds(n_categories: usize) -> Result<Vec<f64>> {
    if n_categories < 2 {
        return Err(Error::invalid(format!("need at least 2 categories, got {n_categories}")));
    }
    let centre = n_categories as f64 / 2.0;
    Ok((1..n_categories).map(|j| j as f64 - centre).collect())
}

/// Equal-threshold sets shifted apart by `min(n / (J - 1), 1.25)`, placed
/// symmetrically around zero.
pub fn make_offset_thresholds(n_items: usize, n_categories: usize) -> Result<Vec<Vec<f64>>> {
    if n_items == 0 {
        return Err(Error::invalid("need at least one item"));
    }
    let base = make_equal_thresholds(n_categories)?;
    let step = (n_items as f64 / (n_categories - 1) as f64).min(MAX_THRESHOLD_OFFSET);
    let mid = (n_items as f64 + 1.0) / 2.0;
    Ok((1..=n_items)
        .map(|k| {
            let shift = (k as f64 - mid) * step;
            base.iter().map(|b| b + shift).collect()
        })
        .collect())
}

/// True dynamics and measurement model for a recipe.
pub fn build_study_model(recipe: &SimulationRecipe) -> Result<(DynamicsSpec, MeasurementModel)> {
    recipe.validate()?;
    let dynamics = DynamicsSpec::identified(recipe.transition_matrix())?;
    let per_state = match recipe.thresholds {
        ThresholdMode::Equal => vec![make_equal_thresholds(recipe.categories)?; recipe.items_per_state],
        ThresholdMode::Offset => make_offset_thresholds(recipe.items_per_state, recipe.categories)?,
    };
    let mut items = Vec::with_capacity(SimulationRecipe::N_STATES * recipe.items_per_state);
    for state in 0..SimulationRecipe::N_STATES {
        for betas in &per_state {
            items.push(GradedResponseItem::new(1.0, betas.clone(), state)?);
        }
    }
    Ok((dynamics, MeasurementModel::GradedResponse(items)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub states: StatePath,
    pub observations: Observations,
}

/// Simulates a trajectory from any identified model.
///
/// `x_0` is drawn from the stationary law `N(0, Gamma)` and the returned
/// path holds `x_1 .. x_T`, each paired with one observation row. State noise
/// and every item draw from their own substream of `seed`.
pub fn simulate_model(
    dynamics: &DynamicsSpec,
    measurement: &MeasurementModel,
    timepoints: usize,
    seed: u64,
) -> Result<SimulatedDataset> {
    let p = dynamics.dim();
    let q = measurement.n_items();
    let chol = dynamics
        .gamma()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("stationary covariance is not positive definite".into()))?;
    let a = dynamics.a();
    let sd = dynamics.innovation_sd();

    let mut state_rng = stream(seed, &[tag::STATE]);
    let mut item_rngs: Vec<_> = (0..q).map(|i| stream(seed, &[tag::ITEM, i as u64])).collect();

    let z = DVector::from_iterator(p, (0..p).map(|_| state_rng.sample::<f64, _>(StandardNormal)));
    let mut x = chol.l() * z;

    let mut states = Vec::with_capacity(timepoints * p);
    let mut obs = Vec::with_capacity(timepoints * q);
    for _ in 0..timepoints {
        let mut next = a * &x;
        for (i, s) in sd.iter().enumerate() {
            next[i] += s * state_rng.sample::<f64, _>(StandardNormal);
        }
        x = next;
        states.extend(x.iter());
        for (i, rng) in item_rngs.iter_mut().enumerate() {
            obs.push(measurement.sample_item(i, x.as_slice(), rng));
        }
    }
    Ok(SimulatedDataset {
        states: StatePath::new(p, states)?,
        observations: Observations::new(q, obs)?,
    })
}

pub fn simulate_dataset(recipe: &SimulationRecipe) -> Result<SimulatedDataset> {
    let (dynamics, measurement) = build_study_model(recipe)?;
    simulate_model(&dynamics, &measurement, recipe.timepoints, recipe.seed)
}
