//! Parameter layouts and the constraint-preserving transform used by the estimator.
//!
//! Natural parameters are what users see: `A`, the thresholds `beta_ij`, the
//! loadings and the measurement-error variances `psi`. The estimator works on
//! a transformed vector in which every point decodes to valid thresholds and
//! variances:
//!
//! | natural            | transformed                                   |
//! |--------------------|-----------------------------------------------|
//! | `A[i,j]`           | unchanged                                     |
//! | `beta[i,1..J-1]`   | `beta[i,1]`, then `log(beta[i,j+1] - beta[i,j])` |
//! | `loading[i]`       | unchanged                                     |
//! | `psi[i]`           | `log psi[i]`                                  |
//!
//! Stationarity of `A` is not enforced by the transform; infeasible draws are
//! rejected by the sampler instead.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{
    category_prob_from_bounds, normal_log_density, GradedResponseItem, LinearGaussianMeasurement,
    MeasurementModel, Observations, PROB_FLOOR,
};
use crate::model::DynamicsSpec;

/// Starting value for each autoregressive entry.
pub const INITIAL_AR: f64 = 0.1;
/// Starting value for the first threshold of every item.
pub const INITIAL_FIRST_THRESHOLD: f64 = -2.0;
/// Starting distance between consecutive thresholds.
pub const INITIAL_THRESHOLD_GAP: f64 = 0.36;
pub const INITIAL_LOADING: f64 = 1.0;
pub const INITIAL_PSI: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Graded response measurement.
    Grm,
    /// Linear-Gaussian measurement fitted to the raw category codes.
    Linear,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Grm => "grm",
            ModelKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grm" | "graded" => Ok(ModelKind::Grm),
            "linear" => Ok(ModelKind::Linear),
            other => Err(Error::invalid(format!("unknown model kind '{other}'"))),
        }
    }
}

/// A flat vector in transformed coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasurementParameters {
    Graded { thresholds: Vec<Vec<f64>> },
    Linear { loadings: Vec<f64>, psi: Vec<f64> },
}

/// Natural-scale parameters of a fitted or candidate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    /// Transition matrix, one inner vector per row.
    pub a: Vec<Vec<f64>>,
    #[serde(flatten)]
    pub measurement: MeasurementParameters,
}

impl ModelParameters {
    pub fn a_matrix(&self) -> DMatrix<f64> {
        let p = self.a.len();
        DMatrix::from_fn(p, p, |i, j| self.a[i][j])
    }
}

/// Which items exist, which state each one measures and, for graded items,
/// how many categories each has.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelLayout {
    pub kind: ModelKind,
    pub n_states: usize,
    pub item_states: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<usize>,
}

impl ModelLayout {
    pub fn graded(n_states: usize, item_states: Vec<usize>, categories: Vec<usize>) -> Result<Self> {
        let layout = Self { kind: ModelKind::Grm, n_states, item_states, categories };
        layout.check()?;
        Ok(layout)
    }

    pub fn linear(n_states: usize, item_states: Vec<usize>) -> Result<Self> {
        let layout = Self { kind: ModelKind::Linear, n_states, item_states, categories: Vec::new() };
        layout.check()?;
        Ok(layout)
    }

    /// Layout for `data`, with `categories` (graded only) applied to every item.
    pub fn for_data(
        kind: ModelKind,
        n_states: usize,
        item_states: Vec<usize>,
        categories: usize,
        data: &Observations,
    ) -> Result<Self> {
        if item_states.len() != data.n_items() {
            return Err(Error::invalid(format!(
                "{} item-state assignments for {} data columns",
                item_states.len(),
                data.n_items()
            )));
        }
        let layout = match kind {
            ModelKind::Grm => Self::graded(n_states, item_states, vec![categories; data.n_items()])?,
            ModelKind::Linear => Self::linear(n_states, item_states)?,
        };
        layout.validate_data(data)?;
        Ok(layout)
    }

    fn check(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::invalid("need at least one state"));
        }
        if self.item_states.is_empty() {
            return Err(Error::invalid("need at least one item"));
        }
        if let Some(bad) = self.item_states.iter().find(|&&s| s >= self.n_states) {
            return Err(Error::invalid(format!("item assigned to state {bad} but there are {} states", self.n_states)));
        }
        if self.kind == ModelKind::Grm {
            if self.categories.len() != self.item_states.len() {
                return Err(Error::invalid("graded layout needs a category count per item"));
            }
            if let Some(bad) = self.categories.iter().find(|&&j| j < 2) {
                return Err(Error::invalid(format!("items need at least 2 categories, got {bad}")));
            }
        }
        Ok(())
    }

    pub fn validate_data(&self, data: &Observations) -> Result<()> {
        if data.n_items() != self.n_items() {
            return Err(Error::invalid(format!(
                "data has {} items, layout has {}",
                data.n_items(),
                self.n_items()
            )));
        }
        if data.is_empty() {
            return Err(Error::invalid("data has no timepoints"));
        }
        for t in 0..data.len() {
            for (i, &y) in data.row(t).iter().enumerate() {
                if !y.is_finite() {
                    return Err(Error::invalid(format!("row {} item {} is not finite", t + 1, i + 1)));
                }
                if self.kind == ModelKind::Grm {
                    let j = self.categories[i] as f64;
                    if y.fract() != 0.0 || y < 1.0 || y > j {
                        return Err(Error::invalid(format!(
                            "row {} item {}: category {y} outside 1..={j}",
                            t + 1,
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.item_states.len()
    }

    pub fn n_dynamics(&self) -> usize {
        self.n_states * self.n_states
    }

    /// Length of both the natural and the transformed vectors.
    pub fn n_params(&self) -> usize {
        self.n_dynamics()
            + match self.kind {
                ModelKind::Grm => self.categories.iter().map(|j| j - 1).sum(),
                ModelKind::Linear => 2 * self.n_items(),
            }
    }

    fn a_names(&self) -> impl Iterator<Item = String> + '_ {
        (0..self.n_states).flat_map(move |i| (0..self.n_states).map(move |j| format!("A[{},{}]", i + 1, j + 1)))
    }

    /// Names of the natural coordinates, in vector order.
    pub fn natural_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.a_names().collect();
        match self.kind {
            ModelKind::Grm => {
                for (i, &j) in self.categories.iter().enumerate() {
                    names.extend((1..j).map(|k| format!("beta[{},{}]", i + 1, k)));
                }
            }
            ModelKind::Linear => {
                names.extend((1..=self.n_items()).map(|i| format!("loading[{i}]")));
                names.extend((1..=self.n_items()).map(|i| format!("psi[{i}]")));
            }
        }
        names
    }

    /// Names of the transformed coordinates, in vector order.
    pub fn transformed_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.a_names().collect();
        match self.kind {
            ModelKind::Grm => {
                for (i, &j) in self.categories.iter().enumerate() {
                    names.push(format!("beta[{},1]", i + 1));
                    names.extend((1..j - 1).map(|k| format!("log_gap[{},{}]", i + 1, k)));
                }
            }
            ModelKind::Linear => {
                names.extend((1..=self.n_items()).map(|i| format!("loading[{i}]")));
                names.extend((1..=self.n_items()).map(|i| format!("log_psi[{i}]")));
            }
        }
        names
    }

    /// Starting values: `A = 0.1 I`, first threshold -2 with gaps of 0.36,
    /// unit loadings and unit error variances.
    pub fn initial_parameters(&self) -> ModelParameters {
        let p = self.n_states;
        let a = (0..p)
            .map(|i| (0..p).map(|j| if i == j { INITIAL_AR } else { 0.0 }).collect())
            .collect();
        let measurement = match self.kind {
            ModelKind::Grm => MeasurementParameters::Graded {
                thresholds: self
                    .categories
                    .iter()
                    .map(|&j| {
                        (0..j - 1)
                            .map(|k| INITIAL_FIRST_THRESHOLD + k as f64 * INITIAL_THRESHOLD_GAP)
                            .collect()
                    })
                    .collect(),
            },
            ModelKind::Linear => MeasurementParameters::Linear {
                loadings: vec![INITIAL_LOADING; self.n_items()],
                psi: vec![INITIAL_PSI; self.n_items()],
            },
        };
        ModelParameters { a, measurement }
    }

    fn check_shape(&self, params: &ModelParameters) -> Result<()> {
        let p = self.n_states;
        if params.a.len() != p || params.a.iter().any(|r| r.len() != p) {
            return Err(Error::invalid(format!("A must be {p}x{p}")));
        }
        match (&params.measurement, self.kind) {
            (MeasurementParameters::Graded { thresholds }, ModelKind::Grm) => {
                if thresholds.len() != self.n_items()
                    || thresholds.iter().zip(&self.categories).any(|(b, &j)| b.len() != j - 1)
                {
                    return Err(Error::invalid("threshold sets do not match the layout"));
                }
            }
            (MeasurementParameters::Linear { loadings, psi }, ModelKind::Linear) => {
                if loadings.len() != self.n_items() || psi.len() != self.n_items() {
                    return Err(Error::invalid("loadings/psi do not match the layout"));
                }
            }
            _ => return Err(Error::invalid("parameters are for a different model kind")),
        }
        Ok(())
    }

    /// Natural parameters as a flat vector (order of [`natural_names`](Self::natural_names)).
    pub fn to_natural(&self, params: &ModelParameters) -> Result<Vec<f64>> {
        self.check_shape(params)?;
        let mut v: Vec<f64> = params.a.iter().flatten().copied().collect();
        match &params.measurement {
            MeasurementParameters::Graded { thresholds } => v.extend(thresholds.iter().flatten()),
            MeasurementParameters::Linear { loadings, psi } => {
                v.extend(loadings);
                v.extend(psi);
            }
        }
        Ok(v)
    }

    pub fn from_natural(&self, v: &[f64]) -> Result<ModelParameters> {
        if v.len() != self.n_params() {
            return Err(Error::invalid(format!("expected {} values, got {}", self.n_params(), v.len())));
        }
        let p = self.n_states;
        let a = v[..p * p].chunks(p).map(<[f64]>::to_vec).collect();
        let rest = &v[p * p..];
        let measurement = match self.kind {
            ModelKind::Grm => {
                let mut off = 0;
                let thresholds = self
                    .categories
                    .iter()
                    .map(|&j| {
                        let b = rest[off..off + j - 1].to_vec();
                        off += j - 1;
                        b
                    })
                    .collect();
                MeasurementParameters::Graded { thresholds }
            }
            ModelKind::Linear => {
                let q = self.n_items();
                MeasurementParameters::Linear { loadings: rest[..q].to_vec(), psi: rest[q..].to_vec() }
            }
        };
        Ok(ModelParameters { a, measurement })
    }

    pub fn encode(&self, params: &ModelParameters) -> Result<ParameterVector> {
        self.check_shape(params)?;
        let mut v: Vec<f64> = params.a.iter().flatten().copied().collect();
        match &params.measurement {
            MeasurementParameters::Graded { thresholds } => {
                for b in thresholds {
                    if b.windows(2).any(|w| w[1] <= w[0]) {
                        return Err(Error::invalid(format!("thresholds must be strictly increasing: {b:?}")));
                    }
                    v.push(b[0]);
                    v.extend(b.windows(2).map(|w| (w[1] - w[0]).ln()));
                }
            }
            MeasurementParameters::Linear { loadings, psi } => {
                if psi.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::invalid("psi must be positive"));
                }
                v.extend(loadings);
                v.extend(psi.iter().map(|s| s.ln()));
            }
        }
        Ok(ParameterVector(v))
    }

    pub fn decode(&self, theta: &ParameterVector) -> Result<ModelParameters> {
        if theta.0.len() != self.n_params() {
            return Err(Error::invalid(format!("expected {} values, got {}", self.n_params(), theta.0.len())));
        }
        let mut natural = theta.0.clone();
        self.decode_measurement_in_place(&mut natural[self.n_dynamics()..]);
        self.from_natural(&natural)
    }

    /// Turns the measurement part of a transformed vector into natural values.
    pub(crate) fn decode_measurement_in_place(&self, meas: &mut [f64]) {
        match self.kind {
            ModelKind::Grm => {
                let mut off = 0;
                for &j in &self.categories {
                    for k in 1..j - 1 {
                        meas[off + k] = meas[off + k - 1] + meas[off + k].exp();
                    }
                    off += j - 1;
                }
            }
            ModelKind::Linear => {
                let q = self.n_items();
                for v in &mut meas[q..] {
                    *v = v.exp();
                }
            }
        }
    }

    /// Builds the dynamics (with identified innovations) and measurement model.
    pub fn build(&self, params: &ModelParameters) -> Result<(DynamicsSpec, MeasurementModel)> {
        self.check_shape(params)?;
        let dynamics = DynamicsSpec::identified(params.a_matrix())?;
        let measurement = match &params.measurement {
            MeasurementParameters::Graded { thresholds } => MeasurementModel::GradedResponse(
                thresholds
                    .iter()
                    .zip(&self.item_states)
                    .map(|(b, &s)| GradedResponseItem::new(1.0, b.clone(), s))
                    .collect::<Result<_>>()?,
            ),
            MeasurementParameters::Linear { loadings, psi } => {
                let mut c = DMatrix::zeros(self.n_items(), self.n_states);
                for (i, (&l, &s)) in loadings.iter().zip(&self.item_states).enumerate() {
                    c[(i, s)] = l;
                }
                MeasurementModel::LinearGaussian(LinearGaussianMeasurement::new(c, psi.clone())?)
            }
        };
        Ok((dynamics, measurement))
    }

    /// `log p(y | x)` with the measurement parameters given in transformed
    /// coordinates; avoids decoding every threshold.
    #[inline]
    pub(crate) fn log_likelihood_transformed(&self, meas: &[f64], y: &[f64], x: &[f64]) -> f64 {
        match self.kind {
            ModelKind::Grm => {
                let mut total = 0.0;
                let mut off = 0;
                for ((&j_count, &state), &yi) in self.categories.iter().zip(&self.item_states).zip(y) {
                    let cat = yi as usize;
                    let n_thr = j_count - 1;
                    let block = &meas[off..off + n_thr];
                    // beta_1 = block[0], beta_k = beta_{k-1} + exp(block[k-1])
                    let mut lower = None;
                    let mut upper = None;
                    let mut beta = block[0];
                    for k in 1..=cat.min(n_thr) {
                        if k > 1 {
                            beta += block[k - 1].exp();
                        }
                        if k + 1 == cat {
                            lower = Some(beta);
                        } else if k == cat {
                            upper = Some(beta);
                        }
                    }
                    let prob = category_prob_from_bounds(1.0, x[state], lower, upper);
                    total += prob.max(PROB_FLOOR).ln();
                    off += n_thr;
                }
                total
            }
            ModelKind::Linear => {
                let q = self.n_items();
                let mut total = 0.0;
                for i in 0..q {
                    let mean = meas[i] * x[self.item_states[i]];
                    total += normal_log_density(y[i], mean, meas[q + i].exp());
                }
                total
            }
        }
    }
}
