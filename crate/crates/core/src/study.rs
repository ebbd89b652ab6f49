//! Monte-Carlo study driver: simulate, fit both measurement models, compute
//! slice SEs and score against the generating values.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{slice_se, wald_ci, SliceConfig, SliceSEResult, SliceTarget};
use crate::mif2::{fit, FitResult, Mif2Config, ModelKind, ModelLayout};
use crate::model::StatePath;
use crate::rng::{mix, tag};
use crate::simulate::{simulate_dataset, SimulationRecipe, ThresholdMode};

pub const GRID_TIMEPOINTS: [usize; 2] = [100, 500];
pub const GRID_ITEMS: [usize; 2] = [3, 6];
pub const GRID_CATEGORIES: [usize; 2] = [3, 7];
pub const GRID_AR: [f64; 2] = [0.3, 0.7];
pub const GRID_CR: [f64; 2] = [0.0, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyCondition {
    pub timepoints: usize,
    pub items_per_state: usize,
    pub categories: usize,
    pub ar: f64,
    pub cr: f64,
    pub thresholds: ThresholdMode,
}

impl StudyCondition {
    pub fn on_grid(&self) -> bool {
        GRID_TIMEPOINTS.contains(&self.timepoints)
            && GRID_ITEMS.contains(&self.items_per_state)
            && GRID_CATEGORIES.contains(&self.categories)
            && GRID_AR.contains(&self.ar)
            && GRID_CR.contains(&self.cr)
    }

    /// Stable key used to derive replicate seeds.
    pub fn key(&self) -> u64 {
        mix(
            self.timepoints as u64,
            &[
                self.items_per_state as u64,
                self.categories as u64,
                self.ar.to_bits(),
                self.cr.to_bits(),
                matches!(self.thresholds, ThresholdMode::Offset) as u64,
            ],
        )
    }

    pub fn recipe(&self, seed: u64) -> SimulationRecipe {
        SimulationRecipe {
            timepoints: self.timepoints,
            ar: self.ar,
            cr: self.cr,
            items_per_state: self.items_per_state,
            categories: self.categories,
            thresholds: self.thresholds,
            seed,
        }
    }

    /// Every combination of the design factors.
    pub fn full_grid() -> Vec<StudyCondition> {
        let mut out = Vec::with_capacity(64);
        for &timepoints in &GRID_TIMEPOINTS {
            for &ar in &GRID_AR {
                for &cr in &GRID_CR {
                    for thresholds in [ThresholdMode::Equal, ThresholdMode::Offset] {
                        for &items_per_state in &GRID_ITEMS {
                            for &categories in &GRID_CATEGORIES {
                                out.push(StudyCondition { timepoints, items_per_state, categories, ar, cr, thresholds });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// The four cells used for desk-scale checks.
    pub fn desk_subset() -> Vec<StudyCondition> {
        let c = |timepoints, ar, cr, thresholds, items_per_state, categories| StudyCondition {
            timepoints,
            items_per_state,
            categories,
            ar,
            cr,
            thresholds,
        };
        vec![
            c(500, 0.7, 0.25, ThresholdMode::Equal, 6, 7),
            c(500, 0.3, 0.0, ThresholdMode::Equal, 3, 3),
            c(500, 0.7, 0.25, ThresholdMode::Equal, 3, 3),
            c(100, 0.3, 0.0, ThresholdMode::Offset, 3, 3),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub conditions: Vec<StudyCondition>,
    pub replications: usize,
    pub base_seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default = "desk_mif2")]
    pub mif2: Mif2Config,
    /// Slice SE settings; SEs and coverage are skipped when absent.
    #[serde(default = "desk_slice")]
    pub slice: Option<SliceConfig>,
    /// Allow factor values outside the design grid.
    #[serde(default)]
    pub free_grid: bool,
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Grm, ModelKind::Linear]
}

/// Scaled-down estimator settings: 500 particles, 100 iterations, 4 runs.
pub fn desk_mif2() -> Mif2Config {
    Mif2Config { particles: 500, iterations: 100, ..Mif2Config::default() }
}

/// Dynamics-only slices with 500 particles.
pub fn desk_slice() -> Option<SliceConfig> {
    Some(SliceConfig { particles: 500, target: SliceTarget::Dynamics, ..SliceConfig::default() })
}

impl StudyConfig {
    pub fn desk(base_seed: u64) -> Self {
        Self {
            conditions: StudyCondition::desk_subset(),
            replications: 30,
            base_seed,
            models: default_models(),
            mif2: desk_mif2(),
            slice: desk_slice(),
            free_grid: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::invalid("study has no conditions"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("study has no models to fit"));
        }
        for c in &self.conditions {
            if !self.free_grid && !c.on_grid() {
                return Err(Error::invalid(format!("condition {c:?} is off the design grid (set free_grid to allow)")));
            }
            c.recipe(0).validate()?;
        }
        self.mif2.validate()?;
        if let Some(s) = &self.slice {
            s.validate()?;
        }
        Ok(())
    }
}

/// Ranks with ties given their average rank (1-based).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("vectors differ in length"));
    }
    if x.len() < 3 {
        return Err(Error::invalid("need at least 3 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("values must be finite"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Scores of one fitted model on one replicate. `NaN` marks a value that
/// could not be computed; coverage is `None` without an SE.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub rho_s: f64,
    pub rho_s_state1: f64,
    pub rho_s_state2: f64,
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub ar_relbias_1: f64,
    pub ar_relbias_2: f64,
    pub cr_bias: f64,
    pub se_a11: f64,
    pub se_a12: f64,
    pub se_a21: f64,
    pub se_a22: f64,
    pub ar1_cover95: Option<bool>,
    pub ar2_cover95: Option<bool>,
    pub cr_cover95: Option<bool>,
    pub ar1_cover998: Option<bool>,
    pub ar2_cover998: Option<bool>,
    pub cr_cover998: Option<bool>,
    pub final_loglik: f64,
}

fn covers(estimate: f64, se: f64, truth: f64, level: f64) -> Option<bool> {
    let (lo, hi) = wald_ci(estimate, se, level).ok()?;
    Some(lo <= truth && truth <= hi)
}

/// Compares a fit with the generating values. The AR relative bias is
/// reported per diagonal entry; `cr_bias` refers to `A[1,2]`.
pub fn score_replicate(
    truth: &SimulationRecipe,
    states: &StatePath,
    fit: &FitResult,
    se: Option<&SliceSEResult>,
) -> Result<ReplicateScore> {
    let means = fit
        .filtered_means
        .as_ref()
        .ok_or_else(|| Error::invalid("fit carries no filtered means"))?;
    if means.len() != states.len() || means.n_states() != states.n_states() || states.n_states() != 2 {
        return Err(Error::invalid("filtered means do not line up with the true states"));
    }
    let rho: Vec<f64> = (0..2)
        .map(|i| spearman(&states.column(i), &means.column(i)).unwrap_or(f64::NAN))
        .collect();
    let se_of = |name: &str| se.and_then(|s| s.se(name)).unwrap_or(f64::NAN);
    let (a11, a12, a21, a22) = (fit.a(0, 0), fit.a(0, 1), fit.a(1, 0), fit.a(1, 1));
    let (s11, s12, s21, s22) = (se_of("A[1,1]"), se_of("A[1,2]"), se_of("A[2,1]"), se_of("A[2,2]"));
    let relbias = |est: f64| if truth.ar != 0.0 { (est - truth.ar) / truth.ar } else { f64::NAN };
    Ok(ReplicateScore {
        rho_s: 0.5 * (rho[0] + rho[1]),
        rho_s_state1: rho[0],
        rho_s_state2: rho[1],
        a11,
        a12,
        a21,
        a22,
        ar_relbias_1: relbias(a11),
        ar_relbias_2: relbias(a22),
        cr_bias: a12 - truth.cr,
        se_a11: s11,
        se_a12: s12,
        se_a21: s21,
        se_a22: s22,
        ar1_cover95: covers(a11, s11, truth.ar, 0.95),
        ar2_cover95: covers(a22, s22, truth.ar, 0.95),
        cr_cover95: covers(a12, s12, truth.cr, 0.95),
        ar1_cover998: covers(a11, s11, truth.ar, 0.998),
        ar2_cover998: covers(a22, s22, truth.ar, 0.998),
        cr_cover998: covers(a12, s12, truth.cr, 0.998),
        final_loglik: fit.final_log_likelihood,
    })
}

/// One row of the per-replicate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub timepoints: usize,
    pub items: usize,
    pub categories: usize,
    pub ar: f64,
    pub cr: f64,
    pub spread: ThresholdMode,
    pub model: ModelKind,
    pub replicate: usize,
    pub seed: u64,
    pub status: String,
    #[serde(flatten)]
    pub score: ReplicateScore,
    pub error: String,
}

impl ReplicateRow {
    fn new(cond: &StudyCondition, model: ModelKind, replicate: usize, seed: u64) -> Self {
        Self {
            timepoints: cond.timepoints,
            items: cond.items_per_state,
            categories: cond.categories,
            ar: cond.ar,
            cr: cond.cr,
            spread: cond.thresholds,
            model,
            replicate,
            seed,
            status: "ok".into(),
            score: ReplicateScore::default(),
            error: String::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn condition(&self) -> StudyCondition {
        StudyCondition {
            timepoints: self.timepoints,
            items_per_state: self.items,
            categories: self.categories,
            ar: self.ar,
            cr: self.cr,
            thresholds: self.spread,
        }
    }
}

/// Medians and coverage proportions for one condition and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub timepoints: usize,
    pub items: usize,
    pub categories: usize,
    pub ar: f64,
    pub cr: f64,
    pub spread: ThresholdMode,
    pub model: ModelKind,
    pub n_ok: usize,
    pub n_failed: usize,
    pub state_recovery: f64,
    /// Both AR entries pooled.
    pub ar_relbias: f64,
    pub ar_relbias_1: f64,
    pub ar_relbias_2: f64,
    pub cr_bias: f64,
    pub ar_se: f64,
    pub cr_se: f64,
    pub ar_coverage95: f64,
    pub ar_coverage998: f64,
    pub cr_coverage95: f64,
    pub cr_coverage998: f64,
}

fn proportion(flags: impl Iterator<Item = Option<bool>>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags.flatten() {
        n += 1;
        hit += usize::from(f);
    }
    if n == 0 {
        f64::NAN
    } else {
        hit as f64 / n as f64
    }
}

/// Aggregates rows by condition and model. Failed rows only count towards
/// `n_failed`. The result does not depend on row order.
pub fn summarize(rows: &[ReplicateRow]) -> Vec<ConditionSummary> {
    let mut groups: BTreeMap<(u64, usize, usize, u64, u64, bool, bool), Vec<&ReplicateRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.timepoints as u64,
            r.items,
            r.categories,
            r.ar.to_bits(),
            r.cr.to_bits(),
            r.spread == ThresholdMode::Offset,
            r.model == ModelKind::Linear,
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let first = g[0];
            let ok: Vec<&ReplicateScore> = g.iter().filter(|r| r.is_ok()).map(|r| &r.score).collect();
            let col = |f: fn(&ReplicateScore) -> f64| -> Vec<f64> { ok.iter().map(|s| f(s)).collect() };
            let pooled = |f1: fn(&ReplicateScore) -> f64, f2: fn(&ReplicateScore) -> f64| -> Vec<f64> {
                ok.iter().flat_map(|s| [f1(s), f2(s)]).collect()
            };
            let med = |v: Vec<f64>| median(&v).unwrap_or(f64::NAN);
            ConditionSummary {
                timepoints: first.timepoints,
                items: first.items,
                categories: first.categories,
                ar: first.ar,
                cr: first.cr,
                spread: first.spread,
                model: first.model,
                n_ok: ok.len(),
                n_failed: g.len() - ok.len(),
                state_recovery: med(col(|s| s.rho_s)),
                ar_relbias: med(pooled(|s| s.ar_relbias_1, |s| s.ar_relbias_2)),
                ar_relbias_1: med(col(|s| s.ar_relbias_1)),
                ar_relbias_2: med(col(|s| s.ar_relbias_2)),
                cr_bias: med(col(|s| s.cr_bias)),
                ar_se: med(pooled(|s| s.se_a11, |s| s.se_a22)),
                cr_se: med(col(|s| s.se_a12)),
                ar_coverage95: proportion(ok.iter().flat_map(|s| [s.ar1_cover95, s.ar2_cover95])),
                ar_coverage998: proportion(ok.iter().flat_map(|s| [s.ar1_cover998, s.ar2_cover998])),
                cr_coverage95: proportion(ok.iter().map(|s| s.cr_cover95)),
                cr_coverage998: proportion(ok.iter().map(|s| s.cr_cover998)),
            }
        })
        .collect()
}

/// Seed of replicate `rep` in `cond`.
pub fn replicate_seed(base_seed: u64, cond: &StudyCondition, rep: usize) -> u64 {
    mix(base_seed, &[tag::REPLICATE, cond.key(), rep as u64])
}

/// Runs one replicate: simulate once, then fit and score every model.
pub fn run_replicate(config: &StudyConfig, cond: &StudyCondition, rep: usize) -> Vec<ReplicateRow> {
    let seed = replicate_seed(config.base_seed, cond, rep);
    let recipe = cond.recipe(seed);
    let data = match simulate_dataset(&recipe) {
        Ok(d) => d,
        Err(e) => {
            return config
                .models
                .iter()
                .map(|&m| {
                    let mut row = ReplicateRow::new(cond, m, rep, seed);
                    row.status = "failed".into();
                    row.error = format!("simulation: {e}");
                    row
                })
                .collect();
        }
    };
    config
        .models
        .iter()
        .map(|&model| {
            let mut row = ReplicateRow::new(cond, model, rep, seed);
            let outcome = (|| -> Result<ReplicateScore> {
                let layout =
                    ModelLayout::for_data(model, 2, recipe.item_states(), cond.categories, &data.observations)?;
                let fit_config = Mif2Config { seed: mix(seed, &[tag::RUN, model as u64]), ..config.mif2.clone() };
                let fitted = fit(&layout, &data.observations, &fit_config)?;
                let se = match &config.slice {
                    Some(s) if fitted.is_converged() => {
                        let s = SliceConfig { seed: mix(seed, &[tag::SLICE, model as u64]), ..s.clone() };
                        Some(slice_se(&fitted, &data.observations, &s)?)
                    }
                    _ => None,
                };
                score_replicate(&recipe, &data.states, &fitted, se.as_ref())
            })();
            match outcome {
                Ok(score) => row.score = score,
                Err(e) => {
                    row.status = "failed".into();
                    row.error = e.to_string();
                }
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<ReplicateRow>,
    pub summaries: Vec<ConditionSummary>,
}

/// Runs every condition and replicate, in parallel, calling `progress` after
/// each replicate. Rows come back ordered by condition, replicate and model.
pub fn run_study_with<P>(config: &StudyConfig, progress: P) -> Result<StudyReport>
where
    P: Fn(&[ReplicateRow]) + Sync,
{
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..config.conditions.len())
        .flat_map(|c| (0..config.replications).map(move |r| (c, r)))
        .collect();
    let rows: Vec<Vec<ReplicateRow>> = jobs
        .par_iter()
        .with_max_len(1)
        .map(|&(c, r)| {
            let rows = run_replicate(config, &config.conditions[c], r);
            progress(&rows);
            rows
        })
        .collect();
    let rows: Vec<ReplicateRow> = rows.into_iter().flatten().collect();
    let summaries = summarize(&rows);
    Ok(StudyReport { rows, summaries })
}

pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    run_study_with(config, |_| {})
}

/// Writes `replicates.csv` and `summary.csv` into `dir`.
pub fn write_report(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
    for row in &report.rows {
        w.serialize(CsvReplicateRow::from(row))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for s in &report.summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Flat form of [`ReplicateRow`]; the csv crate cannot serialize flattened structs.
#[derive(Serialize)]
struct CsvReplicateRow<'a> {
    timepoints: usize,
    items: usize,
    categories: usize,
    ar: f64,
    cr: f64,
    spread: ThresholdMode,
    model: ModelKind,
    replicate: usize,
    seed: u64,
    status: &'a str,
    rho_s: f64,
    rho_s_state1: f64,
    rho_s_state2: f64,
    a11: f64,
    a12: f64,
    a21: f64,
    a22: f64,
    ar_relbias_1: f64,
    ar_relbias_2: f64,
    cr_bias: f64,
    se_a11: f64,
    se_a12: f64,
    se_a21: f64,
    se_a22: f64,
    ar1_cover95: Option<bool>,
    ar2_cover95: Option<bool>,
    cr_cover95: Option<bool>,
    ar1_cover998: Option<bool>,
    ar2_cover998: Option<bool>,
    cr_cover998: Option<bool>,
    final_loglik: f64,
    error: &'a str,
}

impl<'a> From<&'a ReplicateRow> for CsvReplicateRow<'a> {
    fn from(r: &'a ReplicateRow) -> Self {
        let s = &r.score;
        Self {
            timepoints: r.timepoints,
            items: r.items,
            categories: r.categories,
            ar: r.ar,
            cr: r.cr,
            spread: r.spread,
            model: r.model,
            replicate: r.replicate,
            seed: r.seed,
            status: &r.status,
            rho_s: s.rho_s,
            rho_s_state1: s.rho_s_state1,
            rho_s_state2: s.rho_s_state2,
            a11: s.a11,
            a12: s.a12,
            a21: s.a21,
            a22: s.a22,
            ar_relbias_1: s.ar_relbias_1,
            ar_relbias_2: s.ar_relbias_2,
            cr_bias: s.cr_bias,
            se_a11: s.se_a11,
            se_a12: s.se_a12,
            se_a21: s.se_a21,
            se_a22: s.se_a22,
            ar1_cover95: s.ar1_cover95,
            ar2_cover95: s.ar2_cover95,
            cr_cover95: s.cr_cover95,
            ar1_cover998: s.ar1_cover998,
            ar2_cover998: s.ar2_cover998,
            cr_cover998: s.cr_cover998,
            final_loglik: s.final_loglik,
            error: &r.error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Spearman via explicit pairwise rank comparison, independent of the
    /// sort-based ranking above.
    fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let below = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_abs_diff_eq!(spearman(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_abs_diff_eq!(spearman(&x, &rev).unwrap(), -1.0, epsilon = 1e-15);
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        assert_abs_diff_eq!(spearman(&x, &y).unwrap(), brute_spearman(&x, &y), epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&x, &y).unwrap(), 0.8, epsilon = 1e-15);
        assert!(matches!(spearman(&x, &[1.0; 5]), Err(Error::UndefinedCorrelation)));
        assert!(spearman(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn spearman_with_ties_matches_brute_force() {
        let x = [1.0, 2.0, 2.0, 3.0, 5.0, 5.0, 5.0, -1.0];
        let y = [0.3, 0.1, 0.9, 0.9, 0.2, 1.5, -2.0, 0.0];
        assert_abs_diff_eq!(spearman(&x, &y).unwrap(), brute_spearman(&x, &y), epsilon = 1e-14);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN, 1.0]), Some(1.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn grid_and_subset() {
        let grid = StudyCondition::full_grid();
        assert_eq!(grid.len(), 64);
        assert!(grid.iter().all(StudyCondition::on_grid));
        assert!(StudyCondition::desk_subset().iter().all(StudyCondition::on_grid));
        let mut keys: Vec<u64> = grid.iter().map(StudyCondition::key).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 64);
    }

    #[test]
    fn off_grid_needs_flag() {
        let mut config = StudyConfig::desk(1);
        config.conditions[0].ar = 0.5;
        assert!(config.validate().is_err());
        config.free_grid = true;
        assert!(config.validate().is_ok());
    }

    fn row(model: ModelKind, rep: usize, relbias: f64, cover: bool) -> ReplicateRow {
        let cond = StudyCondition::desk_subset()[1];
        let mut r = ReplicateRow::new(&cond, model, rep, rep as u64);
        r.score = ReplicateScore {
            rho_s: 0.5 + rep as f64 / 100.0,
            ar_relbias_1: relbias,
            ar_relbias_2: -relbias,
            cr_bias: relbias / 2.0,
            ar1_cover95: Some(cover),
            ar2_cover95: Some(true),
            ar1_cover998: Some(true),
            ar2_cover998: Some(true),
            ..Default::default()
        };
        r
    }

    #[test]
    fn aggregation_is_order_independent() {
        let mut rows: Vec<ReplicateRow> = (0..9)
            .flat_map(|i| {
                [row(ModelKind::Grm, i, i as f64 * 0.1, i % 3 == 0), row(ModelKind::Linear, i, 1.0 + i as f64, false)]
            })
            .collect();
        let mut failed = row(ModelKind::Grm, 9, 100.0, false);
        failed.status = "failed".into();
        rows.push(failed);
        let a = summarize(&rows);
        rows.reverse();
        rows.swap(0, 7);
        let b = summarize(&rows);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));

        let grm = a.iter().find(|s| s.model == ModelKind::Grm).unwrap();
        assert_eq!((grm.n_ok, grm.n_failed), (9, 1));
        assert_abs_diff_eq!(grm.ar_relbias_1, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(grm.ar_relbias, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grm.ar_coverage95, (3.0 + 9.0) / 18.0, epsilon = 1e-12);
        assert_eq!(grm.ar_coverage998, 1.0);
        assert!(grm.cr_coverage95.is_nan());
    }

    #[test]
    fn score_of_exact_fit() {
        use crate::mif2::{MeasurementParameters, ModelParameters};
        let cond = StudyCondition::desk_subset()[2];
        let recipe = cond.recipe(5);
        let states = StatePath::new(2, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let layout = ModelLayout::graded(2, recipe.item_states(), vec![3; 6]).unwrap();
        let estimate = ModelParameters {
            a: vec![vec![0.7, 0.25], vec![0.0, 0.7]],
            measurement: MeasurementParameters::Graded { thresholds: vec![vec![-0.5, 0.5]; 6] },
        };
        let fitted = FitResult {
            layout: layout.clone(),
            config: Mif2Config::default(),
            estimate,
            sigma_diag: vec![],
            gamma: vec![],
            runs: vec![],
            failed_runs: 0,
            final_log_likelihood: -1.0,
            filtered_means: Some(states.clone()),
        };
        let se = SliceSEResult {
            config: SliceConfig::default(),
            parameters: ["A[1,1]", "A[1,2]", "A[2,1]", "A[2,2]"]
                .iter()
                .map(|n| crate::inference::ParameterSlice {
                    name: n.to_string(),
                    estimate: 0.0,
                    se: Some(0.05),
                    curvature: -400.0,
                    flat: false,
                    half_width: 0.15,
                    points: vec![],
                })
                .collect(),
        };
        let s = score_replicate(&recipe, &states, &fitted, Some(&se)).unwrap();
        assert_eq!(s.rho_s, 1.0);
        assert_eq!((s.ar_relbias_1, s.ar_relbias_2, s.cr_bias), (0.0, 0.0, 0.0));
        assert_eq!(s.ar1_cover95, Some(true));
        assert_eq!(s.cr_cover998, Some(true));

        // AR estimate twice the truth -> relative bias 1
        let mut off = fitted.clone();
        off.estimate.a[0][0] = 1.4;
        let low = SimulationRecipe { ar: 0.7, ..recipe };
        assert_abs_diff_eq!(score_replicate(&low, &states, &off, None).unwrap().ar_relbias_1, 1.0, epsilon = 1e-12);

        // CR estimate 0.42 with truth 0 and SE 0.11: (0.2044, 0.6356) misses 0
        let mut cr = fitted;
        cr.estimate.a[0][1] = 0.42;
        let mut se11 = se.clone();
        se11.parameters[1].se = Some(0.11);
        let zero_cr = SimulationRecipe { cr: 0.0, ..recipe };
        let s = score_replicate(&zero_cr, &states, &cr, Some(&se11)).unwrap();
        assert_abs_diff_eq!(s.cr_bias, 0.42, epsilon = 1e-12);
        assert_eq!(s.cr_cover95, Some(false));
    }
}
