//! `ordss`: simulate, fit, slice SEs and simulation studies from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ordss::inference::{slice_se, wald_ci, SliceConfig, SliceSEResult, SliceTarget};
use ordss::io::{read_json, read_observations, write_json, write_observations, write_states};
use ordss::mif2::{fit, FitResult, Mif2Config, ModelKind, ModelLayout};
use ordss::study::{run_study_with, write_report, StudyCondition, StudyConfig};
use ordss::{simulate_dataset, Error, Observations, SimulationRecipe, ThresholdMode};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const THREADS_ENV: &str = "ORDSS_THREADS";

#[derive(Parser)]
#[command(name = "ordss", version, about = "State-space models with graded-response measurements")]
struct Cli {
    /// Worker threads (default: available cores). ORDSS_THREADS overrides this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a two-state dataset.
    Simulate(SimulateArgs),
    /// Fit a graded-response or linear model by iterated filtering.
    Fit(FitArgs),
    /// Add slice-likelihood SEs and Wald intervals to a fit.
    Se(SeArgs),
    /// Run a simulation study.
    Study(StudyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Spread {
    Equal,
    Offset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Grm,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    All,
    Dynamics,
}

#[derive(Args)]
struct SimulateArgs {
    /// Recipe JSON (timepoints, ar, cr, items_per_state, categories, thresholds, seed); flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    timepoints: usize,
    /// Items per state.
    #[arg(long, default_value_t = 3)]
    items: usize,
    #[arg(long, default_value_t = 7)]
    categories: usize,
    #[arg(long, default_value_t = 0.3)]
    ar: f64,
    #[arg(long, default_value_t = 0.0)]
    cr: f64,
    #[arg(long, value_enum, default_value_t = Spread::Equal)]
    thresholds: Spread,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Observation CSV to write; a `<out>.json` description is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also write the true states (t, x1, x2).
    #[arg(long)]
    states_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    model: Model,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    #[arg(long, default_value_t = 250)]
    iterations: usize,
    /// Perturbation variance multiplier per 50 iterations.
    #[arg(long, default_value_t = 0.05)]
    cooling: f64,
    #[arg(long, default_value_t = 0.3)]
    perturb_sd: f64,
    #[arg(long, default_value_t = 4)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of states.
    #[arg(long, default_value_t = 2)]
    states: usize,
    /// Comma-separated 1-based state of every item column (default: from the
    /// data description, else consecutive equal blocks).
    #[arg(long, value_delimiter = ',')]
    item_states: Option<Vec<usize>>,
    /// Categories per item for the graded model (default: from the data description, else the largest observed value).
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SeArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 21)]
    points: usize,
    #[arg(long, default_value_t = 0.5)]
    half_width: f64,
    #[arg(long, default_value_t = 3)]
    replicates: usize,
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Target::All)]
    target: Target,
    /// Keep the first grid even when a narrower one would suit the curvature.
    #[arg(long)]
    no_refine: bool,
    /// Where to write the fit with its SE block (default: overwrite --fit).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// Study configuration JSON.
    #[arg(long, conflicts_with = "desk")]
    config: Option<PathBuf>,
    /// Use the built-in desk-scale configuration.
    #[arg(long)]
    desk: bool,
    /// Base seed for --desk.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Describes a simulated observation file.
#[derive(Serialize, Deserialize)]
struct DataDescription {
    software: String,
    version: String,
    recipe: SimulationRecipe,
    item_states: Vec<usize>,
    categories: usize,
}

#[derive(Serialize, Deserialize)]
struct SeBlock {
    slice: SliceSEResult,
    intervals: Vec<Interval>,
}

#[derive(Serialize, Deserialize)]
struct Interval {
    name: String,
    estimate: f64,
    se: Option<f64>,
    ci95: Option<(f64, f64)>,
    ci998: Option<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct FitDocument {
    software: String,
    version: String,
    data: PathBuf,
    #[serde(flatten)]
    fit: FitResult,
    /// Diagonal of the stationary covariance of the averaged dynamics.
    stationary_variance: Vec<f64>,
    filtered_means: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    se: Option<SeBlock>,
}

#[derive(Serialize)]
struct StudyEcho<'a> {
    software: &'a str,
    version: &'a str,
    config: &'a StudyConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 5,
        Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => 5,
        Error::Json(j) if j.is_io() => 5,
        Error::Precondition(_) => 3,
        Error::EstimationFailure(_) | Error::FilterDegeneracy { .. } | Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Se(a) => cmd_se(a),
        Command::Study(a) => cmd_study(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads(flag: Option<usize>) -> ordss::Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("cannot start {n} threads: {e}")))?;
    }
    Ok(())
}

fn description_path(data: &Path) -> PathBuf {
    let mut p = data.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn cmd_simulate(a: SimulateArgs) -> ordss::Result<()> {
    let recipe = match &a.config {
        Some(path) => read_json::<SimulationRecipe>(path)?,
        None => SimulationRecipe {
            timepoints: a.timepoints,
            ar: a.ar,
            cr: a.cr,
            items_per_state: a.items,
            categories: a.categories,
            thresholds: match a.thresholds {
                Spread::Equal => ThresholdMode::Equal,
                Spread::Offset => ThresholdMode::Offset,
            },
            seed: a.seed,
        },
    };
    recipe.validate()?;
    let data = simulate_dataset(&recipe)?;
    write_observations(&a.out, &data.observations)?;
    if let Some(path) = &a.states_out {
        write_states(path, &data.states)?;
    }
    let description = DataDescription {
        software: "ordss".into(),
        version: VERSION.into(),
        item_states: recipe.item_states().iter().map(|s| s + 1).collect(),
        categories: recipe.categories,
        recipe,
    };
    write_json(&description_path(&a.out), &description)
}

fn resolve_layout(a: &FitArgs, data: &Observations) -> ordss::Result<ModelLayout> {
    let description: Option<DataDescription> = {
        let path = description_path(&a.data);
        if path.exists() {
            Some(read_json(&path)?)
        } else {
            None
        }
    };
    let q = data.n_items();
    let item_states: Vec<usize> = match (&a.item_states, &description) {
        (Some(s), _) => {
            if s.iter().any(|&v| v == 0 || v > a.states) {
                return Err(Error::InvalidInput(format!("item states must lie in 1..={}", a.states)));
            }
            s.iter().map(|v| v - 1).collect()
        }
        (None, Some(d)) => d.item_states.iter().map(|v| v - 1).collect(),
        (None, None) => {
            if q % a.states != 0 {
                return Err(Error::InvalidInput(format!(
                    "{q} items do not split evenly over {} states; pass --item-states",
                    a.states
                )));
            }
            (0..q).map(|i| i / (q / a.states)).collect()
        }
    };
    let categories = match (a.categories, &description) {
        (Some(c), _) => c,
        (None, Some(d)) => d.categories,
        (None, None) => (0..q).map(|i| data.column_max(i)).fold(0.0, f64::max) as usize,
    };
    let kind = match a.model {
        Model::Grm => ModelKind::Grm,
        Model::Linear => ModelKind::Linear,
    };
    ModelLayout::for_data(kind, a.states, item_states, categories, data)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "fit".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_fit(a: FitArgs) -> ordss::Result<()> {
    let data = read_observations(&a.data)?;
    let layout = resolve_layout(&a, &data)?;
    let config = Mif2Config {
        particles: a.particles,
        iterations: a.iterations,
        cooling_fraction_50: a.cooling,
        perturb_sd: a.perturb_sd,
        runs: a.runs,
        seed: a.seed,
        ..Mif2Config::default()
    };
    config.validate()?;
    let result = fit(&layout, &data, &config)?;
    if result.failed_runs > 0 {
        eprintln!(
            "warning: {} of {} runs failed; the estimate averages the remaining runs",
            result.failed_runs, config.runs
        );
    }
    let means_path = sibling(&a.out, ".filtered.csv");
    if let Some(means) = &result.filtered_means {
        write_states(&means_path, means)?;
    }
    let doc = FitDocument {
        software: "ordss".into(),
        version: VERSION.into(),
        data: a.data.clone(),
        stationary_variance: (0..layout.n_states).map(|i| result.gamma[i][i]).collect(),
        fit: result,
        filtered_means: means_path,
        se: None,
    };
    write_json(&a.out, &doc)
}

fn cmd_se(a: SeArgs) -> ordss::Result<()> {
    let mut doc: FitDocument = read_json(&a.fit)?;
    if !doc.fit.is_converged() {
        return Err(Error::Precondition(format!(
            "{} records {} failed run(s); refusing to compute SEs",
            a.fit.display(),
            doc.fit.failed_runs
        )));
    }
    let data = read_observations(&a.data)?;
    let config = SliceConfig {
        n_points: a.points,
        half_width: a.half_width,
        replicates: a.replicates,
        particles: a.particles,
        seed: a.seed,
        refine: !a.no_refine,
        target: match a.target {
            Target::All => SliceTarget::All,
            Target::Dynamics => SliceTarget::Dynamics,
        },
    };
    config.validate()?;
    let slice = slice_se(&doc.fit, &data, &config)?;
    for p in slice.flagged() {
        eprintln!("warning: {} has a flat or convex slice; no SE reported", p.name);
    }
    let intervals = slice
        .parameters
        .iter()
        .map(|p| Interval {
            name: p.name.clone(),
            estimate: p.estimate,
            se: p.se,
            ci95: p.se.and_then(|s| wald_ci(p.estimate, s, 0.95).ok()),
            ci998: p.se.and_then(|s| wald_ci(p.estimate, s, 0.998).ok()),
        })
        .collect();
    doc.se = Some(SeBlock { slice, intervals });
    write_json(a.out.as_deref().unwrap_or(&a.fit), &doc)
}

fn cmd_study(a: StudyArgs) -> ordss::Result<()> {
    let config = match (&a.config, a.desk) {
        (Some(path), _) => read_json::<StudyConfig>(path)?,
        (None, true) => StudyConfig::desk(a.seed),
        (None, false) => return Err(Error::InvalidInput("pass --config or --desk".into())),
    };
    config.validate()?;
    let total = config.conditions.len() * config.replications;
    if config.conditions.len() == StudyCondition::full_grid().len() {
        eprintln!(
            "warning: {total} replicates of the full design; each fit takes minutes, expect days of compute"
        );
    }
    std::fs::create_dir_all(&a.out)?;
    write_json(
        &a.out.join("study.json"),
        &StudyEcho { software: "ordss", version: VERSION, config: &config },
    )?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let report = run_study_with(&config, |rows| {
        let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        if let Some(r) = rows.first() {
            eprintln!(
                "[{n}/{total}] T={} items={} cats={} ar={} cr={} {} rep {}",
                r.timepoints,
                r.items,
                r.categories,
                r.ar,
                r.cr,
                r.spread.as_str(),
                r.replicate
            );
        }
    })?;
    write_report(&report, &a.out)?;
    let failed = report.rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        eprintln!("warning: {failed} fits failed and are excluded from the summary");
    }
    Ok(())
}
