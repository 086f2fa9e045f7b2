//! Named, configured, reproducible experiments producing CSV tables.
//!
//! Each scenario turns a validated [`ExperimentConfig`] into [`ResultRow`]s.
//! Rows carry an anchor naming the property they verify and a pass flag
//! decided by the tolerance the scenario declares for that row. CSV bodies
//! depend only on the config and seed; wall times and timestamps go to a
//! sidecar file.

pub mod config;
mod scenarios;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub use config::{load_configs, parse_configs, ExperimentConfig, OperatorConfig, StepConfig};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operators::OperatorSpec;
use crate::rng::derive_seed;

/// Acceptance rule for one row, fixed before the estimate is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    /// `|estimate − oracle| ≤ z·√(se² + se_oracle²) + rel·|oracle|`.
    Match { z: f64, rel: f64 },
    /// `estimate ≤ oracle + z·se + rel·|oracle|`.
    AtMost { z: f64, rel: f64 },
    /// `estimate < limit`.
    Below(f64),
    /// `estimate > limit`.
    Above(f64),
    /// `lo ≤ estimate ≤ hi`.
    Within(f64, f64),
    /// Finite estimate; used for values reported without an oracle.
    Finite,
}

impl Tolerance {
    pub const SE3: Tolerance = Tolerance::Match { z: 3.0, rel: 1e-9 };

    pub fn check(&self, estimate: f64, se: f64, oracle: Option<(f64, f64)>) -> bool {
        if !estimate.is_finite() {
            return false;
        }
        match *self {
            Tolerance::Match { z, rel } => oracle.is_some_and(|(o, ose)| {
                (estimate - o).abs() <= z * se.hypot(ose) + rel * o.abs()
            }),
            Tolerance::AtMost { z, rel } => {
                oracle.is_some_and(|(o, _)| estimate <= o + z * se + rel * o.abs())
            }
            Tolerance::Below(limit) => estimate < limit,
            Tolerance::Above(limit) => estimate > limit,
            Tolerance::Within(lo, hi) => (lo..=hi).contains(&estimate),
            Tolerance::Finite => true,
        }
    }
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tolerance::Match { z, rel } => write!(f, "|est-oracle|<={z}se+{rel}|oracle|"),
            Tolerance::AtMost { z, rel } => write!(f, "est<=oracle+{z}se+{rel}rel"),
            Tolerance::Below(x) => write!(f, "est<{x}"),
            Tolerance::Above(x) => write!(f, "est>{x}"),
            Tolerance::Within(lo, hi) => write!(f, "{lo}<=est<={hi}"),
            Tolerance::Finite => write!(f, "finite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub anchor: String,
    pub parameters: String,
    pub estimate: f64,
    pub std_error: f64,
    pub oracle: Option<f64>,
    pub oracle_std_error: Option<f64>,
    pub tolerance: String,
    pub pass: bool,
    pub seed: u64,
    /// Seconds spent on the computation behind this row; kept out of the CSV.
    pub wall_time: f64,
}

impl ResultRow {
    pub const HEADER: [&'static str; 10] = [
        "scenario",
        "anchor",
        "parameters",
        "estimate",
        "std_error",
        "oracle",
        "oracle_std_error",
        "tolerance",
        "pass",
        "seed",
    ];

    fn record(&self) -> [String; 10] {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        [
            self.scenario.clone(),
            self.anchor.clone(),
            self.parameters.clone(),
            self.estimate.to_string(),
            self.std_error.to_string(),
            opt(self.oracle),
            opt(self.oracle_std_error),
            self.tolerance.clone(),
            self.pass.to_string(),
            self.seed.to_string(),
        ]
    }
}

/// Two-column numeric data for external plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub name: String,
    pub columns: [String; 2],
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioOutput {
    pub rows: Vec<ResultRow>,
    pub plots: Vec<PlotData>,
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub scenario: &'static Scenario,
    pub grid: Grid,
    pub operators: Vec<(OperatorConfig, OperatorSpec<f64>)>,
    pub orders: Vec<usize>,
    pub n_samples: usize,
    pub reps: usize,
    /// Scenario seed derived from the master seed and the scenario name.
    pub seed: u64,
    pub perturbation: Vec<f64>,
    pub sequence: Vec<usize>,
}

impl Plan {
    pub(crate) fn sub_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    /// Anchors of the properties this scenario's rows verify.
    pub anchors: &'static [&'static str],
    /// Optional config fields the scenario reads.
    fields: &'static [&'static str],
    fill_defaults: fn(&mut ExperimentConfig),
    check: fn(&Plan) -> Result<()>,
    run: fn(&Plan) -> ScenarioOutput,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario").field("name", &self.name).finish()
    }
}

/// All scenarios, in alphabetical order.
pub fn scenarios() -> &'static [Scenario] {
    &scenarios::SCENARIOS
}

pub fn list_scenarios() -> Vec<(&'static str, &'static str)> {
    scenarios().iter().map(|s| (s.name, s.description)).collect()
}

pub fn find_scenario(name: &str) -> Result<&'static Scenario> {
    scenarios().iter().find(|s| s.name == name).ok_or_else(|| {
        let names: Vec<_> = scenarios().iter().map(|s| s.name).collect();
        Error::Config(format!(
            "unknown scenario `{name}`, expected one of {}",
            names.join(", ")
        ))
    })
}

/// Every property the full scenario set must cover.
pub const REQUIRED_ANCHORS: [&str; 21] = [
    "integrator-representation",
    "covariance-formula",
    "mollified-local-time",
    "kernel-step-subspace",
    "comparison-process-y",
    "moment-bound",
    "quadrature-stability",
    "perturbation-expansion",
    "moment-formula-chain",
    "operator-gram-bound",
    "local-time-continuity",
    "supremum-comparison",
    "difference-identity",
    "level-integrated-moments",
    "projection-identity",
    "hadamard-bound",
    "nonstep-ratio",
    "step-bound-constant",
    "bridge-moment-gamma",
    "wiener-joint-density",
    "dirichlet-simplex",
];

/// Validates `config` and resolves defaults without running anything.
pub fn prepare(config: &ExperimentConfig) -> Result<Plan> {
    let scenario = find_scenario(&config.scenario)?;
    for field in config.set_fields() {
        if !scenario.fields.contains(&field) {
            return Err(Error::Config(format!(
                "field `{field}` is not used by scenario `{}` (it reads: {})",
                scenario.name,
                scenario.fields.join(", ")
            )));
        }
    }
    let mut cfg = config.clone();
    (scenario.fill_defaults)(&mut cfg);
    let grid = Grid::uniform(cfg.grid_n).map_err(|_| Error::Config("grid_n must be positive".into()))?;
    let operators = cfg
        .operators
        .iter()
        .map(|o| {
            o.build(grid)
                .map(|op| (o.clone(), op))
                .map_err(|e| Error::Config(format!("operator {}: {e}", o.label())))
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.orders.contains(&0) {
        return Err(Error::Config("orders must be positive".into()));
    }
    if let Some(path) = &cfg.output_path {
        if path.is_empty() {
            return Err(Error::Config("output_path must not be empty".into()));
        }
    }
    let plan = Plan {
        scenario,
        grid,
        operators,
        orders: cfg.orders.clone(),
        n_samples: cfg.n_samples.unwrap_or(0),
        reps: cfg.reps.unwrap_or(0),
        seed: derive_seed(cfg.master_seed, scenario.name),
        perturbation: cfg.perturbation.clone(),
        sequence: cfg.sequence.clone(),
        config: cfg,
    };
    (scenario.check)(&plan)?;
    Ok(plan)
}

/// Runs one experiment. Failures inside the scenario become failing rows.
pub fn run(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    Ok(execute(&prepare(config)?).rows)
}

pub fn execute(plan: &Plan) -> ScenarioOutput {
    (plan.scenario.run)(plan)
}

/// Default configuration of every scenario: the full acceptance suite.
pub fn selftest_configs(master_seed: u64) -> Vec<ExperimentConfig> {
    scenarios()
        .iter()
        .map(|s| ExperimentConfig::new(s.name, master_seed))
        .collect()
}

/// Writes the rows as CSV with a fixed column order.
pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(ResultRow::HEADER).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r.record()).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_plot(path: &Path, plot: &PlotData) -> Result<()> {
    let mut body = format!("# {} {}\n", plot.columns[0], plot.columns[1]);
    for (x, y) in &plot.points {
        body.push_str(&format!("{x} {y}\n"));
    }
    fs::write(path, body)?;
    Ok(())
}

/// Timing and provenance kept apart from the deterministic CSV.
fn write_sidecar(path: &Path, config: &ExperimentConfig, rows: &[ResultRow], total: f64) -> Result<()> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut body = format!(
        "scenario = \"{}\"\nfinished_unix = {started}\nwall_time_seconds = {total}\nthreads = {}\n\n",
        config.scenario,
        rayon::current_num_threads()
    );
    for r in rows {
        body.push_str(&format!(
            "[[row]]\nanchor = \"{}\"\nparameters = \"{}\"\nwall_time_seconds = {}\n\n",
            r.anchor,
            r.parameters.replace('"', "'"),
            r.wall_time
        ));
    }
    fs::write(path, body)?;
    Ok(())
}

/// Outcome of one experiment written to disk.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub csv_path: PathBuf,
    pub rows: Vec<ResultRow>,
    pub wall_time: f64,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Validates every config, then runs them in order, writing
/// `<out_dir>/<output file>` plus `.meta.toml` and plot sidecars.
pub fn run_suite(configs: &[ExperimentConfig], out_dir: &Path) -> Result<Vec<RunReport>> {
    let plans = configs.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir)?;
    let mut reports = Vec::with_capacity(plans.len());
    for plan in &plans {
        let start = Instant::now();
        let output = execute(plan);
        let total = start.elapsed().as_secs_f64();
        let csv_path = out_dir.join(plan.config.output_file());
        if let Some(parent) = csv_path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_csv(&csv_path, &output.rows)?;
        write_sidecar(&csv_path.with_extension("meta.toml"), &plan.config, &output.rows, total)?;
        for plot in &output.plots {
            write_plot(&csv_path.with_extension(format!("{}.dat", plot.name)), plot)?;
        }
        reports.push(RunReport {
            scenario: plan.scenario.name.to_string(),
            csv_path,
            rows: output.rows,
            wall_time: total,
        });
    }
    Ok(reports)
}
