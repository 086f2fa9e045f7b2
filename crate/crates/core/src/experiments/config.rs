//! Experiment configuration files.
//!
//! A file holds either one experiment at the top level or several
//! `[[experiment]]` tables:
//!
//! ```toml
//! [[experiment]]
//! scenario = "moments"
//! master_seed = 7
//! reps = 2000
//! orders = [1, 2]
//! operators = [{ constructor = "identity" }, { constructor = "bridge" }]
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::operators::OperatorSpec;

pub const DEFAULT_GRID_N: usize = 1024;

fn default_grid_n() -> usize {
    DEFAULT_GRID_N
}

fn one() -> f64 {
    1.0
}

/// One experiment. Fields left out fall back to the scenario's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub operators: Vec<OperatorConfig>,
    /// Moment orders `p`, level-integrated exponents `q`, or distance
    /// exponents `m`, depending on the scenario.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub orders: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
    /// Cosine-mode eigenvalues of the perturbation `B` (continuity).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbation: Vec<f64>,
    /// Indices `n` of the operator sequence `I + B/n` (continuity).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequence: Vec<usize>,
}

impl ExperimentConfig {
    pub fn new(scenario: &str, master_seed: u64) -> Self {
        Self {
            scenario: scenario.to_string(),
            operators: Vec::new(),
            orders: Vec::new(),
            n_samples: None,
            reps: None,
            master_seed,
            grid_n: DEFAULT_GRID_N,
            output_path: None,
            perturbation: Vec::new(),
            sequence: Vec::new(),
        }
    }

    /// Names of the optional fields that were set.
    pub(crate) fn set_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.operators.is_empty() {
            out.push("operators");
        }
        if !self.orders.is_empty() {
            out.push("orders");
        }
        if self.n_samples.is_some() {
            out.push("n_samples");
        }
        if self.reps.is_some() {
            out.push("reps");
        }
        if !self.perturbation.is_empty() {
            out.push("perturbation");
        }
        if !self.sequence.is_empty() {
            out.push("sequence");
        }
        out
    }

    /// CSV file name: `output_path` or `<scenario>.csv`.
    pub fn output_file(&self) -> String {
        self.output_path
            .clone()
            .unwrap_or_else(|| format!("{}.csv", self.scenario))
    }
}

/// Piecewise-constant function: `levels[i]` on `[breaks[i], breaks[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub breaks: Vec<f64>,
    pub levels: Vec<f64>,
}

impl StepConfig {
    pub fn build(&self, grid: Grid) -> Result<GridFunction<f64>> {
        if self.breaks.len() != self.levels.len() + 1 || self.levels.is_empty() {
            return Err(Error::Config(
                "a step needs one more break than levels".into(),
            ));
        }
        if self.breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("step breaks must increase".into()));
        }
        let mut f = GridFunction::zeros(grid);
        for (i, &level) in self.levels.iter().enumerate() {
            let piece = GridFunction::interval_indicator(grid, self.breaks[i], self.breaks[i + 1])
                .map_err(|e| Error::Config(format!("step break: {e}")))?;
            f.axpy(level, &piece)?;
        }
        Ok(f)
    }

    fn label(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{}@[{},{})", l, self.breaks[i], self.breaks[i + 1]);
        }
        s
    }
}

/// Operator constructor by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "constructor", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorConfig {
    Identity {},
    /// `I − P` with `P` the projection onto the constants.
    Bridge {},
    Scalar { value: f64 },
    /// `I − P` with `P` the projection onto the given step functions.
    ComplementProjection { kernel: Vec<StepConfig> },
    CosineDiagonal {
        values: Vec<f64>,
        #[serde(default = "one")]
        rest: f64,
    },
    /// `outer ∘ inner`.
    Compose {
        outer: Box<OperatorConfig>,
        inner: Box<OperatorConfig>,
    },
}

impl OperatorConfig {
    pub fn identity() -> Self {
        OperatorConfig::Identity {}
    }

    pub fn bridge() -> Self {
        OperatorConfig::Bridge {}
    }

    pub fn compose(outer: OperatorConfig, inner: OperatorConfig) -> Self {
        OperatorConfig::Compose {
            outer: Box::new(outer),
            inner: Box::new(inner),
        }
    }

    pub fn label(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        match self {
            OperatorConfig::Identity {} => "identity".into(),
            OperatorConfig::Bridge {} => "bridge".into(),
            OperatorConfig::Scalar { value } => format!("scalar({value})"),
            OperatorConfig::ComplementProjection { kernel } => format!(
                "complement-projection({})",
                kernel.iter().map(StepConfig::label).collect::<Vec<_>>().join("; ")
            ),
            OperatorConfig::CosineDiagonal { values, rest } => {
                format!("cosine-diagonal({} rest {})", list(values), rest)
            }
            OperatorConfig::Compose { outer, inner } => {
                format!("compose({} after {})", outer.label(), inner.label())
            }
        }
    }

    pub fn build(&self, grid: Grid) -> Result<OperatorSpec<f64>> {
        let op = match self {
            OperatorConfig::Identity {} => OperatorSpec::identity(grid),
            OperatorConfig::Bridge {} => {
                OperatorSpec::complement_projection(grid, &[GridFunction::constant(grid, 1.0)])?
            }
            OperatorConfig::Scalar { value } => OperatorSpec::scalar(grid, *value)?,
            OperatorConfig::ComplementProjection { kernel } => {
                let span = kernel
                    .iter()
                    .map(|s| s.build(grid))
                    .collect::<Result<Vec<_>>>()?;
                OperatorSpec::complement_projection(grid, &span)?
            }
            OperatorConfig::CosineDiagonal { values, rest } => {
                OperatorSpec::cosine_diagonal(grid, values, *rest)?
            }
            OperatorConfig::Compose { outer, inner } => {
                outer.build(grid)?.compose(&inner.build(grid)?)?
            }
        };
        Ok(op.with_label(self.label()))
    }

    /// Whether this is exactly the bridge operator, for which closed forms
    /// and the equality case of the moment bound apply.
    pub fn is_bridge(&self) -> bool {
        matches!(self, OperatorConfig::Bridge {})
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, OperatorConfig::Identity {})
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteFile {
    experiment: Vec<ExperimentConfig>,
}

/// Parses a config file body into its experiments.
pub fn parse_configs(text: &str) -> Result<Vec<ExperimentConfig>> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let out = if table.contains_key("experiment") {
        toml::from_str::<SuiteFile>(text)
            .map_err(|e| Error::Config(e.to_string()))?
            .experiment
    } else {
        vec![toml::from_str::<ExperimentConfig>(text).map_err(|e| Error::Config(e.to_string()))?]
    };
    if out.is_empty() {
        return Err(Error::Config("no experiments in config".into()));
    }
    Ok(out)
}

pub fn load_configs(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_configs(&text)
}
