//! Run configuration: a TOML file plus `key=value` overrides.
//!
//! Every section is optional. Missing estimator settings fall back to the
//! defaults for the chosen functional.
//!
//! ```toml
//! mode = "control_function"
//! functional = "casf"
//! x_columns = ["d"]
//! seed = 7
//! folds = 5
//! depth = 3
//!
//! [f_star]
//! family = "gaussian"
//! mean = [0.0]
//! sd = [1.0]
//!
//! [h]
//! kind = "lasso_dictionary"
//! dictionary = { family = "tensor_polynomial", degree_x = 2, degree_v = 1 }
//!
//! [simulation]
//! n = 1000
//! replications = 200
//! dgp = { design = "casf" }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Mode;
use crate::dgmm::{EstimatorConfig, FunctionalKind};
use crate::error::{Error, Result};
use crate::functionals::{FStar, StepOverrides};
use crate::learners::LearnerSpec;
use crate::riesz::{IndirectSign, RieszSpec};
use crate::simulation::{CasfDgp, CasfX, Dgp, SelectionDgp};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub functional: Option<FunctionalKind>,
    /// Columns of the CSV forming `X`: `d` or `z1`, `z2`, ...
    pub x_columns: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
    pub folds: Option<usize>,
    pub depth: Option<usize>,
    pub draws: Option<usize>,
    pub f_star: Option<FStar>,
    pub g: Option<LearnerSpec>,
    pub h: Option<LearnerSpec>,
    pub alpha1: Option<RieszSpec>,
    pub alpha2: Option<RieszSpec>,
    pub steps: Option<StepOverrides>,
    pub indirect_sign: Option<IndirectSign>,
    pub force_zero_alpha: Option<bool>,
    pub simulation: Option<SimulationSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_dgp")]
    pub dgp: Dgp,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            dgp: default_dgp(),
            n: default_n(),
            replications: default_replications(),
        }
    }
}

fn default_dgp() -> Dgp {
    Dgp::Casf(CasfDgp::default())
}

fn default_n() -> usize {
    1000
}

fn default_replications() -> usize {
    200
}

/// Parses a `--set` right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}` passes through a non-table value")))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Reads `path` if given, otherwise starts from an empty configuration.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn functional_kind(&self) -> FunctionalKind {
        self.functional.unwrap_or(FunctionalKind::Casf)
    }

    pub fn resolved_mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::ControlFunction)
    }

    /// `X` columns; defaults to `d` in control-function mode.
    pub fn resolved_x_columns(&self) -> Result<Vec<String>> {
        match (&self.x_columns, self.resolved_mode()) {
            (Some(cols), _) if !cols.is_empty() => Ok(cols.clone()),
            (Some(_), _) => Err(Error::Config("x_columns is empty".into())),
            (None, Mode::ControlFunction) => Ok(vec!["d".into()]),
            (None, Mode::Selection) => Err(Error::Config(
                "selection mode needs x_columns (d is the selection indicator)".into(),
            )),
        }
    }

    pub fn simulation(&self) -> SimulationSection {
        self.simulation.clone().unwrap_or_default()
    }

    /// Estimator settings for data with `x_dim` columns in `X`.
    pub fn estimator(&self, x_dim: usize) -> Result<EstimatorConfig> {
        let mut cfg = match self.functional_kind() {
            FunctionalKind::Casf => EstimatorConfig::casf_default(x_dim),
            FunctionalKind::Ape => EstimatorConfig::ape_default(),
        };
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        if self.draws.is_some() {
            cfg.draws = self.draws;
        }
        if let Some(v) = &self.f_star {
            cfg.f_star = v.clone();
        }
        if let Some(v) = &self.g {
            cfg.g = v.clone();
        }
        if let Some(v) = &self.h {
            cfg.h = v.clone();
        }
        if let Some(v) = &self.alpha1 {
            cfg.alpha1 = v.clone();
        }
        if let Some(v) = &self.alpha2 {
            cfg.alpha2 = v.clone();
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.indirect_sign {
            cfg.indirect_sign = v;
        }
        if let Some(v) = self.force_zero_alpha {
            cfg.force_zero_alpha = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Estimator settings matching a simulated design.
    pub fn estimator_for(&self, dgp: &Dgp) -> Result<EstimatorConfig> {
        let mut run = self.clone();
        if run.functional.is_none() {
            run.functional = Some(match dgp {
                Dgp::Casf(_) => FunctionalKind::Casf,
                Dgp::Selection(_) => FunctionalKind::Ape,
            });
        }
        run.estimator(1)
    }
}

/// `X` column designation used for a simulated design.
pub fn simulated_x_columns(dgp: &Dgp) -> Vec<String> {
    match dgp {
        Dgp::Casf(CasfDgp { x: CasfX::D, .. }) => vec!["d".into()],
        Dgp::Casf(_) | Dgp::Selection(SelectionDgp { .. }) => vec!["z1".into()],
    }
}
