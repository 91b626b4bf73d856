//! Scenario files: one JSON document tying a network to demands, a
//! perturbation, and a cost model.
//!
//! Unknown keys are rejected so typos fail loudly instead of silently
//! running defaults.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::equilibrium::{BprFunction, TravelerType};
use crate::network::{self, DemandVector, Network, NetworkError};
use crate::perturbation::{PerturbationError, PerturbationFamily, PerturbationSpec, ScaleRule};
use nalgebra::DVector;

#[derive(Error, Debug)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Network(#[from] NetworkError),
    #[error("{0}")]
    Perturbation(#[from] PerturbationError),
    #[error("scenario needs exactly one of `bpr` or `static_costs`")]
    CostModelChoice,
    #[error("scenario lists no demands")]
    NoDemands,
    #[error("static cost list has {got} entries, network has {expected} links")]
    CostLength { got: usize, expected: usize },
    #[error("demand q must be positive, got {0}")]
    NonPositiveWeight(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub family: PerturbationFamily,
    pub scale: ScaleRule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    pub origin: String,
    pub destination: String,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BprConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_alpha() -> f64 {
    0.15
}

fn default_beta() -> f64 {
    4.0
}

/// Flow-independent costs: a link attribute column or explicit values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", untagged)]
pub enum StaticCostConfig {
    Column { column: CostColumn },
    Values { values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostColumn {
    T0,
    Length,
}

/// Solver tolerance overrides; anything omitted keeps its default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    pub feasibility: Option<f64>,
    pub stationarity: Option<f64>,
    pub active_threshold: Option<f64>,
    pub boundary: Option<f64>,
    pub equilibrium: Option<f64>,
    pub max_iterations: Option<usize>,
    pub max_outer_iterations: Option<usize>,
    pub anderson_depth: Option<usize>,
    pub gamma0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Network file path, resolved relative to the scenario file.
    pub network: PathBuf,
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub demands: Vec<DemandConfig>,
    #[serde(default)]
    pub bpr: Option<BprConfig>,
    #[serde(default)]
    pub static_costs: Option<StaticCostConfig>,
    #[serde(default)]
    pub tolerances: Option<ToleranceConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let mut scenario = Scenario::from_json_str(&std::fs::read_to_string(path)?)?;
        if scenario.network.is_relative() {
            if let Some(dir) = path.parent() {
                scenario.network = dir.join(&scenario.network);
            }
        }
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        match (&self.bpr, &self.static_costs) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(ScenarioError::CostModelChoice),
        }
        for d in &self.demands {
            if !(d.q > 0.0) {
                return Err(ScenarioError::NonPositiveWeight(d.q));
            }
        }
        Ok(())
    }

    /// Loads the referenced network (JSON or `.csv` link list).
    pub fn load_network(&self) -> Result<Network, ScenarioError> {
        let net = if self
            .network
            .extension()
            .map(|e| e.eq_ignore_ascii_case("csv"))
            .unwrap_or(false)
        {
            Network::from_csv_file(&self.network)?
        } else {
            Network::from_json_file(&self.network)?
        };
        Ok(net)
    }

    pub fn perturbation_spec(&self, network: &Network) -> Result<PerturbationSpec, ScenarioError> {
        Ok(PerturbationSpec::from_rule(
            self.perturbation.family,
            &self.perturbation.scale,
            network,
        )?)
    }

    /// Static cost vector; only valid for scenarios with `static_costs`.
    pub fn static_cost_vector(&self, network: &Network) -> Result<Option<DVector<f64>>, ScenarioError> {
        match &self.static_costs {
            None => Ok(None),
            Some(StaticCostConfig::Column { column }) => Ok(Some(match column {
                CostColumn::T0 => network.free_flow_times(),
                CostColumn::Length => network.lengths(),
            })),
            Some(StaticCostConfig::Values { values }) => {
                if values.len() != network.num_links() {
                    return Err(ScenarioError::CostLength {
                        got: values.len(),
                        expected: network.num_links(),
                    });
                }
                Ok(Some(DVector::from_column_slice(values)))
            }
        }
    }

    pub fn bpr_functions(&self, network: &Network) -> Option<Vec<BprFunction>> {
        self.bpr
            .as_ref()
            .map(|cfg| BprFunction::from_network(network, cfg.alpha, cfg.beta))
    }

    pub fn traveler_types(&self, network: &Network) -> Result<Vec<TravelerType>, ScenarioError> {
        if self.demands.is_empty() {
            return Err(ScenarioError::NoDemands);
        }
        self.demands
            .iter()
            .map(|d| {
                Ok(TravelerType {
                    demand: network::unit_demand(network, &d.origin, &d.destination)?,
                    q: d.q,
                })
            })
            .collect()
    }

    pub fn demand_vectors(&self, network: &Network) -> Result<Vec<DemandVector>, ScenarioError> {
        self.demands
            .iter()
            .map(|d| Ok(network::unit_demand(network, &d.origin, &d.destination)?))
            .collect()
    }
}
