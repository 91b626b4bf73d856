//! Report emission: labeled CSV matrices and self-contained JSON solution
//! documents.
//!
//! Output is byte-deterministic for fixed input: floats print through
//! Rust's shortest round-trip formatting, undefined entries print as `-`,
//! rows and columns follow link order, and JSON objects serialize with
//! sorted keys. Timings never enter report files (they go to the log).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use crate::equilibrium::EquilibriumSolution;
use crate::network::{Link, Network, NetworkError};
use crate::perturbation::PerturbationSpec;
use crate::solver::PurcSolution;

/// Shortest round-trip float formatting; `-` for undefined entries.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v}")
    }
}

/// Writes a labeled matrix as CSV: header `corner,col_ids...`, one row per
/// row id. Deterministic bytes for fixed input.
pub fn emit_table<W: Write>(
    mut out: W,
    corner: &str,
    row_ids: &[String],
    col_ids: &[String],
    matrix: &DMatrix<f64>,
) -> io::Result<()> {
    assert_eq!(matrix.nrows(), row_ids.len(), "row label count");
    assert_eq!(matrix.ncols(), col_ids.len(), "column label count");
    write!(out, "{corner}")?;
    for id in col_ids {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    for (r, id) in row_ids.iter().enumerate() {
        write!(out, "{id}")?;
        for c in 0..matrix.ncols() {
            write!(out, ",{}", fmt_float(matrix[(r, c)]))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn emit_table_file(
    path: &Path,
    corner: &str,
    row_ids: &[String],
    col_ids: &[String],
    matrix: &DMatrix<f64>,
) -> io::Result<()> {
    let file = std::fs::File::create(path)?;
    emit_table(io::BufWriter::new(file), corner, row_ids, col_ids, matrix)
}

/// Writes a per-row record table (header plus stringly-typed cells).
pub fn emit_records<W: Write>(
    mut out: W,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn emit_records_file(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> io::Result<()> {
    let file = std::fs::File::create(path)?;
    emit_records(io::BufWriter::new(file), header, rows)
}

/// Serializable network document (same schema as the network input file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub nodes: Vec<String>,
    pub links: Vec<Link>,
}

impl NetworkDoc {
    pub fn from_network(network: &Network) -> Self {
        NetworkDoc {
            nodes: network.nodes().to_vec(),
            links: network.links().to_vec(),
        }
    }

    pub fn to_network(&self) -> Result<Network, NetworkError> {
        Network::new(self.nodes.clone(), self.links.clone())
    }
}

/// Self-contained solved-program document: everything the sensitivity
/// subcommands need to run without re-solving.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub network: NetworkDoc,
    pub origin: String,
    pub destination: String,
    pub demand_scale: f64,
    pub perturbation: PerturbationSpec,
    pub costs: Vec<f64>,
    pub flows: Vec<f64>,
    pub duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub active: Vec<bool>,
    pub objective: f64,
    /// Optimal value as a function of minus-costs: `-objective`.
    pub value: f64,
    pub feasibility_residual: f64,
    pub stationarity_residual: f64,
    pub iterations: usize,
}

impl SolutionFile {
    pub fn new(network: &Network, solution: &PurcSolution, spec: &PerturbationSpec) -> Self {
        SolutionFile {
            network: NetworkDoc::from_network(network),
            origin: network.node_id(solution.origin).to_string(),
            destination: network.node_id(solution.destination).to_string(),
            demand_scale: solution.demand_scale,
            perturbation: spec.clone(),
            costs: solution.costs.as_slice().to_vec(),
            flows: solution.flows.as_slice().to_vec(),
            duals: solution.duals.as_slice().to_vec(),
            reduced_costs: solution.reduced_costs.as_slice().to_vec(),
            active: solution.active.clone(),
            objective: solution.objective,
            value: -solution.objective,
            feasibility_residual: solution.feasibility_residual,
            stationarity_residual: solution.stationarity_residual,
            iterations: solution.iterations,
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)?;
        writeln!(writer)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Rebuilds the in-memory solution and its network.
    pub fn restore(&self) -> Result<(Network, PurcSolution), NetworkError> {
        let network = self.network.to_network()?;
        let origin = network.node_index(&self.origin)?;
        let destination = network.node_index(&self.destination)?;
        let solution = PurcSolution {
            flows: DVector::from_column_slice(&self.flows),
            duals: DVector::from_column_slice(&self.duals),
            reduced_costs: DVector::from_column_slice(&self.reduced_costs),
            active: self.active.clone(),
            objective: self.objective,
            feasibility_residual: self.feasibility_residual,
            stationarity_residual: self.stationarity_residual,
            iterations: self.iterations,
            costs: DVector::from_column_slice(&self.costs),
            origin,
            destination,
            demand_scale: self.demand_scale,
        };
        Ok((network, solution))
    }
}

/// Per-type block of an equilibrium document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumTypeDoc {
    pub origin: String,
    pub destination: String,
    pub q: f64,
    pub flows: Vec<f64>,
    pub duals: Vec<f64>,
    pub active: Vec<bool>,
    pub iterations: usize,
}

/// Equilibrium report document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumFile {
    pub network: NetworkDoc,
    pub costs: Vec<f64>,
    pub aggregate_flows: Vec<f64>,
    pub types: Vec<EquilibriumTypeDoc>,
    pub residual: f64,
    pub cost_residual: f64,
    pub outer_iterations: usize,
    pub total_inner_iterations: usize,
    pub converged: bool,
}

impl EquilibriumFile {
    pub fn new(network: &Network, eq: &EquilibriumSolution, converged: bool) -> Self {
        EquilibriumFile {
            network: NetworkDoc::from_network(network),
            costs: eq.costs.as_slice().to_vec(),
            aggregate_flows: eq.aggregate_flows.as_slice().to_vec(),
            types: eq
                .per_type
                .iter()
                .zip(&eq.weights)
                .map(|(s, &q)| EquilibriumTypeDoc {
                    origin: network.node_id(s.origin).to_string(),
                    destination: network.node_id(s.destination).to_string(),
                    q,
                    flows: s.flows.as_slice().to_vec(),
                    duals: s.duals.as_slice().to_vec(),
                    active: s.active.clone(),
                    iterations: s.iterations,
                })
                .collect(),
            residual: eq.residual,
            cost_residual: eq.cost_residual,
            outer_iterations: eq.outer_iterations,
            total_inner_iterations: eq.total_inner_iterations,
            converged,
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)?;
        writeln!(writer)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Cost-perturbation document for directional sensitivities: either a
/// dense per-link vector or a sparse id-to-value map.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaFile {
    #[serde(default)]
    pub dense: Option<Vec<f64>>,
    #[serde(default)]
    pub by_link: Option<BTreeMap<String, f64>>,
}

impl DeltaFile {
    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_vector(&self, network: &Network) -> Result<DVector<f64>, NetworkError> {
        let m = network.num_links();
        match (&self.dense, &self.by_link) {
            (Some(values), _) => {
                let mut v = DVector::zeros(m);
                for (j, &value) in values.iter().take(m).enumerate() {
                    v[j] = value;
                }
                Ok(v)
            }
            (None, Some(map)) => {
                let mut v = DVector::zeros(m);
                for (id, &value) in map {
                    v[network.link_index(id)?] = value;
                }
                Ok(v)
            }
            (None, None) => Ok(DVector::zeros(m)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_bytes_are_deterministic() {
        let m = DMatrix::<f64>::identity(2, 2);
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut first = Vec::new();
        emit_table(&mut first, "J", &ids, &ids, &m).unwrap();
        let text = String::from_utf8(first.clone()).unwrap();
        assert_eq!(text, "J,a,b\na,1,0\nb,0,1\n");
        let mut second = Vec::new();
        emit_table(&mut second, "J", &ids, &ids, &m).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn nan_prints_as_dash() {
        let mut m = DMatrix::<f64>::zeros(1, 2);
        m[(0, 1)] = f64::NAN;
        let ids = vec!["x".to_string()];
        let cols = vec!["c1".to_string(), "c2".to_string()];
        let mut out = Vec::new();
        emit_table(&mut out, "T", &ids, &cols, &m).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "T,c1,c2\nx,0,-\n");
    }
}
