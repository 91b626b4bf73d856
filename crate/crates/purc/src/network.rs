//! Directed network representation, incidence matrices, and demand encoding.
//!
//! Node and link order is taken verbatim from the input file and fixed for
//! the lifetime of a [`Network`]; every vector and matrix in the crate uses
//! that link order for its coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::linalg;

#[derive(Error, Debug)]
pub enum NetworkError {
    #[error("network has no nodes or no links")]
    Empty,
    #[error("duplicate link id `{0}`")]
    DuplicateLinkId(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),
    #[error("link `{link}` references unknown node `{node}`")]
    UnknownEndpoint { link: String, node: String },
    #[error("link `{0}` is a self loop")]
    SelfLoop(String),
    #[error("link `{link}` has non-positive {attribute} ({value})")]
    NonPositiveAttribute {
        link: String,
        attribute: &'static str,
        value: f64,
    },
    #[error("node `{0}` not found")]
    NodeNotFound(String),
    #[error("link `{0}` not found")]
    LinkNotFound(String),
    #[error("origin and destination are both `{0}`")]
    SameOriginDestination(String),
    #[error("reading network: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing network JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parsing network CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("CSV field `{field}` in row {row}: {message}")]
    CsvField {
        field: &'static str,
        row: usize,
        message: String,
    },
}

/// One directed link with its performance attributes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Link {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length: f64,
    pub t0: f64,
    pub capacity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkJson {
    nodes: Vec<serde_json::Value>,
    links: Vec<LinkJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinkJson {
    id: serde_json::Value,
    from: serde_json::Value,
    to: serde_json::Value,
    length: f64,
    t0: f64,
    capacity: f64,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Directed graph with ordered nodes and links.
///
/// Immutable after construction; the link order defines the coordinate
/// system of all flow and cost vectors.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<String>,
    links: Vec<Link>,
    node_index: HashMap<String, usize>,
    link_index: HashMap<String, usize>,
    /// Per-link (tail index, head index) in node order.
    endpoints: Vec<(usize, usize)>,
}

impl Network {
    pub fn new(nodes: Vec<String>, links: Vec<Link>) -> Result<Self, NetworkError> {
        if nodes.is_empty() || links.is_empty() {
            return Err(NetworkError::Empty);
        }
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.clone(), i).is_some() {
                return Err(NetworkError::DuplicateNodeId(n.clone()));
            }
        }
        let mut link_index = HashMap::with_capacity(links.len());
        let mut endpoints = Vec::with_capacity(links.len());
        for (j, l) in links.iter().enumerate() {
            if link_index.insert(l.id.clone(), j).is_some() {
                return Err(NetworkError::DuplicateLinkId(l.id.clone()));
            }
            let tail = *node_index
                .get(&l.from)
                .ok_or_else(|| NetworkError::UnknownEndpoint {
                    link: l.id.clone(),
                    node: l.from.clone(),
                })?;
            let head = *node_index
                .get(&l.to)
                .ok_or_else(|| NetworkError::UnknownEndpoint {
                    link: l.id.clone(),
                    node: l.to.clone(),
                })?;
            if tail == head {
                return Err(NetworkError::SelfLoop(l.id.clone()));
            }
            for (attribute, value) in [
                ("length", l.length),
                ("t0", l.t0),
                ("capacity", l.capacity),
            ] {
                if !(value > 0.0) {
                    return Err(NetworkError::NonPositiveAttribute {
                        link: l.id.clone(),
                        attribute,
                        value,
                    });
                }
            }
            endpoints.push((tail, head));
        }
        Ok(Network {
            nodes,
            links,
            node_index,
            link_index,
            endpoints,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, NetworkError> {
        let raw: NetworkJson = serde_json::from_str(text)?;
        let nodes = raw.nodes.iter().map(id_string).collect();
        let links = raw
            .links
            .into_iter()
            .map(|l| Link {
                id: id_string(&l.id),
                from: id_string(&l.from),
                to: id_string(&l.to),
                length: l.length,
                t0: l.t0,
                capacity: l.capacity,
            })
            .collect();
        Network::new(nodes, links)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, NetworkError> {
        Network::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Link-list CSV loader (header `id,from,to,length,t0,capacity`).
    ///
    /// Nodes are registered in order of first appearance, tail before head.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, NetworkError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut nodes: Vec<String> = Vec::new();
        let mut seen: HashMap<String, ()> = HashMap::new();
        let mut links = Vec::new();
        for (row, record) in rdr.deserialize::<Link>().enumerate() {
            let link = record?;
            for (field, value) in [("length", link.length), ("t0", link.t0)] {
                if !value.is_finite() {
                    return Err(NetworkError::CsvField {
                        field,
                        row: row + 2,
                        message: format!("not finite: {value}"),
                    });
                }
            }
            for node in [&link.from, &link.to] {
                if seen.insert(node.clone(), ()).is_none() {
                    nodes.push(node.clone());
                }
            }
            links.push(link);
        }
        Network::new(nodes, links)
    }

    pub fn from_csv_file(path: &Path) -> Result<Self, NetworkError> {
        Network::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "nodes": self.nodes,
            "links": self.links,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link_ids(&self) -> Vec<String> {
        self.links.iter().map(|l| l.id.clone()).collect()
    }

    pub fn node_id(&self, index: usize) -> &str {
        &self.nodes[index]
    }

    pub fn node_index(&self, id: &str) -> Result<usize, NetworkError> {
        self.node_index
            .get(id)
            .copied()
            .ok_or_else(|| NetworkError::NodeNotFound(id.to_string()))
    }

    pub fn link_index(&self, id: &str) -> Result<usize, NetworkError> {
        self.link_index
            .get(id)
            .copied()
            .ok_or_else(|| NetworkError::LinkNotFound(id.to_string()))
    }

    /// (tail, head) node indices of link `j`.
    pub fn endpoints(&self, j: usize) -> (usize, usize) {
        self.endpoints[j]
    }

    pub fn lengths(&self) -> DVector<f64> {
        DVector::from_iterator(self.links.len(), self.links.iter().map(|l| l.length))
    }

    pub fn free_flow_times(&self) -> DVector<f64> {
        DVector::from_iterator(self.links.len(), self.links.iter().map(|l| l.t0))
    }

    pub fn capacities(&self) -> DVector<f64> {
        DVector::from_iterator(self.links.len(), self.links.iter().map(|l| l.capacity))
    }

    /// Nodes reachable from `origin` along link directions, as a boolean mask.
    pub fn reachable_from(&self, origin: usize) -> Vec<bool> {
        let mut out_links: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (j, &(tail, _)) in self.endpoints.iter().enumerate() {
            out_links[tail].push(j);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![origin];
        seen[origin] = true;
        while let Some(v) = stack.pop() {
            for &j in &out_links[v] {
                let (_, head) = self.endpoints[j];
                if !seen[head] {
                    seen[head] = true;
                    stack.push(head);
                }
            }
        }
        seen
    }
}

/// Node-link incidence matrix in endpoint-list (sparse) form.
///
/// Column `j` has -1 at the tail of link `j` and +1 at its head. Dense
/// materialization is deferred to the SVD/pseudoinverse routines that
/// need it.
#[derive(Debug, Clone)]
pub struct IncidenceMatrix {
    num_nodes: usize,
    endpoints: Vec<(usize, usize)>,
}

impl IncidenceMatrix {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_links(&self) -> usize {
        self.endpoints.len()
    }

    pub fn endpoints(&self, j: usize) -> (usize, usize) {
        self.endpoints[j]
    }

    /// `A x`: net inflow at every node for link flows `x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.endpoints.len());
        let mut out = DVector::zeros(self.num_nodes);
        for (j, &(tail, head)) in self.endpoints.iter().enumerate() {
            out[tail] -= x[j];
            out[head] += x[j];
        }
        out
    }

    /// `A' eta`: per-link potential difference `eta_head - eta_tail`.
    pub fn apply_transpose(&self, eta: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(eta.len(), self.num_nodes);
        DVector::from_iterator(
            self.endpoints.len(),
            self.endpoints.iter().map(|&(tail, head)| eta[head] - eta[tail]),
        )
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.num_nodes, self.endpoints.len());
        for (j, &(tail, head)) in self.endpoints.iter().enumerate() {
            a[(tail, j)] = -1.0;
            a[(head, j)] = 1.0;
        }
        a
    }

    /// Dense submatrix keeping only the columns selected by `mask`.
    pub fn to_dense_columns(&self, mask: &[bool]) -> DMatrix<f64> {
        debug_assert_eq!(mask.len(), self.endpoints.len());
        let cols = mask.iter().filter(|&&m| m).count();
        let mut a = DMatrix::zeros(self.num_nodes, cols);
        let mut col = 0;
        for (j, &(tail, head)) in self.endpoints.iter().enumerate() {
            if mask[j] {
                a[(tail, col)] = -1.0;
                a[(head, col)] = 1.0;
                col += 1;
            }
        }
        a
    }
}

/// Unit demand: -1 at the origin node, +1 at the destination, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandVector {
    pub origin: usize,
    pub destination: usize,
    num_nodes: usize,
}

impl DemandVector {
    pub fn len(&self) -> usize {
        self.num_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.num_nodes == 0
    }

    pub fn to_dense(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.num_nodes);
        b[self.origin] = -1.0;
        b[self.destination] = 1.0;
        b
    }
}

/// Full-row-rank replacement `Cx = d` for the rank-deficient system `Ax = b`.
#[derive(Debug, Clone)]
pub struct ReducedConstraints {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub rank: usize,
}

/// Builds the node-link incidence matrix for `network`.
pub fn build_incidence(network: &Network) -> IncidenceMatrix {
    IncidenceMatrix {
        num_nodes: network.num_nodes(),
        endpoints: network.links().iter().enumerate().map(|(j, _)| network.endpoints(j)).collect(),
    }
}

/// Encodes one unit of demand from `origin` to `destination`.
pub fn unit_demand(
    network: &Network,
    origin: &str,
    destination: &str,
) -> Result<DemandVector, NetworkError> {
    if origin == destination {
        return Err(NetworkError::SameOriginDestination(origin.to_string()));
    }
    Ok(DemandVector {
        origin: network.node_index(origin)?,
        destination: network.node_index(destination)?,
        num_nodes: network.num_nodes(),
    })
}

/// Result of the directed-connectivity check.
#[derive(Debug, Clone)]
pub struct ConnectivityReport {
    /// True when every ordered node pair is joined by a directed path.
    pub strongly_connected: bool,
    /// Ordered (from, to) node-id pairs with no directed path.
    pub unreachable_pairs: Vec<(String, String)>,
}

impl fmt::Display for ConnectivityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.strongly_connected {
            write!(f, "strongly connected")
        } else {
            write!(
                f,
                "not strongly connected; {} unreachable ordered pair(s), e.g. {:?}",
                self.unreachable_pairs.len(),
                self.unreachable_pairs.first()
            )
        }
    }
}

/// Checks whether every ordered node pair is joined by a directed path.
///
/// Advisory: an isolated origin/destination is reported as an input error
/// at solve time, so a failed check here does not by itself invalidate a
/// network.
pub fn validate_connected(network: &Network) -> ConnectivityReport {
    let n = network.num_nodes();
    let mut unreachable_pairs = Vec::new();
    for origin in 0..n {
        let seen = network.reachable_from(origin);
        for (target, reached) in seen.iter().enumerate() {
            if target != origin && !reached {
                unreachable_pairs.push((
                    network.node_id(origin).to_string(),
                    network.node_id(target).to_string(),
                ));
            }
        }
    }
    ConnectivityReport {
        strongly_connected: unreachable_pairs.is_empty(),
        unreachable_pairs,
    }
}

/// True when a directed path exists from `demand.origin` to `demand.destination`.
pub fn od_reachable(network: &Network, demand: &DemandVector) -> bool {
    network.reachable_from(demand.origin)[demand.destination]
}

/// True when the network is connected ignoring link directions.
///
/// Networks with pure sink or source nodes fail the strong check while
/// remaining perfectly usable, so both notions are exposed and callers
/// pick the one their validation needs.
pub fn validate_weakly_connected(network: &Network) -> bool {
    let n = network.num_nodes();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..network.num_links() {
        let (tail, head) = network.endpoints(j);
        adjacency[tail].push(head);
        adjacency[head].push(tail);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Reduces `Ax = b` to an equivalent full-row-rank system `Cx = d`.
///
/// With the compact SVD `A = U_r D_r V_r'`, the reduction is
/// `C = D_r V_r' = U_r' A` and `d = U_r' b`. `U_r` comes from the
/// symmetric eigendecomposition of `A A'` (the left singular vectors),
/// with singular values `sigma = sqrt(lambda)` truncated at
/// `rcond * sigma_max`.
pub fn reduce_constraints(
    a: &IncidenceMatrix,
    b: &DemandVector,
    rcond: f64,
) -> ReducedConstraints {
    let dense = a.to_dense();
    let gram = &dense * dense.transpose();
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |acc, &l| acc.max(l));
    let cutoff = lambda_max * (rcond * rcond).max(256.0 * f64::EPSILON);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > cutoff)
        .collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let rank = order.len();
    let b_dense = b.to_dense();

    let mut c = DMatrix::zeros(rank, a.num_links());
    let mut d = DVector::zeros(rank);
    for (row, &i) in order.iter().enumerate() {
        let u_i = eig.eigenvectors.column(i);
        let c_row = u_i.transpose() * &dense;
        c.row_mut(row).copy_from(&c_row);
        d[row] = u_i.dot(&b_dense);
    }
    ReducedConstraints { c, d, rank }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn link(id: &str, from: &str, to: &str) -> Link {
        Link {
            id: id.to_string(),
            from: from.to_string(),
            to: to.to_string(),
            length: 1.0,
            t0: 1.0,
            capacity: 1.0,
        }
    }

    fn names(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    /// 5 nodes, 8 links including the antiparallel pair 2-3 / 3-2.
    pub(crate) fn congested_test_network() -> Network {
        Network::new(
            names(&["1", "2", "3", "4", "5"]),
            vec![
                link("1-2", "1", "2"),
                link("1-3", "1", "3"),
                link("2-3", "2", "3"),
                link("2-4", "2", "4"),
                link("2-5", "2", "5"),
                link("3-2", "3", "2"),
                link("3-4", "3", "4"),
                link("3-5", "3", "5"),
            ],
        )
        .unwrap()
    }

    /// 5 nodes, 7 links; origin 1, destination 3; not strongly connected.
    pub(crate) fn complement_test_network() -> Network {
        Network::new(
            names(&["1", "2", "3", "4", "5"]),
            vec![
                link("1-2", "1", "2"),
                link("1-5", "1", "5"),
                link("2-3", "2", "3"),
                link("2-4", "2", "4"),
                link("4-3", "4", "3"),
                link("5-4", "5", "4"),
                link("5-3", "5", "3"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_link_incidence() {
        let net = Network::new(names(&["1", "2"]), vec![link("a", "1", "2")]).unwrap();
        let a = build_incidence(&net).to_dense();
        assert_eq!(a, DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]));
    }

    #[test]
    fn complement_network_incidence_column() {
        let net = complement_test_network();
        let a = build_incidence(&net);
        let dense = a.to_dense();
        assert_eq!(dense.nrows(), 5);
        assert_eq!(dense.ncols(), 7);
        let j = net.link_index("5-4").unwrap();
        assert_eq!(dense[(4, j)], -1.0);
        assert_eq!(dense[(3, j)], 1.0);
        for i in [0, 1, 2] {
            assert_eq!(dense[(i, j)], 0.0);
        }
    }

    #[test]
    fn antiparallel_columns_are_negatives() {
        let net = congested_test_network();
        let a = build_incidence(&net).to_dense();
        let j23 = net.link_index("2-3").unwrap();
        let j32 = net.link_index("3-2").unwrap();
        assert_eq!(a.column(j23), -a.column(j32));
    }

    #[test]
    fn incidence_columns_sum_to_zero() {
        for net in [congested_test_network(), complement_test_network()] {
            let a = build_incidence(&net).to_dense();
            for j in 0..a.ncols() {
                assert_eq!(a.column(j).sum(), 0.0);
            }
        }
    }

    #[test]
    fn unit_demand_patterns() {
        let net = congested_test_network();
        let b = unit_demand(&net, "1", "4").unwrap().to_dense();
        assert_eq!(b.as_slice(), &[-1.0, 0.0, 0.0, 1.0, 0.0]);

        let net44 = complement_test_network();
        let b13 = unit_demand(&net44, "1", "3").unwrap().to_dense();
        assert_eq!(b13.as_slice(), &[-1.0, 0.0, 1.0, 0.0, 0.0]);

        let swapped = unit_demand(&net44, "3", "1").unwrap().to_dense();
        assert_eq!(swapped, -b13);
    }

    #[test]
    fn unit_demand_errors() {
        let net = congested_test_network();
        assert!(matches!(
            unit_demand(&net, "1", "1"),
            Err(NetworkError::SameOriginDestination(_))
        ));
        assert!(matches!(
            unit_demand(&net, "1", "99"),
            Err(NetworkError::NodeNotFound(_))
        ));
    }

    #[test]
    fn duplicate_and_unknown_links_rejected() {
        let nodes = names(&["1", "2"]);
        assert!(matches!(
            Network::new(nodes.clone(), vec![link("a", "1", "2"), link("a", "2", "1")]),
            Err(NetworkError::DuplicateLinkId(_))
        ));
        assert!(matches!(
            Network::new(nodes.clone(), vec![link("a", "1", "7")]),
            Err(NetworkError::UnknownEndpoint { .. })
        ));
        assert!(matches!(
            Network::new(nodes, vec![link("a", "1", "1")]),
            Err(NetworkError::SelfLoop(_))
        ));
    }

    /// Floyd-Warshall transitive closure as an independent reachability oracle.
    fn closure_oracle(net: &Network) -> Vec<Vec<bool>> {
        let n = net.num_nodes();
        let mut reach = vec![vec![false; n]; n];
        for v in 0..n {
            reach[v][v] = true;
        }
        for j in 0..net.num_links() {
            let (t, h) = net.endpoints(j);
            reach[t][h] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        reach
    }

    #[test]
    fn connectivity_check_against_closure_oracle() {
        for net in [congested_test_network(), complement_test_network()] {
            let report = validate_connected(&net);
            let oracle = closure_oracle(&net);
            let mut expected = Vec::new();
            for i in 0..net.num_nodes() {
                for j in 0..net.num_nodes() {
                    if i != j && !oracle[i][j] {
                        expected.push((net.node_id(i).to_string(), net.node_id(j).to_string()));
                    }
                }
            }
            let mut got = report.unreachable_pairs.clone();
            got.sort();
            expected.sort();
            assert_eq!(got, expected);
            assert_eq!(report.strongly_connected, expected.is_empty());
        }

        // Nodes 4 and 5 are sinks, so the strong check fails while the
        // weak one passes and every demand of interest stays solvable.
        let congested = congested_test_network();
        assert!(!validate_connected(&congested).strongly_connected);
        assert!(validate_weakly_connected(&congested));
        for dest in ["4", "5"] {
            let b = unit_demand(&congested, "1", dest).unwrap();
            assert!(od_reachable(&congested, &b));
        }

        let weak = complement_test_network();
        let report = validate_connected(&weak);
        assert!(!report.strongly_connected);
        assert!(validate_weakly_connected(&weak));
        assert!(report
            .unreachable_pairs
            .contains(&("3".to_string(), "1".to_string())));
        let b = unit_demand(&weak, "1", "3").unwrap();
        assert!(od_reachable(&weak, &b));
    }

    #[test]
    fn two_isolated_components_detected() {
        let net = Network::new(
            names(&["1", "2", "3", "4"]),
            vec![link("a", "1", "2"), link("b", "3", "4")],
        )
        .unwrap();
        assert!(!validate_connected(&net).strongly_connected);
    }

    #[test]
    fn reduce_single_link() {
        let net = Network::new(names(&["1", "2"]), vec![link("a", "1", "2")]).unwrap();
        let a = build_incidence(&net);
        let b = unit_demand(&net, "1", "2").unwrap();
        let red = reduce_constraints(&a, &b, 1e-10);
        assert_eq!(red.rank, 1);
        let x = DVector::from_element(1, 1.0);
        assert_abs_diff_eq!((&red.c * &x - &red.d).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn reduced_rank_is_nodes_minus_one_when_connected() {
        let net = congested_test_network();
        let a = build_incidence(&net);
        let b = unit_demand(&net, "1", "4").unwrap();
        let red = reduce_constraints(&a, &b, 1e-10);
        assert_eq!(red.rank, net.num_nodes() - 1);
        // C C' must be invertible: all its eigenvalues bounded away from zero.
        let cct = &red.c * red.c.transpose();
        let eig = cct.symmetric_eigenvalues();
        assert!(eig.min() > 1e-10);
    }

    #[test]
    fn reduced_system_equivalent_to_original() {
        let net = congested_test_network();
        let a = build_incidence(&net);
        let b = unit_demand(&net, "1", "4").unwrap();
        let red = reduce_constraints(&a, &b, 1e-10);
        let b_dense = b.to_dense();
        let a_dense = a.to_dense();

        // A feasible point: route the unit on 1->2->4.
        let mut x0 = DVector::zeros(net.num_links());
        x0[net.link_index("1-2").unwrap()] = 1.0;
        x0[net.link_index("2-4").unwrap()] = 1.0;
        assert_abs_diff_eq!((&a_dense * &x0 - &b_dense).norm(), 0.0, epsilon = 1e-12);

        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut rand_unit = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..100 {
            let noise = DVector::from_fn(net.num_links(), |_, _| rand_unit());
            // Project noise onto null(A) to stay feasible.
            let a_pinv = linalg::pinv(&a_dense, 1e-10);
            let feasible = &x0 + &noise - &a_pinv * (&a_dense * &noise);
            let cr = (&red.c * &feasible - &red.d).amax();
            let ar = (&a_dense * &feasible - &b_dense).amax();
            assert!(cr <= 1e-9 && ar <= 1e-9, "cr={cr}, ar={ar}");

            let infeasible = &x0 + &noise;
            let cr = (&red.c * &infeasible - &red.d).amax();
            let ar = (&a_dense * &infeasible - &b_dense).amax();
            assert_eq!(cr <= 1e-9, ar <= 1e-9);
        }
    }

    #[test]
    fn csv_and_json_loaders_agree() {
        let csv_text = "id,from,to,length,t0,capacity\n1-2,1,2,1.5,3.0,30.0\n2-3,2,3,2.0,1.0,15.0\n";
        let from_csv = Network::from_csv_reader(csv_text.as_bytes()).unwrap();
        let json_text = r#"{
            "nodes": ["1", "2", "3"],
            "links": [
                {"id": "1-2", "from": "1", "to": "2", "length": 1.5, "t0": 3.0, "capacity": 30.0},
                {"id": "2-3", "from": "2", "to": "3", "length": 2.0, "t0": 1.0, "capacity": 15.0}
            ]
        }"#;
        let from_json = Network::from_json_str(json_text).unwrap();
        assert_eq!(from_csv.nodes(), from_json.nodes());
        assert_eq!(from_csv.links(), from_json.links());
    }
}
