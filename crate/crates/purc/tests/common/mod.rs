//! Shared fixtures and independent oracles for the integration suites.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use purc::equilibrium::{BprFunction, EquilibriumOptions, EquilibriumProblem, TravelerType};
use purc::network::{unit_demand, Link, Network};
use purc::perturbation::{PerturbationFamily, PerturbationSpec};
use purc::solver::{solve_purc, PurcProblem, PurcSolution, SolverOptions};

pub fn make_link(id: &str, from: &str, to: &str, t0: f64, capacity: f64) -> Link {
    Link {
        id: id.to_string(),
        from: from.to_string(),
        to: to.to_string(),
        length: 1.0,
        t0,
        capacity,
    }
}

pub fn make_network(nodes: &[&str], links: Vec<Link>) -> Network {
    Network::new(nodes.iter().map(|s| s.to_string()).collect(), links).unwrap()
}

/// 7-link two-route network whose cross effects include complements:
/// origin 1, destination 3, routes 1-2-3, 1-2-4-3, 1-5-4-3, 1-5-3.
pub fn complement_network() -> Network {
    make_network(
        &["1", "2", "3", "4", "5"],
        vec![
            make_link("1-2", "1", "2", 1.0, 1.0),
            make_link("1-5", "1", "5", 1.0, 1.0),
            make_link("2-3", "2", "3", 1.0, 1.0),
            make_link("2-4", "2", "4", 1.0, 1.0),
            make_link("4-3", "4", "3", 1.0, 1.0),
            make_link("5-4", "5", "4", 1.0, 1.0),
            make_link("5-3", "5", "3", 1.0, 1.0),
        ],
    )
}

/// 5-node, 8-link congested network with two sink destinations.
pub fn congested_network() -> Network {
    make_network(
        &["1", "2", "3", "4", "5"],
        vec![
            make_link("1-2", "1", "2", 3.0, 30.0),
            make_link("1-3", "1", "3", 5.0, 30.0),
            make_link("2-3", "2", "3", 1.0, 15.0),
            make_link("2-4", "2", "4", 5.0, 15.0),
            make_link("2-5", "2", "5", 6.0, 15.0),
            make_link("3-2", "3", "2", 1.0, 15.0),
            make_link("3-4", "3", "4", 4.0, 15.0),
            make_link("3-5", "3", "5", 4.0, 15.0),
        ],
    )
}

/// The congested network's equilibrium setup: demands 15 (to node 4) and
/// 20 (to node 5), entropic perturbation with unit scales, BPR(0.15, 4).
pub fn congested_problem(network: &Network) -> EquilibriumProblem<'_> {
    EquilibriumProblem {
        network,
        types: vec![
            TravelerType {
                demand: unit_demand(network, "1", "4").unwrap(),
                q: 15.0,
            },
            TravelerType {
                demand: unit_demand(network, "1", "5").unwrap(),
                q: 20.0,
            },
        ],
        perturbation: PerturbationSpec::uniform(
            PerturbationFamily::Entropic,
            1.0,
            network.num_links(),
        ),
        cost_functions: BprFunction::from_network(network, 0.15, 4.0),
        options: EquilibriumOptions::default(),
    }
}

/// A random digraph with a guaranteed origin-to-destination path.
///
/// Nodes `n0..n{k-1}`, origin `n0`, destination last. A shuffled chain
/// provides the path; extra random links (parallel duplicates allowed)
/// fill in up to the requested link count.
pub fn random_network(rng: &mut ChaCha8Rng, num_nodes: usize, num_links: usize) -> Network {
    assert!(num_nodes >= 2);
    assert!(num_links >= num_nodes - 1);
    let nodes: Vec<String> = (0..num_nodes).map(|i| format!("n{i}")).collect();
    let mut interior: Vec<usize> = (1..num_nodes - 1).collect();
    interior.shuffle(rng);
    let mut chain = vec![0];
    chain.extend(interior);
    chain.push(num_nodes - 1);

    let mut links = Vec::new();
    for w in chain.windows(2) {
        links.push(make_link(
            &format!("l{}", links.len()),
            &format!("n{}", w[0]),
            &format!("n{}", w[1]),
            1.0,
            1.0,
        ));
    }
    while links.len() < num_links {
        let a = rng.random_range(0..num_nodes);
        let b = rng.random_range(0..num_nodes);
        if a == b {
            continue;
        }
        links.push(make_link(
            &format!("l{}", links.len()),
            &format!("n{a}"),
            &format!("n{b}"),
            1.0,
            1.0,
        ));
    }
    make_network(
        &nodes.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        links,
    )
}

pub fn random_family(rng: &mut ChaCha8Rng) -> PerturbationFamily {
    if rng.random_bool(0.5) {
        PerturbationFamily::Entropic
    } else {
        PerturbationFamily::Quadratic
    }
}

pub fn random_spec(rng: &mut ChaCha8Rng, num_links: usize) -> PerturbationSpec {
    let family = random_family(rng);
    let scales: Vec<f64> = (0..num_links).map(|_| rng.random_range(0.5..2.0)).collect();
    PerturbationSpec::new(family, scales).unwrap()
}

pub fn random_costs(rng: &mut ChaCha8Rng, num_links: usize) -> DVector<f64> {
    DVector::from_iterator(num_links, (0..num_links).map(|_| rng.random_range(0.5..2.5)))
}

pub fn tight_options() -> SolverOptions {
    let mut options = SolverOptions::default();
    options.feasibility_tol = 1e-12;
    options
}

/// Solves a random instance whose optimum stays clear of the activation
/// boundary (margin on both flows and reduced costs), resampling costs and
/// topology as needed.
pub struct InteriorInstance {
    pub network: Network,
    pub costs: DVector<f64>,
    pub spec: PerturbationSpec,
    pub demand_scale: f64,
    pub solution: PurcSolution,
}

pub fn sample_interior_instance(
    rng: &mut ChaCha8Rng,
    min_links: usize,
    max_links: usize,
    boundary_margin: f64,
) -> InteriorInstance {
    loop {
        let num_nodes = rng.random_range(3..9);
        let span = min_links.max(num_nodes - 1);
        let num_links = rng.random_range(span..=max_links.max(span));
        let network = random_network(rng, num_nodes, num_links);
        let spec = random_spec(rng, network.num_links());
        let demand_scale = rng.random_range(1.0..4.0);
        'costs: for _ in 0..40 {
            let costs = random_costs(rng, network.num_links());
            let demand = unit_demand(&network, "n0", &format!("n{}", num_nodes - 1)).unwrap();
            let mut problem =
                PurcProblem::new(&network, costs.clone(), demand, spec.clone())
                    .with_demand_scale(demand_scale);
            problem.options = tight_options();
            let solution = match solve_purc(&problem) {
                Ok(s) => s,
                Err(_) => continue 'costs,
            };
            if purc::sensitivity::boundary_check(&solution, boundary_margin).near_boundary() {
                continue 'costs;
            }
            return InteriorInstance {
                network,
                costs,
                spec,
                demand_scale,
                solution,
            };
        }
    }
}

/// Re-solves an instance at shifted costs (oracle side of the
/// finite-difference comparisons).
pub fn resolve_at(instance: &InteriorInstance, costs: DVector<f64>) -> PurcSolution {
    let demand = unit_demand(
        &instance.network,
        "n0",
        &format!("n{}", instance.network.num_nodes() - 1),
    )
    .unwrap();
    let mut problem = PurcProblem::new(&instance.network, costs, demand, instance.spec.clone())
        .with_demand_scale(instance.demand_scale);
    problem.options = tight_options();
    solve_purc(&problem).expect("finite-difference re-solve")
}

/// Central-difference Jacobian column `d x* / d c_j` by re-solving.
pub fn fd_jacobian_column(instance: &InteriorInstance, j: usize, h: f64) -> DVector<f64> {
    let mut up = instance.costs.clone();
    up[j] += h;
    let mut down = instance.costs.clone();
    down[j] -= h;
    (resolve_at(instance, up).flows - resolve_at(instance, down).flows) / (2.0 * h)
}

/// Independent projector oracle: the orthogonal projection onto
/// `span(columns)` computed from the Gram matrix.
pub fn span_projector(columns: &[DVector<f64>]) -> DMatrix<f64> {
    let n = columns[0].len();
    let k = columns.len();
    let mut v = DMatrix::zeros(n, k);
    for (i, col) in columns.iter().enumerate() {
        v.set_column(i, col);
    }
    let gram = v.transpose() * &v;
    let gram_inv = gram.try_inverse().expect("independent spanning set");
    &v * gram_inv * v.transpose()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
