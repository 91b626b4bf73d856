mod common;
use common::*;
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use purc::equilibrium::{solve_equilibrium, BprFunction, EquilibriumOptions, EquilibriumProblem, TravelerType};
use purc::network::unit_demand;
use purc::perturbation::{PerturbationFamily, PerturbationSpec};

fn three_link_problem(
    network: &purc::network::Network,
    capacities: [f64; 3],
) -> EquilibriumProblem<'_> {
    let mut cost_functions = BprFunction::from_network(network, 0.15, 4.0);
    for (f, kappa) in cost_functions.iter_mut().zip(capacities) {
        f.capacity = kappa;
    }
    EquilibriumProblem {
        network,
        types: vec![TravelerType {
            demand: unit_demand(network, "1", "3").unwrap(),
            q: 12.0,
        }],
        perturbation: PerturbationSpec::uniform(PerturbationFamily::Entropic, 1.0, 3),
        cost_functions,
        options: EquilibriumOptions::default(),
    }
}

#[test]
fn find_failing_sample() {
    let network = make_network(
        &["1", "2", "3"],
        vec![
            make_link("1-2", "1", "2", 2.0, 10.0),
            make_link("2-3", "2", "3", 2.0, 10.0),
            make_link("1-3", "1", "3", 5.0, 15.0),
        ],
    );
    let base_capacities = [10.0f64, 10.0, 15.0];
    let cv = 0.30;
    let mut failures = 0;
    for i in 0..100_000usize {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0900_0000 + i as u64);
        let mut kappas = [0.0f64; 3];
        for (k, &mu) in kappas.iter_mut().zip(&base_capacities) {
            let normal = rand_distr::Normal::new(mu, cv * mu).unwrap();
            *k = loop {
                let draw: f64 = normal.sample(&mut rng);
                if draw > 0.0 { break draw; }
            };
        }
        let problem = three_link_problem(&network, kappas);
        if let Err(e) = solve_equilibrium(&problem) {
            failures += 1;
            if failures <= 5 {
                println!("sample {i} kappas {kappas:?} -> {e}");
            }
        }
    }
    println!("total failures: {failures}");
}
