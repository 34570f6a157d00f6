use fademac::allocation::{solve_centralized, AllocationProblem, AllocationState, Tolerances};
use fademac::distributed::{Simulation, StepSizes};
use fademac::io::{fixtures, load_network};
use fademac::monte_carlo::{mc_mac_outage, mc_network_outage, McConfig};
use fademac::network::combine_independent;

fn flat(st: &AllocationState) -> Vec<f64> {
    [&[st.r.clone()][..], &st.f, &st.rho, &st.w, &st.phi, &st.mu]
        .into_iter()
        .flatten()
        .flatten()
        .copied()
        .collect()
}

#[test]
fn every_fixture_optimum_is_an_equilibrium() {
    for (name, text) in fixtures::ALL {
        let prob = AllocationProblem::new(load_network(text).unwrap());
        let sol = solve_centralized(&prob, &Tolerances::default()).unwrap();
        let steps = StepSizes::random(&prob, 5, 0.1, 0.01).unwrap();
        let mut sim = Simulation::new(&prob);
        sim.load_state(&sol.state, &steps);
        let mut prev = flat(&sim.state());
        for round in 0..1000 {
            sim.step(&steps).unwrap();
            let now = flat(&sim.state());
            let drift = prev.iter().zip(&now).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(drift < 1e-9, "{name} round {round}: drift {drift}");
            prev = now;
        }
    }
}

#[test]
fn network_mc_matches_product_of_receiver_mc() {
    let net = load_network(fixtures::TWELVE_NODE).unwrap();
    let rates: Vec<f64> = (0..net.links().len()).map(|e| 0.02 + 0.01 * (e % 5) as f64).collect();
    let cfg = McConfig::new(400_000, 21);
    let whole = mc_network_outage(&net, &rates, &cfg).unwrap();
    let mut per_node = Vec::new();
    let mut errors = Vec::new();
    for (slot, k) in net.receivers().enumerate() {
        let id = net.nodes()[k].id;
        let est = mc_mac_outage(&net.mac_of(id).unwrap(), &net.local_rates(k, &rates).unwrap(), &cfg.derived(100 + slot as u64));
        per_node.push(est.probability);
        errors.push(est.std_error);
    }
    let combined = combine_independent(&per_node);
    // delta method: d(1 - prod(1 - p_j)) / dp_j = prod_{i != j} (1 - p_i)
    let var: f64 = (0..per_node.len())
        .map(|j| {
            let others: f64 = (0..per_node.len()).filter(|&i| i != j).map(|i| 1.0 - per_node[i]).product();
            (others * errors[j]).powi(2)
        })
        .sum();
    let se = (whole.std_error.powi(2) + var).sqrt();
    assert!(
        (whole.probability - combined).abs() <= 4.0 * se,
        "{} vs {combined} (se {se})",
        whole.probability
    );
    assert!(combined > 0.05 && combined < 0.95, "{combined}");
}
