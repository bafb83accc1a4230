use dynkin::chaos::{iid_copies, reference_solution};
use dynkin::drbsde::SolverOptions;
use dynkin::lattice::{build_tree, JumpSpec, TimeGrid};
use dynkin::meanfield::{fixed_point, mean_field_value_and_saddle, FixedPointConfig};
use dynkin::measure::{wasserstein_p, MeasureSlice};
use dynkin::particles::{solve_particle_system, ParticleConfig};
use dynkin::scenarios::ScenarioRegistry;

#[test]
fn insurance_tree_game_is_consistent() {
    let reg = ScenarioRegistry::with_builtins();
    let c = reg.build("insurance", &serde_json::Value::Null).unwrap();
    let l = build_tree(TimeGrid::new(1.0, 2).unwrap(), JumpSpec::new(vec![-0.2], vec![0.5]).unwrap()).unwrap();
    let opts = SolverOptions::default();
    let (mf, _, _, rep) = mean_field_value_and_saddle(&l, &c, &FixedPointConfig::default(), &opts, 64, 1).unwrap();
    assert!(mf.sol.invariant_residuals().holds(1e-10));
    assert!(rep.saddle.unwrap().holds(1e-9));
    assert!((rep.brute_force_upper.unwrap() - mf.root()).abs() < 1e-10);
    assert!((rep.brute_force_lower.unwrap() - mf.root()).abs() < 1e-10);
}

#[test]
fn particle_average_tracks_the_mean_field_value() {
    let reg = ScenarioRegistry::with_builtins();
    let c = reg.build("chaos_meanfield", &serde_json::Value::Null).unwrap();
    let grid = TimeGrid::new(1.0, 3).unwrap();
    let jumps = JumpSpec::new(vec![0.5], vec![0.5]).unwrap();
    let tree = build_tree(grid, jumps.clone()).unwrap();
    let exact = fixed_point(&tree, &c, &FixedPointConfig::default(), &SolverOptions::default()).unwrap();
    let cfg = ParticleConfig {
        n: 32,
        paths: 256,
        seed: 4,
        ..Default::default()
    };
    let sys = solve_particle_system(grid, &jumps, &c, &cfg, None).unwrap();
    let roots = sys.roots();
    let mean = roots.iter().sum::<f64>() / roots.len() as f64;
    assert!((mean - exact.root()).abs() < 0.05, "{mean} vs {}", exact.root());
}

#[test]
fn iid_copies_follow_the_reference_law() {
    let reg = ScenarioRegistry::with_builtins();
    let c = reg.build("chaos_meanfield", &serde_json::Value::Null).unwrap();
    let grid = TimeGrid::new(1.0, 3).unwrap();
    let jumps = JumpSpec::new(vec![0.5], vec![0.5]).unwrap();
    let opts = SolverOptions::default();
    let (_, mf) = reference_solution(grid, &jumps, &c, 4096, 1, &FixedPointConfig::default(), &opts).unwrap();
    let cfg = ParticleConfig {
        n: 200,
        paths: 256,
        seed: 8,
        ..Default::default()
    };
    let sys = solve_particle_system(grid, &jumps, &c, &cfg, None).unwrap();
    let copies = iid_copies(&mf.flow, &sys, &c, &opts).unwrap();
    // marginals are atomic on the lattice, so compare in W_1 rather than KS
    for m in 1..=3 {
        let draws = MeasureSlice::uniform(copies.iter().map(|s| s.y[m][0]).collect()).unwrap();
        let w = wasserstein_p(&draws, mf.flow.slice(m), 1.0).unwrap();
        assert!(w < 0.15, "step {m}: W_1 = {w}");
    }
}
