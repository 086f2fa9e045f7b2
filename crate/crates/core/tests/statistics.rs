//! Monte Carlo checks of the samplers and estimators against exact values.

use integrator_lab::experiments::{OperatorConfig, StepConfig};
use integrator_lab::localtime::{
    box_local_time, epsilon_sweep, moment_mc, mollified_local_time, u_integrated_moment_mc, PathSource,
    DEFAULT_REFINEMENT, DEFAULT_SCHEDULE,
};
use integrator_lab::quadrature::{
    bridge_moment_closed_form, level_integrated_moment_via_quadrature, wiener_moment_closed_form, RunningStats,
};
use integrator_lab::sampler::{integrator_inequality, integrator_inequality_mc, sample_noise_stream, supremum_comparison, IntegratorSampler, PathSample};
use integrator_lab::{Grid, Operator};
use rand::{Rng, SeedableRng};

fn shipped(grid: Grid) -> Vec<Operator> {
    let distortion = OperatorConfig::CosineDiagonal { values: vec![1.0, 0.6, 1.4, 0.8], rest: 1.0 };
    let half_step = OperatorConfig::ComplementProjection {
        kernel: vec![StepConfig { breaks: vec![0.0, 0.5, 1.0], levels: vec![1.0, -1.0] }],
    };
    [
        OperatorConfig::identity(),
        OperatorConfig::bridge(),
        OperatorConfig::compose(distortion.clone(), OperatorConfig::bridge()),
        OperatorConfig::compose(distortion, half_step),
    ]
    .iter()
    .map(|c| c.build(grid).unwrap())
    .collect()
}

fn within(est: f64, se: f64, oracle: f64, z: f64) -> bool {
    (est - oracle).abs() <= z * se + 1e-9 * oracle.abs()
}

#[test]
fn empirical_covariance_matches_formula() {
    let grid = Grid::uniform(32).unwrap();
    let nodes = [4, 8, 16, 24, 32];
    let times: Vec<f64> = nodes.iter().map(|&k| k as f64 / 32.0).collect();
    for a in shipped(grid) {
        let cov = a.covariance(&times).unwrap();
        let sampler = IntegratorSampler::new(&a);
        let mut stats = vec![RunningStats::default(); nodes.len() * nodes.len()];
        for r in 0..100_000 {
            let x = sampler.path(&sample_noise_stream(grid, 5, r)).unwrap();
            for (i, &ni) in nodes.iter().enumerate() {
                for (j, &nj) in nodes.iter().enumerate() {
                    stats[i * nodes.len() + j].push(x.values[ni] * x.values[nj]);
                }
            }
        }
        for i in 0..nodes.len() {
            for j in 0..nodes.len() {
                let s = &stats[i * nodes.len() + j];
                assert!(within(s.mean, s.std_error(), cov[(i, j)], 5.0), "{} ({i},{j}): {} vs {}", a.label(), s.mean, cov[(i, j)]);
            }
        }
    }
}

#[test]
fn increment_sums_respect_the_integrator_bound() {
    let grid = Grid::uniform(64).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for a in shipped(grid) {
        for trial in 0..4 {
            let k = rng.random_range(2..6);
            let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.random_range(1..64) as f64 / 64.0).collect();
            cuts.extend([0.0, 1.0]);
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            let coeffs: Vec<f64> = (1..cuts.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (lhs, rhs) = integrator_inequality(&a, &cuts, &coeffs).unwrap();
            assert!(lhs <= rhs * (1.0 + 1e-12), "{} exact: {lhs} > {rhs}", a.label());
            let mc = integrator_inequality_mc(&a, &cuts, &coeffs, 5000, trial).unwrap();
            assert!(mc.mean <= rhs + 3.0 * mc.std_error(), "{}: {} > {rhs}", a.label(), mc.mean);
        }
    }
}

#[test]
fn supremum_is_dominated_by_scaled_wiener() {
    let grid = Grid::uniform(256).unwrap();
    for a in shipped(grid) {
        let cmp = supremum_comparison(&a, 4000, 17);
        assert!(cmp.holds(3.0), "{}: {}", a.label(), cmp.difference.mean);
    }
}

fn wiener_paths(reps: usize, seed: u64) -> Vec<PathSample> {
    let grid = Grid::uniform(1024).unwrap();
    let source = PathSource::integrator(&Operator::identity(grid));
    (0..reps).map(|r| source.replicate(seed, r, DEFAULT_REFINEMENT).unwrap()).collect()
}

#[test]
fn sweeps_converge_on_wiener_paths() {
    let paths = wiener_paths(1000, 21);
    let converged = paths
        .iter()
        .filter(|p| epsilon_sweep(p, 0.0, &DEFAULT_SCHEDULE).unwrap().converged)
        .count();
    assert!(converged >= 950, "{converged} of 1000");
}

#[test]
fn gaussian_and_box_kernels_agree_at_matched_bandwidth() {
    let paths = wiener_paths(1000, 22);
    for eps in [1e-2f64, 1e-3] {
        // A box of half-width w has variance w²/3.
        let w = (3.0 * eps).sqrt();
        let (mut g, mut b) = (0.0, 0.0);
        for p in &paths {
            g += mollified_local_time(p, 0.0, eps).unwrap();
            b += box_local_time(p, 0.0, w).unwrap();
        }
        assert!((g - b).abs() <= 0.1 * g, "eps={eps}: {g} vs {b}");
    }
}

#[test]
fn constant_path_far_from_level() {
    let grid = Grid::uniform(64).unwrap();
    let path = PathSample::from_fn(grid, |_| 5.0, "five");
    assert!(mollified_local_time(&path, 0.0, 0.01).unwrap() < 1e-12);
}

#[test]
fn path_moments_match_closed_forms() {
    let grid = Grid::uniform(1024).unwrap();
    let id = Operator::identity(grid);
    let bridge = OperatorConfig::bridge().build(grid).unwrap();
    for (a, p, oracle) in [
        (&id, 1, wiener_moment_closed_form(1)),
        (&id, 2, wiener_moment_closed_form(2)),
        (&bridge, 2, bridge_moment_closed_form(2)),
    ] {
        let m = moment_mc(a, p, 0.0, 2000, 31).unwrap();
        assert!(!m.flagged);
        assert!(within(m.estimate.value, m.estimate.std_error, oracle, 3.0), "p={p}: {:?} vs {oracle}", m.estimate);
    }
}

#[test]
fn level_integrated_cube_matches_quadrature() {
    let grid = Grid::uniform(1024).unwrap();
    let id = Operator::identity(grid);
    let mc = u_integrated_moment_mc(&id, 3, 2000, 41).unwrap();
    let q = level_integrated_moment_via_quadrature(&id, 3, 100_000, 42).unwrap();
    let se = mc.std_error.hypot(q.std_error);
    assert!((mc.value - q.value).abs() <= 3.0 * se, "{} vs {}", mc.value, q.value);
}
