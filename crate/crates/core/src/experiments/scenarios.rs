use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::time::Instant;

use gauss_quad::legendre::GaussLegendre;
use rand::Rng;

use super::config::{ExperimentConfig, OperatorConfig, StepConfig};
use super::{Plan, PlotData, ResultRow, Scenario, ScenarioOutput, Tolerance};
use crate::error::{Error, Result};
use crate::gram::{
    difference_identity_residual, fuzz, gram_det, nonstep_ratio, step_bound_constant, FuzzCheck,
};
use crate::grid::{Grid, GridFunction};
use crate::linalg::orthonormalize;
use crate::localtime::{level_integrated_moments, local_time_moments, l2m_distances, LocalTimeConfig, PathSource};
use crate::operators::{cosine_mode, OperatorSpec};
use crate::quadrature::{
    bridge_moment_closed_form, dirichlet_integral, level_integrated_moment_via_quadrature,
    moment_via_quadrature, simplex_inv_sqrt_gram, wiener_level_integrated_closed_form,
    wiener_local_time_joint_density, wiener_moment_closed_form, y_moment_closed_form, MomentEstimate,
    MAX_ORDER, MIN_SAMPLES,
};
use crate::rng::stream_rng;
use crate::sampler::{integrator_inequality, integrator_inequality_mc, sample_noise_stream, supremum_comparison, IntegratorSampler};

pub(super) static SCENARIOS: [Scenario; 7] = [
    Scenario {
        name: "bound-2.1",
        description: "moment bound for integrators with step-function kernels against the glued-bridge process",
        anchors: &["moment-bound", "kernel-step-subspace", "comparison-process-y"],
        fields: &["operators", "orders", "reps"],
        fill_defaults: bound_defaults,
        check: bound_check,
        run: bound_run,
    },
    Scenario {
        name: "continuity",
        description: "coupled local-time distance for I + B/n shrinks as n grows",
        anchors: &["local-time-continuity", "supremum-comparison"],
        fields: &["orders", "reps", "perturbation", "sequence"],
        fill_defaults: continuity_defaults,
        check: continuity_check,
        run: continuity_run,
    },
    Scenario {
        name: "gram-fuzz",
        description: "randomized Gram determinant identities and inequalities",
        anchors: &[
            "operator-gram-bound",
            "projection-identity",
            "difference-identity",
            "perturbation-expansion",
            "hadamard-bound",
            "step-bound-constant",
            "nonstep-ratio",
        ],
        fields: &["n_samples"],
        fill_defaults: fuzz_defaults,
        check: fuzz_check,
        run: fuzz_run,
    },
    Scenario {
        name: "identity-B1",
        description: "Gram difference identity on structured and random lists",
        anchors: &["difference-identity"],
        fields: &["n_samples"],
        fill_defaults: fuzz_defaults,
        check: fuzz_check,
        run: difference_run,
    },
    Scenario {
        name: "moments",
        description: "path-level local-time moments against the simplex quadrature",
        anchors: &[
            "mollified-local-time",
            "moment-formula-chain",
            "integrator-representation",
            "covariance-formula",
        ],
        fields: &["operators", "orders", "reps", "n_samples"],
        fill_defaults: moments_defaults,
        check: moments_check,
        run: moments_run,
    },
    Scenario {
        name: "quadrature",
        description: "simplex quadrature of local-time moments against closed forms",
        anchors: &[
            "moment-formula-chain",
            "bridge-moment-gamma",
            "dirichlet-simplex",
            "wiener-joint-density",
            "quadrature-stability",
        ],
        fields: &["operators", "orders", "n_samples"],
        fill_defaults: quadrature_defaults,
        check: quadrature_check,
        run: quadrature_run,
    },
    Scenario {
        name: "u-moments",
        description: "level-integrated local-time moments against the increment-Gram quadrature",
        anchors: &["level-integrated-moments"],
        fields: &["operators", "orders", "reps", "n_samples"],
        fill_defaults: u_moments_defaults,
        check: u_moments_check,
        run: u_moments_run,
    },
];

/// Cosine-basis distortion used to build less symmetric operators.
fn distortion() -> OperatorConfig {
    OperatorConfig::CosineDiagonal {
        values: vec![1.0, 0.6, 1.4, 0.8],
        rest: 1.0,
    }
}

/// `I − P` for the projection onto `1_{[0,½]} − 1_{[½,1]}`.
fn half_step() -> OperatorConfig {
    OperatorConfig::ComplementProjection {
        kernel: vec![StepConfig {
            breaks: vec![0.0, 0.5, 1.0],
            levels: vec![1.0, -1.0],
        }],
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

struct Rows<'a> {
    plan: &'a Plan,
    out: ScenarioOutput,
}

impl<'a> Rows<'a> {
    fn new(plan: &'a Plan) -> Self {
        Self {
            plan,
            out: ScenarioOutput::default(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        anchor: &str,
        parameters: String,
        estimate: f64,
        std_error: f64,
        oracle: Option<(f64, f64)>,
        tolerance: Tolerance,
        seed: u64,
        wall_time: f64,
    ) {
        self.out.rows.push(ResultRow {
            scenario: self.plan.scenario.name.to_string(),
            anchor: anchor.to_string(),
            parameters,
            estimate,
            std_error,
            oracle: oracle.map(|o| o.0),
            oracle_std_error: oracle.map(|o| o.1),
            tolerance: tolerance.to_string(),
            pass: tolerance.check(estimate, std_error, oracle),
            seed,
            wall_time,
        });
    }

    fn estimate(
        &mut self,
        anchor: &str,
        parameters: String,
        est: &MomentEstimate,
        oracle: Option<&MomentEstimate>,
        tolerance: Tolerance,
        wall_time: f64,
    ) {
        self.push(
            anchor,
            parameters,
            est.value,
            est.std_error,
            oracle.map(|o| (o.value, o.std_error)),
            tolerance,
            est.seed,
            wall_time,
        );
    }

    fn fail(&mut self, anchor: &str, parameters: String, err: &Error, seed: u64, wall_time: f64) {
        self.out.rows.push(ResultRow {
            scenario: self.plan.scenario.name.to_string(),
            anchor: anchor.to_string(),
            parameters,
            estimate: f64::NAN,
            std_error: f64::NAN,
            oracle: None,
            oracle_std_error: None,
            tolerance: format!("error: {err}"),
            pass: false,
            seed,
            wall_time,
        });
    }

    fn finish(self) -> ScenarioOutput {
        self.out
    }
}

fn local_time_config() -> LocalTimeConfig {
    LocalTimeConfig::default()
}

fn default_orders(cfg: &mut ExperimentConfig, orders: &[usize]) {
    if cfg.orders.is_empty() {
        cfg.orders = orders.to_vec();
    }
}

fn default_operators(cfg: &mut ExperimentConfig, ops: Vec<OperatorConfig>) {
    if cfg.operators.is_empty() {
        cfg.operators = ops;
    }
}

fn need_reps(plan: &Plan) -> Result<()> {
    if plan.reps < 2 {
        return Err(Error::Config("reps must be at least 2".into()));
    }
    Ok(())
}

fn need_samples(plan: &Plan) -> Result<()> {
    if plan.n_samples < MIN_SAMPLES {
        return Err(Error::Config(format!("n_samples must be at least {MIN_SAMPLES}")));
    }
    Ok(())
}

fn need_max_order(plan: &Plan, max: usize) -> Result<()> {
    if plan.orders.iter().any(|&p| p > max) {
        return Err(Error::Config(format!("orders must not exceed {max}")));
    }
    Ok(())
}

/// Kernel is spanned by step functions and `A` is invertible on its
/// complement.
fn check_moment_hypotheses(op: &OperatorSpec<f64>) -> Result<()> {
    let dec = op.kernel_decomposition()?;
    if !dec.nonstep_basis.is_empty() {
        return Err(Error::Config(format!(
            "operator {} has non-step kernel directions",
            op.label()
        )));
    }
    op.restricted_inverse_norm()?;
    Ok(())
}

fn closed_form(op: &OperatorConfig, p: usize) -> Option<(f64, &'static str)> {
    if op.is_identity() {
        Some((wiener_moment_closed_form(p), "moment-formula-chain"))
    } else if op.is_bridge() {
        Some((bridge_moment_closed_form(p), "bridge-moment-gamma"))
    } else {
        None
    }
}

// ---------------------------------------------------------------- gram-fuzz

fn fuzz_defaults(cfg: &mut ExperimentConfig) {
    cfg.n_samples.get_or_insert(10_000);
}

fn fuzz_check(plan: &Plan) -> Result<()> {
    if plan.n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    Ok(())
}

fn fuzz_anchor(check: FuzzCheck) -> &'static str {
    match check {
        FuzzCheck::OperatorBound => "operator-gram-bound",
        FuzzCheck::ProjectionIdentity => "projection-identity",
        FuzzCheck::DifferenceIdentity => "difference-identity",
        FuzzCheck::PerturbationExpansion => "perturbation-expansion",
        FuzzCheck::Hadamard => "hadamard-bound",
    }
}

fn fuzz_row(rows: &mut Rows, check: FuzzCheck, instances: usize, seed: u64) {
    let (s, secs) = timed(|| fuzz(check, instances, seed));
    let estimate = if s.instances > s.skipped { s.worst_ratio } else { f64::NAN };
    rows.push(
        fuzz_anchor(check),
        format!(
            "check={};instances={};failures={};skipped={}",
            check.name(),
            s.instances,
            s.failures,
            s.skipped
        ),
        estimate,
        0.0,
        None,
        // Worst violation in units of its allowed tolerance.
        Tolerance::Within(0.0, 1.0),
        seed,
        secs,
    );
}

fn random_nodes<R: Rng>(rng: &mut R, cells: usize, count: usize) -> Vec<f64> {
    let mut nodes: Vec<usize> = Vec::with_capacity(count);
    while nodes.len() < count {
        let k = rng.random_range(1..cells);
        if !nodes.contains(&k) {
            nodes.push(k);
        }
    }
    nodes.sort_unstable();
    nodes.into_iter().map(|k| k as f64 / cells as f64).collect()
}

fn random_step_basis<R: Rng>(rng: &mut R, grid: Grid, jumps: &[f64], count: usize) -> Result<Vec<GridFunction<f64>>> {
    let indicators = jumps
        .iter()
        .map(|&s| GridFunction::indicator(grid, s))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<GridFunction<f64>> = (0..count)
        .map(|_| {
            let w: Vec<f64> = (0..indicators.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            GridFunction::combination(grid, &w, &indicators)
        })
        .collect::<Result<Vec<_>>>()?;
    orthonormalize(&raw)
}

const WITNESS_CELLS: usize = 64;

/// Step-basis Gram ratios over random jump sets and times; the estimate is the
/// smallest ratio relative to its lower bound `1/G(S)`.
fn step_bound_row(rows: &mut Rows, instances: usize, seed: u64) {
    let (res, secs) = timed(|| -> Result<(f64, usize)> {
        let grid = Grid::uniform(WITNESS_CELLS)?;
        let mut worst = f64::INFINITY;
        let mut skipped = 0;
        for i in 0..instances {
            let mut rng = stream_rng(seed, i as u64);
            let n = rng.random_range(1..=3);
            let jumps = random_nodes(&mut rng, WITNESS_CELLS, n);
            let r = rng.random_range(1..=n);
            let Ok(basis) = random_step_basis(&mut rng, grid, &jumps, r) else {
                skipped += 1;
                continue;
            };
            let k = rng.random_range(0..=3);
            let ts = random_nodes(&mut rng, WITNESS_CELLS, k);
            match step_bound_constant(grid, &jumps, &ts, &basis) {
                Ok(w) => worst = worst.min(w.ratio / w.lower_bound),
                Err(Error::Degenerate(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((worst, skipped))
    });
    match res {
        Ok((worst, skipped)) => rows.push(
            "step-bound-constant",
            format!("instances={instances};skipped={skipped};cells={WITNESS_CELLS}"),
            worst,
            0.0,
            None,
            Tolerance::Above(1.0 - 1e-9),
            seed,
            secs,
        ),
        Err(e) => rows.fail("step-bound-constant", format!("instances={instances}"), &e, seed, secs),
    }
}

/// Kernels mixing step functions with a smooth cosine direction; the
/// estimate is the smallest Gram ratio seen.
fn nonstep_row(rows: &mut Rows, instances: usize, seed: u64) {
    let (res, secs) = timed(|| -> Result<(f64, usize)> {
        let grid = Grid::uniform(WITNESS_CELLS)?;
        let mut worst = f64::INFINITY;
        let mut skipped = 0;
        for i in 0..instances {
            let mut rng = stream_rng(seed, i as u64);
            let n = rng.random_range(1..=3);
            let jumps = random_nodes(&mut rng, WITNESS_CELLS, n);
            let r = rng.random_range(1..=n);
            let Ok(steps) = random_step_basis(&mut rng, grid, &jumps, r) else {
                skipped += 1;
                continue;
            };
            let mode = cosine_mode::<f64>(grid, rng.random_range(2..=6))?;
            let mut smooth = mode.clone();
            for s in &steps {
                smooth.axpy(-mode.inner(s)?, s)?;
            }
            let norm = smooth.norm();
            let smooth = smooth.scaled(1.0 / norm);
            let k = rng.random_range(0..=3);
            let ts = random_nodes(&mut rng, WITNESS_CELLS, k);
            match nonstep_ratio(grid, &ts, &steps, &[smooth]) {
                Ok(ratio) => worst = worst.min(ratio),
                Err(Error::Degenerate(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((worst, skipped))
    });
    match res {
        Ok((worst, skipped)) => rows.push(
            "nonstep-ratio",
            format!("instances={instances};skipped={skipped};cells={WITNESS_CELLS}"),
            worst,
            0.0,
            None,
            Tolerance::Above(1e-12),
            seed,
            secs,
        ),
        Err(e) => rows.fail("nonstep-ratio", format!("instances={instances}"), &e, seed, secs),
    }
}

fn fuzz_run(plan: &Plan) -> ScenarioOutput {
    let mut rows = Rows::new(plan);
    for check in FuzzCheck::ALL {
        fuzz_row(&mut rows, check, plan.n_samples, plan.sub_seed(check.name()));
    }
    let witnesses = plan.n_samples.div_ceil(10);
    step_bound_row(&mut rows, witnesses, plan.sub_seed("step-bound"));
    nonstep_row(&mut rows, witnesses, plan.sub_seed("nonstep"));
    rows.finish()
}

// -------------------------------------------------------------- identity-B1

fn difference_case(rows: &mut Rows, name: &str, fs: Result<Vec<GridFunction<f64>>>) {
    let (res, secs) = timed(|| -> Result<(f64, f64)> {
        let fs = fs?;
        let scale = gram_det(&fs)?.value.max(1.0);
        Ok((difference_identity_residual(&fs)?, 1e-9 * scale))
    });
    match res {
        Ok((residual, limit)) => rows.push(
            "difference-identity",
            format!("case={name}"),
            residual,
            0.0,
            None,
            Tolerance::Below(limit),
            0,
            secs,
        ),
        Err(e) => rows.fail("difference-identity", format!("case={name}"), &e, 0, secs),
    }
}

fn difference_run(plan: &Plan) -> ScenarioOutput {
    let mut rows = Rows::new(plan);
    let grid = plan.grid;
    let indicators = |ts: &[f64]| ts.iter().map(|&t| GridFunction::indicator(grid, t)).collect::<Result<Vec<_>>>();
    difference_case(&mut rows, "nested-indicators", indicators(&[0.125, 0.25, 0.5, 0.75, 1.0]));
    difference_case(&mut rows, "two-indicators", indicators(&[0.3, 0.9]));
    difference_case(
        &mut rows,
        "intervals",
        [(0.0, 0.5), (0.25, 0.75), (0.5, 1.0), (0.1, 0.2)]
            .iter()
            .map(|&(a, b)| GridFunction::interval_indicator(grid, a, b))
            .collect(),
    );
    difference_case(
        &mut rows,
        "cosine-modes",
        (0..5).map(|j| cosine_mode(grid, j)).collect(),
    );
    fuzz_row(
        &mut rows,
        FuzzCheck::DifferenceIdentity,
        plan.n_samples,
        plan.sub_seed(FuzzCheck::DifferenceIdentity.name()),
    );
    rows.finish()
}

// --------------------------------------------------------------- quadrature

fn quadrature_defaults(cfg: &mut ExperimentConfig) {
    default_operators(
        cfg,
        vec![
            OperatorConfig::identity(),
            OperatorConfig::bridge(),
            OperatorConfig::compose(distortion(), half_step()),
        ],
    );
    default_orders(cfg, &[1, 2, 3, 4, 5]);
    cfg.n_samples.get_or_insert(1_000_000);
}

fn quadrature_check(plan: &Plan) -> Result<()> {
    need_samples(plan)?;
    need_max_order(plan, MAX_ORDER)
}

const JOINT_DENSITY_EXTENT: f64 = 16.0;

/// `∫∫ a^k p(a, b) da db` over `a ≥ 0` by tensor Gauss–Legendre, using the
/// symmetry in `b`.
fn joint_density_moment(k: usize) -> f64 {
    let rule = GaussLegendre::new(NonZeroUsize::new(200).expect("nonzero"));
    let half = JOINT_DENSITY_EXTENT / 2.0;
    let nodes: Vec<(f64, f64)> = rule.iter().map(|&(x, w)| (half * (x + 1.0), half * w)).collect();
    let mut total = 0.0;
    for &(a, wa) in &nodes {
        for &(b, wb) in &nodes {
            total += wa * wb * a.powi(k as i32) * wiener_local_time_joint_density(a, b);
        }
    }
    2.0 * total
}

/// `E[l^k | w(1) = 0] = √(2π) ∫ a^k p(a, 0) da`.
fn pinned_density_moment(k: usize) -> f64 {
    let rule = GaussLegendre::new(NonZeroUsize::new(200).expect("nonzero"));
    let half = JOINT_DENSITY_EXTENT / 2.0;
    let s: f64 = rule
        .iter()
        .map(|&(x, w)| {
            let a = half * (x + 1.0);
            half * w * a.powi(k as i32) * wiener_local_time_joint_density(a, 0.0)
        })
        .sum();
    (2.0 * PI).sqrt() * s
}

fn quadrature_run(plan: &Plan) -> ScenarioOutput {
    let mut rows = Rows::new(plan);
    let n = plan.n_samples;
    for (cfg, op) in &plan.operators {
        let label = cfg.label();
        for &p in &plan.orders {
            let seed = plan.sub_seed(&format!("quadrature/{label}/{p}"));
            let params = format!("operator={label};p={p};n_samples={n}");
            let (res, secs) = timed(|| simplex_inv_sqrt_gram(op, p, n, seed));
            let simplex = match res {
                Ok(s) => s,
                Err(e) => {
                    rows.fail("moment-formula-chain", params, &e, seed, secs);
                    continue;
                }
            };
            let factor = (1..=p).map(|k| k as f64).product::<f64>() / (2.0 * PI).powf(p as f64 / 2.0);
            let moment = simplex.scaled(factor);
            match closed_form(cfg, p) {
                Some((value, anchor)) => rows.estimate(
                    anchor,
                    params.clone(),
                    &moment,
                    Some(&MomentEstimate::closed_form(value)),
                    Tolerance::SE3,
                    secs,
                ),
                None => rows.estimate("moment-formula-chain", params.clone(), &moment, None, Tolerance::Finite, secs),
            }
            if cfg.is_identity() {
                // ∫_{Δ_p} Π (t_i − t_{i−1})^{-1/2} dt in closed form.
                let mut alpha = vec![0.5; p];
                alpha.push(1.0);
                let exact = MomentEstimate::closed_form(dirichlet_integral(&alpha));
                rows.estimate("dirichlet-simplex", format!("{params};quantity=simplex-integral"), &simplex, Some(&exact), Tolerance::SE3, secs);
                rows.push(
                    "dirichlet-simplex",
                    format!("{params};quantity=weight-variance"),
                    simplex.sample_variance,
                    0.0,
                    None,
                    Tolerance::Below(1e-20),
                    seed,
                    secs,
                );
            }
        }
        stability_rows(&mut rows, cfg, op, n);
    }
    for k in 1..=4 {
        let (v, secs) = timed(|| joint_density_moment(k));
        rows.push(
            "wiener-joint-density",
            format!("k={k};marginal=free"),
            v,
            0.0,
            Some((wiener_moment_closed_form(k), 0.0)),
            Tolerance::Match { z: 0.0, rel: 1e-9 },
            0,
            secs,
        );
        let (v, secs) = timed(|| pinned_density_moment(k));
        rows.push(
            "wiener-joint-density",
            format!("k={k};marginal=pinned"),
            v,
            0.0,
            Some((bridge_moment_closed_form(k), 0.0)),
            Tolerance::Match { z: 0.0, rel: 1e-9 },
            0,
            secs,
        );
    }
    let (mass, secs) = timed(|| joint_density_moment(0));
    rows.push("wiener-joint-density", "k=0;marginal=free".into(), mass, 0.0, Some((1.0, 0.0)), Tolerance::Match { z: 0.0, rel: 1e-9 }, 0, secs);
    rows.finish()
}

/// Standard-error decay of the `p = 2` simplex estimate over a decade of
/// sample sizes, for operators whose importance weights are not constant.
fn stability_rows(rows: &mut Rows, cfg: &OperatorConfig, op: &OperatorSpec<f64>, n: usize) {
    let label = cfg.label();
    let lo_n = (n / 100).max(MIN_SAMPLES);
    let hi_n = 10 * lo_n;
    let seed = rows.plan.sub_seed(&format!("stability/{label}"));
    let (res, secs) = timed(|| -> Result<(MomentEstimate, MomentEstimate, MomentEstimate)> {
        let lo = simplex_inv_sqrt_gram(op, 2, lo_n, seed)?;
        let hi = simplex_inv_sqrt_gram(op, 2, hi_n, seed ^ 1)?;
        let full = simplex_inv_sqrt_gram(op, 2, n, seed ^ 2)?;
        Ok((lo, hi, full))
    });
    let params = format!("operator={label};p=2;n_samples={lo_n}..{hi_n}");
    let (lo, hi, full) = match res {
        Ok(v) => v,
        Err(e) => return rows.fail("quadrature-stability", params, &e, seed, secs),
    };
    if full.sample_variance <= 1e-10 * full.value * full.value {
        return;
    }
    let slope = (hi.std_error / lo.std_error).log10();
    rows.push("quadrature-stability", format!("{params};quantity=se-slope"), slope, 0.0, None, Tolerance::Within(-0.6, -0.4), seed, secs);
    rows.estimate("quadrature-stability", format!("{params};quantity=agreement"), &hi, Some(&full), Tolerance::SE3, secs);
}

// ------------------------------------------------------------------ moments

fn moments_defaults(cfg: &mut ExperimentConfig) {
    default_operators(
        cfg,
        vec![
            OperatorConfig::identity(),
            OperatorConfig::bridge(),
            OperatorConfig::compose(distortion(), half_step()),
        ],
    );
    default_orders(cfg, &[1, 2, 3, 4]);
    cfg.reps.get_or_insert(10_000);
    cfg.n_samples.get_or_insert(1_000_000);
}

fn moments_check(plan: &Plan) -> Result<()> {
    need_reps(plan)?;
    need_samples(plan)?;
    need_max_order(plan, MAX_ORDER)?;
    plan.operators.iter().try_for_each(|(_, op)| check_moment_hypotheses(op))
}

const CUTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const CUT_WEIGHTS: [f64; 4] = [1.0, -2.0, 0.5, 1.5];
const COVARIANCE_TIMES: [f64; 3] = [0.25, 0.5, 1.0];

fn representation_rows(rows: &mut Rows, label: &str, op: &OperatorSpec<f64>, reps: usize) {
    let seed = rows.plan.sub_seed(&format!("representation/{label}"));
    let params = format!("operator={label};reps={reps}");
    let (res, secs) = timed(|| -> Result<_> {
        let (lhs, rhs) = integrator_inequality(op, &CUTS, &CUT_WEIGHTS)?;
        let mc = integrator_inequality_mc(op, &CUTS, &CUT_WEIGHTS, reps, seed)?;
        Ok((lhs, rhs, mc))
    });
    match res {
        Ok((lhs, rhs, mc)) => {
            rows.push("integrator-representation", format!("{params};quantity=increment-bound"), lhs, 0.0, Some((rhs, 0.0)), Tolerance::AtMost { z: 0.0, rel: 1e-12 }, seed, secs);
            rows.push("integrator-representation", format!("{params};quantity=increment-variance"), mc.mean, mc.std_error(), Some((lhs, 0.0)), Tolerance::SE3, seed, secs);
        }
        Err(e) => rows.fail("integrator-representation", params.clone(), &e, seed, secs),
    }

    let seed = rows.plan.sub_seed(&format!("covariance/{label}"));
    let (res, secs) = timed(|| -> Result<f64> {
        let cov = op.covariance(&COVARIANCE_TIMES)?;
        let sampler = IntegratorSampler::new(op);
        let grid = op.grid();
        let nodes = COVARIANCE_TIMES
            .iter()
            .map(|&t| grid.snap(t).map(|s| s.node))
            .collect::<Result<Vec<_>>>()?;
        let k = nodes.len();
        let mut stats = vec![crate::quadrature::RunningStats::default(); k * k];
        for r in 0..reps {
            let path = sampler.path(&sample_noise_stream(grid, seed, r as u64))?;
            for i in 0..k {
                for j in i..k {
                    stats[i * k + j].push(path.values[nodes[i]] * path.values[nodes[j]]);
                }
            }
        }
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in i..k {
                let s = &stats[i * k + j];
                worst = worst.max((s.mean - cov[(i, j)]).abs() / s.std_error());
            }
        }
        Ok(worst)
    });
    match res {
        Ok(z) => rows.push("covariance-formula", format!("{params};quantity=max-z"), z, 0.0, None, Tolerance::Below(4.0), seed, secs),
        Err(e) => rows.fail("covariance-formula", params.clone(), &e, seed, secs),
    }
}

/// Covariance matrices of the identity and the bridge against `min(s,t)` and
/// `min(s,t) − st`.
fn exact_covariance_row(rows: &mut Rows, cfg: &OperatorConfig, op: &OperatorSpec<f64>) {
    let bridge = cfg.is_bridge();
    if !bridge && !cfg.is_identity() {
        return;
    }
    let times = [0.125, 0.25, 0.5, 0.75, 1.0];
    let (res, secs) = timed(|| op.covariance(&times));
    let params = format!("operator={};quantity=max-deviation", cfg.label());
    match res {
        Ok(c) => {
            let mut worst = 0.0f64;
            for (i, &s) in times.iter().enumerate() {
                for (j, &t) in times.iter().enumerate() {
                    let want = s.min(t) - if bridge { s * t } else { 0.0 };
                    worst = worst.max((c[(i, j)] - want).abs());
                }
            }
            rows.push("covariance-formula", params, worst, 0.0, None, Tolerance::Below(1e-12), 0, secs);
        }
        Err(e) => rows.fail("covariance-formula", params, &e, 0, secs),
    }
}

fn moments_run(plan: &Plan) -> ScenarioOutput {
    let mut rows = Rows::new(plan);
    let cfg_lt = local_time_config();
    for (cfg, op) in &plan.operators {
        let label = cfg.label();
        let seed = plan.sub_seed(&format!("paths/{label}"));
        let (res, secs) = timed(|| local_time_moments(&PathSource::integrator(op), &plan.orders, 0.0, plan.reps, seed, &cfg_lt));
        let params = format!("operator={label};reps={}", plan.reps);
        let moments = match res {
            Ok(m) => m,
            Err(e) => {
                rows.fail("mollified-local-time", params, &e, seed, secs);
                continue;
            }
        };
        let excluded = moments.first().map_or(0, |m| m.excluded);
        rows.push(
            "mollified-local-time",
            format!("{params};quantity=unconverged-fraction"),
            excluded as f64 / plan.reps as f64,
            0.0,
            None,
            Tolerance::Within(0.0, crate::localtime::MAX_UNCONVERGED_FRACTION),
            seed,
            secs,
        );
        for m in &moments {
            let p = m.order;
            let qseed = plan.sub_seed(&format!("quadrature/{label}/{p}"));
            let (q, qsecs) = timed(|| moment_via_quadrature(op, p, plan.n_samples, qseed));
            let pparams = format!("{params};p={p};n_samples={}", plan.n_samples);
            match q {
                Ok(q) => rows.estimate("mollified-local-time", pparams.clone(), &m.estimate, Some(&q), Tolerance::SE3, secs + qsecs),
                Err(e) => rows.fail("mollified-local-time", pparams.clone(), &e, qseed, qsecs),
            }
            if let Some((value, _)) = closed_form(cfg, p) {
                rows.estimate(
                    "moment-formula-chain",
                    format!("{params};p={p};oracle=closed-form"),
                    &m.estimate,
                    Some(&MomentEstimate::closed_form(value)),
                    Tolerance::SE3,
                    secs,
                );
            }
        }
        representation_rows(&mut rows, &label, op, plan.reps);
        exact_covariance_row(&mut rows, cfg, op);
    }
    rows.finish()
}

// ---------------------------------------------------------------- bound-2.1

fn bound_defaults(cfg: &mut ExperimentConfig) {
    default_operators(
        cfg,
        vec![
            OperatorConfig::bridge(),
            OperatorConfig::compose(distortion(), OperatorConfig::bridge()),
            OperatorConfig::compose(distortion(), half_step()),
        ],
    );
    default_orders(cfg, &[1, 2, 3]);
    cfg.reps.get_or_insert(5_000);
}

fn bound_check(plan: &Plan) -> Result<()> {
    need_reps(plan)?;
    need_max_order(plan, MAX_ORDER)?;
    for (cfg, op) in &plan.operators {
        if op.kernel_basis().is_empty() {
            return Err(Error::Config(format!("operator {} has an empty kernel", cfg.label())));
        }
        check_moment_hypotheses(op)?;
    }
    Ok(())
}

fn format_points(ps: &[f64]) -> String {
    ps.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ")
}

fn bound_run(plan: &Plan) -> ScenarioOutput {
    let mut rows = Rows::new(plan);
    let cfg_lt = local_time_config();
    let mut jump_sets: Vec<Vec<f64>> = Vec::new();
    for (cfg, op) in &plan.operators {
        let label = cfg.label();
        let params = format!("operator={label};reps={}", plan.reps);
        let (dec, secs) = timed(|| op.kernel_decomposition());
        let dec = match dec {
            Ok(d) => d,
            Err(e) => {
                rows.fail("kernel-step-subspace", params, &e, 0, secs);
                continue;
            }
        };
        let jumps = dec.jump_points.clone();
        rows.push(
            "kernel-step-subspace",
            format!(
                "operator={label};quantity=nonstep-dimension;steps={};jumps=[{}]",
                dec.step_basis.len(),
                format_points(&jumps)
            ),
            dec.nonstep_basis.len() as f64,
            0.0,
            None,
            Tolerance::Below(0.5),
            0,
            secs,
        );
        if !jump_sets.contains(&jumps) {
            jump_sets.push(jumps.clone());
        }
        let seed = plan.sub_seed(&format!("paths/{label}"));
        let (res, secs) = timed(|| -> Result<_> {
            let norm = op.restricted_inverse_norm()?;
            let m = local_time_moments(&PathSource::integrator(op), &plan.orders, 0.0, plan.reps, seed, &cfg_lt)?;
            Ok((norm, m))
        });
        let (norm, moments) = match res {
            Ok(v) => v,
            Err(e) => {
                rows.fail("moment-bound", params, &e, seed, secs);
                continue;
            }
        };
        for m in &moments {
            let p = m.order;
            let bound = match y_moment_closed_form(&jumps, p) {
                Ok(y) => norm.powi(p as i32) * y,
                Err(e) => {
                    rows.fail("moment-bound", format!("{params};p={p}"), &e, seed, secs);
                    continue;
                }
            };
            let oracle = MomentEstimate::closed_form(bound);
            rows.estimate(
                "moment-bound",
                format!("{params};p={p};inverse_norm={norm};case=inequality"),
                &m.estimate,
                Some(&oracle),
                Tolerance::AtMost { z: 3.0, rel: 1e-9 },
                secs,
            );
            if cfg.is_bridge() {
                rows.estimate(
                    "moment-bound",
                    format!("{params};p={p};inverse_norm={norm};case=equality"),
                    &m.estimate,
                    Some(&oracle),
                    Tolerance::SE3,
                    secs,
                );
            }
        }
    }
    for jumps in &jump_sets {
        let key = format_points(jumps);
        let seed = plan.sub_seed(&format!("y/{key}"));
        let source = PathSource::Bridges {
            grid: plan.grid,
            jump_points: jumps.clone(),
        };
        let params = format!("jumps=[{key}];reps={}", plan.reps);
        let (res, secs) = timed(|| local_time_moments(&source, &plan.orders, 0.0, plan.reps, seed, &cfg_lt));
        match res {
            Ok(ms) => {
                for m in &ms {
                    match y_moment_closed_form(jumps, m.order) {
                        Ok(y) => rows.estimate(
                            "comparison-process-y",
                            format!("{params};p={}", m.order),
                            &m.estimate,
                            Some(&MomentEstimate::closed_form(y)),
                            Tolerance::SE3,
                            secs,
                        ),
                        Err(e) => rows.fail("comparison-process-y", params.clone(), &e, seed, secs),
                    }
                }
            }
            Err(e) => rows.fail("comparison-process-y", params, &e, seed, secs),
        }
    }
    rows.finish()
}

// --------------------------------------------------------------- continuity

fn continuity_defaults(cfg: &mut ExperimentConfig) {
    if cfg.perturbation.is_empty() {
        cfg.perturbation = vec![0.5; 8];
    }
    if cfg.sequence.is_empty() {
        cfg.sequence = vec![1, 2, 4, 8, 16];
    }
    default_orders(cfg, &[1, 2]);
    cfg.reps.get_or_insert(2_000);
}

/// `I + B/n` with `B` diagonal in the cosine modes.
fn perturbed_identity(grid: Grid, modes: &[f64], n: usize) -> Result<OperatorSpec<f64>> {
    let values: Vec<f64> = modes.iter().map(|b| 1.0 + b / n as f64).collect();
    Ok(OperatorSpec::cosine_diagonal(grid, &values, 1.0)?
        .with_kernel(Vec::new())?
        .with_label(format!("I+B/{n}")))
}

fn continuity_check(plan: &Plan) -> Result<()> {
    need_reps(plan)?;
    need_max_order(plan, 4)?;
    if plan.perturbation.iter().any(|b| !b.is_finite()) || plan.perturbation.len() > plan.grid.cells() {
        return Err(Error::Config("perturbation needs finite values, at most one per cell".into()));
    }
    if plan.sequence.len() < 2 || plan.sequence[0] == 0 || plan.sequence.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("sequence must hold at least two increasing positive integers".into()));
    }
    for &n in &plan.sequence {
        let op = perturbed_identity(plan.grid, &plan.perturbation, n)?;
        op.restricted_inverse_norm()
            .map_err(|_| Error::Config(format!("I+B/{n} is not invertible")))?;
    }
    Ok(())
}

fn continuity_run(plan: &Plan) -> ScenarioOutput {
    let mut rows = Rows::new(plan);
    let grid = plan.grid;
    let b_norm = plan.perturbation.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    rows.push("local-time-continuity", "quantity=perturbation-norm".into(), b_norm, 0.0, None, Tolerance::Within(0.0, 0.5), 0, 0.0);
    let ms: Vec<u32> = plan.orders.iter().map(|&m| m as u32).collect();
    let base = OperatorSpec::identity(grid);
    let seed = plan.sub_seed("coupled");
    let mut per_n: Vec<Vec<MomentEstimate>> = Vec::new();
    let mut worst_inverse = 0.0f64;
    for &n in &plan.sequence {
        let (res, secs) = timed(|| -> Result<_> {
            let a_n = perturbed_identity(grid, &plan.perturbation, n)?;
            let inv = a_n.restricted_inverse_norm()?;
            let d = l2m_distances(&a_n, &base, &ms, plan.reps, seed, &local_time_config())?;
            let sup = supremum_comparison(&a_n, plan.reps, plan.sub_seed(&format!("supremum/{n}")));
            Ok((inv, d, sup))
        });
        let params = format!("n={n};reps={}", plan.reps);
        match res {
            Ok((inv, d, sup)) => {
                worst_inverse = worst_inverse.max(inv);
                for (m, est) in ms.iter().zip(&d) {
                    rows.estimate("local-time-continuity", format!("{params};m={m};quantity=distance"), est, None, Tolerance::Finite, secs);
                }
                per_n.push(d);
                rows.push(
                    "supremum-comparison",
                    format!("{params};quantity=max-gap"),
                    sup.difference.mean,
                    sup.difference.std_error(),
                    Some((0.0, 0.0)),
                    Tolerance::AtMost { z: 3.0, rel: 0.0 },
                    plan.sub_seed(&format!("supremum/{n}")),
                    secs,
                );
            }
            Err(e) => rows.fail("local-time-continuity", params, &e, seed, secs),
        }
    }
    // Neumann series bound for ‖(I + B/n)^{-1}‖ with ‖B/n‖ ≤ ‖B‖ < 1.
    let neumann = if b_norm < 1.0 { 1.0 / (1.0 - b_norm) } else { f64::INFINITY };
    rows.push("local-time-continuity", "quantity=sup-inverse-norm".into(), worst_inverse, 0.0, Some((neumann, 0.0)), Tolerance::AtMost { z: 0.0, rel: 1e-9 }, 0, 0.0);
    if per_n.len() == plan.sequence.len() {
        for (i, m) in ms.iter().enumerate() {
            let d: Vec<&MomentEstimate> = per_n.iter().map(|v| &v[i]).collect();
            // Smallest drop in units of twice the combined standard error.
            let margin = d
                .windows(2)
                .map(|w| (w[0].value - w[1].value) / (2.0 * w[0].std_error.hypot(w[1].std_error)))
                .fold(f64::INFINITY, f64::min);
            rows.push("local-time-continuity", format!("m={m};quantity=min-drop-over-2se"), margin, 0.0, None, Tolerance::Above(1.0), seed, 0.0);
            let ratio = d[d.len() - 1].value / d[0].value;
            rows.push("local-time-continuity", format!("m={m};quantity=last-over-first"), ratio, 0.0, None, Tolerance::Below(0.25), seed, 0.0);
            rows.out.plots.push(PlotData {
                name: format!("distance-m{m}"),
                columns: ["n".into(), "distance".into()],
                points: plan.sequence.iter().zip(&d).map(|(&n, e)| (n as f64, e.value)).collect(),
            });
        }
    }
    rows.finish()
}

// ---------------------------------------------------------------- u-moments

fn u_moments_defaults(cfg: &mut ExperimentConfig) {
    default_operators(cfg, vec![OperatorConfig::identity()]);
    default_orders(cfg, &[1, 2, 3]);
    cfg.reps.get_or_insert(10_000);
    cfg.n_samples.get_or_insert(1_000_000);
}

fn u_moments_check(plan: &Plan) -> Result<()> {
    need_reps(plan)?;
    need_samples(plan)?;
    need_max_order(plan, MAX_ORDER)
}

fn u_moments_run(plan: &Plan) -> ScenarioOutput {
    let mut rows = Rows::new(plan);
    let qs: Vec<u32> = plan.orders.iter().map(|&q| q as u32).collect();
    for (cfg, op) in &plan.operators {
        let label = cfg.label();
        let seed = plan.sub_seed(&format!("paths/{label}"));
        let params = format!("operator={label};reps={}", plan.reps);
        let (res, secs) = timed(|| level_integrated_moments(&PathSource::integrator(op), &qs, plan.reps, seed, &local_time_config()));
        let estimates = match res {
            Ok(v) => v,
            Err(e) => {
                rows.fail("level-integrated-moments", params, &e, seed, secs);
                continue;
            }
        };
        for (&q, est) in plan.orders.iter().zip(&estimates) {
            let qseed = plan.sub_seed(&format!("increment-quadrature/{label}/{q}"));
            let (oracle, qsecs) = timed(|| level_integrated_moment_via_quadrature(op, q, plan.n_samples, qseed));
            let qparams = format!("{params};q={q};n_samples={}", plan.n_samples);
            match oracle {
                Ok(o) => {
                    rows.estimate("level-integrated-moments", qparams.clone(), est, Some(&o), Tolerance::SE3, secs + qsecs);
                    if cfg.is_identity() {
                        let exact = MomentEstimate::closed_form(wiener_level_integrated_closed_form(q));
                        rows.estimate("level-integrated-moments", format!("{qparams};quantity=quadrature-vs-closed-form"), &o, Some(&exact), Tolerance::SE3, qsecs);
                    }
                }
                Err(e) => rows.fail("level-integrated-moments", qparams, &e, qseed, qsecs),
            }
        }
    }
    rows.finish()
}
