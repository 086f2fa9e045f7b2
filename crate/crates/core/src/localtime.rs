//! Local-time estimators: mollified occupation integrals, occupation
//! histograms, and Monte Carlo moments built from them.
//!
//! Paths are known at nodes; between nodes they are the chord plus
//! `bridge_scale` times a Brownian bridge. The mollified estimator returns the
//! conditional expectation of `∫ f_ε(x(s) − u) ds` given the node values, so
//! it stays finite and unbiased (for the first moment) as `ε → 0`.

use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::legendre::GaussLegendre;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operators::OperatorSpec;
use crate::quadrature::{MomentEstimate, Method, RunningStats};
use crate::rng::stream_rng;
use crate::sampler::{noise_from_rng, y_from_noise, IntegratorSampler, NoiseVector, PathSample};

/// `ε = 2^{-4}, 2^{-8}, …, 2^{-32}`.
pub const DEFAULT_SCHEDULE: [f64; 8] = [
    1.0 / 16.0,
    1.0 / 256.0,
    1.0 / 4096.0,
    1.0 / 65536.0,
    1.0 / 1_048_576.0,
    1.0 / 16_777_216.0,
    1.0 / 268_435_456.0,
    1.0 / 4_294_967_296.0,
];
pub const DEFAULT_REFINEMENT: usize = 16;
pub const DEFAULT_HISTOGRAM_REFINEMENT: usize = 64;
pub const DEFAULT_BIN_WIDTH: f64 = 0.02;
/// Runs with more non-converged replicates than this fraction are flagged.
pub const MAX_UNCONVERGED_FRACTION: f64 = 0.05;

struct Rules {
    /// Nodes `τ` and weights for `∫_0^1 · dτ` after `τ = (1 − cos θ)/2`.
    endpoint: Vec<(f64, f64)>,
    /// Plain Gauss–Legendre on `[0, 1]` for smooth integrands.
    smooth: Vec<(f64, f64)>,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| {
        let gl = |k: usize| GaussLegendre::new(NonZeroUsize::new(k).expect("nonzero"));
        let endpoint = gl(24)
            .iter()
            .map(|&(x, w)| {
                let theta = (x + 1.0) * PI / 2.0;
                let tau = (1.0 - theta.cos()) / 2.0;
                (tau, w * PI / 2.0 * theta.sin() / 2.0)
            })
            .collect();
        let smooth = gl(8).iter().map(|&(x, w)| ((x + 1.0) / 2.0, w / 2.0)).collect();
        Rules { endpoint, smooth }
    })
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn gaussian(m: f64, v: f64) -> f64 {
    (-m * m / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
}

/// `∫_0^1 φ_v(τ)(a + (b − a)τ) dτ` with `v(τ) = s²τ(1 − τ) + ε`, `s²` the
/// bridge variance over the cell.
fn cell_average(a: f64, b: f64, bridge_var: f64, eps: f64) -> f64 {
    if bridge_var == 0.0 {
        let sd = eps.sqrt();
        let d = b - a;
        if d.abs() <= 1e-9 * sd {
            return gaussian(0.5 * (a + b), eps);
        }
        return (normal_cdf(b / sd) - normal_cdf(a / sd)) / d;
    }
    let r = rules();
    let nodes = if eps > 4.0 * bridge_var {
        &r.smooth
    } else {
        &r.endpoint
    };
    nodes
        .iter()
        .map(|&(tau, w)| {
            let m = a + (b - a) * tau;
            let v = bridge_var * tau * (1.0 - tau) + eps;
            w * gaussian(m, v)
        })
        .sum()
}

/// Mollified occupation integral `∫_0^1 f_ε(x(s) − u) ds`, averaged over the
/// within-cell bridges.
pub fn mollified_local_time(path: &PathSample, u: f64, eps: f64) -> Result<f64> {
    Ok(sweep_values(path, u, &[eps], path.grid.cells())?[0])
}

/// Same as [`mollified_local_time`] up to horizon `t` (snapped to a node).
pub fn mollified_local_time_until(path: &PathSample, u: f64, eps: f64, t: f64) -> Result<f64> {
    let cells = path.grid.snap(t)?.node;
    Ok(sweep_values(path, u, &[eps], cells)?[0])
}

fn sweep_values(path: &PathSample, u: f64, schedule: &[f64], cells: usize) -> Result<Vec<f64>> {
    if schedule.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let h = path.grid.cell_width::<f64>();
    let bridge_var = path.bridge_scale * path.bridge_scale * h;
    let values = &path.values[..=cells];
    Ok(schedule
        .iter()
        .map(|&eps| {
            let reach = REACH * (bridge_var / 4.0 + eps).sqrt();
            let far = |a: f64, b: f64| a * b > 0.0 && a.abs().min(b.abs()) > reach;
            if eps >= CHORD_RATIO * bridge_var {
                // Bridge wiggle only inflates the kernel variance by its
                // within-cell average, up to O((s²/ε)²).
                chord_sum(values, u, eps + bridge_var / 6.0, reach) * h
            } else {
                values
                    .windows(2)
                    .map(|w| (w[0] - u, w[1] - u))
                    .filter(|&(a, b)| !far(a, b))
                    .map(|(a, b)| cell_average(a, b, bridge_var, eps))
                    .sum::<f64>()
                    * h
            }
        })
        .collect())
}

/// Kernel cut-off in standard deviations; `exp(-32)` is below roundoff.
const REACH: f64 = 8.0;
/// Above `ε / s²` of this size the chord formula is used.
const CHORD_RATIO: f64 = 64.0;

/// `Σ_k ∫_0^1 φ_var(chord_k(τ) − u) dτ` over piecewise-linear cells, with
/// the normal tail at each node shared by its two cells.
fn chord_sum(values: &[f64], u: f64, var: f64, reach: f64) -> f64 {
    let sd = var.sqrt();
    let tail = |x: f64| 0.5 * libm::erfc(x / (sd * std::f64::consts::SQRT_2));
    let mut total = 0.0;
    let mut cached: Option<(usize, f64)> = None;
    for (k, w) in values.windows(2).enumerate() {
        let (a, b) = (w[0] - u, w[1] - u);
        if a * b > 0.0 && a.abs().min(b.abs()) > reach {
            continue;
        }
        let d = b - a;
        if d.abs() < 1e-3 * sd {
            total += gaussian(0.5 * (a + b), var);
            continue;
        }
        let ta = match cached {
            Some((j, t)) if j == k => t,
            _ => tail(a),
        };
        let tb = tail(b);
        cached = Some((k + 1, tb));
        total += (ta - tb) / d;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeEstimate {
    pub u: f64,
    pub t: f64,
    pub epsilon_schedule: Vec<f64>,
    pub estimates: Vec<f64>,
    /// The estimate at the smallest `ε`.
    pub extrapolated: f64,
    pub converged: bool,
}

fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.len() < 4 {
        return Err(Error::InvalidArgument(
            "epsilon schedule needs at least four values".into(),
        ));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) || schedule.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument(
            "epsilon schedule must be positive and strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// Last two estimates agree to 1% relative or `1e-4` absolute.
fn has_converged(estimates: &[f64]) -> bool {
    match estimates {
        [.., x, y] => {
            let d = (x - y).abs();
            d < 1e-4 || d < 0.01 * y.abs()
        }
        _ => false,
    }
}

pub fn epsilon_sweep(path: &PathSample, u: f64, schedule: &[f64]) -> Result<LocalTimeEstimate> {
    check_schedule(schedule)?;
    let estimates = sweep_values(path, u, schedule, path.grid.cells())?;
    Ok(LocalTimeEstimate {
        u,
        t: 1.0,
        epsilon_schedule: schedule.to_vec(),
        extrapolated: *estimates.last().expect("nonempty schedule"),
        converged: has_converged(&estimates),
        estimates,
    })
}

/// `∫_0^1 (2w)^{-1} 1_{[u−w,u+w]}(x(s)) ds` for the piecewise-linear path.
pub fn box_local_time(path: &PathSample, u: f64, half_width: f64) -> Result<f64> {
    if !(half_width > 0.0) {
        return Err(Error::InvalidArgument("half width must be positive".into()));
    }
    let h = path.grid.cell_width::<f64>();
    let (lo, hi) = (u - half_width, u + half_width);
    let mut time = 0.0;
    for w in path.values.windows(2) {
        let (a, b) = if w[0] <= w[1] { (w[0], w[1]) } else { (w[1], w[0]) };
        if b - a <= 0.0 {
            if a >= lo && a <= hi {
                time += h;
            }
            continue;
        }
        let overlap = (b.min(hi) - a.max(lo)).max(0.0);
        time += h * overlap / (b - a);
    }
    Ok(time / (2.0 * half_width))
}

/// Occupation density on level bins `[k·w, (k+1)·w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationDensity {
    pub bin_edges: Vec<f64>,
    /// Time per unit level in each bin.
    pub masses: Vec<f64>,
    /// Index `k` of the first bin.
    pub first_bin: i64,
    pub bin_width: f64,
}

impl OccupationDensity {
    pub fn total_time(&self) -> f64 {
        self.masses.iter().sum::<f64>() * self.bin_width
    }

    /// `∫ density(u)^q du`.
    pub fn power_integral(&self, q: u32) -> f64 {
        self.masses.iter().map(|m| m.powi(q as i32)).sum::<f64>() * self.bin_width
    }
}

fn bin_range(lo: f64, hi: f64, width: f64) -> (i64, usize) {
    let first = (lo / width).floor() as i64;
    let last = (hi / width).floor() as i64;
    (first, (last - first + 1) as usize)
}

/// Histogram of the time the piecewise-linear path spends in each level bin,
/// with exact splitting of every segment across the bins it crosses.
pub fn occupation_histogram(path: &PathSample, bin_width: f64) -> Result<OccupationDensity> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::InvalidArgument("bin width must be positive".into()));
    }
    let (first, count) = bin_range(path.min(), path.max(), bin_width);
    occupation_on_bins(path, bin_width, first, count)
}

/// Histogram on the fixed bins `first, …, first + count − 1`, which must
/// cover the path's range.
pub fn occupation_on_bins(
    path: &PathSample,
    bin_width: f64,
    first: i64,
    count: usize,
) -> Result<OccupationDensity> {
    let h = path.grid.cell_width::<f64>();
    let mut time = vec![0.0; count];
    let index = |x: f64| -> Result<usize> {
        let k = (x / bin_width).floor() as i64 - first;
        if k < 0 || k as usize >= count {
            return Err(Error::InvalidArgument("bins do not cover the path".into()));
        }
        Ok(k as usize)
    };
    for w in path.values.windows(2) {
        let (a, b) = if w[0] <= w[1] { (w[0], w[1]) } else { (w[1], w[0]) };
        let ia = index(a)?;
        let ib = index(b)?;
        if ia == ib {
            time[ia] += h;
            continue;
        }
        let rate = h / (b - a);
        time[ia] += rate * ((first + ia as i64 + 1) as f64 * bin_width - a);
        for t in time.iter_mut().take(ib).skip(ia + 1) {
            *t += rate * bin_width;
        }
        time[ib] += rate * (b - (first + ib as i64) as f64 * bin_width);
    }
    let masses = time.iter().map(|t| t / bin_width).collect();
    let bin_edges = (0..=count)
        .map(|k| (first + k as i64) as f64 * bin_width)
        .collect();
    Ok(OccupationDensity {
        bin_edges,
        masses,
        first_bin: first,
        bin_width,
    })
}

/// Estimator settings shared by the Monte Carlo routines.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeConfig {
    pub schedule: Vec<f64>,
    /// Sub-cells per grid cell when refining paths for the mollified
    /// estimator.
    pub refinement: usize,
    /// Refinement for histogram functionals, whose discretisation excess
    /// grows like `h / bin_width`.
    pub histogram_refinement: usize,
    pub bin_width: f64,
}

impl Default for LocalTimeConfig {
    fn default() -> Self {
        Self {
            schedule: DEFAULT_SCHEDULE.to_vec(),
            refinement: DEFAULT_REFINEMENT,
            histogram_refinement: DEFAULT_HISTOGRAM_REFINEMENT,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

/// Process whose paths are replicated.
#[derive(Debug, Clone)]
pub enum PathSource {
    Integrator(IntegratorSampler),
    /// Independent bridges glued at the given jump points.
    Bridges { grid: Grid, jump_points: Vec<f64> },
}

impl PathSource {
    pub fn integrator(a: &OperatorSpec<f64>) -> Self {
        PathSource::Integrator(IntegratorSampler::new(a))
    }

    pub fn grid(&self) -> Grid {
        match self {
            PathSource::Integrator(s) => s.grid(),
            PathSource::Bridges { grid, .. } => *grid,
        }
    }

    pub fn path(&self, noise: &NoiseVector) -> Result<PathSample> {
        match self {
            PathSource::Integrator(s) => s.path(noise),
            PathSource::Bridges { jump_points, .. } => y_from_noise(jump_points, noise),
        }
    }

    /// Refined path of replicate `r`; noise and refinement share the
    /// replicate's stream.
    pub fn replicate(&self, seed: u64, r: usize, refinement: usize) -> Result<PathSample> {
        let mut rng = stream_rng(seed, r as u64);
        let noise = noise_from_rng(self.grid(), &mut rng, seed, r as u64);
        let path = self.path(&noise)?;
        if refinement > 1 {
            path.refined(refinement, &mut rng)
        } else {
            Ok(path)
        }
    }
}

fn estimate_from(values: impl IntoIterator<Item = f64>, n_samples: usize, seed: u64) -> MomentEstimate {
    let mut stats = RunningStats::default();
    values.into_iter().for_each(|v| stats.push(v));
    MomentEstimate {
        value: stats.mean,
        std_error: stats.std_error(),
        n_samples,
        seed,
        method: Method::MonteCarlo,
        rejected: n_samples - stats.count,
        sample_variance: stats.variance(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTimeMoment {
    pub order: usize,
    pub estimate: MomentEstimate,
    /// Replicates dropped because their ε-sweep did not converge.
    pub excluded: usize,
    pub flagged: bool,
}

/// `E l(u)^p` for each order from the same replicated paths.
pub fn local_time_moments(
    source: &PathSource,
    orders: &[usize],
    u: f64,
    reps: usize,
    seed: u64,
    cfg: &LocalTimeConfig,
) -> Result<Vec<LocalTimeMoment>> {
    check_schedule(&cfg.schedule)?;
    if reps == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    let sweeps: Vec<LocalTimeEstimate> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let path = source.replicate(seed, r, cfg.refinement)?;
            epsilon_sweep(&path, u, &cfg.schedule)
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<f64> = sweeps
        .iter()
        .filter(|s| s.converged)
        .map(|s| s.extrapolated)
        .collect();
    let excluded = reps - kept.len();
    let flagged = excluded as f64 > MAX_UNCONVERGED_FRACTION * reps as f64;
    Ok(orders
        .iter()
        .map(|&p| {
            let mut estimate = estimate_from(kept.iter().map(|l| l.powi(p as i32)), reps, seed);
            estimate.rejected = excluded;
            LocalTimeMoment {
                order: p,
                estimate,
                excluded,
                flagged,
            }
        })
        .collect())
}

/// `E l^x(u)^p` with the default estimator settings.
pub fn moment_mc(
    a: &OperatorSpec<f64>,
    p: usize,
    u: f64,
    reps: usize,
    seed: u64,
) -> Result<LocalTimeMoment> {
    let source = PathSource::integrator(a);
    let mut out = local_time_moments(&source, &[p], u, reps, seed, &LocalTimeConfig::default())?;
    Ok(out.remove(0))
}

/// `E ∫ l(u)^q du` for several `q`, from histograms at bin widths `b` and
/// `2b` combined as `2T(b) − T(2b)` to cancel the first-order bin bias.
pub fn level_integrated_moments(
    source: &PathSource,
    orders: &[u32],
    reps: usize,
    seed: u64,
    cfg: &LocalTimeConfig,
) -> Result<Vec<MomentEstimate>> {
    if reps == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    let per_rep: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let path = source.replicate(seed, r, cfg.histogram_refinement)?;
            let fine = occupation_histogram(&path, cfg.bin_width)?;
            let coarse = occupation_histogram(&path, 2.0 * cfg.bin_width)?;
            Ok(orders
                .iter()
                .map(|&q| 2.0 * fine.power_integral(q) - coarse.power_integral(q))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..orders.len())
        .map(|i| estimate_from(per_rep.iter().map(|v| v[i]), reps, seed))
        .collect())
}

pub fn u_integrated_moment_mc(a: &OperatorSpec<f64>, q: u32, reps: usize, seed: u64) -> Result<MomentEstimate> {
    let source = PathSource::integrator(a);
    let mut out = level_integrated_moments(&source, &[q], reps, seed, &LocalTimeConfig::default())?;
    Ok(out.remove(0))
}

fn require_invertible(a: &OperatorSpec<f64>) -> Result<f64> {
    if !a.kernel_basis().is_empty() {
        return Err(Error::NotInvertible(0.0));
    }
    a.restricted_inverse_norm()
}

/// `E ∫ (l^{x_n}(u) − l^x(u))^{2m} du` with both paths driven by the same
/// noise and the same within-cell bridges, on a common level grid.
pub fn l2m_distance(
    a_n: &OperatorSpec<f64>,
    a: &OperatorSpec<f64>,
    m: u32,
    reps: usize,
    seed: u64,
    cfg: &LocalTimeConfig,
) -> Result<MomentEstimate> {
    Ok(l2m_distances(a_n, a, &[m], reps, seed, cfg)?.remove(0))
}

/// [`l2m_distance`] for several exponents from the same coupled paths.
pub fn l2m_distances(
    a_n: &OperatorSpec<f64>,
    a: &OperatorSpec<f64>,
    ms: &[u32],
    reps: usize,
    seed: u64,
    cfg: &LocalTimeConfig,
) -> Result<Vec<MomentEstimate>> {
    a_n.grid().ensure_same(&a.grid())?;
    require_invertible(a_n)?;
    require_invertible(a)?;
    if ms.is_empty() || ms.contains(&0) || reps == 0 {
        return Err(Error::InvalidArgument("m and reps must be positive".into()));
    }
    let first = PathSource::integrator(a_n);
    let second = PathSource::integrator(a);
    let b = cfg.bin_width;
    let per_rep: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let x = first.replicate(seed, r, cfg.histogram_refinement)?;
            let y = second.replicate(seed, r, cfg.histogram_refinement)?;
            let pad = 3.0 * b;
            let lo = x.min().min(y.min()) - pad;
            let hi = x.max().max(y.max()) + pad;
            let (k0, count) = bin_range(lo, hi, b);
            let dx = occupation_on_bins(&x, b, k0, count)?;
            let dy = occupation_on_bins(&y, b, k0, count)?;
            Ok(ms
                .iter()
                .map(|&m| {
                    dx.masses
                        .iter()
                        .zip(&dy.masses)
                        .map(|(p, q)| (p - q).powi(2 * m as i32))
                        .sum::<f64>()
                        * b
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..ms.len())
        .map(|i| estimate_from(per_rep.iter().map(|v| v[i]), reps, seed))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::sample_wiener;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> Grid {
        Grid::uniform(n).unwrap()
    }

    #[test]
    fn linear_path_has_unit_density() {
        let p = PathSample::from_fn(grid(1024), |s| s - 0.5, "line");
        let est = epsilon_sweep(&p, 0.0, &DEFAULT_SCHEDULE).unwrap();
        assert!(est.converged);
        assert!((est.extrapolated - 1.0).abs() < 1e-3);
        let hist = occupation_histogram(&p, 0.05).unwrap();
        assert_relative_eq!(hist.total_time(), 1.0, epsilon = 1e-12);
        for &m in &hist.masses[1..hist.masses.len() - 1] {
            assert_relative_eq!(m, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn far_and_degenerate_levels() {
        let g = grid(256);
        let c = PathSample::deterministic(g, vec![5.0; 257], "const").unwrap();
        assert!(mollified_local_time(&c, 0.0, 0.01).unwrap() < 1e-12);
        let z = PathSample::deterministic(g, vec![0.0; 257], "zero").unwrap();
        let est = epsilon_sweep(&z, 0.0, &DEFAULT_SCHEDULE).unwrap();
        assert!(!est.converged);
        for (e, &eps) in est.estimates.iter().zip(&DEFAULT_SCHEDULE) {
            assert_relative_eq!(*e, 1.0 / (2.0 * PI * eps).sqrt(), max_relative = 1e-12);
        }
        assert!(epsilon_sweep(&z, 0.0, &[0.1, 0.01, 0.001]).is_err());
        assert!(epsilon_sweep(&z, 0.0, &[0.1, 0.2, 0.01, 0.001]).is_err());
    }

    #[test]
    fn histogram_conserves_time() {
        let p = sample_wiener(grid(512), 3);
        let mut rng = stream_rng(3, 99);
        let r = p.refined(4, &mut rng).unwrap();
        for bw in [0.2, 0.02, 0.003] {
            let h = occupation_histogram(&r, bw).unwrap();
            assert_relative_eq!(h.total_time(), 1.0, epsilon = 1e-12);
            assert!(h.masses.iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn coupled_identical_operators_are_distance_zero() {
        let a = OperatorSpec::identity(grid(128));
        let d = l2m_distance(&a, &a, 1, 20, 1, &LocalTimeConfig::default()).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn box_estimator_matches_time_in_band() {
        let p = PathSample::from_fn(grid(100), |s| s, "ramp");
        assert_relative_eq!(box_local_time(&p, 0.5, 0.1).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cell_average_closed_form_limit() {
        // A bridge with tiny variance agrees with the linear closed form.
        let lin = cell_average(-0.3, 0.2, 0.0, 0.01);
        let br = cell_average(-0.3, 0.2, 1e-14, 0.01);
        assert_relative_eq!(lin, br, max_relative = 1e-6);
    }

    fn brute_average(a: f64, b: f64, s2: f64, eps: f64) -> f64 {
        // Midpoint rule in θ with many points.
        let n = 200_000;
        let dt = PI / n as f64;
        (0..n)
            .map(|k| {
                let th = (k as f64 + 0.5) * dt;
                let tau = (1.0 - th.cos()) / 2.0;
                let m = a + (b - a) * tau;
                gaussian(m, s2 * tau * (1.0 - tau) + eps) * th.sin() / 2.0 * dt
            })
            .sum()
    }

    #[test]
    fn cell_rules_match_brute_force() {
        let s2 = 1.0 / 16384.0;
        // A node a hair away from the level leaves an unresolved cutoff.
        let cases = [(0.0, 0.01, 2e-4), (-0.004, 0.006, 2e-4), (0.01, 0.02, 2e-4), (1e-5, -2e-5, 2e-3), (0.02, 0.03, 2e-4)];
        for &(a, b, tol) in &cases {
            for &eps in &[s2 * 8.0, s2, s2 / 16.0, s2 / 4096.0, 1e-12] {
                let got = cell_average(a, b, s2, eps);
                let want = brute_average(a, b, s2, eps);
                assert!((got - want).abs() <= tol * want.max(1.0), "{a} {b} {eps}: {got} vs {want}");
            }
            let eps = CHORD_RATIO * s2;
            let chord = chord_sum(&[a, b], 0.0, eps + s2 / 6.0, 1e9);
            let want = brute_average(a, b, s2, eps);
            assert!((chord - want).abs() <= 1e-3 * want, "chord {a} {b}: {chord} vs {want}");
        }
    }
}
