//! Path generation by white-noise pairing.
//!
//! For `A = λI + Σ (·, r_k) l_k` the integrator is
//! `x(t) = λ w(t) + Σ_k (∫_0^t r_k) · (l_k, ξ)`, so a path costs
//! `O(n · rank)` and paths of different operators built from the same noise
//! are coupled exactly. Between nodes the path deviates from linear
//! interpolation by `λ` times an independent Brownian bridge, which
//! [`PathSample::refined`] samples exactly.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::linalg::sorted_eigen;
use crate::operators::OperatorSpec;
use crate::quadrature::RunningStats;
use crate::rng::{fill_normal, normal, stream_rng};
use crate::scalar::Real;

/// Discretised white noise: `ξ_k = z_k / √h` on cell `k`, so that
/// `(f, ξ) = h Σ f_k ξ_k` has variance `‖f‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector {
    grid: Grid,
    components: Vec<f64>,
    seed: u64,
    stream: u64,
}

impl NoiseVector {
    pub fn from_normals(grid: Grid, normals: &[f64]) -> Result<Self> {
        if normals.len() != grid.cells() {
            return Err(Error::InvalidArgument(format!(
                "expected {} normals, got {}",
                grid.cells(),
                normals.len()
            )));
        }
        let s = 1.0 / grid.cell_width::<f64>().sqrt();
        Ok(Self {
            grid,
            components: normals.iter().map(|z| z * s).collect(),
            seed: 0,
            stream: 0,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// `(f, ξ)`.
    pub fn pair<T: Real>(&self, f: &GridFunction<T>) -> Result<f64> {
        self.grid.ensure_same(&f.grid())?;
        Ok(self.pair_coeffs(f.coeffs().iter().map(|c| c.to_f64_lossy())))
    }

    fn pair_coeffs(&self, coeffs: impl Iterator<Item = f64>) -> f64 {
        let dot: f64 = coeffs.zip(&self.components).map(|(a, b)| a * b).sum();
        dot * self.grid.cell_width::<f64>()
    }

    /// `w(t_i) = (1_{[0,t_i]}, ξ)` at every node.
    fn wiener_nodes(&self) -> Vec<f64> {
        let h = self.grid.cell_width::<f64>();
        let mut out = Vec::with_capacity(self.components.len() + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for &x in &self.components {
            acc += x;
            out.push(acc * h);
        }
        out
    }
}

pub fn sample_noise(grid: Grid, seed: u64) -> NoiseVector {
    sample_noise_stream(grid, seed, 0)
}

/// Noise for replicate `stream` of a run seeded with `seed`.
pub fn sample_noise_stream(grid: Grid, seed: u64, stream: u64) -> NoiseVector {
    let mut rng = stream_rng(seed, stream);
    noise_from_rng(grid, &mut rng, seed, stream)
}

pub fn noise_from_rng<R: Rng + ?Sized>(grid: Grid, rng: &mut R, seed: u64, stream: u64) -> NoiseVector {
    let mut z = vec![0.0; grid.cells()];
    fill_normal(rng, &mut z);
    let mut noise = NoiseVector::from_normals(grid, &z).expect("length matches");
    noise.seed = seed;
    noise.stream = stream;
    noise
}

/// One realisation at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub grid: Grid,
    /// `n + 1` node values, starting with `0`.
    pub values: Vec<f64>,
    pub seed: u64,
    pub label: String,
    /// Scale of the Brownian bridge between consecutive nodes given the node
    /// values; zero for paths that are exactly piecewise linear.
    pub bridge_scale: f64,
}

impl PathSample {
    /// Piecewise-linear path through the given node values (no bridge part).
    pub fn deterministic(grid: Grid, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} node values, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        Ok(Self {
            grid,
            values,
            seed: 0,
            label: label.into(),
            bridge_scale: 0.0,
        })
    }

    /// Node values of `f(t)` (note `f(0)` is used as given).
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64, label: impl Into<String>) -> Self {
        let values = grid.nodes::<f64>().into_iter().map(f).collect();
        Self::deterministic(grid, values, label).expect("node count matches")
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn end(&self) -> f64 {
        *self.values.last().expect("at least two nodes")
    }

    /// Path on a grid `factor` times finer, filling each cell with the
    /// linear interpolant plus `bridge_scale` times an independent Brownian
    /// bridge.
    pub fn refined<R: Rng + ?Sized>(&self, factor: usize, rng: &mut R) -> Result<PathSample> {
        if factor == 0 {
            return Err(Error::InvalidArgument("refinement factor must be positive".into()));
        }
        let n = self.grid.cells();
        let fine = Grid::uniform(n * factor)?;
        let mut values = Vec::with_capacity(n * factor + 1);
        let sub_sd = (fine.cell_width::<f64>()).sqrt() * self.bridge_scale;
        let mut walk = vec![0.0; factor + 1];
        for k in 0..n {
            let (a, b) = (self.values[k], self.values[k + 1]);
            if self.bridge_scale != 0.0 {
                for j in 1..=factor {
                    walk[j] = walk[j - 1] + sub_sd * normal(rng);
                }
            }
            let end = walk[factor];
            for j in 0..factor {
                let s = j as f64 / factor as f64;
                let bridge = walk[j] - s * end;
                values.push(a + s * (b - a) + bridge);
            }
        }
        values.push(self.end());
        Ok(PathSample {
            grid: fine,
            values,
            seed: self.seed,
            label: self.label.clone(),
            bridge_scale: self.bridge_scale,
        })
    }
}

/// Precomputed pairing data for one operator.
#[derive(Debug, Clone)]
pub struct IntegratorSampler {
    grid: Grid,
    scale: f64,
    lefts: Vec<Vec<f64>>,
    /// `∫_0^{t_i} r_k` at each node, one vector per term.
    cum_rights: Vec<Vec<f64>>,
    label: String,
}

impl IntegratorSampler {
    pub fn new<T: Real>(a: &OperatorSpec<T>) -> Self {
        let grid = a.grid();
        let h = grid.cell_width::<f64>();
        let mut lefts = Vec::new();
        let mut cum_rights = Vec::new();
        for t in a.terms() {
            lefts.push(t.left.coeffs().iter().map(|c| c.to_f64_lossy()).collect());
            let mut acc = 0.0;
            let mut cum = Vec::with_capacity(grid.node_count());
            cum.push(0.0);
            for c in t.right.coeffs() {
                acc += c.to_f64_lossy();
                cum.push(acc * h);
            }
            cum_rights.push(cum);
        }
        Self {
            grid,
            scale: a.complement_scale().to_f64_lossy(),
            lefts,
            cum_rights,
            label: a.label().to_string(),
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Scale of the within-cell bridge.
    pub fn bridge_scale(&self) -> f64 {
        self.scale
    }

    pub fn path(&self, noise: &NoiseVector) -> Result<PathSample> {
        self.grid.ensure_same(&noise.grid)?;
        let mut values: Vec<f64> = noise.wiener_nodes().into_iter().map(|w| self.scale * w).collect();
        for (l, cum) in self.lefts.iter().zip(&self.cum_rights) {
            let xi = noise.pair_coeffs(l.iter().copied());
            if xi == 0.0 {
                continue;
            }
            for (v, &r) in values.iter_mut().zip(cum) {
                *v += r * xi;
            }
        }
        Ok(PathSample {
            grid: self.grid,
            values,
            seed: noise.seed,
            label: self.label.clone(),
            bridge_scale: self.scale,
        })
    }
}

/// `x(t_i) = (A 1_{[0,t_i]}, ξ)` at every node.
pub fn sample_integrator<T: Real>(a: &OperatorSpec<T>, noise: &NoiseVector) -> Result<PathSample> {
    IntegratorSampler::new(a).path(noise)
}

pub fn sample_wiener(grid: Grid, seed: u64) -> PathSample {
    let noise = sample_noise(grid, seed);
    PathSample {
        grid,
        values: noise.wiener_nodes(),
        seed,
        label: "wiener".into(),
        bridge_scale: 1.0,
    }
}

/// `w(t) − t·w(1)`.
pub fn sample_bridge(grid: Grid, seed: u64) -> PathSample {
    let mut path = sample_wiener(grid, seed);
    pin_segments(&mut path.values, &[0, grid.cells()]);
    path.label = "bridge".into();
    path
}

/// Subtracts the chord on every segment between consecutive knot nodes.
fn pin_segments(values: &mut [f64], knots: &[usize]) {
    let pins: Vec<f64> = knots.iter().map(|&k| values[k]).collect();
    for (w, p) in knots.windows(2).zip(pins.windows(2)) {
        let (a, b) = (w[0], w[1]);
        let (va, vb) = (p[0], p[1]);
        let len = (b - a) as f64;
        for (i, v) in values.iter_mut().enumerate().take(b + 1).skip(a) {
            let s = (i - a) as f64 / len;
            *v -= va + s * (vb - va);
        }
    }
}

/// Snaps jump points to nodes and checks they are strictly increasing and
/// interior.
pub fn snap_jump_points(grid: Grid, jump_points: &[f64]) -> Result<Vec<usize>> {
    let mut nodes = Vec::with_capacity(jump_points.len());
    let mut prev = 0;
    for &s in jump_points {
        let node = grid.snap(s)?.node;
        if node <= prev || node >= grid.cells() {
            return Err(Error::InvalidArgument(format!(
                "jump points must be increasing and strictly inside (0, 1): {s}"
            )));
        }
        nodes.push(node);
        prev = node;
    }
    Ok(nodes)
}

/// Independent Brownian bridges between `0`, the jump points, and `1`.
pub fn sample_y(jump_points: &[f64], grid: Grid, seed: u64) -> Result<PathSample> {
    y_from_noise(jump_points, &sample_noise(grid, seed))
}

pub fn y_from_noise(jump_points: &[f64], noise: &NoiseVector) -> Result<PathSample> {
    let grid = noise.grid;
    let mut knots = vec![0];
    knots.extend(snap_jump_points(grid, jump_points)?);
    knots.push(grid.cells());
    let mut values = noise.wiener_nodes();
    pin_segments(&mut values, &knots);
    for &k in &knots {
        values[k] = 0.0;
    }
    Ok(PathSample {
        grid,
        values,
        seed: noise.seed,
        label: "y".into(),
        bridge_scale: 1.0,
    })
}

/// Sampler through an eigen-factorisation of the node covariance, used to
/// cross-check the pairing route in distribution.
#[derive(Debug, Clone)]
pub struct CovarianceSampler {
    grid: Grid,
    factor: DMatrix<f64>,
}

impl CovarianceSampler {
    pub fn new<T: Real>(a: &OperatorSpec<T>) -> Result<Self> {
        let grid = a.grid();
        let times: Vec<f64> = grid.nodes::<f64>()[1..].to_vec();
        let cov = a.covariance(&times)?;
        let cov = DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| cov[(i, j)].to_f64_lossy());
        let (vals, vecs) = sorted_eigen(cov);
        let n = vals.len();
        let mut factor = vecs;
        for (j, &v) in vals.iter().enumerate().take(n) {
            let s = v.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(s);
        }
        Ok(Self { grid, factor })
    }

    pub fn path<R: Rng + ?Sized>(&self, rng: &mut R) -> PathSample {
        let n = self.factor.ncols();
        let mut z = vec![0.0; n];
        fill_normal(rng, &mut z);
        let x = &self.factor * nalgebra::DVector::from_vec(z);
        let mut values = Vec::with_capacity(n + 1);
        values.push(0.0);
        values.extend(x.iter());
        PathSample {
            grid: self.grid,
            values,
            seed: 0,
            label: "covariance-factor".into(),
            bridge_scale: 0.0,
        }
    }
}

/// Both sides of the integrator inequality
/// `E(Σ a_k Δx_k)² ≤ ‖A‖² Σ a_k² Δt_k` for a partition `cuts` (increasing,
/// from `0` to `1`, snapped to nodes). The left side is evaluated exactly as
/// `‖Σ a_k A 1_{Δ_k}‖²`.
pub fn integrator_inequality<T: Real>(
    a: &OperatorSpec<T>,
    cuts: &[f64],
    coeffs: &[f64],
) -> Result<(f64, f64)> {
    if cuts.len() != coeffs.len() + 1 {
        return Err(Error::InvalidArgument("need one coefficient per interval".into()));
    }
    let grid = a.grid();
    let mut step = GridFunction::<T>::zeros(grid);
    let mut rhs = 0.0;
    for (k, &c) in coeffs.iter().enumerate() {
        let piece = GridFunction::<T>::interval_indicator(grid, cuts[k], cuts[k + 1])?;
        rhs += c * c * piece.norm_sq().to_f64_lossy();
        step.axpy(T::lit(c), &piece)?;
    }
    let lhs = a.apply(&step)?.norm_sq().to_f64_lossy();
    let norm = a.operator_norm().to_f64_lossy();
    Ok((lhs, norm * norm * rhs))
}

/// Monte Carlo estimate of `E(Σ a_k Δx_k)²` from sampled paths, for
/// node-aligned cuts.
pub fn integrator_inequality_mc<T: Real>(
    a: &OperatorSpec<T>,
    cuts: &[f64],
    coeffs: &[f64],
    reps: usize,
    seed: u64,
) -> Result<RunningStats> {
    let grid = a.grid();
    let sampler = IntegratorSampler::new(a);
    let nodes = cuts
        .iter()
        .map(|&t| grid.snap(t).map(|s| s.node))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let path = sampler
                .path(&sample_noise_stream(grid, seed, r as u64))
                .expect("same grid");
            let s: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * (path.values[nodes[k + 1]] - path.values[nodes[k]]))
                .sum();
            s * s
        })
        .collect();
    let mut stats = RunningStats::default();
    values.into_iter().for_each(|v| stats.push(v));
    Ok(stats)
}

/// Paired Monte Carlo comparison of `E max x` against `‖A‖ · E max w` with
/// the comparison Wiener path built from the same noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupremumComparison {
    pub max_integrator: RunningStats,
    pub max_scaled_wiener: RunningStats,
    /// Per-replicate `max x − ‖A‖ max w`.
    pub difference: RunningStats,
}

impl SupremumComparison {
    /// `E max x ≤ ‖A‖ E max w` up to `z` standard errors of the paired
    /// difference.
    pub fn holds(&self, z: f64) -> bool {
        self.difference.mean <= z * self.difference.std_error()
    }
}

pub fn supremum_comparison<T: Real>(a: &OperatorSpec<T>, reps: usize, seed: u64) -> SupremumComparison {
    let grid = a.grid();
    let sampler = IntegratorSampler::new(a);
    let norm = a.operator_norm().to_f64_lossy();
    let pairs: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let noise = sample_noise_stream(grid, seed, r as u64);
            let x = sampler.path(&noise).expect("same grid");
            let w = noise.wiener_nodes();
            let wmax = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (x.max(), norm * wmax)
        })
        .collect();
    let mut out = SupremumComparison {
        max_integrator: RunningStats::default(),
        max_scaled_wiener: RunningStats::default(),
        difference: RunningStats::default(),
    };
    for (x, w) in pairs {
        out.max_integrator.push(x);
        out.max_scaled_wiener.push(w);
        out.difference.push(x - w);
    }
    out
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> Grid {
        Grid::uniform(n).unwrap()
    }

    fn bridge_op(g: Grid) -> OperatorSpec<f64> {
        OperatorSpec::complement_projection(g, &[GridFunction::constant(g, 1.0)]).unwrap()
    }

    #[test]
    fn noise_is_deterministic_and_linear() {
        let g = grid(32);
        let a = sample_noise(g, 4);
        assert_eq!(a, sample_noise(g, 4));
        assert_ne!(a, sample_noise(g, 5));
        let f = GridFunction::<f64>::from_fn(g, |t| t * t);
        let h = GridFunction::<f64>::from_fn(g, |t| 1.0 - t);
        let lhs = a.pair(&(&f.scaled(2.0) + &h)).unwrap();
        let rhs = 2.0 * a.pair(&f).unwrap() + a.pair(&h).unwrap();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-13);
        assert_eq!(a.pair(&GridFunction::<f64>::zeros(g)).unwrap(), 0.0);
    }

    #[test]
    fn integrator_path_matches_pairing_definition() {
        let g = grid(16);
        let d = OperatorSpec::cosine_diagonal(g, &[0.5, 2.0, 1.0, 0.25], 1.5).unwrap();
        let noise = sample_noise(g, 8);
        let path = sample_integrator(&d, &noise).unwrap();
        assert_eq!(path.values[0], 0.0);
        for (i, t) in g.nodes::<f64>().into_iter().enumerate() {
            let direct = noise.pair(&d.g_curve(t).unwrap()).unwrap();
            assert_relative_eq!(path.values[i], direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn bridge_paths_end_at_zero() {
        let g = grid(1024);
        let a = bridge_op(g);
        for seed in 0..5 {
            let p = sample_integrator(&a, &sample_noise(g, seed)).unwrap();
            assert_eq!(p.end(), 0.0);
            assert_eq!(sample_bridge(g, seed).end(), 0.0);
        }
    }

    #[test]
    fn coupling_is_linear() {
        let g = grid(64);
        let a1 = bridge_op(g);
        let a2 = OperatorSpec::cosine_diagonal(g, &[1.0, 0.5, 1.5], 1.0).unwrap();
        let noise = sample_noise(g, 1);
        let x1 = sample_integrator(&a1, &noise).unwrap();
        let x2 = sample_integrator(&a2, &noise).unwrap();
        for (i, t) in g.nodes::<f64>().into_iter().enumerate() {
            let diff = &a1.g_curve(t).unwrap() - &a2.g_curve(t).unwrap();
            assert_relative_eq!(x1.values[i] - x2.values[i], noise.pair(&diff).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn y_is_pinned_at_jump_points() {
        let g = grid(64);
        let y = sample_y(&[0.5], g, 3).unwrap();
        assert_eq!(y.values[32], 0.0);
        assert_eq!(y.values[0], 0.0);
        assert_eq!(y.end(), 0.0);
        assert!(sample_y(&[0.7, 0.3], g, 3).is_err());
        assert!(sample_y(&[1.0], g, 3).is_err());
    }

    #[test]
    fn y_segments_are_independent_bridges() {
        // Half-length bridges: Var y(1/4) = Var y(3/4) = 1/8, uncorrelated.
        let g = grid(16);
        let (mut v1, mut v3, mut c, mut step) = (0.0, 0.0, 0.0, 0.0f64);
        let reps = 20_000;
        for r in 0..reps {
            let y = y_from_noise(&[0.5], &sample_noise_stream(g, 11, r)).unwrap();
            v1 += y.values[4] * y.values[4];
            v3 += y.values[12] * y.values[12];
            c += y.values[4] * y.values[12];
            step = step.max((y.values[9] - y.values[8]).abs());
        }
        let n = reps as f64;
        assert!((v1 / n - 0.125).abs() < 0.006, "{}", v1 / n);
        assert!((v3 / n - 0.125).abs() < 0.006, "{}", v3 / n);
        assert!((c / n).abs() < 0.005, "{}", c / n);
        assert!(step < 1.5, "{step}");
    }

    #[test]
    fn refinement_keeps_nodes() {
        let g = grid(8);
        let p = sample_wiener(g, 2);
        let mut rng = stream_rng(0, 0);
        let r = p.refined(4, &mut rng).unwrap();
        assert_eq!(r.values.len(), 33);
        for k in 0..=8 {
            assert_relative_eq!(r.values[4 * k], p.values[k], epsilon = 1e-15);
        }
        let lin = PathSample::from_fn(g, |t| t - 0.5, "line");
        let r = lin.refined(3, &mut rng).unwrap();
        assert_relative_eq!(r.values[1], 1.0 / 24.0 - 0.5, epsilon = 1e-15);
    }

    #[test]
    fn inequality_exact_side() {
        let g = grid(32);
        let d = OperatorSpec::cosine_diagonal(g, &[0.3, 2.0, 1.1], 0.7).unwrap();
        let (lhs, rhs) = integrator_inequality(&d, &[0.0, 0.25, 0.5, 1.0], &[1.0, -2.0, 0.5]).unwrap();
        assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = stream_rng(1, 0);
        let a: Vec<f64> = (0..2000).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| normal(&mut rng)).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.001);
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
    }
}
