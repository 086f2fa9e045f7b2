//! Step-function discretisation of L²([0,1]) on a uniform grid.
//!
//! A [`GridFunction`] holds one value per cell; inner products of step
//! functions are exact sums. Time arguments of indicators snap to the
//! nearest node so that every indicator is itself a grid function.

use std::ops::{Add, Mul, Sub};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform partition of [0,1] into `n` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    n: usize,
}

/// Result of snapping a time to the nearest grid node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snap {
    pub node: usize,
    /// `|t - node/n|`; zero for node-aligned times.
    pub distance: f64,
}

impl Grid {
    pub const DEFAULT_CELLS: usize = 1024;

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(Self { n })
    }

    pub fn cells(&self) -> usize {
        self.n
    }

    pub fn node_count(&self) -> usize {
        self.n + 1
    }

    pub fn cell_width<T: Real>(&self) -> T {
        T::one() / T::lit(self.n as f64)
    }

    pub fn node<T: Real>(&self, k: usize) -> T {
        if k == self.n {
            T::one()
        } else {
            T::lit(k as f64) / T::lit(self.n as f64)
        }
    }

    pub fn nodes<T: Real>(&self) -> Vec<T> {
        (0..=self.n).map(|k| self.node(k)).collect()
    }

    /// Midpoint of cell `k`.
    pub fn midpoint(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.n as f64
    }

    pub fn snap(&self, t: f64) -> Result<Snap> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let node = ((t * self.n as f64).round() as usize).min(self.n);
        let distance = (t - node as f64 / self.n as f64).abs();
        Ok(Snap { node, distance })
    }

    /// Cell containing `t` together with the fractional position inside it.
    /// `t = 1` maps to the last cell with fraction 1.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let scaled = t * self.n as f64;
        let k = (scaled.floor() as usize).min(self.n - 1);
        (k, scaled - k as f64)
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.n != other.n {
            return Err(Error::GridMismatch {
                left: self.n,
                right: other.n,
            });
        }
        Ok(())
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n: Self::DEFAULT_CELLS,
        }
    }
}

/// Step function with one coefficient per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T: Real> {
    grid: Grid,
    coeffs: Vec<T>,
}

impl<T: Real> GridFunction<T> {
    pub fn new(grid: Grid, coeffs: Vec<T>) -> Result<Self> {
        if coeffs.len() != grid.cells() {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                grid.cells(),
                coeffs.len()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            coeffs: vec![T::zero(); grid.cells()],
        }
    }

    pub fn constant(grid: Grid, value: T) -> Self {
        Self {
            grid,
            coeffs: vec![value; grid.cells()],
        }
    }

    /// Samples `f` at cell midpoints.
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let coeffs = (0..grid.cells())
            .map(|k| T::lit(f(grid.midpoint(k))))
            .collect();
        Self { grid, coeffs }
    }

    /// Unit coefficient on cell `k`, zero elsewhere.
    pub fn cell(grid: Grid, k: usize) -> Self {
        let mut f = Self::zeros(grid);
        f.coeffs[k] = T::one();
        f
    }

    /// `1_{[0,t]}` with `t` snapped to the nearest node.
    pub fn indicator(grid: Grid, t: f64) -> Result<Self> {
        Ok(Self::indicator_snapped(grid, t)?.0)
    }

    pub fn indicator_snapped(grid: Grid, t: f64) -> Result<(Self, Snap)> {
        let snap = grid.snap(t)?;
        let mut f = Self::zeros(grid);
        f.coeffs[..snap.node].fill(T::one());
        Ok((f, snap))
    }

    /// `1_{[a,b]}` with both ends snapped.
    pub fn interval_indicator(grid: Grid, a: f64, b: f64) -> Result<Self> {
        let lo = grid.snap(a)?.node;
        let hi = grid.snap(b)?.node;
        let mut f = Self::zeros(grid);
        if hi > lo {
            f.coeffs[lo..hi].fill(T::one());
        }
        Ok(f)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [T] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<T> {
        self.coeffs
    }

    pub fn inner(&self, other: &Self) -> Result<T> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self.inner_unchecked(other))
    }

    pub(crate) fn inner_unchecked(&self, other: &Self) -> T {
        let dot: T = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(&a, &b)| a * b)
            .sum();
        dot * self.grid.cell_width::<T>()
    }

    pub fn norm_sq(&self) -> T {
        self.inner_unchecked(self)
    }

    pub fn norm(&self) -> T {
        Float::sqrt(self.norm_sq())
    }

    pub fn max_abs(&self) -> T {
        self.coeffs
            .iter()
            .fold(T::zero(), |m, &c| Float::max(m, Float::abs(c)))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_zero())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            grid: self.grid,
            coeffs: self.coeffs.iter().map(|&c| c * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        for (a, &b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
        Ok(())
    }

    /// `Σ weights[i] * fs[i]`.
    pub fn combination(grid: Grid, weights: &[T], fs: &[Self]) -> Result<Self> {
        let mut out = Self::zeros(grid);
        for (&w, f) in weights.iter().zip(fs) {
            out.axpy(w, f)?;
        }
        Ok(out)
    }

    /// Integral of the step function over `[0, t]` for continuous `t`.
    pub fn integral_to(&self, t: f64) -> T {
        self.integral_over(0.0, t)
    }

    /// Integral over `[a, b]` (continuous endpoints, `a <= b`).
    pub fn integral_over(&self, a: f64, b: f64) -> T {
        if b <= a {
            return T::zero();
        }
        let h = self.grid.cell_width::<f64>();
        let (ka, fa) = self.grid.locate(a);
        let (kb, fb) = self.grid.locate(b);
        if ka == kb {
            return self.coeffs[ka] * T::lit(b - a);
        }
        let mut acc = self.coeffs[ka] * T::lit((1.0 - fa) * h);
        for &c in &self.coeffs[ka + 1..kb] {
            acc += c * T::lit(h);
        }
        acc + self.coeffs[kb] * T::lit(fb * h)
    }

    /// Interior nodes where adjacent cell values differ by more than
    /// `rel_tol * max|coeff|`.
    pub fn jump_nodes(&self, rel_tol: T) -> Vec<usize> {
        let scale = self.max_abs();
        let tol = rel_tol * scale;
        (1..self.grid.cells())
            .filter(|&k| Float::abs(self.coeffs[k] - self.coeffs[k - 1]) > tol)
            .collect()
    }
}

impl<T: Real> Add for &GridFunction<T> {
    type Output = GridFunction<T>;

    fn add(self, rhs: Self) -> GridFunction<T> {
        assert_eq!(self.grid, rhs.grid, "grid mismatch");
        GridFunction {
            grid: self.grid,
            coeffs: self
                .coeffs
                .iter()
                .zip(&rhs.coeffs)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }
}

impl<T: Real> Sub for &GridFunction<T> {
    type Output = GridFunction<T>;

    fn sub(self, rhs: Self) -> GridFunction<T> {
        assert_eq!(self.grid, rhs.grid, "grid mismatch");
        GridFunction {
            grid: self.grid,
            coeffs: self
                .coeffs
                .iter()
                .zip(&rhs.coeffs)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }
}

impl<T: Real> Mul<T> for &GridFunction<T> {
    type Output = GridFunction<T>;

    fn mul(self, s: T) -> GridFunction<T> {
        self.scaled(s)
    }
}

/// Prefix sums of a grid function for O(1) interval integrals.
///
/// Very short intervals (at most two cells) are integrated directly so that
/// their relative accuracy does not depend on the magnitude of the prefix.
#[derive(Debug, Clone)]
pub struct CumulativeIntegral {
    grid: Grid,
    coeffs: Vec<f64>,
    prefix: Vec<f64>,
}

impl CumulativeIntegral {
    pub fn new<T: Real>(f: &GridFunction<T>) -> Self {
        let h = f.grid.cell_width::<f64>();
        let coeffs: Vec<f64> = f.coeffs.iter().map(|c| c.to_f64_lossy()).collect();
        let mut prefix = Vec::with_capacity(coeffs.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for &c in &coeffs {
            acc += c * h;
            prefix.push(acc);
        }
        Self {
            grid: f.grid,
            coeffs,
            prefix,
        }
    }

    fn at(&self, k: usize, frac: f64) -> f64 {
        self.prefix[k] + frac * self.coeffs[k] * self.grid.cell_width::<f64>()
    }

    pub fn over(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let h = self.grid.cell_width::<f64>();
        let (ka, fa) = self.grid.locate(a);
        let (kb, fb) = self.grid.locate(b);
        match kb - ka {
            0 => self.coeffs[ka] * (b - a),
            1 => self.coeffs[ka] * (1.0 - fa) * h + self.coeffs[kb] * fb * h,
            _ => self.at(kb, fb) - self.at(ka, fa),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_construction() {
        assert_eq!(Grid::uniform(0), Err(Error::EmptyGrid));
        let g = Grid::uniform(1).unwrap();
        assert_eq!(g.nodes::<f64>(), vec![0.0, 1.0]);
        let g = Grid::uniform(4).unwrap();
        assert_eq!(g.cell_width::<f64>(), 0.25);
        let g = Grid::default();
        let nodes = g.nodes::<f64>();
        assert_eq!(nodes.len(), 1025);
        assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(nodes[0], 0.0);
        assert_eq!(nodes[1024], 1.0);
        assert!((g.cell_width::<f64>() * 1024.0 - 1.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn indicator_endpoints() {
        let g = Grid::uniform(8).unwrap();
        let zero = GridFunction::<f64>::indicator(g, 0.0).unwrap();
        assert!(zero.is_zero());
        let one = GridFunction::<f64>::indicator(g, 1.0).unwrap();
        assert!(one.coeffs().iter().all(|&c| c == 1.0));
        assert!(GridFunction::<f64>::indicator(g, 1.5).is_err());
        assert!(GridFunction::<f64>::indicator(g, -0.1).is_err());
    }

    #[test]
    fn indicator_overlaps() {
        let g = Grid::uniform(16).unwrap();
        let a = GridFunction::<f64>::indicator(g, 0.5).unwrap();
        let b = GridFunction::<f64>::indicator(g, 0.75).unwrap();
        assert_eq!(a.inner(&b).unwrap(), 0.5);
        let left = GridFunction::<f64>::interval_indicator(g, 0.0, 0.5).unwrap();
        let right = GridFunction::<f64>::interval_indicator(g, 0.5, 1.0).unwrap();
        assert_eq!(left.inner(&right).unwrap(), 0.0);
        let mid = GridFunction::<f64>::interval_indicator(g, 0.25, 0.875).unwrap();
        assert_eq!(mid.inner(&mid).unwrap(), 0.625);
    }

    #[test]
    fn snapping_reports_distance() {
        let g = Grid::uniform(10).unwrap();
        let (_, snap) = GridFunction::<f64>::indicator_snapped(g, 0.33).unwrap();
        assert_eq!(snap.node, 3);
        assert!((snap.distance - 0.03).abs() < 1e-12);
        let (_, snap) = GridFunction::<f64>::indicator_snapped(g, 0.3).unwrap();
        assert!(snap.distance < 1e-15);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = GridFunction::<f64>::zeros(Grid::uniform(4).unwrap());
        let b = GridFunction::<f64>::zeros(Grid::uniform(8).unwrap());
        assert!(matches!(a.inner(&b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn continuous_integrals() {
        let g = Grid::uniform(4).unwrap();
        let f = GridFunction::<f64>::new(g, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((f.integral_to(1.0) - 2.5).abs() < 1e-15);
        assert!((f.integral_over(0.125, 0.375) - (0.125 + 0.25)).abs() < 1e-15);
        let cum = CumulativeIntegral::new(&f);
        for &(a, b) in &[(0.0, 1.0), (0.1, 0.2), (0.1, 0.3), (0.05, 0.95), (0.3, 0.3)] {
            assert!((cum.over(a, b) - f.integral_over(a, b)).abs() < 1e-14);
        }
    }

    #[test]
    fn jumps_of_step_function() {
        let g = Grid::uniform(8).unwrap();
        let f = &GridFunction::<f64>::interval_indicator(g, 0.0, 0.5).unwrap()
            - &GridFunction::<f64>::interval_indicator(g, 0.5, 1.0).unwrap();
        assert_eq!(f.jump_nodes(1e-12), vec![4]);
        assert!(GridFunction::<f64>::constant(g, 1.0).jump_nodes(1e-12).is_empty());
    }
}
