//! Singular simplex integrals `∫_Δ dt / √G(·)` and their closed forms.
//!
//! Points of the simplex are drawn through their spacings from a Dirichlet
//! proposal whose exponents match the inverse-square-root faces of the
//! integrand, so for the Wiener process (and, with a half exponent on the
//! last spacing, the bridge) every importance weight is the same number.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gram::gram_det_of_matrix;
use crate::operators::{IncrementCovariance, OperatorSpec};
use crate::rng::{normal, open01, stream_rng};

pub const MAX_ORDER: usize = 8;
pub const MIN_SAMPLES: usize = 1000;
/// Largest tolerated fraction of samples at clamped (singular) points.
pub const MAX_REJECTED_FRACTION: f64 = 0.01;
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MonteCarlo,
    ClosedForm,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MonteCarlo => "monte_carlo",
            Method::ClosedForm => "closed_form",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub method: Method,
    /// Samples dropped because the integrand was singular there.
    pub rejected: usize,
    /// Sample variance of the per-sample contributions.
    pub sample_variance: f64,
}

impl MomentEstimate {
    pub fn closed_form(value: f64) -> Self {
        Self {
            value,
            std_error: 0.0,
            n_samples: 1,
            seed: 0,
            method: Method::ClosedForm,
            rejected: 0,
            sample_variance: 0.0,
        }
    }

    /// Multiplies value and standard error by `c`.
    pub fn scaled(mut self, c: f64) -> Self {
        self.value *= c;
        self.std_error *= c.abs();
        self.sample_variance *= c * c;
        self
    }

    /// `|self − other| / √(se₁² + se₂²)`; infinite if both errors vanish and
    /// the values differ.
    pub fn z_score(&self, other: &MomentEstimate) -> f64 {
        let se = self.std_error.hypot(other.std_error);
        let d = (self.value - other.value).abs();
        if se == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d / se
        }
    }
}

/// Mean and variance accumulator with the parallel merge rule.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(self, other: Self) -> Self {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.count as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * (self.count as f64 * other.count as f64) / n as f64;
        Self { count: n, mean, m2 }
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Dirichlet proposal over `len` spacings with exponents `½` or `1`.
#[derive(Debug, Clone)]
struct Proposal {
    half: Vec<bool>,
    log_norm: f64,
}

impl Proposal {
    fn new(half: Vec<bool>) -> Self {
        let alpha: Vec<f64> = half.iter().map(|&h| if h { 0.5 } else { 1.0 }).collect();
        let total: f64 = alpha.iter().sum();
        let log_norm = libm::lgamma(total) - alpha.iter().map(|&a| libm::lgamma(a)).sum::<f64>();
        Self { half, log_norm }
    }

    /// Fills `spacings` (summing to one) and returns the proposal density.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, spacings: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for (s, &h) in spacings.iter_mut().zip(&self.half) {
            *s = if h {
                let z = normal(rng);
                0.5 * z * z
            } else {
                -open01(rng).ln()
            };
            total += *s;
        }
        let mut density = self.log_norm.exp();
        for (s, &h) in spacings.iter_mut().zip(&self.half) {
            *s /= total;
            if h {
                density /= s.sqrt();
            }
        }
        density
    }
}

/// Which simplex integral to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Integrand {
    /// `1/√G(A1_{[0,t_1]}, A1_{[t_1,t_2]}, …, A1_{[t_{p−1},t_p]})`.
    Moment,
    /// `1/√G(A1_{[t_1,t_2]}, …, A1_{[t_{q−1},t_q]})`.
    LevelIntegrated,
}

struct Sampler<'a> {
    cov: &'a IncrementCovariance,
    proposal: Proposal,
    order: usize,
    integrand: Integrand,
}

impl Sampler<'_> {
    fn intervals(&self) -> usize {
        match self.integrand {
            Integrand::Moment => self.order,
            Integrand::LevelIntegrated => self.order - 1,
        }
    }

    fn block(&self, seed: u64, block: usize, count: usize) -> (RunningStats, usize) {
        let mut rng = stream_rng(seed, block as u64);
        let mut stats = RunningStats::default();
        let mut rejected = 0;
        let k = self.intervals();
        let mut spacings = vec![0.0; self.order + 1];
        let mut ivs = vec![(0.0, 0.0); k];
        let mut lens = vec![0.0; k];
        let mut c = DMatrix::zeros(k, k);
        let mut scratch = vec![0.0; 2 * k * self.cov.rank()];
        let first = match self.integrand {
            Integrand::Moment => 0,
            Integrand::LevelIntegrated => 1,
        };
        for _ in 0..count {
            let q = self.proposal.draw(&mut rng, &mut spacings);
            let mut t = 0.0;
            for (i, &s) in spacings.iter().enumerate().take(first + k) {
                let next = t + s;
                if i >= first {
                    ivs[i - first] = (t, next);
                    lens[i - first] = s;
                }
                t = next;
            }
            let g = if k == 0 {
                1.0
            } else {
                self.cov.fill_consecutive(&ivs, &lens, &mut c, &mut scratch);
                let r = gram_det_of_matrix(&c);
                if r.clamped {
                    rejected += 1;
                    continue;
                }
                r.value
            };
            let w = 1.0 / (g.sqrt() * q);
            if !w.is_finite() {
                rejected += 1;
                continue;
            }
            stats.push(w);
        }
        (stats, rejected)
    }

    fn run(&self, n_samples: usize, seed: u64) -> Result<MomentEstimate> {
        let blocks = n_samples.div_ceil(BLOCK);
        let parts: Vec<(RunningStats, usize)> = (0..blocks)
            .into_par_iter()
            .map(|b| self.block(seed, b, BLOCK.min(n_samples - b * BLOCK)))
            .collect();
        let mut stats = RunningStats::default();
        let mut rejected = 0;
        for (s, r) in parts {
            stats = stats.merge(s);
            rejected += r;
        }
        if rejected as f64 > MAX_REJECTED_FRACTION * n_samples as f64 || stats.count == 0 {
            return Err(Error::TooManyRejections {
                rejected,
                total: n_samples,
            });
        }
        Ok(MomentEstimate {
            value: stats.mean,
            std_error: stats.std_error(),
            n_samples,
            seed,
            method: Method::MonteCarlo,
            rejected,
            sample_variance: stats.variance(),
        })
    }
}

fn check_args(p: usize, n_samples: usize) -> Result<()> {
    if p == 0 || p > MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "order must be in 1..={MAX_ORDER}, got {p}"
        )));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    Ok(())
}

/// True when `A1_{[0,1]} = 0`, i.e. the process is pinned at time one.
fn pinned_at_end(cov: &IncrementCovariance) -> bool {
    cov.matrix(&[(0.0, 1.0)])[(0, 0)] < 1e-12
}

/// Importance-sampling estimate of `∫_{Δ_p} dt / √G(g(t_1), …, g(t_p))`.
pub fn simplex_inv_sqrt_gram(
    a: &OperatorSpec<f64>,
    p: usize,
    n_samples: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    check_args(p, n_samples)?;
    let cov = IncrementCovariance::new(a);
    let mut half = vec![true; p + 1];
    half[p] = pinned_at_end(&cov);
    let sampler = Sampler {
        cov: &cov,
        proposal: Proposal::new(half),
        order: p,
        integrand: Integrand::Moment,
    };
    sampler.run(n_samples, seed)
}

fn factorial(p: usize) -> f64 {
    (1..=p).map(|k| k as f64).product()
}

/// `E l(0)^p = p!/(2π)^{p/2} · ∫_{Δ_p} dt/√G`.
pub fn moment_via_quadrature(
    a: &OperatorSpec<f64>,
    p: usize,
    n_samples: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    let est = simplex_inv_sqrt_gram(a, p, n_samples, seed)?;
    Ok(est.scaled(factorial(p) / (2.0 * PI).powf(p as f64 / 2.0)))
}

/// `∫_{Δ_q} dt / √G(A1_{[t_1,t_2]}, …, A1_{[t_{q−1},t_q]})`.
pub fn level_integrated_simplex(
    a: &OperatorSpec<f64>,
    q: usize,
    n_samples: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    check_args(q, n_samples)?;
    let cov = IncrementCovariance::new(a);
    let mut half = vec![true; q + 1];
    half[0] = false;
    half[q] = false;
    let sampler = Sampler {
        cov: &cov,
        proposal: Proposal::new(half),
        order: q,
        integrand: Integrand::LevelIntegrated,
    };
    sampler.run(n_samples, seed)
}

/// `E ∫ l(u)^q du = q!/(2π)^{(q−1)/2} · ∫_{Δ_q} dt/√G(increments)`.
pub fn level_integrated_moment_via_quadrature(
    a: &OperatorSpec<f64>,
    q: usize,
    n_samples: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    let est = level_integrated_simplex(a, q, n_samples, seed)?;
    Ok(est.scaled(factorial(q) / (2.0 * PI).powf((q as f64 - 1.0) / 2.0)))
}

/// `E (l^w)^p` at level zero for the Wiener process: `p!/(2^{p/2}Γ(p/2+1))`.
pub fn wiener_moment_closed_form(p: usize) -> f64 {
    factorial(p) / (2f64.powf(p as f64 / 2.0) * libm::tgamma(p as f64 / 2.0 + 1.0))
}

/// `E (l^w)^k` at level zero for the standard bridge: `2^{k/2}Γ(k/2+1)`
/// (Rayleigh moments). Order zero gives one.
pub fn bridge_moment_closed_form(k: usize) -> f64 {
    2f64.powf(k as f64 / 2.0) * libm::tgamma(k as f64 / 2.0 + 1.0)
}

/// `E ∫ l^w(u)^q du` for the Wiener process on `[0,1]`.
pub fn wiener_level_integrated_closed_form(q: usize) -> f64 {
    factorial(q) / 2f64.powf((q as f64 - 1.0) / 2.0) / libm::tgamma((q as f64 + 3.0) / 2.0)
}

/// Segment lengths between `0`, the jump points, and `1`.
pub fn segment_lengths(jump_points: &[f64]) -> Result<Vec<f64>> {
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(jump_points.len() + 1);
    for &s in jump_points {
        if !(s > prev && s < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "jump points must be strictly increasing inside (0, 1), got {s}"
            )));
        }
        out.push(s - prev);
        prev = s;
    }
    out.push(1.0 - prev);
    Ok(out)
}

/// `E (l^y)^p` at level zero for independent bridges glued at the jump
/// points. Segment `j` contributes `√h_j` times a unit bridge local time.
pub fn y_moment_closed_form(jump_points: &[f64], p: usize) -> Result<f64> {
    let lengths = segment_lengths(jump_points)?;
    // acc[k] = E S^k / k! for the partial sum S over processed segments.
    let mut acc = vec![0.0; p + 1];
    acc[0] = 1.0;
    for h in lengths {
        let seg: Vec<f64> = (0..=p)
            .map(|k| h.powf(k as f64 / 2.0) * bridge_moment_closed_form(k) / factorial(k))
            .collect();
        let mut next = vec![0.0; p + 1];
        for i in 0..=p {
            for j in 0..=p - i {
                next[i + j] += acc[i] * seg[j];
            }
        }
        acc = next;
    }
    Ok(acc[p] * factorial(p))
}

/// Joint density of `(l^w(0, 1), w(1))`: `(|b|+a) e^{−(|b|+a)²/2} / √(2π)`
/// for `a ≥ 0`.
pub fn wiener_local_time_joint_density(a: f64, b: f64) -> f64 {
    if a < 0.0 {
        return 0.0;
    }
    let s = b.abs() + a;
    s * (-0.5 * s * s).exp() / (2.0 * PI).sqrt()
}

/// `∫_Δ Π d_i^{α_i − 1}` over the spacings of the simplex:
/// `Π Γ(α_i) / Γ(Σ α_i)`.
pub fn dirichlet_integral(alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    alpha.iter().map(|&a| libm::tgamma(a)).product::<f64>() / libm::tgamma(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, GridFunction};
    use approx::assert_relative_eq;

    fn bridge(n: usize) -> OperatorSpec<f64> {
        let g = Grid::uniform(n).unwrap();
        OperatorSpec::complement_projection(g, &[GridFunction::constant(g, 1.0)]).unwrap()
    }

    #[test]
    fn closed_form_values() {
        assert_relative_eq!(wiener_moment_closed_form(1), (2.0 / PI).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(wiener_moment_closed_form(2), 1.0, epsilon = 1e-15);
        assert_relative_eq!(wiener_moment_closed_form(3), 2.0 * (2.0 / PI).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(bridge_moment_closed_form(1), (PI / 2.0).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(bridge_moment_closed_form(2), 2.0, epsilon = 1e-14);
        assert_relative_eq!(bridge_moment_closed_form(4), 8.0, epsilon = 1e-13);
        assert_relative_eq!(
            wiener_level_integrated_closed_form(2),
            2.0 / (2.0 * PI).sqrt() * 4.0 / 3.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(wiener_level_integrated_closed_form(3), 1.5, epsilon = 1e-14);
        assert_relative_eq!(wiener_level_integrated_closed_form(1), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn y_moments() {
        assert_relative_eq!(y_moment_closed_form(&[], 3).unwrap(), bridge_moment_closed_form(3));
        assert_relative_eq!(y_moment_closed_form(&[0.5], 1).unwrap(), PI.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(
            y_moment_closed_form(&[0.5], 2).unwrap(),
            2.0 + PI / 2.0,
            epsilon = 1e-14
        );
        assert!(y_moment_closed_form(&[0.6, 0.4], 1).is_err());
        assert!(y_moment_closed_form(&[1.0], 1).is_err());
    }

    #[test]
    fn identity_weights_are_constant() {
        let a = OperatorSpec::identity(Grid::uniform(64).unwrap());
        let est = simplex_inv_sqrt_gram(&a, 2, 20_000, 3).unwrap();
        assert_relative_eq!(est.value, PI, epsilon = 1e-12);
        assert!(est.sample_variance < 1e-20, "{}", est.sample_variance);
        let m = moment_via_quadrature(&a, 1, 5000, 1).unwrap();
        assert_relative_eq!(m.value, (2.0 / PI).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn bridge_weights_are_constant() {
        let a = bridge(64);
        let est = simplex_inv_sqrt_gram(&a, 1, 20_000, 3).unwrap();
        assert_relative_eq!(est.value, PI, epsilon = 1e-10);
        let m = moment_via_quadrature(&a, 2, 20_000, 9).unwrap();
        assert_relative_eq!(m.value, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn level_integrated_identity() {
        let a = OperatorSpec::identity(Grid::uniform(32).unwrap());
        for q in 1..=3 {
            let est = level_integrated_moment_via_quadrature(&a, q, 10_000, 5).unwrap();
            assert_relative_eq!(est.value, wiener_level_integrated_closed_form(q), epsilon = 1e-10);
        }
    }

    #[test]
    fn argument_checks() {
        let a = OperatorSpec::identity(Grid::uniform(8).unwrap());
        assert!(simplex_inv_sqrt_gram(&a, 0, 5000, 0).is_err());
        assert!(simplex_inv_sqrt_gram(&a, 9, 5000, 0).is_err());
        assert!(simplex_inv_sqrt_gram(&a, 2, 10, 0).is_err());
    }

    #[test]
    fn estimates_are_reproducible() {
        let g = Grid::uniform(32).unwrap();
        let d = OperatorSpec::cosine_diagonal(g, &[1.0, 0.5, 2.0, 1.5], 1.0).unwrap();
        let x = simplex_inv_sqrt_gram(&d, 3, 10_000, 42).unwrap();
        let y = simplex_inv_sqrt_gram(&d, 3, 10_000, 42).unwrap();
        assert_eq!(x, y);
        assert!(x.std_error > 0.0);
    }

    #[test]
    fn running_stats_merge_matches_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut all = RunningStats::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = RunningStats::default();
        let mut b = RunningStats::default();
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        let m = a.merge(b);
        assert_relative_eq!(m.mean, all.mean, epsilon = 1e-14);
        assert_relative_eq!(m.variance(), all.variance(), epsilon = 1e-14);
    }
}
