//! Gram determinants and the identities and inequalities they satisfy.

use nalgebra::DMatrix;
use num_traits::Float;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::linalg::{gram_matrix, orthonormality_defect, project, solve_spd, sorted_eigen};
use crate::operators::OperatorSpec;
use crate::rng::{normal, stream_rng};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramReport<T: Real> {
    pub value: T,
    /// Smallest eigenvalue of the unit-diagonal rescaling of the Gram matrix.
    pub min_eigenvalue: T,
    pub clamped: bool,
}

/// `det` of a Gram matrix, computed as `Π C_ii · Π eig(D^{-1/2} C D^{-1/2})`.
///
/// Rescaling to unit diagonal makes the clamp threshold independent of the
/// vector lengths. Eigenvalues at or below [`Real::gram_clamp`] are set to
/// zero, which zeroes the determinant and sets `clamped`.
pub fn gram_det_of_matrix<T: Real>(c: &DMatrix<T>) -> GramReport<T> {
    let k = c.nrows();
    if k == 0 {
        return GramReport {
            value: T::one(),
            min_eigenvalue: T::one(),
            clamped: false,
        };
    }
    let diag: Vec<T> = (0..k).map(|i| c[(i, i)]).collect();
    if diag.iter().any(|&d| d <= T::zero()) {
        return GramReport {
            value: T::zero(),
            min_eigenvalue: T::zero(),
            clamped: true,
        };
    }
    let inv_sqrt: Vec<T> = diag.iter().map(|&d| T::one() / Float::sqrt(d)).collect();
    let r = DMatrix::from_fn(k, k, |i, j| c[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let (eig, _) = sorted_eigen(r);
    let min_eigenvalue = eig[0];
    if min_eigenvalue <= T::gram_clamp() {
        return GramReport {
            value: T::zero(),
            min_eigenvalue,
            clamped: true,
        };
    }
    let value = diag.iter().copied().product::<T>() * eig.iter().copied().product::<T>();
    GramReport {
        value,
        min_eigenvalue,
        clamped: false,
    }
}

/// `G(vs)` for a nonempty list on a common grid.
pub fn gram_det<T: Real>(vs: &[GridFunction<T>]) -> Result<GramReport<T>> {
    if vs.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(gram_det_of_matrix(&gram_matrix(vs)?))
}

/// `G` with the empty-list convention `G(∅) = 1`.
fn det_or_one<T: Real>(vs: &[GridFunction<T>]) -> Result<T> {
    Ok(gram_det_of_matrix(&gram_matrix(vs)?).value)
}

fn tolerance<T: Real>(scale: T) -> T {
    T::lit(1e-9) * Float::max(T::one(), scale)
}

/// `G(A vs) − ‖A^{-1}‖^{-2n} G(vs)` for invertible `A`; nonnegative up to
/// roundoff.
pub fn operator_bound_gap<T: Real>(a: &OperatorSpec<T>, vs: &[GridFunction<T>]) -> Result<T> {
    if vs.is_empty() {
        return Err(Error::EmptyList);
    }
    if !a.kernel_basis().is_empty() {
        return Err(Error::NotInvertible(0.0));
    }
    let inv = a.restricted_inverse_norm()?;
    let images = vs.iter().map(|v| a.apply(v)).collect::<Result<Vec<_>>>()?;
    let lhs = gram_det(&images)?.value;
    let n = i32::try_from(vs.len()).map_err(|_| Error::InvalidArgument("too many vectors".into()))?;
    let bound = Float::powi(inv, -2 * n) * gram_det(vs)?.value;
    Ok(lhs - bound)
}

/// `|G((I−P_L)g_1…) − G(g_1…, e_1…)|` for an orthonormal basis `e` of `L`.
pub fn projection_identity_residual<T: Real>(
    l_basis: &[GridFunction<T>],
    gs: &[GridFunction<T>],
) -> Result<T> {
    let defect = orthonormality_defect(l_basis)?;
    if defect > T::structural_tol() {
        return Err(Error::NotOrthonormal(defect.to_f64_lossy()));
    }
    let projected: Vec<GridFunction<T>> = gs.iter().map(|g| g - &project(g, l_basis)).collect();
    let lhs = det_or_one(&projected)?;
    let mut joined = gs.to_vec();
    joined.extend_from_slice(l_basis);
    let rhs = det_or_one(&joined)?;
    Ok(Float::abs(lhs - rhs))
}

/// Given independent `fs`, solves for `f ∈ span(fs)` with `(f, f_k) = 1` and
/// returns `|‖f‖²·G(f_1…f_n) − G(f_2−f_1, …, f_n−f_{n−1})|`.
pub fn difference_identity_residual<T: Real>(fs: &[GridFunction<T>]) -> Result<T> {
    if fs.is_empty() {
        return Err(Error::EmptyList);
    }
    let c = gram_matrix(fs)?;
    let report = gram_det_of_matrix(&c);
    if report.clamped {
        return Err(Error::Dependent);
    }
    let ones = nalgebra::DVector::from_element(fs.len(), T::one());
    let coeffs = solve_spd(&c, &ones).ok_or(Error::Dependent)?;
    // ‖f‖² = cᵀ C c = cᵀ 1.
    let f_norm_sq: T = coeffs.iter().copied().sum();
    let diffs: Vec<GridFunction<T>> = fs.windows(2).map(|w| &w[1] - &w[0]).collect();
    let rhs = det_or_one(&diffs)?;
    Ok(Float::abs(f_norm_sq * report.value - rhs))
}

/// `|det(C + εI) − Σ_k ε^{p−k} Σ_{|S|=k} det C_S|` for the Gram matrix `C`
/// of `vs`, with the principal minors enumerated explicitly.
pub fn perturbation_expansion_residual<T: Real>(vs: &[GridFunction<T>], eps: T) -> Result<T> {
    if vs.is_empty() {
        return Err(Error::EmptyList);
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let c = gram_matrix(vs)?;
    let p = vs.len();
    if p > 16 {
        return Err(Error::InvalidArgument("at most 16 vectors".into()));
    }
    let (eig, _) = sorted_eigen(c.clone());
    let lhs: T = eig.iter().map(|&l| l + eps).product();
    let mut by_size = vec![T::zero(); p + 1];
    for mask in 0u32..(1 << p) {
        let idx: Vec<usize> = (0..p).filter(|&i| mask & (1 << i) != 0).collect();
        let k = idx.len();
        let minor = if k == 0 {
            T::one()
        } else {
            DMatrix::from_fn(k, k, |a, b| c[(idx[a], idx[b])]).determinant()
        };
        by_size[k] += minor;
    }
    let rhs: T = (0..=p)
        .map(|k| Float::powi(eps, (p - k) as i32) * by_size[k])
        .sum();
    Ok(Float::abs(lhs - rhs))
}

/// One evaluation of the step-function Gram ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBoundWitness<T: Real> {
    /// `G(1_{[0,t_i]}…, f_1…f_s) / G(1_{[0,t_i]}…, S)`.
    pub ratio: T,
    /// `1/G(S)`; the ratio can never fall below it, with equality when the
    /// step basis spans all of `span(S)`.
    pub lower_bound: T,
}

/// Compares the step basis `f` of a kernel with the reference step functions
/// `S = {1_{[0,s_j]}}` (plus `1_{[0,1]}` when `f` needs the constants).
///
/// With `f` orthonormal and `span f ⊆ span S`, the ratio is bounded below by
/// `1/G(S)` uniformly in `ts`, which is the positive constant the moment bound
/// relies on. A vanishing denominator is reported as
/// [`Error::Degenerate`] so callers can skip and count the instance.
pub fn step_bound_constant<T: Real>(
    grid: Grid,
    jump_points: &[f64],
    ts: &[f64],
    step_basis: &[GridFunction<T>],
) -> Result<StepBoundWitness<T>> {
    let mut reference = jump_points
        .iter()
        .map(|&s| GridFunction::indicator(grid, s))
        .collect::<Result<Vec<_>>>()?;
    let ortho_ref = crate::linalg::orthonormal_span(&reference, T::structural_tol());
    let outside = step_basis.iter().any(|f| {
        let r = f - &project(f, &ortho_ref);
        r.norm() > T::structural_tol() * Float::max(T::one(), f.norm())
    });
    if outside {
        reference.push(GridFunction::constant(grid, T::one()));
        let ortho_full = crate::linalg::orthonormal_span(&reference, T::structural_tol());
        for f in step_basis {
            let r = f - &project(f, &ortho_full);
            if r.norm() > T::structural_tol() * Float::max(T::one(), f.norm()) {
                return Err(Error::InvalidArgument(
                    "step basis is not spanned by indicators at the jump points".into(),
                ));
            }
        }
    }
    let indicators = ts
        .iter()
        .map(|&t| GridFunction::indicator(grid, t))
        .collect::<Result<Vec<_>>>()?;
    let mut num = indicators.clone();
    num.extend_from_slice(step_basis);
    let mut den = indicators;
    den.extend(reference.iter().cloned());
    let d = gram_det_of_matrix(&gram_matrix(&den)?);
    if d.clamped || d.value.is_zero() {
        return Err(Error::Degenerate("reference Gram determinant vanishes".into()));
    }
    let n = det_or_one(&num)?;
    let g_ref = det_or_one(&reference)?;
    Ok(StepBoundWitness {
        ratio: n / d.value,
        lower_bound: T::one() / g_ref,
    })
}

/// `G(1_{[0,t_i]}…, f…, e…) / G(1_{[0,t_i]}…, f…)`: the non-step part of the
/// kernel keeps a positive distance from every indicator-plus-step span.
pub fn nonstep_ratio<T: Real>(
    grid: Grid,
    ts: &[f64],
    step_basis: &[GridFunction<T>],
    nonstep_basis: &[GridFunction<T>],
) -> Result<T> {
    let mut base = ts
        .iter()
        .map(|&t| GridFunction::indicator(grid, t))
        .collect::<Result<Vec<_>>>()?;
    base.extend_from_slice(step_basis);
    let d = gram_det_of_matrix(&gram_matrix(&base)?);
    if d.clamped || d.value.is_zero() {
        return Err(Error::Degenerate("base Gram determinant vanishes".into()));
    }
    let mut full = base;
    full.extend_from_slice(nonstep_basis);
    Ok(det_or_one(&full)? / d.value)
}

/// `‖v‖² G(vs) − G(vs ∪ {v})`, nonnegative up to roundoff.
pub fn hadamard_gap<T: Real>(vs: &[GridFunction<T>], v: &GridFunction<T>) -> Result<T> {
    let base = det_or_one(vs)?;
    let mut joined = vs.to_vec();
    joined.push(v.clone());
    Ok(v.norm_sq() * base - det_or_one(&joined)?)
}

/// Outcome of a batch of randomized checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzSummary {
    pub instances: usize,
    pub failures: usize,
    pub skipped: usize,
    /// Largest observed violation divided by its allowed tolerance (≤ 1
    /// means every instance passed).
    pub worst_ratio: f64,
}

impl FuzzSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances > self.skipped
    }

    fn merge(self, other: Self) -> Self {
        Self {
            instances: self.instances + other.instances,
            failures: self.failures + other.failures,
            skipped: self.skipped + other.skipped,
            worst_ratio: self.worst_ratio.max(other.worst_ratio),
        }
    }

    fn empty() -> Self {
        Self {
            instances: 0,
            failures: 0,
            skipped: 0,
            worst_ratio: 0.0,
        }
    }
}

/// Which identity or inequality a fuzz batch exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuzzCheck {
    OperatorBound,
    ProjectionIdentity,
    DifferenceIdentity,
    PerturbationExpansion,
    Hadamard,
}

impl FuzzCheck {
    pub const ALL: [FuzzCheck; 5] = [
        FuzzCheck::OperatorBound,
        FuzzCheck::ProjectionIdentity,
        FuzzCheck::DifferenceIdentity,
        FuzzCheck::PerturbationExpansion,
        FuzzCheck::Hadamard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FuzzCheck::OperatorBound => "operator-bound",
            FuzzCheck::ProjectionIdentity => "projection-identity",
            FuzzCheck::DifferenceIdentity => "difference-identity",
            FuzzCheck::PerturbationExpansion => "perturbation-expansion",
            FuzzCheck::Hadamard => "hadamard",
        }
    }

    fn stream_base(self) -> u64 {
        (self as u64 + 1) << 40
    }
}

fn random_function<R: Rng + ?Sized>(rng: &mut R, grid: Grid) -> GridFunction<f64> {
    let coeffs = (0..grid.cells()).map(|_| normal(rng)).collect();
    GridFunction::new(grid, coeffs).expect("length matches")
}

fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| normal(rng));
    g.qr().q()
}

/// Invertible operator on an `n`-cell grid with singular values log-uniform
/// in `[0.03, 30]`, so the condition number is at most `10³`.
pub fn random_conditioned_operator<R: Rng + ?Sized>(rng: &mut R, n: usize) -> OperatorSpec<f64> {
    let grid = Grid::uniform(n).expect("n >= 1");
    let sigma = |rng: &mut R| (0.03f64.ln() + rng.random::<f64>() * 1000f64.ln()).exp();
    let u = random_orthogonal(rng, n);
    let v = random_orthogonal(rng, n);
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| sigma(rng)));
    let m = &u * s * v.transpose();
    OperatorSpec::from_matrix(grid, &m, sigma(rng))
        .and_then(|op| op.with_kernel(Vec::new()))
        .expect("well conditioned")
        .with_label("random")
}

fn one_instance<R: Rng + ?Sized>(check: FuzzCheck, rng: &mut R) -> Result<(f64, f64)> {
    match check {
        FuzzCheck::OperatorBound => {
            let n = rng.random_range(1..=8);
            let a = random_conditioned_operator(rng, n);
            let k = rng.random_range(1..=n);
            let vs: Vec<_> = (0..k).map(|_| random_function(rng, a.grid())).collect();
            let gap = operator_bound_gap(&a, &vs)?;
            Ok((-gap, tolerance(gram_det(&vs)?.value)))
        }
        FuzzCheck::ProjectionIdentity => {
            let grid = Grid::uniform(rng.random_range(8..=16))?;
            let m = rng.random_range(1..=3);
            let raw: Vec<_> = (0..m).map(|_| random_function(rng, grid)).collect();
            let l = crate::linalg::orthonormalize(&raw)?;
            let k = rng.random_range(1..=4);
            let mut gs: Vec<_> = (0..k).map(|_| random_function(rng, grid)).collect();
            if rng.random_bool(0.1) {
                gs[0] = l[0].scaled(1.5);
            }
            let r = projection_identity_residual(&l, &gs)?;
            Ok((r, tolerance(det_or_one(&gs)?)))
        }
        FuzzCheck::DifferenceIdentity => {
            let grid = Grid::uniform(rng.random_range(8..=16))?;
            let k = rng.random_range(1..=8);
            let fs: Vec<_> = (0..k).map(|_| random_function(rng, grid)).collect();
            let r = difference_identity_residual(&fs)?;
            Ok((r, tolerance(det_or_one(&fs)?)))
        }
        FuzzCheck::PerturbationExpansion => {
            let grid = Grid::uniform(rng.random_range(4..=12))?;
            let p = rng.random_range(1..=5);
            let vs: Vec<_> = (0..p).map(|_| random_function(rng, grid)).collect();
            let eps = [1e-3, 1.0, 10.0][rng.random_range(0..3)];
            let r = perturbation_expansion_residual(&vs, eps)?;
            // Scale by the size of the expanded polynomial so that large
            // Gram entries do not masquerade as failures.
            let c = gram_matrix(&vs)?;
            let trace_scale = (0..p).map(|i| c[(i, i)]).fold(1.0, f64::max);
            Ok((r, 1e-9 * (trace_scale + eps).powi(p as i32)))
        }
        FuzzCheck::Hadamard => {
            let grid = Grid::uniform(rng.random_range(4..=12))?;
            let k = rng.random_range(0..=6);
            let vs: Vec<_> = (0..k).map(|_| random_function(rng, grid)).collect();
            let v = random_function(rng, grid);
            let bound = v.norm_sq() * det_or_one(&vs)?;
            Ok((-hadamard_gap(&vs, &v)?, tolerance(bound)))
        }
    }
}

/// Runs `instances` random checks of one kind. Instances are seeded by index,
/// so the summary is independent of the thread count.
pub fn fuzz(check: FuzzCheck, instances: usize, seed: u64) -> FuzzSummary {
    const BLOCK: usize = 256;
    let blocks = instances.div_ceil(BLOCK);
    let partial: Vec<FuzzSummary> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, check.stream_base() + b as u64);
            let count = BLOCK.min(instances - b * BLOCK);
            let mut s = FuzzSummary::empty();
            for _ in 0..count {
                s.instances += 1;
                match one_instance(check, &mut rng) {
                    Ok((violation, tol)) => {
                        let ratio = violation.max(0.0) / tol;
                        s.worst_ratio = s.worst_ratio.max(ratio);
                        if violation > tol || !violation.is_finite() {
                            s.failures += 1;
                        }
                    }
                    Err(_) => s.skipped += 1,
                }
            }
            s
        })
        .collect();
    partial
        .into_iter()
        .fold(FuzzSummary::empty(), FuzzSummary::merge)
}
