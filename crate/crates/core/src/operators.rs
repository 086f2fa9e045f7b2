//! Bounded operators on L²([0,1]) of the form `scale·I + Σ (·, right_k) left_k`.
//!
//! Every operator keeps a nonzero multiple of the identity plus a finite-rank
//! correction built from grid step functions. This covers identities,
//! complement projections, diagonal operators in the cosine basis, dense maps
//! on grid coefficients and all their compositions and sums. On the
//! within-cell complement of the step functions the operator acts as
//! `scale·I`, so paths can be refined below the grid resolution exactly.
//!
//! Matrix convention: [`OperatorSpec::matrix`] returns the map on cell
//! coefficients, `(Af)_i = Σ_j M_ij f_j`. The coefficients of a step function
//! are its values, and on a uniform grid the L² norm is `√h` times the
//! Euclidean norm of those values, so singular values of `M` are the
//! continuum singular values of `A` restricted to step functions.

use nalgebra::{DMatrix, SVD};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::{CumulativeIntegral, Grid, GridFunction};
use crate::linalg::{combine_columns, orthonormal_span, orthonormalize};
use crate::scalar::Real;

/// One rank-one correction `f ↦ (f, right) left`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term<T: Real> {
    pub left: GridFunction<T>,
    pub right: GridFunction<T>,
}

/// Where the kernel basis of an operator came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSource {
    /// Supplied by the constructor (or by [`OperatorSpec::with_kernel`]) and
    /// checked against the operator.
    Declared,
    /// Found by singular-value thresholding.
    Detected,
}

#[derive(Debug, Clone)]
pub struct OperatorSpec<T: Real> {
    grid: Grid,
    scale: T,
    terms: Vec<Term<T>>,
    kernel_basis: Vec<GridFunction<T>>,
    kernel_source: KernelSource,
    label: String,
}

/// Split of a finite-dimensional kernel into its step-function part and the
/// rest.
#[derive(Debug, Clone)]
pub struct KernelDecomposition<T: Real> {
    pub step_basis: Vec<GridFunction<T>>,
    pub nonstep_basis: Vec<GridFunction<T>>,
    /// Interior grid nodes where some step-basis element jumps.
    pub jump_nodes: Vec<usize>,
    /// `jump_nodes` as times in `(0, 1)`.
    pub jump_points: Vec<f64>,
}

impl<T: Real> KernelDecomposition<T> {
    pub fn jump_count(&self) -> usize {
        self.jump_points.len()
    }
}

/// `√2 cos(jπ(k+½)/n)` on cell `k` (the constant `1` for `j = 0`). These
/// functions are exactly orthonormal on the grid for `j < n`.
pub fn cosine_mode<T: Real>(grid: Grid, j: usize) -> Result<GridFunction<T>> {
    let n = grid.cells();
    if j >= n {
        return Err(Error::InvalidArgument(format!(
            "cosine mode {j} needs more than {n} cells"
        )));
    }
    if j == 0 {
        return Ok(GridFunction::constant(grid, T::one()));
    }
    let coeffs = (0..n)
        .map(|k| {
            let arg = std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / n as f64;
            T::lit(std::f64::consts::SQRT_2 * arg.cos())
        })
        .collect();
    GridFunction::new(grid, coeffs)
}

/// Orthonormal basis of the compression space together with the matrix
/// `(b_i, A b_j)`.
struct Compression<T: Real> {
    basis: Vec<GridFunction<T>>,
    /// Number of leading basis vectors that came from the requested prefix.
    prefix: usize,
    coupling: DMatrix<T>,
}

impl<T: Real> OperatorSpec<T> {
    fn raw(grid: Grid, scale: T, terms: Vec<Term<T>>, label: impl Into<String>) -> Result<Self> {
        if scale.is_zero() || !Float::is_finite(scale) {
            return Err(Error::InfiniteKernel);
        }
        Ok(Self {
            grid,
            scale,
            terms,
            kernel_basis: Vec::new(),
            kernel_source: KernelSource::Declared,
            label: label.into(),
        })
    }

    pub fn identity(grid: Grid) -> Self {
        Self::raw(grid, T::one(), Vec::new(), "identity").expect("nonzero scale")
    }

    /// `c·I`; `c = 0` would have an infinite-dimensional kernel.
    pub fn scalar(grid: Grid, c: T) -> Result<Self> {
        Self::raw(grid, c, Vec::new(), format!("{c}*identity"))
    }

    /// `I − P` with `P` the orthogonal projection onto `span`. The kernel
    /// is declared as `span`.
    pub fn complement_projection(grid: Grid, span: &[GridFunction<T>]) -> Result<Self> {
        for v in span {
            grid.ensure_same(&v.grid())?;
        }
        let basis = orthonormalize(span).map_err(|_| Error::DependentKernel)?;
        let terms = basis
            .iter()
            .map(|b| Term {
                left: b.scaled(-T::one()),
                right: b.clone(),
            })
            .collect();
        let mut op = Self::raw(grid, T::one(), terms, format!("complement-projection[{}]", span.len()))?;
        op.kernel_basis = basis;
        Ok(op)
    }

    /// Diagonal in the cosine basis: multiplies mode `j` by `values[j]` and
    /// every other direction (higher modes and the within-cell complement)
    /// by `rest`. Modes with value exactly zero form the declared kernel.
    pub fn cosine_diagonal(grid: Grid, values: &[T], rest: T) -> Result<Self> {
        let mut terms = Vec::new();
        let mut kernel = Vec::new();
        for (j, &d) in values.iter().enumerate() {
            let mode = cosine_mode::<T>(grid, j)?;
            if d != rest {
                terms.push(Term {
                    left: mode.scaled(d - rest),
                    right: mode.clone(),
                });
            }
            if d.is_zero() {
                kernel.push(mode);
            }
        }
        let mut op = Self::raw(grid, rest, terms, format!("cosine-diagonal[{}]", values.len()))?;
        op.kernel_basis = kernel;
        Ok(op)
    }

    /// Operator with cell-coefficient matrix `m`, acting as
    /// `complement_scale·I` below the grid resolution. The kernel is
    /// detected numerically unless supplied later via [`Self::with_kernel`].
    pub fn from_matrix(grid: Grid, m: &DMatrix<T>, complement_scale: T) -> Result<Self> {
        let n = grid.cells();
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "matrix is {}x{}, grid has {n} cells",
                m.nrows(),
                m.ncols()
            )));
        }
        let inv_h = T::one() / grid.cell_width::<T>();
        let mut terms = Vec::new();
        for j in 0..n {
            let mut col: Vec<T> = m.column(j).iter().copied().collect();
            col[j] -= complement_scale;
            if col.iter().all(|c| c.is_zero()) {
                continue;
            }
            terms.push(Term {
                left: GridFunction::new(grid, col)?,
                right: GridFunction::cell(grid, j).scaled(inv_h),
            });
        }
        let mut op = Self::raw(grid, complement_scale, terms, "matrix")?;
        op.kernel_basis = op.detect_kernel()?;
        op.kernel_source = KernelSource::Detected;
        Ok(op)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let mut terms = Vec::with_capacity(self.terms.len() + other.terms.len());
        for t in &other.terms {
            terms.push(Term {
                left: self.apply_unchecked(&t.left),
                right: t.right.clone(),
            });
        }
        for t in &self.terms {
            terms.push(Term {
                left: t.left.clone(),
                right: t.right.scaled(other.scale),
            });
        }
        let label = format!("{}*{}", self.label, other.label);
        let mut op = Self::raw(self.grid, self.scale * other.scale, terms, label)?;
        if self.kernel_basis.is_empty() && self.kernel_source == KernelSource::Declared {
            op.kernel_basis = other.kernel_basis.clone();
            op.kernel_source = other.kernel_source;
        } else {
            op.kernel_basis = op.detect_kernel()?;
            op.kernel_source = KernelSource::Detected;
        }
        Ok(op)
    }

    /// `self + weight·other`, with a numerically detected kernel.
    pub fn sum(&self, other: &Self, weight: T) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let mut terms = self.terms.clone();
        for t in &other.terms {
            terms.push(Term {
                left: t.left.scaled(weight),
                right: t.right.clone(),
            });
        }
        let label = format!("{}+{}*{}", self.label, weight, other.label);
        let mut op = Self::raw(self.grid, self.scale + weight * other.scale, terms, label)?;
        op.kernel_basis = op.detect_kernel()?;
        op.kernel_source = KernelSource::Detected;
        Ok(op)
    }

    /// Replaces the kernel basis by `basis` after checking that each element
    /// is annihilated and that they are independent.
    pub fn with_kernel(mut self, basis: Vec<GridFunction<T>>) -> Result<Self> {
        self.validate_kernel(&basis)?;
        self.kernel_basis = basis;
        self.kernel_source = KernelSource::Declared;
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn validate_kernel(&self, basis: &[GridFunction<T>]) -> Result<()> {
        for (index, v) in basis.iter().enumerate() {
            self.grid.ensure_same(&v.grid())?;
            let norm = v.norm();
            let image = self.apply_unchecked(v).norm();
            if norm.is_zero() || image > T::structural_tol() * norm {
                let ratio = if norm.is_zero() {
                    f64::INFINITY
                } else {
                    (image / norm).to_f64_lossy()
                };
                return Err(Error::KernelNotAnnihilated { index, ratio });
            }
        }
        orthonormalize(basis).map_err(|_| Error::DependentKernel)?;
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Factor applied to everything outside the span of the correction terms.
    pub fn complement_scale(&self) -> T {
        self.scale
    }

    pub fn terms(&self) -> &[Term<T>] {
        &self.terms
    }

    pub fn kernel_basis(&self) -> &[GridFunction<T>] {
        &self.kernel_basis
    }

    pub fn kernel_source(&self) -> KernelSource {
        self.kernel_source
    }

    pub fn apply(&self, f: &GridFunction<T>) -> Result<GridFunction<T>> {
        self.grid.ensure_same(&f.grid())?;
        Ok(self.apply_unchecked(f))
    }

    pub(crate) fn apply_unchecked(&self, f: &GridFunction<T>) -> GridFunction<T> {
        let mut out = f.scaled(self.scale);
        for t in &self.terms {
            let c = f.inner_unchecked(&t.right);
            if !c.is_zero() {
                out.axpy(c, &t.left).expect("terms share the grid");
            }
        }
        out
    }

    /// `A 1_{[0,t]}` with `t` snapped to the nearest node.
    pub fn g_curve(&self, t: f64) -> Result<GridFunction<T>> {
        let ind = GridFunction::indicator(self.grid, t)?;
        Ok(self.apply_unchecked(&ind))
    }

    /// Matrix of `(g(t_i), g(t_j))`.
    pub fn covariance(&self, times: &[f64]) -> Result<DMatrix<T>> {
        let gs = times
            .iter()
            .map(|&t| self.g_curve(t))
            .collect::<Result<Vec<_>>>()?;
        crate::linalg::gram_matrix(&gs)
    }

    /// Dense cell-coefficient matrix (see the module docs).
    pub fn matrix(&self) -> DMatrix<T> {
        let n = self.grid.cells();
        let h = self.grid.cell_width::<T>();
        let mut m = DMatrix::identity(n, n) * self.scale;
        for t in &self.terms {
            let l = t.left.coeffs();
            let r = t.right.coeffs();
            for j in 0..n {
                let rj = r[j] * h;
                if rj.is_zero() {
                    continue;
                }
                for i in 0..n {
                    m[(i, j)] += l[i] * rj;
                }
            }
        }
        m
    }

    /// `A` maps `W = span(lefts ∪ rights)` into itself and acts as
    /// `scale·I` on its orthogonal complement, so its singular structure is
    /// that of the small matrix `(b_i, A b_j)` over an orthonormal basis of
    /// `W`, plus `|scale|`.
    fn compression(&self, prefix: &[GridFunction<T>]) -> Compression<T> {
        let mut spanning: Vec<GridFunction<T>> = prefix.to_vec();
        for t in &self.terms {
            spanning.push(t.left.clone());
            spanning.push(t.right.clone());
        }
        let basis = orthonormal_span(&spanning, T::structural_tol());
        let prefix_len = prefix.len().min(basis.len());
        let images: Vec<GridFunction<T>> = basis.iter().map(|b| self.apply_unchecked(b)).collect();
        let m = basis.len();
        let mut coupling = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                coupling[(i, j)] = basis[i].inner_unchecked(&images[j]);
            }
        }
        Compression {
            basis,
            prefix: prefix_len,
            coupling,
        }
    }

    /// Operator norm on L²([0,1]).
    pub fn operator_norm(&self) -> T {
        let comp = self.compression(&[]);
        let top = if comp.basis.is_empty() {
            T::zero()
        } else {
            SVD::new(comp.coupling, false, false).singular_values.max()
        };
        Float::max(top, Float::abs(self.scale))
    }

    /// Smallest singular value of `A` on the orthogonal complement of the
    /// kernel basis.
    pub fn smallest_restricted_singular_value(&self) -> T {
        let kernel = orthonormal_span(&self.kernel_basis, T::structural_tol());
        let comp = self.compression(&kernel);
        let m = comp.basis.len();
        let cols = m - comp.prefix;
        let inner = if cols == 0 {
            T::infinity()
        } else {
            let sub = comp.coupling.columns(comp.prefix, cols).clone_owned();
            SVD::new(sub, false, false).singular_values.min()
        };
        Float::min(inner, Float::abs(self.scale))
    }

    /// `1/σ_min` of `A` restricted to the complement of its kernel.
    pub fn restricted_inverse_norm(&self) -> Result<T> {
        let s = self.smallest_restricted_singular_value();
        if s <= T::structural_tol() {
            return Err(Error::NotInvertible(s.to_f64_lossy()));
        }
        Ok(T::one() / s)
    }

    /// Kernel found by thresholding singular values at
    /// `1e-10·max(1, ‖A‖)` (relative tolerance of the scalar type).
    pub fn detect_kernel(&self) -> Result<Vec<GridFunction<T>>> {
        if self.scale.is_zero() {
            return Err(Error::InfiniteKernel);
        }
        let comp = self.compression(&[]);
        if comp.basis.is_empty() {
            return Ok(Vec::new());
        }
        let svd = SVD::new(comp.coupling, false, true);
        let vt = svd.v_t.expect("requested");
        let top = Float::max(svd.singular_values.max(), Float::abs(self.scale));
        let tol = T::structural_tol() * Float::max(T::one(), top);
        let picked: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] <= tol)
            .collect();
        let mut coords = DMatrix::zeros(comp.basis.len(), picked.len());
        for (c, &i) in picked.iter().enumerate() {
            coords.set_column(c, &vt.row(i).transpose());
        }
        let vs = combine_columns(self.grid, &comp.basis, &coords);
        Ok(orthonormal_span(&vs, T::structural_tol()))
    }

    /// Step/non-step split of the kernel basis.
    pub fn kernel_decomposition(&self) -> Result<KernelDecomposition<T>> {
        if self.kernel_source == KernelSource::Declared {
            self.validate_kernel(&self.kernel_basis)?;
        }
        decompose_kernel(self.grid, &self.kernel_basis)
    }
}

/// Splits `span(basis)` into the subspace of step functions with few jumps
/// and its orthogonal complement.
///
/// On a grid every element is piecewise constant, so "step function" means
/// jumping at no more than `max(n/8, 1)` interior nodes. When the kernel
/// also contains sampled smooth functions, their difference rows span a
/// subspace `U` of kernel coordinates; a node whose difference row is not
/// reproduced by its neighbours is a jump of the step part, and the step
/// subspace is the orthogonal complement of `U`.
pub fn decompose_kernel<T: Real>(
    grid: Grid,
    basis: &[GridFunction<T>],
) -> Result<KernelDecomposition<T>> {
    for v in basis {
        grid.ensure_same(&v.grid())?;
    }
    let empty = KernelDecomposition {
        step_basis: Vec::new(),
        nonstep_basis: Vec::new(),
        jump_nodes: Vec::new(),
        jump_points: Vec::new(),
    };
    if basis.is_empty() {
        return Ok(empty);
    }
    let ortho = orthonormalize(basis).map_err(|_| Error::DependentKernel)?;
    let n = grid.cells();
    let k = ortho.len();
    let max_jumps = (n / 8).max(1);
    let jump_tol = T::structural_tol() * T::lit(10.0);

    // Row i holds the jumps of every basis element across node i + 1.
    let mut diffs = DMatrix::<T>::zeros(n.saturating_sub(1), k);
    for (c, f) in ortho.iter().enumerate() {
        let x = f.coeffs();
        for i in 1..n {
            diffs[(i - 1, c)] = x[i] - x[i - 1];
        }
    }
    let coeff_scale = (0..n)
        .map(|i| {
            let s: T = ortho.iter().map(|f| f.coeffs()[i] * f.coeffs()[i]).sum();
            Float::sqrt(s)
        })
        .fold(T::zero(), Float::max);
    let tol = jump_tol * coeff_scale;
    let row_norm = |i: usize| diffs.row(i).norm();
    let active: Vec<usize> = (0..diffs.nrows()).filter(|&i| row_norm(i) > tol).collect();

    // Columns of `step` span the step coordinates, `smooth` the rest.
    let (step, smooth) = if active.len() <= max_jumps {
        (DMatrix::<T>::identity(k, k), DMatrix::<T>::zeros(k, 0))
    } else {
        let half = 2 * k + 2;
        let rows = diffs.nrows();
        let mut inliers: Vec<usize> = Vec::new();
        for &i in &active {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(rows);
            let neighbours: Vec<usize> = (lo..hi).filter(|&j| j != i).collect();
            if in_row_span(&diffs, &neighbours, i) {
                inliers.push(i);
            }
        }
        let (u, v) = row_space_split(&diffs, &inliers, k);
        let outliers = active
            .iter()
            .filter(|&&i| {
                let r = diffs.row(i).transpose();
                (v.transpose() * &r).norm() > span_tol::<T>() * r.norm()
            })
            .count();
        if outliers <= max_jumps {
            (v, u)
        } else {
            (DMatrix::zeros(k, 0), DMatrix::identity(k, k))
        }
    };

    let step_basis = combine_columns(grid, &ortho, &step);
    let nonstep_basis = combine_columns(grid, &ortho, &smooth);
    let mut jump_nodes = Vec::new();
    if step.ncols() > 0 {
        let projected = &diffs * &step;
        let scale = (0..n)
            .map(|i| {
                let s: T = step_basis
                    .iter()
                    .map(|f| f.coeffs()[i] * f.coeffs()[i])
                    .sum();
                Float::sqrt(s)
            })
            .fold(T::zero(), Float::max);
        for i in 0..projected.nrows() {
            if projected.row(i).norm() > jump_tol * scale {
                jump_nodes.push(i + 1);
            }
        }
    }
    let jump_points = jump_nodes.iter().map(|&i| i as f64 / n as f64).collect();
    Ok(KernelDecomposition {
        step_basis,
        nonstep_basis,
        jump_nodes,
        jump_points,
    })
}

fn in_row_span<T: Real>(m: &DMatrix<T>, rows: &[usize], target: usize) -> bool {
    let k = m.ncols();
    let r = m.row(target).transpose();
    if rows.is_empty() {
        return false;
    }
    let mut stack = DMatrix::<T>::zeros(rows.len().max(k), k);
    for (a, &i) in rows.iter().enumerate() {
        stack.set_row(a, &m.row(i));
    }
    let svd = SVD::new(stack, false, true);
    let vt = svd.v_t.expect("requested");
    let top = svd.singular_values.max();
    let mut residual = r.clone();
    for (a, &s) in svd.singular_values.iter().enumerate() {
        if s > Float::sqrt(T::epsilon()) * top && !s.is_zero() {
            let dir = vt.row(a).transpose();
            let c = dir.dot(&r);
            residual -= dir * c;
        }
    }
    residual.norm() <= span_tol::<T>() * r.norm()
}

fn span_tol<T: Real>() -> T {
    Float::sqrt(T::epsilon()) * T::lit(100.0)
}

/// Orthonormal bases `(U, U^⊥)` in coordinate space, `U` the span of the
/// given rows after normalising each to unit length.
fn row_space_split<T: Real>(m: &DMatrix<T>, rows: &[usize], k: usize) -> (DMatrix<T>, DMatrix<T>) {
    if rows.is_empty() {
        return (DMatrix::zeros(k, 0), DMatrix::identity(k, k));
    }
    let mut stack = DMatrix::<T>::zeros(rows.len().max(k), k);
    for (a, &i) in rows.iter().enumerate() {
        let r = m.row(i);
        stack.set_row(a, &(r / r.norm()));
    }
    let (values, vectors) = crate::linalg::sorted_eigen(stack.transpose() * &stack);
    let top = values.last().copied().unwrap_or(T::zero());
    // Eigenvalues are squared singular values of the stack.
    let cut = T::epsilon() * T::lit(1e4) * top;
    let rank = values.iter().filter(|&&v| v > cut).count();
    let null = k - rank;
    let complement = vectors.columns(0, null).clone_owned();
    let span = vectors.columns(null, rank).clone_owned();
    (span, complement)
}

/// Covariances `(A 1_I, A 1_J)` of increments over arbitrary (not snapped)
/// intervals, evaluated in closed form from the term structure.
#[derive(Debug, Clone)]
pub struct IncrementCovariance {
    scale: f64,
    lefts: Vec<CumulativeIntegral>,
    rights: Vec<CumulativeIntegral>,
    left_gram: DMatrix<f64>,
}

impl IncrementCovariance {
    pub fn new<T: Real>(a: &OperatorSpec<T>) -> Self {
        let lefts_f: Vec<GridFunction<f64>> = a
            .terms
            .iter()
            .map(|t| to_f64(&t.left))
            .collect();
        let left_gram = crate::linalg::gram_matrix(&lefts_f).expect("terms share the grid");
        Self {
            scale: a.scale.to_f64_lossy(),
            lefts: a.terms.iter().map(|t| CumulativeIntegral::new(&t.left)).collect(),
            rights: a.terms.iter().map(|t| CumulativeIntegral::new(&t.right)).collect(),
            left_gram,
        }
    }

    pub fn rank(&self) -> usize {
        self.lefts.len()
    }

    /// Covariance matrix of the increments over `intervals[i] = (a_i, b_i)`.
    pub fn matrix(&self, intervals: &[(f64, f64)]) -> DMatrix<f64> {
        let p = intervals.len();
        let r = self.rank();
        let mut out = DMatrix::zeros(p, p);
        self.fill(intervals, &mut out, &mut vec![0.0; 2 * p * r]);
        out
    }

    /// Like [`Self::matrix`] but writing into caller-owned buffers; `scratch`
    /// must hold at least `2·len·rank` values.
    pub fn fill(&self, intervals: &[(f64, f64)], out: &mut DMatrix<f64>, scratch: &mut [f64]) {
        self.fill_with(intervals, out, scratch, |i, j| {
            let (ai, bi) = intervals[i];
            let (aj, bj) = intervals[j];
            (bi.min(bj) - ai.max(aj)).max(0.0)
        });
    }

    /// Variant for consecutive, non-overlapping intervals whose lengths are
    /// known exactly (for instance sampled spacings), avoiding the
    /// cancellation in `b − a`.
    pub fn fill_consecutive(
        &self,
        intervals: &[(f64, f64)],
        lengths: &[f64],
        out: &mut DMatrix<f64>,
        scratch: &mut [f64],
    ) {
        self.fill_with(intervals, out, scratch, |i, j| if i == j { lengths[i] } else { 0.0 });
    }

    fn fill_with(
        &self,
        intervals: &[(f64, f64)],
        out: &mut DMatrix<f64>,
        scratch: &mut [f64],
        overlap: impl Fn(usize, usize) -> f64,
    ) {
        let p = intervals.len();
        let r = self.rank();
        let (y, z) = scratch[..2 * p * r].split_at_mut(p * r);
        for (i, &(a, b)) in intervals.iter().enumerate() {
            for k in 0..r {
                y[i * r + k] = self.rights[k].over(a, b);
                z[i * r + k] = self.lefts[k].over(a, b);
            }
        }
        let lam = self.scale;
        for i in 0..p {
            let yi = &y[i * r..(i + 1) * r];
            let zi = &z[i * r..(i + 1) * r];
            for j in 0..=i {
                let yj = &y[j * r..(j + 1) * r];
                let zj = &z[j * r..(j + 1) * r];
                let mut c = lam * lam * overlap(i, j);
                let mut cross = 0.0;
                for k in 0..r {
                    cross += yi[k] * zj[k] + yj[k] * zi[k];
                    let mut row = 0.0;
                    for l in 0..r {
                        row += self.left_gram[(k, l)] * yj[l];
                    }
                    c += yi[k] * row;
                }
                c += lam * cross;
                out[(i, j)] = c;
                out[(j, i)] = c;
            }
        }
    }
}

fn to_f64<T: Real>(f: &GridFunction<T>) -> GridFunction<f64> {
    GridFunction::new(f.grid(), f.coeffs().iter().map(|c| c.to_f64_lossy()).collect())
        .expect("same length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> Grid {
        Grid::uniform(n).unwrap()
    }

    fn ones(g: Grid) -> GridFunction<f64> {
        GridFunction::constant(g, 1.0)
    }

    #[test]
    fn identity_and_scalar_apply() {
        let g = grid(16);
        let f = GridFunction::<f64>::from_fn(g, |t| t.sin());
        assert_eq!(OperatorSpec::identity(g).apply(&f).unwrap(), f);
        let two = OperatorSpec::scalar(g, 2.0).unwrap().apply(&f).unwrap();
        for (a, b) in two.coeffs().iter().zip(f.coeffs()) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(OperatorSpec::<f64>::scalar(g, 0.0).is_err());
    }

    #[test]
    fn g_curve_examples() {
        let g = grid(64);
        let id = OperatorSpec::<f64>::identity(g);
        let a = id.g_curve(0.25).unwrap();
        let b = id.g_curve(0.75).unwrap();
        assert_relative_eq!(a.inner(&b).unwrap(), 0.25, epsilon = 1e-15);
        let two = OperatorSpec::scalar(g, 2.0).unwrap();
        assert_relative_eq!(two.g_curve(0.5).unwrap().norm_sq(), 2.0, epsilon = 1e-14);
        assert!(id.g_curve(1.5).is_err());
    }

    #[test]
    fn bridge_covariance() {
        let g = grid(32);
        let a = OperatorSpec::complement_projection(g, &[ones(g)]).unwrap();
        let ts = [0.25, 0.5, 0.75, 1.0];
        let c = a.covariance(&ts).unwrap();
        for (i, &s) in ts.iter().enumerate() {
            for (j, &t) in ts.iter().enumerate() {
                assert_relative_eq!(c[(i, j)], s.min(t) - s * t, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn matrix_matches_apply() {
        let g = grid(12);
        let d = OperatorSpec::cosine_diagonal(g, &[1.0, 2.0, 0.5], 1.5).unwrap();
        let p = OperatorSpec::complement_projection(g, &[ones(g)]).unwrap();
        let a = d.compose(&p).unwrap();
        let m = a.matrix();
        let f = GridFunction::<f64>::from_fn(g, |t| (3.0 * t).cos() + t);
        let direct = a.apply(&f).unwrap();
        let via = &m * nalgebra::DVector::from_column_slice(f.coeffs());
        for i in 0..12 {
            assert_relative_eq!(direct.coeffs()[i], via[i], epsilon = 1e-12);
        }
        let rebuilt = OperatorSpec::from_matrix(g, &m, 1.5).unwrap();
        assert_eq!(rebuilt.kernel_basis().len(), 1);
        assert_relative_eq!(
            rebuilt.restricted_inverse_norm().unwrap(),
            a.restricted_inverse_norm().unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn restricted_inverse_norm_examples() {
        let g = grid(16);
        assert_relative_eq!(
            OperatorSpec::<f64>::identity(g).restricted_inverse_norm().unwrap(),
            1.0
        );
        assert_relative_eq!(
            OperatorSpec::scalar(g, 4.0).unwrap().restricted_inverse_norm().unwrap(),
            0.25
        );
        let d = OperatorSpec::cosine_diagonal(g, &[2.0, 1.0, 0.5], 1.0).unwrap();
        assert_relative_eq!(d.restricted_inverse_norm().unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(d.operator_norm(), 2.0, epsilon = 1e-12);
        let p = OperatorSpec::complement_projection(g, &[ones(g)]).unwrap();
        assert_relative_eq!(p.restricted_inverse_norm().unwrap(), 1.0, epsilon = 1e-12);
        // Forgetting the kernel makes the restriction singular.
        let bare = OperatorSpec::from_matrix(g, &p.matrix(), 1.0)
            .unwrap()
            .with_kernel(Vec::new())
            .unwrap();
        assert!(matches!(bare.restricted_inverse_norm(), Err(Error::NotInvertible(_))));
    }

    #[test]
    fn declared_kernel_is_checked() {
        let g = grid(8);
        let id = OperatorSpec::<f64>::identity(g);
        assert!(matches!(
            id.clone().with_kernel(vec![ones(g)]),
            Err(Error::KernelNotAnnihilated { index: 0, .. })
        ));
        let p = OperatorSpec::complement_projection(g, &[ones(g)]).unwrap();
        assert!(matches!(
            p.with_kernel(vec![ones(g), ones(g).scaled(2.0)]),
            Err(Error::DependentKernel)
        ));
    }

    #[test]
    fn detection_finds_declared_kernel() {
        let g = grid(16);
        let halves = [
            GridFunction::interval_indicator(g, 0.0, 0.5).unwrap().scaled(1.0),
            GridFunction::interval_indicator(g, 0.5, 1.0).unwrap(),
        ];
        let p = OperatorSpec::<f64>::complement_projection(g, &halves).unwrap();
        let found = p.detect_kernel().unwrap();
        assert_eq!(found.len(), 2);
        for v in &found {
            assert!(p.apply(v).unwrap().norm() < 1e-12);
        }
    }

    #[test]
    fn decomposition_examples() {
        let g = grid(64);
        let one = OperatorSpec::complement_projection(g, &[ones(g)]).unwrap();
        let d = one.kernel_decomposition().unwrap();
        assert_eq!(d.step_basis.len(), 1);
        assert!(d.jump_points.is_empty());

        let halves: [GridFunction<f64>; 2] = [
            GridFunction::interval_indicator(g, 0.0, 0.5).unwrap(),
            GridFunction::interval_indicator(g, 0.5, 1.0).unwrap(),
        ];
        let d = decompose_kernel(g, &halves).unwrap();
        assert_eq!(d.jump_points, vec![0.5]);
        assert_eq!(d.step_basis.len(), 2);

        let phi = GridFunction::<f64>::from_fn(g, |t| 2.0 * t - 1.0);
        let d = decompose_kernel(g, &[phi.clone()]).unwrap();
        assert!(d.step_basis.is_empty());
        assert_eq!(d.nonstep_basis.len(), 1);
        assert!(d.jump_points.is_empty());

        // Mixed kernel: steps jumping at 1/4 and 1/2 together with two smooth
        // functions, presented in a scrambled basis.
        let s1 = GridFunction::interval_indicator(g, 0.25, 1.0).unwrap();
        let s2 = GridFunction::interval_indicator(g, 0.5, 1.0).unwrap();
        let psi = GridFunction::<f64>::from_fn(g, |t| (3.0 * t).sin());
        let mixed = [
            &s1 + &phi,
            &(&s2 * 2.0) - &psi,
            &(&phi * 0.3) + &psi,
            &s1 + &s2,
        ];
        let d = decompose_kernel(g, &mixed).unwrap();
        assert_eq!(d.step_basis.len(), 2);
        assert_eq!(d.nonstep_basis.len(), 2);
        assert_eq!(d.jump_points, vec![0.25, 0.5]);
        let all: Vec<_> = d.step_basis.iter().chain(&d.nonstep_basis).cloned().collect();
        assert!(crate::linalg::orthonormality_defect(&all).unwrap() < 1e-10);
    }

    #[test]
    fn cosine_modes_are_orthonormal() {
        let g = grid(10);
        let modes: Vec<GridFunction<f64>> = (0..10).map(|j| cosine_mode(g, j).unwrap()).collect();
        assert!(crate::linalg::orthonormality_defect(&modes).unwrap() < 1e-13);
        assert!(cosine_mode::<f64>(g, 10).is_err());
    }

    #[test]
    fn increment_covariance_matches_grid_for_aligned_intervals() {
        let g = grid(16);
        let d = OperatorSpec::cosine_diagonal(g, &[0.0, 2.0, 0.5, 1.2], 0.8).unwrap();
        let cov = IncrementCovariance::new(&d);
        let iv = [(0.0, 0.25), (0.25, 0.5), (0.5, 1.0), (0.125, 0.75)];
        let c = cov.matrix(&iv);
        for (i, &(a, b)) in iv.iter().enumerate() {
            for (j, &(s, t)) in iv.iter().enumerate() {
                let f = d.apply(&GridFunction::interval_indicator(g, a, b).unwrap()).unwrap();
                let h = d.apply(&GridFunction::interval_indicator(g, s, t).unwrap()).unwrap();
                assert_relative_eq!(c[(i, j)], f.inner(&h).unwrap(), epsilon = 1e-13);
            }
        }
        // Identity: exactly the overlap lengths, also off the grid.
        let id = IncrementCovariance::new(&OperatorSpec::<f64>::identity(g));
        let c = id.matrix(&[(0.01, 0.3), (0.2, 0.31)]);
        assert_relative_eq!(c[(0, 1)], 0.1, epsilon = 1e-15);
        assert_relative_eq!(c[(1, 1)], 0.11, epsilon = 1e-15);
    }

    #[test]
    fn f32_operators() {
        let g = grid(8);
        let p = OperatorSpec::<f32>::complement_projection(g, &[GridFunction::constant(g, 1.0)])
            .unwrap();
        let c = p.covariance(&[0.5]).unwrap();
        assert!((c[(0, 0)] - 0.25).abs() < 1e-6);
        assert!((p.restricted_inverse_norm().unwrap() - 1.0).abs() < 1e-5);
    }
}
