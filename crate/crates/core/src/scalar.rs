//! Scalar abstraction shared by the deterministic linear-algebra modules.

use std::fmt::{Debug, Display};
use std::iter::{Product, Sum};

use nalgebra::RealField;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by [`crate::grid`], [`crate::operators`]
/// and [`crate::gram`]: `f32` or `f64`.
pub trait Real:
    Float
    + RealField
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Product
    + Copy
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Equilibrated Gram eigenvalues at or below this are treated as zero.
    fn gram_clamp() -> Self;

    /// Relative tolerance used for annihilation and orthonormality checks.
    fn structural_tol() -> Self;

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("literal is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    fn gram_clamp() -> Self {
        1e-14
    }

    fn structural_tol() -> Self {
        1e-10
    }
}

impl Real for f32 {
    fn gram_clamp() -> Self {
        1e-6
    }

    fn structural_tol() -> Self {
        1e-4
    }
}
