//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::LowerExp;

use nalgebra::RealField;
use num_traits::ToPrimitive;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the estimators are written against: `f32` or `f64`.
///
/// Arithmetic and elementary functions come from [`RealField`]; conversion
/// out goes through [`ToPrimitive`].
pub trait Scalar:
    RealField + Copy + ToPrimitive + LowerExp + Serialize + DeserializeOwned + Default
{
    /// Relative eigenvalue cut used when whitening nearly singular Gram matrices.
    fn default_rel_cut() -> Self;

    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    /// Converts a count.
    #[inline]
    fn from_count(n: usize) -> Self {
        nalgebra::convert(n as f64)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn default_rel_cut() -> Self {
        1e-10
    }
}

impl Scalar for f32 {
    fn default_rel_cut() -> Self {
        1e-5
    }
}
