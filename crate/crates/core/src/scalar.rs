use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar used by every numeric routine in the crate.
///
/// Implemented for `f32` (training and inference at desk scale) and `f64`
/// (gradient checks and exact-arithmetic oracles).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    /// Lossless widening used by serialization and reporting.
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).unwrap_or_else(Self::nan)
    }

    /// Tag written into array archives.
    const DTYPE: crate::archive::DType;
}

impl Scalar for f32 {
    const DTYPE: crate::archive::DType = crate::archive::DType::F32;
}

impl Scalar for f64 {
    const DTYPE: crate::archive::DType = crate::archive::DType::F64;
}
