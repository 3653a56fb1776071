//! Floating-point scalar abstraction shared by the numerical kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar usable by the power-flow and sensitivity kernels: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Copy + Send + Sync + Debug + Display + Default + 'static
{
    /// Default power-flow mismatch tolerance for this precision.
    const PF_TOLERANCE: f64;

    /// Converts an `f64` literal or data value, rounding to this precision.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const PF_TOLERANCE: f64 = 1e-4;
}

impl Scalar for f64 {
    const PF_TOLERANCE: f64 = 1e-8;
}
