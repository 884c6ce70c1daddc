//! Scalar abstraction so the math core runs at f32 or f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for tensors, losses and metrics.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64, for literals and config values.
    fn from_f64c(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal convertible to scalar type")
    }

    /// Widening conversion to f64, for serialization and reporting.
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
