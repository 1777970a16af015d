use core::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating point element type of tensors. Implemented for `f64` (the
/// default everywhere) and `f32`.
pub trait Real: Float + FromPrimitive + Default + Debug + Display + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
