use ndarray::NdFloat;
use num_traits::FromPrimitive;
use serde::Serialize;
use std::iter::Sum;

/// Floating-point element type accepted by every fitter and estimator.
pub trait Scalar: NdFloat + FromPrimitive + Default + Send + Sync + Sum + Serialize {
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
