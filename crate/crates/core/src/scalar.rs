use ndarray::NdFloat;
use num_traits::FromPrimitive;
use std::iter::Sum;

/// Floating point type the network and losses are generic over.
///
/// Production training runs in `f32`; gradient checks shadow the same code in `f64`.
pub trait Scalar: NdFloat + FromPrimitive + Sum + Default {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
