//! Floating-point abstraction for the tensor engine.
//!
//! Shipped paths (training, coding, the CLI) run on `Real = f32`. The same
//! generic code instantiates at `f64` in tests where a finite-difference
//! oracle needs headroom above single-precision round-off.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Element type for all tensors in the engine.
pub trait Scalar: NdFloat + FromPrimitive {
    fn erf(self) -> Self;
    fn from_f64_c(x: f64) -> Self;
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64_c(x: f64) -> Self {
        x as f32
    }
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64_c(x: f64) -> Self {
        x
    }
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// Runtime element type for everything that ships.
pub type Real = f32;

/// Probability floor used by every rate computation, 2^-24.
///
/// The coder's 16-bit tables cannot represent masses below 2^-16; training
/// uses a stricter floor so gradients stay alive well past that point.
pub const PROB_FLOOR: f64 = 5.960_464_477_539_063e-8;

/// Lower clamp for predicted Gaussian scales.
pub const SIGMA_MIN: f64 = 0.01;
