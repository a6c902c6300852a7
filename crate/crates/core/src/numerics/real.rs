use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use num_traits::Float;

/// Floating-point element type: `f32` for inference, `f64` for gradient checks.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    // Always the libm crate, so results do not depend on whether num-traits
    // was built with `std`.
    fn libm_exp(self) -> Self;
    fn libm_ln(self) -> Self;
    fn libm_tanh(self) -> Self;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    #[doc(hidden)]
    #[inline]
    fn dot4(a: [&[Self]; 4], b: &[Self]) -> [Self; 4] {
        super::ops::dot4_generic(a, b)
    }

    #[doc(hidden)]
    #[inline]
    fn axpy4(c: &mut [Self], a: [Self; 4], b: [&[Self]; 4]) {
        super::ops::axpy4_generic(c, a, b)
    }
}

impl Real for f32 {
    #[cfg(target_arch = "x86_64")]
    #[inline]
    fn dot4(a: [&[f32]; 4], b: &[f32]) -> [f32; 4] {
        super::ops::dot4_f32(a, b)
    }
    #[cfg(target_arch = "x86_64")]
    #[inline]
    fn axpy4(c: &mut [f32], a: [f32; 4], b: [&[f32]; 4]) {
        super::ops::axpy4_f32(c, a, b)
    }
    #[inline]
    fn libm_exp(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn libm_ln(self) -> Self {
        libm::logf(self)
    }
    #[inline]
    fn libm_tanh(self) -> Self {
        libm::tanhf(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn libm_exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn libm_ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn libm_tanh(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
