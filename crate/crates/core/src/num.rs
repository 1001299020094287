//! Scalar abstraction for the numerical core.
//!
//! Everything downstream of the FFT is written against [`Scalar`] so the
//! whole toolkit runs in either `f32` or `f64`; the concrete aliases live at
//! the crate root. Special functions route through `f64` — the rational
//! approximations behind `erf` are only good to ~1e-16 anyway.

use num_traits::{Float, FloatConst};
use rustfft::FftNum;

/// Floating-point scalar usable by every module in this crate.
pub trait Scalar: Float + FloatConst + FftNum + std::iter::Sum<Self> {
    /// Lift an `f64` literal into `Self`.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal")
    }

    /// Lift a `usize` count into `Self`.
    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize fits in scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    /// Error function.
    #[inline]
    fn erf(self) -> Self {
        Self::of(statrs::function::erf::erf(self.to_f64_lossy()))
    }

    /// Standard normal CDF Φ(x).
    #[inline]
    fn norm_cdf(self) -> Self {
        let x = self.to_f64_lossy();
        Self::of(0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2))
    }

    /// Standard normal quantile Φ⁻¹(p), p ∈ (0, 1).
    #[inline]
    fn norm_quantile(p: Self) -> Self {
        let p = p.to_f64_lossy();
        Self::of(std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * p - 1.0))
    }

    /// Standard normal density φ(x).
    #[inline]
    fn norm_pdf(self) -> Self {
        (-self * self / Self::of(2.0)).exp() / (Self::of(2.0) * Self::PI()).sqrt()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
