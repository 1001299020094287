//! Wave-optics atmospheric turbulence toolkit.
//!
//! Three things live here:
//!
//! 1. an anisoplanatic turbulence **simulator** — Von Kármán phase screens,
//!    split-step Fresnel propagation, per-pixel PSF grids and spatially
//!    varying convolution ([`screen`], [`optics`], [`sim`]);
//! 2. a **restoration** pipeline — non-local reference generation, block
//!    matching and lucky-region fusion, basis-constrained blind
//!    deconvolution ([`reference`], [`fusion`], [`deconv`]);
//! 3. the **frame-count numerics** behind the pipeline — long/short PSF
//!    models, Bernstein deviation bounds, kernel variance surfaces and the
//!    β calibration machinery ([`theory`]).
//!
//! The numerical core is generic over the scalar type through
//! [`num::Scalar`]; the `*64` aliases below are what the CLI and most users
//! want.

pub mod deconv;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod image;
pub mod num;
pub mod optics;
pub mod pipeline;
pub mod quad;
pub mod reference;
pub mod screen;
pub mod seeds;
pub mod sim;
pub mod theory;

pub use error::{Result, TurbError};
pub use grid::{apply_window, fft2, fftshift, ifft2, ComplexField, RealField, WindowSpec};
pub use image::Image;
pub use num::Scalar;
pub use optics::{ApertureShape, ApertureSpec, Psf, PsfExtraction};
pub use screen::{Correlation, PhaseScreenSeq, TurbulenceParams};
pub use sim::{PsfGrid, SimConfig, VideoSequence};

/// Complex propagation field at the default precision.
pub type Field64 = ComplexField<f64>;
/// Real field (phase screens, masks) at the default precision.
pub type Real64 = RealField<f64>;
/// Single-precision variants.
pub type Field32 = ComplexField<f32>;
pub type Real32 = RealField<f32>;
