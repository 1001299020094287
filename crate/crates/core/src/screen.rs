//! Von Kármán phase screens: single draws, temporally correlated sequences,
//! crops of a larger master screen, and the Fried-parameter bookkeeping that
//! ties screen strength to `Cn²`.

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TurbError};
use crate::grid::{ifft2, ComplexField, RealField};
use crate::num::Scalar;

/// Geometry and turbulence parameters for screen generation and propagation.
///
/// `r0` and `cn2` are kept consistent through the plane-wave Fried integral
/// `r0 = (0.423 k² Cn² L)^{-3/5}`; construct through [`TurbulenceParams::from_cn2`]
/// or [`TurbulenceParams::from_r0`] to derive one from the other.
#[derive(Debug, Clone, PartialEq)]
pub struct TurbulenceParams<T> {
    /// Refractive-index structure constant (m^{-2/3}), whole path.
    pub cn2: T,
    /// Fried parameter of the whole path (m).
    pub r0: T,
    /// Inner scale (m).
    pub l0: T,
    /// Outer scale (m).
    pub big_l0: T,
    /// Wavelength (m).
    pub lambda: T,
    /// Propagation path length L (m).
    pub path_length: T,
    /// Number of phase screens along the path.
    pub n_screens: usize,
    /// Master screen side (samples); crops are taken out of this.
    pub screen_n: usize,
    /// Per-propagation screen side (samples), equal to the propagation grid.
    pub crop_n: usize,
    /// Base RNG seed.
    pub seed: u64,
    /// Low-frequency subharmonic augmentation levels (0 disables).
    pub subharmonic_levels: usize,
}

/// `r0 = (0.423 k² Cn² L)^{-3/5}` for a constant-Cn² plane-wave path.
pub fn r0_from_cn2<T: Scalar>(cn2: T, lambda: T, path_length: T) -> T {
    let k = T::of(2.0) * T::PI() / lambda;
    (T::of(0.423) * k * k * cn2 * path_length).powf(T::of(-0.6))
}

/// Inverse of [`r0_from_cn2`].
pub fn cn2_from_r0<T: Scalar>(r0: T, lambda: T, path_length: T) -> T {
    let k = T::of(2.0) * T::PI() / lambda;
    r0.powf(T::of(-5.0 / 3.0)) / (T::of(0.423) * k * k * path_length)
}

/// Splits a whole-path `r0` into `n_screens` equal shares satisfying
/// `Σ r0_i^{-5/3} = r0^{-5/3}`, i.e. `r0_i = r0 · n^{3/5}`.
pub fn split_r0<T: Scalar>(r0: T, n_screens: usize) -> Vec<T> {
    let per = r0 * T::of_usize(n_screens).powf(T::of(0.6));
    vec![per; n_screens]
}

impl<T: Scalar> TurbulenceParams<T> {
    pub fn from_cn2(
        cn2: T,
        lambda: T,
        path_length: T,
        l0: T,
        big_l0: T,
        n_screens: usize,
        screen_n: usize,
        crop_n: usize,
        seed: u64,
    ) -> Result<Self> {
        let r0 = r0_from_cn2(cn2, lambda, path_length);
        let p = Self {
            cn2,
            r0,
            l0,
            big_l0,
            lambda,
            path_length,
            n_screens,
            screen_n,
            crop_n,
            seed,
            subharmonic_levels: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_r0(
        r0: T,
        lambda: T,
        path_length: T,
        l0: T,
        big_l0: T,
        n_screens: usize,
        screen_n: usize,
        crop_n: usize,
        seed: u64,
    ) -> Result<Self> {
        let cn2 = cn2_from_r0(r0, lambda, path_length);
        let p = Self {
            cn2,
            r0,
            l0,
            big_l0,
            lambda,
            path_length,
            n_screens,
            screen_n,
            crop_n,
            seed,
            subharmonic_levels: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r0 <= T::zero() || self.l0 <= T::zero() {
            return Err(TurbError::parameter("r0 and l0 must be positive"));
        }
        if self.big_l0 <= self.l0 {
            return Err(TurbError::parameter("outer scale L0 must exceed inner scale l0"));
        }
        if self.n_screens < 1 {
            return Err(TurbError::parameter("need at least one screen"));
        }
        if self.crop_n > self.screen_n {
            return Err(TurbError::parameter("crop_n must not exceed screen_n"));
        }
        let derived = r0_from_cn2(self.cn2, self.lambda, self.path_length);
        let rel = ((derived - self.r0) / self.r0).abs();
        if rel > T::of(1e-6) {
            return Err(TurbError::parameter(format!(
                "r0 and cn2 disagree by {:.3e} relative",
                rel.to_f64_lossy()
            )));
        }
        Ok(())
    }

    /// Voelz-critical grid pitch `Δx = sqrt(λ L / N)` for the crop grid.
    pub fn pitch(&self) -> T {
        (self.lambda * self.path_length / T::of_usize(self.crop_n)).sqrt()
    }

    /// Per-screen Fried parameters for the equal-strength split.
    pub fn per_screen_r0(&self) -> Vec<T> {
        split_r0(self.r0, self.n_screens)
    }

    /// Distance of one free-space hop, `L / n_screens`.
    pub fn hop(&self) -> T {
        self.path_length / T::of_usize(self.n_screens)
    }
}

/// Modified Von Kármán phase PSD at spatial frequency magnitude `rho`
/// (cycles/m):
/// `S(ρ) = 0.023 exp(-ρ²/f_m²) / (r0^{5/3} (ρ² + 1/L0²)^{11/6})`,
/// with `f_m = 5.92/(2π l0)`.
pub fn von_karman_psd<T: Scalar>(rho: T, r0: T, l0: T, big_l0: T) -> Result<T> {
    if r0 <= T::zero() {
        return Err(TurbError::parameter("r0 must be positive"));
    }
    let fm = T::of(5.92) / (T::of(2.0) * T::PI() * l0);
    let f0 = T::one() / big_l0;
    let num = T::of(0.023) * (-(rho * rho) / (fm * fm)).exp();
    let den = r0.powf(T::of(5.0 / 3.0)) * (rho * rho + f0 * f0).powf(T::of(11.0 / 6.0));
    Ok(num / den)
}

/// How phase-screen sequences evolve over frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    /// Fresh noise every frame.
    Uncorrelated,
    /// First-order autoregression of the driving noise with coefficient rho:
    /// `noise_t = rho·noise_{t-1} + sqrt(1-rho²)·fresh`.
    Ar1(f64),
}

impl Correlation {
    pub fn label(&self) -> String {
        match self {
            Correlation::Uncorrelated => "uncorrelated".to_string(),
            Correlation::Ar1(rho) => format!("ar1 {rho}"),
        }
    }
}

/// Temporally ordered phase screens for one screen slot.
#[derive(Debug, Clone)]
pub struct PhaseScreenSeq<T> {
    pub screens: Vec<RealField<T>>,
    pub correlation: Correlation,
    pub seed: u64,
}

impl<T: Scalar> PhaseScreenSeq<T> {
    /// Writes `seed`, `correlation` and per-frame lines as structured text.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "seed = {}", self.seed)?;
        writeln!(out, "correlation = {}", self.correlation.label())?;
        writeln!(out, "frames = {}", self.screens.len())?;
        Ok(())
    }
}

struct NoiseState {
    a: Array2<f64>,
    b: Array2<f64>,
}

fn fresh_noise(rng: &mut ChaCha8Rng, n: usize) -> NoiseState {
    let a = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
    let b = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
    NoiseState { a, b }
}

/// Signed DFT frequency for bin `k` of `n`, in units of the frequency step.
fn signed_freq(k: usize, n: usize) -> isize {
    if k <= n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}

/// Synthesizes one screen from frozen white noise:
/// `φ = Re(IDFT[(A + jB)·√S(ρ)·Δf])` with the DC bin of √S zeroed.
fn screen_from_noise<T: Scalar>(p: &TurbulenceParams<T>, r0: T, noise: &NoiseState) -> RealField<T> {
    let n = p.screen_n;
    let pitch = p.pitch();
    let df = T::one() / (T::of_usize(n) * pitch);
    let mut spec = ComplexField::<T>::zeros(n, pitch).expect("screen_n power of two");
    for i in 0..n {
        let fy = T::of(signed_freq(i, n) as f64) * df;
        for j in 0..n {
            if i == 0 && j == 0 {
                continue; // zero-mean screen
            }
            let fx = T::of(signed_freq(j, n) as f64) * df;
            let rho = (fx * fx + fy * fy).sqrt();
            let amp = von_karman_psd(rho, r0, p.l0, p.big_l0)
                .expect("validated params")
                .sqrt()
                * df;
            let a = T::of(noise.a[[i, j]]);
            let b = T::of(noise.b[[i, j]]);
            spec.data_mut()[[i, j]] = Complex::new(a * amp, b * amp);
        }
    }
    let complex_screen = ifft2(&spec);
    // ifft2 is unitary (1/n); the synthesis wants the plain inverse DFT sum.
    let scale = T::of_usize(n);
    let data = complex_screen.data().mapv(|c| c.re * scale);
    let mut screen = RealField::new(data, pitch).expect("square");
    if p.subharmonic_levels > 0 {
        add_subharmonics(p, r0, noise, &mut screen);
    }
    screen
}

/// Low-frequency augmentation: for each level `p`, a 3×3 grid of frequencies
/// at spacing `Δf/3^p` (center cell excluded) is added directly in the
/// spatial domain. Noise is drawn deterministically from the master noise
/// grid corners so a fixed seed still gives a fixed screen.
fn add_subharmonics<T: Scalar>(
    p: &TurbulenceParams<T>,
    r0: T,
    noise: &NoiseState,
    screen: &mut RealField<T>,
) {
    let n = p.screen_n;
    let pitch = p.pitch();
    let df = 1.0 / (n as f64 * pitch.to_f64_lossy());
    let two_pi = T::of(2.0) * T::PI();
    for level in 1..=p.subharmonic_levels {
        let dfp = T::of(df / 3f64.powi(level as i32));
        for (cell, (ci, cj)) in [(0usize, 0isize), (0, 1), (0, -1), (1, 0), (1, 1), (1, -1), (2, 0), (2, 1)]
            .iter()
            .map(|&(r, c)| (r, c))
            .enumerate()
        {
            // Reuse master-grid noise samples as the subharmonic draws.
            let src = (level * 8 + cell) % (n * n);
            let a = T::of(noise.a[[src / n, src % n]]);
            let b = T::of(noise.b[[src / n, src % n]]);
            let fy = dfp * T::of(ci as f64 - 1.0);
            let fx = dfp * T::of(cj as f64);
            if fx == T::zero() && fy == T::zero() {
                continue;
            }
            let rho = (fx * fx + fy * fy).sqrt();
            let amp =
                von_karman_psd(rho, r0, p.l0, p.big_l0).expect("validated params").sqrt() * dfp;
            let half = n as isize / 2;
            for i in 0..n {
                let y = T::of((i as isize - half) as f64) * pitch;
                for j in 0..n {
                    let x = T::of((j as isize - half) as f64) * pitch;
                    let ph = two_pi * (fx * x + fy * y);
                    let v = a * amp * ph.cos() - b * amp * ph.sin();
                    screen.data_mut()[[i, j]] = screen.data_mut()[[i, j]] + v;
                }
            }
        }
    }
}

/// Draws one Von Kármán screen of side `screen_n` using `p.r0` as the screen
/// strength. Deterministic per `(params, noise_seed)`.
pub fn generate_screen<T: Scalar>(p: &TurbulenceParams<T>, noise_seed: u64) -> Result<RealField<T>> {
    p.validate()?;
    if !p.screen_n.is_power_of_two() {
        return Err(TurbError::parameter("screen_n must be a power of two for FFT synthesis"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = fresh_noise(&mut rng, p.screen_n);
    Ok(screen_from_noise(p, p.r0, &noise))
}

/// Draws `t` temporally ordered screens. Under `Ar1(rho)` the driving noise
/// evolves as `rho·prev + sqrt(1-rho²)·fresh`, so each frame keeps the
/// marginal distribution of a single [`generate_screen`] draw.
pub fn generate_sequence<T: Scalar>(
    p: &TurbulenceParams<T>,
    t: usize,
    correlation: Correlation,
) -> Result<PhaseScreenSeq<T>> {
    p.validate()?;
    if t < 1 {
        return Err(TurbError::parameter("frame count must be at least 1"));
    }
    if !p.screen_n.is_power_of_two() {
        return Err(TurbError::parameter("screen_n must be a power of two for FFT synthesis"));
    }
    if let Correlation::Ar1(rho) = correlation {
        if !(0.0..1.0).contains(&rho) {
            return Err(TurbError::parameter(format!("ar1 coefficient {rho} outside [0, 1)")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut state = fresh_noise(&mut rng, p.screen_n);
    let mut screens = Vec::with_capacity(t);
    screens.push(screen_from_noise(p, p.r0, &state));
    for _ in 1..t {
        match correlation {
            Correlation::Uncorrelated => {
                state = fresh_noise(&mut rng, p.screen_n);
            }
            Correlation::Ar1(rho) => {
                let fresh = fresh_noise(&mut rng, p.screen_n);
                let keep = rho;
                let mix = (1.0 - rho * rho).sqrt();
                state
                    .a
                    .iter_mut()
                    .zip(fresh.a.iter())
                    .for_each(|(s, &f)| *s = keep * *s + mix * f);
                state
                    .b
                    .iter_mut()
                    .zip(fresh.b.iter())
                    .for_each(|(s, &f)| *s = keep * *s + mix * f);
            }
        }
        screens.push(screen_from_noise(p, p.r0, &state));
    }
    Ok(PhaseScreenSeq { screens, correlation, seed: p.seed })
}

/// Exact sub-array copy of a `crop_n` window centered at `center`
/// (row, col in samples). Errors when the window leaves the master screen.
pub fn crop_screen<T: Scalar>(
    s: &RealField<T>,
    center: (usize, usize),
    crop_n: usize,
) -> Result<RealField<T>> {
    let n = s.n();
    let half = crop_n / 2;
    let (ci, cj) = center;
    if ci < half || cj < half || ci - half + crop_n > n || cj - half + crop_n > n {
        return Err(TurbError::range(format!(
            "crop window {crop_n} at ({ci}, {cj}) exceeds master screen of side {n}"
        )));
    }
    let view = s.data().slice(ndarray::s![ci - half..ci - half + crop_n, cj - half..cj - half + crop_n]);
    RealField::new(view.to_owned(), s.pitch())
}
