//! Sampled 2-D fields, the unitary FFT contract and propagation windows.
//!
//! [`ComplexField`] is the unit of wave propagation: a square grid of complex
//! amplitudes with a physical pixel pitch. The FFT is unitary (1/n forward
//! and inverse) so Parseval holds exactly up to rounding and energy checks
//! are convention-free.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::FftPlanner;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TurbError};
use crate::num::Scalar;

/// Square grid of complex optical amplitudes with physical pitch (m/sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField<T> {
    data: Array2<Complex<T>>,
    pitch: T,
}

/// Square grid of reals (phase in radians, apertures, intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct RealField<T> {
    data: Array2<T>,
    pitch: T,
}

impl<T: Scalar> ComplexField<T> {
    /// Builds a field from raw data. The side must be a power of two and the
    /// pitch positive.
    pub fn new(data: Array2<Complex<T>>, pitch: T) -> Result<Self> {
        let (h, w) = data.dim();
        if h != w || !h.is_power_of_two() {
            return Err(TurbError::config(format!(
                "complex field must be square with power-of-two side, got {h}x{w}"
            )));
        }
        if pitch <= T::zero() {
            return Err(TurbError::config("pitch must be positive"));
        }
        Ok(Self { data, pitch })
    }

    pub fn zeros(n: usize, pitch: T) -> Result<Self> {
        Self::new(Array2::from_elem((n, n), Complex::new(T::zero(), T::zero())), pitch)
    }

    /// Samples `f(x, y)` on the centered grid, x along columns and y along
    /// rows; sample `k` sits at `(k - n/2) * pitch`.
    pub fn from_fn(n: usize, pitch: T, mut f: impl FnMut(T, T) -> Complex<T>) -> Result<Self> {
        let half = n as isize / 2;
        let data = Array2::from_shape_fn((n, n), |(i, j)| {
            let y = T::of_usize(0) + T::of((i as isize - half) as f64) * pitch;
            let x = T::of((j as isize - half) as f64) * pitch;
            f(x, y)
        });
        Self::new(data, pitch)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }

    pub fn data(&self) -> &Array2<Complex<T>> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex<T>> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex<T>> {
        self.data
    }

    /// Total energy Σ|u|².
    pub fn energy(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Physical coordinate of sample index along either axis.
    pub fn coord(&self, idx: usize) -> T {
        T::of(idx as f64 - (self.n() / 2) as f64) * self.pitch
    }

    /// Elementwise product with a real mask on the same grid.
    pub fn scaled_by(&self, mask: &RealField<T>) -> Result<Self> {
        if mask.n() != self.n() {
            return Err(TurbError::config(format!(
                "mask side {} does not match field side {}",
                mask.n(),
                self.n()
            )));
        }
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(mask.data().iter())
            .for_each(|(c, &m)| *c = c.scale(m));
        Ok(out)
    }
}

impl<T: Scalar> RealField<T> {
    pub fn new(data: Array2<T>, pitch: T) -> Result<Self> {
        let (h, w) = data.dim();
        if h != w {
            return Err(TurbError::config(format!("real field must be square, got {h}x{w}")));
        }
        if pitch <= T::zero() {
            return Err(TurbError::config("pitch must be positive"));
        }
        Ok(Self { data, pitch })
    }

    pub fn zeros(n: usize, pitch: T) -> Self {
        Self { data: Array2::from_elem((n, n), T::zero()), pitch }
    }

    pub fn from_fn(n: usize, pitch: T, mut f: impl FnMut(T, T) -> T) -> Self {
        let half = n as isize / 2;
        let data = Array2::from_shape_fn((n, n), |(i, j)| {
            let y = T::of((i as isize - half) as f64) * pitch;
            let x = T::of((j as isize - half) as f64) * pitch;
            f(x, y)
        });
        Self { data, pitch }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }

    /// Sample mean.
    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::of_usize(self.data.len())
    }

    /// Sample variance (population).
    pub fn variance(&self) -> T {
        let m = self.mean();
        self.data.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of_usize(self.data.len())
    }
}

fn fft2_dir<T: Scalar>(f: &ComplexField<T>, forward: bool) -> ComplexField<T> {
    let n = f.n();
    let mut planner = FftPlanner::<T>::new();
    let fft = if forward {
        planner.plan_fft_forward(n)
    } else {
        planner.plan_fft_inverse(n)
    };

    let mut data = f.data.clone();
    // Rows are contiguous in ndarray's default layout.
    for mut row in data.rows_mut() {
        fft.process(row.as_slice_mut().expect("row-major layout"));
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[[i, j]];
        }
        fft.process(&mut col);
        for i in 0..n {
            data[[i, j]] = col[i];
        }
    }

    // Unitary normalization: 1/n in each direction.
    let scale = T::one() / T::of_usize(n);
    data.iter_mut().for_each(|c| *c = c.scale(scale));
    ComplexField { data, pitch: f.pitch }
}

/// Unitary forward 2-D DFT.
pub fn fft2<T: Scalar>(f: &ComplexField<T>) -> ComplexField<T> {
    fft2_dir(f, true)
}

/// Unitary inverse 2-D DFT; `ifft2(fft2(f)) == f` up to rounding.
pub fn ifft2<T: Scalar>(f: &ComplexField<T>) -> ComplexField<T> {
    fft2_dir(f, false)
}

/// Swaps quadrants so the zero-frequency/center sample moves between index 0
/// and index n/2. For even n this is its own inverse.
pub fn fftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[(i + h / 2) % h, (j + w / 2) % w]].clone())
}

/// Window applied between propagation hops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowSpec {
    /// No attenuation.
    Ones,
    /// Super-Gaussian exp(-(r/(width_frac·n/2))^exponent), radially symmetric,
    /// equal to 1 at the grid center.
    SuperGaussian { width_frac: f64, exponent: i32 },
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::SuperGaussian { width_frac: 0.9, exponent: 8 }
    }
}

impl WindowSpec {
    /// Materializes the window on an n×n grid (pitch is irrelevant; the
    /// window is defined in samples).
    pub fn build<T: Scalar>(&self, n: usize) -> RealField<T> {
        match *self {
            WindowSpec::Ones => RealField {
                data: Array2::from_elem((n, n), T::one()),
                pitch: T::one(),
            },
            WindowSpec::SuperGaussian { width_frac, exponent } => {
                let half = n as f64 / 2.0;
                let w0 = T::of(width_frac * half);
                let data = Array2::from_shape_fn((n, n), |(i, j)| {
                    let dy = T::of(i as f64 - half);
                    let dx = T::of(j as f64 - half);
                    let r = (dx * dx + dy * dy).sqrt();
                    (-(r / w0).powi(exponent)).exp()
                });
                RealField { data, pitch: T::one() }
            }
        }
    }
}

/// Elementwise window application; energy is non-increasing for any window
/// bounded by 1.
pub fn apply_window<T: Scalar>(f: &ComplexField<T>, kind: &WindowSpec) -> ComplexField<T> {
    let w = kind.build::<T>(f.n());
    f.scaled_by(&w).expect("window built on matching grid")
}

const FIELD_HEADER_LEN: usize = 16;

fn write_header(out: &mut impl Write, n: usize, pitch: f64) -> Result<()> {
    out.write_all(&(n as u64).to_le_bytes())?;
    out.write_all(&pitch.to_le_bytes())?;
    Ok(())
}

fn read_header(inp: &mut impl Read) -> Result<(usize, f64)> {
    let mut buf = [0u8; FIELD_HEADER_LEN];
    inp.read_exact(&mut buf)?;
    let n = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
    let pitch = f64::from_le_bytes(buf[8..].try_into().unwrap());
    Ok((n, pitch))
}

impl<T: Scalar> RealField<T> {
    /// Binary dump: 16-byte header (n: u64, pitch: f64) then n² little-endian
    /// f64 samples, row-major.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut out, self.n(), self.pitch.to_f64_lossy())?;
        for &v in self.data.iter() {
            out.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
        let (n, pitch) = read_header(&mut inp)?;
        let mut buf = [0u8; 8];
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            inp.read_exact(&mut buf)?;
            data.push(T::of(f64::from_le_bytes(buf)));
        }
        let data = Array2::from_shape_vec((n, n), data)
            .map_err(|e| TurbError::config(format!("bad field file shape: {e}")))?;
        RealField::new(data, T::of(pitch))
    }
}

impl<T: Scalar> ComplexField<T> {
    /// Binary dump in the same layout as [`RealField::write_to`] with
    /// interleaved re/im pairs.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut out, self.n(), self.pitch.to_f64_lossy())?;
        for c in self.data.iter() {
            out.write_all(&c.re.to_f64_lossy().to_le_bytes())?;
            out.write_all(&c.im.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
        let (n, pitch) = read_header(&mut inp)?;
        let mut buf = [0u8; 16];
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            inp.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf[..8].try_into().unwrap());
            let im = f64::from_le_bytes(buf[8..].try_into().unwrap());
            data.push(Complex::new(T::of(re), T::of(im)));
        }
        let data = Array2::from_shape_vec((n, n), data)
            .map_err(|e| TurbError::config(format!("bad field file shape: {e}")))?;
        ComplexField::new(data, T::of(pitch))
    }
}
