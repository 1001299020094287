//! Wave propagation along the optical path: point-source synthesis, Fresnel
//! free-space hops, phase imparting, split-step chaining, aperture masking
//! and PSF extraction at the imaging plane.

use ndarray::Array2;
use num_complex::Complex;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TurbError};
use crate::grid::{apply_window, fft2, fftshift, ifft2, ComplexField, RealField, WindowSpec};
use crate::num::Scalar;
use crate::screen::TurbulenceParams;

/// Pupil mask geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApertureShape {
    Circle,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApertureSpec<T> {
    pub shape: ApertureShape,
    /// Diameter (circle) or side (square), meters.
    pub diameter: T,
}

impl<T: Scalar> ApertureSpec<T> {
    pub fn circle(diameter: T) -> Self {
        Self { shape: ApertureShape::Circle, diameter }
    }

    pub fn square(diameter: T) -> Self {
        Self { shape: ApertureShape::Square, diameter }
    }

    /// Rasterizes the mask with 8×8 coverage supersampling so the rim is
    /// symmetric on the even grid.
    pub fn mask(&self, n: usize, pitch: T) -> Result<RealField<T>> {
        let extent = T::of_usize(n) * pitch;
        if self.diameter <= T::zero() || self.diameter > extent {
            return Err(TurbError::parameter(format!(
                "aperture diameter {:.4} outside (0, {:.4}] grid extent",
                self.diameter.to_f64_lossy(),
                extent.to_f64_lossy()
            )));
        }
        let half_d = self.diameter.to_f64_lossy() / 2.0;
        let p = pitch.to_f64_lossy();
        let half_n = (n / 2) as f64;
        const SS: usize = 8;
        let shape = self.shape;
        let data = Array2::from_shape_fn((n, n), |(i, j)| {
            let y0 = (i as f64 - half_n) * p;
            let x0 = (j as f64 - half_n) * p;
            // Quick accept/reject away from the rim.
            let r_out = (x0.abs() + p).hypot(y0.abs() + p);
            let r_in = (x0.abs() - p).max(0.0).hypot((y0.abs() - p).max(0.0));
            let inside = |x: f64, y: f64| match shape {
                ApertureShape::Circle => x * x + y * y <= half_d * half_d,
                ApertureShape::Square => x.abs() <= half_d && y.abs() <= half_d,
            };
            let coverage = if r_in > half_d * 1.5 {
                0.0
            } else if r_out < half_d * 0.5 {
                1.0
            } else {
                let mut hits = 0usize;
                for si in 0..SS {
                    for sj in 0..SS {
                        let y = y0 + ((si as f64 + 0.5) / SS as f64 - 0.5) * p;
                        let x = x0 + ((sj as f64 + 0.5) / SS as f64 - 0.5) * p;
                        if inside(x, y) {
                            hits += 1;
                        }
                    }
                }
                hits as f64 / (SS * SS) as f64
            };
            T::of(coverage)
        });
        RealField::new(data, pitch)
    }
}

/// Normalized sinc, `sin(πt)/(πt)`.
fn sinc<T: Scalar>(t: T) -> T {
    if t == T::zero() {
        T::one()
    } else {
        let pt = T::PI() * t;
        pt.sin() / pt
    }
}

/// Gaussian-windowed sinc² source centered at `(x0, y0)`:
/// `u0 = λLR² e^{-jk r²/(2L)} sinc(R x) sinc(R y) e^{-R² r²/16}` with
/// `R = F/(λL)`; `flat_size` F is the flat-field width wanted at the pupil.
pub fn point_source<T: Scalar>(
    x0: T,
    y0: T,
    p: &TurbulenceParams<T>,
    aperture_d: T,
    flat_size: T,
) -> Result<ComplexField<T>> {
    let pitch = p.pitch();
    let width = T::of_usize(p.crop_n) * pitch;
    if flat_size < aperture_d || flat_size > width {
        return Err(TurbError::parameter(format!(
            "flat-region size {:.4} must lie in [aperture D {:.4}, grid width {:.4}]",
            flat_size.to_f64_lossy(),
            aperture_d.to_f64_lossy(),
            width.to_f64_lossy()
        )));
    }
    let lam_l = p.lambda * p.path_length;
    let r = flat_size / lam_l;
    let k = T::of(2.0) * T::PI() / p.lambda;
    let amp0 = lam_l * r * r;
    let chirp = -k / (T::of(2.0) * p.path_length);
    ComplexField::from_fn(p.crop_n, pitch, |x, y| {
        let dx = x - x0;
        let dy = y - y0;
        let r2 = dx * dx + dy * dy;
        let mag = amp0 * sinc(r * dx) * sinc(r * dy) * (-r * r * r2 / T::of(16.0)).exp();
        let phase = chirp * r2;
        Complex::from_polar(mag, phase)
    })
}

/// Spatial Fresnel convolution kernel `h(x,y,z) = e^{jkz}/(jλz) · e^{jk r²/(2z)}`
/// sampled on the same grid as `f`. `|h| = 1/(λz)` everywhere.
pub fn fresnel_kernel<T: Scalar>(z: T, p: &TurbulenceParams<T>) -> Result<ComplexField<T>> {
    if z <= T::zero() {
        return Err(TurbError::parameter("propagation distance must be positive"));
    }
    let k = T::of(2.0) * T::PI() / p.lambda;
    let inv_mag = T::one() / (p.lambda * z);
    // 1/j contributes a -π/2 phase.
    let base_phase = k * z - T::PI() / T::of(2.0);
    ComplexField::from_fn(p.crop_n, p.pitch(), |x, y| {
        let phase = base_phase + k * (x * x + y * y) / (T::of(2.0) * z);
        Complex::from_polar(inv_mag, phase)
    })
}

/// Fresnel transfer function over distance `z`; the spectral counterpart of
/// [`fresnel_kernel`] with unit modulus, so spectral propagation conserves
/// energy exactly and `z → -z` is the conjugate (inverse) kernel.
fn fresnel_transfer<T: Scalar>(n: usize, pitch: T, lambda: T, z: T) -> Array2<Complex<T>> {
    let df = T::one() / (T::of_usize(n) * pitch);
    let k = T::of(2.0) * T::PI() / lambda;
    let neg_pi_lambda_z = -T::PI() * lambda * z;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let fy = T::of(signed_bin(i, n) as f64) * df;
        let fx = T::of(signed_bin(j, n) as f64) * df;
        let phase = k * z + neg_pi_lambda_z * (fx * fx + fy * fy);
        Complex::from_polar(T::one(), phase)
    })
}

fn signed_bin(k: usize, n: usize) -> isize {
    if k <= n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}

/// Free-space Fresnel propagation over `z` (negative `z` back-propagates),
/// realized as a spectral elementwise product.
pub fn propagate<T: Scalar>(u: &ComplexField<T>, z: T, lambda: T) -> ComplexField<T> {
    let tf = fresnel_transfer(u.n(), u.pitch(), lambda, z);
    let mut spec = fft2(u);
    spec.data_mut().iter_mut().zip(tf.iter()).for_each(|(c, h)| *c = *c * h);
    ifft2(&spec)
}

/// Voelz sampling ratio `Δx / sqrt(λL/N)`; unity is critical sampling.
pub fn voelz_ratio<T: Scalar>(pitch: T, lambda: T, path_length: T, n: usize) -> T {
    pitch / (lambda * path_length / T::of_usize(n)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWarning {
    pub ratio: f64,
}

/// Propagation that also reports a Voelz-criterion violation (ratio off
/// critical by more than 2× either way). The warning is advisory; desk-scale
/// configs shrink grids on purpose.
pub fn propagate_checked<T: Scalar>(
    u: &ComplexField<T>,
    z: T,
    lambda: T,
    path_length: T,
) -> (ComplexField<T>, Option<SamplingWarning>) {
    let ratio = voelz_ratio(u.pitch(), lambda, path_length, u.n()).to_f64_lossy();
    let warn = if !(0.5..=2.0).contains(&ratio) { Some(SamplingWarning { ratio }) } else { None };
    (propagate(u, z, lambda), warn)
}

/// Multiplies the wavefront by `e^{jψ}`; magnitudes are untouched.
pub fn impart_phase<T: Scalar>(u: &ComplexField<T>, psi: &RealField<T>) -> Result<ComplexField<T>> {
    if psi.n() != u.n() {
        return Err(TurbError::config(format!(
            "phase screen side {} does not match field side {}",
            psi.n(),
            u.n()
        )));
    }
    let mut out = u.clone();
    out.data_mut()
        .iter_mut()
        .zip(psi.data().iter())
        .for_each(|(c, &ph)| *c = *c * Complex::from_polar(T::one(), ph));
    Ok(out)
}

/// Split-step propagation over `total_distance`: screens sit at
/// `(k-1)·hop` from the source with `hop = total/n_screens`, each step
/// imparting a screen then hopping, the last hop landing on the pupil.
/// The window is applied after every hop. An empty screen list degenerates
/// to one windowed free-space propagation over the whole distance.
pub fn split_step<T: Scalar>(
    u0: &ComplexField<T>,
    screens: &[RealField<T>],
    total_distance: T,
    lambda: T,
    window: &WindowSpec,
) -> Result<ComplexField<T>> {
    if total_distance <= T::zero() {
        return Err(TurbError::parameter("propagation distance must be positive"));
    }
    if screens.is_empty() {
        let u = propagate(u0, total_distance, lambda);
        return Ok(apply_window(&u, window));
    }
    let hop = total_distance / T::of_usize(screens.len());
    let mut u = u0.clone();
    for psi in screens {
        u = impart_phase(&u, psi)?;
        u = propagate(&u, hop, lambda);
        u = apply_window(&u, window);
    }
    Ok(u)
}

/// Nonnegative kernel with unit sum, tied to an image-plane pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf<T> {
    data: Array2<T>,
}

impl<T: Scalar> Psf<T> {
    /// Normalizes a nonnegative kernel to unit sum.
    pub fn from_kernel(mut data: Array2<T>) -> Result<Self> {
        if data.iter().any(|v| *v < T::zero()) {
            return Err(TurbError::parameter("PSF entries must be nonnegative"));
        }
        let total: T = data.iter().copied().sum();
        if total <= T::zero() {
            return Err(TurbError::DegeneratePsf("kernel sums to zero".into()));
        }
        data.mapv_inplace(|v| v / total);
        Ok(Self { data })
    }

    /// Kronecker delta at the kernel center.
    pub fn delta(n: usize) -> Self {
        let mut data = Array2::from_elem((n, n), T::zero());
        data[[n / 2, n / 2]] = T::one();
        Self { data }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }

    /// Intensity centroid (row, col) in kernel pixels.
    pub fn centroid(&self) -> (T, T) {
        intensity_centroid(&self.data)
    }

    /// RMS radius about the centroid, averaged over the two axes:
    /// `sqrt((var_row + var_col)/2)` in kernel pixels.
    pub fn second_moment_radius(&self) -> T {
        let (cr, cc) = self.centroid();
        let mut vr = T::zero();
        let mut vc = T::zero();
        for ((i, j), &v) in self.data.indexed_iter() {
            let dr = T::of_usize(i) - cr;
            let dc = T::of_usize(j) - cc;
            vr = vr + v * dr * dr;
            vc = vc + v * dc * dc;
        }
        ((vr + vc) / T::of(2.0)).sqrt()
    }

    /// Shifts the kernel by an integer offset so its centroid lands on the
    /// center pixel, then renormalizes (mass shifted off the edge is lost).
    pub fn centroided(&self) -> Result<Self> {
        let n = self.n() as isize;
        let (cr, cc) = self.centroid();
        let dr = cr.round().to_f64_lossy() as isize - n / 2;
        let dc = cc.round().to_f64_lossy() as isize - n / 2;
        if dr == 0 && dc == 0 {
            return Ok(self.clone());
        }
        let mut out = Array2::from_elem((n as usize, n as usize), T::zero());
        for i in 0..n {
            for j in 0..n {
                let si = i + dr;
                let sj = j + dc;
                if si >= 0 && si < n && sj >= 0 && sj < n {
                    out[[i as usize, j as usize]] = self.data[[si as usize, sj as usize]];
                }
            }
        }
        Psf::from_kernel(out)
    }

    /// CSV dump, row-major, one row per line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in self.data.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{:e}", v.to_f64_lossy())).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Binary dump in the shared field format (pitch recorded as 1).
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        RealField::new(self.data.clone(), T::one())?.write_to(path)
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let f = RealField::<T>::read_from(path)?;
        Psf::from_kernel(f.into_data())
    }
}

/// Centroid of a nonnegative array, (row, col).
pub fn intensity_centroid<T: Scalar>(a: &Array2<T>) -> (T, T) {
    let mut total = T::zero();
    let mut mr = T::zero();
    let mut mc = T::zero();
    for ((i, j), &v) in a.indexed_iter() {
        total = total + v;
        mr = mr + v * T::of_usize(i);
        mc = mc + v * T::of_usize(j);
    }
    (mr / total, mc / total)
}

/// How the pupil-plane intensity becomes an image-plane kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfExtraction<T> {
    /// Output kernel side (odd).
    pub kernel_n: usize,
    /// Image-plane pixel pitch; `None` uses the natural FFT pitch
    /// `λL/(N·Δx)` (equal to `Δx` at Voelz-critical sampling).
    pub image_pitch: Option<T>,
    /// Recentre the kernel on its centroid (used for short-PSF corpora).
    pub centroid: bool,
}

impl<T> Default for PsfExtraction<T> {
    fn default() -> Self {
        Self { kernel_n: 15, image_pitch: None, centroid: false }
    }
}

/// Image-plane pitch produced by the pupil FFT.
pub fn natural_image_pitch<T: Scalar>(p: &TurbulenceParams<T>) -> T {
    p.lambda * p.path_length / (T::of_usize(p.crop_n) * p.pitch())
}

/// Applies aperture and lens phase to the pupil field, forms the focal
/// intensity `|FFT(r)|²`, resamples it to the image-plane pitch and crops the
/// central kernel, normalized to unit sum.
pub fn pupil_to_psf<T: Scalar>(
    u: &ComplexField<T>,
    a: &ApertureSpec<T>,
    p: &TurbulenceParams<T>,
    extract: &PsfExtraction<T>,
) -> Result<Psf<T>> {
    let n = u.n();
    if extract.kernel_n > n {
        return Err(TurbError::config("kernel larger than propagation grid"));
    }
    let mask = a.mask(n, u.pitch())?;
    let masked = u.scaled_by(&mask)?;
    if masked.energy() <= T::zero() {
        return Err(TurbError::DegeneratePsf("pupil field is identically zero".into()));
    }
    // Lens focusing phase exp(-jπ r²/(λL)).
    let coef = -T::PI() / (p.lambda * p.path_length);
    let mut r = masked;
    let half = n as isize / 2;
    let pitch = u.pitch();
    for ((i, j), c) in r.data_mut().indexed_iter_mut() {
        let y = T::of((i as isize - half) as f64) * pitch;
        let x = T::of((j as isize - half) as f64) * pitch;
        *c = *c * Complex::from_polar(T::one(), coef * (x * x + y * y));
    }
    let spec = fft2(&r);
    let intensity = fftshift(&spec.data().mapv(|c| c.norm_sqr()));

    let native_pitch = natural_image_pitch(p);
    let target_pitch = extract.image_pitch.unwrap_or(native_pitch);
    let ratio = target_pitch / native_pitch;
    let kernel = resample_centered(&intensity, extract.kernel_n, ratio);
    let psf = Psf::from_kernel(kernel)?;
    if extract.centroid {
        psf.centroided()
    } else {
        Ok(psf)
    }
}

/// Area-preserving bilinear resample of a centered intensity map onto a
/// `kernel_n` grid whose pixel is `ratio` source pixels wide.
fn resample_centered<T: Scalar>(src: &Array2<T>, kernel_n: usize, ratio: T) -> Array2<T> {
    let n = src.nrows();
    let c_src = T::of_usize(n / 2);
    let c_out = (kernel_n / 2) as isize;
    let jac = ratio * ratio;
    Array2::from_shape_fn((kernel_n, kernel_n), |(i, j)| {
        let y = c_src + T::of((i as isize - c_out) as f64) * ratio;
        let x = c_src + T::of((j as isize - c_out) as f64) * ratio;
        bilinear(src, y, x) * jac
    })
}

fn bilinear<T: Scalar>(a: &Array2<T>, y: T, x: T) -> T {
    let (h, w) = a.dim();
    let yf = y.floor();
    let xf = x.floor();
    let i0 = yf.to_f64_lossy() as isize;
    let j0 = xf.to_f64_lossy() as isize;
    let dy = y - yf;
    let dx = x - xf;
    let sample = |i: isize, j: isize| -> T {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            T::zero()
        } else {
            a[[i as usize, j as usize]]
        }
    };
    let one = T::one();
    sample(i0, j0) * (one - dy) * (one - dx)
        + sample(i0, j0 + 1) * (one - dy) * dx
        + sample(i0 + 1, j0) * dy * (one - dx)
        + sample(i0 + 1, j0 + 1) * dy * dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::{generate_screen, split_r0, TurbulenceParams};
    use approx::assert_relative_eq;

    fn desk_params() -> TurbulenceParams<f64> {
        TurbulenceParams::from_cn2(1e-16, 0.525e-6, 7000.0, 0.01, 100.0, 5, 256, 128, 7).unwrap()
    }

    fn aperture() -> ApertureSpec<f64> {
        ApertureSpec::circle(0.2034)
    }

    #[test]
    fn point_source_center_value() {
        let p = desk_params();
        let f = 2.5 * 0.2034;
        let u = point_source(0.0, 0.0, &p, 0.2034, f).unwrap();
        let n = u.n();
        let r = f / (p.lambda * p.path_length);
        let expect = p.lambda * p.path_length * r * r;
        let c = u.data()[[n / 2, n / 2]];
        assert_relative_eq!(c.re, expect, max_relative = 1e-12);
        assert!(c.im.abs() < 1e-12 * expect);
    }

    #[test]
    fn point_source_magnitude_even() {
        let p = desk_params();
        let u = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let n = u.n();
        // Skip index 0: the even grid has no mirror sample for it.
        for i in 1..n {
            for j in 1..n {
                let a = u.data()[[i, j]].norm();
                let b = u.data()[[n - i, n - j]].norm();
                assert!((a - b).abs() <= 1e-12 * a.max(b).max(1e-300));
            }
        }
    }

    #[test]
    fn point_source_flat_size_validation() {
        let p = desk_params();
        assert!(point_source(0.0, 0.0, &p, 0.2034, 0.1).is_err());
        assert!(point_source(0.0, 0.0, &p, 0.2034, 10.0).is_err());
    }

    #[test]
    fn fresnel_kernel_unit_modulus_over_lambda_z() {
        let p = desk_params();
        let z = 1400.0;
        let h = fresnel_kernel(z, &p).unwrap();
        let expect = 1.0 / (p.lambda * z);
        for c in h.data().iter() {
            assert_relative_eq!(c.norm(), expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn propagate_conserves_energy() {
        let p = desk_params();
        let u = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let v = propagate(&u, p.path_length, p.lambda);
        let rel = (u.energy() - v.energy()).abs() / u.energy();
        assert!(rel < 1e-6, "energy drift {rel:e}");
    }

    #[test]
    fn propagate_back_propagate_round_trip() {
        let p = desk_params();
        let u = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let v = propagate(&u, 3500.0, p.lambda);
        let w = propagate(&v, -3500.0, p.lambda);
        let err: f64 = w
            .data()
            .iter()
            .zip(u.data().iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err / u.energy().sqrt() < 1e-8);
    }

    #[test]
    fn flat_region_over_aperture_after_free_space() {
        let p = desk_params();
        let u0 = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let u = split_step(&u0, &[], p.path_length, p.lambda, &WindowSpec::default()).unwrap();
        let n = u.n();
        let pitch = u.pitch();
        let half_d = 0.2034 / 2.0;
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let y = (i as f64 - (n / 2) as f64) * pitch;
                let x = (j as f64 - (n / 2) as f64) * pitch;
                if x * x + y * y <= half_d * half_d {
                    let m = u.data()[[i, j]].norm();
                    lo = lo.min(m);
                    hi = hi.max(m);
                }
            }
        }
        assert!(
            (hi - lo) / hi < 0.05,
            "ripple over aperture disc: min {lo:e} max {hi:e} rel {:.4}",
            (hi - lo) / hi
        );
    }

    #[test]
    fn impart_phase_contracts() {
        let p = desk_params();
        let u = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let zero = RealField::zeros(u.n(), u.pitch());
        assert_eq!(impart_phase(&u, &zero).unwrap(), u);

        let s = generate_screen(&p, 3).unwrap();
        let psi = crate::screen::crop_screen(&s, (p.screen_n / 2, p.screen_n / 2), u.n()).unwrap();
        let v = impart_phase(&u, &psi).unwrap();
        for (a, b) in v.data().iter().zip(u.data().iter()) {
            assert!((a.norm() - b.norm()).abs() <= 1e-15 * b.norm().max(1e-300));
        }

        let pi = RealField::from_fn(u.n(), u.pitch(), |_, _| std::f64::consts::PI);
        let neg = impart_phase(&u, &pi).unwrap();
        for (a, b) in neg.data().iter().zip(u.data().iter()) {
            assert!((a + b).norm() < 1e-12 * b.norm().max(1e-300));
        }

        let small = RealField::zeros(u.n() / 2, u.pitch());
        assert!(impart_phase(&u, &small).is_err());
    }

    #[test]
    fn split_step_zero_screens_equals_windowed_free_space() {
        let p = desk_params();
        let u0 = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let w = WindowSpec::default();
        let direct = apply_window(&propagate(&u0, p.path_length, p.lambda), &w);
        let stepped = split_step(&u0, &[], p.path_length, p.lambda, &w).unwrap();
        assert_eq!(direct, stepped);
    }

    #[test]
    fn split_step_all_zero_screens_matches_hopped_free_space() {
        let p = desk_params();
        let u0 = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let w = WindowSpec::default();
        let zeros: Vec<RealField<f64>> =
            (0..p.n_screens).map(|_| RealField::zeros(p.crop_n, p.pitch())).collect();
        let stepped = split_step(&u0, &zeros, p.path_length, p.lambda, &w).unwrap();
        // Reference: same hops and windows, no phase.
        let mut u = u0.clone();
        for _ in 0..p.n_screens {
            u = apply_window(&propagate(&u, p.hop(), p.lambda), &w);
        }
        let num: f64 = stepped
            .data()
            .iter()
            .zip(u.data().iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(num / u.energy().sqrt() < 1e-10);
    }

    fn turbulent_pupil(p: &TurbulenceParams<f64>, seed: u64) -> ComplexField<f64> {
        let u0 = point_source(0.0, 0.0, p, 0.2034, 0.5085).unwrap();
        let r0s = split_r0(p.r0, p.n_screens);
        let screens: Vec<RealField<f64>> = (0..p.n_screens)
            .map(|k| {
                let mut pk = p.clone();
                pk.r0 = r0s[k];
                pk.cn2 = crate::screen::cn2_from_r0(r0s[k], p.lambda, p.path_length);
                let master = generate_screen(&pk, seed * 31 + k as u64).unwrap();
                crate::screen::crop_screen(&master, (p.screen_n / 2, p.screen_n / 2), p.crop_n)
                    .unwrap()
            })
            .collect();
        split_step(&u0, &screens, p.path_length, p.lambda, &WindowSpec::default()).unwrap()
    }

    #[test]
    fn screens_change_the_pupil_field() {
        let mut p = desk_params();
        p.r0 = 0.05;
        p.cn2 = crate::screen::cn2_from_r0(0.05, p.lambda, p.path_length);
        let free = {
            let u0 = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
            let zeros: Vec<RealField<f64>> =
                (0..p.n_screens).map(|_| RealField::zeros(p.crop_n, p.pitch())).collect();
            split_step(&u0, &zeros, p.path_length, p.lambda, &WindowSpec::default()).unwrap()
        };
        let turb = turbulent_pupil(&p, 9);
        let diff: f64 =
            free.data().iter().zip(turb.data().iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        let rel = diff.sqrt() / free.energy().sqrt();
        assert!(rel > 1e-3, "turbulent pupil too close to free space: {rel:e}");
    }

    #[test]
    fn psf_unit_sum_and_nonnegative() {
        let p = desk_params();
        let pupil = turbulent_pupil(&p, 4);
        let psf = pupil_to_psf(&pupil, &aperture(), &p, &PsfExtraction::default()).unwrap();
        let total: f64 = psf.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(psf.data().iter().all(|&v| v >= 0.0));
        assert_eq!(psf.n(), 15);
    }

    #[test]
    fn no_atmosphere_circular_psf_centro_symmetric() {
        let p = desk_params();
        let u0 = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let pupil = split_step(&u0, &[], p.path_length, p.lambda, &WindowSpec::default()).unwrap();
        let psf = pupil_to_psf(&pupil, &aperture(), &p, &PsfExtraction::default()).unwrap();
        let n = psf.n();
        let peak = psf.data().iter().cloned().fold(0.0f64, f64::max);
        for i in 0..n {
            for j in 0..n {
                let a = psf.data()[[i, j]];
                let b = psf.data()[[n - 1 - i, n - 1 - j]];
                assert!(
                    (a - b).abs() <= 0.01 * peak,
                    "asymmetry at ({i},{j}): {a:e} vs {b:e}, peak {peak:e}"
                );
            }
        }
    }

    #[test]
    fn square_and_circle_apertures_differ() {
        let p = desk_params();
        let pupil = turbulent_pupil(&p, 4);
        let circ = pupil_to_psf(&pupil, &aperture(), &p, &PsfExtraction::default()).unwrap();
        let sq = pupil_to_psf(
            &pupil,
            &ApertureSpec::square(0.2034),
            &p,
            &PsfExtraction::default(),
        )
        .unwrap();
        let l2: f64 =
            circ.data().iter().zip(sq.data().iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn degenerate_pupil_errors() {
        let p = desk_params();
        let u = ComplexField::<f64>::zeros(p.crop_n, p.pitch()).unwrap();
        assert!(matches!(
            pupil_to_psf(&u, &aperture(), &p, &PsfExtraction::default()),
            Err(TurbError::DegeneratePsf(_))
        ));
    }

    #[test]
    fn psf_deterministic_under_seed() {
        let p = desk_params();
        let a = pupil_to_psf(&turbulent_pupil(&p, 12), &aperture(), &p, &PsfExtraction::default())
            .unwrap();
        let b = pupil_to_psf(&turbulent_pupil(&p, 12), &aperture(), &p, &PsfExtraction::default())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centroided_kernel_centers_mass() {
        let mut k = Array2::from_elem((15, 15), 0.0f64);
        k[[4, 9]] = 1.0;
        let psf = Psf::from_kernel(k).unwrap();
        let centered = psf.centroided().unwrap();
        assert_relative_eq!(centered.data()[[7, 7]], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn sampling_warning_fires_off_critical() {
        let p = desk_params();
        let u = point_source(0.0, 0.0, &p, 0.2034, 0.5085).unwrap();
        let (_, warn) = propagate_checked(&u, p.hop(), p.lambda, p.path_length);
        assert!(warn.is_none(), "desk params are Voelz-critical");
        // A grid four times finer violates the criterion.
        let fine = ComplexField::<f64>::zeros(p.crop_n, p.pitch() / 4.0).unwrap();
        let (_, warn) = propagate_checked(&fine, p.hop(), p.lambda, p.path_length);
        assert!(warn.is_some());
    }

    #[test]
    fn psf_csv_and_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = desk_params();
        let psf = pupil_to_psf(&turbulent_pupil(&p, 2), &aperture(), &p, &PsfExtraction::default())
            .unwrap();
        let bin = dir.path().join("psf.bin");
        psf.write_to(&bin).unwrap();
        let back = Psf::<f64>::read_from(&bin).unwrap();
        for (a, b) in psf.data().iter().zip(back.data().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        let csv = dir.path().join("psf.csv");
        psf.write_csv(&csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 15);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 15);
    }
}
