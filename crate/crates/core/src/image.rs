//! Grayscale image container, metrics and file I/O used across the
//! restoration pipeline. Values are nominally in [0, 1] with peak 1.0 for
//! PSNR purposes.

use ndarray::Array2;
use std::path::Path;

use crate::error::Result;
use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    data: Array2<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(data: Array2<T>) -> Self {
        Self { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { data: Array2::from_elem((h, w), T::zero()) }
    }

    pub fn constant(h: usize, w: usize, v: T) -> Self {
        Self { data: Array2::from_elem((h, w), v) }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> T) -> Self {
        Self { data: Array2::from_shape_fn((h, w), |(i, j)| f(i, j)) }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
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

    pub fn min_max(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for &v in self.data.iter() {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::of_usize(self.data.len())
    }

    /// Mean squared error against another image of the same shape.
    pub fn mse(&self, other: &Self) -> T {
        assert_eq!(self.dims(), other.dims(), "image shapes must match");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::of_usize(self.data.len())
    }

    /// PSNR in dB with peak 1.0; infinite for identical images.
    pub fn psnr(&self, reference: &Self) -> T {
        let mse = self.mse(reference);
        if mse <= T::zero() {
            return T::infinity();
        }
        -T::of(10.0) * mse.log10()
    }

    /// Clamp into [0, 1].
    pub fn clamped(&self) -> Self {
        Self { data: self.data.mapv(|v| v.max(T::zero()).min(T::one())) }
    }

    /// 2×2 box downsample (truncates odd edges).
    pub fn downsample2(&self) -> Self {
        let (h, w) = self.dims();
        let (oh, ow) = (h / 2, w / 2);
        let q = T::of(0.25);
        Self {
            data: Array2::from_shape_fn((oh, ow), |(i, j)| {
                (self.data[[2 * i, 2 * j]]
                    + self.data[[2 * i + 1, 2 * j]]
                    + self.data[[2 * i, 2 * j + 1]]
                    + self.data[[2 * i + 1, 2 * j + 1]])
                    * q
            }),
        }
    }

    /// Bilinear resize to the given shape.
    pub fn resized(&self, oh: usize, ow: usize) -> Self {
        let (h, w) = self.dims();
        let sy = T::of_usize(h) / T::of_usize(oh);
        let sx = T::of_usize(w) / T::of_usize(ow);
        let half = T::of(0.5);
        Self {
            data: Array2::from_shape_fn((oh, ow), |(i, j)| {
                let y = (T::of_usize(i) + half) * sy - half;
                let x = (T::of_usize(j) + half) * sx - half;
                bilinear_clamped(&self.data, y, x)
            }),
        }
    }

    /// 8-bit or 16-bit grayscale PNG / PGM depending on extension and depth.
    pub fn save(&self, path: impl AsRef<Path>, sixteen_bit: bool) -> Result<()> {
        let (h, w) = self.dims();
        let path = path.as_ref();
        if sixteen_bit {
            let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for ((i, j), &v) in self.data.indexed_iter() {
                let q = (v.max(T::zero()).min(T::one()).to_f64_lossy() * 65535.0).round() as u16;
                img.put_pixel(j as u32, i as u32, image::Luma([q]));
            }
            img.save(path)?;
        } else {
            let mut img = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
            for ((i, j), &v) in self.data.indexed_iter() {
                let q = (v.max(T::zero()).min(T::one()).to_f64_lossy() * 255.0).round() as u8;
                img.put_pixel(j as u32, i as u32, image::Luma([q]));
            }
            img.save(path)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.into_luma16();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
            T::of(img.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0)
        });
        Ok(Self { data })
    }
}

fn bilinear_clamped<T: Scalar>(a: &Array2<T>, y: T, x: T) -> T {
    let (h, w) = a.dim();
    let clamp = |v: T, n: usize| v.max(T::zero()).min(T::of_usize(n - 1));
    let y = clamp(y, h);
    let x = clamp(x, w);
    let i0 = y.floor().to_f64_lossy() as usize;
    let j0 = x.floor().to_f64_lossy() as usize;
    let i1 = (i0 + 1).min(h - 1);
    let j1 = (j0 + 1).min(w - 1);
    let dy = y - y.floor();
    let dx = x - x.floor();
    let one = T::one();
    a[[i0, j0]] * (one - dy) * (one - dx)
        + a[[i0, j1]] * (one - dy) * dx
        + a[[i1, j0]] * dy * (one - dx)
        + a[[i1, j1]] * dy * dx
}

/// Symmetric (reflect) boundary index.
pub(crate) fn reflect_index(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Dense 2-D convolution with an odd-sided kernel, symmetric boundary
/// extension.
pub fn convolve_symmetric<T: Scalar>(x: &Image<T>, kernel: &Array2<T>) -> Image<T> {
    let (h, w) = x.dims();
    let (kh, kw) = kernel.dim();
    let ch = (kh / 2) as isize;
    let cw = (kw / 2) as isize;
    Image::from_fn(h, w, |i, j| {
        let mut acc = T::zero();
        for ki in 0..kh {
            for kj in 0..kw {
                let v = kernel[[ki, kj]];
                if v == T::zero() {
                    continue;
                }
                let si = reflect_index(i as isize - (ki as isize - ch), h);
                let sj = reflect_index(j as isize - (kj as isize - cw), w);
                acc = acc + v * x.data()[[si, sj]];
            }
        }
        acc
    })
}

/// Procedural resolution chart: tri-bar groups of shrinking pitch plus an
/// edge square, in the spirit of the USAF target. Deterministic.
pub fn resolution_chart<T: Scalar>(n: usize) -> Image<T> {
    let mut img = Image::constant(n, n, T::of(0.15));
    let fg = T::of(0.9);
    // Horizontal and vertical tri-bar groups at decreasing bar widths.
    let mut bar = n / 8;
    let mut top = n / 16;
    let mut left = n / 16;
    while bar >= 1 && top + 5 * bar < n {
        // Three horizontal bars.
        for b in 0..3 {
            let r0 = top + 2 * b * bar;
            for i in r0..(r0 + bar).min(n) {
                for j in left..(left + 5 * bar).min(n) {
                    img.data_mut()[[i, j]] = fg;
                }
            }
        }
        // Three vertical bars to the right.
        let vleft = left + 5 * bar + bar.max(2);
        for b in 0..3 {
            let c0 = vleft + 2 * b * bar;
            for i in top..(top + 5 * bar).min(n) {
                for j in c0..(c0 + bar).min(n) {
                    if j < n {
                        img.data_mut()[[i, j]] = fg;
                    }
                }
            }
        }
        top += 5 * bar + 2 * bar.max(2);
        left += bar / 2;
        bar /= 2;
    }
    // Edge square in the lower-right quadrant.
    let s = n / 5;
    for i in (n - s - n / 16)..(n - n / 16) {
        for j in (n - s - n / 16)..(n - n / 16) {
            img.data_mut()[[i, j]] = fg;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psnr_basics() {
        let a = Image::<f64>::constant(8, 8, 0.5);
        assert!(a.psnr(&a).is_infinite());
        let mut b = a.clone();
        b.data_mut()[[0, 0]] = 0.6;
        let mse = 0.1f64 * 0.1 / 64.0;
        assert_relative_eq!(a.psnr(&b), -10.0 * mse.log10(), max_relative = 1e-12);
    }

    #[test]
    fn png_round_trip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::<f64>::from_fn(16, 24, |i, j| ((i * 24 + j) as f64) / (16.0 * 24.0));
        let path = dir.path().join("img.png");
        img.save(&path, true).unwrap();
        let back = Image::<f64>::load(&path).unwrap();
        assert_eq!(back.dims(), (16, 24));
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }

    #[test]
    fn pgm_save_loads() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::<f64>::from_fn(8, 8, |i, _| i as f64 / 8.0);
        let path = dir.path().join("img.pgm");
        img.save(&path, false).unwrap();
        let back = Image::<f64>::load(&path).unwrap();
        assert_eq!(back.dims(), (8, 8));
    }

    #[test]
    fn downsample_halves() {
        let img = Image::<f64>::from_fn(8, 8, |i, j| (i + j) as f64);
        let d = img.downsample2();
        assert_eq!(d.dims(), (4, 4));
        assert_relative_eq!(d.data()[[0, 0]], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn resize_identity() {
        let img = Image::<f64>::from_fn(9, 9, |i, j| (i * 9 + j) as f64 / 81.0);
        let same = img.resized(9, 9);
        for (a, b) in img.data().iter().zip(same.data().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn chart_has_contrast_at_multiple_scales() {
        let chart = resolution_chart::<f64>(128);
        let (lo, hi) = chart.min_max();
        assert!(lo < 0.2 && hi > 0.8);
        // Some fine structure: neighboring-pixel differences exist.
        let d: f64 = chart
            .data()
            .windows((1, 2))
            .into_iter()
            .map(|w| (w[[0, 0]] - w[[0, 1]]).abs())
            .sum();
        assert!(d > 10.0);
    }
}
