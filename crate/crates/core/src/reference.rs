//! Spatial-temporal non-local weighted averaging: for every patch of frame 0
//! the best spatial match in each frame sets a temporal weight
//! `w_t = exp(-β·min_i ||y_{i,t} - y_{0,0}||²)`, and the reference patch is
//! the w-weighted temporal average of the co-located patches. Works for
//! static and dynamic scenes; movers drop out of the average instead of
//! ghosting.

use ndarray::{s, Array2, Array3, ArrayView2};
use rayon::prelude::*;

use crate::error::{Result, TurbError};
use crate::image::{convolve_symmetric, Image};
use crate::num::Scalar;
use crate::optics::Psf;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlConfig<T> {
    /// Patch side √d in pixels (odd).
    pub patch_d: usize,
    /// Spatial search window side L in pixels (odd).
    pub window_l: usize,
    /// Temporal window T in frames.
    pub frames_t: usize,
    /// Weight sharpness β.
    pub beta: T,
}

impl<T: Scalar> Default for NlConfig<T> {
    fn default() -> Self {
        Self { patch_d: 7, window_l: 11, frames_t: 100, beta: T::of(4.0) }
    }
}

impl<T: Scalar> NlConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.patch_d % 2 == 0 || self.window_l % 2 == 0 {
            return Err(TurbError::parameter("patch and window sides must be odd"));
        }
        if self.frames_t < 1 {
            return Err(TurbError::parameter("temporal window must be at least 1"));
        }
        if self.beta < T::zero() {
            return Err(TurbError::parameter("beta must be nonnegative"));
        }
        Ok(())
    }
}

/// Squared Euclidean distance between two equally sized patches.
pub fn patch_distance<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(TurbError::config(format!(
            "patch dims {:?} vs {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum())
}

/// `w_t = exp(-β · min_i Δ_{i,t})` over the spatial candidates of one frame.
pub fn temporal_weight<T: Scalar>(deltas: &[T], beta: T) -> Result<T> {
    if deltas.is_empty() {
        return Err(TurbError::config("empty spatial window"));
    }
    let min = deltas.iter().copied().fold(T::infinity(), T::min);
    Ok((-beta * min).exp())
}

/// Patch anchors along one axis: stride `patch_d/2`, final anchor clamped so
/// patches tile the whole side.
fn patch_anchors(side: usize, patch: usize) -> Vec<usize> {
    let stride = (patch / 2).max(1);
    let last = side.saturating_sub(patch);
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Pass 1 of the reference builder: per (anchor, frame) minimum patch
/// distance against the frame-0 anchor patch. Separated out so β sweeps can
/// reuse it (the β calibration loop re-weights these distances directly).
pub struct MinDistances<T> {
    /// `[anchor_row_idx, anchor_col_idx, frame]` → min Δ.
    pub deltas: Array3<T>,
    pub row_anchors: Vec<usize>,
    pub col_anchors: Vec<usize>,
}

pub fn min_patch_distances<T: Scalar>(
    frames: &[Image<T>],
    cfg: &NlConfig<T>,
) -> Result<MinDistances<T>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(TurbError::config("empty sequence"));
    }
    if cfg.frames_t > frames.len() {
        return Err(TurbError::config(format!(
            "temporal window {} exceeds sequence length {}",
            cfg.frames_t,
            frames.len()
        )));
    }
    let (h, w) = frames[0].dims();
    if h < cfg.patch_d || w < cfg.patch_d {
        return Err(TurbError::config("image smaller than patch"));
    }
    let row_anchors = patch_anchors(h, cfg.patch_d);
    let col_anchors = patch_anchors(w, cfg.patch_d);
    let d = cfg.patch_d;
    let half_l = (cfg.window_l / 2) as isize;
    let t_frames = cfg.frames_t;

    let rows: Vec<Vec<Vec<T>>> = row_anchors
        .par_iter()
        .map(|&ar| {
            col_anchors
                .iter()
                .map(|&ac| {
                    let anchor = frames[0].data().slice(s![ar..ar + d, ac..ac + d]);
                    (0..t_frames)
                        .map(|t| {
                            let ft = frames[t].data();
                            let mut best = T::infinity();
                            for di in -half_l..=half_l {
                                let ri = ar as isize + di;
                                if ri < 0 || ri as usize + d > h {
                                    continue;
                                }
                                for dj in -half_l..=half_l {
                                    let cj = ac as isize + dj;
                                    if cj < 0 || cj as usize + d > w {
                                        continue;
                                    }
                                    let cand =
                                        ft.slice(s![ri as usize..ri as usize + d, cj as usize..cj as usize + d]);
                                    let mut acc = T::zero();
                                    for (x, y) in cand.iter().zip(anchor.iter()) {
                                        let diff = *x - *y;
                                        acc = acc + diff * diff;
                                    }
                                    if acc < best {
                                        best = acc;
                                    }
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut deltas = Array3::from_elem((row_anchors.len(), col_anchors.len(), t_frames), T::zero());
    for (a, row) in rows.iter().enumerate() {
        for (b, per_t) in row.iter().enumerate() {
            for (t, &v) in per_t.iter().enumerate() {
                deltas[[a, b, t]] = v;
            }
        }
    }
    Ok(MinDistances { deltas, row_anchors, col_anchors })
}

/// Pass 2: weighted temporal averaging of co-located patches with uniform
/// overlap averaging.
pub fn reference_from_distances<T: Scalar>(
    frames: &[Image<T>],
    cfg: &NlConfig<T>,
    dists: &MinDistances<T>,
) -> Image<T> {
    let (h, w) = frames[0].dims();
    let d = cfg.patch_d;
    let t_frames = cfg.frames_t;
    let mut acc = Array2::from_elem((h, w), T::zero());
    let mut cnt = Array2::from_elem((h, w), T::zero());
    let mut patch = Array2::from_elem((d, d), T::zero());
    for (a, &ar) in dists.row_anchors.iter().enumerate() {
        for (b, &ac) in dists.col_anchors.iter().enumerate() {
            patch.fill(T::zero());
            let mut wsum = T::zero();
            for t in 0..t_frames {
                let wt = (-cfg.beta * dists.deltas[[a, b, t]]).exp();
                wsum = wsum + wt;
                let src = frames[t].data().slice(s![ar..ar + d, ac..ac + d]);
                patch.iter_mut().zip(src.iter()).for_each(|(p, &v)| *p = *p + wt * v);
            }
            // w_0 = exp(0) = 1, so wsum >= 1 always.
            for pi in 0..d {
                for pj in 0..d {
                    acc[[ar + pi, ac + pj]] = acc[[ar + pi, ac + pj]] + patch[[pi, pj]] / wsum;
                    cnt[[ar + pi, ac + pj]] = cnt[[ar + pi, ac + pj]] + T::one();
                }
            }
        }
    }
    Image::new(Array2::from_shape_fn((h, w), |(i, j)| acc[[i, j]] / cnt[[i, j]]))
}

/// Non-local reference for the first `cfg.frames_t` frames of the sequence.
pub fn build_reference<T: Scalar>(frames: &[Image<T>], cfg: &NlConfig<T>) -> Result<Image<T>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(TurbError::config("empty sequence"));
    }
    // A single-frame window is that frame, exactly: w_0 = 1.
    if cfg.frames_t == 1 {
        return Ok(frames[0].clone());
    }
    let dists = min_patch_distances(frames, cfg)?;
    Ok(reference_from_distances(frames, cfg, &dists))
}

/// Ideal short-exposure image: centroid-align every PSF by integer shift,
/// average, renormalize, convolve.
pub fn ideal_short_exposure<T: Scalar>(x: &Image<T>, psfs: &[Psf<T>]) -> Result<Image<T>> {
    let avg = average_centroided(psfs)?;
    Ok(convolve_symmetric(x, avg.data()))
}

/// Centroided unit-sum average of a PSF set (the "short PSF" estimate).
pub fn average_centroided<T: Scalar>(psfs: &[Psf<T>]) -> Result<Psf<T>> {
    if psfs.is_empty() {
        return Err(TurbError::config("need at least one PSF"));
    }
    let n = psfs[0].n();
    let mut acc = Array2::from_elem((n, n), T::zero());
    for p in psfs {
        if p.n() != n {
            return Err(TurbError::config("PSF sizes differ"));
        }
        let c = p.centroided()?;
        acc.iter_mut().zip(c.data().iter()).for_each(|(a, &v)| *a = *a + v);
    }
    Psf::from_kernel(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn patch_distance_contracts() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = a.clone();
        assert_eq!(patch_distance(a.view(), b.view()).unwrap(), 0.0);
        // Constant offset c in every one of d pixels → d·c².
        let c = a.mapv(|v| v + 0.5);
        assert_relative_eq!(
            patch_distance(a.view(), c.view()).unwrap(),
            4.0 * 0.25,
            max_relative = 1e-12
        );
        // Random pair vs elementwise oracle.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((7, 7), |_| rng.random::<f64>());
        let y = Array2::from_shape_fn((7, 7), |_| rng.random::<f64>());
        let oracle: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_relative_eq!(
            patch_distance(x.view(), y.view()).unwrap(),
            oracle,
            max_relative = 1e-12
        );
        let small = array![[0.0]];
        assert!(patch_distance(a.view(), small.view()).is_err());
    }

    #[test]
    fn temporal_weight_contracts() {
        assert_eq!(temporal_weight(&[0.0, 3.0], 5.0).unwrap(), 1.0);
        assert_eq!(temporal_weight(&[2.0, 1.0], 0.0).unwrap(), 1.0);
        assert_relative_eq!(
            temporal_weight(&[0.5, 0.9], 2.0).unwrap(),
            0.36787944117144233, // e^{-1}, frozen from 40-digit evaluation
            max_relative = 1e-14
        );
        assert!(temporal_weight::<f64>(&[], 1.0).is_err());
    }

    fn noisy_static_sequence(t: usize, seed: u64) -> Vec<Image<f64>> {
        let base = crate::image::resolution_chart::<f64>(48);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| {
                let mut f = base.clone();
                f.data_mut().mapv_inplace(|v| {
                    (v + 0.05 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)
                });
                f
            })
            .collect()
    }

    #[test]
    fn single_frame_window_returns_frame() {
        let frames = noisy_static_sequence(3, 2);
        let cfg = NlConfig { frames_t: 1, ..NlConfig::default() };
        let r = build_reference(&frames, &cfg).unwrap();
        assert_eq!(r, frames[0]);
    }

    #[test]
    fn identical_frames_return_that_frame() {
        let base = crate::image::resolution_chart::<f64>(48);
        let frames: Vec<Image<f64>> = (0..5).map(|_| base.clone()).collect();
        let cfg = NlConfig { frames_t: 5, ..NlConfig::default() };
        let r = build_reference(&frames, &cfg).unwrap();
        for (a, b) in r.data().iter().zip(base.data().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn reference_is_convex_combination_per_pixel() {
        let frames = noisy_static_sequence(8, 3);
        let cfg = NlConfig { frames_t: 8, beta: 2.0, ..NlConfig::default() };
        let r = build_reference(&frames, &cfg).unwrap();
        let (h, w) = r.dims();
        for i in 0..h {
            for j in 0..w {
                let lo = frames.iter().map(|f| f.data()[[i, j]]).fold(f64::INFINITY, f64::min);
                let hi = frames.iter().map(|f| f.data()[[i, j]]).fold(0.0f64, f64::max);
                let v = r.data()[[i, j]];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "pixel ({i},{j}) out of envelope");
            }
        }
    }

    #[test]
    fn huge_beta_selects_frame_zero() {
        let frames = noisy_static_sequence(6, 4);
        let cfg = NlConfig { frames_t: 6, beta: 1e12, ..NlConfig::default() };
        let r = build_reference(&frames, &cfg).unwrap();
        for (a, b) in r.data().iter().zip(frames[0].data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn window_longer_than_sequence_errors() {
        let frames = noisy_static_sequence(3, 5);
        let cfg = NlConfig { frames_t: 10, ..NlConfig::default() };
        assert!(build_reference(&frames, &cfg).is_err());
        assert!(build_reference::<f64>(&[], &NlConfig::default()).is_err());
    }

    #[test]
    fn residual_shrinks_with_temporal_window() {
        // Mean squared residual of the whole sequence against the reference
        // is non-increasing in T for a static scene, averaged over seeds.
        let msr = |t_win: usize, seed: u64| -> f64 {
            let frames = noisy_static_sequence(16, seed);
            let cfg = NlConfig { frames_t: t_win, beta: 0.5, ..NlConfig::default() };
            let r = build_reference(&frames, &cfg).unwrap();
            frames.iter().map(|f| f.mse(&r)).sum::<f64>() / frames.len() as f64
        };
        for t_pair in [(1usize, 4usize), (4, 16)] {
            let mut a = 0.0;
            let mut b = 0.0;
            for seed in 0..5 {
                a += msr(t_pair.0, seed);
                b += msr(t_pair.1, seed);
            }
            assert!(
                b <= a,
                "msr(T={}) = {} should not exceed msr(T={}) = {}",
                t_pair.1,
                b / 5.0,
                t_pair.0,
                a / 5.0
            );
        }
    }

    /// Constant-velocity block over a flat background; the non-local
    /// reference must retain the mover at its frame-0 position while the
    /// plain temporal average washes it out.
    #[test]
    fn moving_object_retention() {
        let t = 20usize;
        let (h, w) = (48usize, 64usize);
        let block = 12usize;
        let (r0, c0) = (18usize, 8usize);
        let frames: Vec<Image<f64>> = (0..t)
            .map(|f| {
                Image::from_fn(h, w, |i, j| {
                    let c = c0 + 2 * f; // 2 px/frame to the right
                    if i >= r0 && i < r0 + block && j >= c && j < c + block {
                        0.9
                    } else {
                        0.2
                    }
                })
            })
            .collect();
        let cfg = NlConfig { patch_d: 7, window_l: 11, frames_t: t, beta: 1.0 };
        let reference = build_reference(&frames, &cfg).unwrap();
        let mut avg = Image::<f64>::zeros(h, w);
        for f in &frames {
            avg.data_mut().iter_mut().zip(f.data().iter()).for_each(|(a, &v)| *a += v);
        }
        avg.data_mut().mapv_inplace(|v| v / t as f64);

        // Contrast retention at the block's frame-0 footprint.
        let retention = |img: &Image<f64>| -> f64 {
            let mut m = 0.0;
            for i in r0..r0 + block {
                for j in c0..c0 + block {
                    m += img.data()[[i, j]];
                }
            }
            m /= (block * block) as f64;
            (m - 0.2) / (0.9 - 0.2)
        };
        let r_nl = retention(&reference);
        let r_avg = retention(&avg);
        assert!(r_nl >= 0.5, "non-local retention {r_nl} must be >= 50%");
        assert!(r_avg < 0.5, "temporal-average retention {r_avg} must be < 50%");
    }

    #[test]
    fn ideal_short_exposure_contracts() {
        // A single centered PSF reduces to plain convolution with it.
        let mut k = Array2::from_elem((9, 9), 0.0f64);
        k[[4, 4]] = 0.6;
        k[[4, 5]] = 0.4;
        // Make it symmetric around the centroid to keep the centroid at
        // the center pixel after rounding.
        k[[4, 3]] = 0.4;
        let psf = Psf::from_kernel(k).unwrap();
        let img = crate::image::resolution_chart::<f64>(32);
        let ideal = ideal_short_exposure(&img, &[psf.clone()]).unwrap();
        let direct = convolve_symmetric(&img, psf.data());
        for (a, b) in ideal.data().iter().zip(direct.data().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }

        // Shifted copies of one kernel centroid back to (near) the original.
        let base = Psf::from_kernel({
            let mut k = Array2::from_elem((11, 11), 0.0f64);
            k[[5, 5]] = 0.5;
            k[[5, 6]] = 0.25;
            k[[5, 4]] = 0.25;
            k
        })
        .unwrap();
        let shifted: Vec<Psf<f64>> = [(0isize, 0isize), (1, 2), (-2, 1), (2, -2)]
            .iter()
            .map(|&(di, dj)| {
                let mut k = Array2::from_elem((11, 11), 0.0f64);
                for ((i, j), &v) in base.data().indexed_iter() {
                    let ni = (i as isize + di).rem_euclid(11) as usize;
                    let nj = (j as isize + dj).rem_euclid(11) as usize;
                    k[[ni, nj]] = v;
                }
                Psf::from_kernel(k).unwrap()
            })
            .collect();
        let avg = average_centroided(&shifted).unwrap();
        let total: f64 = avg.data().iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        for (a, b) in avg.data().iter().zip(base.data().iter()) {
            assert!((a - b).abs() < 1e-3, "centroided average should recover the kernel");
        }
    }
}
