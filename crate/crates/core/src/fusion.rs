//! Pipeline plumbing between the reference and the deconvolution: integer
//! block-matching flow toward the reference and gradient-energy lucky-region
//! fusion of the warped frames.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Result, TurbError};
use crate::image::{reflect_index, Image};
use crate::num::Scalar;

/// Integer displacement per block, stride = block/2.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub block: usize,
    pub anchors: Vec<(usize, usize)>,
    pub displacements: Vec<(isize, isize)>,
}

fn block_anchors(side: usize, block: usize) -> Vec<usize> {
    let stride = (block / 2).max(1);
    let last = side.saturating_sub(block);
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Aligns `frame` to `reference` by per-block integer displacements
/// minimizing SSD within ±`radius`, assembled with uniform overlap blending.
/// Candidates are scanned center-out so exact ties keep the smaller motion.
pub fn block_flow<T: Scalar>(
    frame: &Image<T>,
    reference: &Image<T>,
    block: usize,
    radius: usize,
) -> Result<(Image<T>, FlowField)> {
    let (h, w) = frame.dims();
    if reference.dims() != (h, w) {
        return Err(TurbError::config("frame and reference dims differ"));
    }
    if block == 0 || block > h || block > w {
        return Err(TurbError::parameter("block size must fit the image"));
    }
    let rows = block_anchors(h, block);
    let cols = block_anchors(w, block);
    let anchors: Vec<(usize, usize)> =
        rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    if radius == 0 {
        let flow = FlowField {
            block,
            displacements: vec![(0, 0); anchors.len()],
            anchors,
        };
        return Ok((frame.clone(), flow));
    }

    // Candidate offsets sorted by motion magnitude.
    let mut candidates: Vec<(isize, isize)> = Vec::new();
    let r = radius as isize;
    for di in -r..=r {
        for dj in -r..=r {
            candidates.push((di, dj));
        }
    }
    candidates.sort_by_key(|&(di, dj)| (di * di + dj * dj, di, dj));

    let displacements: Vec<(isize, isize)> = anchors
        .par_iter()
        .map(|&(br, bc)| {
            let mut best = (0isize, 0isize);
            let mut best_ssd = T::infinity();
            for &(di, dj) in &candidates {
                let sr = br as isize + di;
                let sc = bc as isize + dj;
                if sr < 0 || sc < 0 || sr as usize + block > h || sc as usize + block > w {
                    continue;
                }
                let mut ssd = T::zero();
                for i in 0..block {
                    for j in 0..block {
                        let d = frame.data()[[sr as usize + i, sc as usize + j]]
                            - reference.data()[[br + i, bc + j]];
                        ssd = ssd + d * d;
                        if ssd >= best_ssd {
                            break;
                        }
                    }
                    if ssd >= best_ssd {
                        break;
                    }
                }
                if ssd < best_ssd {
                    best_ssd = ssd;
                    best = (di, dj);
                }
            }
            best
        })
        .collect();

    let mut acc = Array2::from_elem((h, w), T::zero());
    let mut cnt = Array2::from_elem((h, w), T::zero());
    for (&(br, bc), &(di, dj)) in anchors.iter().zip(displacements.iter()) {
        for i in 0..block {
            for j in 0..block {
                let v = frame.data()[[(br as isize + di) as usize + i, (bc as isize + dj) as usize + j]];
                acc[[br + i, bc + j]] = acc[[br + i, bc + j]] + v;
                cnt[[br + i, bc + j]] = cnt[[br + i, bc + j]] + T::one();
            }
        }
    }
    let warped = Image::new(Array2::from_shape_fn((h, w), |(i, j)| acc[[i, j]] / cnt[[i, j]]));
    Ok((warped, FlowField { block, anchors, displacements }))
}

/// Per-pixel squared Sobel gradient magnitude.
fn sobel_energy<T: Scalar>(img: &Image<T>) -> Array2<T> {
    let (h, w) = img.dims();
    let at = |i: isize, j: isize| -> T {
        img.data()[[reflect_index(i, h), reflect_index(j, w)]]
    };
    Array2::from_shape_fn((h, w), |(iu, ju)| {
        let (i, j) = (iu as isize, ju as isize);
        let gx = at(i - 1, j + 1) + T::of(2.0) * at(i, j + 1) + at(i + 1, j + 1)
            - at(i - 1, j - 1)
            - T::of(2.0) * at(i, j - 1)
            - at(i + 1, j - 1);
        let gy = at(i + 1, j - 1) + T::of(2.0) * at(i + 1, j) + at(i + 1, j + 1)
            - at(i - 1, j - 1)
            - T::of(2.0) * at(i - 1, j)
            - at(i - 1, j + 1);
        gx * gx + gy * gy
    })
}

/// Settings for [`lucky_fuse`].
#[derive(Debug, Clone, Copy)]
pub struct LuckyConfig<T> {
    /// Tile side for the gradient-energy statistic.
    pub tile: usize,
    /// Softmax temperature on reference-normalized sharpness scores.
    pub temperature: T,
}

impl<T: Scalar> Default for LuckyConfig<T> {
    fn default() -> Self {
        Self { tile: 16, temperature: T::of(0.25) }
    }
}

/// Fuses aligned frames into one image: per tile, frames are combined
/// convexly with softmax weights on their gradient energy normalized by the
/// reference tile energy; tiles overlap at half stride and are averaged.
/// `window` caps how many leading frames participate.
pub fn lucky_fuse<T: Scalar>(
    warped: &[Image<T>],
    reference: &Image<T>,
    window: usize,
    cfg: &LuckyConfig<T>,
) -> Result<Image<T>> {
    if warped.is_empty() {
        return Err(TurbError::config("need at least one frame to fuse"));
    }
    let used = warped.len().min(window.max(1));
    let frames = &warped[..used];
    let (h, w) = reference.dims();
    for f in frames {
        if f.dims() != (h, w) {
            return Err(TurbError::config("frame dims differ from reference"));
        }
    }
    if used == 1 {
        return Ok(frames[0].clone());
    }
    let tile = cfg.tile.min(h).min(w).max(2);
    let energies: Vec<Array2<T>> = frames.par_iter().map(sobel_energy).collect();
    let ref_energy = sobel_energy(reference);

    let rows = block_anchors(h, tile);
    let cols = block_anchors(w, tile);
    let mut acc = Array2::from_elem((h, w), T::zero());
    let mut cnt = Array2::from_elem((h, w), T::zero());
    let floor = T::of(1e-12) * T::of_usize(tile * tile);
    for &br in &rows {
        for &bc in &cols {
            let tile_sum = |e: &Array2<T>| -> T {
                let mut s = T::zero();
                for i in 0..tile {
                    for j in 0..tile {
                        s = s + e[[br + i, bc + j]];
                    }
                }
                s
            };
            let e_ref = tile_sum(&ref_energy).max(floor);
            let scores: Vec<T> = energies.iter().map(|e| tile_sum(e) / e_ref).collect();
            let top = scores.iter().copied().fold(T::neg_infinity(), T::max);
            let weights: Vec<T> =
                scores.iter().map(|&s| ((s - top) / cfg.temperature).exp()).collect();
            let total: T = weights.iter().copied().sum();
            for i in 0..tile {
                for j in 0..tile {
                    let mut v = T::zero();
                    for (f, &wt) in frames.iter().zip(weights.iter()) {
                        v = v + wt * f.data()[[br + i, bc + j]];
                    }
                    acc[[br + i, bc + j]] = acc[[br + i, bc + j]] + v / total;
                    cnt[[br + i, bc + j]] = cnt[[br + i, bc + j]] + T::one();
                }
            }
        }
    }
    Ok(Image::new(Array2::from_shape_fn((h, w), |(i, j)| acc[[i, j]] / cnt[[i, j]])))
}
