//! Anisoplanatic image simulation: a PSF per anchor pixel obtained by
//! propagating point sources through displaced crops of shared master
//! screens, bilinear PSF interpolation in between, spatially varying
//! convolution and multi-frame sequence generation.

use ndarray::Array2;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TurbError};
use crate::grid::{RealField, WindowSpec};
use crate::image::Image;
use crate::num::Scalar;
use crate::optics::{
    point_source, pupil_to_psf, split_step, voelz_ratio, ApertureSpec, Psf, PsfExtraction,
};
use crate::screen::{cn2_from_r0, crop_screen, generate_sequence, Correlation, TurbulenceParams};
use crate::seeds;

/// Lattice of anchor pixels with one PSF each, covering the image.
#[derive(Debug, Clone)]
pub struct PsfGrid<T> {
    /// Anchor pixel rows (sorted, spans the image).
    pub rows: Vec<usize>,
    /// Anchor pixel columns.
    pub cols: Vec<usize>,
    /// PSF at `(rows[a], cols[b])`, indexed `[a][b]`.
    pub psfs: Vec<Vec<Psf<T>>>,
    pub image_dims: (usize, usize),
}

/// Evenly spaced anchor positions including both endpoints; a stride at
/// least the side collapses to a single centered anchor (isoplanatic).
fn anchor_positions(side: usize, stride: usize) -> Vec<usize> {
    if stride >= side || side == 1 {
        return vec![side / 2];
    }
    let k = (side - 1).div_ceil(stride) + 1;
    (0..k).map(|t| (t * (side - 1)) / (k - 1)).collect()
}

/// Full simulation settings on top of [`TurbulenceParams`].
#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    pub aperture: ApertureSpec<T>,
    /// Flat-region size of the point source (m).
    pub flat_size: T,
    /// Anchor stride in image pixels.
    pub stride: usize,
    pub window: WindowSpec,
    pub extract: PsfExtraction<T>,
}

impl<T: Scalar> SimConfig<T> {
    pub fn new(aperture: ApertureSpec<T>) -> Self {
        let flat_size = aperture.diameter * T::of(2.5);
        Self {
            aperture,
            flat_size,
            stride: 32,
            window: WindowSpec::default(),
            extract: PsfExtraction::default(),
        }
    }
}

/// Crop-center displacement of anchor `pos` for screen slot `k` of `n`:
/// one master sample per image pixel at the first screen, scaled linearly
/// to zero at the pupil.
fn crop_center(
    master_n: usize,
    anchor: (usize, usize),
    image_dims: (usize, usize),
    slot: usize,
    n_screens: usize,
) -> (isize, isize) {
    let factor = 1.0 - slot as f64 / n_screens as f64;
    let di = (anchor.0 as f64 - image_dims.0 as f64 / 2.0) * factor;
    let dj = (anchor.1 as f64 - image_dims.1 as f64 / 2.0) * factor;
    ((master_n / 2) as isize + di.round() as isize, (master_n / 2) as isize + dj.round() as isize)
}

/// Builds the per-anchor PSF lattice for one frame's master screens.
/// `masters` holds one master screen per slot, ordered from the source plane
/// to the pupil.
pub fn build_psf_grid<T: Scalar>(
    image_dims: (usize, usize),
    p: &TurbulenceParams<T>,
    cfg: &SimConfig<T>,
    masters: &[RealField<T>],
) -> Result<PsfGrid<T>> {
    if masters.len() != p.n_screens {
        return Err(TurbError::config(format!(
            "expected {} master screens, got {}",
            p.n_screens,
            masters.len()
        )));
    }
    if cfg.stride == 0 {
        return Err(TurbError::parameter("anchor stride must be at least 1"));
    }
    let rows = anchor_positions(image_dims.0, cfg.stride);
    let cols = anchor_positions(image_dims.1, cfg.stride);

    // Validate every crop window up front so failures name the anchor.
    for &r in &rows {
        for &c in &cols {
            for slot in 0..p.n_screens {
                let (ci, cj) = crop_center(p.screen_n, (r, c), image_dims, slot, p.n_screens);
                let half = (p.crop_n / 2) as isize;
                let n = p.screen_n as isize;
                if ci - half < 0
                    || cj - half < 0
                    || ci - half + p.crop_n as isize > n
                    || cj - half + p.crop_n as isize > n
                {
                    return Err(TurbError::config(format!(
                        "anchor ({r},{c}) slot {slot} needs a crop outside the {}-sample master; \
                         increase screen_n",
                        p.screen_n
                    )));
                }
            }
        }
    }

    let anchors: Vec<(usize, usize)> =
        rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let computed: Vec<Result<Psf<T>>> = anchors
        .par_iter()
        .map(|&(r, c)| {
            let u0 = point_source(T::zero(), T::zero(), p, cfg.aperture.diameter, cfg.flat_size)?;
            let screens: Vec<RealField<T>> = (0..p.n_screens)
                .map(|slot| {
                    let (ci, cj) = crop_center(p.screen_n, (r, c), image_dims, slot, p.n_screens);
                    crop_screen(&masters[slot], (ci as usize, cj as usize), p.crop_n)
                })
                .collect::<Result<_>>()?;
            let pupil = split_step(&u0, &screens, p.path_length, p.lambda, &cfg.window)?;
            pupil_to_psf(&pupil, &cfg.aperture, p, &cfg.extract)
        })
        .collect();

    let mut flat = Vec::with_capacity(computed.len());
    for r in computed {
        flat.push(r?);
    }
    let psfs: Vec<Vec<Psf<T>>> =
        flat.chunks(cols.len()).map(|chunk| chunk.to_vec()).collect();
    Ok(PsfGrid { rows, cols, psfs, image_dims })
}

/// Locates `x` in the sorted anchor list: (lower index, upper index, blend).
fn bracket<T: Scalar>(anchors: &[usize], x: usize) -> (usize, usize, T) {
    if anchors.len() == 1 || x <= anchors[0] {
        return (0, 0, T::zero());
    }
    let last = anchors.len() - 1;
    if x >= anchors[last] {
        return (last, last, T::zero());
    }
    let hi = anchors.partition_point(|&a| a <= x);
    let lo = hi - 1;
    let span = anchors[hi] - anchors[lo];
    let t = T::of((x - anchors[lo]) as f64 / span as f64);
    (lo, hi, t)
}

impl<T: Scalar> PsfGrid<T> {
    /// Bilinear blend of the four surrounding anchor PSFs, renormalized to
    /// unit sum. Edge pixels clamp to the nearest anchors.
    pub fn interpolate(&self, pixel: (usize, usize)) -> Result<Psf<T>> {
        let (i, j) = pixel;
        if i >= self.image_dims.0 || j >= self.image_dims.1 {
            return Err(TurbError::range(format!(
                "pixel ({i},{j}) outside image {:?}",
                self.image_dims
            )));
        }
        let (r0, r1, tr) = bracket::<T>(&self.rows, i);
        let (c0, c1, tc) = bracket::<T>(&self.cols, j);
        let one = T::one();
        let w00 = (one - tr) * (one - tc);
        let w01 = (one - tr) * tc;
        let w10 = tr * (one - tc);
        let w11 = tr * tc;
        let n = self.psfs[0][0].n();
        let mut out = Array2::from_elem((n, n), T::zero());
        let mut add = |w: T, p: &Psf<T>| {
            if w > T::zero() {
                out.iter_mut().zip(p.data().iter()).for_each(|(o, &v)| *o = *o + w * v);
            }
        };
        add(w00, &self.psfs[r0][c0]);
        add(w01, &self.psfs[r0][c1]);
        add(w10, &self.psfs[r1][c0]);
        add(w11, &self.psfs[r1][c1]);
        Psf::from_kernel(out)
    }

    /// All anchor PSFs, row-major.
    pub fn iter_psfs(&self) -> impl Iterator<Item = &Psf<T>> {
        self.psfs.iter().flatten()
    }
}

use crate::image::reflect_index as reflect;

/// Spatially varying convolution: every output pixel is the input filtered
/// with its own interpolated PSF, `X̃(i,j) = ΣΣ X(i-x, j-y)·h_{i,j}(x,y)`,
/// boundaries handled by symmetric extension.
pub fn apply_spatially_varying<T: Scalar>(x: &Image<T>, g: &PsfGrid<T>) -> Result<Image<T>> {
    let (h, w) = x.dims();
    if (h, w) != g.image_dims {
        return Err(TurbError::config(format!(
            "image {:?} does not match PSF grid {:?}",
            (h, w),
            g.image_dims
        )));
    }
    let kn = g.psfs[0][0].n();
    let kh = (kn / 2) as isize;
    let rows: Vec<Vec<T>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(w);
            for j in 0..w {
                let kernel = g.interpolate((i, j)).expect("pixel inside image");
                let mut acc = T::zero();
                for (ki, kj) in (0..kn).flat_map(|a| (0..kn).map(move |b| (a, b))) {
                    let v = kernel.data()[[ki, kj]];
                    if v == T::zero() {
                        continue;
                    }
                    let si = reflect(i as isize - (ki as isize - kh), h);
                    let sj = reflect(j as isize - (kj as isize - kh), w);
                    acc = acc + v * x.data()[[si, sj]];
                }
                row.push(acc);
            }
            row
        })
        .collect();
    let mut out = Image::zeros(h, w);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out.data_mut()[[i, j]] = v;
        }
    }
    Ok(out)
}

/// A simulated turbulence-distorted sequence plus its provenance.
#[derive(Debug, Clone)]
pub struct VideoSequence<T> {
    pub frames: Vec<Image<T>>,
    pub correlation: Correlation,
    pub seed: u64,
    /// Per-slot screen-sequence seeds, index = screen slot.
    pub slot_seeds: Vec<u64>,
    /// Voelz sampling ratio of the configuration (1 = critical).
    pub sampling_ratio: f64,
}

impl<T: Scalar> VideoSequence<T> {
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "seed = {}", self.seed)?;
        writeln!(out, "correlation = {}", self.correlation.label())?;
        writeln!(out, "frames = {}", self.frames.len())?;
        writeln!(out, "sampling_ratio = {:.6}", self.sampling_ratio)?;
        for (slot, s) in self.slot_seeds.iter().enumerate() {
            writeln!(out, "slot_seed_{slot} = {s}")?;
        }
        Ok(())
    }
}

/// Simulates `t` frames of `x` seen through the configured atmosphere.
/// Each screen slot evolves as its own [`generate_sequence`] stream; master
/// screens are per-frame, per-slot, derived deterministically from `p.seed`.
pub fn simulate_sequence<T: Scalar>(
    x: &Image<T>,
    p: &TurbulenceParams<T>,
    cfg: &SimConfig<T>,
    t: usize,
    correlation: Correlation,
) -> Result<VideoSequence<T>> {
    Ok(simulate_sequence_with_psfs(x, p, cfg, t, correlation)?.0)
}

/// [`simulate_sequence`] that also hands back the per-frame PSF grids
/// (needed for short-exposure ground truths and PSF statistics).
pub fn simulate_sequence_with_psfs<T: Scalar>(
    x: &Image<T>,
    p: &TurbulenceParams<T>,
    cfg: &SimConfig<T>,
    t: usize,
    correlation: Correlation,
) -> Result<(VideoSequence<T>, Vec<PsfGrid<T>>)> {
    if t < 1 {
        return Err(TurbError::parameter("frame count must be at least 1"));
    }
    let per_screen_r0 = p.per_screen_r0();
    let mut slot_seeds = Vec::with_capacity(p.n_screens);
    let mut slot_screens: Vec<Vec<RealField<T>>> = Vec::with_capacity(p.n_screens);
    for slot in 0..p.n_screens {
        let seed = seeds::derive(p.seed, "screen-slot", slot as u64);
        let mut ps = p.clone();
        ps.seed = seed;
        ps.r0 = per_screen_r0[slot];
        ps.cn2 = cn2_from_r0(ps.r0, p.lambda, p.path_length);
        let seq = generate_sequence(&ps, t, correlation)?;
        slot_seeds.push(seed);
        slot_screens.push(seq.screens);
    }

    let per_frame: Vec<Result<(Image<T>, PsfGrid<T>)>> = (0..t)
        .into_par_iter()
        .map(|frame| {
            let masters: Vec<RealField<T>> =
                (0..p.n_screens).map(|slot| slot_screens[slot][frame].clone()).collect();
            let grid = build_psf_grid(x.dims(), p, cfg, &masters)?;
            let img = apply_spatially_varying(x, &grid)?;
            Ok((img, grid))
        })
        .collect();
    let mut frames = Vec::with_capacity(t);
    let mut grids = Vec::with_capacity(t);
    for f in per_frame {
        let (img, grid) = f?;
        frames.push(img);
        grids.push(grid);
    }
    let seq = VideoSequence {
        frames,
        correlation,
        seed: p.seed,
        slot_seeds,
        sampling_ratio: voelz_ratio(p.pitch(), p.lambda, p.path_length, p.crop_n).to_f64_lossy(),
    };
    Ok((seq, grids))
}
