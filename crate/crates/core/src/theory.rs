//! Numerical side of the frame-count analysis: short/long PSF models over a
//! random Gaussian shift, kernel variance surfaces and their supremum over
//! space, the Bernstein deviation bound with Monte Carlo verification, the
//! boxcar closed form, the variance-peak scan, the motion frame budget and
//! β calibration against the simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, TurbError};
use crate::grid::WindowSpec;
use crate::image::Image;
use crate::num::Scalar;
use crate::optics::{point_source, pupil_to_psf, split_step, ApertureSpec, Psf, PsfExtraction};
use crate::quad::integrate;
use crate::reference::{min_patch_distances, reference_from_distances, NlConfig};
use crate::screen::{cn2_from_r0, crop_screen, generate_screen, TurbulenceParams};
use crate::seeds;

/// Even, bounded, integrable kernel `K` with `0 ≤ K ≤ M`.
#[derive(Debug, Clone, PartialEq)]
pub enum SmoothingKernel<T> {
    /// Standard normal density; `M = 1/√(2π)`.
    Gaussian,
    /// `1/2` on `[-1, 1]`; `M = 1/2`.
    Boxcar,
    /// Samples of an even function on `[0, x_max]`, linearly interpolated,
    /// zero beyond the last sample.
    Tabulated { xs: Vec<T>, ys: Vec<T> },
}

impl<T: Scalar> SmoothingKernel<T> {
    pub fn eval(&self, x: T) -> T {
        match self {
            SmoothingKernel::Gaussian => x.norm_pdf(),
            SmoothingKernel::Boxcar => {
                if x.abs() <= T::one() {
                    T::of(0.5)
                } else {
                    T::zero()
                }
            }
            SmoothingKernel::Tabulated { xs, ys } => {
                let ax = x.abs();
                if xs.is_empty() || ax > *xs.last().unwrap() {
                    return T::zero();
                }
                let hi = xs.partition_point(|&v| v < ax).min(xs.len() - 1);
                if hi == 0 {
                    return ys[0];
                }
                let lo = hi - 1;
                let t = (ax - xs[lo]) / (xs[hi] - xs[lo]);
                ys[lo] + t * (ys[hi] - ys[lo])
            }
        }
    }

    /// Upper bound M of the kernel.
    pub fn upper_bound(&self) -> T {
        match self {
            SmoothingKernel::Gaussian => T::one() / (T::of(2.0) * T::PI()).sqrt(),
            SmoothingKernel::Boxcar => T::of(0.5),
            SmoothingKernel::Tabulated { ys, .. } => {
                ys.iter().copied().fold(T::zero(), T::max)
            }
        }
    }
}

/// Short-exposure PSF `h_ν(x) = K(x/ν)/ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortPsf1D<T> {
    pub kernel: SmoothingKernel<T>,
    pub nu: T,
}

impl<T: Scalar> ShortPsf1D<T> {
    pub fn new(kernel: SmoothingKernel<T>, nu: T) -> Result<Self> {
        if nu <= T::zero() {
            return Err(TurbError::parameter("bandwidth nu must be positive"));
        }
        Ok(Self { kernel, nu })
    }

    pub fn gaussian(nu: T) -> Self {
        Self { kernel: SmoothingKernel::Gaussian, nu }
    }

    pub fn boxcar(nu: T) -> Self {
        Self { kernel: SmoothingKernel::Boxcar, nu }
    }

    pub fn eval(&self, x: T) -> T {
        self.kernel.eval(x / self.nu) / self.nu
    }

    /// Upper bound of h, `M/ν`.
    pub fn max_value(&self) -> T {
        self.kernel.upper_bound() / self.nu
    }
}

/// Gaussian random shift `Θ ~ N(0, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftModel<T> {
    pub sigma: T,
}

impl<T: Scalar> ShiftModel<T> {
    pub fn new(sigma: T) -> Result<Self> {
        if sigma < T::zero() {
            return Err(TurbError::parameter("sigma must be nonnegative"));
        }
        Ok(Self { sigma })
    }

    fn pdf(&self, theta: T) -> T {
        (theta / self.sigma).norm_pdf() / self.sigma
    }
}

/// Quadrature tolerance for the convolutions (absolute).
const QUAD_TOL: f64 = 1e-10;

fn quad_bounds<T: Scalar>(h: &ShortPsf1D<T>, s: &ShiftModel<T>) -> (T, T) {
    let r = T::of(8.0) * (h.nu + s.sigma);
    (-r, r)
}

/// Long-exposure PSF `(h_ν ⊛ p_Θ)(x)`; with `σ = 0` this is `h_ν(x)` exactly.
pub fn long_psf<T: Scalar>(h: &ShortPsf1D<T>, s: &ShiftModel<T>, x: T) -> Result<T> {
    if s.sigma == T::zero() {
        return Ok(h.eval(x));
    }
    let (lo, hi) = quad_bounds(h, s);
    integrate(|theta| h.eval(x - theta) * s.pdf(theta), lo, hi, T::of(QUAD_TOL))
}

/// Finite-sample estimate `(1/T)·Σ h_ν(x - θ_t)` with iid `θ_t ~ N(0, σ²)`.
/// Deterministic per seed; `σ = 0` returns `h_ν(x)` exactly for any `T`.
pub fn finite_sample_psf<T: Scalar>(
    h: &ShortPsf1D<T>,
    s: &ShiftModel<T>,
    t_frames: usize,
    seed: u64,
    x: T,
) -> Result<T> {
    if t_frames < 1 {
        return Err(TurbError::parameter("need at least one frame"));
    }
    if s.sigma == T::zero() {
        return Ok(h.eval(x));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = T::zero();
    for _ in 0..t_frames {
        let theta = T::of(rng.sample::<f64, _>(StandardNormal)) * s.sigma;
        acc = acc + h.eval(x - theta);
    }
    Ok(acc / T::of_usize(t_frames))
}

/// Shift variance of the short PSF at `x`:
/// `V_ν(x,σ) = (h²_ν ⊛ p_Θ)(x) - (h_ν ⊛ p_Θ)²(x)`, clamped at 0 against
/// quadrature rounding.
pub fn variance_v<T: Scalar>(h: &ShortPsf1D<T>, s: &ShiftModel<T>, x: T) -> Result<T> {
    if s.sigma == T::zero() {
        return Ok(T::zero());
    }
    let (lo, hi) = quad_bounds(h, s);
    let second = integrate(
        |theta| {
            let v = h.eval(x - theta);
            v * v * s.pdf(theta)
        },
        lo,
        hi,
        T::of(QUAD_TOL),
    )?;
    let first = long_psf(h, s, x)?;
    Ok((second - first * first).max(T::zero()))
}

/// `sup_x V_ν(x, σ)` located by a grid over `[-6(ν+σ), 6(ν+σ)]` at step
/// `(ν+σ)/200`, refined by golden-section search. Returns (sup, argmax).
pub fn sup_variance<T: Scalar>(h: &ShortPsf1D<T>, s: &ShiftModel<T>) -> Result<(T, T)> {
    if s.sigma == T::zero() {
        return Ok((T::zero(), T::zero()));
    }
    let scale = h.nu + s.sigma;
    let half_range = T::of(6.0) * scale;
    let step = scale / T::of(200.0);
    let n_steps = (T::of(12.0) * scale / step).to_f64_lossy().round() as usize;
    let xs: Vec<T> = (0..=n_steps).map(|k| -half_range + T::of_usize(k) * step).collect();
    let vals: Vec<T> = xs
        .par_iter()
        .map(|&x| variance_v(h, s, x).unwrap_or(T::zero()))
        .collect();
    let (best, _) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite variance"))
        .expect("nonempty grid");
    let lo = if best == 0 { xs[0] } else { xs[best - 1] };
    let hi = if best == xs.len() - 1 { xs[best] } else { xs[best + 1] };
    let (x_star, v_star) = golden_max(|x| variance_v(h, s, x).unwrap_or(T::zero()), lo, hi);
    if v_star >= vals[best] {
        Ok((v_star, x_star))
    } else {
        Ok((vals[best], xs[best]))
    }
}

/// Golden-section maximization on [a, b]; returns (argmax, max).
fn golden_max<T: Scalar>(f: impl Fn(T) -> T, mut a: T, mut b: T) -> (T, T) {
    let inv_phi = T::of(0.618_033_988_749_894_9);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..60 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = (a + b) / T::of(2.0);
    (mid, f(mid))
}

/// Two-sided Bernstein tail bound for the finite-sample long-PSF estimate:
/// `α = 2·exp{ -ε²T / (2·supV + 2·M·ε/(3ν)) }`.
pub fn bernstein_bound<T: Scalar>(eps: T, t_frames: usize, sup_v: T, m: T, nu: T) -> Result<T> {
    if eps <= T::zero() || t_frames == 0 || sup_v < T::zero() || m <= T::zero() || nu <= T::zero() {
        return Err(TurbError::parameter("bernstein bound needs positive arguments"));
    }
    let denom = T::of(2.0) * sup_v + T::of(2.0) * m * eps / (T::of(3.0) * nu);
    Ok(T::of(2.0) * (-(eps * eps * T::of_usize(t_frames)) / denom).exp())
}

/// Empirical deviation frequency
/// `P(|h̃_ν(x) - (h_ν ⊛ p_Θ)(x)| > ε)` over Monte Carlo trials with derived
/// per-trial seeds.
pub fn monte_carlo_deviation<T: Scalar>(
    h: &ShortPsf1D<T>,
    s: &ShiftModel<T>,
    t_frames: usize,
    eps: T,
    x: T,
    trials: usize,
    seed: u64,
) -> Result<T> {
    if trials < 1 {
        return Err(TurbError::parameter("need at least one trial"));
    }
    let expect = long_psf(h, s, x)?;
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = seeds::derive(seed, "mc-deviation", trial as u64);
            let est = finite_sample_psf(h, s, t_frames, trial_seed, x).expect("t_frames >= 1");
            usize::from((est - expect).abs() > eps)
        })
        .sum();
    Ok(T::of_usize(hits) / T::of_usize(trials))
}

/// One cell of the Bernstein verification sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepCell<T> {
    pub sigma: T,
    pub t_frames: usize,
    pub eps: T,
    pub empirical: T,
    pub bound: T,
    /// Binomial standard error of the empirical frequency.
    pub std_err: T,
}

/// Runs the (σ, T, ε) sweep at `x = 0` and returns one cell per combination.
/// The deviation frequency must stay below `bound + 3·std_err` everywhere.
pub fn deviation_sweep<T: Scalar>(
    kernel: SmoothingKernel<T>,
    nu: T,
    sigmas: &[T],
    frame_counts: &[usize],
    epsilons: &[T],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepCell<T>>> {
    let h = ShortPsf1D::new(kernel, nu)?;
    let m = h.kernel.upper_bound();
    let mut cells = Vec::new();
    for (si, &sigma) in sigmas.iter().enumerate() {
        let s = ShiftModel::new(sigma)?;
        let (sup_v, _) = sup_variance(&h, &s)?;
        for &t_frames in frame_counts {
            for &eps in epsilons {
                let cell_seed = seeds::derive(seed, "sweep", (si * 1000 + t_frames) as u64)
                    ^ (eps.to_f64_lossy().to_bits());
                let empirical =
                    monte_carlo_deviation(&h, &s, t_frames, eps, T::zero(), trials, cell_seed)?;
                let bound = bernstein_bound(eps, t_frames, sup_v, m, nu)?;
                let std_err =
                    (empirical * (T::one() - empirical) / T::of_usize(trials)).max(T::zero()).sqrt();
                cells.push(SweepCell { sigma, t_frames, eps, empirical, bound, std_err });
            }
        }
    }
    Ok(cells)
}

/// Closed-form boxcar variance at the origin:
/// `V_ν(0, σ) = (g - g²)/(4ν²)` with `g = 2Φ(ν/σ) - 1`; zero at `σ = 0`.
pub fn boxcar_v0<T: Scalar>(nu: T, sigma: T) -> Result<T> {
    if nu <= T::zero() {
        return Err(TurbError::parameter("nu must be positive"));
    }
    if sigma < T::zero() {
        return Err(TurbError::parameter("sigma must be nonnegative"));
    }
    if sigma == T::zero() {
        return Ok(T::zero());
    }
    let g = T::of(2.0) * (nu / sigma).norm_cdf() - T::one();
    Ok((g - g * g) / (T::of(4.0) * nu * nu))
}

/// Boundary of the increasing regime, `σ* = ν / Φ⁻¹(3/4) ≈ 1.4826 ν`,
/// verified to be increasing on a 1000-point grid of `[0, σ*]`.
pub fn boxcar_increasing_check<T: Scalar>(nu: T) -> Result<T> {
    if nu <= T::zero() {
        return Err(TurbError::parameter("nu must be positive"));
    }
    let boundary = nu / T::norm_quantile(T::of(0.75));
    let n = 1000;
    let mut prev = boxcar_v0(nu, T::zero())?;
    for k in 1..=n {
        let sigma = boundary * T::of_usize(k) / T::of_usize(n);
        let v = boxcar_v0(nu, sigma)?;
        if v < prev {
            return Err(TurbError::Parameter(format!(
                "boxcar V(0,σ) not increasing at σ = {:.6}",
                sigma.to_f64_lossy()
            )));
        }
        prev = v;
    }
    Ok(boundary)
}

/// `sup_x V` per σ grid point plus a rise-then-fall diagnosis.
#[derive(Debug, Clone)]
pub struct VarianceCurve<T> {
    pub points: Vec<(T, T)>,
    pub peak_index: usize,
    /// Rise-then-fall within the relative wiggle tolerance (2%).
    pub unimodal: bool,
}

/// Scans `sup_x V_ν(x, σ)` over the σ grid (which must span at least
/// `[0.01ν, 20ν]`). Non-unimodality within tolerance is flagged, not fatal.
pub fn variance_peak_scan<T: Scalar>(
    h: &ShortPsf1D<T>,
    sigma_grid: &[T],
) -> Result<VarianceCurve<T>> {
    if sigma_grid.is_empty() {
        return Err(TurbError::parameter("empty sigma grid"));
    }
    let lo = sigma_grid.iter().copied().filter(|s| *s > T::zero()).fold(T::infinity(), T::min);
    let hi = sigma_grid.iter().copied().fold(T::zero(), T::max);
    if lo > T::of(0.011) * h.nu || hi < T::of(19.99) * h.nu {
        return Err(TurbError::parameter(
            "sigma grid must span at least [0.01ν, 20ν]",
        ));
    }
    let points: Vec<(T, T)> = sigma_grid
        .iter()
        .map(|&sigma| {
            let s = ShiftModel::new(sigma)?;
            Ok((sigma, sup_variance(h, &s)?.0))
        })
        .collect::<Result<_>>()?;
    let peak_index = points
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1).1.partial_cmp(&(b.1).1).expect("finite"))
        .map(|(i, _)| i)
        .unwrap();
    let tol = T::of(0.02);
    let mut unimodal = true;
    for w in points[..=peak_index].windows(2) {
        if w[1].1 < w[0].1 * (T::one() - tol) {
            unimodal = false;
        }
    }
    for w in points[peak_index..].windows(2) {
        if w[1].1 > w[0].1 * (T::one() + tol) {
            unimodal = false;
        }
    }
    Ok(VarianceCurve { points, peak_index, unimodal })
}

/// Frame budget imposed by object motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameBudget {
    /// Zero velocity: motion imposes no cap.
    Static,
    Frames(u64),
}

impl FrameBudget {
    pub fn min_with(self, t_static: u64) -> u64 {
        match self {
            FrameBudget::Static => t_static,
            FrameBudget::Frames(t_d) => t_d.min(t_static),
        }
    }
}

/// Motion cap `T_d = floor(2B/(cR) - 1)`, clamped to at least 1; `c = 0`
/// removes the cap entirely.
pub fn motion_frame_bound<T: Scalar>(bias_budget: T, velocity: T, grad_bound: T) -> Result<FrameBudget> {
    if bias_budget <= T::zero() || grad_bound <= T::zero() || velocity < T::zero() {
        return Err(TurbError::parameter("motion bound needs positive B and R, nonnegative c"));
    }
    if velocity == T::zero() {
        return Ok(FrameBudget::Static);
    }
    let raw = (T::of(2.0) * bias_budget / (velocity * grad_bound) - T::one()).floor();
    let clamped = raw.max(T::one()).to_f64_lossy() as u64;
    Ok(FrameBudget::Frames(clamped))
}

/// Desk-scale scenario for the simulation-backed theory experiments
/// (β calibration and the σ/ν relation).
#[derive(Debug, Clone)]
pub struct SimScenario<T> {
    pub lambda: T,
    pub path_length: T,
    pub aperture_d: T,
    pub flat_size: T,
    pub l0: T,
    pub big_l0: T,
    pub n_screens: usize,
    pub crop_n: usize,
    /// Frames per trial.
    pub frames: usize,
    /// Side of the PSF kernel used to build point-source frames.
    pub kernel_n: usize,
    /// Canvas side the kernels are embedded in for the reference step.
    pub canvas_n: usize,
    pub window: WindowSpec,
    pub seed: u64,
}

impl<T: Scalar> Default for SimScenario<T> {
    fn default() -> Self {
        Self {
            lambda: T::of(0.525e-6),
            path_length: T::of(7000.0),
            aperture_d: T::of(0.2034),
            flat_size: T::of(0.5085),
            l0: T::of(0.01),
            big_l0: T::of(100.0),
            n_screens: 3,
            crop_n: 128,
            frames: 16,
            kernel_n: 31,
            canvas_n: 64,
            window: WindowSpec::default(),
            seed: 0,
        }
    }
}

impl<T: Scalar> SimScenario<T> {
    fn params(&self, d_over_r0: T, seed: u64) -> Result<TurbulenceParams<T>> {
        let r0 = self.aperture_d / d_over_r0;
        TurbulenceParams::from_r0(
            r0,
            self.lambda,
            self.path_length,
            self.l0,
            self.big_l0,
            self.n_screens,
            self.crop_n.next_power_of_two(),
            self.crop_n,
            seed,
        )
    }

    /// Isoplanatic short-PSF draws, one per frame, fresh screens each frame.
    fn psf_frames(&self, d_over_r0: T, trial_seed: u64, kernel_n: usize) -> Result<Vec<Psf<T>>> {
        let p = self.params(d_over_r0, trial_seed)?;
        let r0s = p.per_screen_r0();
        let extract = PsfExtraction { kernel_n, image_pitch: None, centroid: false };
        (0..self.frames)
            .into_par_iter()
            .map(|frame| {
                let u0 = point_source(T::zero(), T::zero(), &p, self.aperture_d, self.flat_size)?;
                let screens: Vec<_> = (0..p.n_screens)
                    .map(|slot| {
                        let mut ps = p.clone();
                        ps.r0 = r0s[slot];
                        ps.cn2 = cn2_from_r0(ps.r0, p.lambda, p.path_length);
                        let seed = seeds::derive(
                            trial_seed,
                            "theory-frame",
                            (frame * self.n_screens + slot) as u64,
                        );
                        let master = generate_screen(&ps, seed)?;
                        crop_screen(&master, (p.screen_n / 2, p.screen_n / 2), p.crop_n)
                    })
                    .collect::<Result<_>>()?;
                let pupil = split_step(&u0, &screens, p.path_length, p.lambda, &self.window)?;
                pupil_to_psf(&pupil, &ApertureSpec::circle(self.aperture_d), &p, &extract)
            })
            .collect()
    }

    /// Measured (σ, ν) of the simulated PSF track, in image-plane pixels:
    /// σ pools the per-axis centroid standard deviations over frames, ν is
    /// the mean per-frame RMS radius about the centroid.
    pub fn sigma_nu_track(&self, d_over_r0: T, trial_seed: u64) -> Result<(T, T)> {
        // Generous kernel so strong tilts stay inside the measurement box.
        let kernel_n = (self.crop_n / 2) - 1;
        let psfs = self.psf_frames(d_over_r0, trial_seed, kernel_n)?;
        let centroids: Vec<(T, T)> = psfs.iter().map(|p| p.centroid()).collect();
        let n = T::of_usize(centroids.len());
        let mean_r = centroids.iter().map(|c| c.0).sum::<T>() / n;
        let mean_c = centroids.iter().map(|c| c.1).sum::<T>() / n;
        let var: T = centroids
            .iter()
            .map(|&(r, c)| ((r - mean_r) * (r - mean_r) + (c - mean_c) * (c - mean_c)) / T::of(2.0))
            .sum::<T>()
            / n;
        let sigma = var.sqrt();
        let nu = psfs.iter().map(|p| p.second_moment_radius()).sum::<T>() / n;
        Ok((sigma, nu))
    }
}

/// Embeds a kernel at the center of a square canvas.
fn embed<T: Scalar>(psf: &Psf<T>, canvas_n: usize) -> Image<T> {
    let mut img = Image::zeros(canvas_n, canvas_n);
    let k = psf.n();
    let off = canvas_n / 2 - k / 2;
    for ((i, j), &v) in psf.data().indexed_iter() {
        img.data_mut()[[off + i, off + j]] = v;
    }
    img
}

/// Log-spaced β candidates, 32 points in [1e-2, 1e3].
pub fn beta_grid<T: Scalar>() -> Vec<T> {
    let n = 32;
    (0..n)
        .map(|k| T::of(10f64.powf(-2.0 + 5.0 * k as f64 / (n - 1) as f64)))
        .collect()
}

/// Largest β on the log grid for which the non-local reference of a
/// simulated static point source deviates from the ground-truth
/// long-exposure point image by at most `eps` in relative squared error,
/// averaged over `trials` seeds.
///
/// The ground truth is the ensemble expectation of the observed point
/// image (estimated from a large independent frame set): more temporal
/// averaging — smaller β — always reduces the deviation, so the largest
/// passing β marks the minimum effective frame count for the tolerance,
/// and it drops as turbulence strengthens. Frames are peak-normalized so
/// patch distances live on the image value scale the β grid expects.
pub fn calibrate_beta<T: Scalar>(
    scenario: &SimScenario<T>,
    d_over_r0: T,
    eps: T,
    trials: usize,
) -> Result<T> {
    if eps <= T::zero() {
        return Err(TurbError::parameter("tolerance must be positive"));
    }
    if trials < 1 {
        return Err(TurbError::parameter("need at least one trial"));
    }
    let grid = beta_grid::<T>();

    // Ground truth: long-exposure expectation from an independent ensemble
    // several times larger than one trial.
    let truth_seed = seeds::derive(scenario.seed, "beta-truth", 0);
    let mut truth_sc = scenario.clone();
    truth_sc.frames = scenario.frames * 6;
    let ensemble = truth_sc.psf_frames(d_over_r0, truth_seed, scenario.kernel_n)?;
    let mut truth = Image::<T>::zeros(scenario.canvas_n, scenario.canvas_n);
    for p in &ensemble {
        let img = embed(p, scenario.canvas_n);
        truth.data_mut().iter_mut().zip(img.data().iter()).for_each(|(a, &v)| *a = *a + v);
    }
    truth.data_mut().mapv_inplace(|v| v / T::of_usize(ensemble.len()));
    let peak = truth.data().iter().copied().fold(T::zero(), T::max);
    if peak <= T::zero() {
        return Err(TurbError::DegeneratePsf("empty long-exposure target".into()));
    }
    truth.data_mut().mapv_inplace(|v| v / peak);
    let truth_energy: T = truth.data().iter().map(|&v| v * v).sum();

    let mut best_sum = T::zero();
    for trial in 0..trials {
        let trial_seed = seeds::derive(scenario.seed, "beta-trial", trial as u64);
        let psfs = scenario.psf_frames(d_over_r0, trial_seed, scenario.kernel_n)?;
        let frames: Vec<Image<T>> = psfs
            .iter()
            .map(|p| {
                let mut img = embed(p, scenario.canvas_n);
                img.data_mut().mapv_inplace(|v| v / peak);
                img
            })
            .collect();

        let mut cfg = NlConfig::<T> { frames_t: scenario.frames, ..NlConfig::default() };
        cfg.beta = T::one();
        let dists = min_patch_distances(&frames, &cfg)?;
        let mut best: Option<T> = None;
        for &beta in grid.iter().rev() {
            cfg.beta = beta;
            let reference = reference_from_distances(&frames, &cfg, &dists);
            let err: T = reference
                .data()
                .iter()
                .zip(truth.data().iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if err / truth_energy <= eps {
                best = Some(beta);
                break;
            }
        }
        match best {
            Some(b) => best_sum = best_sum + b,
            None => {
                return Err(TurbError::Calibration(format!(
                    "no β in [{:.0e}, {:.0e}] meets tolerance {:.3e} at D/r0 = {:.2}",
                    grid[0].to_f64_lossy(),
                    grid[grid.len() - 1].to_f64_lossy(),
                    eps.to_f64_lossy(),
                    d_over_r0.to_f64_lossy()
                )))
            }
        }
    }
    Ok(best_sum / T::of_usize(trials))
}
