//! End-to-end orchestration: simulate → reference → flow → lucky fusion →
//! blind deconvolution, with a deterministic metrics report and an optional
//! per-stage invariant verification pass.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::deconv::{
    blind_deconv, estimate_prior, generate_psf_corpus, train_basis, BasisSet, CorpusConfig,
    DeconvConfig,
};
use crate::error::{Result, TurbError};
use crate::fusion::{block_flow, lucky_fuse, LuckyConfig};
use crate::image::{resolution_chart, Image};
use crate::optics::{ApertureShape, ApertureSpec, PsfExtraction};
use crate::reference::{build_reference, NlConfig};
use crate::screen::{Correlation, TurbulenceParams};
use crate::seeds;
use crate::sim::{simulate_sequence, SimConfig, VideoSequence};

/// Flat key = value configuration with one section per stage. Unknown keys
/// are rejected so typos fail fast.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Input image path, or `chart:<n>` for the built-in resolution chart.
    pub input: String,
    pub optics: OpticsSection,
    pub turbulence: TurbulenceSection,
    pub sim: SimSection,
    pub reference: ReferenceSection,
    pub fusion: FusionSection,
    pub deconv: DeconvSection,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsSection {
    pub lambda: f64,
    pub path_length: f64,
    pub aperture_d: f64,
    /// "circle" or "square".
    pub aperture_shape: String,
    /// Flat-region size; 0 means 2.5×aperture.
    pub flat_size: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurbulenceSection {
    pub cn2: f64,
    pub l0: f64,
    pub big_l0: f64,
    pub n_screens: usize,
    pub crop_n: usize,
    /// 0 means next power of two of 3×crop_n.
    pub screen_n: usize,
    pub subharmonic_levels: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub frames: usize,
    pub stride: usize,
    /// "uncorrelated" or "ar1".
    pub correlation: String,
    pub rho: f64,
    pub kernel_n: usize,
    /// Delta-PSF passthrough (no atmosphere, no diffraction); the degenerate
    /// pipeline check uses this.
    pub ideal: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub patch: usize,
    pub window: usize,
    /// 0 means all simulated frames.
    pub frames: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub block: usize,
    pub radius: usize,
    pub tile: usize,
    pub temperature: f64,
    /// 0 means all frames.
    pub window: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeconvSection {
    pub enabled: bool,
    pub lambda: f64,
    pub gamma: f64,
    pub iters: usize,
    pub scales: usize,
    pub m: usize,
    pub corpus: usize,
    pub tau: f64,
    pub cn2_lo: f64,
    pub cn2_hi: f64,
    /// Pre-trained basis file; empty trains from a fresh corpus.
    pub basis_path: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input: "chart:128".into(),
            optics: OpticsSection::default(),
            turbulence: TurbulenceSection::default(),
            sim: SimSection::default(),
            reference: ReferenceSection::default(),
            fusion: FusionSection::default(),
            deconv: DeconvSection::default(),
        }
    }
}

impl Default for OpticsSection {
    fn default() -> Self {
        Self {
            lambda: 0.525e-6,
            path_length: 7000.0,
            aperture_d: 0.2034,
            aperture_shape: "circle".into(),
            flat_size: 0.0,
        }
    }
}

impl Default for TurbulenceSection {
    fn default() -> Self {
        Self {
            cn2: 2.5e-16,
            l0: 0.01,
            big_l0: 100.0,
            n_screens: 3,
            crop_n: 128,
            screen_n: 0,
            subharmonic_levels: 0,
        }
    }
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            frames: 8,
            stride: 32,
            correlation: "uncorrelated".into(),
            rho: 0.9,
            kernel_n: 15,
            ideal: false,
        }
    }
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self { patch: 7, window: 11, frames: 0, beta: 4.0 }
    }
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { block: 16, radius: 4, tile: 16, temperature: 0.25, window: 0 }
    }
}

impl Default for DeconvSection {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 0.05,
            gamma: 1e-4,
            iters: 10,
            scales: 3,
            m: 8,
            corpus: 400,
            tau: 1e-6,
            cn2_lo: 5e-17,
            cn2_hi: 5e-16,
            basis_path: String::new(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TurbError::config(format!("bad config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn aperture(&self) -> Result<ApertureSpec<f64>> {
        let shape = match self.optics.aperture_shape.as_str() {
            "circle" => ApertureShape::Circle,
            "square" => ApertureShape::Square,
            other => {
                return Err(TurbError::config(format!("unknown aperture shape '{other}'")))
            }
        };
        Ok(ApertureSpec { shape, diameter: self.optics.aperture_d })
    }

    pub fn correlation(&self) -> Result<Correlation> {
        match self.sim.correlation.as_str() {
            "uncorrelated" => Ok(Correlation::Uncorrelated),
            "ar1" => Ok(Correlation::Ar1(self.sim.rho)),
            other => Err(TurbError::config(format!("unknown correlation '{other}'"))),
        }
    }

    pub fn turbulence_params(&self, seed: u64) -> Result<TurbulenceParams<f64>> {
        let screen_n = if self.turbulence.screen_n == 0 {
            (3 * self.turbulence.crop_n).next_power_of_two()
        } else {
            self.turbulence.screen_n
        };
        let mut p = TurbulenceParams::from_cn2(
            self.turbulence.cn2,
            self.optics.lambda,
            self.optics.path_length,
            self.turbulence.l0,
            self.turbulence.big_l0,
            self.turbulence.n_screens,
            screen_n,
            self.turbulence.crop_n,
            seed,
        )?;
        p.subharmonic_levels = self.turbulence.subharmonic_levels;
        Ok(p)
    }

    pub fn sim_config(&self) -> Result<SimConfig<f64>> {
        let aperture = self.aperture()?;
        let mut cfg = SimConfig::new(aperture);
        if self.optics.flat_size > 0.0 {
            cfg.flat_size = self.optics.flat_size;
        }
        cfg.stride = self.sim.stride;
        cfg.extract = PsfExtraction {
            kernel_n: self.sim.kernel_n,
            image_pitch: None,
            centroid: false,
        };
        Ok(cfg)
    }

    pub fn load_input(&self) -> Result<Image<f64>> {
        if let Some(n) = self.input.strip_prefix("chart:") {
            let n: usize = n
                .parse()
                .map_err(|_| TurbError::config(format!("bad chart size '{n}'")))?;
            return Ok(resolution_chart(n));
        }
        Image::load(&self.input)
    }
}

/// One pass/fail invariant check from `--verify`.
#[derive(Debug, Clone)]
pub struct VerifyCheck {
    pub stage: String,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Everything a pipeline run produces besides the files on disk.
#[derive(Debug)]
pub struct PipelineReport {
    pub metrics: Vec<(String, f64)>,
    pub checks: Vec<VerifyCheck>,
    pub out_dir: PathBuf,
}

impl PipelineReport {
    /// Deterministic text rendering; identical configs and seeds hash equal.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        for c in &self.checks {
            let _ = writeln!(
                s,
                "check {} / {} = {} ({})",
                c.stage,
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.detail
            );
        }
        s
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn envelope_check(
    stage: &str,
    frames: &[Image<f64>],
    composite: &Image<f64>,
    slack: f64,
) -> VerifyCheck {
    let (h, w) = composite.dims();
    let mut worst = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            let lo = frames.iter().map(|f| f.data()[[i, j]]).fold(f64::INFINITY, f64::min);
            let hi = frames.iter().map(|f| f.data()[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
            let v = composite.data()[[i, j]];
            worst = worst.max(lo - v).max(v - hi);
        }
    }
    VerifyCheck {
        stage: stage.into(),
        name: "per-pixel convex envelope".into(),
        pass: worst <= slack,
        detail: format!("max excursion {worst:.3e}"),
    }
}

/// Runs the configured pipeline, writing stage outputs and `report.txt` into
/// `out_dir`. Ground truth for PSNR is the input image (the simulator's
/// latent scene).
pub fn run_pipeline(
    cfg: &PipelineConfig,
    out_dir: impl AsRef<Path>,
    verify: bool,
) -> Result<PipelineReport> {
    let out_dir = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    let truth = cfg.load_input()?.clamped();
    let mut metrics: Vec<(String, f64)> = Vec::new();
    let mut checks: Vec<VerifyCheck> = Vec::new();

    // Stage 1: simulate.
    let seq: VideoSequence<f64> = if cfg.sim.ideal {
        VideoSequence {
            frames: vec![truth.clone(); cfg.sim.frames.max(1)],
            correlation: Correlation::Uncorrelated,
            seed: cfg.seed,
            slot_seeds: vec![],
            sampling_ratio: 1.0,
        }
    } else {
        let p = cfg.turbulence_params(seeds::derive(cfg.seed, "pipeline-sim", 0))?;
        simulate_sequence(&truth, &p, &cfg.sim_config()?, cfg.sim.frames.max(1), cfg.correlation()?)?
    };
    for (i, f) in seq.frames.iter().enumerate() {
        f.save(out_dir.join(format!("frame_{i:03}.png")), true)?;
    }
    seq.write_manifest(out_dir.join("manifest.txt"))?;
    metrics.push(("psnr_input".into(), seq.frames[0].psnr(&truth)));

    // Stage 2: non-local reference.
    let frames_t =
        if cfg.reference.frames == 0 { seq.frames.len() } else { cfg.reference.frames };
    let nl = NlConfig {
        patch_d: cfg.reference.patch,
        window_l: cfg.reference.window,
        frames_t,
        beta: cfg.reference.beta,
    };
    let reference = build_reference(&seq.frames, &nl)?;
    reference.save(out_dir.join("reference.png"), true)?;
    metrics.push(("psnr_reference".into(), reference.psnr(&truth)));
    if verify {
        checks.push(envelope_check("reference", &seq.frames, &reference, 1e-9));
    }

    // Stage 3: block-matching flow toward the reference.
    let warped: Vec<Image<f64>> = seq
        .frames
        .iter()
        .map(|f| block_flow(f, &reference, cfg.fusion.block, cfg.fusion.radius).map(|r| r.0))
        .collect::<Result<_>>()?;

    // Stage 4: lucky-region fusion.
    let lucky_cfg = LuckyConfig { tile: cfg.fusion.tile, temperature: cfg.fusion.temperature };
    let window = if cfg.fusion.window == 0 { warped.len() } else { cfg.fusion.window };
    let fused = lucky_fuse(&warped, &reference, window, &lucky_cfg)?;
    fused.save(out_dir.join("lucky.png"), true)?;
    metrics.push(("psnr_fused".into(), fused.psnr(&truth)));
    if verify {
        checks.push(envelope_check("fusion", &warped, &fused, 1e-9));
    }

    // Stage 5: blind deconvolution.
    let restored = if cfg.deconv.enabled {
        let basis: BasisSet<f64> = if cfg.deconv.basis_path.is_empty() {
            let p = cfg.turbulence_params(seeds::derive(cfg.seed, "pipeline-corpus", 0))?;
            let mut corpus_cfg = CorpusConfig::new(cfg.aperture()?);
            if cfg.optics.flat_size > 0.0 {
                corpus_cfg.flat_size = cfg.optics.flat_size;
            }
            corpus_cfg.kernel_n = cfg.sim.kernel_n;
            let corpus = generate_psf_corpus(
                cfg.deconv.corpus,
                (cfg.deconv.cn2_lo, cfg.deconv.cn2_hi),
                &p,
                &corpus_cfg,
            )?;
            let (mut basis, _) = train_basis(&corpus, cfg.deconv.m)?;
            let prior = estimate_prior(&corpus, &basis, cfg.deconv.tau, corpus.len().max(100))?;
            basis = BasisSet::new(
                basis.mean().clone(),
                basis.components().to_vec(),
                prior.scales,
            )?;
            basis.write_to(out_dir.join("basis.bin"))?;
            basis
        } else {
            BasisSet::read_from(&cfg.deconv.basis_path)?
        };
        let dcfg = DeconvConfig {
            lambda: cfg.deconv.lambda,
            gamma: cfg.deconv.gamma,
            iters: cfg.deconv.iters,
            scales: cfg.deconv.scales,
        };
        let out = blind_deconv(&fused, &basis, &dcfg)?;
        out.image.save(out_dir.join("restored.png"), true)?;
        out.psf.write_csv(out_dir.join("psf_estimate.csv"))?;
        if verify {
            let monotone = out.objective_traces.iter().all(|trace| {
                trace.windows(2).all(|w| w[1] <= w[0] + 1e-6)
            });
            checks.push(VerifyCheck {
                stage: "deconv".into(),
                name: "objective non-increasing".into(),
                pass: monotone,
                detail: format!("{} scales", out.objective_traces.len()),
            });
        }
        Some(out.image)
    } else {
        None
    };
    let final_image = restored.clone().unwrap_or_else(|| fused.clone());
    metrics.push(("psnr_restored".into(), final_image.psnr(&truth)));
    final_image.save(out_dir.join("output.png"), true)?;

    let report = PipelineReport { metrics, checks, out_dir: out_dir.clone() };
    std::fs::write(out_dir.join("report.txt"), report.render())?;
    if verify && !report.all_checks_pass() {
        return Err(TurbError::Accuracy("verification checks failed".into(), f64::NAN));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.input = "chart:48".into();
        cfg.seed = 5;
        cfg.optics.aperture_d = 0.15;
        cfg.optics.flat_size = 0.36;
        cfg.turbulence.crop_n = 64;
        cfg.turbulence.screen_n = 128;
        cfg.turbulence.n_screens = 2;
        cfg.sim.frames = 3;
        cfg.sim.stride = 24;
        cfg.deconv.enabled = false;
        cfg
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.optics.lambda, cfg.optics.lambda);
        assert!(PipelineConfig::from_toml("nonsense_key = 1").is_err());
        assert!(PipelineConfig::from_toml("[optics]\ntypo_lambda = 1.0").is_err());
    }

    #[test]
    fn degenerate_pipeline_is_identity() {
        // One ideal frame, no turbulence, deconvolution off: the input must
        // pass through every remaining stage untouched.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fast_config();
        cfg.sim.ideal = true;
        cfg.sim.frames = 1;
        let report = run_pipeline(&cfg, dir.path(), true).unwrap();
        let truth = cfg.load_input().unwrap().clamped();
        let out = Image::<f64>::load(dir.path().join("output.png")).unwrap();
        let worst = out
            .data()
            .iter()
            .zip(truth.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // 16-bit quantization is the only loss allowed.
        assert!(worst <= 1.0 / 65535.0 + 1e-6, "max deviation {worst}");
        assert!(report.all_checks_pass());
    }

    #[test]
    fn pipeline_runs_and_reports_are_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = fast_config();
        let a = run_pipeline(&cfg, dir_a.path(), false).unwrap();
        let b = run_pipeline(&cfg, dir_b.path(), false).unwrap();
        assert_eq!(a.render(), b.render());
        let ta = std::fs::read(dir_a.path().join("report.txt")).unwrap();
        let tb = std::fs::read(dir_b.path().join("report.txt")).unwrap();
        assert_eq!(ta, tb);
        // Frames byte-identical too.
        let fa = std::fs::read(dir_a.path().join("frame_000.png")).unwrap();
        let fb = std::fs::read(dir_b.path().join("frame_000.png")).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn missing_input_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fast_config();
        cfg.input = "/nonexistent/image.png".into();
        assert!(run_pipeline(&cfg, dir.path(), false).is_err());
    }
}
