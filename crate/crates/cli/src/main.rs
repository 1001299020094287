//! `turb` — simulate anisoplanatic turbulence, restore degraded sequences
//! and run the frame-count numerics from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use turb_core::deconv::{
    blind_deconv, estimate_prior, generate_psf_corpus, train_basis, BasisSet, CorpusConfig,
    DeconvConfig,
};
use turb_core::fusion::{block_flow, lucky_fuse, LuckyConfig};
use turb_core::image::Image;
use turb_core::pipeline::{run_pipeline, PipelineConfig};
use turb_core::reference::{build_reference, NlConfig};
use turb_core::theory::{
    boxcar_increasing_check, boxcar_v0, calibrate_beta, deviation_sweep, variance_peak_scan,
    ShortPsf1D, SimScenario, SmoothingKernel,
};
use turb_core::{Result, TurbError};

#[derive(Parser)]
#[command(name = "turb", version, about = "Atmospheric turbulence simulation and restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a turbulence-distorted frame sequence from an image.
    Simulate {
        /// Input image path or `chart:<n>` for the built-in target.
        #[arg(long)]
        image: Option<String>,
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the non-local reference from a directory of frames.
    Reference {
        /// Directory holding frame_*.png.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        beta: f64,
        /// Spatial search window side L (odd).
        #[arg(long, default_value_t = 11)]
        window: usize,
        /// Temporal window T; 0 = all frames.
        #[arg(long, default_value_t = 0)]
        frames: usize,
        /// Patch side (odd).
        #[arg(long, default_value_t = 7)]
        patch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-match frames to a reference and fuse lucky regions.
    Fuse {
        /// Directory holding frame_*.png.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 16)]
        block: usize,
        #[arg(long, default_value_t = 4)]
        radius: usize,
        #[arg(long, default_value_t = 16)]
        tile: usize,
        #[arg(long, default_value_t = 0.25)]
        temperature: f64,
        /// Temporal fusion window; 0 = all frames.
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a PSF basis from dumped kernels or a freshly simulated corpus.
    TrainBasis {
        /// Directory of PSF dumps (binary field format); omit to simulate.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Corpus size when simulating.
        #[arg(long, default_value_t = 2000)]
        generate: usize,
        /// TOML configuration for the simulated corpus.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        m: usize,
        /// OMP residual target for the prior fits.
        #[arg(long, default_value_t = 1e-6)]
        tau: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Also dump the simulated corpus kernels here.
        #[arg(long)]
        dump_corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blind-deconvolve one image with a trained basis.
    Deconv {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-4)]
        gamma: f64,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        scales: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole simulate→reference→fuse→deconvolve pipeline.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Re-check stage invariants and fail on violations.
        #[arg(long)]
        verify: bool,
    },
    /// Numerical experiments behind the frame-count analysis.
    Theory {
        #[command(subcommand)]
        cmd: TheoryCmd,
    },
}

#[derive(Subcommand)]
enum TheoryCmd {
    /// sup_x V(x, σ) over a log σ grid → CSV (sigma, sup_v).
    ScanVariance {
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
        /// gaussian or boxcar.
        #[arg(long, default_value = "gaussian")]
        kernel: String,
        #[arg(long, default_value_t = 60)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo deviation sweep vs the Bernstein bound → CSV
    /// (sigma, t, eps, empirical, bound, std_err).
    Bernstein {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Boxcar closed form V(0, σ) → CSV (sigma, v0).
    Boxcar {
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate β against the simulator over D/r0 values → CSV
    /// (d_over_r0, beta).
    CalibrateBeta {
        /// Comma-separated D/r0 list.
        #[arg(long, default_value = "0.25,0.5,1,2,3,4")]
        d_over_r0: String,
        /// Relative squared-error tolerance.
        #[arg(long, default_value_t = 0.02)]
        eps: f64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &TurbError) -> i32 {
    match e {
        TurbError::Config(_)
        | TurbError::Parameter(_)
        | TurbError::Range(_)
        | TurbError::Io(_)
        | TurbError::Image(_) => 2,
        TurbError::Accuracy(_, _)
        | TurbError::Divergence(_)
        | TurbError::DegeneratePsf(_)
        | TurbError::Calibration(_) => 3,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Frames named `frame_*.png|pgm`, sorted by name.
fn load_frames(dir: &Path) -> Result<Vec<Image<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("frame_") && (n.ends_with(".png") || n.ends_with(".pgm")))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(TurbError::config(format!("no frame_*.png in {}", dir.display())));
    }
    paths.iter().map(Image::load).collect()
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { image, config, frames, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(img) = image {
                cfg.input = img;
            }
            if let Some(f) = frames {
                cfg.sim.frames = f;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            std::fs::create_dir_all(&out)?;
            let truth = cfg.load_input()?.clamped();
            let p = cfg.turbulence_params(cfg.seed)?;
            let seq = turb_core::sim::simulate_sequence(
                &truth,
                &p,
                &cfg.sim_config()?,
                cfg.sim.frames.max(1),
                cfg.correlation()?,
            )?;
            for (i, f) in seq.frames.iter().enumerate() {
                f.save(out.join(format!("frame_{i:03}.png")), true)?;
            }
            seq.write_manifest(out.join("manifest.txt"))?;
            println!("wrote {} frames to {}", seq.frames.len(), out.display());
        }
        Cmd::Reference { input, beta, window, frames, patch, out } => {
            let all = load_frames(&input)?;
            let frames_t = if frames == 0 { all.len() } else { frames };
            let cfg = NlConfig { patch_d: patch, window_l: window, frames_t, beta };
            let reference = build_reference(&all, &cfg)?;
            reference.save(&out, true)?;
            println!("reference written to {}", out.display());
        }
        Cmd::Fuse { input, reference, block, radius, tile, temperature, window, out } => {
            let frames = load_frames(&input)?;
            let reference = Image::<f64>::load(&reference)?;
            let warped: Vec<Image<f64>> = frames
                .iter()
                .map(|f| block_flow(f, &reference, block, radius).map(|r| r.0))
                .collect::<Result<_>>()?;
            let cfg = LuckyConfig { tile, temperature };
            let win = if window == 0 { warped.len() } else { window };
            let fused = lucky_fuse(&warped, &reference, win, &cfg)?;
            fused.save(&out, true)?;
            println!("fused image written to {}", out.display());
        }
        Cmd::TrainBasis { corpus, generate, config, m, tau, seed, dump_corpus, out } => {
            let kernels: Vec<turb_core::Psf<f64>> = match corpus {
                Some(dir) => {
                    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().map(|e| e == "bin").unwrap_or(false))
                        .collect();
                    paths.sort();
                    if paths.is_empty() {
                        return Err(TurbError::config(format!(
                            "no .bin kernels in {}",
                            dir.display()
                        )));
                    }
                    paths
                        .iter()
                        .map(turb_core::Psf::<f64>::read_from)
                        .collect::<Result<_>>()?
                }
                None => {
                    let mut cfg = load_config(&config)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    let p = cfg.turbulence_params(cfg.seed)?;
                    let mut ccfg = CorpusConfig::new(cfg.aperture()?);
                    if cfg.optics.flat_size > 0.0 {
                        ccfg.flat_size = cfg.optics.flat_size;
                    }
                    ccfg.kernel_n = cfg.sim.kernel_n;
                    generate_psf_corpus(
                        generate,
                        (cfg.deconv.cn2_lo, cfg.deconv.cn2_hi),
                        &p,
                        &ccfg,
                    )?
                }
            };
            if let Some(dir) = dump_corpus {
                std::fs::create_dir_all(&dir)?;
                for (i, k) in kernels.iter().enumerate() {
                    k.write_to(dir.join(format!("psf_{i:05}.bin")))?;
                }
            }
            let (basis, report) = train_basis(&kernels, m)?;
            if report.m < report.requested_m {
                eprintln!(
                    "warning: corpus rank supports only {} of {} requested components",
                    report.m, report.requested_m
                );
            }
            let prior = estimate_prior(&kernels, &basis, tau, kernels.len().max(100))?;
            let basis =
                BasisSet::new(basis.mean().clone(), basis.components().to_vec(), prior.scales)?;
            basis.write_to(&out)?;
            println!(
                "basis with {} components written to {} (explained variance {:.1}%)",
                basis.m(),
                out.display(),
                report.explained_variance * 100.0
            );
        }
        Cmd::Deconv { input, basis, lambda, gamma, iters, scales, out } => {
            let y = Image::<f64>::load(&input)?;
            let basis = BasisSet::<f64>::read_from(&basis)?;
            let cfg = DeconvConfig { lambda, gamma, iters, scales };
            let result = blind_deconv(&y, &basis, &cfg)?;
            result.image.save(&out, true)?;
            let psf_path = out.with_extension("psf.csv");
            result.psf.write_csv(&psf_path)?;
            println!("restored image written to {}", out.display());
        }
        Cmd::Pipeline { config, seed, out, verify } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_pipeline(&cfg, &out, verify)?;
            print!("{}", report.render());
        }
        Cmd::Theory { cmd } => run_theory(cmd)?,
    }
    Ok(())
}

fn run_theory(cmd: TheoryCmd) -> Result<()> {
    match cmd {
        TheoryCmd::ScanVariance { nu, kernel, points, out } => {
            let kernel = match kernel.as_str() {
                "gaussian" => SmoothingKernel::Gaussian,
                "boxcar" => SmoothingKernel::Boxcar,
                other => return Err(TurbError::config(format!("unknown kernel '{other}'"))),
            };
            let h = ShortPsf1D::new(kernel, nu)?;
            let mut grid = vec![0.0f64];
            let (lo, hi) = ((0.01f64 * nu).log10(), (20.0f64 * nu).log10());
            for k in 0..points {
                grid.push(10f64.powf(lo + (hi - lo) * k as f64 / (points - 1) as f64));
            }
            let curve = variance_peak_scan(&h, &grid)?;
            let rows: Vec<Vec<f64>> = curve.points.iter().map(|&(s, v)| vec![s, v]).collect();
            write_csv(&out, "sigma,sup_v", &rows)?;
            println!(
                "peak sup V = {:.6e} at sigma = {:.4} ({})",
                curve.points[curve.peak_index].1,
                curve.points[curve.peak_index].0,
                if curve.unimodal { "unimodal" } else { "NOT unimodal" }
            );
        }
        TheoryCmd::Bernstein { trials, seed, out } => {
            let cells = deviation_sweep(
                SmoothingKernel::Gaussian,
                1.0,
                &[0.5, 1.0, 2.0],
                &[10, 50, 200],
                &[0.02, 0.05, 0.1],
                trials,
                seed,
            )?;
            let rows: Vec<Vec<f64>> = cells
                .iter()
                .map(|c| {
                    vec![c.sigma, c.t_frames as f64, c.eps, c.empirical, c.bound, c.std_err]
                })
                .collect();
            write_csv(&out, "sigma,t,eps,empirical,bound,std_err", &rows)?;
            let violations = cells
                .iter()
                .filter(|c| c.empirical > c.bound + 3.0 * c.std_err)
                .count();
            println!("{} cells, {} bound violations", cells.len(), violations);
        }
        TheoryCmd::Boxcar { nu, points, out } => {
            let boundary = boxcar_increasing_check(nu)?;
            let mut rows = Vec::with_capacity(points);
            for k in 0..points {
                let sigma = boundary * k as f64 / (points - 1) as f64;
                rows.push(vec![sigma, boxcar_v0(nu, sigma)?]);
            }
            write_csv(&out, "sigma,v0", &rows)?;
            println!("increasing on [0, {boundary:.4}] (boundary = nu/Phi^-1(3/4))");
        }
        TheoryCmd::CalibrateBeta { d_over_r0, eps, trials, seed, out } => {
            let ratios: Vec<f64> = d_over_r0
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| TurbError::config(format!("bad D/r0 value '{s}'")))
                })
                .collect::<Result<_>>()?;
            let mut scenario = SimScenario::<f64>::default();
            scenario.seed = seed;
            let mut rows = Vec::new();
            for r in ratios {
                let beta = calibrate_beta(&scenario, r, eps, trials)?;
                println!("D/r0 {r:.2}: beta = {beta:.4}");
                rows.push(vec![r, beta]);
            }
            write_csv(&out, "d_over_r0,beta", &rows)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
