use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use qscatter::calibration::{characterize_crosstalk, estimate_kernel, find_hot_pixels, kernel_table, HotPixelMask};
use qscatter::certify::{correlation_matrix, fidelity_bound, select_pixel_set};
use qscatter::epr::{analyze, FitOptions, OpticalCalibration};
use qscatter::jpd::{project_minus, project_sum, Jpd};
use qscatter::montecarlo::{curve_csv, plateau_check, plateau_curve};
use qscatter::optics::{synth_medium, MediumSpec, TransferMatrix};
use qscatter::shaping::{optimize_masks, peak_to_background, OptimizeOptions, ShapingProblem, TwoPlaneGeometry};
use qscatter::spadsim::FrameStack;
use qscatter::twophoton::Basis;
use qscatter_cli::config::RunConfig;
use qscatter_cli::figures::emit_figures;
use qscatter_cli::pipeline::{self, grid_csv, outlier_mask, parse_grid_csv, WarningLog};
use qscatter_cli::{derive_seed, read_file, with_workers, ArtifactDir, CliError, StageExt, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "qscatter", version, about = "Entangled-photon transport through scattering media: simulation and analysis")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize or load the medium, build the SLM mask and propagate the source.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate, then record light and dark SPAD frame stacks.
    Acquire {
        #[arg(long)]
        config: PathBuf,
    },
    /// Characterize cross-talk and hot pixels from a dark frame stack.
    Calibrate {
        #[arg(long)]
        dark: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Fit correlation widths and evaluate the EPR criterion.
    AnalyzeEpr {
        #[arg(long)]
        position: PathBuf,
        #[arg(long)]
        momentum: PathBuf,
        /// TOML file with pixel_pitch, magnification, effective_focal_length, wavelength.
        #[arg(long)]
        optics: Option<PathBuf>,
        #[arg(long, default_value_t = qscatter::epr::DEFAULT_NOISE_WINDOW)]
        noise_window: usize,
    },
    /// Build correlation matrices and certify the entanglement dimension.
    Certify {
        #[arg(long)]
        position: PathBuf,
        #[arg(long)]
        momentum: PathBuf,
        /// Intensity image (CSV grid) used to choose the pixel set; uniform if absent.
        #[arg(long)]
        intensity: Option<PathBuf>,
        #[arg(long)]
        hot_pixels: Option<PathBuf>,
        #[arg(long, default_value_t = qscatter::certify::DEFAULT_DIMENSION)]
        d: usize,
        #[arg(long, default_value_t = qscatter::certify::DEFAULT_SPACING)]
        spacing: usize,
    },
    /// Optimize SLM phase masks for a thick medium.
    Optimize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Certified dimension versus frame count under the Gaussian noise model.
    Plateau {
        #[arg(long)]
        config: PathBuf,
    },
    /// Full pipeline from medium to witness.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Plot-ready CSV data from a run directory.
    EmitFigures {
        #[arg(long)]
        run: PathBuf,
    },
}

fn read_jpd(path: &Path) -> Result<Jpd, CliError> {
    Jpd::read_from(&mut read_file(path)?.as_slice()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn calibrate(dark: &Path, out: &Path, threshold: f64) -> Result<(), CliError> {
    let stack = FrameStack::read_from(&mut read_file(dark)?.as_slice())
        .map_err(|e| CliError::Config(format!("{}: {e}", dark.display())))?;
    let mut dir = ArtifactDir::create(out)?;
    let mut log = WarningLog::default();
    let hot = outlier_mask(find_hot_pixels(&stack, threshold).stage("calibrate")?, &mut log);
    for w in &log.0 {
        eprintln!("warning: {w}");
    }
    dir.write_text("hot_pixels.txt", &hot.to_text())?;
    let reference = characterize_crosstalk(&stack).stage("calibrate")?;
    for w in &reference.warnings {
        eprintln!("warning: {w}");
    }
    dir.write_with("crosstalk.ref", "calibrate", |b| reference.value.write_to(b))?;
    dir.write_text("crosstalk_kernel.csv", &grid_csv(&kernel_table(&estimate_kernel(&reference.value))))?;
    println!("hot_pixels={}", hot.count());
    println!("state={}", dir.finish()?);
    Ok(())
}

fn analyze_epr(position: &Path, momentum: &Path, optics: Option<&Path>, noise_window: usize) -> Result<(), CliError> {
    let cal = match optics {
        Some(p) => toml::from_str::<OpticalCalibration>(&read_text(p)?).map_err(|e| CliError::Config(e.to_string()))?,
        None => OpticalCalibration::default(),
    };
    let (pos, mom) = (read_jpd(position)?, read_jpd(momentum)?);
    let opts = FitOptions { noise_window, ..FitOptions::default() };
    let report = analyze(&project_minus(&pos), &project_sum(&mom), &cal, opts).stage("epr")?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.value.to_text());
    Ok(())
}

fn certify(
    position: &Path,
    momentum: &Path,
    intensity: Option<&Path>,
    hot_pixels: Option<&Path>,
    d: usize,
    spacing: usize,
) -> Result<(), CliError> {
    let (pos, mom) = (read_jpd(position)?, read_jpd(momentum)?);
    let image = match intensity {
        Some(p) => parse_grid_csv(&read_text(p)?).map_err(CliError::Config)?,
        None => Array2::ones((pos.height(), pos.width())),
    };
    let mask = match hot_pixels {
        Some(p) => Some(HotPixelMask::from_text(&read_text(p)?).map_err(|e| CliError::Config(e.to_string()))?),
        None => None,
    };
    let set = select_pixel_set(image.view(), d, spacing, mask.as_ref()).stage("certify")?;
    let pm = correlation_matrix(&pos, &set, Basis::Position).stage("certify")?;
    let mm = correlation_matrix(&mom, &set, Basis::Momentum).stage("certify")?;
    print!("{}", fidelity_bound(&pm, &mm).stage("certify")?.to_text());
    Ok(())
}

fn optimize(cfg: &RunConfig) -> Result<(), CliError> {
    let grid = cfg.grid.mode_grid()?;
    let medium = match &cfg.medium.file {
        Some(p) => TransferMatrix::read_from(&mut read_file(p)?.as_slice()).stage("medium")?,
        None => {
            let seed = cfg.medium.seed.unwrap_or_else(|| derive_seed(cfg.seed, "medium"));
            synth_medium(&MediumSpec::new(cfg.medium.kind, seed, grid, cfg.wavelength)).stage("medium")?
        }
    };
    let sh = &cfg.shaping;
    let geometry = match (sh.geometry, sh.second_mask) {
        (Some(g), _) => Some(g),
        (None, true) => Some(TwoPlaneGeometry { wavelength: cfg.wavelength, ..TwoPlaneGeometry::default() }),
        (None, false) => None,
    };
    let problem = ShapingProblem::new(medium, geometry, sh.second_mask, sh.weights).stage("optimize")?;
    for w in &problem.warnings {
        eprintln!("warning: {w}");
    }
    let mut problem = problem.value;
    let opts = OptimizeOptions { phases: sh.phases, ..OptimizeOptions::default() };
    let result = optimize_masks(&problem, sh.budget, opts).stage("optimize")?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let result = result.value;
    let mut dir = ArtifactDir::create(&cfg.output)?;
    dir.write_text("config.toml", &cfg.to_toml())?;
    dir.write_text("mask_d1.txt", &result.d1.to_text())?;
    if let Some(d2) = &result.d2 {
        dir.write_text("mask_d2.txt", &d2.to_text())?;
    }
    let trace: String = result.trace.iter().enumerate().map(|(i, v)| format!("{i},{v:e}\n")).collect();
    dir.write_text("trace.csv", &format!("step,objective\n{trace}"))?;
    problem.set_masks(result.d1, result.d2).stage("optimize")?;
    let pbr = peak_to_background(&problem);
    dir.write_json("peak_to_background.json", &pbr)?;
    println!("objective={:e}", result.trace.last().copied().unwrap_or(0.0));
    println!("peak_to_background_position={:e}", pbr.position);
    println!("peak_to_background_momentum={:e}", pbr.momentum);
    println!("state={}", dir.finish()?);
    Ok(())
}

fn plateau(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.plateau.clone().ok_or_else(|| CliError::Config("missing [plateau] section".into()))?;
    let curve = plateau_curve(&spec).stage("plateau")?;
    let check = plateau_check(&spec).stage("plateau")?;
    let mut dir = ArtifactDir::create(&cfg.output)?;
    dir.write_text("config.toml", &cfg.to_toml())?;
    dir.write_json("plateau.json", &curve)?;
    dir.write_text("plateau.csv", &curve_csv(&curve))?;
    dir.write_json("plateau_check.json", &check)?;
    print!("{}", curve_csv(&curve));
    println!("plateaued={} separation={:e}", check.plateaued, check.separation);
    println!("state={}", dir.finish()?);
    Ok(())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config } => {
            let (scores, state) = pipeline::simulate(&RunConfig::load(&config)?)?;
            println!("score2={:e}\nscore3={:e}", scores.score2, scores.score3);
            println!("state={state}");
        }
        Command::Acquire { config } => println!("state={}", pipeline::acquire(&RunConfig::load(&config)?)?),
        Command::Calibrate { dark, out, threshold } => calibrate(&dark, &out, threshold)?,
        Command::AnalyzeEpr { position, momentum, optics, noise_window } => {
            analyze_epr(&position, &momentum, optics.as_deref(), noise_window)?
        }
        Command::Certify { position, momentum, intensity, hot_pixels, d, spacing } => {
            certify(&position, &momentum, intensity.as_deref(), hot_pixels.as_deref(), d, spacing)?
        }
        Command::Optimize { config } => optimize(&RunConfig::load(&config)?)?,
        Command::Plateau { config } => plateau(&RunConfig::load(&config)?)?,
        Command::Run { config } => {
            let out = pipeline::run_pipeline(&RunConfig::load(&config)?)?;
            let s = &out.summary;
            if let Some(e) = &s.epr {
                println!("epr_product={:e} violated={}", e.product, e.violated);
            }
            match &s.witness {
                Some(w) => println!("f_tilde={:e} certified_r={}", w.f_tilde, w.certified_r),
                None => println!("f_tilde=none certified_r=0"),
            }
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!("state={}", out.state_hash);
        }
        Command::EmitFigures { run } => {
            for p in emit_figures(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = with_workers(cli.workers, || execute(cli.command)).and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
