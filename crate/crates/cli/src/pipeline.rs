//! Stage-by-stage execution of a configured run.

use ndarray::Array2;
use qscatter::calibration::{
    characterize_crosstalk, correct_crosstalk, find_hot_pixels, kernel_table, estimate_kernel, CrosstalkReference,
    HotPixelMask,
};
use qscatter::certify::{correlation_matrix, fidelity_bound, select_pixel_set, CorrelationMatrix, PixelSet, WitnessReport};
use qscatter::epr::{analyze, EprReport, FitOptions};
use qscatter::jpd::{accumulate_jpd, project_minus, project_sum, Jpd};
use qscatter::optics::{measure_tm, synth_medium, MediumKind, MediumSpec, ModeGrid, TransferMatrix};
use qscatter::spadsim::{dark_stack, simulate_frames, FrameStack};
use qscatter::twophoton::{condition_scores, correction_mask, input_state, propagate, Basis, InputSpec, PhaseMask, TwoPhotonState};
use qscatter::{Flagged, Warning};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Scenario};
use crate::{derive_seed, read_file, ArtifactDir, CliError, StageExt};

pub fn basis_name(b: Basis) -> &'static str {
    match b {
        Basis::Position => "position",
        Basis::Momentum => "momentum",
    }
}

/// Row-per-line CSV of a 2D array.
pub fn grid_csv(img: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in img.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_grid_csv(text: &str) -> Result<Array2<f64>, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}"))).collect())
        .collect::<Result<_, _>>()?;
    let w = rows.first().map_or(0, Vec::len);
    if w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err("ragged or empty grid".into());
    }
    Array2::from_shape_vec((rows.len(), w), rows.into_iter().flatten().collect()).map_err(|e| e.to_string())
}

fn image(values: &[f64], width: usize, height: usize) -> Array2<f64> {
    Array2::from_shape_fn((height, width), |(y, x)| values[y * width + x])
}

#[derive(Default)]
pub struct WarningLog(pub Vec<String>);

impl WarningLog {
    fn take<T>(&mut self, stage: &str, flagged: Flagged<T>) -> T {
        self.0.extend(flagged.warnings.iter().map(|w: &Warning| format!("{stage}: {w}")));
        flagged.value
    }
}

pub struct Simulated {
    pub grid: ModeGrid,
    pub medium: TransferMatrix,
    pub mask: PhaseMask,
    pub states: Vec<(Basis, TwoPhotonState)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub score2: f64,
    pub score3: f64,
}

fn load_medium(cfg: &RunConfig, grid: ModeGrid) -> Result<TransferMatrix, CliError> {
    if let Some(path) = &cfg.medium.file {
        let bytes = read_file(path)?;
        let t = TransferMatrix::read_from(&mut bytes.as_slice()).stage("medium")?;
        if t.in_grid().modes() != grid.modes() {
            return Err(CliError::Config(format!(
                "medium file has {} inputs, grid has {} modes",
                t.in_grid().modes(),
                grid.modes()
            )));
        }
        return Ok(t);
    }
    let kind = if cfg.scenario == Scenario::NoMedium { MediumKind::Clear } else { cfg.medium.kind };
    let seed = cfg.medium.seed.unwrap_or_else(|| derive_seed(cfg.seed, "medium"));
    synth_medium(&MediumSpec::new(kind, seed, grid, cfg.wavelength)).stage("medium")
}

/// Medium, SLM mask and the propagated states in every requested basis.
fn simulate_into(cfg: &RunConfig, dir: &mut ArtifactDir, log: &mut WarningLog) -> Result<Simulated, CliError> {
    let grid = cfg.grid.mode_grid()?;
    let medium = load_medium(cfg, grid)?;
    dir.write_with("medium.tm", "medium", |b| medium.write_to(b))?;
    dir.log("medium ready");

    let mask = if cfg.scenario == Scenario::MediumCorrected {
        let measured = log.take("mask", measure_tm(&medium, grid, grid.center_index(), None).stage("mask")?);
        log.take("mask", correction_mask(&measured.matrix, None).stage("mask")?)
    } else {
        PhaseMask::flat(grid)
    };
    dir.write_text("mask.txt", &mask.to_text())?;

    let source = log.take("source", input_state(grid, cfg.source).stage("source")?);
    let mut states = Vec::new();
    for &basis in &cfg.bases {
        let out = propagate(&source, &medium, &mask, basis).stage("propagate")?.state;
        dir.write_with(&format!("state_{}.psi", basis_name(basis)), "propagate", |b| out.write_to(b))?;
        states.push((basis, out));
    }
    dir.log("states propagated");
    Ok(Simulated { grid, medium, mask, states })
}

/// Condition scores of the medium and mask alone, evaluated on a perfectly
/// position-correlated input rather than on the configured source.
fn scores_of(sim: &Simulated) -> Result<Scores, CliError> {
    let ideal = input_state(sim.grid, InputSpec::Identity).stage("source")?.value;
    let out = |b| propagate(&ideal, &sim.medium, &sim.mask, b).stage("propagate").map(|p| p.state);
    let s = condition_scores(&out(Basis::Momentum)?, &out(Basis::Position)?).stage("propagate")?;
    Ok(Scores { score2: s.score2, score3: s.score3 })
}

pub struct Acquired {
    pub light: Vec<(Basis, FrameStack)>,
    pub dark: FrameStack,
}

fn acquire_into(cfg: &RunConfig, sim: &Simulated, dir: &mut ArtifactDir, keep: bool) -> Result<Acquired, CliError> {
    let dark_sensor = cfg.sensor.sensor(&cfg.grid, derive_seed(cfg.seed, "dark"))?;
    let dark = dark_stack(&dark_sensor, cfg.dark_frames()).stage("dark")?;
    if keep {
        dir.write_with("frames_dark.bin", "dark", |b| dark.write_to(b))?;
    }
    dir.log("dark frames acquired");
    let mut light = Vec::new();
    for (basis, state) in &sim.states {
        let name = basis_name(*basis);
        let sensor = cfg.sensor.sensor(&cfg.grid, derive_seed(cfg.seed, &format!("frames-{name}")))?;
        let stack = simulate_frames(state, &sensor, cfg.frames).stage("acquire")?;
        if keep {
            dir.write_with(&format!("frames_{name}.bin"), "acquire", |b| stack.write_to(b))?;
        }
        dir.log(format!("{name} frames acquired"));
        light.push((*basis, stack));
    }
    Ok(Acquired { light, dark })
}

pub struct Calibration {
    pub hot: HotPixelMask,
    pub reference: Option<CrosstalkReference>,
}

fn calibrate_into(
    cfg: &RunConfig,
    dark: &FrameStack,
    dir: &mut ArtifactDir,
    log: &mut WarningLog,
) -> Result<Calibration, CliError> {
    let hot = outlier_mask(find_hot_pixels(dark, cfg.calibration.hot_pixel_threshold).stage("calibrate")?, log);
    dir.write_text("hot_pixels.txt", &hot.to_text())?;
    let reference = if cfg.calibration.correct_crosstalk {
        let r = log.take("calibrate", characterize_crosstalk(dark).stage("calibrate")?);
        dir.write_with("crosstalk.ref", "calibrate", |b| r.write_to(b))?;
        dir.write_text("crosstalk_kernel.csv", &grid_csv(&kernel_table(&estimate_kernel(&r))))?;
        Some(r)
    } else {
        None
    };
    dir.log("calibration done");
    Ok(Calibration { hot, reference })
}

/// The threshold is relative to the brightest dark pixel, so a sensor
/// without outliers puts most pixels above it. Such a mask is discarded.
pub fn outlier_mask(mask: HotPixelMask, log: &mut WarningLog) -> HotPixelMask {
    if 2 * mask.count() > mask.masked.len() {
        log.0.push(format!("calibrate: {} of {} pixels above threshold, no hot pixels masked", mask.count(), mask.masked.len()));
        HotPixelMask { masked: vec![false; mask.masked.len()], ..mask }
    } else {
        mask
    }
}

/// Accidental-subtracted, cross-talk-corrected and hot-pixel-masked JPD.
fn reduce(stack: &FrameStack, cal: &Calibration, log: &mut WarningLog) -> Result<Jpd, CliError> {
    let raw = accumulate_jpd(stack).stage("jpd")?;
    let mut jpd = match &cal.reference {
        Some(r) => log.take("jpd", correct_crosstalk(&raw, r, &stack.mean_image()).stage("jpd")?),
        None => raw,
    };
    jpd.apply_mask(&cal.hot.masked).stage("jpd")?;
    Ok(jpd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frames: usize,
    pub f_tilde: f64,
    pub certified_r: usize,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("frames,f_tilde,certified_r\n");
    for p in points {
        out.push_str(&format!("{},{:e},{}\n", p.frames, p.f_tilde, p.certified_r));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub seed: u64,
    pub frames: usize,
    pub scores: Scores,
    pub epr: Option<EprReport>,
    pub witness: Option<WitnessReport>,
    pub curve: Vec<CurvePoint>,
    pub hot_pixels: usize,
    pub warnings: Vec<String>,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub state_hash: String,
}

fn witness_for(
    pos: &Jpd,
    mom: &Jpd,
    set: &PixelSet,
) -> Result<(CorrelationMatrix, CorrelationMatrix, Option<WitnessReport>), CliError> {
    let pm = correlation_matrix(pos, set, Basis::Position).stage("certify")?;
    let mm = correlation_matrix(mom, set, Basis::Momentum).stage("certify")?;
    let report = match fidelity_bound(&pm, &mm) {
        Ok(r) => Some(r),
        Err(qscatter::Error::ZeroCounts) => None,
        Err(source) => return Err(CliError::Stage { stage: "certify", source }),
    };
    Ok((pm, mm, report))
}

fn default_curve(frames: usize) -> Vec<usize> {
    let mut pts: Vec<usize> = [64, 16, 4, 1].iter().map(|d| frames / d).filter(|&n| n >= 2).collect();
    pts.dedup();
    pts
}

/// Full pipeline: medium → mask → propagation → frames → calibration → JPD
/// → projections → EPR → correlation matrices → witness.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let mut dir = ArtifactDir::create(&cfg.output)?;
    let mut log = WarningLog::default();
    dir.log(format!("run started, scenario {:?}", cfg.scenario));
    dir.write_text("config.toml", &cfg.to_toml())?;

    let sim = simulate_into(cfg, &mut dir, &mut log)?;
    let scores = scores_of(&sim)?;
    let acq = acquire_into(cfg, &sim, &mut dir, cfg.keep_frames)?;
    let cal = calibrate_into(cfg, &acq.dark, &mut dir, &mut log)?;

    let (w, h) = (cfg.grid.width, cfg.grid.height);
    let mut jpds = Vec::new();
    for (basis, stack) in &acq.light {
        let name = basis_name(*basis);
        let jpd = reduce(stack, &cal, &mut log)?;
        dir.write_with(&format!("jpd_{name}.jpd"), "jpd", |b| jpd.write_to(b))?;
        dir.write_text(&format!("intensity_{name}.csv"), &grid_csv(&image(&stack.mean_image(), w, h)))?;
        dir.write_text(&format!("projection_{name}_sum.csv"), &project_sum(&jpd).to_csv())?;
        dir.write_text(&format!("projection_{name}_minus.csv"), &project_minus(&jpd).to_csv())?;
        jpds.push((*basis, jpd, stack));
    }
    dir.log("JPDs reduced");
    let find = |b: Basis| jpds.iter().find(|j| j.0 == b);

    let mut summary = RunSummary {
        scenario: cfg.scenario,
        seed: cfg.seed,
        frames: cfg.frames,
        scores,
        epr: None,
        witness: None,
        curve: Vec::new(),
        hot_pixels: cal.hot.count(),
        warnings: Vec::new(),
    };

    if let (Some(pos), Some(mom)) = (find(Basis::Position), find(Basis::Momentum)) {
        let opts = FitOptions { noise_window: cfg.calibration.noise_window, ..FitOptions::default() };
        let epr = log.take("epr", analyze(&project_minus(&pos.1), &project_sum(&mom.1), &cfg.optics(), opts).stage("epr")?);
        dir.write_text("epr.txt", &epr.to_text())?;
        summary.epr = Some(epr);
        dir.log("EPR analysis done");

        let intensity = image(&pos.2.mean_image(), w, h);
        let set = select_pixel_set(intensity.view(), cfg.pixel_set.d, cfg.pixel_set.spacing, Some(&cal.hot))
            .stage("certify")?;
        dir.write_json("pixel_set.json", &set)?;
        let (pm, mm, report) = witness_for(&pos.1, &mom.1, &set)?;
        dir.write_text("matrix_position.csv", &pm.to_csv())?;
        dir.write_text("matrix_momentum.csv", &mm.to_csv())?;
        if let Some(r) = &report {
            dir.write_text("witness.txt", &r.to_text())?;
        } else {
            log.0.push("certify: correlation matrices have no counts".into());
        }
        summary.witness = report;
        dir.log("witness computed");

        let points = cfg.curve_points.clone().unwrap_or_else(|| default_curve(cfg.frames));
        for n in points {
            let (f_tilde, certified_r) = if n == cfg.frames {
                summary.witness.as_ref().map_or((0.0, 0), |r| (r.f_tilde, r.certified_r))
            } else {
                let mut quiet = WarningLog::default();
                let p = reduce(&pos.2.prefix(n).stage("curve")?, &cal, &mut quiet)?;
                let m = reduce(&mom.2.prefix(n).stage("curve")?, &cal, &mut quiet)?;
                witness_for(&p, &m, &set)?.2.map_or((0.0, 0), |r| (r.f_tilde, r.certified_r))
            };
            summary.curve.push(CurvePoint { frames: n, f_tilde, certified_r });
        }
        dir.write_text("dimension_vs_frames.csv", &curve_csv(&summary.curve))?;
        dir.log("curve computed");
    }

    summary.warnings = log.0;
    dir.write_json("summary.json", &summary)?;
    let state_hash = dir.finish()?;
    Ok(RunOutcome { summary, state_hash })
}

/// Medium, mask and propagated states only.
pub fn simulate(cfg: &RunConfig) -> Result<(Scores, String), CliError> {
    cfg.validate()?;
    let mut dir = ArtifactDir::create(&cfg.output)?;
    let mut log = WarningLog::default();
    dir.write_text("config.toml", &cfg.to_toml())?;
    let sim = simulate_into(cfg, &mut dir, &mut log)?;
    let scores = scores_of(&sim)?;
    dir.write_json("scores.json", &scores)?;
    Ok((scores, dir.finish()?))
}

/// Simulation plus light and dark frame stacks, all written out.
pub fn acquire(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let mut dir = ArtifactDir::create(&cfg.output)?;
    let mut log = WarningLog::default();
    dir.write_text("config.toml", &cfg.to_toml())?;
    let sim = simulate_into(cfg, &mut dir, &mut log)?;
    acquire_into(cfg, &sim, &mut dir, true)?;
    dir.finish()
}
