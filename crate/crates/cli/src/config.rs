//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use qscatter::epr::OpticalCalibration;
use qscatter::montecarlo::PlateauSpec;
use qscatter::optics::{MediumKind, ModeGrid, Plane};
use qscatter::shaping::{ObjectiveWeights, TwoPlaneGeometry};
use qscatter::spadsim::{CrosstalkKernel, HotPixel, SensorSpec};
use qscatter::twophoton::{Basis, GaussianPairSpec, InputSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    NoMedium,
    MediumFlat,
    MediumCorrected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    /// Macro-pixel pitch in the crystal/SLM plane (m).
    pub pitch: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { width: 16, height: 16, pitch: 4.5e-6 }
    }
}

impl GridConfig {
    pub fn mode_grid(&self) -> Result<ModeGrid, CliError> {
        Ok(ModeGrid::new(self.width, self.height, self.pitch, Plane::Position)?)
    }
}

/// Medium recipe; the seed is derived from the run seed unless given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    pub kind: MediumKind,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Loads a stored transfer matrix instead of synthesizing one.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

impl Default for MediumConfig {
    fn default() -> Self {
        Self { kind: MediumKind::ThinPhase, seed: None, file: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentialCrosstalk {
    pub p1: f64,
    pub decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub pair_rate: f64,
    #[serde(default)]
    pub singles_rate: f64,
    #[serde(default)]
    pub dark_rate: f64,
    #[serde(default)]
    pub hot_pixels: Vec<HotPixel>,
    #[serde(default)]
    pub crosstalk: Option<ExponentialCrosstalk>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            pair_rate: 0.05,
            singles_rate: 0.5,
            dark_rate: 1e-3,
            hot_pixels: Vec::new(),
            crosstalk: Some(ExponentialCrosstalk { p1: 0.01, decay: 0.8 }),
        }
    }
}

impl SensorConfig {
    pub fn sensor(&self, grid: &GridConfig, seed: u64) -> Result<SensorSpec, CliError> {
        let crosstalk = match &self.crosstalk {
            Some(x) => CrosstalkKernel::exponential(x.p1, x.decay)?,
            None => CrosstalkKernel::none(),
        };
        let spec = SensorSpec {
            singles_rate: self.singles_rate,
            dark_rate: self.dark_rate,
            hot_pixels: self.hot_pixels.clone(),
            crosstalk,
            ..SensorSpec::ideal(grid.width, grid.height, self.pair_rate, seed)
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelSetConfig {
    pub d: usize,
    pub spacing: usize,
}

impl Default for PixelSetConfig {
    fn default() -> Self {
        Self { d: qscatter::certify::DEFAULT_DIMENSION, spacing: qscatter::certify::DEFAULT_SPACING }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Hot-pixel threshold as a fraction of the brightest dark pixel.
    pub hot_pixel_threshold: f64,
    pub correct_crosstalk: bool,
    /// Physical constants for converting widths. Defaults to values
    /// consistent with the simulated grid.
    #[serde(default)]
    pub optics: Option<OpticalCalibration>,
    pub noise_window: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            hot_pixel_threshold: 0.1,
            correct_crosstalk: true,
            optics: None,
            noise_window: qscatter::epr::DEFAULT_NOISE_WINDOW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingConfig {
    pub second_mask: bool,
    #[serde(default)]
    pub geometry: Option<TwoPlaneGeometry>,
    pub weights: ObjectiveWeights,
    pub budget: usize,
    pub phases: usize,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            second_mask: false,
            geometry: None,
            weights: ObjectiveWeights::default(),
            budget: 100_000,
            phases: qscatter::shaping::DEFAULT_PHASES,
        }
    }
}

fn default_source() -> InputSpec {
    InputSpec::Gaussian(GaussianPairSpec { sigma_r: 4.5e-6, sigma_k: 0.1 / 4.5e-6, amplitude: 1.0 })
}

fn default_frames() -> usize {
    1_000_000
}

fn default_bases() -> Vec<Basis> {
    vec![Basis::Position, Basis::Momentum]
}

fn default_wavelength() -> f64 {
    810e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    /// Mandatory: nothing is ever seeded from the clock.
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Dark frames for calibration; defaults to `frames`.
    #[serde(default)]
    pub dark_frames: Option<usize>,
    #[serde(default = "default_bases")]
    pub bases: Vec<Basis>,
    #[serde(default = "default_wavelength")]
    pub wavelength: f64,
    /// Keep the raw frame stacks in the run directory.
    #[serde(default)]
    pub keep_frames: bool,
    /// Frame counts (fractions of `frames`) for the dimension-versus-frames table.
    #[serde(default)]
    pub curve_points: Option<Vec<usize>>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_source")]
    pub source: InputSpec,
    #[serde(default)]
    pub medium: MediumConfig,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub pixel_set: PixelSetConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub shaping: ShapingConfig,
    #[serde(default)]
    pub plateau: Option<PlateauSpec>,
}

impl RunConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output = resolve(base, &cfg.output);
        if let Some(f) = &cfg.medium.file {
            cfg.medium.file = Some(resolve(base, f));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.grid.mode_grid().map_err(|e| CliError::Config(e.to_string()))?;
        if self.frames < 2 {
            return bad(format!("frames = {}", self.frames));
        }
        if self.dark_frames.is_some_and(|n| n < 2) {
            return bad("dark_frames must be at least 2".into());
        }
        if self.bases.is_empty() {
            return bad("no bases requested".into());
        }
        if !(self.wavelength > 0.0) {
            return bad(format!("wavelength {}", self.wavelength));
        }
        if let Some(f) = &self.medium.file {
            if !f.is_file() {
                return bad(format!("medium file {} does not exist", f.display()));
            }
        }
        if let Some(points) = &self.curve_points {
            if points.iter().any(|&n| n < 2 || n > self.frames) {
                return bad(format!("curve points must lie in 2..={}", self.frames));
            }
        }
        if self.scenario == Scenario::NoMedium && self.medium.file.is_some() {
            return bad("no_medium scenario cannot load a medium file".into());
        }
        self.sensor.sensor(&self.grid, 0).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(p) = &self.plateau {
            p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn dark_frames(&self) -> usize {
        self.dark_frames.unwrap_or(self.frames)
    }

    /// Width conversion constants. By default the camera pixel equals one
    /// grid mode in both bases, which fixes `λ·f = N·p²` for the Fourier lens.
    pub fn optics(&self) -> OpticalCalibration {
        self.calibration.optics.unwrap_or(OpticalCalibration {
            pixel_pitch: self.grid.pitch,
            magnification: 1.0,
            effective_focal_length: self.grid.width as f64 * self.grid.pitch * self.grid.pitch / self.wavelength,
            wavelength: self.wavelength,
        })
    }

    /// Serialized copy for the run directory. Paths are cut to their file
    /// names so the state hash does not depend on where the run lives.
    pub fn to_toml(&self) -> String {
        let mut cfg = self.clone();
        cfg.output = file_name(&cfg.output);
        cfg.medium.file = cfg.medium.file.as_deref().map(file_name);
        toml::to_string(&cfg).expect("config always serializes")
    }
}

fn file_name(p: &Path) -> PathBuf {
    p.file_name().map(PathBuf::from).unwrap_or_else(|| p.to_path_buf())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
