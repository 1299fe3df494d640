use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mode grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("two-photon state is not normalized (total probability {0})")]
    NotNormalized(f64),
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("pixel ({0}, {1}) is masked")]
    MaskedPixel(usize, usize),
    #[error("not enough usable pixels: requested {requested}, found {found}")]
    InsufficientPixels { requested: usize, found: usize },
    #[error("correlation matrix has no counts")]
    ZeroCounts,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-fatal conditions raised by an operation.
#[derive(Clone, Debug, PartialEq)]
pub enum Warning {
    /// Propagation distance exceeds the critical sampling distance of the grid.
    Aliasing { distance: f64, critical: f64 },
    /// Position correlation width smaller than the grid pitch.
    UnderResolved { sigma_r: f64, pitch: f64 },
    /// The focus row of the transmission matrix is identically zero.
    ZeroFocusRow(usize),
    /// Output modes whose reference intensity vanished during TM measurement.
    UnreliableRows(Vec<usize>),
    /// Fewer dark frames than recommended for cross-talk characterization.
    FewDarkFrames { frames: usize, recommended: usize },
    /// Significant dark coincidences found beyond the ±3 pixel support.
    CrosstalkSupportExceeded { dx: i64, dy: i64, sigmas: f64 },
    /// Cross-talk scale fell back to the global ratio for this many pixels.
    AlphaFallback { pixels: usize },
    /// Cross-talk scale could not be determined at all; no correction applied.
    AlphaUndetermined,
    /// Reference-ring coincidences dropped from the cross-talk scale fit as genuine correlations.
    ReferenceEntriesExcluded { entries: usize },
    /// The dark reference shows no significant cross-talk; no correction applied.
    CrosstalkInsignificant { sigmas: f64 },
    /// No significant peak; width estimated from the envelope.
    ApproximateWidth,
    /// Optimization stopped because the evaluation budget ran out.
    BudgetExhausted { evaluations: usize },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::Aliasing { distance, critical } => write!(
                f,
                "propagation distance {distance:e} m exceeds critical sampling distance {critical:e} m"
            ),
            Warning::UnderResolved { sigma_r, pitch } => {
                write!(f, "sigma_r {sigma_r:e} m below grid pitch {pitch:e} m")
            }
            Warning::ZeroFocusRow(p) => write!(f, "transmission matrix row {p} is zero"),
            Warning::UnreliableRows(rows) => write!(f, "{} unreliable output rows", rows.len()),
            Warning::FewDarkFrames { frames, recommended } => {
                write!(f, "only {frames} dark frames (recommended {recommended})")
            }
            Warning::CrosstalkSupportExceeded { dx, dy, sigmas } => {
                write!(f, "dark coincidences at offset ({dx}, {dy}) at {sigmas:.1} sigma")
            }
            Warning::AlphaFallback { pixels } => {
                write!(f, "cross-talk scale fell back to global ratio for {pixels} pixels")
            }
            Warning::AlphaUndetermined => write!(f, "cross-talk scale undetermined"),
            Warning::ReferenceEntriesExcluded { entries } => {
                write!(f, "{entries} reference coincidences above the cross-talk level left out of the scale fit")
            }
            Warning::CrosstalkInsignificant { sigmas } => {
                write!(f, "dark cross-talk only {sigmas:.1} sigma above zero, not corrected")
            }
            Warning::ApproximateWidth => write!(f, "no significant peak, envelope width used"),
            Warning::BudgetExhausted { evaluations } => {
                write!(f, "evaluation budget exhausted after {evaluations} evaluations")
            }
        }
    }
}

/// A value together with the warnings raised while computing it.
#[derive(Clone, Debug)]
pub struct Flagged<T> {
    pub value: T,
    pub warnings: Vec<Warning>,
}

impl<T> Flagged<T> {
    pub fn clean(value: T) -> Self {
        Self { value, warnings: Vec::new() }
    }

    pub fn with(value: T, warnings: Vec<Warning>) -> Self {
        Self { value, warnings }
    }

    pub fn into_value(self) -> T {
        self.value
    }
}
