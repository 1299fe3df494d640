//! Simulation and analysis of spatially entangled photon pairs transported
//! through a scattering medium.
//!
//! The crate follows the experimental chain end to end:
//!
//! - [`optics`]: mode grids, discrete Fourier and Fresnel transfer matrices,
//!   scattering-medium models and simulated transmission-matrix measurement.
//! - [`twophoton`]: two-photon wavefunctions, propagation through SLM + medium,
//!   phase-conjugation correction masks and refocusing scores.
//! - [`spadsim`]: synthetic binary SPAD camera frame streams.
//! - [`jpd`]: joint probability distribution estimation with accidental
//!   subtraction, sum/minus-coordinate projections.
//! - [`calibration`]: cross-talk characterization/removal, hot-pixel masks.
//! - [`epr`]: Gaussian width fits and the EPR separability criterion.
//! - [`certify`]: two-basis fidelity witness and certified entanglement dimension.
//! - [`shaping`]: coordinate-ascent phase-mask optimization for thick media.
//! - [`montecarlo`]: fidelity versus frame-count plateau study.

pub mod calibration;
pub mod certify;
pub mod epr;
mod error;
pub mod io;
pub mod jpd;
pub mod linalg;
pub mod montecarlo;
pub mod optics;
pub mod rng;
pub mod shaping;
pub mod spadsim;
pub mod twophoton;

pub use error::{Error, Flagged, Result, Warning};
