use std::f64::consts::TAU;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{dft_matrix, free_space_kernel, ModeGrid, Plane, TransferMatrix};
use crate::linalg::{mass, scale_columns};
use crate::rng::{domain, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum MediumKind {
    /// No scattering: the bare Fourier lens between the SLM and the camera.
    Clear,
    /// A single random phase screen conjugate to the SLM plane.
    ThinPhase,
    /// Dense i.i.d. circular complex Gaussian matrix.
    ThickIidGaussian,
    /// Random phase screens separated by free-space propagation.
    MultiScreen { screens: usize, spacing: f64 },
}

/// Recipe for a synthetic scattering medium. A fixed seed makes the
/// generated matrix bit-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediumSpec {
    pub kind: MediumKind,
    pub seed: u64,
    /// SLM-side (input) grid, position plane.
    pub in_grid: ModeGrid,
    /// Camera-side grid for the thick model; other kinds use the conjugate of `in_grid`.
    #[serde(default)]
    pub out_grid: Option<ModeGrid>,
    pub wavelength: f64,
}

impl MediumSpec {
    pub fn new(kind: MediumKind, seed: u64, in_grid: ModeGrid, wavelength: f64) -> Self {
        Self { kind, seed, in_grid, out_grid: None, wavelength }
    }

    fn validate(&self) -> Result<()> {
        self.in_grid.validate()?;
        if self.in_grid.plane != Plane::Position {
            return Err(Error::InvalidGrid("medium input grid must be a position plane".into()));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::InvalidParameter(format!("wavelength {}", self.wavelength)));
        }
        match self.kind {
            MediumKind::ThickIidGaussian => {
                if let Some(g) = self.out_grid {
                    g.validate()?;
                }
            }
            MediumKind::MultiScreen { screens, spacing } => {
                if screens == 0 || !(spacing > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "multi-screen medium needs screens >= 1 and spacing > 0, got {screens} and {spacing}"
                    )));
                }
            }
            MediumKind::Clear | MediumKind::ThinPhase => {}
        }
        Ok(())
    }

    /// Phases of each diagonal screen, in propagation order.
    pub fn phase_screens(&self) -> Vec<Vec<f64>> {
        let count = match self.kind {
            MediumKind::ThinPhase => 1,
            MediumKind::MultiScreen { screens, .. } => screens,
            MediumKind::Clear | MediumKind::ThickIidGaussian => 0,
        };
        (0..count)
            .map(|s| {
                let mut rng = stream(self.seed, domain::SCREENS, s as u64);
                (0..self.in_grid.modes()).map(|_| rng.random::<f64>() * TAU).collect()
            })
            .collect()
    }
}

fn phasors(phases: &[f64]) -> Vec<Complex64> {
    phases.iter().map(|&p| Complex64::from_polar(1.0, p)).collect()
}

/// Builds the transmission matrix from SLM macro-pixels to the camera's
/// Fourier (momentum) plane.
///
/// - `Clear`: `T = F`.
/// - `ThinPhase`: `T = F · D_med`, so `F · T` is the parity permutation times
///   a diagonal.
/// - `MultiScreen`: `T = F · D_s · P · … · P · D_1`.
/// - `ThickIidGaussian`: i.i.d. circular Gaussian entries scaled to unit mean
///   squared singular value.
pub fn synth_medium(spec: &MediumSpec) -> Result<TransferMatrix> {
    spec.validate()?;
    let grid = spec.in_grid;
    let fourier = dft_matrix(grid)?;
    match spec.kind {
        MediumKind::Clear => Ok(fourier),
        MediumKind::ThinPhase => {
            let mut t = fourier.entries().clone();
            scale_columns(&mut t, &phasors(&spec.phase_screens()[0]));
            TransferMatrix::new(t, grid, fourier.out_grid())
        }
        MediumKind::MultiScreen { spacing, .. } => {
            let propagator = free_space_kernel(grid, spacing, spec.wavelength)?;
            let screens = spec.phase_screens();
            let mut acc = Array2::from_diag(&ndarray::Array1::from(phasors(&screens[0])));
            for phases in &screens[1..] {
                acc = propagator.matrix.entries().dot(&acc);
                let d = phasors(phases);
                for (mut row, s) in acc.rows_mut().into_iter().zip(&d) {
                    row.mapv_inplace(|z| z * s);
                }
            }
            TransferMatrix::new(fourier.entries().dot(&acc), grid, fourier.out_grid())
        }
        MediumKind::ThickIidGaussian => {
            let out_grid = spec.out_grid.unwrap_or_else(|| grid.conjugate());
            let (rows, cols) = (out_grid.modes(), grid.modes());
            let mut rng = stream(spec.seed, domain::MEDIUM, 0);
            let mut t = Array2::from_shape_simple_fn((rows, cols), || {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
            });
            // Σσ² = ‖T‖²_F, spread over min(rows, cols) singular values.
            let mean_sq_sv = mass(t.view()) / rows.min(cols) as f64;
            t.mapv_inplace(|z| z / mean_sq_sv.sqrt());
            TransferMatrix::new(t, grid, out_grid)
        }
    }
}
