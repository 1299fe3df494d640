use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use super::{ModeGrid, TransferMatrix};
use crate::linalg::{adjoint, kron, unitarity_defect, CMatrix};
use crate::{Error, Result, Warning};

/// Unitary 1D DFT with centered frequencies and centered sample coordinates.
fn dft_1d(n: usize) -> CMatrix {
    let c = (n / 2) as f64;
    let norm = 1.0 / (n as f64).sqrt();
    Array2::from_shape_fn((n, n), |(u, x)| {
        let phase = -2.0 * PI * (u as f64 - c) * (x as f64 - c) / n as f64;
        Complex64::from_polar(norm, phase)
    })
}

/// Unitary, symmetric 2D discrete Fourier transform over `grid`.
///
/// `F · F` is the parity permutation `(x, y) → (-x, -y)` in centered
/// coordinates, modulo the grid. The output grid is the conjugate plane.
pub fn dft_matrix(grid: ModeGrid) -> Result<TransferMatrix> {
    grid.validate()?;
    let f = kron(dft_1d(grid.height).view(), dft_1d(grid.width).view());
    TransferMatrix::new(f, grid, grid.conjugate())
}

/// A free-space propagator and its numerical quality indicators.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub matrix: TransferMatrix,
    /// max |P·P† − 𝟙|.
    pub unitarity_defect: f64,
    /// `true` when the distance exceeds `N·pitch²/λ` on the smaller axis.
    pub aliased: bool,
    pub warnings: Vec<Warning>,
}

fn fresnel_1d(n: usize, pitch: f64, distance: f64, wavelength: f64) -> CMatrix {
    let f = dft_1d(n);
    let c = (n / 2) as f64;
    let span = n as f64 * pitch;
    let transfer: Vec<Complex64> = (0..n)
        .map(|u| {
            let fu = (u as f64 - c) / span;
            Complex64::from_polar(1.0, -PI * wavelength * distance * fu * fu)
        })
        .collect();
    let mut hf = f.clone();
    for (mut row, h) in hf.rows_mut().into_iter().zip(&transfer) {
        row.mapv_inplace(|z| z * h);
    }
    adjoint(f.view()).dot(&hf)
}

/// Paraxial (Fresnel transfer-function) propagator over `distance` on a
/// position-plane grid: `P = F† · diag(exp(−iπλd|f|²)) · F`.
pub fn free_space_kernel(grid: ModeGrid, distance: f64, wavelength: f64) -> Result<Propagator> {
    grid.validate()?;
    if !(distance > 0.0) || !(wavelength > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance {distance} and wavelength {wavelength} must be positive"
        )));
    }
    let px = fresnel_1d(grid.width, grid.pitch, distance, wavelength);
    let py = fresnel_1d(grid.height, grid.pitch, distance, wavelength);
    let p = kron(py.view(), px.view());
    let defect = unitarity_defect(px.view()) + unitarity_defect(py.view());
    let critical = grid.width.min(grid.height) as f64 * grid.pitch * grid.pitch / wavelength;
    let aliased = distance > critical;
    let warnings = if aliased { vec![Warning::Aliasing { distance, critical }] } else { vec![] };
    Ok(Propagator {
        matrix: TransferMatrix::new(p, grid, grid)?,
        unitarity_defect: defect,
        aliased,
        warnings,
    })
}
