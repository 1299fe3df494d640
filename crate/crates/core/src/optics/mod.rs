//! Mode bases, canonical transfer matrices and scattering-medium models.

mod fourier;
mod measure;
mod medium;

use std::io::{Read, Write};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use fourier::{dft_matrix, free_space_kernel, Propagator};
pub use measure::{measure_tm, MeasuredTm, TmNoise};
pub use medium::{synth_medium, MediumKind, MediumSpec};

use crate::io;
use crate::linalg::CMatrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Position,
    Momentum,
}

impl Plane {
    pub fn conjugate(self) -> Self {
        match self {
            Plane::Position => Plane::Momentum,
            Plane::Momentum => Plane::Position,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Plane::Position => 0,
            Plane::Momentum => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Plane::Position),
            1 => Ok(Plane::Momentum),
            t => Err(Error::Format(format!("unknown plane tag {t}"))),
        }
    }
}

/// A rectangular grid of discrete spatial modes, linearly ordered row-major.
///
/// Centered coordinates put the origin on mode `(width / 2, height / 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeGrid {
    pub width: usize,
    pub height: usize,
    /// Physical mode spacing: meters for position planes, 1/m for momentum planes.
    pub pitch: f64,
    pub plane: Plane,
}

impl ModeGrid {
    pub fn new(width: usize, height: usize, pitch: f64, plane: Plane) -> Result<Self> {
        let grid = Self { width, height, pitch, plane };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid(format!("{}x{} grid", self.width, self.height)));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(Error::InvalidGrid(format!("pitch {}", self.pitch)));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        debug_assert!(col < self.width && row < self.height);
        row * self.width + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn center(&self) -> (usize, usize) {
        (self.width / 2, self.height / 2)
    }

    pub fn center_index(&self) -> usize {
        let (cx, cy) = self.center();
        self.index(cx, cy)
    }

    /// Centered integer coordinates of a mode.
    pub fn centered(&self, index: usize) -> (i64, i64) {
        let (x, y) = self.coords(index);
        let (cx, cy) = self.center();
        (x as i64 - cx as i64, y as i64 - cy as i64)
    }

    /// Mode `(-x, -y)` modulo the grid, in centered coordinates.
    pub fn parity(&self, index: usize) -> usize {
        let (x, y) = self.coords(index);
        let (cx, cy) = self.center();
        let px = (2 * cx + self.width - x) % self.width;
        let py = (2 * cy + self.height - y) % self.height;
        self.index(px, py)
    }

    /// The Fourier-conjugate grid: same shape, reciprocal pitch `2π / (width · pitch)`.
    pub fn conjugate(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pitch: 2.0 * std::f64::consts::PI / (self.width as f64 * self.pitch),
            plane: self.plane.conjugate(),
        }
    }

    fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u32(w, self.width as u32)?;
        io::write_u32(w, self.height as u32)?;
        io::write_f64(w, self.pitch)?;
        io::write_u8(w, self.plane.tag())
    }

    fn read<R: Read>(r: &mut R) -> Result<Self> {
        let width = io::read_u32(r)? as usize;
        let height = io::read_u32(r)? as usize;
        let pitch = io::read_f64(r)?;
        let plane = Plane::from_tag(io::read_u8(r)?)?;
        Self::new(width, height, pitch, plane)
    }
}

/// Complex linear map from the modes of `in_grid` to the modes of `out_grid`.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    entries: CMatrix,
    in_grid: ModeGrid,
    out_grid: ModeGrid,
}

const TM_MAGIC: &[u8; 8] = b"ETMX0001";

impl TransferMatrix {
    pub fn new(entries: CMatrix, in_grid: ModeGrid, out_grid: ModeGrid) -> Result<Self> {
        in_grid.validate()?;
        out_grid.validate()?;
        if entries.dim() != (out_grid.modes(), in_grid.modes()) {
            return Err(Error::ShapeMismatch(format!(
                "entries {:?} vs grids {} out x {} in",
                entries.dim(),
                out_grid.modes(),
                in_grid.modes()
            )));
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidParameter("non-finite transfer matrix entry".into()));
        }
        Ok(Self { entries, in_grid, out_grid })
    }

    pub fn identity(grid: ModeGrid) -> Self {
        Self { entries: crate::linalg::identity(grid.modes()), in_grid: grid, out_grid: grid }
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn in_grid(&self) -> ModeGrid {
        self.in_grid
    }

    pub fn out_grid(&self) -> ModeGrid {
        self.out_grid
    }

    /// `self · rhs`.
    pub fn then_after(&self, rhs: &TransferMatrix) -> Result<TransferMatrix> {
        if self.in_grid.modes() != rhs.out_grid.modes() {
            return Err(Error::ShapeMismatch("cannot chain transfer matrices".into()));
        }
        TransferMatrix::new(self.entries.dot(&rhs.entries), rhs.in_grid, self.out_grid)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_magic(w, TM_MAGIC)?;
        self.in_grid.write(w)?;
        self.out_grid.write(w)?;
        let mut flat = Vec::with_capacity(self.entries.len() * 2);
        for z in self.entries.iter() {
            flat.push(z.re);
            flat.push(z.im);
        }
        io::write_f64_slice(w, &flat)
    }

    /// Reads a container and leaves any trailing bytes in the reader.
    pub fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, TM_MAGIC)?;
        let in_grid = ModeGrid::read(r)?;
        let out_grid = ModeGrid::read(r)?;
        let (rows, cols) = (out_grid.modes(), in_grid.modes());
        let flat = io::read_f64_vec(r, rows * cols * 2)?;
        let entries = Array2::from_shape_vec(
            (rows, cols),
            flat.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect(),
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(entries, in_grid, out_grid)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let tm = Self::read_body(r)?;
        io::expect_eof(r)?;
        Ok(tm)
    }
}
