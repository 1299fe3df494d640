//! Discrete two-photon wavefunctions and their propagation through an SLM
//! followed by a scattering medium.
//!
//! Each photon picks up the SLM phase once, so a diagonal mask `D` enters as
//! `H Ψ Hᵗ` with `H = T·D`; for a perfectly correlated input (`Ψ = 𝟙`) this is
//! `T·D²·Tᵗ`.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::linalg::{congruence, mass, scale_columns, CMatrix};
use crate::optics::{dft_matrix, ModeGrid, Plane, TransferMatrix};
use crate::{Error, Flagged, Result, Warning};

#[derive(Clone, Debug)]
pub struct TwoPhotonState {
    psi: CMatrix,
    grid: ModeGrid,
}

impl TwoPhotonState {
    pub fn new(psi: CMatrix, grid: ModeGrid) -> Result<Self> {
        let n = grid.modes();
        if psi.dim() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "state is {:?}, grid has {n} modes",
                psi.dim()
            )));
        }
        Ok(Self { psi, grid })
    }

    pub fn psi(&self) -> &CMatrix {
        &self.psi
    }

    pub fn grid(&self) -> ModeGrid {
        self.grid
    }

    pub fn basis(&self) -> Plane {
        self.grid.plane
    }

    pub fn total_probability(&self) -> f64 {
        mass(self.psi.view())
    }

    /// |ψ|², the coincidence probability law over ordered mode pairs.
    pub fn probability(&self) -> Array2<f64> {
        self.psi.mapv(|z| z.norm_sqr())
    }

    /// Marginal single-photon detection probability per mode.
    pub fn marginal(&self) -> Vec<f64> {
        self.psi.rows().into_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum()).collect()
    }

    pub fn normalized(mut self) -> Result<Self> {
        let m = self.total_probability();
        if !(m > 0.0) {
            return Err(Error::NotNormalized(m));
        }
        self.psi.mapv_inplace(|z| z / m.sqrt());
        Ok(self)
    }

    pub fn symmetry_defect(&self) -> f64 {
        crate::linalg::max_abs_diff(self.psi.view(), self.psi.t())
    }

    /// Transfer-matrix container (square, both grids equal) followed by one
    /// basis tag byte: 0 = position, 1 = momentum.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        TransferMatrix::new(self.psi.clone(), self.grid, self.grid)?.write_to(w)?;
        io::write_u8(w, if self.grid.plane == Plane::Position { 0 } else { 1 })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let tm = TransferMatrix::read_body(r)?;
        let tag = io::read_u8(r)?;
        io::expect_eof(r)?;
        let mut grid = tm.out_grid();
        grid.plane = match tag {
            0 => Plane::Position,
            1 => Plane::Momentum,
            t => return Err(Error::Format(format!("unknown basis tag {t}"))),
        };
        Self::new(tm.into_entries(), grid)
    }
}

/// Parameters of the Gaussian SPDC wavefunction
/// `A·exp(−|r₁−r₂|²/4σ_r²)·exp(−|r₁+r₂|²σ_k²/4)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPairSpec {
    /// Position correlation width (m).
    pub sigma_r: f64,
    /// Momentum correlation width (1/m).
    pub sigma_k: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum InputSpec {
    /// Perfect position correlation at the macro-pixel scale, `Ψ = 𝟙/√n`.
    Identity,
    Gaussian(GaussianPairSpec),
}

pub fn input_state(grid: ModeGrid, spec: InputSpec) -> Result<Flagged<TwoPhotonState>> {
    grid.validate()?;
    let n = grid.modes();
    match spec {
        InputSpec::Identity => {
            let psi = Array2::from_diag_elem(n, Complex64::new(1.0 / (n as f64).sqrt(), 0.0));
            Ok(Flagged::clean(TwoPhotonState::new(psi, grid)?))
        }
        InputSpec::Gaussian(g) => {
            if !(g.sigma_r > 0.0) || !(g.sigma_k > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "sigma_r {} and sigma_k {} must be positive",
                    g.sigma_r, g.sigma_k
                )));
            }
            let pos: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let (x, y) = grid.centered(i);
                    (x as f64 * grid.pitch, y as f64 * grid.pitch)
                })
                .collect();
            let psi = Array2::from_shape_fn((n, n), |(a, b)| {
                let (x1, y1) = pos[a];
                let (x2, y2) = pos[b];
                let minus = (x1 - x2).powi(2) + (y1 - y2).powi(2);
                let plus = (x1 + x2).powi(2) + (y1 + y2).powi(2);
                let v = -minus / (4.0 * g.sigma_r * g.sigma_r) - plus * g.sigma_k * g.sigma_k / 4.0;
                Complex64::new(g.amplitude * v.exp(), 0.0)
            });
            let state = TwoPhotonState::new(psi, grid)?.normalized()?;
            let warnings = if g.sigma_r < grid.pitch {
                vec![Warning::UnderResolved { sigma_r: g.sigma_r, pitch: grid.pitch }]
            } else {
                vec![]
            };
            Ok(Flagged::with(state, warnings))
        }
    }
}

/// Phase pattern of a phase-only SLM, one phase per macro-pixel, wrapped to `[0, 2π)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMask {
    thetas: Vec<f64>,
    grid: ModeGrid,
}

impl PhaseMask {
    pub fn new(thetas: Vec<f64>, grid: ModeGrid) -> Result<Self> {
        if thetas.len() != grid.modes() {
            return Err(Error::ShapeMismatch(format!(
                "{} phases for {} macro-pixels",
                thetas.len(),
                grid.modes()
            )));
        }
        if thetas.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("non-finite phase".into()));
        }
        Ok(Self { thetas: thetas.into_iter().map(wrap_phase).collect(), grid })
    }

    pub fn flat(grid: ModeGrid) -> Self {
        Self { thetas: vec![0.0; grid.modes()], grid }
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn grid(&self) -> ModeGrid {
        self.grid
    }

    pub fn set(&mut self, k: usize, theta: f64) {
        self.thetas[k] = wrap_phase(theta);
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.thetas.iter().map(|&t| Complex64::from_polar(1.0, t)).collect()
    }

    pub fn offset(&self, c: f64) -> Self {
        Self { thetas: self.thetas.iter().map(|&t| wrap_phase(t + c)).collect(), grid: self.grid }
    }

    /// Plain-text phase array: one grid row per line, radians.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.thetas.chunks(self.grid.width) {
            let line: Vec<String> = row.iter().map(|t| format!("{t:.17e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, grid: ModeGrid) -> Result<Self> {
        let thetas = text
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("phase {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(thetas, grid)
    }
}

pub fn wrap_phase(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Camera in the Fourier plane of the medium (the plane `T` maps to).
    Momentum,
    /// Camera imaging the medium's output surface: `T → F·T`.
    Position,
}

#[derive(Clone, Debug)]
pub struct Propagated {
    pub state: TwoPhotonState,
    /// Σ|Ψ_out|² before renormalization.
    pub transmission: f64,
}

/// The single-photon system matrix `H = T·D` (momentum) or `F·T·D` (position).
pub fn system_matrix(medium: &TransferMatrix, mask: &PhaseMask, basis: Basis) -> Result<(CMatrix, ModeGrid)> {
    if mask.grid().modes() != medium.in_grid().modes() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} macro-pixels, medium has {} inputs",
            mask.grid().modes(),
            medium.in_grid().modes()
        )));
    }
    let mut h = medium.entries().clone();
    scale_columns(&mut h, &mask.phasors());
    match basis {
        Basis::Momentum => Ok((h, medium.out_grid())),
        Basis::Position => {
            let f = dft_matrix(medium.out_grid())?;
            Ok((f.entries().dot(&h), f.out_grid()))
        }
    }
}

/// `Ψ_out = H·Ψ_in·Hᵗ`, renormalized; the raw output mass is reported as
/// transmission.
pub fn propagate(
    psi_in: &TwoPhotonState,
    medium: &TransferMatrix,
    mask: &PhaseMask,
    basis: Basis,
) -> Result<Propagated> {
    if psi_in.grid().modes() != medium.in_grid().modes() {
        return Err(Error::ShapeMismatch(format!(
            "state has {} modes, medium has {} inputs",
            psi_in.grid().modes(),
            medium.in_grid().modes()
        )));
    }
    let (h, out_grid) = system_matrix(medium, mask, basis)?;
    let psi = congruence(h.view(), psi_in.psi().view());
    let transmission = mass(psi.view());
    let state = TwoPhotonState::new(psi, out_grid)?.normalized()?;
    Ok(Propagated { state, transmission })
}

/// Phase conjugation of one transmission-matrix row: `θ_k = arg(T*_pk)`.
/// `focus_mode` defaults to the center of the output grid.
pub fn correction_mask(tm: &TransferMatrix, focus_mode: Option<usize>) -> Result<Flagged<PhaseMask>> {
    let out = tm.out_grid();
    let p = focus_mode.unwrap_or_else(|| out.center_index());
    if p >= out.modes() {
        return Err(Error::InvalidParameter(format!("focus mode {p} outside output grid")));
    }
    let row = tm.entries().row(p);
    let mut grid = tm.in_grid();
    grid.plane = Plane::Position;
    if row.iter().all(|z| z.norm_sqr() == 0.0) {
        return Ok(Flagged::with(PhaseMask::flat(grid), vec![Warning::ZeroFocusRow(p)]));
    }
    let thetas = row.iter().map(|z| z.conj().arg()).collect();
    Ok(Flagged::clean(PhaseMask::new(thetas, grid)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionScores {
    /// Fraction of momentum-basis mass on exact parity pairs (sum coordinate 0).
    pub score2: f64,
    /// Fraction of position-basis mass on the diagonal (difference coordinate 0).
    pub score3: f64,
}

pub fn condition_scores(
    psi_out_momentum: &TwoPhotonState,
    psi_out_position: &TwoPhotonState,
) -> Result<ConditionScores> {
    let gm = psi_out_momentum.grid();
    let gp = psi_out_position.grid();
    if gm.modes() != gp.modes() || gm.width != gp.width {
        return Err(Error::ShapeMismatch("scores need both states on the same grid".into()));
    }
    let m = psi_out_momentum.psi();
    let p = psi_out_position.psi();
    let parity_mass: f64 = (0..gm.modes()).map(|i| m[[gm.parity(i), i]].norm_sqr()).sum();
    let diag_mass: f64 = (0..gp.modes()).map(|i| p[[i, i]].norm_sqr()).sum();
    Ok(ConditionScores {
        score2: parity_mass / mass(m.view()),
        score3: diag_mass / mass(p.view()),
    })
}

/// Diagonal SLM matrix as a dense array, for callers composing systems by hand.
pub fn mask_matrix(mask: &PhaseMask) -> CMatrix {
    Array2::from_diag(&Array1::from(mask.phasors()))
}
