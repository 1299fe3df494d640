//! Phase-mask optimization that refocuses pair correlations through a thick
//! medium in the position and momentum bases at once.
//!
//! The source is taken as perfectly position-correlated at the SLM
//! (`Ψ_in = 𝟙`), so the momentum-plane field is `Ψ_m = H·Hᵗ` with
//! `H = T·[D₂·P_d]·D₁` and the position-plane field is `Ψ_p = F·Ψ_m·Fᵗ`.

use std::f64::consts::TAU;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linalg::CMatrix;
use crate::optics::{dft_matrix, free_space_kernel, ModeGrid, TransferMatrix};
use crate::twophoton::PhaseMask;
use crate::{Error, Flagged, Result, Warning};

pub const DEFAULT_PHASES: usize = 16;

/// Second SLM a distance `distance` behind the first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPlaneGeometry {
    pub distance: f64,
    /// Focal length of the lens that maps the medium output to the camera.
    /// The discrete Fourier transform stands in for it, so it only fixes the
    /// physical scale of momentum pixels.
    pub focal_length: f64,
    /// Photon wavelength.
    pub wavelength: f64,
}

impl Default for TwoPlaneGeometry {
    /// 200 mm spacing, 500 mm lens, 810 nm photons from a 405 nm pump.
    fn default() -> Self {
        Self { distance: 0.2, focal_length: 0.5, wavelength: 810e-9 }
    }
}

/// SLM grid covering a 5 mm pump beam with `n × n` macro-pixels.
pub fn pump_grid(n: usize) -> Result<ModeGrid> {
    ModeGrid::new(n, n, 5e-3 / n as f64, crate::optics::Plane::Position)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub position: f64,
    pub momentum: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { position: 1.0, momentum: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ShapingProblem {
    medium: TransferMatrix,
    geometry: Option<TwoPlaneGeometry>,
    propagator: Option<CMatrix>,
    fourier: CMatrix,
    pub d1: PhaseMask,
    /// Second mask; requires a geometry. Without it the second plane is
    /// left flat (or absent when there is no geometry).
    pub d2: Option<PhaseMask>,
    pub weights: ObjectiveWeights,
}

impl ShapingProblem {
    pub fn new(
        medium: TransferMatrix,
        geometry: Option<TwoPlaneGeometry>,
        second_mask: bool,
        weights: ObjectiveWeights,
    ) -> Result<Flagged<Self>> {
        let grid = medium.in_grid();
        if second_mask && geometry.is_none() {
            return Err(Error::InvalidParameter("a second mask needs a two-plane geometry".into()));
        }
        if !(weights.position >= 0.0) || !(weights.momentum >= 0.0) || weights.position + weights.momentum <= 0.0 {
            return Err(Error::InvalidParameter(format!("objective weights {weights:?}")));
        }
        let mut warnings = Vec::new();
        let propagator = match geometry {
            Some(g) => {
                let p = free_space_kernel(grid, g.distance, g.wavelength)?;
                warnings.extend(p.warnings);
                Some(p.matrix.into_entries())
            }
            None => None,
        };
        let fourier = dft_matrix(medium.out_grid())?.into_entries();
        Ok(Flagged::with(
            Self {
                d1: PhaseMask::flat(grid),
                d2: second_mask.then(|| PhaseMask::flat(grid)),
                medium,
                geometry,
                propagator,
                fourier,
                weights,
            },
            warnings,
        ))
    }

    pub fn medium(&self) -> &TransferMatrix {
        &self.medium
    }

    pub fn geometry(&self) -> Option<TwoPlaneGeometry> {
        self.geometry
    }

    pub fn set_masks(&mut self, d1: PhaseMask, d2: Option<PhaseMask>) -> Result<()> {
        let n = self.medium.in_grid().modes();
        if d1.thetas().len() != n || d2.as_ref().is_some_and(|m| m.thetas().len() != n) {
            return Err(Error::ShapeMismatch("mask size differs from the medium input".into()));
        }
        if d2.is_some() && self.geometry.is_none() {
            return Err(Error::InvalidParameter("a second mask needs a two-plane geometry".into()));
        }
        self.d1 = d1;
        self.d2 = d2;
        Ok(())
    }

    /// `T·[D₂]·[P_d]`: everything downstream of the first mask.
    fn downstream(&self) -> CMatrix {
        let mut g = self.medium.entries().clone();
        if let Some(d2) = &self.d2 {
            scale_cols(&mut g, &d2.phasors());
        }
        match &self.propagator {
            Some(p) => g.dot(p),
            None => g,
        }
    }

    /// Momentum- and position-plane output fields.
    pub fn fields(&self) -> (CMatrix, CMatrix) {
        let mut h = self.downstream();
        scale_cols(&mut h, &self.d1.phasors());
        let psi_m = h.dot(&h.t());
        let psi_p = self.fourier.dot(&psi_m).dot(&self.fourier.t());
        (psi_m, psi_p)
    }
}

fn scale_cols(m: &mut CMatrix, d: &[Complex64]) {
    for (mut col, &s) in m.axis_iter_mut(Axis(1)).zip(d) {
        col.mapv_inplace(|z| z * s);
    }
}

/// Running sums the objective is built from.
struct Tally {
    psi_m: CMatrix,
    psi_p: CMatrix,
    parity: Vec<usize>,
    mass: f64,
    parity_mass: f64,
    diag_mass: f64,
}

impl Tally {
    fn new(problem: &ShapingProblem) -> Self {
        let (psi_m, psi_p) = problem.fields();
        let grid = problem.medium.out_grid();
        let parity: Vec<usize> = (0..grid.modes()).map(|i| grid.parity(i)).collect();
        let mut t = Self { psi_m, psi_p, parity, mass: 0.0, parity_mass: 0.0, diag_mass: 0.0 };
        t.refresh();
        t
    }

    fn refresh(&mut self) {
        self.mass = self.psi_m.iter().map(|z| z.norm_sqr()).sum();
        self.parity_mass = self.parity.iter().enumerate().map(|(i, &p)| self.psi_m[[p, i]].norm_sqr()).sum();
        self.diag_mass = self.psi_p.diag().iter().map(|z| z.norm_sqr()).sum();
    }

    fn value(&self, w: &ObjectiveWeights) -> f64 {
        if self.mass <= 0.0 {
            return 0.0;
        }
        (w.position * self.diag_mass + w.momentum * self.parity_mass) / self.mass
    }
}

/// A change `Ψ_m += Σ cᵢ·xᵢ·yᵢᵀ` with fixed vectors and candidate-dependent
/// coefficients, with everything precomputed that does not depend on `c`.
struct LowRank {
    x: Vec<Array1<Complex64>>,
    y: Vec<Array1<Complex64>>,
    fx: Vec<Array1<Complex64>>,
    fy: Vec<Array1<Complex64>>,
    /// `xᵢᵀ·conj(Ψ_m)·yᵢ`.
    overlap: Vec<Complex64>,
    /// `Σ conj(xᵢ)xⱼ · Σ conj(yᵢ)yⱼ`.
    gram: Vec<Vec<Complex64>>,
}

fn inner(a: &Array1<Complex64>, b: &Array1<Complex64>) -> Complex64 {
    a.iter().zip(b).map(|(u, v)| u.conj() * v).sum()
}

impl LowRank {
    fn new(tally: &Tally, fourier: &CMatrix, terms: Vec<(Array1<Complex64>, Array1<Complex64>)>) -> Self {
        let (x, y): (Vec<_>, Vec<_>) = terms.into_iter().unzip();
        let fx: Vec<_> = x.iter().map(|v| fourier.dot(v)).collect();
        let fy: Vec<_> = y.iter().map(|v| fourier.dot(v)).collect();
        let psi_conj = tally.psi_m.mapv(|z| z.conj());
        let overlap = x.iter().zip(&y).map(|(xi, yi)| xi.dot(&psi_conj.dot(yi))).collect();
        let k = x.len();
        let gram = (0..k).map(|i| (0..k).map(|j| inner(&x[i], &x[j]) * inner(&y[i], &y[j])).collect()).collect();
        Self { x, y, fx, fy, overlap, gram }
    }

    fn evaluate(&self, tally: &Tally, c: &[Complex64], w: &ObjectiveWeights) -> f64 {
        let mut mass = tally.mass;
        for i in 0..c.len() {
            mass += 2.0 * (c[i] * self.overlap[i]).re;
            for j in 0..c.len() {
                mass += (c[i].conj() * c[j] * self.gram[i][j]).re;
            }
        }
        let mut parity_mass = 0.0;
        for (a, &p) in tally.parity.iter().enumerate() {
            let mut v = tally.psi_m[[p, a]];
            for (i, ci) in c.iter().enumerate() {
                v += ci * self.x[i][p] * self.y[i][a];
            }
            parity_mass += v.norm_sqr();
        }
        let mut diag_mass = 0.0;
        for a in 0..tally.psi_p.nrows() {
            let mut v = tally.psi_p[[a, a]];
            for (i, ci) in c.iter().enumerate() {
                v += ci * self.fx[i][a] * self.fy[i][a];
            }
            diag_mass += v.norm_sqr();
        }
        if mass <= 0.0 {
            return 0.0;
        }
        (w.position * diag_mass + w.momentum * parity_mass) / mass
    }

    fn apply(&self, tally: &mut Tally, c: &[Complex64]) {
        for (i, ci) in c.iter().enumerate() {
            outer_add(&mut tally.psi_m, *ci, self.x[i].view(), self.y[i].view());
            outer_add(&mut tally.psi_p, *ci, self.fx[i].view(), self.fy[i].view());
        }
        tally.refresh();
    }
}

fn outer_add(m: &mut CMatrix, c: Complex64, x: ArrayView1<Complex64>, y: ArrayView1<Complex64>) {
    for (mut row, &xa) in m.rows_mut().into_iter().zip(x) {
        let s = c * xa;
        row.zip_mut_with(&y, |z, &yb| *z += s * yb);
    }
}

/// `w_p·P⁻_p(0) + w_m·P⁺_m(0)` as fractions of the output mass.
pub fn objective(problem: &ShapingProblem) -> f64 {
    Tally::new(problem).value(&problem.weights)
}

#[derive(Clone, Debug)]
pub struct ShapingResult {
    pub d1: PhaseMask,
    pub d2: Option<PhaseMask>,
    /// Objective before optimization, then after every macro-pixel visit.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeOptions {
    pub phases: usize,
    /// Stop after this many full cycles over the free masks.
    pub max_cycles: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self { phases: DEFAULT_PHASES, max_cycles: 50 }
    }
}

/// Sequential coordinate ascent: each macro-pixel in turn tries every phase
/// of a fixed grid and keeps the best one if it beats the current value.
/// Passes alternate between the first and second mask.
pub fn optimize_masks(problem: &ShapingProblem, budget: usize, opts: OptimizeOptions) -> Result<Flagged<ShapingResult>> {
    let n = problem.medium.in_grid().modes();
    if budget < n {
        return Err(Error::InvalidParameter(format!("budget {budget} below the {n} macro-pixels")));
    }
    if opts.phases < 2 {
        return Err(Error::InvalidParameter(format!("{} candidate phases", opts.phases)));
    }
    let candidates: Vec<f64> = (0..opts.phases).map(|i| TAU * i as f64 / opts.phases as f64).collect();
    let mut work = problem.clone();
    let mut tally = Tally::new(&work);
    let mut current = tally.value(&work.weights);
    let mut trace = vec![current];
    let mut evaluations = 0;
    let mut exhausted = false;

    'cycles: for _ in 0..opts.max_cycles {
        let start = current;
        for second in [false, true] {
            if second && work.d2.is_none() {
                continue;
            }
            tally = Tally::new(&work);
            // Fresh fields can differ from the running value by rounding.
            current = tally.value(&work.weights).max(current);
            let fixed = if second { second_plane_kernel(&work) } else { work.downstream() };
            for k in 0..n {
                if evaluations + candidates.len() > budget {
                    exhausted = true;
                    break 'cycles;
                }
                let mask = if second { work.d2.as_ref().expect("checked above") } else { &work.d1 };
                let s = mask.phasors()[k];
                let (update, coeffs): (LowRank, Box<dyn Fn(f64) -> Vec<Complex64>>) = if second {
                    let t = work.medium.entries().column(k).to_owned();
                    let d2 = mask.phasors();
                    let kcol: Array1<Complex64> = fixed.column(k).iter().zip(&d2).map(|(a, b)| a * b).collect();
                    let u = work.medium.entries().dot(&kcol);
                    let kkk = fixed[[k, k]];
                    let lr = LowRank::new(&tally, &work.fourier, vec![(t.clone(), u.clone()), (u, t.clone()), (t.clone(), t)]);
                    (
                        lr,
                        Box::new(move |phi| {
                            let delta = Complex64::from_polar(1.0, phi) - s;
                            vec![delta, delta, delta * delta * kkk]
                        }),
                    )
                } else {
                    let g = fixed.column(k).to_owned();
                    let lr = LowRank::new(&tally, &work.fourier, vec![(g.clone(), g)]);
                    (lr, Box::new(move |phi| vec![Complex64::from_polar(1.0, 2.0 * phi) - s * s]))
                };
                let mut best = (current, None);
                for &phi in &candidates {
                    let v = update.evaluate(&tally, &coeffs(phi), &work.weights);
                    if v > best.0 {
                        best = (v, Some(phi));
                    }
                }
                evaluations += candidates.len();
                if let Some(phi) = best.1 {
                    update.apply(&mut tally, &coeffs(phi));
                    let mask = if second { work.d2.as_mut().expect("checked above") } else { &mut work.d1 };
                    mask.set(k, phi);
                    // Keep the trace exact rather than trusting the
                    // incremental prediction.
                    current = tally.value(&work.weights).max(current);
                }
                trace.push(current);
            }
        }
        if current - start <= 1e-12 * start.abs().max(1e-300) {
            break;
        }
    }
    let warnings = if exhausted { vec![Warning::BudgetExhausted { evaluations }] } else { vec![] };
    Ok(Flagged::with(ShapingResult { d1: work.d1, d2: work.d2, trace, evaluations }, warnings))
}

/// `K = P·D₁²·Pᵗ`, the field between the two masks.
fn second_plane_kernel(problem: &ShapingProblem) -> CMatrix {
    let p = problem.propagator.as_ref().expect("second mask implies a propagator");
    let mut pd = p.clone();
    let d1: Vec<Complex64> = problem.d1.phasors().iter().map(|z| z * z).collect();
    scale_cols(&mut pd, &d1);
    pd.dot(&p.t())
}

/// Central value over mean off-center value of the position minus-coordinate
/// and momentum sum-coordinate projections of the output fields, same-pixel
/// pairs included. Each projection pixel is the mean over the pixel pairs it
/// collects, so a fully scrambled output sits near 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakToBackground {
    pub position: f64,
    pub momentum: f64,
}

pub fn peak_to_background(problem: &ShapingProblem) -> PeakToBackground {
    let (psi_m, psi_p) = problem.fields();
    let grid = problem.medium.out_grid();
    let (w, h) = (grid.width, grid.height);
    let shape = (2 * h - 1, 2 * w - 1);
    let (mut minus, mut plus, mut pairs) = (Array2::<f64>::zeros(shape), Array2::<f64>::zeros(shape), Array2::<f64>::zeros(shape));
    for a in 0..grid.modes() {
        let (x1, y1) = grid.coords(a);
        for b in 0..grid.modes() {
            let (x2, y2) = grid.coords(b);
            minus[[y1 + h - 1 - y2, x1 + w - 1 - x2]] += psi_p[[a, b]].norm_sqr();
            plus[[y1 + y2, x1 + x2]] += psi_m[[a, b]].norm_sqr();
            pairs[[y1 + y2, x1 + x2]] += 1.0;
        }
    }
    // A difference bin collects as many pairs as the sum bin at the same index.
    let ratio = |img: Array2<f64>, counts: &Array2<f64>, origin: (usize, usize)| {
        let img = img / counts;
        let centre = img[[origin.1, origin.0]];
        let rest = (img.sum() - centre) / (img.len() - 1) as f64;
        centre / rest
    };
    let (cx, cy) = grid.center();
    PeakToBackground {
        position: ratio(minus, &pairs, (w - 1, h - 1)),
        momentum: ratio(plus, &pairs, (2 * cx, 2 * cy)),
    }
}
