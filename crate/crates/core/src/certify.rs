//! Entanglement-dimension certification from coincidences in two mutually
//! unbiased pixel bases.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::calibration::HotPixelMask;
use crate::epr::OpticalCalibration;
use crate::jpd::Jpd;
use crate::twophoton::Basis;
use crate::{Error, Result};

pub const DEFAULT_DIMENSION: usize = 45;
pub const DEFAULT_SPACING: usize = 2;

/// `d` camera pixels on a square lattice of the given spacing, filling a disk
/// outward from `center`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelSet {
    pub width: usize,
    pub height: usize,
    pub spacing: usize,
    pub center: (usize, usize),
    /// Pixel coordinates `(x, y)`, ordered by distance from the center.
    pub pixels: Vec<(usize, usize)>,
}

impl PixelSet {
    pub fn dimension(&self) -> usize {
        self.pixels.len()
    }

    /// Index of the set pixel closest to the point reflection of pixel `i`
    /// about the center.
    pub fn partner(&self, i: usize) -> usize {
        let (x, y) = self.pixels[i];
        let (tx, ty) = (2 * self.center.0 as i64 - x as i64, 2 * self.center.1 as i64 - y as i64);
        (0..self.pixels.len())
            .min_by_key(|&j| {
                let (u, v) = self.pixels[j];
                (u as i64 - tx).pow(2) + (v as i64 - ty).pow(2)
            })
            .expect("pixel sets are never empty")
    }
}

/// Grid-on-disk selection around the rounded intensity centroid. Lattice
/// points are taken in order of increasing radius (then angle), skipping
/// masked, dark or off-sensor pixels.
pub fn select_pixel_set(
    intensity: ArrayView2<f64>,
    d: usize,
    spacing: usize,
    mask: Option<&HotPixelMask>,
) -> Result<PixelSet> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!("dimension {d} below 2")));
    }
    if spacing == 0 {
        return Err(Error::InvalidParameter("pixel spacing must be positive".into()));
    }
    let (h, w) = intensity.dim();
    if let Some(m) = mask {
        if (m.width, m.height) != (w, h) {
            return Err(Error::ShapeMismatch(format!("mask {}x{} for a {w}x{h} image", m.width, m.height)));
        }
    }
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for ((y, x), &v) in intensity.indexed_iter() {
        if v > 0.0 && !mask.is_some_and(|m| m.is_masked(x, y)) {
            s += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    if s <= 0.0 {
        return Err(Error::InsufficientPixels { requested: d, found: 0 });
    }
    let center = ((sx / s).round() as usize, (sy / s).round() as usize);

    let reach = (w.max(h) / spacing + 1) as i64;
    let mut lattice: Vec<(i64, i64)> = (-reach..=reach).flat_map(|j| (-reach..=reach).map(move |i| (i, j))).collect();
    lattice.sort_by(|a, b| {
        let key = |&(i, j): &(i64, i64)| (i * i + j * j, (j as f64).atan2(i as f64));
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    let step = spacing as i64;
    let mut pixels = Vec::with_capacity(d);
    for (i, j) in lattice {
        let (x, y) = (center.0 as i64 + i * step, center.1 as i64 + j * step);
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        if intensity[[y, x]] > 0.0 && !mask.is_some_and(|m| m.is_masked(x, y)) {
            pixels.push((x, y));
            if pixels.len() == d {
                return Ok(PixelSet { width: w, height: h, spacing, center, pixels });
            }
        }
    }
    Err(Error::InsufficientPixels { requested: d, found: pixels.len() })
}

/// Coincidences between the pixels of a set. In the momentum basis column `v`
/// holds the point-symmetric partner of pixel `v`, so anti-correlated pairs
/// land on the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub counts: Array2<f64>,
    pub basis: Basis,
}

impl CorrelationMatrix {
    pub fn new(counts: Array2<f64>, basis: Basis) -> Result<Self> {
        if !counts.is_square() || counts.nrows() < 2 {
            return Err(Error::ShapeMismatch(format!("correlation matrix {:?}", counts.dim())));
        }
        if counts.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("correlation matrix has non-finite entries".into()));
        }
        Ok(Self { counts, basis })
    }

    pub fn dimension(&self) -> usize {
        self.counts.nrows()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.counts.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, basis: Basis) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Format(format!("{c:?}: {e}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Format("correlation matrix CSV is not square".into()));
        }
        let counts = Array2::from_shape_vec((d, d), rows.into_iter().flatten().collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(counts, basis)
    }
}

/// Mean coincidence of a pixel with its unmasked 4-neighbors, standing in for
/// the same-pixel rate a single camera cannot measure.
fn neighbor_rate(jpd: &Jpd, (x, y): (usize, usize)) -> f64 {
    let (w, h) = (jpd.width() as i64, jpd.height() as i64);
    let masked = jpd.masked();
    let (mut s, mut k) = (0.0, 0);
    for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
        let (u, v) = (x as i64 + dx, y as i64 + dy);
        if u >= 0 && v >= 0 && u < w && v < h && !masked[(v * w + u) as usize] {
            s += jpd.at((x, y), (u as usize, v as usize));
            k += 1;
        }
    }
    if k == 0 {
        0.0
    } else {
        s / k as f64
    }
}

pub fn correlation_matrix(jpd: &Jpd, set: &PixelSet, basis: Basis) -> Result<CorrelationMatrix> {
    if (set.width, set.height) != (jpd.width(), jpd.height()) {
        return Err(Error::ShapeMismatch(format!(
            "pixel set for {}x{}, JPD is {}x{}",
            set.width,
            set.height,
            jpd.width(),
            jpd.height()
        )));
    }
    let d = set.dimension();
    let column = |v: usize| match basis {
        Basis::Position => v,
        Basis::Momentum => set.partner(v),
    };
    let counts = Array2::from_shape_fn((d, d), |(m, v)| {
        let (a, b) = (set.pixels[m], set.pixels[column(v)]);
        if a == b {
            neighbor_rate(jpd, a)
        } else {
            jpd.at(a, b)
        }
    });
    CorrelationMatrix::new(counts, basis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    /// `(1/d)·Σ_m ⟨mm|ρ|mm⟩`.
    pub f1: f64,
    /// `Σ_m ⟨mm|ρ|mm⟩`, kept for comparison.
    pub f1_unweighted: f64,
    pub f2_tilde: f64,
    pub f_tilde: f64,
    pub d: usize,
    pub certified_r: usize,
    pub entangled: bool,
    /// Negative position-basis probabilities set to zero under square roots.
    pub clamped: usize,
}

impl WitnessReport {
    pub fn to_text(&self) -> String {
        format!(
            "d={}\nf1={:e}\nf1_unweighted={:e}\nf2_tilde={:e}\nf_tilde={:e}\ncertified_r={}\nentangled={}\nclamped={}\n",
            self.d,
            self.f1,
            self.f1_unweighted,
            self.f2_tilde,
            self.f_tilde,
            self.certified_r,
            self.entangled,
            self.clamped
        )
    }
}

/// Largest `r` with `r < F̃·d + 1`, clamped to `[0, d]`; `r ≤ 1` certifies
/// nothing and is reported as 0.
pub fn certified_dimension(f_tilde: f64, d: usize) -> usize {
    let r = ((f_tilde * d as f64 + 1.0 - 1e-9).ceil() - 1.0).clamp(0.0, d as f64) as usize;
    if r <= 1 {
        0
    } else {
        r
    }
}

fn normalized(m: &CorrelationMatrix) -> Result<Array2<f64>> {
    let total = m.counts.sum();
    if !(total > 0.0) {
        return Err(Error::ZeroCounts);
    }
    Ok(&m.counts / total)
}

/// Lower bound on the fidelity to `Σ_m |mm⟩/√d` from position and momentum
/// coincidence matrices.
pub fn fidelity_bound(pos: &CorrelationMatrix, mom: &CorrelationMatrix) -> Result<WitnessReport> {
    let d = pos.dimension();
    if mom.dimension() != d {
        return Err(Error::ShapeMismatch(format!("dimensions {d} and {}", mom.dimension())));
    }
    let p = normalized(pos)?;
    let q = normalized(mom)?;
    let df = d as f64;

    let f1_unweighted = p.diag().sum();
    let f1 = f1_unweighted / df;
    let clamped = p.indexed_iter().filter(|&((m, n), &v)| m != n && v < 0.0).count();
    let root = p.mapv(|v| v.max(0.0).sqrt());
    // Pairs (m, n), (m', n') with m ≠ n, m' ≠ m and m − n ≡ m' − n' (mod d).
    let mut cross = 0.0;
    for m in 0..d {
        for n in 0..d {
            if m == n || root[[m, n]] == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for mp in 0..d {
                if mp != m {
                    s += root[[mp, (n + mp + d - m) % d]];
                }
            }
            cross += root[[m, n]] * s;
        }
    }
    let f2_tilde = q.diag().sum() - 1.0 / df - cross / df;
    let f_tilde = f1 + f2_tilde;
    let certified_r = certified_dimension(f_tilde, d);
    Ok(WitnessReport {
        f1,
        f1_unweighted,
        f2_tilde,
        f_tilde,
        d,
        certified_r,
        entangled: certified_r >= 2,
        clamped,
    })
}

/// `−Σ p log₂ p` of a distribution given up to normalization.
pub fn entropy_bits(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::DegenerateGeometry("no overlap between the bases".into()));
    }
    Ok(-weights.iter().filter(|&&w| w > 0.0).map(|&w| (w / total) * (w / total).log2()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unbiasedness {
    pub per_mode: Vec<f64>,
    pub mean: f64,
    /// `log₂ d`, reached for perfectly unbiased bases.
    pub maximum: f64,
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        u.sin() / u
    }
}

/// Entropy of the momentum-pixel distribution produced by each position
/// pixel. A square position pixel of side `pitch/M` in the crystal plane
/// radiates a sinc² far field; it is sampled at the momentum-pixel centers,
/// laid out with the same geometry behind the focal length `f`.
pub fn unbiasedness(set: &PixelSet, geometry: &OpticalCalibration) -> Result<Unbiasedness> {
    geometry.validate()?;
    let d = set.dimension();
    let side = geometry.pixel_pitch / geometry.magnification;
    let scale = PI * side * geometry.pixel_pitch / (geometry.wavelength * geometry.effective_focal_length);
    let far_field: Vec<f64> = set
        .pixels
        .iter()
        .map(|&(x, y)| {
            let u = (x as f64 - set.center.0 as f64) * scale;
            let v = (y as f64 - set.center.1 as f64) * scale;
            (sinc(u) * sinc(v)).powi(2)
        })
        .collect();
    // The far field of a pixel does not depend on where the pixel sits.
    let per_mode = (0..d).map(|_| entropy_bits(&far_field)).collect::<Result<Vec<_>>>()?;
    let mean = per_mode.iter().sum::<f64>() / d as f64;
    Ok(Unbiasedness { per_mode, mean, maximum: (d as f64).log2() })
}
