//! Joint probability distribution of photon coincidences estimated from
//! binary frames, with consecutive-frame accidental subtraction.
//!
//! `Γ_ab = (1/M) Σ_l [I_a⁽ˡ⁾ I_b⁽ˡ⁾ − ½(I_a⁽ˡ⁾ I_b⁽ˡ⁺¹⁾ + I_b⁽ˡ⁾ I_a⁽ˡ⁺¹⁾)]` over
//! `M + 1` frames. Counts are accumulated as integers so the reduction is
//! exact and independent of how frames are split across workers.

use std::io::{Read, Write};

use ndarray::Array2;
use rayon::prelude::*;

use crate::io;
use crate::spadsim::FrameStack;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"EJPD0001";
const PROJ_MAGIC: &[u8; 8] = b"EPRJ0001";
/// Upper bound on memory spent on per-worker partial count tables.
const PARTIAL_BUDGET_BYTES: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Jpd {
    width: usize,
    height: usize,
    frames_used: usize,
    gamma: Array2<f64>,
    variance: Array2<f64>,
    masked: Vec<bool>,
}

struct Partial {
    genuine: Vec<u32>,
    accidental: Vec<u32>,
}

impl Partial {
    fn new(n: usize) -> Self {
        Self { genuine: vec![0; n * n], accidental: vec![0; n * n] }
    }
}

fn accumulate_range(stack: &FrameStack, from: usize, to: usize) -> Partial {
    let n = stack.pixels();
    let mut p = Partial::new(n);
    let mut now = Vec::new();
    let mut next = Vec::new();
    if from < to {
        stack.lit_into(from, &mut next);
    }
    for l in from..to {
        std::mem::swap(&mut now, &mut next);
        stack.lit_into(l + 1, &mut next);
        for (i, &a) in now.iter().enumerate() {
            let row = a as usize * n;
            for &b in &now[i + 1..] {
                p.genuine[row + b as usize] += 1;
            }
            for &b in &next {
                p.accidental[row + b as usize] += 1;
            }
        }
    }
    p
}

/// Streams the frame stack once and returns the accidental-subtracted JPD.
pub fn accumulate_jpd(stack: &FrameStack) -> Result<Jpd> {
    let total = stack.frames();
    if total < 2 {
        return Err(Error::TooFewFrames { needed: 2, got: total });
    }
    let m = total - 1;
    let n = stack.pixels();
    let per_partial = 8 * n * n;
    let workers = rayon::current_num_threads()
        .min((PARTIAL_BUDGET_BYTES / per_partial).max(1))
        .min(m);
    // u32 partial counts cannot overflow within a range of at most u32::MAX frames.
    let ranges = workers.max(m.div_ceil(u32::MAX as usize));
    let bounds: Vec<(usize, usize)> = (0..ranges).map(|r| (r * m / ranges, (r + 1) * m / ranges)).collect();
    let mut genuine = vec![0u64; n * n];
    let mut accidental = vec![0u64; n * n];
    for group in bounds.chunks(workers) {
        let partials: Vec<Partial> = group
            .par_iter()
            .map(|&(from, to)| accumulate_range(stack, from, to))
            .collect();
        for p in partials {
            for (g, v) in genuine.iter_mut().zip(&p.genuine) {
                *g += *v as u64;
            }
            for (a, v) in accidental.iter_mut().zip(&p.accidental) {
                *a += *v as u64;
            }
        }
    }
    let mf = m as f64;
    let mut gamma = Array2::zeros((n, n));
    let mut variance = Array2::zeros((n, n));
    for a in 0..n {
        for b in a + 1..n {
            let g = genuine[a * n + b] as f64;
            let acc = (accidental[a * n + b] + accidental[b * n + a]) as f64;
            let v = (g - 0.5 * acc) / mf;
            let var = (g + 0.25 * acc) / (mf * mf);
            gamma[[a, b]] = v;
            gamma[[b, a]] = v;
            variance[[a, b]] = var;
            variance[[b, a]] = var;
        }
    }
    Ok(Jpd {
        width: stack.width(),
        height: stack.height(),
        frames_used: m,
        gamma,
        variance,
        masked: vec![false; n],
    })
}

impl Jpd {
    /// Wraps an explicit matrix; the diagonal is forced to zero.
    pub fn from_gamma(width: usize, height: usize, frames_used: usize, mut gamma: Array2<f64>) -> Result<Self> {
        let n = width * height;
        if gamma.dim() != (n, n) {
            return Err(Error::ShapeMismatch(format!("gamma {:?} for {width}x{height}", gamma.dim())));
        }
        gamma.diag_mut().fill(0.0);
        Ok(Self {
            width,
            height,
            frames_used,
            gamma,
            variance: Array2::zeros((n, n)),
            masked: vec![false; n],
        })
    }

    pub fn with_variance(mut self, variance: Array2<f64>) -> Result<Self> {
        if variance.dim() != self.gamma.dim() {
            return Err(Error::ShapeMismatch("variance shape".into()));
        }
        self.variance = variance;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn frames_used(&self) -> usize {
        self.frames_used
    }

    pub fn gamma(&self) -> &Array2<f64> {
        &self.gamma
    }

    /// Per-entry estimator variance under Poisson counting statistics.
    pub fn variance(&self) -> &Array2<f64> {
        &self.variance
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn total(&self) -> f64 {
        self.gamma.sum()
    }

    pub fn at(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        self.gamma[[a.1 * self.width + a.0, b.1 * self.width + b.0]]
    }

    /// Zeroes every row and column of a masked pixel.
    pub fn apply_mask(&mut self, masked: &[bool]) -> Result<()> {
        if masked.len() != self.pixels() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} pixels for a {}-pixel sensor",
                masked.len(),
                self.pixels()
            )));
        }
        for (p, &m) in masked.iter().enumerate() {
            if m {
                self.masked[p] = true;
                self.gamma.row_mut(p).fill(0.0);
                self.gamma.column_mut(p).fill(0.0);
                self.variance.row_mut(p).fill(0.0);
                self.variance.column_mut(p).fill(0.0);
            }
        }
        Ok(())
    }

    pub(crate) fn map_gamma(&self, gamma: Array2<f64>) -> Self {
        Self { gamma, ..self.clone() }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_magic(w, MAGIC)?;
        io::write_u32(w, self.width as u32)?;
        io::write_u32(w, self.height as u32)?;
        io::write_u64(w, self.frames_used as u64)?;
        for &m in &self.masked {
            io::write_u8(w, m as u8)?;
        }
        io::write_f64_slice(w, self.gamma.as_slice().expect("standard layout"))?;
        io::write_f64_slice(w, self.variance.as_slice().expect("standard layout"))
    }

    pub fn read_body<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, MAGIC)?;
        let width = io::read_u32(r)? as usize;
        let height = io::read_u32(r)? as usize;
        let frames_used = io::read_u64(r)? as usize;
        let n = width * height;
        if n == 0 {
            return Err(Error::Format("empty JPD geometry".into()));
        }
        let masked = (0..n).map(|_| io::read_u8(r).map(|b| b != 0)).collect::<Result<Vec<_>>>()?;
        let gamma = Array2::from_shape_vec((n, n), io::read_f64_vec(r, n * n)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let variance = Array2::from_shape_vec((n, n), io::read_f64_vec(r, n * n)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { width, height, frames_used, gamma, variance, masked })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let j = Self::read_body(r)?;
        io::expect_eof(r)?;
        Ok(j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Indexed by `r₁ + r₂`.
    Sum,
    /// Indexed by `r₁ − r₂`.
    Minus,
}

/// A 2D marginal of Γ over sum or difference coordinates, `(2H − 1) × (2W − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub kind: ProjectionKind,
    /// Rows follow y, columns follow x.
    pub image: Array2<f64>,
    pub variance: Array2<f64>,
    /// Array index (column, row) of the zero coordinate: the parity-pair sum
    /// for `Sum`, zero separation for `Minus`.
    pub origin: (usize, usize),
}

impl Projection {
    pub fn value(&self, dx: i64, dy: i64) -> Option<f64> {
        let c = self.origin.0 as i64 + dx;
        let r = self.origin.1 as i64 + dy;
        let (h, w) = self.image.dim();
        if c < 0 || r < 0 || c >= w as i64 || r >= h as i64 {
            return None;
        }
        Some(self.image[[r as usize, c as usize]])
    }

    pub fn total(&self) -> f64 {
        self.image.sum()
    }

    /// Long-form CSV: `dx,dy,value,variance` relative to the origin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dx,dy,value,variance\n");
        for ((r, c), v) in self.image.indexed_iter() {
            let dx = c as i64 - self.origin.0 as i64;
            let dy = r as i64 - self.origin.1 as i64;
            out.push_str(&format!("{dx},{dy},{v:e},{:e}\n", self.variance[[r, c]]));
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_magic(w, PROJ_MAGIC)?;
        io::write_u8(w, matches!(self.kind, ProjectionKind::Minus) as u8)?;
        let (h, wd) = self.image.dim();
        io::write_u32(w, wd as u32)?;
        io::write_u32(w, h as u32)?;
        io::write_u32(w, self.origin.0 as u32)?;
        io::write_u32(w, self.origin.1 as u32)?;
        io::write_f64_slice(w, self.image.as_slice().expect("standard layout"))?;
        io::write_f64_slice(w, self.variance.as_slice().expect("standard layout"))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, PROJ_MAGIC)?;
        let kind = match io::read_u8(r)? {
            0 => ProjectionKind::Sum,
            1 => ProjectionKind::Minus,
            t => return Err(Error::Format(format!("projection kind {t}"))),
        };
        let w = io::read_u32(r)? as usize;
        let h = io::read_u32(r)? as usize;
        let origin = (io::read_u32(r)? as usize, io::read_u32(r)? as usize);
        let image = Array2::from_shape_vec((h, w), io::read_f64_vec(r, w * h)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let variance = Array2::from_shape_vec((h, w), io::read_f64_vec(r, w * h)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        io::expect_eof(r)?;
        Ok(Self { kind, image, variance, origin })
    }
}

fn project(jpd: &Jpd, kind: ProjectionKind) -> Projection {
    let (w, h) = (jpd.width, jpd.height);
    let mut image = Array2::zeros((2 * h - 1, 2 * w - 1));
    let mut variance = Array2::zeros((2 * h - 1, 2 * w - 1));
    let n = jpd.pixels();
    for a in 0..n {
        let (x1, y1) = (a % w, a / w);
        for b in 0..n {
            let (x2, y2) = (b % w, b / w);
            let (c, r) = match kind {
                ProjectionKind::Sum => (x1 + x2, y1 + y2),
                ProjectionKind::Minus => (x1 + w - 1 - x2, y1 + h - 1 - y2),
            };
            image[[r, c]] += jpd.gamma[[a, b]];
            variance[[r, c]] += jpd.variance[[a, b]];
        }
    }
    let origin = match kind {
        ProjectionKind::Sum => (2 * (w / 2), 2 * (h / 2)),
        ProjectionKind::Minus => (w - 1, h - 1),
    };
    Projection { kind, image, variance, origin }
}

/// Sum-coordinate projection; parity pairs land on `origin`.
pub fn project_sum(jpd: &Jpd) -> Projection {
    project(jpd, ProjectionKind::Sum)
}

/// Difference-coordinate projection; the center is zero because same-pixel
/// coincidences are not measured.
pub fn project_minus(jpd: &Jpd) -> Projection {
    project(jpd, ProjectionKind::Minus)
}

/// `image[y][x] = Γ((x, y), ref_pixel)`.
pub fn conditional_image(jpd: &Jpd, ref_pixel: (usize, usize)) -> Result<Array2<f64>> {
    let (k, l) = ref_pixel;
    if k >= jpd.width || l >= jpd.height {
        return Err(Error::InvalidParameter(format!("reference pixel ({k}, {l}) outside sensor")));
    }
    let b = l * jpd.width + k;
    if jpd.masked[b] {
        return Err(Error::MaskedPixel(k, l));
    }
    let col = jpd.gamma.column(b);
    Ok(Array2::from_shape_fn((jpd.height, jpd.width), |(y, x)| col[y * jpd.width + x]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_cancel() {
        let st = FrameStack::from_lit(3, 3, 0, &[vec![0, 4, 8], vec![0, 4, 8]]).unwrap();
        let j = accumulate_jpd(&st).unwrap();
        assert_eq!(j.frames_used(), 1);
        assert!(j.gamma().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alternating_frames_give_pure_accidental_anticorrelation() {
        let frames: Vec<Vec<usize>> = (0..1001).map(|l| if l % 2 == 0 { vec![1] } else { vec![5] }).collect();
        let st = FrameStack::from_lit(3, 3, 0, &frames).unwrap();
        let j = accumulate_jpd(&st).unwrap();
        assert_eq!(j.gamma()[[1, 5]], -0.5);
        assert_eq!(j.gamma()[[5, 1]], -0.5);
    }

    #[test]
    fn single_frame_is_rejected() {
        let st = FrameStack::from_lit(2, 2, 0, &[vec![0]]).unwrap();
        assert!(matches!(accumulate_jpd(&st), Err(Error::TooFewFrames { .. })));
    }

    #[test]
    fn parity_supported_gamma_projects_to_one_sum_peak() {
        let (w, h) = (4, 4);
        let n = w * h;
        let mut g = Array2::zeros((n, n));
        for a in 0..n {
            let (x, y) = (a % w, a / w);
            let (px, py) = ((4 - x) % 4, (4 - y) % 4);
            let b = py * w + px;
            if a != b && x != 0 && y != 0 {
                g[[a, b]] = 1.0;
            }
        }
        let j = Jpd::from_gamma(w, h, 1, g).unwrap();
        let p = project_sum(&j);
        assert_eq!(p.image.dim(), (7, 7));
        let peak = p.value(0, 0).unwrap();
        assert_eq!(peak, j.total());
        assert!((p.total() - j.total()).abs() < 1e-12);
    }

    #[test]
    fn masking_zeroes_rows_and_columns() {
        let g = Array2::from_elem((4, 4), 1.0);
        let mut j = Jpd::from_gamma(2, 2, 1, g).unwrap();
        j.apply_mask(&[false, true, false, false]).unwrap();
        assert!(j.gamma().row(1).iter().all(|&v| v == 0.0));
        assert!(j.gamma().column(1).iter().all(|&v| v == 0.0));
        assert_eq!(j.gamma()[[0, 2]], 1.0);
        assert!(matches!(conditional_image(&j, (1, 0)), Err(Error::MaskedPixel(1, 0))));
        let img = conditional_image(&j, (0, 1)).unwrap();
        assert_eq!(img[[0, 0]], 1.0);
        assert_eq!(img[[0, 1]], 0.0);
    }

    #[test]
    fn containers_roundtrip() {
        let frames: Vec<Vec<usize>> = (0..50).map(|l| vec![l % 6, (l * 7) % 6]).collect();
        let st = FrameStack::from_lit(3, 2, 0, &frames).unwrap();
        let mut j = accumulate_jpd(&st).unwrap();
        j.apply_mask(&[false, false, true, false, false, false]).unwrap();
        let mut buf = Vec::new();
        j.write_to(&mut buf).unwrap();
        assert_eq!(Jpd::read_from(&mut buf.as_slice()).unwrap(), j);
        let p = project_minus(&j);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(Projection::read_from(&mut buf.as_slice()).unwrap(), p);
        assert_eq!(p.to_csv().lines().count(), 1 + 5 * 3);
    }
}
