//! Correlation-width fits on JPD projections and the EPR separability test.

use std::f64::consts::{E, PI};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::jpd::{Projection, ProjectionKind};
use crate::{Error, Flagged, Result, Warning};

/// Side of the square region around the peak used for the fit and noise.
pub const DEFAULT_NOISE_WINDOW: usize = 15;
/// Peak amplitude, in units of the noise standard deviation, below which the
/// fit is replaced by an envelope estimate.
pub const PEAK_SIGNIFICANCE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalCalibration {
    /// Camera pixel pitch in meters.
    pub pixel_pitch: f64,
    /// Imaging magnification of the position configuration.
    pub magnification: f64,
    /// Effective focal length of the momentum configuration in meters.
    pub effective_focal_length: f64,
    pub wavelength: f64,
}

impl Default for OpticalCalibration {
    fn default() -> Self {
        Self { pixel_pitch: 45e-6, magnification: 10.0, effective_focal_length: 75e-3, wavelength: 810e-9 }
    }
}

impl OpticalCalibration {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pixel_pitch", self.pixel_pitch),
            ("magnification", self.magnification),
            ("effective_focal_length", self.effective_focal_length),
            ("wavelength", self.wavelength),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthBasis {
    Position,
    Momentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    /// `a·exp(−r²/2Δ²)` against the distance of every pixel from the
    /// centroid of the peak.
    #[default]
    Radial,
    /// Same model with the center as two extra free parameters.
    Full2d,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub noise_window: usize,
    pub method: FitMethod,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { noise_window: DEFAULT_NOISE_WINDOW, method: FitMethod::Radial }
    }
}

/// Result of a width fit, in projection pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthFit {
    pub amplitude: f64,
    pub width: f64,
    pub width_error: f64,
    /// Standard deviation of the residuals inside the window.
    pub noise: f64,
    /// Peak center as (dx, dy) relative to the projection origin.
    pub center: (f64, f64),
    /// True when the width comes from the envelope rather than a Gaussian fit.
    pub approximate: bool,
}

/// `δ_Δ = Σ·√e·Δ/a`: the width shift that moves the model by one noise
/// standard deviation at `r = Δ`.
pub fn width_uncertainty(noise: f64, width: f64, amplitude: f64) -> f64 {
    noise * E.sqrt() * width / amplitude
}

pub fn fit_gaussian_width(proj: &Projection, noise_window: usize) -> Result<Flagged<WidthFit>> {
    fit_gaussian_width_with(proj, FitOptions { noise_window, ..FitOptions::default() })
}

/// Fits `a·exp(−r²/2Δ²)` around the projection maximum. For minus-coordinate
/// projections the zero-separation pixel is left out since Γ has no diagonal.
pub fn fit_gaussian_width_with(proj: &Projection, opts: FitOptions) -> Result<Flagged<WidthFit>> {
    let (h, w) = proj.image.dim();
    if opts.noise_window < 3 {
        return Err(Error::InvalidParameter(format!("noise window {}", opts.noise_window)));
    }
    if proj.image.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("projection contains non-finite values".into()));
    }
    let skip = match proj.kind {
        ProjectionKind::Minus => Some(proj.origin),
        ProjectionKind::Sum => None,
    };
    let usable = |c: usize, r: usize| skip != Some((c, r));
    let (mut peak, mut best) = (None, f64::NEG_INFINITY);
    for ((r, c), &v) in proj.image.indexed_iter() {
        if usable(c, r) && v > best {
            best = v;
            peak = Some((c, r));
        }
    }
    let Some((mut pc, mut pr)) = peak else {
        return Err(Error::InvalidParameter("empty projection".into()));
    };
    // A maximum next to the missing zero-separation pixel belongs to a peak
    // centered on it.
    if let Some((sc, sr)) = skip {
        if pc.abs_diff(sc) <= 1 && pr.abs_diff(sr) <= 1 {
            (pc, pr) = (sc, sr);
        }
    }

    let half = opts.noise_window / 2;
    let cols = pc.saturating_sub(half)..(pc + half + 1).min(w);
    let rows = pr.saturating_sub(half)..(pr + half + 1).min(h);
    let mut pts = Vec::new();
    for r in rows.clone() {
        for c in cols.clone() {
            if usable(c, r) {
                pts.push((c as f64, r as f64, proj.image[[r, c]]));
            }
        }
    }

    let (cx, cy) = centroid(&proj.image, (pc, pr), 2, &usable);
    let fit = if best > 0.0 {
        match opts.method {
            FitMethod::Radial => fit_radial(&pts, (cx, cy), best),
            FitMethod::Full2d => fit_full(&pts, (cx, cy), best),
        }
    } else {
        None
    };

    let (ox, oy) = (proj.origin.0 as f64, proj.origin.1 as f64);
    if let Some((a, width, (x0, y0))) = fit {
        let noise = residual_std(&pts, a, width, (x0, y0), 2 + 2 * (opts.method == FitMethod::Full2d) as usize);
        if a > PEAK_SIGNIFICANCE * noise && width > 0.0 && width <= half as f64 {
            return Ok(Flagged::clean(WidthFit {
                amplitude: a,
                width,
                width_error: width_uncertainty(noise, width, a),
                noise,
                center: (x0 - ox, y0 - oy),
                approximate: false,
            }));
        }
    }

    let env = envelope(&proj.image, &usable)
        .ok_or_else(|| Error::InvalidParameter("projection has no positive mass".into()))?;
    let noise = window_std(&pts);
    Ok(Flagged::with(
        WidthFit {
            amplitude: best,
            width: env.0,
            width_error: width_uncertainty(noise, env.0, best),
            noise,
            center: (env.1 .0 - ox, env.1 .1 - oy),
            approximate: true,
        },
        vec![Warning::ApproximateWidth],
    ))
}

fn centroid(img: &Array2<f64>, at: (usize, usize), reach: usize, usable: &dyn Fn(usize, usize) -> bool) -> (f64, f64) {
    let (h, w) = img.dim();
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in at.1.saturating_sub(reach)..(at.1 + reach + 1).min(h) {
        for c in at.0.saturating_sub(reach)..(at.0 + reach + 1).min(w) {
            let v = img[[r, c]].max(0.0);
            if usable(c, r) {
                s += v;
                sx += v * c as f64;
                sy += v * r as f64;
            }
        }
    }
    if s > 0.0 {
        (sx / s, sy / s)
    } else {
        (at.0 as f64, at.1 as f64)
    }
}

fn gauss(a: f64, width: f64, r2: f64) -> f64 {
    a * (-r2 / (2.0 * width * width)).exp()
}

fn initial_width(pts: &[(f64, f64, f64)], center: (f64, f64)) -> f64 {
    let (mut s, mut m) = (0.0, 0.0);
    for &(x, y, v) in pts {
        let v = v.max(0.0);
        s += v;
        m += v * ((x - center.0).powi(2) + (y - center.1).powi(2));
    }
    if s > 0.0 && m > 0.0 {
        (m / (2.0 * s)).sqrt().max(0.3)
    } else {
        1.0
    }
}

fn fit_radial(pts: &[(f64, f64, f64)], center: (f64, f64), peak: f64) -> Option<(f64, f64, (f64, f64))> {
    let r2: Vec<f64> = pts.iter().map(|&(x, y, _)| (x - center.0).powi(2) + (y - center.1).powi(2)).collect();
    let p = levenberg_marquardt([peak, initial_width(pts, center)], |p, rows| {
        let (a, d) = (p[0], p[1]);
        for (i, &(_, _, v)) in pts.iter().enumerate() {
            let e = (-r2[i] / (2.0 * d * d)).exp();
            rows.push((v - a * e, [e, a * e * r2[i] / (d * d * d)]));
        }
    })?;
    Some((p[0], p[1].abs(), center))
}

fn fit_full(pts: &[(f64, f64, f64)], center: (f64, f64), peak: f64) -> Option<(f64, f64, (f64, f64))> {
    let p = levenberg_marquardt([peak, initial_width(pts, center), center.0, center.1], |p, rows| {
        let (a, d, x0, y0) = (p[0], p[1], p[2], p[3]);
        for &(x, y, v) in pts {
            let r2 = (x - x0).powi(2) + (y - y0).powi(2);
            let e = (-r2 / (2.0 * d * d)).exp();
            let f = a * e;
            rows.push((v - f, [e, f * r2 / (d * d * d), f * (x - x0) / (d * d), f * (y - y0) / (d * d)]));
        }
    })?;
    Some((p[0], p[1].abs(), (p[2], p[3])))
}

/// Minimizes the sum of squared residuals. `eval` pushes one
/// `(residual, ∂model/∂p)` row per data point.
fn levenberg_marquardt<const N: usize>(
    mut p: [f64; N],
    eval: impl Fn(&[f64; N], &mut Vec<(f64, [f64; N])>),
) -> Option<[f64; N]> {
    let mut rows = Vec::new();
    let cost = |p: &[f64; N], rows: &mut Vec<(f64, [f64; N])>| {
        rows.clear();
        eval(p, rows);
        rows.iter().map(|(r, _)| r * r).sum::<f64>()
    };
    let mut c = cost(&p, &mut rows);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut jtj = [[0.0; N]; N];
        let mut jtr = [0.0; N];
        for (res, g) in &rows {
            for i in 0..N {
                jtr[i] += g[i] * res;
                for j in 0..N {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut m = jtj;
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-300);
            }
            let Some(step) = solve(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p;
            for i in 0..N {
                trial[i] += step[i];
            }
            let mut trial_rows = Vec::new();
            let tc = cost(&trial, &mut trial_rows);
            if tc.is_finite() && tc <= c {
                let rel = (c - tc) / c.max(f64::MIN_POSITIVE);
                let small = step.iter().zip(&trial).all(|(s, t)| s.abs() <= 1e-12 * t.abs().max(1e-12));
                p = trial;
                rows = trial_rows;
                c = tc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-15 || small {
                    return p.iter().all(|v| v.is_finite()).then_some(p);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    p.iter().all(|v| v.is_finite()).then_some(p)
}

fn solve<const N: usize>(mut m: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for k in 0..N {
        let piv = (k..N).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))?;
        if m[piv][k] == 0.0 || !m[piv][k].is_finite() {
            return None;
        }
        m.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..N {
            let f = m[i][k] / m[k][k];
            for j in k..N {
                m[i][j] -= f * m[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = [0.0; N];
    for k in (0..N).rev() {
        let s: f64 = (k + 1..N).map(|j| m[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / m[k][k];
    }
    Some(x)
}

fn residual_std(pts: &[(f64, f64, f64)], a: f64, width: f64, center: (f64, f64), params: usize) -> f64 {
    let ss: f64 = pts
        .iter()
        .map(|&(x, y, v)| (v - gauss(a, width, (x - center.0).powi(2) + (y - center.1).powi(2))).powi(2))
        .sum();
    (ss / (pts.len().saturating_sub(params).max(1)) as f64).sqrt()
}

fn window_std(pts: &[(f64, f64, f64)]) -> f64 {
    let n = pts.len().max(1) as f64;
    let mean = pts.iter().map(|p| p.2).sum::<f64>() / n;
    (pts.iter().map(|p| (p.2 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-axis standard deviation of the positive part of the image treated as
/// a distribution, averaged over the two axes, and its centroid.
fn envelope(img: &Array2<f64>, usable: &dyn Fn(usize, usize) -> bool) -> Option<(f64, (f64, f64))> {
    let (mut s, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((r, c), &v) in img.indexed_iter() {
        if !usable(c, r) || v <= 0.0 {
            continue;
        }
        let (x, y) = (c as f64, r as f64);
        s += v;
        sx += v * x;
        sy += v * y;
        sxx += v * x * x;
        syy += v * y * y;
    }
    if s <= 0.0 {
        return None;
    }
    let (mx, my) = (sx / s, sy / s);
    let var = 0.5 * ((sxx / s - mx * mx) + (syy / s - my * my));
    Some((var.max(0.0).sqrt(), (mx, my)))
}

/// Converts a width in projection pixels to crystal-plane units: meters for
/// position, radians per meter for momentum.
pub fn pixel_to_physical(width_px: f64, cal: &OpticalCalibration, basis: WidthBasis) -> f64 {
    match basis {
        WidthBasis::Position => width_px * cal.pixel_pitch / cal.magnification,
        WidthBasis::Momentum => width_px * cal.pixel_pitch * 2.0 * PI / (cal.wavelength * cal.effective_focal_length),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EprReport {
    pub delta_r: f64,
    pub delta_r_error: f64,
    pub delta_k: f64,
    pub delta_k_error: f64,
    pub product: f64,
    pub product_sigma: f64,
    /// `|1/2 − product|/σ`; `None` when σ = 0 (infinite confidence).
    pub confidence: Option<f64>,
    pub violated: bool,
    /// Set when either width came from an envelope estimate.
    #[serde(default)]
    pub approximate: bool,
}

impl EprReport {
    pub fn confidence_value(&self) -> f64 {
        self.confidence.unwrap_or(f64::INFINITY)
    }

    /// Flat `key=value` record, one field per line.
    pub fn to_text(&self) -> String {
        let c = self.confidence.map_or("inf".to_string(), |c| format!("{c:e}"));
        format!(
            "delta_r={:e}\ndelta_r_error={:e}\ndelta_k={:e}\ndelta_k_error={:e}\nproduct={:e}\nproduct_sigma={:e}\nconfidence={c}\nviolated={}\napproximate={}\n",
            self.delta_r,
            self.delta_r_error,
            self.delta_k,
            self.delta_k_error,
            self.product,
            self.product_sigma,
            self.violated,
            self.approximate
        )
    }
}

pub fn epr_criterion(delta_r: f64, delta_r_error: f64, delta_k: f64, delta_k_error: f64) -> Result<EprReport> {
    if !(delta_r > 0.0) || !(delta_k > 0.0) || !delta_r.is_finite() || !delta_k.is_finite() {
        return Err(Error::InvalidParameter(format!("widths {delta_r}, {delta_k}")));
    }
    if !(delta_r_error >= 0.0) || !(delta_k_error >= 0.0) {
        return Err(Error::InvalidParameter(format!("width errors {delta_r_error}, {delta_k_error}")));
    }
    let product = delta_r * delta_k;
    let sigma = product * ((delta_k_error / delta_k).powi(2) + (delta_r_error / delta_r).powi(2)).sqrt();
    Ok(EprReport {
        delta_r,
        delta_r_error,
        delta_k,
        delta_k_error,
        product,
        product_sigma: sigma,
        confidence: (sigma > 0.0).then(|| (0.5 - product).abs() / sigma),
        violated: product < 0.5,
        approximate: false,
    })
}

/// Fits the minus-coordinate projection of the position configuration and the
/// sum-coordinate projection of the momentum configuration, then evaluates
/// the criterion in physical units.
pub fn analyze(
    position_minus: &Projection,
    momentum_sum: &Projection,
    cal: &OpticalCalibration,
    opts: FitOptions,
) -> Result<Flagged<EprReport>> {
    cal.validate()?;
    let r = fit_gaussian_width_with(position_minus, opts)?;
    let k = fit_gaussian_width_with(momentum_sum, opts)?;
    let to_phys = |f: &WidthFit, b| (pixel_to_physical(f.width, cal, b), pixel_to_physical(f.width_error, cal, b));
    let (dr, dr_err) = to_phys(&r.value, WidthBasis::Position);
    let (dk, dk_err) = to_phys(&k.value, WidthBasis::Momentum);
    let mut report = epr_criterion(dr, dr_err, dk, dk_err)?;
    report.approximate = r.value.approximate || k.value.approximate;
    let mut warnings = r.warnings;
    warnings.extend(k.warnings);
    Ok(Flagged::with(report, warnings))
}
