//! Sensor artifact characterization: cross-talk reference, cross-talk
//! correction of measured JPDs, and hot-pixel masks.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::io;
use crate::jpd::{accumulate_jpd, project_minus, Jpd};
use crate::spadsim::{FrameStack, KERNEL_RADIUS};
use crate::{Error, Flagged, Result, Warning};

/// Dark-frame count below which the cross-talk reference is flagged as noisy.
pub const RECOMMENDED_DARK_FRAMES: usize = 100_000;
/// Separation of the reference pixels used to scale the correction.
pub const REFERENCE_OFFSET: i64 = 3;
/// Reference-ring entries this far above the cross-talk prediction are
/// treated as genuine correlations.
const OUTLIER_SIGMAS: f64 = 5.0;
const MAX_REFERENCE_PASSES: usize = 5;
const PREDICTION_PASSES: usize = 3;
const SUPPORT_SIGMAS: f64 = 5.0;

/// Shutter-closed JPD `Γ⁰` and the mean dark image it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CrosstalkReference {
    pub gamma0: Jpd,
    pub intensity: Vec<f64>,
}

impl CrosstalkReference {
    pub fn frames_used(&self) -> usize {
        self.gamma0.frames_used()
    }

    /// Jpd container followed by the mean dark image.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.gamma0.write_to(w)?;
        io::write_f64_slice(w, &self.intensity)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let gamma0 = Jpd::read_body(r)?;
        let intensity = io::read_f64_vec(r, gamma0.pixels())?;
        io::expect_eof(r)?;
        Ok(Self { gamma0, intensity })
    }
}

fn chebyshev(dx: i64, dy: i64) -> i64 {
    dx.abs().max(dy.abs())
}

/// Builds `Γ⁰` from a dark stack and checks that the minus-coordinate
/// projection vanishes beyond ±3 pixels.
pub fn characterize_crosstalk(dark: &FrameStack) -> Result<Flagged<CrosstalkReference>> {
    if dark.frames() == 0 {
        return Err(Error::TooFewFrames { needed: 2, got: 0 });
    }
    let gamma0 = accumulate_jpd(dark)?;
    let mut warnings = Vec::new();
    if dark.frames() < RECOMMENDED_DARK_FRAMES {
        warnings.push(Warning::FewDarkFrames { frames: dark.frames(), recommended: RECOMMENDED_DARK_FRAMES });
    }
    warnings.extend(support_violations(&gamma0));
    Ok(Flagged::with(CrosstalkReference { gamma0, intensity: dark.mean_image() }, warnings))
}

fn support_violations(gamma0: &Jpd) -> Vec<Warning> {
    let p = project_minus(gamma0);
    let mut out = Vec::new();
    for ((r, c), &v) in p.image.indexed_iter() {
        let dx = c as i64 - p.origin.0 as i64;
        let dy = r as i64 - p.origin.1 as i64;
        let sd = p.variance[[r, c]].sqrt();
        if chebyshev(dx, dy) > KERNEL_RADIUS as i64 && sd > 0.0 && v > SUPPORT_SIGMAS * sd {
            out.push(Warning::CrosstalkSupportExceeded { dx, dy, sigmas: v / sd });
        }
    }
    out
}

/// Summed dark coincidences within the kernel support, in standard errors.
fn kernel_significance(gamma0: &Jpd) -> f64 {
    let p = project_minus(gamma0);
    let (mut sum, mut var) = (0.0, 0.0);
    for ((r, c), &v) in p.image.indexed_iter() {
        let dx = c as i64 - p.origin.0 as i64;
        let dy = r as i64 - p.origin.1 as i64;
        let d = chebyshev(dx, dy);
        if d > 0 && d <= KERNEL_RADIUS as i64 {
            sum += v;
            var += p.variance[[r, c]];
        }
    }
    if var > 0.0 {
        sum / var.sqrt()
    } else if sum > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Symmetrized per-trigger cross-talk probability recovered from `Γ⁰`,
/// indexed `[dy + 3][dx + 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelEstimate {
    pub value: [[f64; 7]; 7],
    pub sigma: [[f64; 7]; 7],
    /// Inferred primary (pre-cross-talk) firing probability per pixel.
    pub primary_rate: Vec<f64>,
}

impl KernelEstimate {
    pub fn get(&self, dx: i32, dy: i32) -> (f64, f64) {
        let (r, c) = ((dy + KERNEL_RADIUS) as usize, (dx + KERNEL_RADIUS) as usize);
        (self.value[r][c], self.sigma[r][c])
    }
}

/// Fits the dark-count cross-talk model to `Γ⁰`.
///
/// Each pixel fires as a primary with probability `q_a` and each primary
/// triggers the pixel at offset δ with probability `κ(δ)`, one generation deep.
/// For binary outcomes `Cov(a, b) = P(¬a¬b) − P(¬a)P(¬b)`, and both terms are
/// closed-form products over the primaries that could trigger `a` or `b`,
/// including third pixels that trigger both. The symmetrized κ is found by
/// Newton steps on `P⁻(δ)` and `q` by fixed point on the observed fire rates.
pub fn estimate_kernel(reference: &CrosstalkReference) -> KernelEstimate {
    let g = &reference.gamma0;
    let (w, h) = (g.width() as i64, g.height() as i64);
    let n = g.pixels();
    let masked = g.masked();
    let proj = project_minus(g);
    let p = &reference.intensity;
    let rad = KERNEL_RADIUS as i64;
    let idx = |dx: i64, dy: i64| ((dy + rad) as usize, (dx + rad) as usize);
    let k_at = |k: &[[f64; 7]; 7], dx: i64, dy: i64| -> f64 {
        if chebyshev(dx, dy) > rad {
            0.0
        } else {
            let (r, c) = idx(dx, dy);
            k[r][c]
        }
    };
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
    let observed = |dx: i64, dy: i64| proj.value(dx, dy).unwrap_or(0.0);

    let mut q = p.clone();
    let mut kappa = [[0.0; 7]; 7];
    let mut slope = [[0.0; 7]; 7];
    for _ in 0..12 {
        // P(no other pixel triggers a).
        let survive: Vec<f64> = (0..n as i64)
            .map(|a| {
                let (ax, ay) = (a % w, a / w);
                let mut s = 1.0;
                for dy in -rad..=rad {
                    for dx in -rad..=rad {
                        let (cx, cy) = (ax - dx, ay - dy);
                        if (dx, dy) != (0, 0) && inside(cx, cy) {
                            s *= 1.0 - q[(cy * w + cx) as usize] * k_at(&kappa, dx, dy);
                        }
                    }
                }
                s
            })
            .collect();
        let mut model = [[0.0; 7]; 7];
        for dy in -rad..=rad {
            for dx in -rad..=rad {
                if (dx, dy) == (0, 0) {
                    continue;
                }
                let (mut m, mut d) = (0.0, 0.0);
                for by in 0..h {
                    for bx in 0..w {
                        let (ax, ay) = (bx + dx, by + dy);
                        if !inside(ax, ay) {
                            continue;
                        }
                        let (a, b) = ((ay * w + ax) as usize, (by * w + bx) as usize);
                        if masked[a] || masked[b] {
                            continue;
                        }
                        // Third pixels within reach of both a and b.
                        let mut common = 1.0;
                        for cy in (ay.max(by) - rad).max(0)..=(ay.min(by) + rad).min(h - 1) {
                            for cx in (ax.max(bx) - rad).max(0)..=(ax.min(bx) + rad).min(w - 1) {
                                let c = (cy * w + cx) as usize;
                                if c == a || c == b {
                                    continue;
                                }
                                let ka = k_at(&kappa, ax - cx, ay - cy);
                                let kb = k_at(&kappa, bx - cx, by - cy);
                                let both = 1.0 - q[c] * (ka + kb - ka * kb);
                                common *= both / ((1.0 - q[c] * ka) * (1.0 - q[c] * kb));
                            }
                        }
                        let k_ba = k_at(&kappa, dx, dy);
                        let k_ab = k_at(&kappa, -dx, -dy);
                        let base = (1.0 - q[a]) * (1.0 - q[b]) * survive[a] * survive[b];
                        m += base * (common / ((1.0 - q[b] * k_ba) * (1.0 - q[a] * k_ab)) - 1.0);
                        d += base * (q[a] + q[b]);
                    }
                }
                let (r, c) = idx(dx, dy);
                model[r][c] = m;
                slope[r][c] = d;
            }
        }
        for dy in -rad..=rad {
            for dx in -rad..=rad {
                let (r, c) = idx(dx, dy);
                if slope[r][c] > 0.0 {
                    let sym_obs = 0.5 * (observed(dx, dy) + observed(-dx, -dy));
                    let (r2, c2) = idx(-dx, -dy);
                    let sym_model = 0.5 * (model[r][c] + model[r2][c2]);
                    kappa[r][c] += (sym_obs - sym_model) / slope[r][c];
                }
            }
        }
        for a in 0..n {
            q[a] = if survive[a] > 0.0 { (1.0 - (1.0 - p[a]) / survive[a]).clamp(0.0, 1.0) } else { p[a] };
        }
    }
    let mut sigma = [[0.0; 7]; 7];
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            let (r, c) = idx(dx, dy);
            let (py, px) = (proj.origin.1 as i64 + dy, proj.origin.0 as i64 + dx);
            let (ph, pw) = proj.variance.dim();
            if px < 0 || py < 0 || px >= pw as i64 || py >= ph as i64 {
                continue;
            }
            let var = proj.variance[[py as usize, px as usize]];
            if slope[r][c] > 0.0 {
                sigma[r][c] = var.sqrt() / slope[r][c];
            }
        }
    }
    KernelEstimate { value: kappa, sigma, primary_rate: q }
}

/// `Γ_ab = Γraw_ab − ½(α_a + α_b) · X_ab` for `0 < |a − b|∞ ≤ 3`.
///
/// `X` is the cross-talk covariance to first order in the kernel `κ`
/// estimated from the dark reference. A primary at `c` copies itself to `b`
/// with probability `κ(b − c)`, which adds `κ(b − c)·Γ_ac` to `Γ_ab`, and the
/// `c = a` term is `κ(b − a)·(I_a − P_ab)(1 − I_a)` since a trigger into a pixel
/// that already fired is lost (`P_ab` is the joint firing probability), and a
/// third primary `c` triggering both adds `κ(a − c)κ(b − c)·I_c(1 − I_c)`. The
/// rates `I` are primary rates, inferred from the image as in the dark fit. The
/// genuine `Γ` on the right is taken from the corrected JPD, so the
/// correction runs a few fixed-point passes. `α_b` absorbs any remaining
/// mismatch of the dark kernel and is fitted on the pairs of `b` with the
/// pixels on its Chebyshev ring at distance 3. Ring entries far above the
/// prediction are genuine correlations and are left out of the fit. Pixels
/// without a usable ring fall back to the sensor-wide ratio.
pub fn correct_crosstalk(
    raw: &Jpd,
    reference: &CrosstalkReference,
    intensity: &[f64],
) -> Result<Flagged<Jpd>> {
    let g0 = &reference.gamma0;
    if raw.width() != g0.width() || raw.height() != g0.height() || intensity.len() != raw.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "raw {}x{}, reference {}x{}, intensity of {} pixels",
            raw.width(),
            raw.height(),
            g0.width(),
            g0.height(),
            intensity.len()
        )));
    }
    if g0.gamma().iter().all(|&v| v == 0.0) {
        return Ok(Flagged::clean(raw.clone()));
    }
    let sigmas = kernel_significance(g0);
    if !(sigmas >= SUPPORT_SIGMAS) {
        return Ok(Flagged::with(raw.clone(), vec![Warning::CrosstalkInsignificant { sigmas }]));
    }
    let (w, h) = (raw.width() as i64, raw.height() as i64);
    let n = raw.pixels();
    let kernel = estimate_kernel(reference);
    let gr = raw.gamma();
    let masked = raw.masked();
    let rad = KERNEL_RADIUS as i64;
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
    let kappa = |dx: i64, dy: i64| kernel.value[(dy + rad) as usize][(dx + rad) as usize].max(0.0);
    // Unmasked neighbours of every pixel within the kernel, with κ of the hop.
    let hood: Vec<Vec<(usize, f64)>> = (0..n as i64)
        .map(|b| {
            let (bx, by) = (b % w, b / w);
            let mut v = Vec::new();
            for dy in -rad..=rad {
                for dx in -rad..=rad {
                    let (cx, cy) = (bx - dx, by - dy);
                    if (dx, dy) != (0, 0) && inside(cx, cy) && !masked[(cy * w + cx) as usize] {
                        v.push(((cy * w + cx) as usize, kappa(dx, dy)));
                    }
                }
            }
            v
        })
        .collect();
    // Every unmasked pair with 0 < |a − b|∞ ≤ 3, and its Chebyshev distance.
    let mut pairs = Vec::new();
    for a in 0..n {
        if masked[a] {
            continue;
        }
        let (ax, ay) = ((a as i64) % w, (a as i64) / w);
        for &(b, _) in &hood[a] {
            let (bx, by) = ((b as i64) % w, (b as i64) / w);
            pairs.push((a, b, chebyshev(bx - ax, by - ay)));
        }
    }
    // Primary firing rates: the measured image also counts triggered pixels.
    let seen: Vec<f64> = intensity.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let mut light = seen.clone();
    for _ in 0..12 {
        light = (0..n)
            .map(|a| {
                let survive: f64 = hood[a].iter().map(|&(c, k)| 1.0 - light[c] * k).product();
                if survive > 0.0 { (1.0 - (1.0 - seen[a]) / survive).clamp(0.0, 1.0) } else { seen[a] }
            })
            .collect();
    }

    let mut gamma = gr.clone();
    let mut warnings = Vec::new();
    let mut alpha = vec![0.0; n];
    let mut alpha_var = vec![0.0; n];
    let mut predicted = vec![0.0; pairs.len()];
    for _ in 0..PREDICTION_PASSES {
        let cov = |a: usize, c: usize, other: usize| {
            if a == c {
                let joint = (gamma[[a, other]] + light[a] * light[other]).clamp(0.0, light[a].min(light[other]));
                (light[a] - joint) * (1.0 - light[a])
            } else {
                gamma[[a, c]]
            }
        };
        for (x, &(a, b, _)) in predicted.iter_mut().zip(&pairs) {
            let into_b: f64 = hood[b].iter().filter(|&&(c, _)| c != b).map(|&(c, k)| k * cov(a, c, b)).sum();
            let into_a: f64 = hood[a].iter().filter(|&&(c, _)| c != a).map(|&(c, k)| k * cov(b, c, a)).sum();
            // A third primary can trigger both pixels.
            let (ax, ay) = ((a as i64) % w, (a as i64) / w);
            let both: f64 = hood[b]
                .iter()
                .filter(|&&(c, _)| c != a)
                .map(|&(c, k)| {
                    let (dx, dy) = (ax - (c as i64) % w, ay - (c as i64) / w);
                    if chebyshev(dx, dy) > rad { 0.0 } else { k * kappa(dx, dy) * light[c] * (1.0 - light[c]) }
                })
                .sum();
            *x = into_b + into_a + both;
        }
        let ring: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].2 == REFERENCE_OFFSET).collect();
        let mut keep = vec![true; ring.len()];
        let mut num = vec![0.0; n];
        let mut num_var = vec![0.0; n];
        let mut den = vec![0.0; n];
        let mut global = None;
        for _ in 0..MAX_REFERENCE_PASSES {
            num.iter_mut().for_each(|v| *v = 0.0);
            num_var.iter_mut().for_each(|v| *v = 0.0);
            den.iter_mut().for_each(|v| *v = 0.0);
            for (&i, _) in ring.iter().zip(&keep).filter(|(_, &k)| k) {
                let (a, b, _) = pairs[i];
                num[b] += gr[[a, b]];
                num_var[b] += raw.variance()[[a, b]];
                den[b] += predicted[i];
            }
            let (gnum, gden): (f64, f64) = (num.iter().sum(), den.iter().sum());
            global = (gden > 0.0).then(|| gnum / gden);
            let Some(g) = global else { break };
            let mut changed = false;
            for (k, &i) in keep.iter_mut().zip(&ring) {
                let (a, b, _) = pairs[i];
                if *k && gr[[a, b]] - g * predicted[i] > OUTLIER_SIGMAS * raw.variance()[[a, b]].sqrt() {
                    *k = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        warnings.clear();
        let excluded = keep.iter().filter(|&&k| !k).count();
        if excluded > 0 {
            warnings.push(Warning::ReferenceEntriesExcluded { entries: excluded });
        }
        if global.is_none() {
            warnings.push(Warning::AlphaUndetermined);
        }
        // A per-pixel ratio with a tiny reference denominator is mostly noise.
        let usable = den.iter().filter(|&&d| d > 0.0).count().max(1);
        let min_den = 0.25 * den.iter().sum::<f64>() / usable as f64;
        let mut fallback = 0;
        for b in 0..n {
            (alpha[b], alpha_var[b]) = if den[b] > min_den {
                (num[b] / den[b], num_var[b] / (den[b] * den[b]))
            } else {
                fallback += 1;
                let total: f64 = den.iter().sum();
                (global.unwrap_or(0.0), num_var.iter().sum::<f64>() / (total * total))
            };
        }
        if fallback > 0 && global.is_some() {
            warnings.push(Warning::AlphaFallback { pixels: fallback });
        }

        let mut next = gr.clone();
        for (&(a, b, _), &x) in pairs.iter().zip(&predicted) {
            next[[a, b]] -= 0.5 * (alpha[a] + alpha[b]) * x;
        }
        gamma = next;
    }

    let mut variance = raw.variance().clone();
    for (&(a, b, _), &x) in pairs.iter().zip(&predicted) {
        variance[[a, b]] += 0.25 * x * x * (alpha_var[a] + alpha_var[b]);
        let (ax, ay, bx, by) = ((a as i64) % w, (a as i64) / w, (b as i64) % w, (b as i64) / w);
        let (k, s) = kernel.get((bx - ax) as i32, (by - ay) as i32);
        if k > 0.0 {
            let removed = gr[[a, b]] - gamma[[a, b]];
            variance[[a, b]] += (removed * s / k).powi(2);
        }
    }
    let out = raw.map_gamma(gamma).with_variance(variance)?;
    Ok(Flagged::with(out, warnings))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HotPixelMask {
    pub width: usize,
    pub height: usize,
    pub threshold_fraction: f64,
    pub masked: Vec<bool>,
}

impl HotPixelMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, threshold_fraction: 0.0, masked: vec![false; width * height] }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.masked[y * self.width + x]
    }

    /// Masked pixels as `(x, y)`, row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        (0..self.masked.len())
            .filter(|&p| self.masked[p])
            .map(|p| (p % self.width, p / self.width))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# width={} height={} threshold={}\n",
            self.width, self.height, self.threshold_fraction
        );
        for (x, y) in self.pixels() {
            out.push_str(&format!("{x} {y}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty hot-pixel file".into()))?;
        let field = |key: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|t| t.strip_prefix(key))
                .ok_or_else(|| Error::Format(format!("hot-pixel header lacks {key}")))
        };
        let parse_err = |e: std::num::ParseIntError| Error::Format(e.to_string());
        let width: usize = field("width=")?.parse().map_err(parse_err)?;
        let height: usize = field("height=")?.parse().map_err(parse_err)?;
        let threshold_fraction: f64 = field("threshold=")?
            .parse()
            .map_err(|e: std::num::ParseFloatError| Error::Format(e.to_string()))?;
        let mut mask = Self { width, height, threshold_fraction, masked: vec![false; width * height] };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace().map(|t| t.parse::<usize>().map_err(parse_err));
            let (x, y) = match (it.next(), it.next(), it.next()) {
                (Some(x), Some(y), None) => (x?, y?),
                _ => return Err(Error::Format(format!("hot-pixel line {line:?}"))),
            };
            if x >= width || y >= height {
                return Err(Error::Format(format!("hot pixel ({x}, {y}) outside sensor")));
            }
            mask.masked[y * width + x] = true;
        }
        Ok(mask)
    }
}

/// Masks every pixel whose summed dark counts reach `threshold_fraction`
/// of the brightest pixel's.
pub fn find_hot_pixels(dark: &FrameStack, threshold_fraction: f64) -> Result<HotPixelMask> {
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("threshold fraction {threshold_fraction}")));
    }
    let counts = dark.counts();
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut mask = HotPixelMask::empty(dark.width(), dark.height());
    mask.threshold_fraction = threshold_fraction;
    if max == 0 {
        return Ok(mask);
    }
    let cut = threshold_fraction * max as f64;
    for (m, &c) in mask.masked.iter_mut().zip(&counts) {
        *m = c as f64 >= cut;
    }
    Ok(mask)
}

/// Dense `[dy + 3][dx + 3]` view of a cross-talk JPD projection, for reports.
pub fn kernel_table(est: &KernelEstimate) -> Array2<f64> {
    Array2::from_shape_fn((7, 7), |(r, c)| est.value[r][c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spadsim::{dark_stack, CrosstalkKernel, HotPixel, SensorSpec};

    #[test]
    fn hot_pixel_threshold_rules() {
        let frames: Vec<Vec<usize>> = (0..100)
            .map(|l| {
                let mut v = vec![3];
                if l % 4 == 0 {
                    v.push(5);
                }
                if l % 20 == 0 {
                    v.push(7);
                }
                v
            })
            .collect();
        let st = FrameStack::from_lit(4, 2, 0, &frames).unwrap();
        let m = find_hot_pixels(&st, 0.1).unwrap();
        assert_eq!(m.pixels(), vec![(3, 0), (1, 1)]);
        let top = find_hot_pixels(&st, 1.0).unwrap();
        assert_eq!(top.pixels(), vec![(3, 0)]);
        assert!(find_hot_pixels(&st, 0.0).is_err());
        let silent = FrameStack::from_lit(4, 2, 0, &[vec![], vec![]]).unwrap();
        assert_eq!(find_hot_pixels(&silent, 0.1).unwrap().count(), 0);
        let back = HotPixelMask::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(HotPixelMask::from_text("# width=2 height=2 threshold=0.1\n5 0\n").is_err());
    }

    #[test]
    fn zero_reference_leaves_raw_untouched() {
        let frames: Vec<Vec<usize>> = (0..200).map(|l| vec![l % 9, (l * 5 + 1) % 9]).collect();
        let raw = accumulate_jpd(&FrameStack::from_lit(3, 3, 0, &frames).unwrap()).unwrap();
        let zero = Jpd::from_gamma(3, 3, 10, Array2::zeros((9, 9))).unwrap();
        let reference = CrosstalkReference { gamma0: zero, intensity: vec![0.0; 9] };
        let out = correct_crosstalk(&raw, &reference, &[0.1; 9]).unwrap();
        assert!(out.warnings.is_empty());
        assert_eq!(out.value, raw);
    }

    #[test]
    fn dark_shaped_raw_is_removed_under_its_own_intensity() {
        let mut s = SensorSpec::ideal(9, 9, 0.0, 12);
        s.dark_rate = 0.02;
        s.crosstalk = CrosstalkKernel::exponential(0.01, 0.8).unwrap();
        let reference = characterize_crosstalk(&dark_stack(&s, 400_000).unwrap()).unwrap().value;
        let raw = reference.gamma0.clone();
        let out = correct_crosstalk(&raw, &reference, &reference.intensity).unwrap();
        let (g, v) = (out.value.gamma(), out.value.variance());
        let worst = g.iter().zip(v).filter(|(_, &v)| v > 0.0).map(|(g, v)| g.abs() / v.sqrt()).fold(0.0, f64::max);
        let removed: f64 = (raw.gamma() - g).sum();
        assert!(removed > 0.9 * raw.gamma().sum(), "removed {removed}");
        assert!(worst < 4.5, "worst residual {worst} sigma");
    }

    #[test]
    fn vanishing_reference_ring_gives_up() {
        let mut s = SensorSpec::ideal(3, 3, 0.0, 13);
        s.dark_rate = 0.05;
        s.crosstalk = CrosstalkKernel::exponential(0.05, 1.0).unwrap();
        let reference = characterize_crosstalk(&dark_stack(&s, 100_000).unwrap()).unwrap().value;
        let raw = reference.gamma0.clone();
        let out = correct_crosstalk(&raw, &reference, &reference.intensity).unwrap();
        assert_eq!(out.warnings, vec![Warning::AlphaUndetermined]);
        assert_eq!(out.value.gamma(), raw.gamma());
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let a = Jpd::from_gamma(2, 2, 1, Array2::zeros((4, 4))).unwrap();
        let b = Jpd::from_gamma(1, 4, 1, Array2::zeros((4, 4))).unwrap();
        let reference = CrosstalkReference { gamma0: b, intensity: vec![0.0; 4] };
        assert!(correct_crosstalk(&a, &reference, &[0.0; 4]).is_err());
    }

    #[test]
    fn dark_reference_flags_short_stacks_and_roundtrips() {
        let mut s = SensorSpec::ideal(5, 5, 0.0, 8);
        s.dark_rate = 0.02;
        s.hot_pixels = vec![HotPixel { pixel: 7, excess_rate: 0.3 }];
        s.crosstalk = CrosstalkKernel::exponential(0.02, 1.0).unwrap();
        let r = characterize_crosstalk(&dark_stack(&s, 2000).unwrap()).unwrap();
        assert!(matches!(r.warnings[0], Warning::FewDarkFrames { frames: 2000, .. }));
        let mut buf = Vec::new();
        r.value.write_to(&mut buf).unwrap();
        assert_eq!(CrosstalkReference::read_from(&mut buf.as_slice()).unwrap(), r.value);
    }
}
