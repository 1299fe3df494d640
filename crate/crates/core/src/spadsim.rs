//! Synthetic binary SPAD frame streams.
//!
//! Frames are produced in fixed-size chunks, each with its own RNG substream,
//! so the output does not depend on how many worker threads run.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::rng::{domain, stream};
use crate::twophoton::TwoPhotonState;
use crate::{Error, Result};

/// Frames generated per RNG substream.
pub const CHUNK_FRAMES: usize = 8192;
/// Largest cross-talk offset along either axis.
pub const KERNEL_RADIUS: i32 = 3;
const KERNEL_SIZE: usize = 2 * KERNEL_RADIUS as usize + 1;

const MAGIC: &[u8; 8] = b"SPADSTK1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkTap {
    pub dx: i32,
    pub dy: i32,
    pub probability: f64,
}

/// Probability that an avalanche at a pixel triggers the neighbor at
/// `(dx, dy)`. Offsets are limited to ±3 along each axis and (0, 0) is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CrosstalkTap>", into = "Vec<CrosstalkTap>")]
pub struct CrosstalkKernel {
    probs: [[f64; KERNEL_SIZE]; KERNEL_SIZE],
}

impl Default for CrosstalkKernel {
    fn default() -> Self {
        Self::none()
    }
}

impl CrosstalkKernel {
    pub fn none() -> Self {
        Self { probs: [[0.0; KERNEL_SIZE]; KERNEL_SIZE] }
    }

    pub fn from_taps(taps: &[CrosstalkTap]) -> Result<Self> {
        let mut k = Self::none();
        for t in taps {
            k.set(t.dx, t.dy, t.probability)?;
        }
        Ok(k)
    }

    /// Isotropic kernel `p1·exp(−(r − 1)/decay)` over the full ±3 square.
    pub fn exponential(p1: f64, decay: f64) -> Result<Self> {
        let mut k = Self::none();
        for dy in -KERNEL_RADIUS..=KERNEL_RADIUS {
            for dx in -KERNEL_RADIUS..=KERNEL_RADIUS {
                if (dx, dy) != (0, 0) {
                    let r = ((dx * dx + dy * dy) as f64).sqrt();
                    k.set(dx, dy, p1 * (-(r - 1.0) / decay).exp())?;
                }
            }
        }
        Ok(k)
    }

    pub fn set(&mut self, dx: i32, dy: i32, p: f64) -> Result<()> {
        if dx.abs() > KERNEL_RADIUS || dy.abs() > KERNEL_RADIUS {
            return Err(Error::InvalidParameter(format!("cross-talk offset ({dx}, {dy}) beyond ±3")));
        }
        if (dx, dy) == (0, 0) && p != 0.0 {
            return Err(Error::InvalidParameter("cross-talk kernel must vanish at (0, 0)".into()));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("cross-talk probability {p}")));
        }
        self.probs[(dy + KERNEL_RADIUS) as usize][(dx + KERNEL_RADIUS) as usize] = p;
        Ok(())
    }

    pub fn get(&self, dx: i32, dy: i32) -> f64 {
        if dx.abs() > KERNEL_RADIUS || dy.abs() > KERNEL_RADIUS {
            return 0.0;
        }
        self.probs[(dy + KERNEL_RADIUS) as usize][(dx + KERNEL_RADIUS) as usize]
    }

    pub fn taps(&self) -> Vec<CrosstalkTap> {
        let mut out = Vec::new();
        for dy in -KERNEL_RADIUS..=KERNEL_RADIUS {
            for dx in -KERNEL_RADIUS..=KERNEL_RADIUS {
                let p = self.get(dx, dy);
                if p > 0.0 {
                    out.push(CrosstalkTap { dx, dy, probability: p });
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.taps().is_empty()
    }
}

impl TryFrom<Vec<CrosstalkTap>> for CrosstalkKernel {
    type Error = Error;
    fn try_from(taps: Vec<CrosstalkTap>) -> Result<Self> {
        Self::from_taps(&taps)
    }
}

impl From<CrosstalkKernel> for Vec<CrosstalkTap> {
    fn from(k: CrosstalkKernel) -> Self {
        k.taps()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotPixel {
    /// Row-major pixel index.
    pub pixel: usize,
    /// Extra dark counts per frame (Poisson mean) on top of `dark_rate`.
    pub excess_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub width: usize,
    pub height: usize,
    /// Mean detected pairs per frame.
    pub pair_rate: f64,
    /// Mean uncorrelated single detections per frame.
    #[serde(default)]
    pub singles_rate: f64,
    /// Mean dark counts per pixel per frame.
    #[serde(default)]
    pub dark_rate: f64,
    #[serde(default)]
    pub hot_pixels: Vec<HotPixel>,
    #[serde(default)]
    pub crosstalk: CrosstalkKernel,
    pub seed: u64,
}

impl SensorSpec {
    /// Noise-free sensor of the given size.
    pub fn ideal(width: usize, height: usize, pair_rate: f64, seed: u64) -> Self {
        Self {
            width,
            height,
            pair_rate,
            singles_rate: 0.0,
            dark_rate: 0.0,
            hot_pixels: Vec::new(),
            crosstalk: CrosstalkKernel::none(),
            seed,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid(format!("sensor {}x{}", self.width, self.height)));
        }
        for (name, v) in [
            ("pair_rate", self.pair_rate),
            ("singles_rate", self.singles_rate),
            ("dark_rate", self.dark_rate),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {v}")));
            }
        }
        for h in &self.hot_pixels {
            if h.pixel >= self.pixels() || !(h.excess_rate >= 0.0) || !h.excess_rate.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "hot pixel {} with excess {}",
                    h.pixel, h.excess_rate
                )));
            }
        }
        Ok(())
    }
}

/// Ordered sequence of binary frames, bit-packed row-major, LSB first, each
/// frame starting on a byte boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStack {
    width: usize,
    height: usize,
    frames: usize,
    seed: u64,
    bits: Vec<u8>,
}

impl FrameStack {
    pub fn bytes_per_frame(width: usize, height: usize) -> usize {
        (width * height).div_ceil(8)
    }

    /// Builds a stack from per-frame lists of lit pixel indices.
    pub fn from_lit(width: usize, height: usize, seed: u64, frames: &[Vec<usize>]) -> Result<Self> {
        let n = width * height;
        let bpf = Self::bytes_per_frame(width, height);
        let mut bits = vec![0u8; bpf * frames.len()];
        for (l, lit) in frames.iter().enumerate() {
            for &p in lit {
                if p >= n {
                    return Err(Error::InvalidParameter(format!("pixel {p} outside {width}x{height}")));
                }
                bits[l * bpf + p / 8] |= 1 << (p % 8);
            }
        }
        Ok(Self { width, height, frames: frames.len(), seed, bits })
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

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frame_bytes(&self, l: usize) -> &[u8] {
        let bpf = Self::bytes_per_frame(self.width, self.height);
        &self.bits[l * bpf..(l + 1) * bpf]
    }

    pub fn get(&self, l: usize, pixel: usize) -> bool {
        self.frame_bytes(l)[pixel / 8] >> (pixel % 8) & 1 == 1
    }

    /// Appends the lit pixel indices of frame `l` to `out`, in increasing order.
    pub fn lit_into(&self, l: usize, out: &mut Vec<u32>) {
        out.clear();
        for (b, &byte) in self.frame_bytes(l).iter().enumerate() {
            let mut v = byte;
            while v != 0 {
                let bit = v.trailing_zeros();
                out.push(b as u32 * 8 + bit);
                v &= v - 1;
            }
        }
    }

    pub fn lit(&self, l: usize) -> Vec<u32> {
        let mut out = Vec::new();
        self.lit_into(l, &mut out);
        out
    }

    /// Per-pixel count of frames in which the pixel fired.
    pub fn counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.pixels()];
        let mut buf = Vec::new();
        for l in 0..self.frames {
            self.lit_into(l, &mut buf);
            for &p in &buf {
                counts[p as usize] += 1;
            }
        }
        counts
    }

    /// Per-pixel mean fire probability.
    pub fn mean_image(&self) -> Vec<f64> {
        let m = self.frames.max(1) as f64;
        self.counts().into_iter().map(|c| c as f64 / m).collect()
    }

    /// The first `frames` frames.
    pub fn prefix(&self, frames: usize) -> Result<Self> {
        if frames > self.frames {
            return Err(Error::InvalidParameter(format!(
                "prefix of {frames} frames from a stack of {}",
                self.frames
            )));
        }
        let bpf = Self::bytes_per_frame(self.width, self.height);
        Ok(Self { bits: self.bits[..frames * bpf].to_vec(), frames, ..*self })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_magic(w, MAGIC)?;
        io::write_u32(w, self.width as u32)?;
        io::write_u32(w, self.height as u32)?;
        io::write_u64(w, self.frames as u64)?;
        io::write_u64(w, self.seed)?;
        w.write_all(&self.bits)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, MAGIC)?;
        let width = io::read_u32(r)? as usize;
        let height = io::read_u32(r)? as usize;
        let frames = io::read_u64(r)? as usize;
        let seed = io::read_u64(r)?;
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("frame stack geometry {width}x{height}")));
        }
        let len = Self::bytes_per_frame(width, height)
            .checked_mul(frames)
            .ok_or_else(|| Error::Format("frame stack size overflows".into()))?;
        let mut bits = vec![0u8; len];
        r.read_exact(&mut bits)?;
        io::expect_eof(r)?;
        Ok(Self { width, height, frames, seed, bits })
    }
}

/// Inverse-CDF sampler over a discrete law.
struct Cdf {
    cumulative: Vec<f64>,
}

impl Cdf {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u = rng.random::<f64>() * self.total();
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

struct Source {
    pairs: Cdf,
    singles: Cdf,
    modes: usize,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

struct Generator<'a> {
    sensor: &'a SensorSpec,
    source: Option<&'a Source>,
    hot_fire: Vec<(usize, f64)>,
    taps: Vec<CrosstalkTap>,
}

impl Generator<'_> {
    fn frame(&self, rng: &mut ChaCha8Rng, xrng: &mut ChaCha8Rng, primary: &mut Vec<usize>, out: &mut [u8]) {
        let s = self.sensor;
        let n = s.pixels();
        primary.clear();
        if let Some(src) = self.source {
            for _ in 0..poisson(rng, s.pair_rate) {
                let idx = src.pairs.sample(rng);
                primary.push(idx / src.modes);
                primary.push(idx % src.modes);
            }
            for _ in 0..poisson(rng, s.singles_rate) {
                primary.push(src.singles.sample(rng));
            }
        }
        for _ in 0..poisson(rng, s.dark_rate * n as f64) {
            primary.push(rng.random_range(0..n));
        }
        for &(p, prob) in &self.hot_fire {
            if rng.random::<f64>() < prob {
                primary.push(p);
            }
        }
        primary.sort_unstable();
        primary.dedup();
        for &p in primary.iter() {
            out[p / 8] |= 1 << (p % 8);
        }
        if self.taps.is_empty() {
            return;
        }
        let (w, h) = (s.width as i64, s.height as i64);
        for &p in primary.iter() {
            let (x, y) = ((p % s.width) as i64, (p / s.width) as i64);
            for t in &self.taps {
                let (nx, ny) = (x + t.dx as i64, y + t.dy as i64);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                if xrng.random::<f64>() < t.probability {
                    let q = (ny * w + nx) as usize;
                    out[q / 8] |= 1 << (q % 8);
                }
            }
        }
    }

    fn run(&self, frames: usize, dom: u64) -> Vec<u8> {
        let bpf = FrameStack::bytes_per_frame(self.sensor.width, self.sensor.height);
        let chunks = frames.div_ceil(CHUNK_FRAMES);
        let parts: Vec<Vec<u8>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let count = CHUNK_FRAMES.min(frames - c * CHUNK_FRAMES);
                let mut rng = stream(self.sensor.seed, dom, c as u64);
                let mut xrng = stream(self.sensor.seed, domain::CROSSTALK, (dom << 32) | c as u64);
                let mut buf = vec![0u8; count * bpf];
                let mut primary = Vec::new();
                for f in 0..count {
                    self.frame(&mut rng, &mut xrng, &mut primary, &mut buf[f * bpf..(f + 1) * bpf]);
                }
                buf
            })
            .collect();
        parts.concat()
    }
}

fn generator<'a>(sensor: &'a SensorSpec, source: Option<&'a Source>) -> Generator<'a> {
    Generator {
        sensor,
        source,
        hot_fire: sensor.hot_pixels.iter().map(|h| (h.pixel, 1.0 - (-h.excess_rate).exp())).collect(),
        taps: sensor.crosstalk.taps(),
    }
}

/// Simulates `frames` binary frames of photon pairs drawn from `|ψ|²` plus
/// detector noise. The state's grid must match the sensor geometry.
pub fn simulate_frames(psi: &TwoPhotonState, sensor: &SensorSpec, frames: usize) -> Result<FrameStack> {
    sensor.validate()?;
    if frames < 2 {
        return Err(Error::TooFewFrames { needed: 2, got: frames });
    }
    let g = psi.grid();
    if g.width != sensor.width || g.height != sensor.height {
        return Err(Error::ShapeMismatch(format!(
            "state grid {}x{} does not match sensor {}x{}",
            g.width, g.height, sensor.width, sensor.height
        )));
    }
    let total = psi.total_probability();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(total));
    }
    let prob = psi.probability();
    let marginal = psi.marginal();
    let cols: Vec<f64> = (0..g.modes()).map(|b| prob.column(b).sum()).collect();
    let source = Source {
        pairs: Cdf::new(prob.iter().copied()),
        singles: Cdf::new(marginal.iter().zip(&cols).map(|(r, c)| 0.5 * (r + c))),
        modes: g.modes(),
    };
    let bits = generator(sensor, Some(&source)).run(frames, domain::FRAMES);
    Ok(FrameStack { width: sensor.width, height: sensor.height, frames, seed: sensor.seed, bits })
}

/// Shutter-closed acquisition: dark counts, hot pixels and cross-talk only.
pub fn dark_stack(sensor: &SensorSpec, frames: usize) -> Result<FrameStack> {
    sensor.validate()?;
    if frames < 2 {
        return Err(Error::TooFewFrames { needed: 2, got: frames });
    }
    let bits = generator(sensor, None).run(frames, domain::DARK);
    Ok(FrameStack { width: sensor.width, height: sensor.height, frames, seed: sensor.seed, bits })
}
