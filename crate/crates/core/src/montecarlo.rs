//! Certified dimension versus frame count under an elementwise Gaussian
//! model of the correlation matrices.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{certified_dimension, fidelity_bound, CorrelationMatrix};
use crate::rng::{domain, stream};
use crate::twophoton::Basis;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSpec {
    #[serde(default = "default_d")]
    pub d: usize,
    /// Mean of the diagonal entries.
    pub alpha: f64,
    /// Mean of the off-diagonal entries; 0 for the maximally entangled model.
    #[serde(default)]
    pub alpha_prime: f64,
    /// Noise scale: every entry has standard deviation `K/√N`.
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_frames")]
    pub frames: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
}

fn default_d() -> usize {
    45
}

fn default_k() -> f64 {
    1.0
}

fn default_trials() -> usize {
    100
}

/// `10³ … 10⁹` in half-decade steps.
pub fn default_frames() -> Vec<f64> {
    (0..=12).map(|i| 10f64.powf(3.0 + 0.5 * i as f64)).collect()
}

impl PlateauSpec {
    /// Maximally entangled model with `α = 1/d`.
    pub fn maximally_entangled(d: usize, seed: u64) -> Self {
        Self {
            d,
            alpha: 1.0 / d as f64,
            alpha_prime: 0.0,
            k: 1.0,
            frames: default_frames(),
            trials: default_trials(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidParameter(format!("dimension {}", self.d)));
        }
        if !(self.alpha > self.alpha_prime) || !(self.alpha_prime >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need alpha > alpha_prime >= 0, got {} and {}",
                self.alpha, self.alpha_prime
            )));
        }
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(Error::InvalidParameter(format!("noise scale {}", self.k)));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be positive".into()));
        }
        if let Some(n) = self.frames.iter().find(|&&n| !(n >= 1.0)) {
            return Err(Error::InvalidParameter(format!("frame count {n}")));
        }
        Ok(())
    }
}

/// One position/momentum pair of noisy correlation matrices. The standard
/// normal draws depend only on the trial, so a trial sees the same noise
/// pattern, scaled by `K/√N`, at every frame count.
pub fn synth_correlation_pair(
    spec: &PlateauSpec,
    frames: f64,
    trial: usize,
) -> Result<(CorrelationMatrix, CorrelationMatrix)> {
    spec.validate()?;
    if !(frames >= 1.0) {
        return Err(Error::InvalidParameter(format!("frame count {frames}")));
    }
    let d = spec.d;
    let sigma = spec.k / frames.sqrt();
    let mut rng = stream(spec.seed, domain::PLATEAU, trial as u64);
    let mut draw = || {
        Array2::from_shape_fn((d, d), |(m, n)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = if m == n { spec.alpha } else { spec.alpha_prime };
            mean + sigma * z
        })
    };
    let pos = draw();
    let mom = draw();
    Ok((CorrelationMatrix::new(pos, Basis::Position)?, CorrelationMatrix::new(mom, Basis::Momentum)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauPoint {
    pub frames: f64,
    pub mean_f: f64,
    pub std_f: f64,
    /// Standard error of `mean_f`.
    pub sem_f: f64,
    pub mean_r: f64,
    pub std_r: f64,
    /// Certified dimension of the trial-averaged bound.
    pub r_of_mean_f: usize,
    /// Trials whose summed counts were not positive in some basis; they
    /// enter the averages with `F̃ = 0` and `r = 0`.
    pub degenerate: usize,
}

/// Per-trial bounds and certified dimensions at one frame count.
pub fn trial_bounds(spec: &PlateauSpec, frames: f64) -> Result<Vec<(f64, usize, bool)>> {
    spec.validate()?;
    (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let (pos, mom) = synth_correlation_pair(spec, frames, t)?;
            match fidelity_bound(&pos, &mom) {
                Ok(rep) => Ok((rep.f_tilde, rep.certified_r, false)),
                Err(Error::ZeroCounts) => Ok((0.0, 0, true)),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = if n > 1.0 { xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn plateau_point(spec: &PlateauSpec, frames: f64) -> Result<PlateauPoint> {
    let trials = trial_bounds(spec, frames)?;
    let (mean_f, std_f) = mean_std(trials.iter().map(|t| t.0));
    let (mean_r, std_r) = mean_std(trials.iter().map(|t| t.1 as f64));
    Ok(PlateauPoint {
        frames,
        mean_f,
        std_f,
        sem_f: std_f / (trials.len() as f64).sqrt(),
        mean_r,
        std_r,
        r_of_mean_f: certified_dimension(mean_f, spec.d),
        degenerate: trials.iter().filter(|t| t.2).count(),
    })
}

pub fn plateau_curve(spec: &PlateauSpec) -> Result<Vec<PlateauPoint>> {
    spec.validate()?;
    spec.frames.iter().map(|&n| plateau_point(spec, n)).collect()
}

/// `N, mean_F, std_F, mean_r` table.
pub fn curve_csv(points: &[PlateauPoint]) -> String {
    let mut out = String::from("N,mean_F,std_F,mean_r\n");
    for p in points {
        out.push_str(&format!("{:e},{:e},{:e},{}\n", p.frames, p.mean_f, p.std_f, p.mean_r));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauCheck {
    pub at_max: PlateauPoint,
    pub at_quarter: PlateauPoint,
    /// `|F̃(N_max) − F̃(N_max/4)|` in units of the combined standard error.
    pub separation: f64,
    pub plateaued: bool,
}

/// Compares the mean bound at the largest frame count with the one at a
/// quarter of it; a plateau is declared within two standard errors.
pub fn plateau_check(spec: &PlateauSpec) -> Result<PlateauCheck> {
    spec.validate()?;
    let n_max = spec.frames.iter().cloned().fold(f64::NAN, f64::max);
    if !(n_max >= 4.0) {
        return Err(Error::InvalidParameter("plateau check needs N_max >= 4".into()));
    }
    let at_max = plateau_point(spec, n_max)?;
    let at_quarter = plateau_point(spec, n_max / 4.0)?;
    let se = (at_max.sem_f.powi(2) + at_quarter.sem_f.powi(2)).sqrt();
    let diff = (at_max.mean_f - at_quarter.mean_f).abs();
    let separation = if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(PlateauCheck { at_max, at_quarter, separation, plateaued: separation < 2.0 })
}
