use std::f64::consts::FRAC_PI_2;

use ndarray::Array2;
use num_complex::Complex64;
use rand_distr::{Distribution, Poisson};

use super::{ModeGrid, TransferMatrix};
use crate::rng::{domain, stream};
use crate::{Error, Flagged, Result, Warning};

/// Shot noise applied to the simulated camera intensities.
#[derive(Clone, Copy, Debug)]
pub struct TmNoise {
    /// Mean detected counts per output pixel per exposure.
    pub counts_per_pixel: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct MeasuredTm {
    /// Estimate of `D′ · T`, with `D′ = diag(conj(reference field))`.
    pub matrix: TransferMatrix,
    pub unreliable_rows: Vec<usize>,
}

const STEPS: [f64; 4] = [0.0, FRAC_PI_2, 2.0 * FRAC_PI_2, 3.0 * FRAC_PI_2];

/// Simulates a four-step phase-shifting interferometric TM measurement with
/// intensity-only detection.
///
/// Macro-pixel `reference_mode` stays at phase 0 while each probe macro-pixel
/// `k` is stepped through {0, π/2, π, 3π/2}. Demodulating
/// `¼ Σ_φ I_φ e^{−iφ}` yields `conj(r_j) · T_jk`, where `r` is the reference's
/// output field: the true matrix up to an unknown output-side diagonal.
pub fn measure_tm(
    medium: &TransferMatrix,
    slm_grid: ModeGrid,
    reference_mode: usize,
    noise: Option<TmNoise>,
) -> Result<Flagged<MeasuredTm>> {
    let t = medium.entries();
    let (rows, cols) = t.dim();
    if slm_grid.modes() != cols {
        return Err(Error::ShapeMismatch(format!(
            "SLM grid has {} macro-pixels, medium has {} inputs",
            slm_grid.modes(),
            cols
        )));
    }
    if reference_mode >= cols {
        return Err(Error::InvalidParameter(format!("reference mode {reference_mode} out of range")));
    }
    let reference = t.column(reference_mode).to_owned();

    let scale = noise.map(|n| {
        let mean_ref = reference.iter().map(|z| z.norm_sqr()).sum::<f64>() / rows as f64;
        let mean_probe = t.iter().map(|z| z.norm_sqr()).sum::<f64>() / t.len() as f64;
        n.counts_per_pixel / (mean_ref + mean_probe)
    });

    let mut estimate = Array2::<Complex64>::zeros((rows, cols));
    for k in 0..cols {
        let mut rng = noise.map(|n| stream(n.seed, domain::TM_NOISE, k as u64));
        for j in 0..rows {
            let r = reference[j];
            let probe = if k == reference_mode { Complex64::new(0.0, 0.0) } else { t[[j, k]] };
            let base = if k == reference_mode { r } else { Complex64::new(0.0, 0.0) };
            let mut acc = Complex64::new(0.0, 0.0);
            for &phi in &STEPS {
                let step = Complex64::from_polar(1.0, phi);
                // The reference macro-pixel probes itself: both halves step together.
                let field = if k == reference_mode { base + step * r } else { r + step * probe };
                let mut intensity = field.norm_sqr();
                if let (Some(rng), Some(s)) = (rng.as_mut(), scale) {
                    let mean = intensity * s;
                    let counts = if mean > 0.0 {
                        Poisson::new(mean).map(|p| p.sample(rng)).unwrap_or(mean)
                    } else {
                        0.0
                    };
                    intensity = counts / s;
                }
                acc += intensity * step.conj();
            }
            estimate[[j, k]] = acc / 4.0;
        }
    }
    let peak = reference.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    let unreliable: Vec<usize> = (0..rows)
        .filter(|&j| reference[j].norm_sqr() <= 1e-12 * peak)
        .collect();
    for &j in &unreliable {
        estimate.row_mut(j).fill(Complex64::new(0.0, 0.0));
    }
    let warnings = if unreliable.is_empty() {
        vec![]
    } else {
        vec![Warning::UnreliableRows(unreliable.clone())]
    };
    Ok(Flagged::with(
        MeasuredTm {
            matrix: TransferMatrix::new(estimate, slm_grid, medium.out_grid())?,
            unreliable_rows: unreliable,
        },
        warnings,
    ))
}
