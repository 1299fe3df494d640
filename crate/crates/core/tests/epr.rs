use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;
use qscatter::epr::{analyze, epr_criterion, fit_gaussian_width, FitOptions, OpticalCalibration};
use qscatter::jpd::{accumulate_jpd, project_minus, project_sum, Projection, ProjectionKind};
use qscatter::optics::{synth_medium, MediumKind, MediumSpec, ModeGrid, Plane};
use qscatter::spadsim::{simulate_frames, SensorSpec};
use qscatter::twophoton::{input_state, propagate, Basis, GaussianPairSpec, InputSpec, PhaseMask};

#[test]
fn measured_products() {
    let cases = [
        (6.77e-6, 1.495e4, 0.1013, 2e-4, true),
        (8.82e-6, 1.72e4, 0.1519, 3e-4, true),
        (8.32e-6, 9.8e4, 0.82, 0.01, false),
    ];
    for (dr, dk, expected, tol, violated) in cases {
        let r = epr_criterion(dr, 0.0, dk, 0.0).unwrap();
        assert!((r.product - expected).abs() < tol, "{} vs {expected}", r.product);
        assert_eq!(r.violated, violated);
    }
}

proptest! {
    #[test]
    fn product_is_scale_invariant(dr in 1e-7f64..1e-4, dk in 1e2f64..1e6, er in 0.0f64..0.2, ek in 0.0f64..0.2) {
        let a = epr_criterion(dr, er * dr, dk, ek * dk).unwrap();
        let b = epr_criterion(2.0 * dr, 2.0 * er * dr, 0.5 * dk, 0.5 * ek * dk).unwrap();
        prop_assert_eq!(a.product, b.product);
        prop_assert_eq!(a.violated, b.violated);
        prop_assert_eq!(a.violated, a.product < 0.5);
        prop_assert!(a.confidence.map_or(true, |c| c >= 0.0));
    }

    #[test]
    fn noiseless_width_recovered(width in 1.0f64..4.0, amplitude in 1e-4f64..1.0) {
        let n = 41;
        let o = n / 2;
        let image = Array2::from_shape_fn((n, n), |(r, c)| {
            let d2 = (c as f64 - o as f64).powi(2) + (r as f64 - o as f64).powi(2);
            amplitude * (-d2 / (2.0 * width * width)).exp()
        });
        let p = Projection { kind: ProjectionKind::Sum, variance: Array2::zeros((n, n)), image, origin: (o, o) };
        let fit = fit_gaussian_width(&p, 15).unwrap().value;
        prop_assert!((fit.width - width).abs() < 1e-6);
    }
}

/// Position and momentum JPD projections of a Gaussian pair state with no medium.
fn synthetic_projections(frames: usize) -> (Projection, Projection) {
    let n = 32;
    let grid = ModeGrid::new(n, n, 1.0, Plane::Position).unwrap();
    let spec = GaussianPairSpec { sigma_r: 1.2, sigma_k: 0.25, amplitude: 1.0 };
    let position = input_state(grid, InputSpec::Gaussian(spec)).unwrap().value;
    let lens = synth_medium(&MediumSpec::new(MediumKind::Clear, 0, grid, 1.0)).unwrap();
    let momentum = propagate(&position, &lens, &PhaseMask::flat(grid), Basis::Momentum).unwrap().state;
    let sensor = SensorSpec::ideal(n, n, 0.5, 17);
    let pos = accumulate_jpd(&simulate_frames(&position, &sensor, frames).unwrap()).unwrap();
    let mom = accumulate_jpd(&simulate_frames(&momentum, &sensor, frames).unwrap()).unwrap();
    (project_minus(&pos), project_sum(&mom))
}

#[test]
fn gaussian_source_violates_with_growing_confidence() {
    // Position pixels of unit pitch, momentum pixels of 2π/32.
    let cal = OpticalCalibration { pixel_pitch: 1.0, magnification: 1.0, wavelength: 1.0, effective_focal_length: 32.0 };
    let report = |frames| {
        let (p, k) = synthetic_projections(frames);
        let r = analyze(&p, &k, &cal, FitOptions::default()).unwrap();
        assert!(r.warnings.is_empty(), "{:?}", r.warnings);
        r.value
    };
    let short = report(100_000);
    let long = report(400_000);
    for r in [&short, &long] {
        assert!(r.violated);
        assert_relative_eq!(r.delta_r, 1.2, max_relative = 0.1);
        assert_relative_eq!(r.delta_k, 0.25, max_relative = 0.1);
    }
    let ratio = long.confidence_value() / short.confidence_value();
    assert!((ratio / 2.0 - 1.0).abs() < 0.3, "confidence ratio {ratio}");
}
