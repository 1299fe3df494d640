use nalgebra::DMatrix;
use ndarray::Array1;
use num_complex::Complex64;
use proptest::prelude::*;
use qscatter::linalg::{adjoint, unitarity_defect};
use qscatter::optics::{dft_matrix, measure_tm, synth_medium, MediumKind, MediumSpec, ModeGrid, Plane, TransferMatrix};
use qscatter::twophoton::{correction_mask, PhaseMask};

/// CDF of the Marchenko–Pastur law with ratio `y ≤ 1` and unit mean,
/// integrated numerically on a fine grid.
fn marchenko_pastur_cdf(y: f64) -> impl Fn(f64) -> f64 {
    let (a, b) = ((1.0 - y.sqrt()).powi(2), (1.0 + y.sqrt()).powi(2));
    let density = move |x: f64| ((b - x) * (x - a)).max(0.0).sqrt() / (2.0 * std::f64::consts::PI * y * x);
    let steps = 200_000;
    let h = (b - a) / steps as f64;
    let mut table = vec![0.0; steps + 1];
    for i in 1..=steps {
        let (x0, x1) = (a + (i - 1) as f64 * h, a + i as f64 * h);
        table[i] = table[i - 1] + 0.5 * h * (density(x0) + density(x1));
    }
    let total = table[steps];
    move |x: f64| {
        if x <= a {
            0.0
        } else if x >= b {
            1.0
        } else {
            let i = ((x - a) / h) as usize;
            table[i.min(steps)] / total
        }
    }
}

#[test]
fn thick_medium_singular_values_follow_marchenko_pastur() {
    let in_grid = ModeGrid::new(32, 32, 1.0, Plane::Position).unwrap();
    let out_grid = ModeGrid::new(64, 64, 1.0, Plane::Momentum).unwrap();
    let spec = MediumSpec { out_grid: Some(out_grid), ..MediumSpec::new(MediumKind::ThickIidGaussian, 8, in_grid, 1.0) };
    let t = synth_medium(&spec).unwrap();
    let gram = adjoint(t.entries().view()).dot(t.entries());
    let n = gram.nrows();
    let eig = DMatrix::from_fn(n, n, |i, j| gram[[i, j]]).symmetric_eigenvalues();
    let mut lambda: Vec<f64> = eig.iter().copied().collect();
    lambda.sort_by(f64::total_cmp);
    let cdf = marchenko_pastur_cdf(1024.0 / 4096.0);
    let ks = lambda
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "KS distance {ks}");
}

fn output_intensity(t: &TransferMatrix, mask: &PhaseMask) -> Vec<f64> {
    let field = Array1::from(mask.phasors());
    t.entries().dot(&field).iter().map(|z| z.norm_sqr()).collect()
}

#[test]
fn measured_matrix_gives_the_same_correction() {
    for (kind, n) in [(MediumKind::ThinPhase, 8), (MediumKind::ThickIidGaussian, 16)] {
        let grid = ModeGrid::new(n, n, 1.0, Plane::Position).unwrap();
        let t = synth_medium(&MediumSpec::new(kind, 6, grid, 1.0)).unwrap();
        let measured = measure_tm(&t, grid, n * n / 2 + 3, None).unwrap().value.matrix;
        let from_true = correction_mask(&t, None).unwrap().value;
        let from_measured = correction_mask(&measured, None).unwrap().value;
        let a = output_intensity(&t, &from_true);
        let b = output_intensity(&t, &from_measured);
        let peak = a.iter().cloned().fold(0.0, f64::max);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9 * peak, "{kind:?}: {x} vs {y}");
        }
        let centre = t.out_grid().center_index();
        assert_eq!(peak, a[centre]);
    }
}

proptest! {
    #[test]
    fn dft_is_unitary_and_symmetric(w in 1usize..=16, h in 1usize..=16) {
        let f = dft_matrix(ModeGrid::new(w, h, 1.0, Plane::Position).unwrap()).unwrap();
        let m = f.entries();
        prop_assert!(unitarity_defect(m.view()) < 1e-12);
        let asym = m.iter().zip(m.t().iter()).map(|(a, b): (&Complex64, &Complex64)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(asym < 1e-12);
    }
}
