use qscatter::montecarlo::{plateau_check, plateau_curve, PlateauPoint, PlateauSpec};

fn sem_r(p: &PlateauPoint) -> f64 {
    p.std_r / 10.0
}

fn rising_dimension(points: &[PlateauPoint]) {
    for w in points.windows(2) {
        let tol = 3.0 * (sem_r(&w[0]).powi(2) + sem_r(&w[1]).powi(2)).sqrt();
        assert!(w[1].mean_r >= w[0].mean_r - tol, "{} -> {}", w[0].mean_r, w[1].mean_r);
    }
}

fn rising_bound(points: &[PlateauPoint]) {
    for w in points.windows(2) {
        let tol = 3.0 * (w[0].sem_f.powi(2) + w[1].sem_f.powi(2)).sqrt();
        assert!(w[1].mean_f >= w[0].mean_f - tol, "{} -> {}", w[0].mean_f, w[1].mean_f);
    }
}

#[test]
fn maximally_entangled_curve_rises_to_full_dimension() {
    let spec = PlateauSpec { frames: vec![1e3, 1e5, 1e7, 1e9, 1e11], ..PlateauSpec::maximally_entangled(45, 7) };
    let curve = plateau_curve(&spec).unwrap();
    rising_dimension(&curve);
    rising_bound(&curve);
    assert_eq!(curve.last().unwrap().mean_r, 45.0);
    assert!(curve[0].mean_r < 1.0);
    // The dimension saturates while the bound keeps closing its 1/√N gap.
    let check = plateau_check(&spec).unwrap();
    assert_eq!(check.at_quarter.mean_r, 45.0);
    assert!(check.at_max.mean_f > check.at_quarter.mean_f);
}

#[test]
fn partially_entangled_curve_plateaus_lower() {
    let spec = PlateauSpec {
        alpha_prime: 1e-4,
        frames: vec![1e3, 1e5, 1e7, 1e9, 1e11, 1e13],
        ..PlateauSpec::maximally_entangled(45, 7)
    };
    let curve = plateau_curve(&spec).unwrap();
    // The bound itself overshoots slightly near N ~ 1e9 because √ of a
    // noisy count is biased low; only the dimension is monotone.
    rising_dimension(&curve);
    let last = curve.last().unwrap();
    assert!(last.mean_r < 45.0 && last.mean_r > 2.0);
    let check = plateau_check(&spec).unwrap();
    assert!(check.plateaued, "{}", check.separation);
}
