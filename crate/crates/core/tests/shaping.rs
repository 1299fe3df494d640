use qscatter::optics::{synth_medium, MediumKind, MediumSpec, TransferMatrix};
use qscatter::shaping::{
    objective, optimize_masks, peak_to_background, pump_grid, OptimizeOptions, ShapingProblem, TwoPlaneGeometry,
};

fn medium(kind: MediumKind, n: usize, seed: u64) -> TransferMatrix {
    synth_medium(&MediumSpec::new(kind, seed, pump_grid(n).unwrap(), 810e-9)).unwrap()
}

#[test]
fn thin_diffuser_is_undone_by_one_mask() {
    let p = ShapingProblem::new(medium(MediumKind::ThinPhase, 8, 3), None, false, Default::default()).unwrap().value;
    let before = objective(&p);
    let res = optimize_masks(&p, 1_000_000, OptimizeOptions::default()).unwrap();
    assert!(res.warnings.is_empty());
    let after = *res.value.trace.last().unwrap();
    println!("thin: {before} -> {after}");
    assert!(after > before);
    assert!((after / 2.0 - 1.0).abs() < 0.05, "{after}");
}

#[test]
fn thick_medium_refocuses_in_both_bases() {
    let (mut flat, mut shaped) = ((0.0, 0.0), (0.0, 0.0));
    let seeds = [11, 12, 13];
    for seed in seeds {
        let t = medium(MediumKind::ThickIidGaussian, 16, seed);
        let mut p = ShapingProblem::new(t, None, false, Default::default()).unwrap().value;
        let before = peak_to_background(&p);
        let res = optimize_masks(&p, 16 * 256 * 6, OptimizeOptions::default()).unwrap().value;
        let drop = res.trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        assert_eq!(drop, 0.0);
        p.set_masks(res.d1, None).unwrap();
        let after = peak_to_background(&p);
        flat = (flat.0 + before.position, flat.1 + before.momentum);
        shaped = (shaped.0 + after.position, shaped.1 + after.momentum);
    }
    let k = seeds.len() as f64;
    let (flat, shaped) = ((flat.0 / k, flat.1 / k), (shaped.0 / k, shaped.1 / k));
    println!("thick: flat {flat:?} optimized {shaped:?}");
    assert!(flat.0 < 3.0 && flat.1 < 1.5);
    assert!(shaped.0 > 5.0, "position {}", shaped.0);
    // The momentum peak grows but stays short of the position one.
    assert!(shaped.1 > 2.0 * flat.1, "momentum {}", shaped.1);
}

#[test]
fn second_mask_improves_refocusing() {
    let t = medium(MediumKind::ThickIidGaussian, 12, 17);
    let geometry = Some(TwoPlaneGeometry::default());
    let budget = 16 * 144 * 8;
    let mut one = ShapingProblem::new(t.clone(), geometry, false, Default::default()).unwrap().value;
    let mut two = ShapingProblem::new(t, geometry, true, Default::default()).unwrap().value;
    let r1 = optimize_masks(&one, budget, OptimizeOptions::default()).unwrap().value;
    let r2 = optimize_masks(&two, budget, OptimizeOptions::default()).unwrap().value;
    one.set_masks(r1.d1, None).unwrap();
    two.set_masks(r2.d1, r2.d2).unwrap();
    let (a, b) = (peak_to_background(&one), peak_to_background(&two));
    println!("one mask {a:?}, two masks {b:?}");
    assert!(r2.trace.last() > r1.trace.last());
    assert!(b.position > a.position && b.momentum > a.momentum);
}
