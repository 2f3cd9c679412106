use cvsg::diffusion::{Condition, RegionId};
use cvsg::scenarios::{build_scenario, parse_bundle, pick_exemplars, serialize_bundle, ScenarioSpec, Stratify};

#[test]
fn identical_spec_serializes_identically() {
    let spec = ScenarioSpec::imbalanced();
    let a = serialize_bundle(&build_scenario(&spec).unwrap());
    let b = serialize_bundle(&build_scenario(&spec).unwrap());
    assert_eq!(a, b);
    let mut other = spec.clone();
    other.seed = 1;
    assert_ne!(a, serialize_bundle(&build_scenario(&other).unwrap()));
}

#[test]
fn bundle_text_round_trips() {
    let mut spec = ScenarioSpec::default_collapse();
    spec.residual = 0.05;
    let bundle = build_scenario(&spec).unwrap();
    let text = serialize_bundle(&bundle);
    let back = parse_bundle(&text).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(serialize_bundle(&back), text);
}

#[test]
fn reference_and_pool_are_disjoint_draws() {
    let bundle = build_scenario(&ScenarioSpec::default_collapse()).unwrap();
    for r in &bundle.reference_set {
        assert!(bundle.exemplar_pool.iter().all(|p| p.x != r.x));
    }
}

#[test]
fn collapsed_region_keeps_a_quarter_of_its_modes() {
    let spec = ScenarioSpec::default_collapse();
    let bundle = build_scenario(&spec).unwrap();
    for cond in spec.conditions() {
        let kept = bundle
            .sampler_world
            .components()
            .iter()
            .filter(|c| c.object == cond.object && c.region == cond.region)
            .count();
        let want = if cond.region == RegionId(0) { 1 } else { 4 };
        assert_eq!(kept, want, "{cond}");
    }
    assert!(bundle.sampler_world.components().len() < bundle.reference_world.components().len());
}

#[test]
fn residual_keeps_dropped_modes_as_rare_modes() {
    let mut spec = ScenarioSpec::default_collapse();
    spec.residual = 0.1;
    let bundle = build_scenario(&spec).unwrap();
    assert_eq!(bundle.sampler_world.components().len(), bundle.reference_world.components().len());
    let cell: Vec<f64> = bundle
        .sampler_world
        .components()
        .iter()
        .filter(|c| c.object.0 == 0 && c.region == RegionId(0))
        .map(|c| c.weight)
        .collect();
    let mut sorted = cell.clone();
    sorted.sort_by(f64::total_cmp);
    // three dropped modes at 0.1 of the retained one
    assert!((sorted[0] / sorted[3] - 0.1).abs() < 1e-12);
    assert_eq!(sorted[0], sorted[2]);
    // every sampler component points back at a reference component with the
    // same labels and mean
    for (c, &src) in bundle.sampler_world.components().iter().zip(&bundle.sampler_sources) {
        let r = &bundle.reference_world.components()[src];
        assert_eq!((c.object, c.region), (r.object, r.region));
        assert_eq!(c.mean, r.mean);
    }
}

#[test]
fn residual_outside_unit_interval_is_rejected() {
    for bad in [-0.1, 1.0, f64::NAN] {
        let mut spec = ScenarioSpec::default_collapse();
        spec.residual = bad;
        assert!(build_scenario(&spec).is_err(), "residual {bad}");
    }
}

#[test]
fn per_region_exemplars_come_from_their_own_cell() {
    let bundle = build_scenario(&ScenarioSpec::default_collapse()).unwrap();
    let cond = Condition::new(2, 1);
    let own = bundle.pool_for(&cond);
    let picked = pick_exemplars(&bundle.exemplar_pool, &cond, 3, Stratify::PerRegion, 5).unwrap();
    assert_eq!(picked.len(), 3);
    assert!(picked.samples().iter().all(|x| own.contains(x)));
    let again = pick_exemplars(&bundle.exemplar_pool, &cond, 3, Stratify::PerRegion, 5).unwrap();
    assert_eq!(picked.samples(), again.samples());
}
