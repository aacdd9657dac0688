use anneal_prune_demo::{flops_regularizer_curve, indicator_curve, sample_design_space, temperature_schedule};

#[test]
fn indicator_curve_is_monotone_and_centered() {
    let c = indicator_curve(0.5, -2.0, 2.0, 41);
    assert_eq!(c.len(), 41);
    assert!(c.windows(2).all(|w| w[1] > w[0]));
    assert!((c[20] - 0.5).abs() < 1e-12);
    assert!(indicator_curve(0.0, -1.0, 1.0, 5).is_empty(), "zero temperature is rejected");
}

#[test]
fn linear_schedule_ends_at_a_fiftieth() {
    let t = temperature_schedule("linear", 1.0, 50);
    assert_eq!(t.len(), 51);
    assert_eq!(t[0], 1.0);
    assert!((t[50] - 0.02).abs() < 1e-12);
    assert!(temperature_schedule("quadratic", 1.0, 10).is_empty());
}

#[test]
fn regularizer_curve_has_a_flat_dead_zone() {
    let r = flops_regularizer_curve(1e7, 0.05, 0.5, 2.0, 151);
    assert_eq!(r.len(), 151);
    // Ratio 0.96 sits at index 46, inside [0.95, 1].
    assert_eq!(r[46], 0.0);
    assert!((r[0] + (5e6f64).ln()).abs() < 1e-9);
    assert!((r[150] - (2e7f64).ln()).abs() < 1e-9);
    assert!(flops_regularizer_curve(1e7, 0.05, 0.0, 2.0, 3).is_empty());
}

#[test]
fn constrained_samples_are_symmetric() {
    let json: serde_json::Value = serde_json::from_str(&sample_design_space("constrained", 20, 8, 3)).unwrap();
    let inst = json["instances"].as_array().unwrap();
    assert_eq!(inst.len(), 8);
    assert!(inst.iter().all(|i| i["symmetry"].as_f64() == Some(0.0)));
    let again: serde_json::Value = serde_json::from_str(&sample_design_space("constrained", 20, 8, 3)).unwrap();
    assert_eq!(json, again);
}

#[test]
fn bad_space_kind_reports_an_error() {
    let json: serde_json::Value = serde_json::from_str(&sample_design_space("uniform", 20, 2, 0)).unwrap();
    assert!(json["error"].as_str().unwrap().contains("uniform"));
}
