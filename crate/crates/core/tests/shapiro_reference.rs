use e5sh::stats::shapiro_wilk;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    name: String,
    samples: Vec<f64>,
    w: f64,
    p: f64,
}

#[derive(Deserialize)]
struct Fixture {
    cases: Vec<Case>,
}

#[test]
fn matches_reference_implementation() {
    let raw = include_str!("fixtures/shapiro_reference.json");
    let fx: Fixture = serde_json::from_str(raw).unwrap();
    assert!(!fx.cases.is_empty());
    for c in &fx.cases {
        let r = shapiro_wilk(&c.samples).unwrap();
        assert!((r.w - c.w).abs() <= 1e-4, "{}: w {} vs {}", c.name, r.w, c.w);
        // relative tolerance for the tiny p-values, absolute for the rest
        let ok = (r.p_value - c.p).abs() <= 1e-3 || (r.p_value / c.p - 1.0).abs() <= 1e-2;
        assert!(ok, "{}: p {} vs {}", c.name, r.p_value, c.p);
    }
}
