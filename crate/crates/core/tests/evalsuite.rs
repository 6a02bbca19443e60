use riskfield::ablations::{instantiate_variant, PolicyVariant};
use riskfield::energy::FieldParams;
use riskfield::evalsuite::*;
use riskfield::gate::GateParams;
use riskfield::objective::CostWeights;
use riskfield::rollout::{IntegratorConfig, Policy};
use riskfield::world::Layout;

fn small() -> (EvalConfig, EvalRows) {
    let cfg = EvalConfig {
        episodes: 12,
        static_episodes: 10,
        n_boot: 200,
        ..Default::default()
    };
    let base = FieldParams::default();
    let policies: Vec<(String, Policy)> = [PolicyVariant::GeometryOnly, PolicyVariant::FixedCoeffCtx, PolicyVariant::ScalarCtx]
        .into_iter()
        .map(|v| (v.name().to_string(), instantiate_variant(v, &base, &GateParams::default(), 0).unwrap().policy))
        .collect();
    let scenarios = benchmark_scenarios(&Layout::default(), &cfg, 9).unwrap();
    let rows = run_benchmark(&policies, &Policy::geometry_only(&base), &scenarios, &IntegratorConfig::default()).unwrap();
    (cfg, rows)
}

#[test]
fn report_recomputes_identically_from_csv() {
    let (cfg, rows) = small();
    let report = compute_report(&rows, &cfg, &CostWeights::default(), 9).unwrap();
    let (mut eps, mut steps) = (Vec::new(), Vec::new());
    rows.write_csv(&mut eps, &mut steps).unwrap();
    let back = EvalRows::read_csv(eps.as_slice(), steps.as_slice()).unwrap();
    let again = compute_report(&back, &cfg, &CostWeights::default(), 9).unwrap();
    assert_eq!(report, again);

    let mut json = Vec::new();
    report.write_json(&mut json).unwrap();
    let parsed: MetricReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(parsed.variants.len(), 3);
}

#[test]
fn report_invariants_hold() {
    let (cfg, rows) = small();
    let report = compute_report(&rows, &cfg, &CostWeights::default(), 9).unwrap();
    for v in &report.variants {
        assert_eq!(v.suppress_rate, 1.0 - v.false_pre_activation, "{}", v.variant);
        for rate in [v.car, v.far, v.false_pre_activation, v.success] {
            assert!((0.0..=1.0).contains(&rate));
        }
        assert!(v.sr >= 0.0);
        for (name, [lo, hi]) in &v.ci {
            assert!(lo <= hi, "{} {name}", v.variant);
        }
    }
    let geo = report.get("GeometryOnly").unwrap();
    assert_eq!(geo.false_pre_activation, 0.0);
    assert_eq!(geo.car, 0.0);
    assert_eq!(geo.far, 0.0);
    assert!(report.to_markdown().contains("FixedCoeffCtx"));
}

/// Average precision by brute force: area under the step-free PR curve
/// traced by every threshold, with the curve starting at recall zero.
fn pr_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && !l).count() as f64;
        points.push((tp / positives, tp / (tp + fp)));
    }
    let mut area = 0.0;
    let mut prev = (0.0, points[0].1);
    for p in points {
        area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        prev = p;
    }
    area
}

#[test]
fn auprc_matches_threshold_sweep() {
    let scores = [0.9, 0.8, 0.8, 0.5, 0.4, 0.4, 0.2, 0.1];
    let labels = [true, false, true, true, false, false, true, false];
    assert!((auprc(&scores, &labels) - pr_oracle(&scores, &labels)).abs() < 1e-12);
    assert_eq!(auprc(&[1.0, 1.0, 0.0, 0.0], &[true, true, false, false]), 1.0);
    assert_eq!(auprc(&[0.3; 4], &[true, false, false, false]), 0.25);
}

#[test]
fn spatial_metrics_on_a_constructed_case() {
    let m = spatial_selectivity(&[1.0, 2.0, 0.0, 3.0], &[0.0, 0.5, 0.0, 0.0], 0.25);
    assert_eq!(m.car, 0.75);
    assert_eq!(m.far, 0.25);
    assert!((m.sr - (6.0 / 4.0) / (0.5 / 4.0)).abs() < 1e-12);
    assert!(spatial_selectivity(&[1.0], &[0.0], 0.1).sr.is_infinite());
}

#[test]
fn temporal_metrics_on_a_constructed_case() {
    let dev = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4];
    let risk = [0.1; 6];
    let early = temporal_episode(&dev, &risk, 4, 0.15, 6);
    assert!(early.false_pre_activation);
    let late = temporal_episode(&dev, &risk, 2, 0.15, 6);
    assert!(!late.false_pre_activation);
    assert!(late.reacted);
    assert_eq!(late.reaction_delay, 1);
    let never = temporal_episode(&[0.0; 6], &risk, 2, 0.15, 6);
    assert!(!never.reacted);
    assert_eq!(never.reaction_delay, 6);
}
