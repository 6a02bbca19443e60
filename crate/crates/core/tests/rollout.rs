use nalgebra::Matrix2;
use riskfield::energy::{FieldParams, HeadWeights};
use riskfield::gate::GateParams;
use riskfield::rollout::*;
use riskfield::world::{Layout, Regime, Scenario};
use riskfield::Vec2;

#[test]
fn integrator_matches_hand_computation() {
    let params = FieldParams {
        mass: Matrix2::new(2.0, 0.5, 0.5, 1.0),
        gamma: 0.7,
        ..Default::default()
    };
    let state = PhaseState {
        q: Vec2::new(1.0, -2.0),
        p: Vec2::new(0.3, 0.4),
    };
    let force = Vec2::new(-1.0, 2.5);
    let tau = 0.1;
    // inverse of [[2, .5], [.5, 1]] has determinant 1.75
    let inv = |v: Vec2| Vec2::new(v.x - 0.5 * v.y, -0.5 * v.x + 2.0 * v.y) / 1.75;
    let p = state.p + force * tau - inv(state.p) * (tau * 0.7);
    let q = state.q + inv(p) * tau;
    let next = integrate(state, force, &params, tau);
    assert!((next.p - p).norm() < 1e-14);
    assert!((next.q - q).norm() < 1e-14);
}

fn bits(r: &RolloutRecord) -> Vec<u64> {
    r.steps
        .iter()
        .flat_map(|s| [s.q.x, s.q.y, s.p.x, s.p.y])
        .chain([r.final_state.q.x, r.final_state.q.y])
        .map(f64::to_bits)
        .collect()
}

#[test]
fn zero_coefficient_context_is_bit_identical_on_static_regimes() {
    let base = FieldParams::default();
    let geometry = Policy::geometry_only(&base);
    let zero = Policy {
        params: base.geometry_only(),
        coefficients: Coefficients::Heads(HeadWeights::default()),
        gate: GateMode::RouteAware,
        gate_params: GateParams::default(),
        residual: None,
    };
    let cfg = IntegratorConfig::default();
    for regime in [Regime::R1, Regime::R2, Regime::R3] {
        for seed in 0..10 {
            let sc = Scenario::sample(regime, seed, &Layout::default()).unwrap();
            let a = rollout(&sc, &geometry, &cfg, RolloutOptions::default()).unwrap();
            let b = rollout(&sc, &zero, &cfg, RolloutOptions::default()).unwrap();
            assert_eq!(bits(&a), bits(&b), "{regime:?} seed {seed}");
            assert_eq!(a.status, b.status);
        }
    }
}

#[test]
fn rollouts_are_deterministic() {
    let mut policy = Policy::geometry_only(&FieldParams::default());
    policy.coefficients = Coefficients::Fixed {
        lambda_s: 2.0,
        lambda_h: 1.0,
    };
    let sc = Scenario::sample(Regime::DelayedEscape, 11, &Layout::default()).unwrap();
    let cfg = IntegratorConfig::default();
    let a = rollout(&sc, &policy, &cfg, RolloutOptions::default()).unwrap();
    let b = rollout(&sc, &policy, &cfg, RolloutOptions::default()).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.event_steps, b.event_steps);
}

#[test]
fn events_fire_at_escape_time() {
    let sc = Scenario::sample(Regime::DelayedEscape, 5, &Layout::default()).unwrap();
    let t_escape = sc.schedule.t_escape.unwrap();
    let rec = rollout(&sc, &Policy::geometry_only(&FieldParams::default()), &IntegratorConfig::default(), RolloutOptions::default()).unwrap();
    assert_eq!(rec.event_steps, vec![t_escape]);
    for s in &rec.steps {
        assert_eq!(s.post_event, s.t >= t_escape, "t {}", s.t);
    }
}

#[test]
fn sensitivities_have_one_entry_per_state() {
    let mut policy = Policy::geometry_only(&FieldParams::default());
    policy.coefficients = Coefficients::Heads(HeadWeights {
        gain_soft: 0.5,
        gain_hard: 0.5,
        ..Default::default()
    });
    let sc = Scenario::sample(Regime::R1, 2, &Layout::default()).unwrap();
    let cfg = IntegratorConfig {
        horizon: 40,
        ..Default::default()
    };
    let (rec, sens) = rollout_sensitivities(&sc, &policy, &cfg).unwrap();
    assert_eq!(sens.len(), rec.steps.len() + 1);
    assert!(sens[0].iter().all(|&v| v == 0.0));
}
