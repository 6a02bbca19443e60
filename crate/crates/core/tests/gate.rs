use proptest::prelude::*;
use riskfield::energy::{geometry_terms, FieldParams, Obstacle};
use riskfield::gate::*;
use riskfield::world::{Layout, Regime, Scenario};
use riskfield::Vec2;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gate_lies_in_unit_interval(seed in 0u64..2000, r in 0usize..4, dx in -1.5f64..1.5, dy in -1.5f64..1.5) {
        let regime = [Regime::R1, Regime::R2, Regime::R3, Regime::DelayedEscape][r];
        let sc = Scenario::sample(regime, seed, &Layout::default()).unwrap();
        let q = sc.spec.start + Vec2::new(dx, dy);
        let obstacles = Obstacle::from_anchors(&sc.obstacles, 5.0);
        prop_assume!(obstacles.iter().all(|o| (q - o.position).norm() > 0.05));
        let geo = geometry_terms(q, &FieldParams::default(), sc.spec.goal, &obstacles).unwrap();
        let e = evaluate_gate(q, sc.spec.goal, geo.force, &sc.patch, &GateParams::default());
        prop_assert!((0.0..=1.0).contains(&e.m));
        prop_assert_eq!(e.m, e.route_factor * e.clearance_factor);
        if let Some(k) = e.k_star {
            prop_assert!(e.scores[k].feasible);
            prop_assert!(e.scores.iter().filter(|s| s.feasible).all(|s| s.risk >= e.scores[k].risk));
        }
    }

    /// Position gradient of the gate against central differences wherever
    /// the discrete choices (selected primitive, clearance argmin) stay put.
    #[test]
    fn gate_gradient_matches_differences(seed in 0u64..2000, dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
        let sc = Scenario::sample(Regime::R1, seed, &Layout::default()).unwrap();
        let params = GateParams::default();
        let field = FieldParams::default();
        let eval_at = |q: Vec2| {
            let geo = geometry_terms(q, &field, sc.spec.goal, &[]).unwrap();
            (evaluate_gate(q, sc.spec.goal, geo.force, &sc.patch, &params), geo)
        };
        let q = sc.spec.start + Vec2::new(dx, dy);
        let (e, geo) = eval_at(q);
        prop_assume!(e.k_star.is_some() && e.m > 1e-6);
        let h = 1e-6;
        let mut fd = Vec2::zeros();
        for (axis, step) in [Vec2::new(h, 0.0), Vec2::new(0.0, h)].into_iter().enumerate() {
            let (a, _) = eval_at(q + step);
            let (b, _) = eval_at(q - step);
            let k = e.k_star.unwrap();
            let stable = a.k_star == e.k_star && b.k_star == e.k_star
                && a.scores[k].argmin == e.scores[k].argmin && b.scores[k].argmin == e.scores[k].argmin;
            prop_assume!(stable);
            fd[axis] = (a.m - b.m) / (2.0 * h);
        }
        let an = gate_gradient(q, sc.spec.goal, &e, &sc.patch, &params, geo.force, -geo.hessian);
        prop_assert!((an - fd).norm() <= 1e-4 * (1.0 + fd.norm()), "analytic {:?} fd {:?}", an, fd);
    }
}

#[test]
fn fan_is_symmetric_and_spans_the_half_angle() {
    let p = GateParams::default();
    let offsets = primitive_offsets(&p);
    assert_eq!(offsets.len(), p.num_primitives);
    for (a, b) in offsets.iter().zip(offsets.iter().rev()) {
        assert!((a + b).abs() < 1e-12);
    }
    assert!((offsets[0] + p.fan_half_angle).abs() < 1e-12);
}

#[test]
fn blocked_scenes_have_no_improving_primitive() {
    let params = GateParams::default();
    for seed in 0..30 {
        let r2 = Scenario::sample(Regime::R2, seed, &Layout::default()).unwrap();
        assert!(!has_improving_primitive(&r2.patch, r2.spec.start, r2.spec.goal, &params), "R2 seed {seed}");
        let r1 = Scenario::sample(Regime::R1, seed, &Layout::default()).unwrap();
        assert!(has_improving_primitive(&r1.patch, r1.spec.start, r1.spec.goal, &params), "R1 seed {seed}");
    }
}
