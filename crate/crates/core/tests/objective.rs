use proptest::prelude::*;
use riskfield::objective::*;

fn batch() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..80)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn translation_and_scaling(costs in batch(), alpha in 0.0f64..0.99, c in -5.0f64..5.0, s in 0.1f64..10.0) {
        let base = empirical_cvar(&costs, alpha).unwrap().value;
        let shifted: Vec<f64> = costs.iter().map(|x| x + c).collect();
        let scaled: Vec<f64> = costs.iter().map(|x| x * s).collect();
        prop_assert!(close(empirical_cvar(&shifted, alpha).unwrap().value, base + c));
        prop_assert!(close(empirical_cvar(&scaled, alpha).unwrap().value, base * s));
    }

    #[test]
    fn monotone_in_alpha_and_above_mean(costs in batch(), a in 0.0f64..0.99, b in 0.0f64..0.99) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let v_lo = empirical_cvar(&costs, lo).unwrap().value;
        let v_hi = empirical_cvar(&costs, hi).unwrap().value;
        prop_assert!(v_hi >= v_lo - 1e-9);
        let mean = costs.iter().sum::<f64>() / costs.len() as f64;
        prop_assert!(v_lo >= mean - 1e-9);
        prop_assert!(v_hi <= costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9);
    }

    /// Lowering costs that already sit below the quantile leaves the tail
    /// gradient untouched.
    #[test]
    fn tail_gradient_is_detached_from_the_body(costs in prop::collection::vec(0.0f64..10.0, 4..40), alpha in 0.5f64..0.95, drop in 0.0f64..5.0) {
        let grads: Vec<Vec<f64>> = costs.iter().enumerate().map(|(i, c)| vec![*c, i as f64]).collect();
        let est = empirical_cvar(&costs, alpha).unwrap();
        let lowered: Vec<f64> = costs.iter().map(|&c| if c < est.eta_hat { c - drop } else { c }).collect();
        let g0 = cvar_gradient(&EpisodeBatch { costs: costs.clone(), alpha, gradients: grads.clone() }).unwrap();
        let g1 = cvar_gradient(&EpisodeBatch { costs: lowered, alpha, gradients: grads }).unwrap();
        prop_assert_eq!(g0, g1);
    }

    #[test]
    fn tail_is_never_empty(costs in batch(), alpha in 0.0f64..0.999) {
        let est = empirical_cvar(&costs, alpha).unwrap();
        prop_assert!(est.tail_mask.iter().any(|&t| t));
        prop_assert!(costs.iter().zip(&est.tail_mask).all(|(&c, &t)| t == (c >= est.eta_hat)));
    }
}

#[test]
fn alpha_zero_is_the_mean() {
    let costs = [3.0, 1.0, 4.0, 1.0, 5.0];
    assert!(close(empirical_cvar(&costs, 0.0).unwrap().value, 14.0 / 5.0));
}

#[test]
fn bound_shrinks_with_batch_and_grows_with_channels() {
    let r = |b: usize, m: usize| ucb_radius(1.0, 0.95, b, 0.05, m);
    assert!(r(64, 1) > r(256, 1) && r(256, 1) > r(4096, 1));
    assert!(r(1 << 30, 1) < 1e-2);
    let ratio = r(64, 2) / r(64, 1);
    assert!(close(ratio, ((4.0f64 / 0.05).ln() / (2.0f64 / 0.05).ln()).sqrt()));
}

#[test]
fn bound_rejects_costs_outside_range() {
    assert!(cvar_upper_bound(&[0.2, 1.5], 0.9, 1.0, 0.05, 1).is_err());
    assert!(cvar_upper_bound(&[0.2, 0.5], 0.9, 1.0, 0.0, 1).is_err());
    assert!(cvar_upper_bound(&[0.2, 0.5], 0.9, 1.0, 0.05, 1).is_ok());
}
