//! Acceptance criteria, one PASS/FAIL line each. Tolerances are fixed here
//! rather than read from the library defaults so that a change of default
//! cannot silently relax a criterion.
//!
//! Criterion 2 trains two variants for 500 epochs; run in release mode (the
//! workspace test profile is optimized) to keep the total near three minutes.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riskfield::ablations::{instantiate_variant, PolicyVariant};
use riskfield::energy::{predict_coefficients, FieldParams, HeadFeatures, HeadWeights, NUM_FEATURES};
use riskfield::evalsuite::*;
use riskfield::gate::GateParams;
use riskfield::learner::{train, TrainConfig, TrainEnv};
use riskfield::objective::*;
use riskfield::rollout::*;
use riskfield::world::{Layout, Regime, Scenario};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn geometry_exactness() -> Outcome {
    let base = FieldParams::default();
    let geometry = Policy::geometry_only(&base);
    let zero_ctx = Policy {
        params: base.geometry_only(),
        coefficients: Coefficients::Heads(HeadWeights::default()),
        gate: GateMode::RouteAware,
        gate_params: GateParams::default(),
        residual: None,
    };
    let r = check_geometry_exactness(&geometry, &zero_ctx, &Layout::default(), &IntegratorConfig::default(), 100, 0.15, 0).unwrap();
    outcome(
        r.below_delta_fraction == 1.0 && r.false_pre_activation == 0.0 && r.bit_identical,
        format!(
            "below-delta {:.3}, false pre-activation {:.3}, bit-identical {}",
            r.below_delta_fraction, r.false_pre_activation, r.bit_identical
        ),
    )
}

fn selectivity_ordering() -> Outcome {
    let base = FieldParams::default();
    let gate = GateParams::default();
    let layout = Layout::default();
    let integrator = IntegratorConfig::default();
    let weights = CostWeights::default();
    let env = TrainEnv {
        layout: layout.clone(),
        integrator: integrator.clone(),
        weights: weights.clone(),
    };
    let mut policies = Vec::new();
    for v in [
        PolicyVariant::GeometryOnly,
        PolicyVariant::FixedCoeffCtx,
        PolicyVariant::CtxExpectedCost,
        PolicyVariant::RouteAwareCtxCvar,
    ] {
        let spec = instantiate_variant(v, &base, &gate, 0).unwrap();
        let state = train(spec, &env, &TrainConfig::default(), 0, |_| {}).unwrap();
        policies.push((v.name().to_string(), state.selected_policy().clone()));
    }
    let cfg = EvalConfig::default();
    let scenarios = benchmark_scenarios(&layout, &cfg, 0).unwrap();
    let rows = run_benchmark(&policies, &Policy::geometry_only(&base), &scenarios, &integrator).unwrap();
    let report = compute_report(&rows, &cfg, &weights, 0).unwrap();
    let get = |v: PolicyVariant| report.get(v.name()).unwrap();
    let (geo, fixed, exp, ra) = (
        get(PolicyVariant::GeometryOnly),
        get(PolicyVariant::FixedCoeffCtx),
        get(PolicyVariant::CtxExpectedCost),
        get(PolicyVariant::RouteAwareCtxCvar),
    );
    let ordering = ra.false_pre_activation < exp.false_pre_activation && exp.false_pre_activation < fixed.false_pre_activation;
    let success = ra.success > geo.success + 0.4;
    let far = ra.far < fixed.far - 0.3;
    outcome(
        ordering && success && far,
        format!(
            "false pre-act RA {:.2} / Exp {:.2} / Fixed {:.2} (ordering {}); success RA {:.2} vs geometry {:.2} ({}); FAR RA {:.3} vs Fixed {:.3} ({})",
            ra.false_pre_activation,
            exp.false_pre_activation,
            fixed.false_pre_activation,
            ordering,
            ra.success,
            geo.success,
            success,
            ra.far,
            fixed.far,
            far
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let weights = CostWeights::default();
    let integrator = IntegratorConfig {
        horizon: 80,
        ..Default::default()
    };
    let mut worst_rollout = 0.0f64;
    for c in 0..50u64 {
        let regime = [Regime::R1, Regime::R2, Regime::DelayedEscape, Regime::R3][c as usize % 4];
        let sc = Scenario::sample(regime, 100 + c, &Layout::default()).unwrap();
        let mut hw = HeadWeights::default();
        for v in hw.soft.iter_mut().chain(hw.hard.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        hw.gain_soft = rng.gen_range(0.1..1.0);
        hw.gain_hard = rng.gen_range(0.1..1.0);
        let mut policy = Policy::geometry_only(&FieldParams::default());
        policy.coefficients = Coefficients::Heads(hw.clone());
        policy.gate = GateMode::RouteAware;
        let (mut rec, sens) = rollout_sensitivities(&sc, &policy, &integrator).unwrap();
        rec.sensitivities = Some(sens);
        let analytic = cost_gradient(&rec, &weights, sc.spec.goal).unwrap();
        let theta = hw.to_vec();
        let h = 1e-6;
        let fd: Vec<f64> = (0..theta.len())
            .map(|j| {
                let cost = |d: f64| {
                    let mut t = theta.clone();
                    t[j] += d;
                    let mut q = policy.clone();
                    q.coefficients = Coefficients::Heads(HeadWeights::from_slice(&t));
                    let r = rollout(&sc, &q, &integrator, RolloutOptions::default()).unwrap();
                    episode_cost(&r, &weights, sc.spec.goal)
                };
                (cost(h) - cost(-h)) / (2.0 * h)
            })
            .collect();
        let num = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst_rollout = worst_rollout.max(num / den.max(1e-12));
    }

    let mut worst_head = 0.0f64;
    for _ in 0..1000 {
        let mut f = [0.0; NUM_FEATURES];
        for v in f.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let features = HeadFeatures(f);
        let mut theta: Vec<f64> = (0..2 * NUM_FEATURES).map(|_| rng.gen_range(-2.0..2.0)).collect();
        theta.push(rng.gen_range(0.0..1.0));
        theta.push(rng.gen_range(0.0..1.0));
        let pred = predict_coefficients(&features, &HeadWeights::from_slice(&theta), 5.0);
        let h = 1e-5;
        for j in 0..theta.len() {
            let at = |d: f64| {
                let mut t = theta.clone();
                t[j] += d;
                let p = predict_coefficients(&features, &HeadWeights::from_slice(&t), 5.0);
                (p.lambda_s, p.lambda_h)
            };
            let (plus, minus) = (at(h), at(-h));
            let fd_s = (plus.0 - minus.0) / (2.0 * h);
            let fd_h = (plus.1 - minus.1) / (2.0 * h);
            worst_head = worst_head
                .max((pred.dlambda_s[j] - fd_s).abs() / fd_s.abs().max(1.0))
                .max((pred.dlambda_h[j] - fd_h).abs() / fd_h.abs().max(1.0));
        }
    }
    outcome(
        worst_rollout <= 1e-3 && worst_head <= 1e-6,
        format!("worst rollout relative error {worst_rollout:.2e} (50 configs), worst head error {worst_head:.2e}"),
    )
}

/// Minimum of c + E[(X - c)+] / (1 - alpha) over c. The objective is convex
/// and piecewise linear with kinks at the samples, so scanning them is exact.
fn ru_oracle(costs: &[f64], alpha: f64) -> f64 {
    let b = costs.len() as f64;
    costs
        .iter()
        .map(|&c| c + costs.iter().map(|&x| (x - c).max(0.0)).sum::<f64>() / ((1.0 - alpha) * b))
        .fold(f64::INFINITY, f64::min)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn exponential(rng: &mut ChaCha8Rng) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln()
}

fn cvar_estimator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // exhaustive permutations against the variational oracle, ties included
    let mut worst_oracle = 0.0f64;
    let mut equivariant = true;
    for b in 1..=8usize {
        for trial in 0..3 {
            let costs: Vec<f64> = (0..b)
                .map(|_| if trial == 2 { rng.gen_range(0..3) as f64 } else { rng.gen_range(0.0..5.0) })
                .collect();
            for &alpha in &[0.0, 0.5, 0.75, 0.9, 0.95] {
                let oracle = ru_oracle(&costs, alpha);
                let gradients: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| (i == j) as u8 as f64).collect()).collect();
                let reference = cvar_gradient(&EpisodeBatch {
                    costs: costs.clone(),
                    alpha,
                    gradients: gradients.clone(),
                })
                .unwrap();
                for perm in (0..b).permutations(b) {
                    let permuted: Vec<f64> = perm.iter().map(|&i| costs[i]).collect();
                    let est = empirical_cvar(&permuted, alpha).unwrap();
                    worst_oracle = worst_oracle.max((est.value - oracle).abs() / oracle.abs().max(1.0));
                    let g = cvar_gradient(&EpisodeBatch {
                        costs: permuted,
                        alpha,
                        gradients: perm.iter().map(|&i| gradients[i].clone()).collect(),
                    })
                    .unwrap();
                    equivariant &= g == reference;
                }
            }
        }
    }

    // convergence of value and tail gradient on J = theta * Z, Z ~ Exp(1)
    let alpha = 0.9;
    let oracle_b = 2_000_000;
    let big: Vec<f64> = (0..oracle_b).map(|_| exponential(&mut rng)).collect();
    let oracle_value = empirical_cvar(&big, alpha).unwrap().value;
    let closed_form = 1.0 - (1.0 - alpha).ln();
    let sizes = [250usize, 1000, 4000, 16000];
    let reps = 200;
    let mut rmse_value = Vec::new();
    let mut rmse_grad = Vec::new();
    for &b in &sizes {
        let (mut sv, mut sg) = (0.0, 0.0);
        for _ in 0..reps {
            let z: Vec<f64> = (0..b).map(|_| exponential(&mut rng)).collect();
            let est = empirical_cvar(&z, alpha).unwrap();
            // dJ/dtheta = Z at theta = 1, and dCVaR/dtheta equals the CVaR of Z
            let g = cvar_gradient(&EpisodeBatch {
                costs: z.clone(),
                alpha,
                gradients: z.iter().map(|&v| vec![v]).collect(),
            })
            .unwrap()[0];
            sv += (est.value - oracle_value).powi(2);
            sg += (g - oracle_value).powi(2);
        }
        rmse_value.push((sv / reps as f64).sqrt());
        rmse_grad.push((sg / reps as f64).sqrt());
    }
    let bs: Vec<f64> = sizes.iter().map(|&b| b as f64).collect();
    let slope_value = slope(&bs, &rmse_value);
    let slope_grad = slope(&bs, &rmse_grad);
    let slope_ok = |s: f64| (s + 0.5).abs() <= 0.15;

    let mut dominates = true;
    for _ in 0..10_000 {
        let b = rng.gen_range(1..=64);
        let a = rng.gen_range(0.0..0.99);
        let costs: Vec<f64> = (0..b).map(|_| rng.gen_range(-10.0..10.0) * rng.gen::<f64>()).collect();
        let mean = costs.iter().sum::<f64>() / b as f64;
        dominates &= empirical_cvar(&costs, a).unwrap().value >= mean - 1e-12;
    }

    let oracle_sane = (oracle_value - closed_form).abs() < 0.02;
    outcome(
        worst_oracle <= 1e-12 && equivariant && slope_ok(slope_value) && slope_ok(slope_grad) && dominates && oracle_sane,
        format!(
            "oracle error {worst_oracle:.1e}, gradient permutation-equivariant {equivariant}; slopes value {slope_value:.3} gradient {slope_grad:.3} (large-B oracle {oracle_value:.4}, closed form {closed_form:.4}); CVaR >= mean on 1e4 batches {dominates}"
        ),
    )
}

fn theory_config() -> TheoryConfig {
    TheoryConfig {
        episodes: 100,
        gate_patches: 150,
        delta: 0.15,
        // 0.1 down to 7.8e-4 by halving
        dissipativity_taus: (0..8).map(|k| 0.1 / f64::powi(2.0, k)).collect(),
        dissipativity_time: 2.0,
        preservation_eps: vec![1e-3, 1e-2, 1e-1],
        preservation_steps: 60,
        deflection_taus: vec![0.01, 0.05],
        deflection_scenes: 50,
        halving_tolerance: 0.2,
        slope_tolerance: 0.1,
        r2_gate_max: 0.05,
        r1_gate_min: 0.5,
    }
}

fn dissipativity() -> Outcome {
    let cfg = theory_config();
    let r = check_dissipativity(&Layout::default(), &FieldParams::default(), &cfg, 0).unwrap();
    let halves = r.halving_ratios.iter().all(|&q| (q - 2.0).abs() <= 0.2 * 2.0);
    let span = r.taus.iter().cloned().fold(f64::INFINITY, f64::min) <= 1e-3 && r.taus.iter().cloned().fold(0.0, f64::max) >= 1e-1;
    outcome(
        halves && span && r.c_fit.is_finite() && r.c_fit >= 0.0,
        format!("C = {:.3}, halving ratios {:?}", r.c_fit, r.halving_ratios.iter().map(|q| format!("{q:.3}")).collect::<Vec<_>>()),
    )
}

fn preservation() -> Outcome {
    let cfg = theory_config();
    let r = check_preservation(&Layout::default(), &FieldParams::default(), &cfg, 0).unwrap();
    let s = slope(&r.eps, &r.deviations);
    outcome(
        (s - 1.0).abs() <= 0.1,
        format!("log-log slope {s:.4}, deviations {:?}", r.deviations.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>()),
    )
}

fn deflection() -> Outcome {
    let cfg = theory_config();
    let r = check_deflection(&FieldParams::default(), &cfg, 0).unwrap();
    outcome(
        r.worst_margin.iter().all(|&m| m >= 0.0) && r.taus == vec![0.01, 0.05],
        format!("c = {:.3e}, worst margins {:?}", r.c_fit, r.worst_margin),
    )
}

fn gate_soundness() -> Outcome {
    let cfg = theory_config();
    let gate = GateParams::default();
    let r = check_gate_soundness(&Layout::default(), &FieldParams::default(), &gate, 150, &cfg, 0).unwrap();
    let boundary = gate_boundary_case(&gate);
    outcome(
        r.r2_max <= 0.05 && r.r1_min >= 0.5 && boundary == 0.25,
        format!("R2 max {:.4}, R1 min {:.4}, boundary {boundary}", r.r2_max, r.r1_min),
    )
}

fn ucb_dual() -> Outcome {
    let radius = ucb_radius(1.0, 0.95, 64, 0.05, 1);
    let direct = 20.0 * (40.0f64.ln() / 128.0).sqrt();
    // the quoted approximate value 3.3957 is looser than its four decimals
    // suggest; the exact direct evaluation gives 3.395254
    let close = (radius - direct).abs() <= 1e-9 && (radius - 3.3957).abs() < 1e-3;
    let stays = dual_update(0.0, 0.1, 0.3, 0.5) == 0.0;
    let step = (dual_update(1.0, 0.1, 1.5, 1.0) - 1.05).abs() <= 1e-12;
    let mut lam = 0.2;
    let mut linear = true;
    for k in 1..=50 {
        lam = dual_update(lam, 0.1, 0.9, 0.5);
        linear &= (lam - (0.2 + k as f64 * 0.1 * 0.4)).abs() <= 1e-9;
    }
    // no violation leaves a positive multiplier shrinking toward zero, never below
    let mut shrink = 0.3;
    for _ in 0..20 {
        shrink = dual_update(shrink, 0.1, 0.0, 0.5);
    }
    let projected = shrink == 0.0;
    outcome(
        close && stays && step && linear && projected,
        format!("radius {radius:.9} vs direct {direct:.9}; stays-zero {stays}, one-step {step}, linear growth {linear}, projection {projected}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("geometry-only exactness", geometry_exactness),
        ("selectivity ordering", selectivity_ordering),
        ("gradient correctness", gradient_correctness),
        ("CVaR estimator", cvar_estimator),
        ("dissipativity", dissipativity),
        ("preservation scaling", preservation),
        ("risk deflection", deflection),
        ("gate soundness", gate_soundness),
        ("UCB and dual update", ucb_dual),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = std::time::Instant::now();
        let o = run();
        println!(
            "criterion {} {}: {} [{:.1}s] {}",
            i + 1,
            name,
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
