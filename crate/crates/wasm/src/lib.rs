//! WebAssembly bindings for the browser demo. Everything crosses the
//! boundary as JSON text so the page needs no generated type glue.

use riskfield::energy::{geometry_force, FieldParams, Obstacle};
use riskfield::evalsuite::sample_certified;
use riskfield::gate::{evaluate_gate, sample_primitives, GateParams};
use riskfield::rollout::{rollout, Coefficients, GateMode, IntegratorConfig, Policy, RolloutOptions};
use riskfield::world::{apply_events, Layout, Regime, Scenario};
use riskfield::Vec2;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn parse_regime(name: &str) -> Result<Regime, JsError> {
    match name {
        "R1" => Ok(Regime::R1),
        "R2" => Ok(Regime::R2),
        "R3" => Ok(Regime::R3),
        "DelayedEscape" => Ok(Regime::DelayedEscape),
        _ => Err(JsError::new(&format!("unknown regime {name}"))),
    }
}

/// One sampled scene with default field, gate and integrator settings.
#[wasm_bindgen]
pub struct Demo {
    scenario: Scenario,
    params: FieldParams,
    gate: GateParams,
    integrator: IntegratorConfig,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(regime: &str, seed: u64) -> Result<Demo, JsError> {
        let scenario = sample_certified(parse_regime(regime)?, seed, &Layout::default())?;
        Ok(Demo {
            scenario,
            params: FieldParams::default(),
            gate: GateParams::default(),
            integrator: IntegratorConfig::default(),
        })
    }

    /// Grid, start, goal, obstacles and escape time. `blocked` marks
    /// non-traversable nodes before any event fires and `opened` the nodes
    /// that become traversable afterwards.
    pub fn scene(&self) -> String {
        let sc = &self.scenario;
        let p = &sc.patch;
        let after = sc.schedule.t_escape.map(|t| apply_events(p, &sc.schedule, t));
        let opened: Vec<bool> = match &after {
            Some(a) => p.traversable.iter().zip(&a.traversable).map(|(&b, &a)| !b && a).collect(),
            None => vec![false; p.traversable.len()],
        };
        json!({
            "width": p.width,
            "height": p.height,
            "resolution": p.resolution,
            "origin": [p.origin.x, p.origin.y],
            "risk": p.soft_risk,
            "blocked": p.traversable.iter().map(|t| !t).collect::<Vec<_>>(),
            "hazard": p.hazard,
            "opened": opened,
            "start": [sc.spec.start.x, sc.spec.start.y],
            "goal": [sc.spec.goal.x, sc.spec.goal.y],
            "obstacles": sc.obstacles.iter().map(|o| [o.x, o.y]).collect::<Vec<_>>(),
            "t_escape": sc.schedule.t_escape,
            "tau": self.integrator.tau,
        })
        .to_string()
    }

    /// Rolls out a context field with fixed coefficients. `gate` is
    /// "route_aware" or "open"; zero coefficients give the geometry-only
    /// path.
    pub fn rollout(&self, lambda_s: f64, lambda_h: f64, gate: &str) -> Result<String, JsError> {
        let gate = match gate {
            "route_aware" => GateMode::RouteAware,
            "open" => GateMode::Open,
            other => return Err(JsError::new(&format!("unknown gate {other}"))),
        };
        let policy = Policy {
            coefficients: Coefficients::Fixed { lambda_s, lambda_h },
            gate,
            gate_params: self.gate.clone(),
            ..Policy::geometry_only(&self.params)
        };
        let rec = rollout(&self.scenario, &policy, &self.integrator, RolloutOptions::default())?;
        let mut path: Vec<[f64; 2]> = rec.steps.iter().map(|s| [s.q.x, s.q.y]).collect();
        path.push([rec.final_state.q.x, rec.final_state.q.y]);
        Ok(json!({
            "path": path,
            "gate": rec.steps.iter().map(|s| s.m).collect::<Vec<_>>(),
            "status": format!("{:?}", rec.status),
            "steps": rec.steps.len(),
            "events": rec.event_steps,
            "cum_risk": rec.accum.cum_risk,
            "hard_contacts": rec.accum.hard_count,
        })
        .to_string())
    }

    /// Gate evaluation at a point at step `t`: gate value, its two factors
    /// and the primitive fan.
    pub fn probe(&self, x: f64, y: f64, t: usize) -> Result<String, JsError> {
        let sc = &self.scenario;
        let q = Vec2::new(x, y);
        let patch = apply_events(&sc.patch, &sc.schedule, t);
        let obstacles = Obstacle::from_anchors(&sc.obstacles, self.params.alpha);
        let geo = geometry_force(q, &self.params, sc.spec.goal, &obstacles)?;
        let e = evaluate_gate(q, sc.spec.goal, geo, &patch, &self.gate);
        let prims = sample_primitives(q, e.heading, &self.gate);
        let fan: Vec<_> = prims
            .iter()
            .zip(&e.scores)
            .map(|(p, s)| {
                let end = q + p.direction * self.gate.horizon_len;
                json!({"end": [end.x, end.y], "risk": s.risk, "clearance": s.clearance, "feasible": s.feasible})
            })
            .collect();
        Ok(json!({
            "m": e.m,
            "route_factor": e.route_factor,
            "clearance_factor": e.clearance_factor,
            "k_star": e.k_star,
            "k_geo": e.k_geo,
            "r_geo": e.r_geo,
            "fan": fan,
        })
        .to_string())
    }
}
