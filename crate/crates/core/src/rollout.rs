//! Semi-implicit rollout of the navigation field with optional forward-mode
//! parameter sensitivities.

use nalgebra::{Matrix2, Matrix2xX};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{
    compute_features, context_force, context_jacobians, geometry_terms, hamiltonian_terms, predict_coefficients,
    EnergyError, FieldParams, HeadFeatures, HeadWeights, Obstacle, NUM_HEAD_PARAMS,
};
use crate::gate::{directional_gate, evaluate_gate, gate_gradient, GateParams};
use crate::world::{apply_events, Field, RiskPatch, Scenario};
use crate::Vec2;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("unsupported rollout option: {0}")]
    Unsupported(String),
    #[error("non-finite state at step {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub q: Vec2,
    pub p: Vec2,
}

impl PhaseState {
    pub fn at_rest(q: Vec2) -> Self {
        PhaseState { q, p: Vec2::zeros() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub tau: f64,
    pub horizon: usize,
    /// SDF level below which a state counts as a hazard contact.
    pub epsilon_hard: f64,
    pub goal_radius: f64,
    pub stuck_window: usize,
    /// Minimum displacement over `stuck_window` steps.
    pub stuck_tol: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            tau: 0.05,
            horizon: 200,
            epsilon_hard: 0.0,
            goal_radius: 0.3,
            stuck_window: 25,
            stuck_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    RouteAware,
    /// Gate fixed at one.
    Open,
    /// Open wherever the local risk slope exceeds the threshold.
    Directional { threshold: f64 },
}

/// Post-processing of the context force, used by the theory checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ContextFilter {
    None,
    /// Rescale so the context force norm never exceeds the bound.
    ClampNorm(f64),
    /// Remove the component normal to the start-goal line.
    RemoveLateral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coefficients {
    Fixed { lambda_s: f64, lambda_h: f64 },
    Heads(HeadWeights),
}

/// Residual force network: 16 inputs, two tanh hidden layers, 2 outputs
/// squashed by `lambda_max * tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: [usize; 4],
    pub weights: Vec<f64>,
}

pub const MLP_INPUTS: usize = 16;

impl Mlp {
    /// Hidden layers drawn from `rng`; the output layer starts at zero so the
    /// residual force is initially zero.
    pub fn new(hidden: usize, rng: &mut impl rand::Rng) -> Mlp {
        let sizes = [MLP_INPUTS, hidden, hidden, 2];
        let mut weights = Vec::with_capacity(Self::count(&sizes));
        for l in 0..3 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let scale = if l == 2 { 0.0 } else { 1.0 / (n_in as f64).sqrt() };
            for _ in 0..n_out * n_in {
                weights.push(rng.gen_range(-1.0..1.0) * scale);
            }
            weights.extend(std::iter::repeat(0.0).take(n_out));
        }
        Mlp { sizes, weights }
    }

    fn count(sizes: &[usize; 4]) -> usize {
        (0..3).map(|l| sizes[l + 1] * (sizes[l] + 1)).sum()
    }

    pub fn forward(&self, input: &[f64]) -> [f64; 2] {
        let mut act = input.to_vec();
        let mut offset = 0;
        for l in 0..3 {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.weights[offset..offset + n_out * n_in];
            let b = &self.weights[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            offset += n_out * (n_in + 1);
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let z: f64 = b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(&act).map(|(a, x)| a * x).sum::<f64>();
                next[o] = if l < 2 { z.tanh() } else { z };
            }
            act = next;
        }
        [act[0], act[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub params: FieldParams,
    pub coefficients: Coefficients,
    pub gate: GateMode,
    pub gate_params: GateParams,
    pub residual: Option<Mlp>,
}

impl Policy {
    pub fn geometry_only(params: &FieldParams) -> Policy {
        Policy {
            params: params.geometry_only(),
            coefficients: Coefficients::Fixed {
                lambda_s: 0.0,
                lambda_h: 0.0,
            },
            gate: GateMode::Open,
            gate_params: GateParams::default(),
            residual: None,
        }
    }

    /// Number of parameters tracked by forward sensitivities.
    pub fn sensitivity_dim(&self) -> usize {
        match self.coefficients {
            Coefficients::Fixed { .. } => 2,
            Coefficients::Heads(_) => NUM_HEAD_PARAMS,
        }
    }

    /// Coefficients for the given features, with Jacobian rows.
    fn coefficients(&self, features: &HeadFeatures) -> (f64, f64, Vec<f64>, Vec<f64>) {
        match &self.coefficients {
            Coefficients::Fixed { lambda_s, lambda_h } => (*lambda_s, *lambda_h, vec![1.0, 0.0], vec![0.0, 1.0]),
            Coefficients::Heads(w) => {
                let p = predict_coefficients(features, w, self.params.lambda_max);
                (p.lambda_s, p.lambda_h, p.dlambda_s.to_vec(), p.dlambda_h.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub sensitivities: bool,
    pub filter: Option<ContextFilter>,
    pub record_energy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Reached,
    Timeout,
    LeftPatch,
    Stuck,
}

/// Quantities recorded at step `t` (forces evaluated at `q_t`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub q: Vec2,
    pub p: Vec2,
    pub f_geom: Vec2,
    pub f_soft: Vec2,
    pub f_hard: Vec2,
    /// Context force actually applied (after filtering, including any residual).
    pub f_ctx: Vec2,
    pub m: f64,
    pub k_star: Option<usize>,
    pub k_geo: Option<usize>,
    pub lambda_s: f64,
    pub lambda_h: f64,
    pub risk: f64,
    pub risk_grad: Vec2,
    pub sdf: f64,
    pub sdf_grad: Vec2,
    /// At least one patch event has fired.
    pub post_event: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accumulators {
    pub arc_length: f64,
    /// Sum of soft risk times path increment.
    pub cum_risk: f64,
    pub hard_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub steps: Vec<StepRecord>,
    pub final_state: PhaseState,
    pub status: Status,
    pub accum: Accumulators,
    /// Steps at which patch events fired.
    pub event_steps: Vec<usize>,
    /// `dq_t / dtheta` for t = 0..=T when requested.
    #[serde(skip)]
    pub sensitivities: Option<Vec<Matrix2xX<f64>>>,
    /// Hamiltonian at each visited state when requested.
    pub energy: Vec<f64>,
}

impl RolloutRecord {
    /// Positions q_0..=q_T.
    pub fn positions(&self) -> Vec<Vec2> {
        let mut v: Vec<Vec2> = self.steps.iter().map(|s| s.q).collect();
        v.push(self.final_state.q);
        v
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One semi-implicit step under a given total force.
pub fn integrate(state: PhaseState, force: Vec2, params: &FieldParams, tau: f64) -> PhaseState {
    let minv = params.inverse_mass();
    let p = state.p + force * tau - minv * state.p * (tau * params.gamma);
    let q = state.q + minv * p * tau;
    PhaseState { q, p }
}

/// One step of the field with coefficients taken from `params` and the soft
/// channel scaled by `gate_value`.
pub fn step(
    state: PhaseState,
    patch: &RiskPatch,
    params: &FieldParams,
    goal: Vec2,
    obstacles: &[Obstacle],
    gate_value: f64,
    config: &IntegratorConfig,
) -> Result<PhaseState, RolloutError> {
    let geo = geometry_terms(state.q, params, goal, obstacles)?;
    let (soft, hard) = context_force(state.q, patch, params, gate_value);
    Ok(integrate(state, geo.force + soft + hard, params, config.tau))
}

fn residual_input(features: &HeadFeatures, patch: &RiskPatch, q: Vec2, goal: Vec2) -> [f64; 16] {
    let r = patch.sample(Field::SoftRisk, q);
    let phi = patch.sample(Field::Sdf, q);
    let to_goal = goal - q;
    let dir = if to_goal.norm() > 0.0 { to_goal.normalize() } else { Vec2::zeros() };
    let f = &features.0;
    [
        f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7],
        r.value,
        r.gradient.x,
        r.gradient.y,
        phi.value.clamp(-1.0, 2.0),
        phi.gradient.x,
        phi.gradient.y,
        dir.x,
        dir.y,
    ]
}

/// Step-by-step simulator; [`rollout`] drives it to termination. Exposes the
/// obstacle set between steps so callers can adjust barrier weights online.
pub struct Simulator<'a> {
    scenario: &'a Scenario,
    policy: &'a Policy,
    config: &'a IntegratorConfig,
    options: RolloutOptions,
    pub obstacles: Vec<Obstacle>,
    /// Goal gain and damping in effect; start at the policy's values.
    pub beta: f64,
    pub gamma: f64,
    patch: RiskPatch,
    applied_events: usize,
    features: HeadFeatures,
    lambda: (f64, f64),
    dlambda: (Vec<f64>, Vec<f64>),
    state: PhaseState,
    t: usize,
    minv: Matrix2<f64>,
    lateral_axis: Vec2,
    dq: Matrix2xX<f64>,
    dp: Matrix2xX<f64>,
    record: RolloutRecord,
    done: Option<Status>,
}

impl<'a> Simulator<'a> {
    pub fn new(
        scenario: &'a Scenario,
        policy: &'a Policy,
        config: &'a IntegratorConfig,
        options: RolloutOptions,
    ) -> Result<Self, RolloutError> {
        policy.params.validate()?;
        if options.sensitivities {
            if policy.residual.is_some() {
                return Err(RolloutError::Unsupported("sensitivities with a residual network".into()));
            }
            if !matches!(options.filter, None | Some(ContextFilter::None)) {
                return Err(RolloutError::Unsupported("sensitivities with a context filter".into()));
            }
        }
        let dim = policy.sensitivity_dim();
        let spec = &scenario.spec;
        let line = spec.goal - spec.start;
        let lateral_axis = if line.norm() > 0.0 {
            Vec2::new(-line.y, line.x).normalize()
        } else {
            Vec2::new(0.0, 1.0)
        };
        let mut sim = Simulator {
            scenario,
            policy,
            config,
            options,
            obstacles: Obstacle::from_anchors(&scenario.obstacles, policy.params.alpha),
            beta: policy.params.beta,
            gamma: policy.params.gamma,
            patch: scenario.patch.clone(),
            applied_events: 0,
            features: HeadFeatures([0.0; 8]),
            lambda: (0.0, 0.0),
            dlambda: (vec![0.0; dim], vec![0.0; dim]),
            state: PhaseState::at_rest(spec.start),
            t: 0,
            minv: policy.params.inverse_mass(),
            lateral_axis,
            dq: Matrix2xX::zeros(dim),
            dp: Matrix2xX::zeros(dim),
            record: RolloutRecord {
                steps: Vec::with_capacity(config.horizon),
                final_state: PhaseState::at_rest(spec.start),
                status: Status::Timeout,
                accum: Accumulators::default(),
                event_steps: Vec::new(),
                sensitivities: options.sensitivities.then(Vec::new),
                energy: Vec::new(),
            },
            done: None,
        };
        sim.refresh_patch(true);
        Ok(sim)
    }

    pub fn state(&self) -> PhaseState {
        self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn patch(&self) -> &RiskPatch {
        &self.patch
    }

    pub fn status(&self) -> Option<Status> {
        self.done
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.record.steps
    }

    fn refresh_patch(&mut self, force: bool) {
        let due = self.scenario.schedule.due_count(self.t);
        if due != self.applied_events {
            self.patch = apply_events(&self.scenario.patch, &self.scenario.schedule, self.t);
            self.applied_events = due;
            self.record.event_steps.push(self.t);
        } else if !force {
            return;
        }
        self.features = compute_features(&self.patch, self.state.q, self.scenario.spec.goal);
        let (ls, lh, ds, dh) = self.policy.coefficients(&self.features);
        self.lambda = (ls, lh);
        self.dlambda = (ds, dh);
    }

    /// Advances one step; returns the terminal status once the episode ends.
    pub fn advance(&mut self) -> Result<Option<Status>, RolloutError> {
        if self.done.is_some() {
            return Ok(self.done);
        }
        self.refresh_patch(false);
        let policy = self.policy;
        let goal = self.scenario.spec.goal;
        let params = self.effective_params();
        let q = self.state.q;
        let geo = geometry_terms(q, &params, goal, &self.obstacles)?;
        let (m, k_star, k_geo, grad_m) = match policy.gate {
            GateMode::Open => (1.0, None, None, Vec2::zeros()),
            GateMode::Directional { threshold } => (directional_gate(&self.patch, q, threshold), None, None, Vec2::zeros()),
            GateMode::RouteAware => {
                let e = evaluate_gate(q, goal, geo.force, &self.patch, &policy.gate_params);
                let g = if self.options.sensitivities {
                    gate_gradient(q, goal, &e, &self.patch, &policy.gate_params, geo.force, -geo.hessian)
                } else {
                    Vec2::zeros()
                };
                (e.m, e.k_star, Some(e.k_geo), g)
            }
        };
        let (soft, hard) = context_force(q, &self.patch, &params, m);
        let mut ctx = soft + hard;
        match self.options.filter {
            None | Some(ContextFilter::None) => {}
            Some(ContextFilter::ClampNorm(eps)) => {
                let n = ctx.norm();
                if n > eps {
                    ctx *= eps / n;
                }
            }
            Some(ContextFilter::RemoveLateral) => {
                ctx -= self.lateral_axis * ctx.dot(&self.lateral_axis);
            }
        }
        if let Some(mlp) = &policy.residual {
            let out = mlp.forward(&residual_input(&self.features, &self.patch, q, goal));
            ctx += Vec2::new(out[0].tanh(), out[1].tanh()) * params.lambda_max;
        }
        let r_sample = self.patch.sample(Field::SoftRisk, q);
        let r = r_sample.value;
        let phi_sample = self.patch.sample(Field::Sdf, q);
        let phi = phi_sample.value;
        if self.options.record_energy {
            let e = hamiltonian_terms(q, self.state.p, &self.patch, &params, goal, &self.obstacles, m)?;
            self.record.energy.push(e.total());
        }
        self.record.steps.push(StepRecord {
            t: self.t,
            q,
            p: self.state.p,
            f_geom: geo.force,
            f_soft: soft,
            f_hard: hard,
            f_ctx: ctx,
            m,
            k_star,
            k_geo,
            lambda_s: self.lambda.0,
            lambda_h: self.lambda.1,
            risk: r,
            risk_grad: r_sample.gradient,
            sdf: phi,
            sdf_grad: phi_sample.gradient,
            post_event: self.applied_events > 0,
        });
        if let Some(sens) = self.record.sensitivities.as_mut() {
            sens.push(self.dq.clone());
        }

        let next = integrate(self.state, geo.force + ctx, &params, self.config.tau);
        if !(next.q.iter().all(|v| v.is_finite()) && next.p.iter().all(|v| v.is_finite())) {
            return Err(RolloutError::NonFinite(self.t));
        }

        if self.options.sensitivities {
            let cj = context_jacobians(q, &self.patch, &params, m, grad_m);
            let dfdq = cj.dforce_dq - geo.hessian;
            let dim = self.dq.ncols();
            let ds = nalgebra::RowDVector::from_row_slice(&self.dlambda.0);
            let dh = nalgebra::RowDVector::from_row_slice(&self.dlambda.1);
            let mut df = dfdq * &self.dq;
            df += Matrix2xX::from_fn(dim, |i, j| cj.dforce_dlambda_s[i] * ds[j] + cj.dforce_dlambda_h[i] * dh[j]);
            let damp = Matrix2::identity() - self.minv * (self.config.tau * params.gamma);
            self.dp = damp * &self.dp + df * self.config.tau;
            self.dq += self.minv * &self.dp * self.config.tau;
        }

        let dq = (next.q - q).norm();
        self.record.accum.arc_length += dq;
        self.record.accum.cum_risk += r * dq;
        if phi < self.config.epsilon_hard {
            self.record.accum.hard_count += 1;
        }
        self.state = next;
        self.t += 1;

        let status = if (next.q - goal).norm() <= self.config.goal_radius {
            Some(Status::Reached)
        } else if !self.patch.is_interior(next.q) {
            Some(Status::LeftPatch)
        } else if self.t >= self.config.stuck_window
            && (next.q - self.record.steps[self.t - self.config.stuck_window].q).norm() < self.config.stuck_tol
        {
            Some(Status::Stuck)
        } else if self.t >= self.config.horizon {
            Some(Status::Timeout)
        } else {
            None
        };
        self.done = status;
        Ok(status)
    }

    /// Policy parameters with the current coefficients and geometry overrides.
    pub fn effective_params(&self) -> FieldParams {
        FieldParams {
            lambda_s: self.lambda.0,
            lambda_h: self.lambda.1,
            beta: self.beta,
            gamma: self.gamma,
            ..self.policy.params.clone()
        }
    }

    pub fn finish(mut self) -> RolloutRecord {
        self.record.final_state = self.state;
        self.record.status = self.done.unwrap_or(Status::Timeout);
        if let Some(sens) = self.record.sensitivities.as_mut() {
            sens.push(self.dq.clone());
        }
        if self.options.record_energy {
            let params = self.effective_params();
            let m = self.record.steps.last().map_or(1.0, |s| s.m);
            if let Ok(e) = hamiltonian_terms(
                self.state.q,
                self.state.p,
                &self.patch,
                &params,
                self.scenario.spec.goal,
                &self.obstacles,
                m,
            ) {
                self.record.energy.push(e.total());
            }
        }
        self.record
    }
}

pub fn rollout(
    scenario: &Scenario,
    policy: &Policy,
    config: &IntegratorConfig,
    options: RolloutOptions,
) -> Result<RolloutRecord, RolloutError> {
    let mut sim = Simulator::new(scenario, policy, config, options)?;
    while sim.advance()?.is_none() {}
    Ok(sim.finish())
}

/// Rollout with forward sensitivities `dq_t/dtheta` for t = 0..=T.
pub fn rollout_sensitivities(
    scenario: &Scenario,
    policy: &Policy,
    config: &IntegratorConfig,
) -> Result<(RolloutRecord, Vec<Matrix2xX<f64>>), RolloutError> {
    let mut record = rollout(
        scenario,
        policy,
        config,
        RolloutOptions {
            sensitivities: true,
            ..Default::default()
        },
    )?;
    let sens = record.sensitivities.take().unwrap_or_default();
    Ok((record, sens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Layout, Regime};

    #[test]
    fn integrate_matches_hand_computation() {
        let params = FieldParams {
            gamma: 0.5,
            ..FieldParams::default()
        };
        let s = PhaseState {
            q: Vec2::new(1.0, 2.0),
            p: Vec2::new(0.4, -0.2),
        };
        let n = integrate(s, Vec2::new(1.0, 1.0), &params, 0.1);
        let p = Vec2::new(0.4 + 0.1 - 0.1 * 0.5 * 0.4, -0.2 + 0.1 + 0.1 * 0.5 * 0.2);
        assert_eq!(n.p, p);
        assert_eq!(n.q, Vec2::new(1.0, 2.0) + p * 0.1);
    }

    #[test]
    fn geometry_only_reaches_open_goal() {
        let sc = Scenario::sample(Regime::R3, 4, &Layout::default()).unwrap();
        let params = FieldParams::default();
        let rec = rollout(&sc, &Policy::geometry_only(&params), &IntegratorConfig::default(), RolloutOptions::default()).unwrap();
        assert_eq!(rec.status, Status::Reached);
    }

    #[test]
    fn zero_residual_network_is_inert() {
        let sc = Scenario::sample(Regime::R1, 8, &Layout::default()).unwrap();
        let params = FieldParams::default();
        let base = Policy::geometry_only(&params);
        let mut rng = rand::rngs::mock::StepRng::new(1, 7);
        let with_res = Policy {
            residual: Some(Mlp::new(32, &mut rng)),
            ..base.clone()
        };
        let cfg = IntegratorConfig::default();
        let a = rollout(&sc, &base, &cfg, RolloutOptions::default()).unwrap();
        let b = rollout(&sc, &with_res, &cfg, RolloutOptions::default()).unwrap();
        assert_eq!(a.positions(), b.positions());
    }
}
