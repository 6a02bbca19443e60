//! Training: episode-level CVaR updates, the within-episode secant corrector,
//! curriculum advancement, and the barrier excitation diagnostic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ablations::{Trainable, VariantPreset, VariantSpec};
use crate::energy::{ipc_barrier_derivs, HeadWeights, Obstacle};
use crate::objective::{cost_gradient, cvar_gradient, empirical_cvar, episode_cost, CostWeights, EpisodeBatch, ObjectiveError};
use crate::rollout::{rollout, Coefficients, IntegratorConfig, Policy, RolloutError, RolloutOptions, RolloutRecord, Simulator};
use crate::world::{Layout, Regime, Scenario, ScenarioSpec, WorldError};
use crate::Vec2;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
}

/// Sampling weights over scenario regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioMix {
    pub delayed_escape: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        ScenarioMix {
            delayed_escape: 0.5,
            r1: 0.2,
            r2: 0.2,
            r3: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Advance when every validation violation rate in the window is below this.
    pub eta_tol: f64,
    pub window: usize,
    pub validation_episodes: usize,
    /// Epochs between validation passes.
    pub check_every: usize,
    /// Escape-time range per phase; later phases open the pocket later.
    pub t_escape_phases: Vec<[usize; 2]>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            eta_tol: 0.1,
            window: 3,
            validation_episodes: 16,
            check_every: 10,
            t_escape_phases: vec![[10, 30], [20, 45], [30, 60]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// CVaR level; `None` uses the variant preset's level.
    pub alpha: Option<f64>,
    pub lr: f64,
    pub clip_norm: f64,
    pub mix: ScenarioMix,
    pub curriculum: CurriculumConfig,
    /// Central-difference step for geometry parameters.
    pub fd_step: f64,
    /// Perturbation size for the residual network.
    pub spsa_step: f64,
    /// Held-out episodes scoring checkpoints under the variant's own
    /// objective; the best-scoring parameters are kept. Zero disables.
    pub selection_episodes: usize,
    /// Consecutive skipped steps after which training aborts.
    pub max_consecutive_faults: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch: 64,
            alpha: None,
            lr: 0.05,
            clip_norm: 5.0,
            mix: ScenarioMix::default(),
            curriculum: CurriculumConfig::default(),
            fd_step: 1e-3,
            spsa_step: 0.05,
            selection_episodes: 64,
            max_consecutive_faults: 10,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for item `i` of stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, i: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)) ^ i)
}

/// Draws training scenarios from the regime mixture at the current phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSampler {
    pub layout: Layout,
    pub mix: ScenarioMix,
    pub phases: Vec<[usize; 2]>,
    pub phase: usize,
    pub seed: u64,
}

impl ScenarioSampler {
    pub fn new(layout: Layout, mix: ScenarioMix, phases: Vec<[usize; 2]>, seed: u64) -> Self {
        ScenarioSampler {
            layout,
            mix,
            phases,
            phase: 0,
            seed,
        }
    }

    pub fn phase_layout(&self) -> Layout {
        let mut layout = self.layout.clone();
        if let Some(range) = self.phases.get(self.phase) {
            layout.t_escape_range = *range;
        }
        layout
    }

    pub fn is_final_phase(&self) -> bool {
        self.phase + 1 >= self.phases.len()
    }

    /// Moves to the next (harder) phase; no-op in the final phase.
    pub fn advance(&mut self) -> bool {
        if self.is_final_phase() {
            false
        } else {
            self.phase += 1;
            true
        }
    }

    fn pick_regime(&self, rng: &mut impl Rng) -> Regime {
        let m = &self.mix;
        let total = m.delayed_escape + m.r1 + m.r2 + m.r3;
        let mut u = rng.gen::<f64>() * total;
        for (w, r) in [
            (m.delayed_escape, Regime::DelayedEscape),
            (m.r1, Regime::R1),
            (m.r2, Regime::R2),
        ] {
            if u < w {
                return r;
            }
            u -= w;
        }
        Regime::R3
    }

    /// Scenario `i` of `epoch`; a draw that fails certification is replaced
    /// by the next seed in the same stream.
    pub fn sample(&self, epoch: usize, i: usize) -> Result<Scenario, WorldError> {
        let layout = self.phase_layout();
        let mut last_err = None;
        for attempt in 0..16u64 {
            let s = derive_seed(self.seed, epoch as u64, (i as u64) << 8 | attempt);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let regime = self.pick_regime(&mut rng);
            match Scenario::build(ScenarioSpec::sample(regime, s, &layout)) {
                Ok(sc) => return Ok(sc),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDiagnostics {
    pub epoch: usize,
    pub phase: usize,
    pub cvar: f64,
    pub mean_cost: f64,
    pub tail_size: usize,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub mean_lambda_s: f64,
    pub mean_lambda_h: f64,
    pub fault: bool,
    pub validation_violation: Option<f64>,
    pub selection_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub preset: VariantPreset,
    /// Current parameters; see [`TrainState::selected_policy`] for the
    /// checkpoint chosen on held-out episodes.
    pub policy: Policy,
    pub epoch: usize,
    pub phase: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub violation_history: Vec<f64>,
    pub faults: usize,
    pub consecutive_faults: usize,
    pub log: Vec<BatchDiagnostics>,
    pub best_policy: Option<Policy>,
    /// Epoch count at the retained checkpoint and its selection score.
    pub best_epoch: usize,
    pub best_score: Option<f64>,
}

impl TrainState {
    pub fn new(spec: VariantSpec, cfg: &TrainConfig) -> Self {
        TrainState {
            preset: spec.preset,
            policy: spec.policy,
            epoch: 0,
            phase: 0,
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            violation_history: Vec::new(),
            faults: 0,
            consecutive_faults: 0,
            log: Vec::new(),
            best_policy: None,
            best_epoch: 0,
            best_score: None,
        }
    }

    /// Best held-out checkpoint (possibly the initial parameters), or the
    /// current parameters when selection is disabled.
    pub fn selected_policy(&self) -> &Policy {
        self.best_policy.as_ref().unwrap_or(&self.policy)
    }

    /// Trainable parameters as a flat vector.
    pub fn parameters(&self) -> Vec<f64> {
        match self.preset.trainable {
            Trainable::Nothing => Vec::new(),
            Trainable::Heads => match &self.policy.coefficients {
                Coefficients::Heads(w) => w.to_vec(),
                Coefficients::Fixed { lambda_s, lambda_h } => vec![*lambda_s, *lambda_h],
            },
            Trainable::Geometry => vec![self.policy.params.beta, self.policy.params.gamma],
            Trainable::Residual => self.policy.residual.as_ref().map(|m| m.weights.clone()).unwrap_or_default(),
        }
    }

    /// Writes back a parameter vector, projecting onto the admissible set.
    pub fn set_parameters(&mut self, v: &[f64]) {
        match self.preset.trainable {
            Trainable::Nothing => {}
            Trainable::Heads => match &mut self.policy.coefficients {
                Coefficients::Heads(w) => {
                    *w = HeadWeights::from_slice(v);
                    w.project();
                }
                Coefficients::Fixed { lambda_s, lambda_h } => {
                    let max = self.policy.params.lambda_max;
                    *lambda_s = v[0].clamp(0.0, max);
                    *lambda_h = v[1].clamp(0.0, max);
                }
            },
            Trainable::Geometry => {
                self.policy.params.beta = v[0].max(1e-3);
                self.policy.params.gamma = v[1].max(1e-3);
            }
            Trainable::Residual => {
                if let Some(m) = self.policy.residual.as_mut() {
                    m.weights.copy_from_slice(v);
                }
            }
        }
    }
}

struct Episode {
    cost: f64,
    gradient: Vec<f64>,
    lambda: (f64, f64),
}

fn run_batch(
    policy: &Policy,
    scenarios: &[Scenario],
    integrator: &IntegratorConfig,
    weights: &CostWeights,
    sensitivities: bool,
) -> Result<Vec<Episode>, LearnerError> {
    scenarios
        .par_iter()
        .map(|sc| {
            let opts = RolloutOptions {
                sensitivities,
                ..Default::default()
            };
            let rec = rollout(sc, policy, integrator, opts)?;
            let cost = episode_cost(&rec, weights, sc.spec.goal);
            let gradient = if sensitivities {
                cost_gradient(&rec, weights, sc.spec.goal)?
            } else {
                Vec::new()
            };
            let n = rec.steps.len().max(1) as f64;
            let lambda = (
                rec.steps.iter().map(|s| s.lambda_s).sum::<f64>() / n,
                rec.steps.iter().map(|s| s.lambda_h).sum::<f64>() / n,
            );
            Ok(Episode { cost, gradient, lambda })
        })
        .collect()
}

fn batch_cvar(policy: &Policy, scenarios: &[Scenario], integrator: &IntegratorConfig, weights: &CostWeights, alpha: f64) -> Result<f64, LearnerError> {
    let eps = run_batch(policy, scenarios, integrator, weights, false)?;
    let costs: Vec<f64> = eps.iter().map(|e| e.cost).collect();
    Ok(empirical_cvar(&costs, alpha)?.value)
}

/// Rescales `g` to norm at most `clip`; returns the pre-clip norm.
pub fn clip_gradient(g: &mut [f64], clip: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip && norm.is_finite() {
        let s = clip / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// One CVaR gradient step on a freshly sampled batch.
pub fn episode_update(
    state: &mut TrainState,
    sampler: &ScenarioSampler,
    batch: usize,
    alpha: f64,
    env: &TrainEnv,
    cfg: &TrainConfig,
) -> Result<BatchDiagnostics, LearnerError> {
    let (integrator, weights) = (&env.integrator, &env.weights);
    if batch < 2 {
        return Err(LearnerError::Config("batch size must be at least 2".into()));
    }
    let scenarios: Vec<Scenario> = (0..batch)
        .map(|i| sampler.sample(state.epoch, i))
        .collect::<Result<_, _>>()?;
    let trainable = state.preset.trainable;
    let with_sens = trainable == Trainable::Heads;
    let episodes = match run_batch(&state.policy, &scenarios, integrator, &weights, with_sens) {
        Ok(e) => Some(e),
        Err(LearnerError::Rollout(_)) => None,
        Err(e) => return Err(e),
    };
    let mut diag = BatchDiagnostics {
        epoch: state.epoch,
        phase: sampler.phase,
        cvar: f64::NAN,
        mean_cost: f64::NAN,
        tail_size: 0,
        grad_norm_pre: 0.0,
        grad_norm_post: 0.0,
        mean_lambda_s: 0.0,
        mean_lambda_h: 0.0,
        fault: false,
        validation_violation: None,
        selection_score: None,
    };
    let Some(episodes) = episodes else {
        diag.fault = true;
        state.faults += 1;
        state.epoch += 1;
        return Ok(diag);
    };
    let costs: Vec<f64> = episodes.iter().map(|e| e.cost).collect();
    let est = empirical_cvar(&costs, alpha)?;
    diag.cvar = est.value;
    diag.mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
    diag.tail_size = est.tail_mask.iter().filter(|&&t| t).count();
    diag.mean_lambda_s = episodes.iter().map(|e| e.lambda.0).sum::<f64>() / batch as f64;
    diag.mean_lambda_h = episodes.iter().map(|e| e.lambda.1).sum::<f64>() / batch as f64;

    let theta = state.parameters();
    let gradient: Option<Vec<f64>> = match trainable {
        Trainable::Nothing => None,
        Trainable::Heads => Some(cvar_gradient(&EpisodeBatch {
            costs,
            alpha,
            gradients: episodes.into_iter().map(|e| e.gradient).collect(),
        })?),
        Trainable::Geometry => {
            let mut g = vec![0.0; theta.len()];
            for i in 0..theta.len() {
                let mut probe = state.clone();
                let mut plus = theta.clone();
                plus[i] += cfg.fd_step;
                probe.set_parameters(&plus);
                let up = batch_cvar(&probe.policy, &scenarios, integrator, &weights, alpha);
                let mut minus = theta.clone();
                minus[i] -= cfg.fd_step;
                probe.set_parameters(&minus);
                let down = batch_cvar(&probe.policy, &scenarios, integrator, &weights, alpha);
                g[i] = match (up, down) {
                    (Ok(u), Ok(d)) => (u - d) / (2.0 * cfg.fd_step),
                    _ => f64::NAN,
                };
            }
            Some(g)
        }
        Trainable::Residual => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sampler.seed, 0x5b5a, state.epoch as u64));
            let delta: Vec<f64> = (0..theta.len()).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let mut probe = state.clone();
            let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&delta).map(|(t, d)| t + sign * cfg.spsa_step * d).collect() };
            probe.set_parameters(&shifted(1.0));
            let up = batch_cvar(&probe.policy, &scenarios, integrator, &weights, alpha);
            probe.set_parameters(&shifted(-1.0));
            let down = batch_cvar(&probe.policy, &scenarios, integrator, &weights, alpha);
            Some(match (up, down) {
                (Ok(u), Ok(d)) => {
                    let slope = (u - d) / (2.0 * cfg.spsa_step);
                    delta.iter().map(|d| slope * d).collect()
                }
                _ => vec![f64::NAN; theta.len()],
            })
        }
    };
    if let Some(mut g) = gradient {
        if g.iter().any(|v| !v.is_finite()) {
            diag.fault = true;
            state.faults += 1;
        } else {
            diag.grad_norm_pre = clip_gradient(&mut g, state.clip_norm);
            diag.grad_norm_post = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let next: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - state.lr * gi).collect();
            state.set_parameters(&next);
        }
    }
    state.epoch += 1;
    Ok(diag)
}

/// True iff the last `window` violation rates are all strictly below `eta_tol`.
pub fn curriculum_check(history: &[f64], eta_tol: f64, window: usize) -> bool {
    if window == 0 || history.len() < window {
        return false;
    }
    history[history.len() - window..].iter().all(|&v| v < eta_tol)
}

/// Fraction of validation delayed-escape episodes with any hazard contact.
pub fn validation_violation_rate(
    policy: &Policy,
    sampler: &ScenarioSampler,
    episodes: usize,
    integrator: &IntegratorConfig,
    round: u64,
) -> Result<f64, LearnerError> {
    let layout = sampler.phase_layout();
    let contacts: Vec<bool> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(sampler.seed, 0xfa11_da7e ^ round, i as u64);
            let sc = Scenario::build(ScenarioSpec::sample(Regime::DelayedEscape, seed, &layout))?;
            let rec = rollout(&sc, policy, integrator, RolloutOptions::default())?;
            Ok::<bool, LearnerError>(rec.accum.hard_count > 0)
        })
        .collect::<Result<_, _>>()?;
    Ok(contacts.iter().filter(|&&c| c).count() as f64 / episodes.max(1) as f64)
}

/// World, integrator and cost shared by every episode of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEnv {
    pub layout: Layout,
    pub integrator: IntegratorConfig,
    pub weights: CostWeights,
}

/// Full training run for a variant. Variants with nothing to train are
/// returned unchanged.
pub fn train(spec: VariantSpec, env: &TrainEnv, cfg: &TrainConfig, seed: u64, on_epoch: impl FnMut(&BatchDiagnostics)) -> Result<TrainState, LearnerError> {
    let mut state = TrainState::new(spec, cfg);
    train_resume(&mut state, env, cfg, seed, on_epoch)?;
    Ok(state)
}

/// Continues `state` until `cfg.epochs` epochs are done. Scenario draws are
/// keyed by epoch, so an interrupted run resumed from its checkpoint
/// reproduces the uninterrupted one. On error `state` holds the last good
/// parameters.
pub fn train_resume(
    state: &mut TrainState,
    env: &TrainEnv,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&BatchDiagnostics),
) -> Result<(), LearnerError> {
    if state.preset.trainable == Trainable::Nothing {
        return Ok(());
    }
    let alpha = cfg.alpha.unwrap_or(state.preset.alpha);
    let mut sampler = ScenarioSampler::new(env.layout.clone(), cfg.mix.clone(), cfg.curriculum.t_escape_phases.clone(), seed);
    sampler.phase = state.phase;
    // the selection set follows the target distribution, not the curriculum
    let target = ScenarioSampler::new(env.layout.clone(), cfg.mix.clone(), Vec::new(), derive_seed(seed, 0x5e1e, 0));
    let selection: Vec<Scenario> = (0..cfg.selection_episodes)
        .map(|i| target.sample(0, i))
        .collect::<Result<_, _>>()?;
    let score = |policy: &Policy| -> Option<f64> {
        if selection.is_empty() {
            return None;
        }
        batch_cvar(policy, &selection, &env.integrator, &env.weights, alpha).ok()
    };
    if state.best_score.is_none() {
        state.best_score = score(&state.policy);
        state.best_epoch = state.epoch;
        if state.best_score.is_some() {
            state.best_policy = Some(state.policy.clone());
        }
    }
    let cur = &cfg.curriculum;
    while state.epoch < cfg.epochs {
        let before = state.clone();
        let mut diag = episode_update(state, &sampler, cfg.batch, alpha, env, cfg)?;
        if diag.fault {
            state.consecutive_faults += 1;
            if state.consecutive_faults >= cfg.max_consecutive_faults.max(1) {
                let epoch = state.epoch;
                *state = before;
                return Err(LearnerError::Diverged(epoch));
            }
        } else {
            state.consecutive_faults = 0;
        }
        let checkpoint = cur.check_every > 0 && state.epoch % cur.check_every == 0;
        if checkpoint && !sampler.is_final_phase() {
            let rate = validation_violation_rate(&state.policy, &sampler, cur.validation_episodes, &env.integrator, state.epoch as u64)?;
            state.violation_history.push(rate);
            diag.validation_violation = Some(rate);
            if curriculum_check(&state.violation_history, cur.eta_tol, cur.window) && sampler.advance() {
                state.violation_history.clear();
                state.phase = sampler.phase;
            }
        }
        if checkpoint {
            diag.selection_score = score(&state.policy);
            if let (Some(s), Some(b)) = (diag.selection_score, state.best_score) {
                if s < b {
                    state.best_score = Some(s);
                    state.best_epoch = state.epoch;
                    state.best_policy = Some(state.policy.clone());
                }
            }
        }
        on_epoch(&diag);
        state.log.push(diag);
    }
    Ok(())
}

/// Rank-1 secant Gauss-Newton corrector over a small coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCorrector {
    pub j_hat: DMatrix<f64>,
    pub mu: f64,
    pub rho: f64,
    pub rates: DVector<f64>,
}

impl SegmentCorrector {
    pub fn new(j_hat: DMatrix<f64>, mu: f64, rho: f64, rates: DVector<f64>) -> Result<Self, LearnerError> {
        if !(rho >= 0.0) || !(0.0..=1.0).contains(&mu) || rates.len() != j_hat.ncols() {
            return Err(LearnerError::Config("corrector needs rho >= 0, mu in [0, 1], one rate per coefficient".into()));
        }
        Ok(SegmentCorrector { j_hat, mu, rho, rates })
    }

    /// Secant update of the Jacobian estimate, then a damped least-squares
    /// step toward `y_target`. A zero `delta_zeta` keeps the previous estimate.
    pub fn segment_correct(
        &mut self,
        delta_y: &DVector<f64>,
        delta_zeta: &DVector<f64>,
        y_target: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<DVector<f64>, LearnerError> {
        if y_target.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(LearnerError::Config("non-finite corrector target".into()));
        }
        let dz2 = delta_zeta.norm_squared();
        if dz2 > 0.0 && delta_y.iter().all(|v| v.is_finite()) {
            let update = delta_y * delta_zeta.transpose() / dz2;
            let next = &self.j_hat * self.mu + update * (1.0 - self.mu);
            if next.iter().all(|v| v.is_finite()) {
                self.j_hat = next;
            }
        }
        let jt = self.j_hat.transpose();
        let n = self.j_hat.ncols();
        let normal = &jt * &self.j_hat + DMatrix::identity(n, n) * self.rho;
        let rhs = &jt * (y_target - y);
        let step = match normal.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => normal
                .pseudo_inverse(1e-12)
                .map_err(|e| LearnerError::Config(e.to_string()))?
                * rhs,
        };
        Ok(step.component_mul(&self.rates))
    }

    /// Applies a step and projects onto nonnegative coefficients.
    pub fn apply(zeta: &DVector<f64>, step: &DVector<f64>) -> DVector<f64> {
        (zeta + step).map(|v| v.max(0.0))
    }
}

/// Settings for segment-corrected rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorConfig {
    pub segment_len: usize,
    /// Number of nearest obstacles whose barrier weights are adjusted.
    pub top_k: usize,
    pub mu: f64,
    pub rho: f64,
    /// Targets for clearance, speed and per-segment goal progress.
    pub clearance_target: f64,
    pub speed_target: f64,
    /// Per-coordinate rates for (beta, gamma, alpha_1..alpha_K).
    pub rate_geometry: f64,
    pub rate_alpha: f64,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            segment_len: 10,
            top_k: 2,
            mu: 0.7,
            rho: 1.0,
            clearance_target: 0.35,
            speed_target: 1.5,
            rate_geometry: 0.2,
            rate_alpha: 0.2,
        }
    }
}

fn nearest_obstacles(q: Vec2, obstacles: &[Obstacle], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..obstacles.len()).collect();
    idx.sort_by(|&a, &b| {
        (obstacles[a].position - q)
            .norm()
            .total_cmp(&(obstacles[b].position - q).norm())
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Rollout with the segment corrector adjusting goal gain, damping and the
/// nearest barrier weights between segments. Returns the record and the
/// coefficient vector after each correction.
pub fn corrected_rollout(
    scenario: &Scenario,
    policy: &Policy,
    integrator: &IntegratorConfig,
    cfg: &CorrectorConfig,
) -> Result<(RolloutRecord, Vec<DVector<f64>>), LearnerError> {
    let mut sim = Simulator::new(scenario, policy, integrator, RolloutOptions::default())?;
    let k = cfg.top_k.min(scenario.obstacles.len());
    let n = 2 + k;
    // prior sensitivities: clearance grows with barrier weight and damping,
    // speed and progress grow with goal gain and shrink with damping
    let mut prior = DMatrix::zeros(3, n);
    prior[(0, 1)] = 0.1;
    prior[(1, 0)] = 0.5;
    prior[(1, 1)] = -0.5;
    prior[(2, 0)] = 0.3;
    prior[(2, 1)] = -0.3;
    for j in 0..k {
        prior[(0, 2 + j)] = 0.05;
    }
    let mut rates = DVector::from_element(n, cfg.rate_alpha);
    rates[0] = cfg.rate_geometry;
    rates[1] = cfg.rate_geometry;
    let mut corr = SegmentCorrector::new(prior, cfg.mu, cfg.rho, rates)?;
    let seg_time = cfg.segment_len as f64 * integrator.tau;
    let target = DVector::from_vec(vec![cfg.clearance_target, cfg.speed_target, cfg.speed_target * seg_time]);
    let mut history = Vec::new();
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut seg_start_dist = (sim.state().q - scenario.spec.goal).norm();
    loop {
        let status = sim.advance()?;
        if status.is_some() {
            break;
        }
        if sim.t() % cfg.segment_len.max(1) != 0 {
            continue;
        }
        let q = sim.state().q;
        let minv = policy.params.inverse_mass();
        let speed = (minv * sim.state().p).norm();
        let nearest = nearest_obstacles(q, &sim.obstacles, k);
        let clearance = nearest
            .first()
            .map_or(policy.params.d_hat_ipc, |&i| (sim.obstacles[i].position - q).norm().min(policy.params.d_hat_ipc));
        let dist = (q - scenario.spec.goal).norm();
        let y = DVector::from_vec(vec![clearance, speed, seg_start_dist - dist]);
        seg_start_dist = dist;
        let mut zeta = DVector::zeros(n);
        zeta[0] = sim.beta;
        zeta[1] = sim.gamma;
        for (j, &i) in nearest.iter().enumerate() {
            zeta[2 + j] = sim.obstacles[i].alpha;
        }
        let (dy, dz) = match &prev {
            Some((py, pz)) => (&y - py, &zeta - pz),
            None => (DVector::zeros(3), DVector::zeros(n)),
        };
        let step = corr.segment_correct(&dy, &dz, &target, &y)?;
        let next = SegmentCorrector::apply(&zeta, &step);
        sim.beta = next[0];
        sim.gamma = next[1];
        for (j, &i) in nearest.iter().enumerate() {
            sim.obstacles[i].alpha = next[2 + j];
        }
        prev = Some((y, zeta));
        history.push(next);
    }
    Ok((sim.finish(), history))
}

/// Smallest eigenvalue of the averaged barrier-dictionary Gram matrix over
/// visited states. Each dictionary atom is one obstacle's barrier gradient.
pub fn gram_excitation_check(trajectories: &[Vec<Vec2>], atoms: &[Vec2], d_hat: f64) -> Result<f64, LearnerError> {
    if trajectories.len() < 2 {
        return Err(LearnerError::Config("excitation check needs at least two rollouts".into()));
    }
    let n = atoms.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut count = 0usize;
    for traj in trajectories {
        for &q in traj {
            let mut g = DMatrix::<f64>::zeros(2, n);
            for (j, &o) in atoms.iter().enumerate() {
                let diff = q - o;
                let d = diff.norm();
                if d <= 0.0 {
                    continue;
                }
                let (_, db, _) = ipc_barrier_derivs(d, d_hat).map_err(|e| LearnerError::Rollout(e.into()))?;
                let grad = diff / d * db;
                g[(0, j)] = grad.x;
                g[(1, j)] = grad.y;
            }
            gram += g.transpose() * g;
            count += 1;
        }
    }
    gram /= count.max(1) as f64;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    Ok(eig.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0))
}
