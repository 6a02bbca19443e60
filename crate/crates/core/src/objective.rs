//! Episode cost, empirical CVaR with a detached quantile, its tail gradient,
//! the upper-confidence bound and the projected dual step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::softplus_barrier;
use crate::rollout::RolloutRecord;
use crate::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("alpha must lie in [0, 1), got {0}")]
    Alpha(f64),
    #[error("record has no sensitivities")]
    MissingSensitivities,
    #[error("cost {0} outside [0, c_max]; the bound does not apply")]
    CostRange(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    Delta(f64),
    #[error("gradient count {got} does not match batch size {expected}")]
    GradientCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub w_goal: f64,
    pub w_length: f64,
    pub w_risk: f64,
    pub w_hard: f64,
    /// Smooth hazard-proximity penalty: per-step softplus barrier on the
    /// signed distance. The contact count has no pathwise gradient, so this
    /// term is what lets training see approaching hazards.
    pub w_barrier: f64,
    pub barrier_margin: f64,
    pub barrier_sharpness: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_goal: 1.0,
            w_length: 0.05,
            w_risk: 1.0,
            w_hard: 2.0,
            w_barrier: 0.05,
            barrier_margin: 0.3,
            barrier_sharpness: 10.0,
        }
    }
}

impl CostWeights {
    /// Weights used for the post-event violation cost: risk plus hard contacts
    /// at ten times the risk weight.
    pub fn violation(&self) -> CostWeights {
        CostWeights {
            w_goal: 0.0,
            w_length: 0.0,
            w_risk: self.w_risk,
            w_hard: 10.0 * self.w_risk,
            w_barrier: 0.0,
            ..self.clone()
        }
    }
}

pub fn episode_cost(record: &RolloutRecord, weights: &CostWeights, goal: Vec2) -> f64 {
    let a = &record.accum;
    weights.w_goal * (record.final_state.q - goal).norm_squared()
        + weights.w_length * a.arc_length
        + weights.w_risk * a.cum_risk
        + weights.w_hard * a.hard_count as f64
        + barrier_cost(record, weights)
}

fn barrier_cost(record: &RolloutRecord, weights: &CostWeights) -> f64 {
    if weights.w_barrier == 0.0 {
        return 0.0;
    }
    let (k, d) = (weights.barrier_sharpness, weights.barrier_margin);
    weights.w_barrier * record.steps.iter().map(|s| softplus_barrier(s.sdf, k, d).0).sum::<f64>()
}

/// Gradient of [`episode_cost`] through the recorded forward sensitivities.
/// The hard-contact count is piecewise constant and contributes nothing.
pub fn cost_gradient(record: &RolloutRecord, weights: &CostWeights, goal: Vec2) -> Result<Vec<f64>, ObjectiveError> {
    let sens = record.sensitivities.as_ref().ok_or(ObjectiveError::MissingSensitivities)?;
    let n = sens.first().map_or(0, |s| s.ncols());
    let mut grad = vec![0.0; n];
    let positions = record.positions();
    for (t, step) in record.steps.iter().enumerate() {
        let delta = positions[t + 1] - positions[t];
        let len = delta.norm();
        let d_next = &sens[t + 1];
        let d_cur = &sens[t];
        let path_weight = weights.w_length + weights.w_risk * step.risk;
        for j in 0..n {
            let mut g = 0.0;
            if len > 0.0 {
                let u = delta / len;
                let dd = Vec2::new(d_next[(0, j)] - d_cur[(0, j)], d_next[(1, j)] - d_cur[(1, j)]);
                g += path_weight * u.dot(&dd);
            }
            g += weights.w_risk * len * (step.risk_grad.x * d_cur[(0, j)] + step.risk_grad.y * d_cur[(1, j)]);
            if weights.w_barrier != 0.0 {
                let slope = softplus_barrier(step.sdf, weights.barrier_sharpness, weights.barrier_margin).1;
                let gb = step.sdf_grad * (weights.w_barrier * slope);
                g += gb.x * d_cur[(0, j)] + gb.y * d_cur[(1, j)];
            }
            grad[j] += g;
        }
    }
    let last = sens.last().expect("sensitivities include the final state");
    let e = (record.final_state.q - goal) * (2.0 * weights.w_goal);
    for (j, g) in grad.iter_mut().enumerate() {
        *g += e.x * last[(0, j)] + e.y * last[(1, j)];
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvarEstimate {
    pub value: f64,
    pub eta_hat: f64,
    pub tail_mask: Vec<bool>,
}

fn check_alpha(alpha: f64) -> Result<(), ObjectiveError> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(ObjectiveError::Alpha(alpha))
    }
}

/// `ceil(alpha * B)`-th order statistic, clamped to `[1, B]`.
pub fn empirical_quantile(costs: &[f64], alpha: f64) -> f64 {
    let mut sorted = costs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let k = ((alpha * b as f64).ceil() as usize).clamp(1, b);
    sorted[k - 1]
}

pub fn empirical_cvar(costs: &[f64], alpha: f64) -> Result<CvarEstimate, ObjectiveError> {
    if costs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    check_alpha(alpha)?;
    let eta_hat = empirical_quantile(costs, alpha);
    let excess: f64 = costs.iter().map(|&j| (j - eta_hat).max(0.0)).sum();
    let value = eta_hat + excess / ((1.0 - alpha) * costs.len() as f64);
    Ok(CvarEstimate {
        value,
        eta_hat,
        tail_mask: costs.iter().map(|&j| j >= eta_hat).collect(),
    })
}

/// Batch of episode costs with their per-episode parameter gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBatch {
    pub costs: Vec<f64>,
    pub alpha: f64,
    pub gradients: Vec<Vec<f64>>,
}

impl EpisodeBatch {
    pub fn estimate(&self) -> Result<CvarEstimate, ObjectiveError> {
        empirical_cvar(&self.costs, self.alpha)
    }
}

/// Tail-gradient estimator with the quantile held fixed.
pub fn cvar_gradient(batch: &EpisodeBatch) -> Result<Vec<f64>, ObjectiveError> {
    if batch.gradients.len() != batch.costs.len() {
        return Err(ObjectiveError::GradientCount {
            expected: batch.costs.len(),
            got: batch.gradients.len(),
        });
    }
    let est = batch.estimate()?;
    let dim = batch.gradients.first().map_or(0, |g| g.len());
    let scale = 1.0 / ((1.0 - batch.alpha) * batch.costs.len() as f64);
    let mut out = vec![0.0; dim];
    for (g, &in_tail) in batch.gradients.iter().zip(&est.tail_mask) {
        if in_tail {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v * scale;
            }
        }
    }
    Ok(out)
}

/// Confidence radius added to the empirical CVaR.
pub fn ucb_radius(c_max: f64, alpha: f64, batch: usize, delta: f64, m_channels: usize) -> f64 {
    c_max / (1.0 - alpha) * ((2.0 * m_channels as f64 / delta).ln() / (2.0 * batch as f64)).sqrt()
}

pub fn cvar_upper_bound(
    costs: &[f64],
    alpha: f64,
    c_max: f64,
    delta: f64,
    m_channels: usize,
) -> Result<f64, ObjectiveError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ObjectiveError::Delta(delta));
    }
    if let Some(&bad) = costs.iter().find(|&&c| !(0.0..=c_max).contains(&c)) {
        return Err(ObjectiveError::CostRange(bad));
    }
    let est = empirical_cvar(costs, alpha)?;
    Ok(est.value + ucb_radius(c_max, alpha, costs.len(), delta, m_channels))
}

/// Projected dual ascent on a single constraint multiplier.
pub fn dual_update(lambda: f64, eta_rate: f64, ucb_cvar: f64, budget: f64) -> f64 {
    (lambda + eta_rate * (ucb_cvar - budget)).max(0.0)
}

/// JSON summary of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub alpha: f64,
    pub eta_hat: f64,
    pub cvar: f64,
    pub mean: f64,
    pub tail_indices: Vec<usize>,
}

impl BatchSummary {
    pub fn from_costs(costs: &[f64], alpha: f64) -> Result<BatchSummary, ObjectiveError> {
        let est = empirical_cvar(costs, alpha)?;
        Ok(BatchSummary {
            alpha,
            eta_hat: est.eta_hat,
            cvar: est.value,
            mean: costs.iter().sum::<f64>() / costs.len() as f64,
            tail_indices: est.tail_mask.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i).collect(),
        })
    }
}
