//! Run configuration shared by the command-line tool: one JSON tree with a
//! section per module. Missing keys take their defaults and unknown keys are
//! rejected at every level.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ablations::PolicyVariant;
use crate::energy::FieldParams;
use crate::evalsuite::{sample_certified, EvalConfig, TheoryConfig};
use crate::gate::GateParams;
use crate::learner::{derive_seed, TrainConfig};
use crate::objective::{episode_cost, CostWeights};
use crate::rollout::{rollout, IntegratorConfig, Policy, RolloutError, RolloutOptions};
use crate::world::{Layout, Regime, ScenarioSpec, WorldError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Regimes to generate; the count is split evenly between them.
    pub regimes: Vec<Regime>,
    pub count: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            regimes: vec![Regime::DelayedEscape],
            count: 100,
        }
    }
}

/// Grid search for the geometry-only goal gain and damping on risk-neutral
/// scenes, used when no geometry checkpoint is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryFitConfig {
    pub enabled: bool,
    pub beta_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub episodes: usize,
}

impl Default for GeometryFitConfig {
    fn default() -> Self {
        GeometryFitConfig {
            enabled: false,
            beta_grid: vec![0.5, 1.0, 1.5, 2.0],
            gamma_grid: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; zero uses every available core.
    pub workers: usize,
    pub scenario: Layout,
    pub integrator: IntegratorConfig,
    pub gate: GateParams,
    pub field: FieldParams,
    pub objective: CostWeights,
    pub learner: TrainConfig,
    pub geometry_fit: GeometryFitConfig,
    pub eval: EvalConfig,
    pub theory: TheoryConfig,
    pub generate: GenerateConfig,
    pub variants: Vec<PolicyVariant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            scenario: Layout::default(),
            integrator: IntegratorConfig::default(),
            gate: GateParams::default(),
            field: FieldParams::default(),
            objective: CostWeights::default(),
            learner: TrainConfig::default(),
            geometry_fit: GeometryFitConfig::default(),
            eval: EvalConfig::default(),
            theory: TheoryConfig::default(),
            generate: GenerateConfig::default(),
            variants: PolicyVariant::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for regime in [Regime::R1, Regime::R2, Regime::R3, Regime::DelayedEscape] {
            ScenarioSpec::sample(regime, self.seed, &self.scenario).validate()?;
        }
        self.field
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.integrator.tau <= 0.0 || !self.integrator.tau.is_finite() {
            return Err(ConfigError::Invalid(format!("integrator.tau must be positive, got {}", self.integrator.tau)));
        }
        if self.learner.batch == 0 {
            return Err(ConfigError::Invalid("learner.batch must be at least 1".into()));
        }
        if let Some(a) = self.learner.alpha {
            if !(0.0..1.0).contains(&a) {
                return Err(ConfigError::Invalid(format!("learner.alpha must lie in [0, 1), got {a}")));
            }
        }
        if self.eval.delta <= 0.0 {
            return Err(ConfigError::Invalid(format!("eval.delta must be positive, got {}", self.eval.delta)));
        }
        if self.generate.regimes.is_empty() {
            return Err(ConfigError::Invalid("generate.regimes is empty".into()));
        }
        Ok(())
    }

    /// Every leaf key in dotted form with its default value.
    pub fn documented_keys() -> Vec<(String, String)> {
        let value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Picks the (beta, gamma) pair with the lowest mean geometry-only cost on
/// risk-neutral scenes.
pub fn fit_geometry(
    base: &FieldParams,
    layout: &Layout,
    integrator: &IntegratorConfig,
    weights: &CostWeights,
    fit: &GeometryFitConfig,
    seed: u64,
) -> Result<FieldParams, ConfigError> {
    if fit.beta_grid.is_empty() || fit.gamma_grid.is_empty() || fit.episodes == 0 {
        return Err(ConfigError::Invalid("geometry fit needs nonempty grids and episodes".into()));
    }
    let scenes = (0..fit.episodes)
        .map(|i| sample_certified(Regime::R3, derive_seed(seed, 0x6e0, i as u64), layout))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best: Option<(f64, FieldParams)> = None;
    for &beta in &fit.beta_grid {
        for &gamma in &fit.gamma_grid {
            let params = FieldParams {
                beta,
                gamma,
                ..base.geometry_only()
            };
            let policy = Policy::geometry_only(&params);
            let costs: Vec<f64> = scenes
                .par_iter()
                .map(|sc| {
                    rollout(sc, &policy, integrator, RolloutOptions::default()).map(|r| episode_cost(&r, weights, sc.spec.goal))
                })
                .collect::<Result<_, _>>()?;
            let mean = costs.iter().sum::<f64>() / costs.len() as f64;
            if best.as_ref().map_or(true, |(b, _)| mean < *b) {
                best = Some((mean, params));
            }
        }
    }
    Ok(best.expect("grids are nonempty").1)
}
