//! Comparison variants as configurations of the same engine. Each variant is a
//! JSON preset: gate mode, coefficient source, CVaR level, active force
//! channels, and which parameters training may move.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{FieldParams, HeadWeights};
use crate::rollout::{Coefficients, GateMode, Mlp, Policy};
use crate::gate::GateParams;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("malformed preset for {variant}: {source}")]
    Preset {
        variant: PolicyVariant,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyVariant {
    GeometryOnly,
    RiskLossOnly,
    FixedCoeffCtx,
    ScalarCtx,
    NonRouteDirectionalCtx,
    BlackBoxCvar,
    CtxExpectedCost,
    RouteAwareCtxCvar,
}

impl PolicyVariant {
    pub const ALL: [PolicyVariant; 8] = [
        PolicyVariant::GeometryOnly,
        PolicyVariant::RiskLossOnly,
        PolicyVariant::FixedCoeffCtx,
        PolicyVariant::ScalarCtx,
        PolicyVariant::NonRouteDirectionalCtx,
        PolicyVariant::BlackBoxCvar,
        PolicyVariant::CtxExpectedCost,
        PolicyVariant::RouteAwareCtxCvar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyVariant::GeometryOnly => "GeometryOnly",
            PolicyVariant::RiskLossOnly => "RiskLossOnly",
            PolicyVariant::FixedCoeffCtx => "FixedCoeffCtx",
            PolicyVariant::ScalarCtx => "ScalarCtx",
            PolicyVariant::NonRouteDirectionalCtx => "NonRouteDirectionalCtx",
            PolicyVariant::BlackBoxCvar => "BlackBoxCvar",
            PolicyVariant::CtxExpectedCost => "CtxExpectedCost",
            PolicyVariant::RouteAwareCtxCvar => "RouteAwareCtxCvar",
        }
    }

    /// Snake-case identifier used for file names and CLI flags.
    pub fn slug(self) -> &'static str {
        match self {
            PolicyVariant::GeometryOnly => "geometry_only",
            PolicyVariant::RiskLossOnly => "risk_loss_only",
            PolicyVariant::FixedCoeffCtx => "fixed_coeff_ctx",
            PolicyVariant::ScalarCtx => "scalar_ctx",
            PolicyVariant::NonRouteDirectionalCtx => "non_route_directional_ctx",
            PolicyVariant::BlackBoxCvar => "black_box_cvar",
            PolicyVariant::CtxExpectedCost => "ctx_expected_cost",
            PolicyVariant::RouteAwareCtxCvar => "route_aware_ctx_cvar",
        }
    }

    fn preset_json(self) -> &'static str {
        match self {
            PolicyVariant::GeometryOnly => include_str!("../presets/geometry_only.json"),
            PolicyVariant::RiskLossOnly => include_str!("../presets/risk_loss_only.json"),
            PolicyVariant::FixedCoeffCtx => include_str!("../presets/fixed_coeff_ctx.json"),
            PolicyVariant::ScalarCtx => include_str!("../presets/scalar_ctx.json"),
            PolicyVariant::NonRouteDirectionalCtx => include_str!("../presets/non_route_directional_ctx.json"),
            PolicyVariant::BlackBoxCvar => include_str!("../presets/black_box_cvar.json"),
            PolicyVariant::CtxExpectedCost => include_str!("../presets/ctx_expected_cost.json"),
            PolicyVariant::RouteAwareCtxCvar => include_str!("../presets/route_aware_ctx_cvar.json"),
        }
    }

    pub fn preset(self) -> Result<VariantPreset, AblationError> {
        serde_json::from_str(self.preset_json()).map_err(|source| AblationError::Preset { variant: self, source })
    }
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyVariant {
    type Err = AblationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        PolicyVariant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == key || v.slug().replace('_', "") == key)
            .ok_or_else(|| AblationError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaSource {
    Zero,
    Fixed { lambda_s: f64, lambda_h: f64 },
    Heads,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceChannels {
    /// Soft and hard context forces from the enriched energy.
    pub context: bool,
    /// Unstructured residual force network.
    pub residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trainable {
    Nothing,
    /// Coefficient-head weights, by rollout sensitivities.
    Heads,
    /// Goal gain and damping, by central differences.
    Geometry,
    /// Residual network weights, by simultaneous perturbation.
    Residual,
}

/// Effective configuration of a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantPreset {
    pub variant: PolicyVariant,
    pub gate: GateMode,
    pub lambda_source: LambdaSource,
    pub alpha: f64,
    pub channels: ForceChannels,
    pub trainable: Trainable,
}

impl VariantPreset {
    /// Top-level fields that differ between two presets.
    pub fn diff(&self, other: &VariantPreset) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.gate != other.gate {
            out.push("gate");
        }
        if self.lambda_source != other.lambda_source {
            out.push("lambda_source");
        }
        if self.alpha != other.alpha {
            out.push("alpha");
        }
        if self.channels != other.channels {
            out.push("channels");
        }
        if self.trainable != other.trainable {
            out.push("trainable");
        }
        out
    }
}

/// Runnable variant: preset plus initial policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub preset: VariantPreset,
    pub policy: Policy,
}

pub const RESIDUAL_HIDDEN: usize = 32;

/// Builds the initial policy of `variant` on top of geometry parameters
/// `base`. `seed` only affects the residual network's hidden layers.
pub fn instantiate_variant(variant: PolicyVariant, base: &FieldParams, gate_params: &GateParams, seed: u64) -> Result<VariantSpec, AblationError> {
    let preset = variant.preset()?;
    let coefficients = if !preset.channels.context {
        Coefficients::Fixed {
            lambda_s: 0.0,
            lambda_h: 0.0,
        }
    } else {
        match &preset.lambda_source {
            LambdaSource::Zero => Coefficients::Fixed {
                lambda_s: 0.0,
                lambda_h: 0.0,
            },
            LambdaSource::Fixed { lambda_s, lambda_h } => Coefficients::Fixed {
                lambda_s: *lambda_s,
                lambda_h: *lambda_h,
            },
            LambdaSource::Heads => Coefficients::Heads(HeadWeights::default()),
        }
    };
    let residual = preset
        .channels
        .residual
        .then(|| Mlp::new(RESIDUAL_HIDDEN, &mut ChaCha8Rng::seed_from_u64(seed)));
    let policy = Policy {
        params: base.geometry_only(),
        coefficients,
        gate: preset.gate,
        gate_params: gate_params.clone(),
        residual,
    };
    Ok(VariantSpec { preset, policy })
}
