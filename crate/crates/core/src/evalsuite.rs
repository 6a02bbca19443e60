//! Paired benchmark evaluation: spatial and temporal selectivity, outcome
//! metrics with bootstrap intervals, and the empirical theory checks.
//!
//! Every metric is computed from flat trace rows ([`EvalRows`]) so a report
//! can be rebuilt from exported CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{Matrix2, Rotation2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::energy::{EnergyError, FieldParams};
use crate::gate::{evaluate_gate, gate_value, sample_primitives, GateParams, PrimitiveScore};
use crate::learner::derive_seed;
use crate::objective::{dual_update, empirical_cvar, ucb_radius, CostWeights, ObjectiveError};
use crate::rollout::{
    integrate, rollout, Coefficients, ContextFilter, GateMode, IntegratorConfig, PhaseState, Policy, RolloutError, RolloutOptions,
    RolloutRecord, Status,
};
use crate::world::{EventSchedule, Field, Layout, Regime, RiskPatch, Scenario, ScenarioSpec, WorldError};
use crate::Vec2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid evaluation setup: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Paired delayed-escape episodes.
    pub episodes: usize,
    /// Episodes per static regime (R1 and R2) for spatial selectivity.
    pub static_episodes: usize,
    /// Lateral deviation threshold for temporal metrics (m).
    pub delta: f64,
    pub delta_sweep: Vec<f64>,
    /// Activation threshold as a fraction of the median nonzero lateral force.
    pub epsilon_fraction: f64,
    pub epsilon_sweep: Vec<f64>,
    /// CVaR level for the post-event violation cost.
    pub alpha: f64,
    pub n_boot: usize,
    pub ci_level: f64,
    pub oscillation_threshold_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            static_episodes: 150,
            delta: 0.15,
            delta_sweep: vec![0.10, 0.15, 0.20],
            epsilon_fraction: 0.05,
            epsilon_sweep: vec![0.025, 0.05, 0.1],
            alpha: 0.95,
            n_boot: 1000,
            ci_level: 0.95,
            oscillation_threshold_deg: 30.0,
        }
    }
}

/// One evaluated episode of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub variant: String,
    pub regime: Regime,
    pub episode: usize,
    pub seed: u64,
    pub t_escape: Option<usize>,
    pub horizon: usize,
    pub status: Status,
    pub arc: f64,
    /// Arc length of the paired geometry-only rollout.
    pub geo_arc: f64,
    pub final_x: f64,
    pub final_y: f64,
}

/// One step of one evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub variant: String,
    pub regime: Regime,
    pub episode: usize,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    /// Signed offset from the paired geometry-only position along the safe
    /// direction; the geometry trace is padded with its final state.
    pub deviation: f64,
    /// Context force projected on the safe direction.
    pub activation: f64,
    /// Soft risk times path increment.
    pub risk_increment: f64,
    pub contact: bool,
    pub post_event: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRows {
    pub episodes: Vec<EpisodeRow>,
    pub steps: Vec<StepRow>,
}

impl EvalRows {
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.episodes {
            if !out.contains(&e.variant) {
                out.push(e.variant.clone());
            }
        }
        out
    }

    pub fn write_csv<W1: Write, W2: Write>(&self, episodes: W1, steps: W2) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(episodes);
        for e in &self.episodes {
            w.serialize(e)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(steps);
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R1: Read, R2: Read>(episodes: R1, steps: R2) -> Result<EvalRows, EvalError> {
        let episodes = csv::Reader::from_reader(episodes)
            .deserialize()
            .collect::<Result<Vec<EpisodeRow>, _>>()?;
        let steps = csv::Reader::from_reader(steps)
            .deserialize()
            .collect::<Result<Vec<StepRow>, _>>()?;
        Ok(EvalRows { episodes, steps })
    }
}

/// Samples a certified scenario, moving to the next seed of the stream if a
/// draw fails certification.
pub fn sample_certified(regime: Regime, seed: u64, layout: &Layout) -> Result<Scenario, WorldError> {
    let mut last = None;
    for attempt in 0..16u64 {
        let s = if attempt == 0 { seed } else { derive_seed(seed, 0xa77e, attempt) };
        match Scenario::sample(regime, s, layout) {
            Ok(sc) => return Ok(sc),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Unit safe direction of a scenario: the generator's ground truth when
/// known, else the left normal of the start-goal line.
pub fn safe_direction(spec: &ScenarioSpec) -> Vec2 {
    spec.d_safe.unwrap_or_else(|| {
        let line = spec.goal - spec.start;
        if line.norm() > 0.0 {
            Vec2::new(-line.y, line.x).normalize()
        } else {
            Vec2::new(0.0, 1.0)
        }
    })
}

/// Signed lateral offsets of `rec` from the paired `geo` rollout.
pub fn lateral_deviation(rec: &RolloutRecord, geo: &RolloutRecord, axis: Vec2) -> Vec<f64> {
    rec.steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let g = geo.steps.get(t).map_or(geo.final_state.q, |g| g.q);
            (s.q - g).dot(&axis)
        })
        .collect()
}

fn episode_rows(variant: &str, episode: usize, sc: &Scenario, rec: &RolloutRecord, geo: &RolloutRecord, integrator: &IntegratorConfig) -> (EpisodeRow, Vec<StepRow>) {
    let axis = safe_direction(&sc.spec);
    let dev = lateral_deviation(rec, geo, axis);
    let positions = rec.positions();
    let steps = rec
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| StepRow {
            variant: variant.to_string(),
            regime: sc.spec.regime,
            episode,
            t,
            x: s.q.x,
            y: s.q.y,
            deviation: dev[t],
            activation: s.f_ctx.dot(&axis),
            risk_increment: s.risk * (positions[t + 1] - positions[t]).norm(),
            contact: s.sdf < integrator.epsilon_hard,
            post_event: s.post_event,
        })
        .collect();
    let row = EpisodeRow {
        variant: variant.to_string(),
        regime: sc.spec.regime,
        episode,
        seed: sc.spec.seed,
        t_escape: sc.schedule.t_escape,
        horizon: integrator.horizon,
        status: rec.status,
        arc: rec.accum.arc_length,
        geo_arc: geo.accum.arc_length,
        final_x: rec.final_state.q.x,
        final_y: rec.final_state.q.y,
    };
    (row, steps)
}

/// Paired episodes shared by every variant.
pub fn benchmark_scenarios(layout: &Layout, cfg: &EvalConfig, seed: u64) -> Result<Vec<Scenario>, EvalError> {
    let mut jobs = Vec::new();
    for i in 0..cfg.episodes {
        jobs.push((Regime::DelayedEscape, derive_seed(seed, 1, i as u64)));
    }
    for i in 0..cfg.static_episodes {
        jobs.push((Regime::R1, derive_seed(seed, 2, i as u64)));
        jobs.push((Regime::R2, derive_seed(seed, 3, i as u64)));
    }
    jobs.par_iter()
        .map(|&(r, s)| sample_certified(r, s, layout).map_err(EvalError::from))
        .collect()
}

/// Runs every policy on the same scenarios, each paired with the
/// geometry-only rollout of `geometry`.
pub fn run_benchmark(
    policies: &[(String, Policy)],
    geometry: &Policy,
    scenarios: &[Scenario],
    integrator: &IntegratorConfig,
) -> Result<EvalRows, EvalError> {
    let per_episode: Vec<(Vec<EpisodeRow>, Vec<StepRow>)> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, sc)| {
            let geo = rollout(sc, geometry, integrator, RolloutOptions::default())?;
            let mut eps = Vec::with_capacity(policies.len());
            let mut steps = Vec::new();
            for (name, policy) in policies {
                let rec = rollout(sc, policy, integrator, RolloutOptions::default())?;
                let (e, s) = episode_rows(name, i, sc, &rec, &geo, integrator);
                eps.push(e);
                steps.extend(s);
            }
            Ok::<_, EvalError>((eps, steps))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = EvalRows::default();
    // variant-major order keeps exported files easy to slice
    for (vi, _) in policies.iter().enumerate() {
        for (eps, steps) in &per_episode {
            rows.episodes.push(eps[vi].clone());
            let name = &eps[vi].variant;
            rows.steps.extend(steps.iter().filter(|s| &s.variant == name).cloned());
        }
    }
    Ok(rows)
}

fn ser_maybe_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "nan" })
    }
}

fn de_maybe_inf<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(_) => Ok(f64::NAN),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialMetrics {
    pub car: f64,
    pub far: f64,
    /// Mean lateral-force magnitude ratio R1 / R2; infinite when only R2
    /// is silent, zero when both are.
    #[serde(serialize_with = "ser_maybe_inf", deserialize_with = "de_maybe_inf")]
    pub sr: f64,
    pub mean_r1: f64,
    pub mean_r2: f64,
    pub auprc: f64,
}

/// Area under the precision-recall curve by trapezoids over unique
/// thresholds. The curve starts at recall 0 with the precision of the
/// highest threshold, so constant scores earn the positive rate, not more.
pub fn auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, f64::NAN);
    let mut area = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let thr = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == thr {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let r = tp as f64 / positives as f64;
        let p = tp as f64 / (tp + fp) as f64;
        if prev_p.is_nan() {
            prev_p = p;
        }
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    area
}

/// CAR, FAR, SR and AUPRC from per-step activations in R1 (positive) and R2.
pub fn spatial_selectivity(r1: &[f64], r2: &[f64], epsilon: f64) -> SpatialMetrics {
    let frac = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().filter(|&&a| a > epsilon).count() as f64 / xs.len() as f64
        }
    };
    let mean_abs = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|a| a.abs()).sum::<f64>() / xs.len() as f64
        }
    };
    let (m1, m2) = (mean_abs(r1), mean_abs(r2));
    let sr = if m2 > 0.0 {
        m1 / m2
    } else if m1 > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let scores: Vec<f64> = r1.iter().chain(r2).cloned().collect();
    let labels: Vec<bool> = r1.iter().map(|_| true).chain(r2.iter().map(|_| false)).collect();
    SpatialMetrics {
        car: frac(r1),
        far: frac(r2),
        sr,
        mean_r1: m1,
        mean_r2: m2,
        auprc: auprc(&scores, &labels),
    }
}

/// Activation threshold: `fraction` of the median nonzero lateral-force
/// magnitude; zero when every activation is zero.
pub fn activation_epsilon(activations: &[f64], fraction: f64) -> f64 {
    let mut nz: Vec<f64> = activations.iter().map(|a| a.abs()).filter(|&a| a > 0.0).collect();
    if nz.is_empty() {
        return 0.0;
    }
    nz.sort_by(f64::total_cmp);
    let n = nz.len();
    let median = if n % 2 == 1 { nz[n / 2] } else { 0.5 * (nz[n / 2 - 1] + nz[n / 2]) };
    fraction * median
}

/// Per-episode temporal outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalEpisode {
    pub false_pre_activation: bool,
    /// Steps from `t_escape` to the first deviation beyond the threshold;
    /// the horizon when there is none.
    pub reaction_delay: usize,
    pub reacted: bool,
    pub stale_exposure: f64,
}

/// Temporal outcome of one episode from its deviation and risk traces.
pub fn temporal_episode(deviation: &[f64], risk_increment: &[f64], t_escape: usize, delta: f64, horizon: usize) -> TemporalEpisode {
    let pre = deviation.iter().take(t_escape).any(|d| d.abs() > delta);
    let reaction = deviation.iter().enumerate().skip(t_escape).find(|(_, d)| d.abs() > delta).map(|(t, _)| t);
    let end = reaction.unwrap_or(deviation.len());
    let stale = risk_increment.iter().take(end).skip(t_escape).sum();
    TemporalEpisode {
        false_pre_activation: pre,
        reaction_delay: reaction.map_or(horizon, |t| t - t_escape),
        reacted: reaction.is_some(),
        stale_exposure: stale,
    }
}

/// Sum of heading changes larger than `threshold` radians along a polyline.
pub fn oscillation(points: &[Vec2], threshold: f64) -> f64 {
    let headings: Vec<Vec2> = points.windows(2).map(|w| w[1] - w[0]).filter(|d| d.norm() > 1e-9).collect();
    headings
        .windows(2)
        .map(|w| {
            let c = w[0].dot(&w[1]) / (w[0].norm() * w[1].norm());
            c.clamp(-1.0, 1.0).acos()
        })
        .filter(|&a| a > threshold)
        .sum()
}

/// Per-variant metrics with percentile bootstrap intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub car: f64,
    pub far: f64,
    #[serde(serialize_with = "ser_maybe_inf", deserialize_with = "de_maybe_inf")]
    pub sr: f64,
    pub sr_mean_r1: f64,
    pub sr_mean_r2: f64,
    pub auprc: f64,
    pub false_pre_activation: f64,
    pub suppress_rate: f64,
    pub success: f64,
    pub reaction_delay: f64,
    /// Episodes with no reaction before the horizon (delay set to the horizon).
    pub no_reaction: usize,
    pub stale_exposure: f64,
    pub violation_cvar: f64,
    pub oscillation: f64,
    pub path_length_ratio: f64,
    pub ci: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSweepRow {
    pub delta: f64,
    pub variant: String,
    pub false_pre_activation: f64,
    pub reaction_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSweepRow {
    pub fraction: f64,
    pub epsilon: f64,
    pub variant: String,
    pub car: f64,
    pub far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub n_boot: usize,
    pub seed: u64,
    pub episodes: usize,
    pub static_episodes: usize,
    pub variants: Vec<VariantMetrics>,
    pub delta_sweep: Vec<DeltaSweepRow>,
    pub epsilon_sweep: Vec<EpsilonSweepRow>,
}

impl MetricReport {
    pub fn get(&self, variant: &str) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(out, self).map_err(|e| EvalError::Io(e.into()))
    }

    /// One row per variant; interval columns are `<metric>_lo` / `<metric>_hi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let ci_keys: Vec<String> = self.variants.first().map(|v| v.ci.keys().cloned().collect()).unwrap_or_default();
        let mut header: Vec<String> = [
            "variant",
            "car",
            "far",
            "sr",
            "auprc",
            "false_pre_activation",
            "suppress_rate",
            "success",
            "reaction_delay",
            "no_reaction",
            "stale_exposure",
            "violation_cvar",
            "oscillation",
            "path_length_ratio",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for k in &ci_keys {
            header.push(format!("{k}_lo"));
            header.push(format!("{k}_hi"));
        }
        w.write_record(&header)?;
        for v in &self.variants {
            let mut rec = vec![
                v.variant.clone(),
                v.car.to_string(),
                v.far.to_string(),
                if v.sr.is_finite() { v.sr.to_string() } else { "inf".into() },
                v.auprc.to_string(),
                v.false_pre_activation.to_string(),
                v.suppress_rate.to_string(),
                v.success.to_string(),
                v.reaction_delay.to_string(),
                v.no_reaction.to_string(),
                v.stale_exposure.to_string(),
                v.violation_cvar.to_string(),
                v.oscillation.to_string(),
                v.path_length_ratio.to_string(),
            ];
            for k in &ci_keys {
                let [lo, hi] = v.ci.get(k).copied().unwrap_or([f64::NAN, f64::NAN]);
                rec.push(lo.to_string());
                rec.push(hi.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Markdown summary: temporal block then spatial block.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "Delayed escape ({} paired episodes, delta = {} m)\n\n",
            self.episodes, self.delta
        ));
        s.push_str("| Variant | False pre-act. | Suppress | Reaction delay | Stale exposure | Success | Violation CVaR | Osc. | Len. ratio |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for v in &self.variants {
            s.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.1} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                v.variant,
                v.false_pre_activation,
                v.suppress_rate,
                v.reaction_delay,
                v.stale_exposure,
                v.success,
                v.violation_cvar,
                v.oscillation,
                v.path_length_ratio
            ));
        }
        s.push_str(&format!(
            "\nStatic suite ({} R1 + {} R2 episodes, epsilon = {:.4})\n\n",
            self.static_episodes, self.static_episodes, self.epsilon
        ));
        s.push_str("| Variant | CAR | FAR | SR | AUPRC |\n|---|---|---|---|---|\n");
        for v in &self.variants {
            let sr = if v.sr.is_finite() { format!("{:.3}", v.sr) } else { "inf".into() };
            s.push_str(&format!("| {} | {:.3} | {:.3} | {} | {:.3} |\n", v.variant, v.car, v.far, sr, v.auprc));
        }
        s
    }
}

/// Percentile bootstrap interval of `stat` over resampled item indices.
pub fn bootstrap_ci(n_items: usize, n_boot: usize, level: f64, seed: u64, stat: impl Fn(&[usize]) -> f64) -> [f64; 2] {
    if n_items == 0 || n_boot == 0 {
        return [f64::NAN, f64::NAN];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n_items];
    let mut stats: Vec<f64> = (0..n_boot)
        .map(|_| {
            for v in idx.iter_mut() {
                *v = rng.gen_range(0..n_items);
            }
            stat(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| stats[((q * n_boot as f64).ceil() as usize).clamp(1, n_boot) - 1];
    [pick(tail), pick(1.0 - tail)]
}

struct VariantTraces<'a> {
    delayed: Vec<(&'a EpisodeRow, Vec<&'a StepRow>)>,
    r1: Vec<Vec<f64>>,
    r2: Vec<Vec<f64>>,
}

fn group<'a>(rows: &'a EvalRows, variant: &str) -> VariantTraces<'a> {
    let mut by_episode: BTreeMap<(u8, usize), Vec<&StepRow>> = BTreeMap::new();
    let key = |r: Regime| r as u8;
    for s in rows.steps.iter().filter(|s| s.variant == variant) {
        by_episode.entry((key(s.regime), s.episode)).or_default().push(s);
    }
    for v in by_episode.values_mut() {
        v.sort_by_key(|s| s.t);
    }
    let mut out = VariantTraces {
        delayed: Vec::new(),
        r1: Vec::new(),
        r2: Vec::new(),
    };
    for e in rows.episodes.iter().filter(|e| e.variant == variant) {
        let steps = by_episode.remove(&(key(e.regime), e.episode)).unwrap_or_default();
        match e.regime {
            Regime::DelayedEscape => out.delayed.push((e, steps)),
            Regime::R1 => out.r1.push(steps.iter().map(|s| s.activation).collect()),
            Regime::R2 => out.r2.push(steps.iter().map(|s| s.activation).collect()),
            Regime::R3 => {}
        }
    }
    out
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

struct DelayedEpisode {
    temporal: TemporalEpisode,
    reached: bool,
    violation: f64,
    oscillation: f64,
    path_ratio: Option<f64>,
}

fn delayed_episode(e: &EpisodeRow, steps: &[&StepRow], delta: f64, weights: &CostWeights, osc_threshold: f64) -> DelayedEpisode {
    let dev: Vec<f64> = steps.iter().map(|s| s.deviation).collect();
    let risk: Vec<f64> = steps.iter().map(|s| s.risk_increment).collect();
    let t_escape = e.t_escape.unwrap_or(0);
    let v = weights.violation();
    let violation = steps
        .iter()
        .filter(|s| s.post_event)
        .map(|s| v.w_risk * s.risk_increment + if s.contact { v.w_hard } else { 0.0 })
        .sum();
    let mut pts: Vec<Vec2> = steps.iter().map(|s| Vec2::new(s.x, s.y)).collect();
    pts.push(Vec2::new(e.final_x, e.final_y));
    DelayedEpisode {
        temporal: temporal_episode(&dev, &risk, t_escape, delta, e.horizon),
        reached: e.status == Status::Reached,
        violation,
        oscillation: oscillation(&pts, osc_threshold),
        path_ratio: (e.geo_arc > 0.0).then(|| e.arc / e.geo_arc),
    }
}

/// Builds the report from trace rows. `weights` sets the violation cost.
pub fn compute_report(rows: &EvalRows, cfg: &EvalConfig, weights: &CostWeights, seed: u64) -> Result<MetricReport, EvalError> {
    if !(0.0..1.0).contains(&cfg.alpha) {
        return Err(EvalError::Config(format!("alpha must lie in [0, 1), got {}", cfg.alpha)));
    }
    let variants = rows.variants();
    let static_acts: Vec<f64> = rows
        .steps
        .iter()
        .filter(|s| matches!(s.regime, Regime::R1 | Regime::R2))
        .map(|s| s.activation)
        .collect();
    let epsilon = activation_epsilon(&static_acts, cfg.epsilon_fraction);
    let osc = cfg.oscillation_threshold_deg.to_radians();
    let mut out = Vec::new();
    let mut delta_sweep = Vec::new();
    let mut epsilon_sweep = Vec::new();
    for (vi, name) in variants.iter().enumerate() {
        let tr = group(rows, name);
        let eps: Vec<DelayedEpisode> = tr
            .delayed
            .iter()
            .map(|(e, s)| delayed_episode(e, s, cfg.delta, weights, osc))
            .collect();
        let n = eps.len();
        let fpa = mean(eps.iter().map(|d| d.temporal.false_pre_activation as u8 as f64));
        let violations: Vec<f64> = eps.iter().map(|d| d.violation).collect();
        let violation_cvar = if violations.is_empty() {
            0.0
        } else {
            empirical_cvar(&violations, cfg.alpha)?.value
        };
        let flat = |xs: &[Vec<f64>]| xs.iter().flatten().cloned().collect::<Vec<f64>>();
        let spatial = spatial_selectivity(&flat(&tr.r1), &flat(&tr.r2), epsilon);

        let boot_seed = |m: u64| derive_seed(seed, 0xb007 + vi as u64, m);
        let mut ci = BTreeMap::new();
        let per_ep = |f: &dyn Fn(&DelayedEpisode) -> f64| -> Vec<f64> { eps.iter().map(f).collect() };
        let metrics: [(&str, Vec<f64>); 6] = [
            ("false_pre_activation", per_ep(&|d| d.temporal.false_pre_activation as u8 as f64)),
            ("success", per_ep(&|d| d.reached as u8 as f64)),
            ("reaction_delay", per_ep(&|d| d.temporal.reaction_delay as f64)),
            ("stale_exposure", per_ep(&|d| d.temporal.stale_exposure)),
            ("oscillation", per_ep(&|d| d.oscillation)),
            ("path_length_ratio", per_ep(&|d| d.path_ratio.unwrap_or(f64::NAN))),
        ];
        for (k, (key, vals)) in metrics.iter().enumerate() {
            let interval = bootstrap_ci(n, cfg.n_boot, cfg.ci_level, boot_seed(k as u64), |idx| {
                mean(idx.iter().map(|&i| vals[i]).filter(|v| v.is_finite()))
            });
            ci.insert(key.to_string(), interval);
        }
        ci.insert(
            "violation_cvar".into(),
            bootstrap_ci(n, cfg.n_boot, cfg.ci_level, boot_seed(10), |idx| {
                let xs: Vec<f64> = idx.iter().map(|&i| violations[i]).collect();
                empirical_cvar(&xs, cfg.alpha).map_or(f64::NAN, |c| c.value)
            }),
        );
        let rate = |xs: &[&Vec<f64>], f: &dyn Fn(f64) -> bool| -> f64 {
            let (mut hit, mut all) = (0usize, 0usize);
            for x in xs.iter().flat_map(|v| v.iter()) {
                all += 1;
                hit += f(*x) as usize;
            }
            if all == 0 {
                0.0
            } else {
                hit as f64 / all as f64
            }
        };
        for (k, (key, src)) in [("car", &tr.r1), ("far", &tr.r2)].into_iter().enumerate() {
            let interval = bootstrap_ci(src.len(), cfg.n_boot, cfg.ci_level, boot_seed(20 + k as u64), |idx| {
                let pick: Vec<&Vec<f64>> = idx.iter().map(|&i| &src[i]).collect();
                rate(&pick, &|a| a > epsilon)
            });
            ci.insert(key.to_string(), interval);
        }

        for &d in &cfg.delta_sweep {
            let sweep: Vec<DelayedEpisode> = tr.delayed.iter().map(|(e, s)| delayed_episode(e, s, d, weights, osc)).collect();
            delta_sweep.push(DeltaSweepRow {
                delta: d,
                variant: name.clone(),
                false_pre_activation: mean(sweep.iter().map(|x| x.temporal.false_pre_activation as u8 as f64)),
                reaction_delay: mean(sweep.iter().map(|x| x.temporal.reaction_delay as f64)),
            });
        }
        for &f in &cfg.epsilon_sweep {
            let e = activation_epsilon(&static_acts, f);
            let m = spatial_selectivity(&flat(&tr.r1), &flat(&tr.r2), e);
            epsilon_sweep.push(EpsilonSweepRow {
                fraction: f,
                epsilon: e,
                variant: name.clone(),
                car: m.car,
                far: m.far,
            });
        }
        out.push(VariantMetrics {
            variant: name.clone(),
            car: spatial.car,
            far: spatial.far,
            sr: spatial.sr,
            sr_mean_r1: spatial.mean_r1,
            sr_mean_r2: spatial.mean_r2,
            auprc: spatial.auprc,
            false_pre_activation: fpa,
            suppress_rate: 1.0 - fpa,
            success: mean(eps.iter().map(|d| d.reached as u8 as f64)),
            reaction_delay: mean(eps.iter().map(|d| d.temporal.reaction_delay as f64)),
            no_reaction: eps.iter().filter(|d| !d.temporal.reacted).count(),
            stale_exposure: mean(eps.iter().map(|d| d.temporal.stale_exposure)),
            violation_cvar,
            oscillation: mean(eps.iter().map(|d| d.oscillation)),
            path_length_ratio: mean(eps.iter().filter_map(|d| d.path_ratio)),
            ci,
        });
    }
    let count = |r: Regime| {
        rows.episodes
            .iter()
            .filter(|e| e.regime == r && Some(&e.variant) == variants.first())
            .count()
    };
    Ok(MetricReport {
        delta: cfg.delta,
        epsilon,
        alpha: cfg.alpha,
        n_boot: cfg.n_boot,
        seed,
        episodes: count(Regime::DelayedEscape),
        static_episodes: count(Regime::R1),
        variants: out,
        delta_sweep,
        epsilon_sweep,
    })
}

// ---------------------------------------------------------------------------
// Theory checks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub id: String,
    pub description: String,
    pub measured: f64,
    pub target: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckTable {
    pub rows: Vec<CheckRow>,
}

impl CheckTable {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Check | Description | Measured | Target | Pass |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {:.6} | {} | {} |\n",
                r.id,
                r.description,
                r.measured,
                r.target,
                if r.passed { "yes" } else { "NO" }
            ));
        }
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub episodes: usize,
    pub gate_patches: usize,
    pub delta: f64,
    pub dissipativity_taus: Vec<f64>,
    /// Physical duration of each dissipativity rollout (s).
    pub dissipativity_time: f64,
    pub preservation_eps: Vec<f64>,
    pub preservation_steps: usize,
    pub deflection_taus: Vec<f64>,
    pub deflection_scenes: usize,
    /// Tolerated relative spread of the halving ratio around 2.
    pub halving_tolerance: f64,
    pub slope_tolerance: f64,
    pub r2_gate_max: f64,
    pub r1_gate_min: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            episodes: 100,
            gate_patches: 150,
            delta: 0.15,
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
}

/// Geometry-only exactness on delayed escape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessResult {
    pub episodes: usize,
    pub below_delta_fraction: f64,
    pub false_pre_activation: f64,
    /// Context variant with zero coefficients reproduces the geometry-only
    /// trajectories bit for bit.
    pub bit_identical: bool,
}

pub fn check_geometry_exactness(
    geometry: &Policy,
    zero_context: &Policy,
    layout: &Layout,
    integrator: &IntegratorConfig,
    episodes: usize,
    delta: f64,
    seed: u64,
) -> Result<ExactnessResult, EvalError> {
    let out: Vec<(bool, bool, bool)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let sc = sample_certified(Regime::DelayedEscape, derive_seed(seed, 1, i as u64), layout)?;
            let geo = rollout(&sc, geometry, integrator, RolloutOptions::default())?;
            let paired = rollout(&sc, geometry, integrator, RolloutOptions::default())?;
            let ctx = rollout(&sc, zero_context, integrator, RolloutOptions::default())?;
            let axis = safe_direction(&sc.spec);
            let t_escape = sc.schedule.t_escape.unwrap_or(0);
            let dev = lateral_deviation(&paired, &geo, axis);
            let below = dev.iter().all(|d| d.abs() <= delta);
            let pre = dev.iter().take(t_escape).any(|d| d.abs() > delta);
            let bits = |r: &RolloutRecord| -> Vec<u64> {
                r.steps
                    .iter()
                    .flat_map(|s| [s.q.x, s.q.y, s.p.x, s.p.y])
                    .chain([r.final_state.q.x, r.final_state.q.y, r.final_state.p.x, r.final_state.p.y])
                    .map(f64::to_bits)
                    .collect()
            };
            let same = bits(&geo) == bits(&ctx) && geo.status == ctx.status;
            Ok::<_, EvalError>((below, pre, same))
        })
        .collect::<Result<_, _>>()?;
    Ok(ExactnessResult {
        episodes,
        below_delta_fraction: mean(out.iter().map(|o| o.0 as u8 as f64)),
        false_pre_activation: mean(out.iter().map(|o| o.1 as u8 as f64)),
        bit_identical: out.iter().all(|o| o.2),
    })
}

/// Fraction of R2 episodes whose trajectory stays within `delta` of the
/// paired geometry-only one.
pub fn check_r2_suppression(
    policy: &Policy,
    geometry: &Policy,
    layout: &Layout,
    integrator: &IntegratorConfig,
    episodes: usize,
    delta: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    let below: Vec<bool> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let sc = sample_certified(Regime::R2, derive_seed(seed, 3, i as u64), layout)?;
            let geo = rollout(&sc, geometry, integrator, RolloutOptions::default())?;
            let rec = rollout(&sc, policy, integrator, RolloutOptions::default())?;
            let dev = lateral_deviation(&rec, &geo, safe_direction(&sc.spec));
            Ok::<_, EvalError>(dev.iter().all(|d| d.abs() <= delta))
        })
        .collect::<Result<_, _>>()?;
    Ok(mean(below.iter().map(|&b| b as u8 as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipativityResult {
    pub taus: Vec<f64>,
    /// Largest per-step excess over the dissipation, divided by tau squared.
    pub c_fit: f64,
    /// Summed absolute excess over a fixed physical time, per tau.
    pub residuals: Vec<f64>,
    /// residual(tau) / residual(tau / 2) for consecutive halvings.
    pub halving_ratios: Vec<f64>,
    pub passed: bool,
}

/// Zero-input rollouts with fixed open-gate context and damping 0.5. The
/// per-step energy change must satisfy dH <= -tau v'Dv + C tau^2 for one C,
/// and the accumulated excess must halve with tau.
pub fn check_dissipativity(layout: &Layout, base: &FieldParams, cfg: &TheoryConfig, seed: u64) -> Result<DissipativityResult, EvalError> {
    let sc = sample_certified(Regime::R1, derive_seed(seed, 0xd155, 0), layout)?;
    let mut params = base.clone();
    params.gamma = 0.5;
    let policy = Policy {
        params: params.clone(),
        coefficients: Coefficients::Fixed {
            lambda_s: 1.0,
            lambda_h: 1.0,
        },
        gate: GateMode::Open,
        gate_params: GateParams::default(),
        residual: None,
    };
    let minv = params.inverse_mass();
    let mut c_fit: f64 = 0.0;
    let mut residuals = Vec::new();
    for &tau in &cfg.dissipativity_taus {
        let integ = IntegratorConfig {
            tau,
            horizon: (cfg.dissipativity_time / tau).round() as usize,
            goal_radius: 0.0,
            stuck_window: usize::MAX,
            ..IntegratorConfig::default()
        };
        let rec = rollout(
            &sc,
            &policy,
            &integ,
            RolloutOptions {
                record_energy: true,
                ..Default::default()
            },
        )?;
        let mut total = 0.0;
        for t in 0..rec.energy.len().saturating_sub(1) {
            let p_next = rec.steps.get(t + 1).map_or(rec.final_state.p, |s| s.p);
            let v = minv * p_next;
            let excess = rec.energy[t + 1] - rec.energy[t] + tau * params.gamma * v.norm_squared();
            c_fit = c_fit.max(excess / (tau * tau));
            total += excess.abs();
        }
        residuals.push(total);
    }
    let ratios: Vec<f64> = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    let tol = cfg.halving_tolerance;
    let passed = c_fit.is_finite() && ratios.iter().all(|r| (r / 2.0 - 1.0).abs() <= tol);
    Ok(DissipativityResult {
        taus: cfg.dissipativity_taus.clone(),
        c_fit,
        residuals,
        halving_ratios: ratios,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationResult {
    pub eps: Vec<f64>,
    /// Mean terminal distance from the paired geometry-only rollout.
    pub deviations: Vec<f64>,
    pub slope: f64,
    pub passed: bool,
}

/// Least-squares slope of log(y) on log(x).
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Context force clamped to norm eps: terminal deviation from geometry-only
/// must scale linearly in eps.
pub fn check_preservation(layout: &Layout, base: &FieldParams, cfg: &TheoryConfig, seed: u64) -> Result<PreservationResult, EvalError> {
    let integ = IntegratorConfig {
        horizon: cfg.preservation_steps,
        goal_radius: 0.0,
        stuck_window: usize::MAX,
        ..IntegratorConfig::default()
    };
    let policy = Policy {
        params: base.clone(),
        coefficients: Coefficients::Fixed {
            lambda_s: 2.5,
            lambda_h: 2.5,
        },
        gate: GateMode::Open,
        gate_params: GateParams::default(),
        residual: None,
    };
    let geometry = Policy::geometry_only(base);
    let scenes: Vec<Scenario> = (0..8)
        .map(|i| sample_certified(Regime::R1, derive_seed(seed, 0x9e5e, i), layout))
        .collect::<Result<_, _>>()?;
    let mut deviations = Vec::new();
    for &eps in &cfg.preservation_eps {
        let mut total = 0.0;
        for sc in &scenes {
            let geo = rollout(sc, &geometry, &integ, RolloutOptions::default())?;
            let rec = rollout(
                sc,
                &policy,
                &integ,
                RolloutOptions {
                    filter: Some(ContextFilter::ClampNorm(eps)),
                    ..Default::default()
                },
            )?;
            total += (rec.final_state.q - geo.final_state.q).norm();
        }
        deviations.push(total / scenes.len() as f64);
    }
    let slope = loglog_slope(&cfg.preservation_eps, &deviations);
    Ok(PreservationResult {
        eps: cfg.preservation_eps.clone(),
        deviations,
        slope,
        passed: (slope - 1.0).abs() <= cfg.slope_tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeflectionResult {
    pub taus: Vec<f64>,
    /// Cubic slack fitted at the largest tau.
    pub c_fit: f64,
    /// Smallest (decrease - bound) per tau using `c_fit`; nonnegative passes.
    pub worst_margin: Vec<f64>,
    pub passed: bool,
}

/// One semi-implicit step from `state`; returns the new position.
fn one_step(state: PhaseState, patch: &RiskPatch, params: &FieldParams, goal: Vec2, lambda_s: f64, tau: f64) -> Result<Vec2, EvalError> {
    let geo = crate::energy::geometry_force(state.q, params, goal, &[])?;
    let mut p = params.clone();
    p.lambda_s = lambda_s;
    p.lambda_h = 0.0;
    let (soft, hard) = crate::energy::context_force(state.q, patch, &p, 1.0);
    Ok(integrate(state, geo + soft + hard, params, tau).q)
}

/// One-step soft-risk decrease of the context field against geometry-only
/// on linear-risk patches with a lateral margin. The cubic slack is fitted
/// at the largest tau and must cover every other tau.
pub fn check_deflection(base: &FieldParams, cfg: &TheoryConfig, seed: u64) -> Result<DeflectionResult, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xdef1, 0));
    struct Scene {
        patch: RiskPatch,
        params: FieldParams,
        state: PhaseState,
        goal: Vec2,
        lambda_s: f64,
        lateral_margin: f64,
        m_min: f64,
    }
    let mut scenes = Vec::new();
    for _ in 0..cfg.deflection_scenes {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let g = Vec2::new(angle.cos(), angle.sin()) * rng.gen_range(0.05..0.4);
        let patch = RiskPatch::from_fn(64, 64, 0.25, |p| 0.5 + g.dot(&(p - Vec2::new(8.0, 8.0))), |_| 10.0);
        let rot = Rotation2::new(rng.gen_range(0.0..std::f64::consts::PI)).into_inner();
        let eig = Matrix2::from_diagonal(&Vec2::new(rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)));
        let mut params = base.clone();
        params.mass = rot * eig * rot.transpose();
        let q = Vec2::new(8.0, 8.0);
        let goal_dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let goal = q + Vec2::new(goal_dir.cos(), goal_dir.sin()) * 4.0;
        let lateral = Vec2::new(-goal_dir.sin(), goal_dir.cos());
        let p = Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        scenes.push(Scene {
            m_min: params.inverse_mass_min_eig(),
            patch,
            params,
            state: PhaseState { q, p },
            goal,
            lambda_s: rng.gen_range(0.5..3.0),
            lateral_margin: patch_gradient_lateral(g, lateral),
        });
    }
    let mut gaps: Vec<(f64, Vec<f64>)> = Vec::new();
    for &tau in &cfg.deflection_taus {
        let mut g = Vec::new();
        for s in &scenes {
            let enr = one_step(s.state, &s.patch, &s.params, s.goal, s.lambda_s, tau)?;
            let scaf = one_step(s.state, &s.patch, &s.params, s.goal, 0.0, tau)?;
            let decrease = s.patch.sample(Field::SoftRisk, scaf).value - s.patch.sample(Field::SoftRisk, enr).value;
            let bound = 0.5 * tau * tau * s.lambda_s * s.m_min * s.lateral_margin.powi(2);
            g.push(decrease - bound);
        }
        gaps.push((tau, g));
    }
    let (tau_fit, fit_gaps) = gaps
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| EvalError::Config("no deflection step sizes".into()))?;
    let c_fit = fit_gaps.iter().map(|g| (-g / tau_fit.powi(3)).max(0.0)).fold(0.0, f64::max);
    let worst_margin: Vec<f64> = gaps
        .iter()
        .map(|(tau, g)| g.iter().map(|x| x + c_fit * tau.powi(3)).fold(f64::INFINITY, f64::min))
        .collect();
    Ok(DeflectionResult {
        taus: cfg.deflection_taus.clone(),
        c_fit,
        passed: worst_margin.iter().all(|&m| m >= -1e-12),
        worst_margin,
    })
}

fn patch_gradient_lateral(gradient: Vec2, lateral: Vec2) -> f64 {
    gradient.dot(&lateral).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSoundnessResult {
    pub r2_max: f64,
    pub r1_min: f64,
    pub boundary_value: f64,
    pub passed: bool,
}

/// Gate at the start of generated R2 (must stay shut) and R1 (must open)
/// patches, plus the constructed boundary case with both margins at zero.
pub fn check_gate_soundness(layout: &Layout, base: &FieldParams, gate: &GateParams, n: usize, cfg: &TheoryConfig, seed: u64) -> Result<GateSoundnessResult, EvalError> {
    let start_gate = |regime: Regime, stream: u64| -> Result<Vec<f64>, EvalError> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let sc = sample_certified(regime, derive_seed(seed, stream, i as u64), layout)?;
                let obstacles = crate::energy::Obstacle::from_anchors(&sc.obstacles, base.alpha);
                let geo = crate::energy::geometry_force(sc.spec.start, &base.geometry_only(), sc.spec.goal, &obstacles)?;
                Ok(evaluate_gate(sc.spec.start, sc.spec.goal, geo, &sc.patch, gate).m)
            })
            .collect()
    };
    let r2 = start_gate(Regime::R2, 3)?;
    let r1 = start_gate(Regime::R1, 2)?;
    let boundary_value = gate_boundary_case(gate);
    let r2_max = r2.iter().cloned().fold(0.0, f64::max);
    let r1_min = r1.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(GateSoundnessResult {
        r2_max,
        r1_min,
        boundary_value,
        passed: r2_max <= cfg.r2_gate_max && r1_min >= cfg.r1_gate_min && (boundary_value - 0.25).abs() <= 1e-12,
    })
}

/// Gate value when the best feasible primitive improves risk by exactly the
/// route margin and clears hazards by exactly the clearance margin.
pub fn gate_boundary_case(gate: &GateParams) -> f64 {
    let prims = sample_primitives(Vec2::new(8.0, 8.0), 0.0, gate);
    let best = prims.len() - 1;
    let scores: Vec<PrimitiveScore> = prims
        .iter()
        .map(|p| PrimitiveScore {
            index: p.index,
            risk: if p.index == best { 0.0 } else { gate.rho_r },
            clearance: gate.delta_phi,
            feasible: p.index == best,
            clipped: false,
            argmin: 0,
        })
        .collect();
    gate_value(&scores, &prims, gate.rho_r, prims[0].direction, gate).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcbDualResult {
    pub radius: f64,
    pub direct: f64,
    pub abs_error: f64,
    pub dual_examples_passed: bool,
}

pub fn check_ucb_dual() -> UcbDualResult {
    let radius = ucb_radius(1.0, 0.95, 64, 0.05, 1);
    let direct = 1.0 / (1.0 - 0.95) * ((2.0f64 / 0.05).ln() / (2.0 * 64.0)).sqrt();
    let stays = dual_update(0.0, 0.1, 0.4, 0.5) == 0.0;
    let step = (dual_update(1.0, 0.1, 1.5, 1.0) - 1.05).abs() < 1e-12;
    let mut lam = 0.3;
    let mut linear = true;
    for k in 1..=20 {
        lam = dual_update(lam, 0.1, 1.25, 1.0);
        linear &= (lam - (0.3 + k as f64 * 0.1 * 0.25)).abs() < 1e-12;
    }
    UcbDualResult {
        radius,
        direct,
        abs_error: (radius - direct).abs(),
        dual_examples_passed: stays && step && linear,
    }
}

/// Everything the theory table needs besides its own configuration.
pub struct TheoryInputs<'a> {
    pub layout: &'a Layout,
    pub integrator: &'a IntegratorConfig,
    pub base: &'a FieldParams,
    pub gate: &'a GateParams,
    /// Route-aware variant used for the R2 suppression row.
    pub route_aware: &'a Policy,
    pub seed: u64,
}

pub fn theory_check_suite(inputs: &TheoryInputs<'_>, cfg: &TheoryConfig) -> Result<CheckTable, EvalError> {
    let geometry = Policy::geometry_only(inputs.base);
    let zero_ctx = Policy {
        params: inputs.base.geometry_only(),
        coefficients: Coefficients::Heads(Default::default()),
        gate: GateMode::RouteAware,
        gate_params: inputs.gate.clone(),
        residual: None,
    };
    let mut rows = Vec::new();
    let c1 = check_geometry_exactness(&geometry, &zero_ctx, inputs.layout, inputs.integrator, cfg.episodes, cfg.delta, inputs.seed)?;
    rows.push(CheckRow {
        id: "C1".into(),
        description: "geometry-only delayed escape stays below delta".into(),
        measured: c1.below_delta_fraction,
        target: "1.000 below delta, 0.000 false pre-activation, zero-coefficient context bit-identical".into(),
        passed: c1.below_delta_fraction == 1.0 && c1.false_pre_activation == 0.0 && c1.bit_identical,
        detail: format!("false_pre_activation={} bit_identical={}", c1.false_pre_activation, c1.bit_identical),
    });
    let c2 = check_r2_suppression(inputs.route_aware, &geometry, inputs.layout, inputs.integrator, cfg.gate_patches, cfg.delta, inputs.seed)?;
    rows.push(CheckRow {
        id: "C2".into(),
        description: "route-aware variant stays below delta on R2".into(),
        measured: c2,
        target: "reported".into(),
        passed: true,
        detail: String::new(),
    });
    let c3 = check_deflection(inputs.base, cfg, inputs.seed)?;
    rows.push(CheckRow {
        id: "C3".into(),
        description: "one-step soft-risk decrease meets the margin bound".into(),
        measured: c3.worst_margin.iter().cloned().fold(f64::INFINITY, f64::min),
        target: format!("margin >= 0 with c = {:.3e} at tau {:?}", c3.c_fit, c3.taus),
        passed: c3.passed,
        detail: format!("worst margins {:?}", c3.worst_margin),
    });
    let dis = check_dissipativity(inputs.layout, inputs.base, cfg, inputs.seed)?;
    rows.push(CheckRow {
        id: "dissipativity".into(),
        description: "per-step energy excess bounded by C tau^2, halving with tau".into(),
        measured: dis.c_fit,
        target: format!("halving ratios within 2 +/- {:.0}%", cfg.halving_tolerance * 100.0),
        passed: dis.passed,
        detail: format!("ratios {:?}", dis.halving_ratios),
    });
    let pre = check_preservation(inputs.layout, inputs.base, cfg, inputs.seed)?;
    rows.push(CheckRow {
        id: "preservation".into(),
        description: "terminal deviation under clamped context scales with eps".into(),
        measured: pre.slope,
        target: format!("log-log slope 1 +/- {}", cfg.slope_tolerance),
        passed: pre.passed,
        detail: format!("deviations {:?}", pre.deviations),
    });
    let gate = check_gate_soundness(inputs.layout, inputs.base, inputs.gate, cfg.gate_patches, cfg, inputs.seed)?;
    rows.push(CheckRow {
        id: "gate".into(),
        description: "gate shut on R2, open on R1, boundary case one quarter".into(),
        measured: gate.r2_max,
        target: format!("R2 max <= {}, R1 min >= {}, boundary 0.25", cfg.r2_gate_max, cfg.r1_gate_min),
        passed: gate.passed,
        detail: format!("r1_min={:.4} boundary={}", gate.r1_min, gate.boundary_value),
    });
    let ucb = check_ucb_dual();
    rows.push(CheckRow {
        id: "ucb".into(),
        description: "confidence radius matches direct evaluation; dual update examples".into(),
        measured: ucb.radius,
        target: "error <= 1e-9".into(),
        passed: ucb.abs_error <= 1e-9 && ucb.dual_examples_passed,
        detail: format!("direct={} dual_examples={}", ucb.direct, ucb.dual_examples_passed),
    });
    Ok(CheckTable { rows })
}

/// Schedule-free copy of a scenario, used when a static variant of a
/// delayed-escape scene is needed.
pub fn without_events(sc: &Scenario) -> Scenario {
    Scenario {
        spec: sc.spec.clone(),
        patch: sc.patch.clone(),
        schedule: EventSchedule::empty(),
        obstacles: sc.obstacles.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spatial_zero_force() {
        let m = spatial_selectivity(&[0.0; 10], &[0.0; 10], 0.0);
        assert_eq!((m.car, m.far, m.sr), (0.0, 0.0, 0.0));
    }

    #[test]
    fn spatial_equal_activation_and_infinite_sentinel() {
        let m = spatial_selectivity(&[1.0, 2.0], &[2.0, 1.0], 0.1);
        assert_eq!(m.sr, 1.0);
        assert_eq!((m.car, m.far), (1.0, 1.0));
        let inf = spatial_selectivity(&[1.0], &[0.0], 0.1);
        assert!(inf.sr.is_infinite());
        let json = serde_json::to_string(&inf).unwrap();
        let back: SpatialMetrics = serde_json::from_str(&json).unwrap();
        assert!(back.sr.is_infinite());
    }

    #[test]
    fn auprc_examples() {
        assert_relative_eq!(auprc(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]), 1.0);
        // one negative ranked first: points (0,0) (0.5,0.5) (1,2/3)
        let a = auprc(&[0.9, 0.8, 0.7], &[false, true, true]);
        assert_relative_eq!(a, 0.5 * 0.25 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(auprc(&[0.0; 4], &[true, false, true, false]), 0.5);
    }

    #[test]
    fn epsilon_is_fraction_of_median() {
        assert_relative_eq!(activation_epsilon(&[0.0, -2.0, 4.0, 1.0], 0.05), 0.05 * 2.0);
        assert_eq!(activation_epsilon(&[0.0, 0.0], 0.05), 0.0);
    }

    #[test]
    fn temporal_definitions() {
        let flat = vec![0.0; 20];
        let r = temporal_episode(&flat, &vec![0.1; 20], 5, 0.15, 200);
        assert!(!r.false_pre_activation && !r.reacted);
        assert_eq!(r.reaction_delay, 200);
        let mut dev = vec![0.0; 20];
        dev[7] = 0.2;
        let r = temporal_episode(&dev, &vec![0.1; 20], 5, 0.15, 200);
        assert_eq!(r.reaction_delay, 2);
        assert_relative_eq!(r.stale_exposure, 0.2, epsilon = 1e-12);
        dev[2] = -0.3;
        assert!(temporal_episode(&dev, &flat, 5, 0.15, 200).false_pre_activation);
    }

    #[test]
    fn oscillation_examples() {
        let line: Vec<Vec2> = (0..10).map(|i| Vec2::new(i as f64, 0.0)).collect();
        assert_eq!(oscillation(&line, 30f64.to_radians()), 0.0);
        let zig = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)];
        assert_relative_eq!(oscillation(&zig, 30f64.to_radians()), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn violation_cvar_example() {
        assert_eq!(empirical_cvar(&[0.0, 0.0, 0.0, 1.0], 0.75).unwrap().value, 1.0);
        assert_eq!(empirical_cvar(&[0.4; 7], 0.95).unwrap().value, 0.4);
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0];
        let stat = |idx: &[usize]| idx.iter().map(|&i| vals[i]).sum::<f64>() / idx.len() as f64;
        let a = bootstrap_ci(5, 200, 0.95, 9, stat);
        let b = bootstrap_ci(5, 200, 0.95, 9, stat);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
        assert!(a[0] <= 3.0 && a[1] >= 3.0);
    }

    #[test]
    fn gate_boundary_and_ucb() {
        assert_relative_eq!(gate_boundary_case(&GateParams::default()), 0.25, epsilon = 1e-12);
        let u = check_ucb_dual();
        assert!(u.abs_error <= 1e-9 && u.dual_examples_passed);
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let x = [1e-3, 1e-2, 1e-1];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert_relative_eq!(loglog_slope(&x, &y), 1.5, epsilon = 1e-12);
    }
}
