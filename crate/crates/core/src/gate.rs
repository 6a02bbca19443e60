//! Route-aware feasibility gate over a fan of short straight motion primitives.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::world::{Field, RiskPatch};
use crate::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    pub num_primitives: usize,
    pub horizon_len: f64,
    pub n_samples: usize,
    /// Half-width of the primitive fan around the goal heading, radians.
    pub fan_half_angle: f64,
    pub delta_phi: f64,
    pub rho_r: f64,
    pub kappa_r: f64,
    pub kappa_c: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            num_primitives: 8,
            horizon_len: 2.0,
            n_samples: 16,
            fan_half_angle: 120f64.to_radians(),
            delta_phi: 0.15,
            rho_r: 0.05,
            kappa_r: 10.0,
            kappa_c: 20.0,
        }
    }
}

/// Straight ray discretized by the midpoint rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub index: usize,
    /// Angle relative to the goal heading.
    pub offset: f64,
    pub direction: Vec2,
    pub samples: Vec<Vec2>,
    /// Arc position of each sample.
    pub arc: Vec<f64>,
    pub ds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveScore {
    pub index: usize,
    /// Integrated soft risk along the primitive.
    pub risk: f64,
    /// Minimum SDF along the primitive.
    pub clearance: f64,
    pub feasible: bool,
    /// Some sample fell outside the patch interior.
    pub clipped: bool,
    /// Sample attaining the clearance.
    pub argmin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEval {
    pub m: f64,
    pub route_factor: f64,
    pub clearance_factor: f64,
    pub k_star: Option<usize>,
    /// Fan primitive closest to the geometry-only direction.
    pub k_geo: usize,
    pub scores: Vec<PrimitiveScore>,
    pub heading: f64,
    /// Angle of the geometry-only direction and the risk integral of the
    /// reference ray along it.
    pub geo_angle: f64,
    pub r_geo: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn heading_to_goal(pos: Vec2, goal: Vec2) -> f64 {
    let d = goal - pos;
    if d.norm() == 0.0 {
        0.0
    } else {
        d.y.atan2(d.x)
    }
}

pub fn primitive_offsets(params: &GateParams) -> Vec<f64> {
    let k = params.num_primitives;
    if k == 1 {
        return vec![0.0];
    }
    let step = 2.0 * params.fan_half_angle / (k - 1) as f64;
    (0..k).map(|i| -params.fan_half_angle + i as f64 * step).collect()
}

pub fn sample_primitives(pos: Vec2, heading: f64, params: &GateParams) -> Vec<Primitive> {
    let n = params.n_samples.max(1);
    let ds = params.horizon_len / n as f64;
    let arc: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * ds).collect();
    primitive_offsets(params)
        .into_iter()
        .enumerate()
        .map(|(index, offset)| {
            let a = heading + offset;
            let direction = Vec2::new(a.cos(), a.sin());
            Primitive {
                index,
                offset,
                direction,
                samples: arc.iter().map(|&l| pos + direction * l).collect(),
                arc: arc.clone(),
                ds,
            }
        })
        .collect()
}

pub fn score_primitive(prim: &Primitive, patch: &RiskPatch, params: &GateParams) -> PrimitiveScore {
    let mut risk = 0.0;
    let mut clearance = f64::INFINITY;
    let mut argmin = 0;
    let mut clipped = false;
    let mut all_traversable = true;
    for (i, &s) in prim.samples.iter().enumerate() {
        clipped |= !patch.is_interior(s);
        all_traversable &= patch.traversable_at(s);
        risk += patch.sample(Field::SoftRisk, s).value * prim.ds;
        let phi = patch.sample(Field::Sdf, s).value;
        if phi < clearance {
            clearance = phi;
            argmin = i;
        }
    }
    PrimitiveScore {
        index: prim.index,
        risk,
        clearance,
        feasible: !clipped && all_traversable && clearance > params.delta_phi,
        clipped,
        argmin,
    }
}

fn angle_between(a: Vec2, b: Vec2) -> f64 {
    let c = a.dot(&b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos()
}

/// Primitive closest in angle to `direction`; ties go to the lower index.
pub fn select_geometry_primitive(prims: &[Primitive], direction: Vec2) -> usize {
    let mut best = 0;
    let mut best_angle = f64::INFINITY;
    for p in prims {
        let a = angle_between(p.direction, direction);
        if a < best_angle {
            best_angle = a;
            best = p.index;
        }
    }
    best
}

/// Ray along `angle`, scored like a fan primitive. With an even fan the goal
/// heading falls between two primitives, so the nominal route is measured
/// on this ray; the nearest fan primitive would flip on every step of a
/// goal-directed path.
pub fn reference_primitive(pos: Vec2, heading: f64, angle: f64, params: &GateParams) -> Primitive {
    let mut p = sample_primitives(pos, angle, &GateParams {
        num_primitives: 1,
        ..params.clone()
    })
    .remove(0);
    p.index = params.num_primitives;
    p.offset = angle - heading;
    p
}

/// Gate value from scored primitives and the nominal route risk `r_geo`.
/// Returns `(m, route, clearance, k_star)`.
pub fn gate_value(
    scores: &[PrimitiveScore],
    prims: &[Primitive],
    r_geo: f64,
    geo_dir: Vec2,
    params: &GateParams,
) -> (f64, f64, f64, Option<usize>) {
    let mut k_star: Option<usize> = None;
    for s in scores.iter().filter(|s| s.feasible) {
        k_star = match k_star {
            None => Some(s.index),
            Some(k) => {
                let cur = &scores[k];
                let better = s.risk < cur.risk
                    || (s.risk == cur.risk
                        && angle_between(prims[s.index].direction, geo_dir)
                            < angle_between(prims[k].direction, geo_dir));
                Some(if better { s.index } else { k })
            }
        };
    }
    match k_star {
        None => (0.0, 0.0, 0.0, None),
        Some(k) => {
            let delta_r = r_geo - scores[k].risk;
            let route = sigmoid(params.kappa_r * (delta_r - params.rho_r));
            let clear = sigmoid(params.kappa_c * (scores[k].clearance - params.delta_phi));
            (route * clear, route, clear, Some(k))
        }
    }
}

/// Full gate evaluation at `pos`. `geo_force` is the geometry-only force used
/// to pick the nominal primitive; when it vanishes the goal heading is used.
pub fn evaluate_gate(pos: Vec2, goal: Vec2, geo_force: Vec2, patch: &RiskPatch, params: &GateParams) -> GateEval {
    let heading = heading_to_goal(pos, goal);
    let prims = sample_primitives(pos, heading, params);
    let scores: Vec<PrimitiveScore> = prims.iter().map(|p| score_primitive(p, patch, params)).collect();
    let geo_dir = if geo_force.norm() > 0.0 {
        geo_force
    } else {
        Vec2::new(heading.cos(), heading.sin())
    };
    let k_geo = select_geometry_primitive(&prims, geo_dir);
    let geo_angle = geo_dir.y.atan2(geo_dir.x);
    let r_geo = score_primitive(&reference_primitive(pos, heading, geo_angle, params), patch, params).risk;
    let (m, route_factor, clearance_factor, k_star) = gate_value(&scores, &prims, r_geo, geo_dir, params);
    GateEval {
        m,
        route_factor,
        clearance_factor,
        k_star,
        k_geo,
        scores,
        heading,
        geo_angle,
        r_geo,
    }
}

/// Gradient of the heading angle to the goal with respect to position.
fn heading_gradient(pos: Vec2, goal: Vec2) -> Vec2 {
    let d = goal - pos;
    let n2 = d.norm_squared();
    if n2 == 0.0 {
        Vec2::zeros()
    } else {
        Vec2::new(d.y, -d.x) / n2
    }
}

fn risk_gradient(prim: &Primitive, patch: &RiskPatch, dtheta: Vec2, heading: f64) -> Vec2 {
    let a = heading + prim.offset;
    let perp = Vec2::new(-a.sin(), a.cos());
    let mut g = Vec2::zeros();
    for (s, &l) in prim.samples.iter().zip(&prim.arc) {
        let grad = patch.sample(Field::SoftRisk, *s).gradient;
        g += (grad + dtheta * (l * perp.dot(&grad))) * prim.ds;
    }
    g
}

fn clearance_gradient(prim: &Primitive, argmin: usize, patch: &RiskPatch, dtheta: Vec2, heading: f64) -> Vec2 {
    let a = heading + prim.offset;
    let perp = Vec2::new(-a.sin(), a.cos());
    let grad = patch.sample(Field::Sdf, prim.samples[argmin]).gradient;
    grad + dtheta * (prim.arc[argmin] * perp.dot(&grad))
}

/// Gradient of the gate value with respect to position, holding the selected
/// primitive and the clearance argmin fixed. Valid away from switching
/// surfaces of those discrete choices. `geo_force` and `geo_jacobian`
/// (d force / d pos) give the rotation of the reference ray; pass the force
/// used in [`evaluate_gate`].
pub fn gate_gradient(
    pos: Vec2,
    goal: Vec2,
    eval: &GateEval,
    patch: &RiskPatch,
    params: &GateParams,
    geo_force: Vec2,
    geo_jacobian: Matrix2<f64>,
) -> Vec2 {
    let Some(k_star) = eval.k_star else {
        return Vec2::zeros();
    };
    if eval.m == 0.0 {
        return Vec2::zeros();
    }
    let prims = sample_primitives(pos, eval.heading, params);
    let dtheta = heading_gradient(pos, goal);
    let f2 = geo_force.norm_squared();
    let dpsi = if f2 > 0.0 {
        // d atan2(f_y, f_x) = (f_x df_y - f_y df_x) / |f|^2
        (geo_jacobian.row(1).transpose() * geo_force.x - geo_jacobian.row(0).transpose() * geo_force.y) / f2
    } else {
        dtheta
    };
    let reference = reference_primitive(pos, eval.heading, eval.geo_angle, params);
    let d_route = risk_gradient(&reference, patch, dpsi, eval.heading) - risk_gradient(&prims[k_star], patch, dtheta, eval.heading);
    let d_clear = clearance_gradient(&prims[k_star], eval.scores[k_star].argmin, patch, dtheta, eval.heading);
    (d_route * ((1.0 - eval.route_factor) * params.kappa_r) + d_clear * ((1.0 - eval.clearance_factor) * params.kappa_c))
        * eval.m
}

/// Non-route heuristic: open wherever the local risk slope exceeds `threshold`.
pub fn directional_gate(patch: &RiskPatch, pos: Vec2, threshold: f64) -> f64 {
    if patch.sample(Field::SoftRisk, pos).gradient.norm() > threshold {
        1.0
    } else {
        0.0
    }
}

/// Scores of primitives (from `pos`, fanned around the goal heading) whose
/// endpoint satisfies `pred`.
pub fn primitives_reaching(
    patch: &RiskPatch,
    pos: Vec2,
    goal: Vec2,
    params: &GateParams,
    pred: impl Fn(Vec2) -> bool,
) -> Vec<PrimitiveScore> {
    let prims = sample_primitives(pos, heading_to_goal(pos, goal), params);
    prims
        .iter()
        .filter(|p| pred(*p.samples.last().expect("primitive has samples")))
        .map(|p| score_primitive(p, patch, params))
        .collect()
}

/// True when some feasible primitive undercuts the goal-heading ray's
/// integrated risk by at least the route margin.
pub fn has_improving_primitive(patch: &RiskPatch, pos: Vec2, goal: Vec2, params: &GateParams) -> bool {
    let eval = evaluate_gate(pos, goal, Vec2::zeros(), patch, params);
    eval.scores.iter().any(|s| s.feasible && eval.r_geo - s.risk >= params.rho_r)
}
