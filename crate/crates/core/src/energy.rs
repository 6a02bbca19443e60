//! Geometric and contextual energy terms, their forces and Hessians, and the
//! coefficient heads that map local patch features to context weights.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::sigmoid;
use crate::world::{Field, RiskPatch};
use crate::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("barrier evaluated at non-positive distance {0}")]
    Penetration(f64),
    #[error("mass matrix is not symmetric positive definite")]
    Mass,
    #[error("invalid parameter {name} = {value}")]
    Parameter { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldParams {
    pub mass: Matrix2<f64>,
    /// Goal attraction gain.
    pub beta: f64,
    /// Default obstacle barrier weight.
    pub alpha: f64,
    /// Damping coefficient.
    pub gamma: f64,
    pub lambda_s: f64,
    pub lambda_h: f64,
    /// Softplus sharpness of the hazard barrier.
    pub k_sharp: f64,
    /// Activation distance of the hazard barrier.
    pub d_hat_phi: f64,
    /// Activation distance of the obstacle barrier.
    pub d_hat_ipc: f64,
    pub lambda_max: f64,
}

impl Default for FieldParams {
    fn default() -> Self {
        FieldParams {
            mass: Matrix2::identity(),
            beta: 2.0,
            alpha: 5.0,
            gamma: 1.0,
            lambda_s: 0.0,
            lambda_h: 0.0,
            k_sharp: 10.0,
            d_hat_phi: 0.5,
            d_hat_ipc: 0.5,
            lambda_max: 5.0,
        }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let m = &self.mass;
        let det = m.determinant();
        if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 || m[(0, 0)] <= 0.0 || det <= 0.0 {
            return Err(EnergyError::Mass);
        }
        for (name, value) in [
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda_s", self.lambda_s),
            ("lambda_h", self.lambda_h),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(EnergyError::Parameter { name, value });
            }
        }
        for (name, value) in [
            ("k_sharp", self.k_sharp),
            ("d_hat_phi", self.d_hat_phi),
            ("d_hat_ipc", self.d_hat_ipc),
            ("lambda_max", self.lambda_max),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EnergyError::Parameter { name, value });
            }
        }
        Ok(())
    }

    pub fn inverse_mass(&self) -> Matrix2<f64> {
        self.mass.try_inverse().expect("validated mass is invertible")
    }

    /// Smallest eigenvalue of the inverse mass.
    pub fn inverse_mass_min_eig(&self) -> f64 {
        let e = nalgebra::SymmetricEigen::new(self.inverse_mass()).eigenvalues;
        e[0].min(e[1])
    }

    pub fn geometry_only(&self) -> FieldParams {
        FieldParams {
            lambda_s: 0.0,
            lambda_h: 0.0,
            ..self.clone()
        }
    }
}

/// Point obstacle with its own barrier weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Vec2,
    pub alpha: f64,
}

impl Obstacle {
    pub fn from_anchors(anchors: &[Vec2], alpha: f64) -> Vec<Obstacle> {
        anchors.iter().map(|&position| Obstacle { position, alpha }).collect()
    }
}

/// Obstacle barrier value and its first two derivatives in `d`; zero outside
/// the activation distance.
pub fn ipc_barrier_derivs(d: f64, d_hat: f64) -> Result<(f64, f64, f64), EnergyError> {
    if d <= 0.0 {
        return Err(EnergyError::Penetration(d));
    }
    if d >= d_hat {
        return Ok((0.0, 0.0, 0.0));
    }
    let a = d - d_hat;
    let ln = (d / d_hat).ln();
    let b = -a * a * ln;
    let db = -2.0 * a * ln - a * a / d;
    let ddb = -2.0 * ln - 4.0 * a / d + a * a / (d * d);
    Ok((b, db, ddb))
}

pub fn ipc_barrier(d: f64, d_hat: f64) -> Result<f64, EnergyError> {
    ipc_barrier_derivs(d, d_hat).map(|(b, _, _)| b)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softplus hazard barrier on the SDF: value, first and second derivative in `phi`.
pub fn softplus_barrier(phi: f64, k: f64, d_hat: f64) -> (f64, f64, f64) {
    let x = k * (d_hat - phi);
    let s = sigmoid(x);
    (softplus(x) / k, -s, k * s * (1.0 - s))
}

/// Geometric force and its position Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryTerms {
    pub potential: f64,
    pub force: Vec2,
    pub hessian: Matrix2<f64>,
}

pub fn geometry_terms(pos: Vec2, params: &FieldParams, goal: Vec2, obstacles: &[Obstacle]) -> Result<GeometryTerms, EnergyError> {
    let mut potential = 0.0;
    let mut force = Vec2::zeros();
    let mut hessian = Matrix2::zeros();
    let diff = pos - goal;
    let r = diff.norm();
    potential += params.beta * r;
    if r > 0.0 {
        let u = diff / r;
        force -= u * params.beta;
        hessian += (Matrix2::identity() - u * u.transpose()) * (params.beta / r);
    }
    for o in obstacles {
        let diff = pos - o.position;
        let d = diff.norm();
        let (b, db, ddb) = ipc_barrier_derivs(d, params.d_hat_ipc)?;
        if db == 0.0 && b == 0.0 {
            continue;
        }
        let u = diff / d;
        let uu = u * u.transpose();
        potential += o.alpha * b;
        force -= u * (o.alpha * db);
        hessian += (uu * ddb + (Matrix2::identity() - uu) * (db / d)) * o.alpha;
    }
    Ok(GeometryTerms {
        potential,
        force,
        hessian,
    })
}

pub fn geometry_force(pos: Vec2, params: &FieldParams, goal: Vec2, obstacles: &[Obstacle]) -> Result<Vec2, EnergyError> {
    geometry_terms(pos, params, goal, obstacles).map(|t| t.force)
}

/// Context forces `(soft, hard)`; the soft channel is scaled by gate value `m`.
pub fn context_force(pos: Vec2, patch: &RiskPatch, params: &FieldParams, m: f64) -> (Vec2, Vec2) {
    let r = patch.sample(Field::SoftRisk, pos);
    let phi = patch.sample(Field::Sdf, pos);
    let (_, db, _) = softplus_barrier(phi.value, params.k_sharp, params.d_hat_phi);
    (-r.gradient * (m * params.lambda_s), -phi.gradient * (params.lambda_h * db))
}

/// Context-channel derivatives needed by forward sensitivities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextJacobians {
    /// d(F_soft + F_hard)/dq.
    pub dforce_dq: Matrix2<f64>,
    /// dF/d(lambda_s), dF/d(lambda_h).
    pub dforce_dlambda_s: Vec2,
    pub dforce_dlambda_h: Vec2,
}

pub fn context_jacobians(pos: Vec2, patch: &RiskPatch, params: &FieldParams, m: f64, grad_m: Vec2) -> ContextJacobians {
    let r = patch.sample(Field::SoftRisk, pos);
    let phi = patch.sample(Field::Sdf, pos);
    let (_, db, ddb) = softplus_barrier(phi.value, params.k_sharp, params.d_hat_phi);
    let soft = -(r.gradient * grad_m.transpose() + r.hessian() * m) * params.lambda_s;
    let hard = -(phi.gradient * phi.gradient.transpose() * ddb + phi.hessian() * db) * params.lambda_h;
    ContextJacobians {
        dforce_dq: soft + hard,
        dforce_dlambda_s: -r.gradient * m,
        dforce_dlambda_h: -phi.gradient * db,
    }
}

/// Energy decomposition at one phase-space point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub kinetic: f64,
    pub geometric: f64,
    pub soft: f64,
    pub hard: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.kinetic + self.geometric + self.soft + self.hard
    }
}

/// Hamiltonian with context terms; `m` scales the soft term.
pub fn hamiltonian_terms(
    q: Vec2,
    p: Vec2,
    patch: &RiskPatch,
    params: &FieldParams,
    goal: Vec2,
    obstacles: &[Obstacle],
    m: f64,
) -> Result<EnergyTerms, EnergyError> {
    let kinetic = 0.5 * p.dot(&(params.inverse_mass() * p));
    let geometric = geometry_terms(q, params, goal, obstacles)?.potential;
    let r = patch.sample(Field::SoftRisk, q).value;
    let phi = patch.sample(Field::Sdf, q).value;
    let (bh, _, _) = softplus_barrier(phi, params.k_sharp, params.d_hat_phi);
    Ok(EnergyTerms {
        kinetic,
        geometric,
        soft: m * params.lambda_s * r,
        hard: params.lambda_h * bh,
    })
}

pub fn hamiltonian_total(
    q: Vec2,
    p: Vec2,
    patch: &RiskPatch,
    params: &FieldParams,
    goal: Vec2,
    obstacles: &[Obstacle],
) -> Result<f64, EnergyError> {
    hamiltonian_terms(q, p, patch, params, goal, obstacles, 1.0).map(|t| t.total())
}

pub const NUM_FEATURES: usize = 8;
/// Radius of the feature window around the agent.
pub const FEATURE_WINDOW: f64 = 2.0;

/// Local patch descriptors consumed by the coefficient heads:
/// bias, mean and max soft risk in the window, min SDF along the goal ray,
/// traversable fraction, goal distance, and the cosine and absolute sine of
/// the angle between the goal direction and the mean risk-descent direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadFeatures(pub [f64; NUM_FEATURES]);

pub fn compute_features(patch: &RiskPatch, center: Vec2, goal: Vec2) -> HeadFeatures {
    let (ci, cj) = patch.nearest_node(center);
    let c = patch.node_position(ci, cj);
    let reach = (FEATURE_WINDOW / patch.resolution).ceil() as i64;
    let (mut count, mut sum, mut max, mut trav) = (0usize, 0.0, 0.0f64, 0usize);
    let mut grad = Vec2::zeros();
    for dj in -reach..=reach {
        for di in -reach..=reach {
            let i = ci as i64 + di;
            let j = cj as i64 + dj;
            if i < 0 || j < 0 || i >= patch.width as i64 || j >= patch.height as i64 {
                continue;
            }
            let pos = patch.node_position(i as usize, j as usize);
            if (pos - c).norm() > FEATURE_WINDOW {
                continue;
            }
            let k = patch.index(i as usize, j as usize);
            count += 1;
            sum += patch.soft_risk[k];
            max = max.max(patch.soft_risk[k]);
            trav += patch.traversable[k] as usize;
            grad += patch.sample(Field::SoftRisk, pos).gradient;
        }
    }
    let n = count.max(1) as f64;
    let to_goal = goal - c;
    let dist = to_goal.norm();
    let heading = if dist > 0.0 { to_goal / dist } else { Vec2::new(1.0, 0.0) };
    let mut min_sdf = f64::INFINITY;
    for s in 0..16 {
        let p = c + heading * (FEATURE_WINDOW * (s as f64 + 0.5) / 16.0);
        min_sdf = min_sdf.min(patch.sample(Field::Sdf, p).value);
    }
    let descent = -grad / n;
    let (cos, sin) = if descent.norm() > 1e-9 {
        let d = descent.normalize();
        (d.dot(&heading), (heading.x * d.y - heading.y * d.x).abs())
    } else {
        (0.0, 0.0)
    };
    HeadFeatures([
        1.0,
        sum / n,
        max,
        min_sdf.clamp(-1.0, 2.0) / 2.0,
        trav as f64 / n,
        (dist / 10.0).min(2.0),
        cos,
        sin,
    ])
}

/// Coefficient-head parameters: one linear logit per channel plus a gain in
/// `[0, 1]`. `lambda = gain * lambda_max * sigmoid(w . f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadWeights {
    pub soft: [f64; NUM_FEATURES],
    pub hard: [f64; NUM_FEATURES],
    pub gain_soft: f64,
    pub gain_hard: f64,
}

pub const NUM_HEAD_PARAMS: usize = 2 * NUM_FEATURES + 2;

impl Default for HeadWeights {
    /// Zero weights and zero gains: both coefficients start at exactly zero.
    fn default() -> Self {
        HeadWeights {
            soft: [0.0; NUM_FEATURES],
            hard: [0.0; NUM_FEATURES],
            gain_soft: 0.0,
            gain_hard: 0.0,
        }
    }
}

impl HeadWeights {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NUM_HEAD_PARAMS);
        v.extend_from_slice(&self.soft);
        v.extend_from_slice(&self.hard);
        v.push(self.gain_soft);
        v.push(self.gain_hard);
        v
    }

    pub fn from_slice(v: &[f64]) -> HeadWeights {
        assert_eq!(v.len(), NUM_HEAD_PARAMS);
        let mut soft = [0.0; NUM_FEATURES];
        let mut hard = [0.0; NUM_FEATURES];
        soft.copy_from_slice(&v[..NUM_FEATURES]);
        hard.copy_from_slice(&v[NUM_FEATURES..2 * NUM_FEATURES]);
        HeadWeights {
            soft,
            hard,
            gain_soft: v[2 * NUM_FEATURES],
            gain_hard: v[2 * NUM_FEATURES + 1],
        }
    }

    /// Clamps gains to `[0, 1]`.
    pub fn project(&mut self) {
        self.gain_soft = self.gain_soft.clamp(0.0, 1.0);
        self.gain_hard = self.gain_hard.clamp(0.0, 1.0);
    }
}

/// Predicted coefficients with their Jacobian rows over the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPrediction {
    pub lambda_s: f64,
    pub lambda_h: f64,
    pub dlambda_s: [f64; NUM_HEAD_PARAMS],
    pub dlambda_h: [f64; NUM_HEAD_PARAMS],
}

pub fn predict_coefficients(features: &HeadFeatures, weights: &HeadWeights, lambda_max: f64) -> CoefficientPrediction {
    let f = &features.0;
    let zs: f64 = weights.soft.iter().zip(f).map(|(w, x)| w * x).sum();
    let zh: f64 = weights.hard.iter().zip(f).map(|(w, x)| w * x).sum();
    let (ss, sh) = (sigmoid(zs), sigmoid(zh));
    let mut dlambda_s = [0.0; NUM_HEAD_PARAMS];
    let mut dlambda_h = [0.0; NUM_HEAD_PARAMS];
    for i in 0..NUM_FEATURES {
        dlambda_s[i] = weights.gain_soft * lambda_max * ss * (1.0 - ss) * f[i];
        dlambda_h[NUM_FEATURES + i] = weights.gain_hard * lambda_max * sh * (1.0 - sh) * f[i];
    }
    dlambda_s[2 * NUM_FEATURES] = lambda_max * ss;
    dlambda_h[2 * NUM_FEATURES + 1] = lambda_max * sh;
    CoefficientPrediction {
        lambda_s: weights.gain_soft * lambda_max * ss,
        lambda_h: weights.gain_hard * lambda_max * sh,
        dlambda_s,
        dlambda_h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ipc_barrier_values() {
        assert_eq!(ipc_barrier(0.6, 0.5).unwrap(), 0.0);
        assert_eq!(ipc_barrier(0.5, 0.5).unwrap(), 0.0);
        assert_relative_eq!(ipc_barrier(0.25, 0.5).unwrap(), 0.0625 * 2f64.ln(), epsilon = 1e-15);
        assert!(matches!(ipc_barrier(0.0, 0.5), Err(EnergyError::Penetration(_))));
        assert!(ipc_barrier(1e-9, 0.5).unwrap() > ipc_barrier(1e-3, 0.5).unwrap());
    }

    #[test]
    fn ipc_derivatives_match_finite_differences() {
        for &d in &[0.05, 0.13, 0.3, 0.47] {
            let h = 1e-6;
            let (_, db, ddb) = ipc_barrier_derivs(d, 0.5).unwrap();
            let fd1 = (ipc_barrier(d + h, 0.5).unwrap() - ipc_barrier(d - h, 0.5).unwrap()) / (2.0 * h);
            let fd2 = (ipc_barrier_derivs(d + h, 0.5).unwrap().1 - ipc_barrier_derivs(d - h, 0.5).unwrap().1) / (2.0 * h);
            assert_relative_eq!(db, fd1, max_relative = 1e-7);
            assert_relative_eq!(ddb, fd2, max_relative = 1e-6);
        }
    }

    #[test]
    fn softplus_barrier_limits() {
        let (b, db, _) = softplus_barrier(0.5, 10.0, 0.5);
        assert_relative_eq!(b, 2f64.ln() / 10.0, epsilon = 1e-15);
        assert_relative_eq!(db, -0.5, epsilon = 1e-15);
        let (far, dfar, _) = softplus_barrier(10.0, 10.0, 0.5);
        assert!(far < 1e-40 && dfar.abs() < 1e-40);
        let (deep, ddeep, _) = softplus_barrier(-200.0, 10.0, 0.5);
        assert_relative_eq!(deep, 200.5, epsilon = 1e-9);
        assert_relative_eq!(ddeep, -1.0);
    }

    #[test]
    fn geometry_hessian_matches_finite_differences() {
        let params = FieldParams::default();
        let goal = Vec2::new(5.0, 1.0);
        let obstacles = vec![
            Obstacle { position: Vec2::new(1.2, 0.9), alpha: 5.0 },
            Obstacle { position: Vec2::new(0.8, 1.4), alpha: 3.0 },
        ];
        let q = Vec2::new(1.0, 1.1);
        let t = geometry_terms(q, &params, goal, &obstacles).unwrap();
        let h = 1e-6;
        for axis in 0..2 {
            let mut dq = Vec2::zeros();
            dq[axis] = h;
            let fp = geometry_force(q + dq, &params, goal, &obstacles).unwrap();
            let fm = geometry_force(q - dq, &params, goal, &obstacles).unwrap();
            let col = (fp - fm) / (2.0 * h);
            assert_relative_eq!(-t.hessian[(0, axis)], col.x, max_relative = 1e-6, epsilon = 1e-8);
            assert_relative_eq!(-t.hessian[(1, axis)], col.y, max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_heads_give_zero_coefficients() {
        let patch = RiskPatch::uniform(16, 16, 0.25, 0.3);
        let f = compute_features(&patch, Vec2::new(2.0, 2.0), Vec2::new(3.0, 2.0));
        let p = predict_coefficients(&f, &HeadWeights::default(), 5.0);
        assert_eq!((p.lambda_s, p.lambda_h), (0.0, 0.0));
        assert_eq!(f.0[0], 1.0);
        assert_relative_eq!(f.0[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn head_jacobian_matches_finite_differences() {
        let f = HeadFeatures([1.0, 0.4, 0.7, 0.3, 0.9, 0.5, -0.2, 0.6]);
        let w: Vec<f64> = (0..NUM_HEAD_PARAMS).map(|i| 0.1 * (i as f64) - 0.7).collect();
        let mut w = w;
        w[16] = 0.6;
        w[17] = 0.35;
        let p = predict_coefficients(&f, &HeadWeights::from_slice(&w), 5.0);
        let h = 1e-6;
        for i in 0..NUM_HEAD_PARAMS {
            let mut a = w.clone();
            let mut b = w.clone();
            a[i] += h;
            b[i] -= h;
            let pa = predict_coefficients(&f, &HeadWeights::from_slice(&a), 5.0);
            let pb = predict_coefficients(&f, &HeadWeights::from_slice(&b), 5.0);
            assert_relative_eq!(p.dlambda_s[i], (pa.lambda_s - pb.lambda_s) / (2.0 * h), epsilon = 1e-8);
            assert_relative_eq!(p.dlambda_h[i], (pa.lambda_h - pb.lambda_h) / (2.0 * h), epsilon = 1e-8);
        }
    }
}
