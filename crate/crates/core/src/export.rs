//! CSV and JSON artifacts for external plotting and for resuming runs.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ablations::PolicyVariant;
use crate::gate::evaluate_gate;
use crate::learner::{BatchDiagnostics, TrainState};
use crate::rollout::{IntegratorConfig, Policy, RolloutError, RolloutOptions, RolloutRecord, Simulator};
use crate::world::Scenario;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// Per-step trajectory: t, qx, qy, px, py, m_feas, |F_soft|, |F_hard|,
/// soft risk and signed distance. The final state is the last row, with
/// force columns empty.
pub fn write_trajectory_csv<W: Write>(record: &RolloutRecord, out: W) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "qx", "qy", "px", "py", "m_feas", "f_soft", "f_hard", "risk", "sdf"])?;
    for s in &record.steps {
        w.write_record(&[
            s.t.to_string(),
            s.q.x.to_string(),
            s.q.y.to_string(),
            s.p.x.to_string(),
            s.p.y.to_string(),
            s.m.to_string(),
            s.f_soft.norm().to_string(),
            s.f_hard.norm().to_string(),
            s.risk.to_string(),
            s.sdf.to_string(),
        ])?;
    }
    let f = record.final_state;
    w.write_record(&[
        record.steps.len().to_string(),
        f.q.x.to_string(),
        f.q.y.to_string(),
        f.p.x.to_string(),
        f.p.y.to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Reruns an episode and writes the gate state of every step: gate value,
/// both factors, selected and geometry primitives, then risk, clearance and
/// feasibility of each primitive.
pub fn write_gate_trace_csv<W: Write>(scenario: &Scenario, policy: &Policy, integrator: &IntegratorConfig, out: W) -> Result<(), ExportError> {
    let gp = &policy.gate_params;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "t".to_string(),
        "m_feas".into(),
        "route_factor".into(),
        "clearance_factor".into(),
        "k_star".into(),
        "k_geo".into(),
    ];
    for k in 0..gp.num_primitives {
        header.push(format!("risk_{k}"));
        header.push(format!("clearance_{k}"));
        header.push(format!("feasible_{k}"));
    }
    w.write_record(&header)?;
    let mut sim = Simulator::new(scenario, policy, integrator, RolloutOptions::default())?;
    loop {
        let status = sim.advance()?;
        let step = *sim.steps().last().expect("advance records a step");
        let e = evaluate_gate(step.q, scenario.spec.goal, step.f_geom, sim.patch(), gp);
        let mut rec = vec![
            step.t.to_string(),
            e.m.to_string(),
            e.route_factor.to_string(),
            e.clearance_factor.to_string(),
            e.k_star.map_or(String::new(), |k| k.to_string()),
            e.k_geo.to_string(),
        ];
        for s in &e.scores {
            rec.push(s.risk.to_string());
            rec.push(s.clearance.to_string());
            rec.push(s.feasible.to_string());
        }
        w.write_record(&rec)?;
        if status.is_some() {
            break;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_training_log_csv<W: Write>(log: &[BatchDiagnostics], out: W) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    for d in log {
        w.serialize(d)?;
    }
    w.flush()?;
    Ok(())
}

/// Training checkpoint: the full learner state plus the seed it was run
/// with, enough to resume bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: PolicyVariant,
    pub seed: u64,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn policy(&self) -> &Policy {
        self.state.selected_policy()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), ExportError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, ExportError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::FieldParams;
    use crate::rollout::rollout;
    use crate::world::Regime;

    #[test]
    fn trajectory_rows_match_steps() {
        let sc = Scenario::sample(Regime::R1, 3, &Default::default()).unwrap();
        let policy = Policy::geometry_only(&FieldParams::default());
        let integ = IntegratorConfig {
            horizon: 20,
            ..Default::default()
        };
        let rec = rollout(&sc, &policy, &integ, RolloutOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), rec.steps.len() + 2);
        assert!(text.starts_with("t,qx,qy,px,py,m_feas,f_soft,f_hard,risk,sdf"));

        let mut buf = Vec::new();
        write_gate_trace_csv(&sc, &policy, &integ, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), rec.steps.len() + 1);
    }
}
