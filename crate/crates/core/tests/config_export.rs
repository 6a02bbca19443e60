use riskfield::ablations::{instantiate_variant, PolicyVariant};
use riskfield::config::RunConfig;
use riskfield::energy::FieldParams;
use riskfield::export::*;
use riskfield::gate::GateParams;
use riskfield::learner::TrainState;
use riskfield::rollout::{rollout, IntegratorConfig, RolloutOptions};
use riskfield::world::{Layout, Regime, Scenario};
use serde_json::{Map, Value};

fn insert(root: &mut Map<String, Value>, key: &str, value: Value) {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return;
        }
        node = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .unwrap();
    }
}

#[test]
fn documented_keys_rebuild_the_default_config() {
    let mut root = Map::new();
    for (key, value) in RunConfig::documented_keys() {
        insert(&mut root, &key, serde_json::from_str(&value).unwrap());
    }
    let cfg = RunConfig::from_json(&Value::Object(root).to_string()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn invalid_values_are_rejected() {
    assert!(RunConfig::from_json(r#"{"integrator": {"tau": 0.0}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"learner": {"batch": 0}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"learner": {"alpha": 1.0}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"scenario": {"start_jitter": 0.9}}"#).is_err());
}

#[test]
fn checkpoint_round_trips() {
    let spec = instantiate_variant(PolicyVariant::RouteAwareCtxCvar, &FieldParams::default(), &GateParams::default(), 0).unwrap();
    let ck = Checkpoint {
        variant: PolicyVariant::RouteAwareCtxCvar,
        seed: 4,
        state: TrainState::new(spec.clone(), &Default::default()),
    };
    let mut buf = Vec::new();
    ck.write_json(&mut buf).unwrap();
    let back = Checkpoint::from_json(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.policy(), &spec.policy);
}

#[test]
fn trajectory_csv_parses_back() {
    let sc = Scenario::sample(Regime::DelayedEscape, 2, &Layout::default()).unwrap();
    let policy = riskfield::rollout::Policy::geometry_only(&FieldParams::default());
    let cfg = IntegratorConfig::default();
    let rec = rollout(&sc, &policy, &cfg, RolloutOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&rec, &mut buf).unwrap();
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), rec.steps.len() + 1);
    let qx: f64 = rows[3][1].parse().unwrap();
    assert_eq!(qx, rec.steps[3].q.x);
}
