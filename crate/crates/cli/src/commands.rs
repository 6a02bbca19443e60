use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use riskfield::ablations::{instantiate_variant, PolicyVariant};
use riskfield::config::{fit_geometry, RunConfig};
use riskfield::energy::FieldParams;
use riskfield::evalsuite::{benchmark_scenarios, compute_report, run_benchmark, sample_certified, theory_check_suite, TheoryInputs};
use riskfield::export::{write_gate_trace_csv, write_trajectory_csv, write_training_log_csv, Checkpoint};
use riskfield::learner::{derive_seed, train_resume, TrainEnv, TrainState};
use riskfield::rollout::{rollout, Policy, RolloutOptions};
use riskfield::world::{Field, Regime};
use serde_json::json;

use crate::error::CliError;
use crate::{CheckpointArgs, ExportArgs, GlobalArgs, TrainArgs};

pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = g.workers {
        cfg.workers = workers;
    }
    if !g.variants.is_empty() {
        cfg.variants = g.variants.clone();
    }
    if let Some(alpha) = g.alpha {
        cfg.learner.alpha = Some(alpha);
    }
    if let Some(batch) = g.batch {
        cfg.learner.batch = batch;
    }
    if let Some(epochs) = g.epochs {
        cfg.learner.epochs = epochs;
    }
    if let Some(tau) = g.tau {
        cfg.integrator.tau = tau;
    }
    if let Some(delta) = g.delta {
        cfg.eval.delta = delta;
        cfg.theory.delta = delta;
    }
    cfg.validate()?;
    if cfg.variants.is_empty() {
        return Err(CliError::Usage("no variants selected".into()));
    }
    Ok(cfg)
}

pub fn init_workers(workers: usize) -> Result<(), CliError> {
    if workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global()?;
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn regime_stream(regime: Regime) -> u64 {
    match regime {
        Regime::R1 => 0x6e41,
        Regime::R2 => 0x6e42,
        Regime::R3 => 0x6e43,
        Regime::DelayedEscape => 0x6e44,
    }
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    make_dir(out)?;
    let regimes = &cfg.generate.regimes;
    let mut manifest = Vec::new();
    for (r, &regime) in regimes.iter().enumerate() {
        // split the count evenly, the remainder going to the first regimes
        let n = cfg.generate.count / regimes.len() + usize::from(r < cfg.generate.count % regimes.len());
        for i in 0..n {
            let seed = derive_seed(cfg.seed, regime_stream(regime), i as u64);
            let sc = sample_certified(regime, seed, &cfg.scenario)?;
            let stem = format!("{}_{i:04}", regime.name());
            let spec_path = out.join(format!("{stem}.json"));
            let text = serde_json::to_string_pretty(&sc.spec).expect("scenario spec serializes");
            write_text(&spec_path, &text)?;
            sc.patch.write_csv(Field::SoftRisk, create(&out.join(format!("{stem}_soft_risk.csv")))?)?;
            sc.patch.write_csv(Field::Sdf, create(&out.join(format!("{stem}_sdf.csv")))?)?;
            sc.patch.write_traversable_csv(create(&out.join(format!("{stem}_traversable.csv")))?)?;
            manifest.push(json!({
                "regime": regime.name(),
                "index": i,
                "seed": seed,
                "spec": format!("{stem}.json"),
                "t_escape": sc.schedule.t_escape,
            }));
        }
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&out.join("manifest.json"), &text)?;
    eprintln!("wrote {} scenarios to {}", manifest.len(), out.display());
    Ok(())
}

fn checkpoint_path(dir: &Path, variant: PolicyVariant) -> PathBuf {
    dir.join(format!("{}.checkpoint.json", variant.slug()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Checkpoint::from_json(&text)?)
}

fn load_checkpoint(dir: &Path, variant: PolicyVariant) -> Result<Checkpoint, CliError> {
    let path = checkpoint_path(dir, variant);
    if !path.exists() {
        return Err(CliError::MissingCheckpoint {
            variant,
            path: path.display().to_string(),
        });
    }
    let ck = read_checkpoint(&path)?;
    if ck.variant != variant {
        return Err(CliError::WrongVariant {
            path: path.display().to_string(),
            found: ck.variant,
            expected: variant,
        });
    }
    Ok(ck)
}

fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let path = checkpoint_path(dir, ck.variant);
    let mut w = create(&path)?;
    ck.write_json(&mut w)?;
    w.flush().map_err(io_err(&path))?;
    let log = dir.join(format!("{}.train.csv", ck.variant.slug()));
    write_training_log_csv(&ck.state.log, create(&log)?)?;
    Ok(())
}

/// Geometry parameters every variant starts from: a geometry-only
/// checkpoint, a fresh grid-search fit, or the configured field.
fn base_params(cfg: &RunConfig, out: &Path, args: &TrainArgs) -> Result<FieldParams, CliError> {
    if let Some(path) = &args.geometry {
        let ck = read_checkpoint(path)?;
        if ck.variant != PolicyVariant::GeometryOnly {
            return Err(CliError::WrongVariant {
                path: path.display().to_string(),
                found: ck.variant,
                expected: PolicyVariant::GeometryOnly,
            });
        }
        return Ok(ck.policy().params.clone());
    }
    if args.fit_geometry || cfg.geometry_fit.enabled {
        let fitted = fit_geometry(&cfg.field, &cfg.scenario, &cfg.integrator, &cfg.objective, &cfg.geometry_fit, cfg.seed)?;
        eprintln!("geometry fit: beta {} gamma {}", fitted.beta, fitted.gamma);
        let text = serde_json::to_string_pretty(&fitted).expect("field params serialize");
        write_text(&out.join("geometry_fit.json"), &text)?;
        return Ok(fitted);
    }
    Ok(cfg.field.clone())
}

pub fn train(cfg: &RunConfig, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    make_dir(out)?;
    let base = base_params(cfg, out, args)?;
    let env = TrainEnv {
        layout: cfg.scenario.clone(),
        integrator: cfg.integrator.clone(),
        weights: cfg.objective.clone(),
    };
    for &variant in &cfg.variants {
        let path = checkpoint_path(out, variant);
        let (mut state, seed) = if args.resume && path.exists() {
            let ck = load_checkpoint(out, variant)?;
            eprintln!("{variant}: resuming at epoch {}", ck.state.epoch);
            (ck.state, ck.seed)
        } else {
            let spec = instantiate_variant(variant, &base, &cfg.gate, cfg.seed)?;
            (TrainState::new(spec, &cfg.learner), cfg.seed)
        };
        let result = train_resume(&mut state, &env, &cfg.learner, seed, |d| {
            if d.epoch % 50 == 0 || d.epoch + 1 == cfg.learner.epochs {
                eprintln!("{variant}: epoch {} cvar {:.4} mean {:.4}", d.epoch, d.cvar, d.mean_cost);
            }
        });
        // on divergence the state holds the last good parameters
        save_checkpoint(out, &Checkpoint { variant, seed, state })?;
        result?;
    }
    Ok(())
}

fn checkpoint_dir<'a>(args: &'a CheckpointArgs, out: &'a Path) -> &'a Path {
    args.checkpoints.as_deref().unwrap_or(out)
}

/// Geometry-only reference for pairing: its checkpoint when one exists,
/// else the configured field.
fn geometry_reference(cfg: &RunConfig, dir: &Path) -> Result<Policy, CliError> {
    if checkpoint_path(dir, PolicyVariant::GeometryOnly).exists() {
        let ck = load_checkpoint(dir, PolicyVariant::GeometryOnly)?;
        return Ok(Policy::geometry_only(&ck.policy().params));
    }
    Ok(Policy::geometry_only(&cfg.field))
}

pub fn eval(cfg: &RunConfig, out: &Path, args: &CheckpointArgs) -> Result<(), CliError> {
    let dir = checkpoint_dir(args, out);
    let policies = cfg
        .variants
        .iter()
        .map(|&v| load_checkpoint(dir, v).map(|ck| (v.name().to_string(), ck.policy().clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let geometry = geometry_reference(cfg, dir)?;
    make_dir(out)?;
    let scenarios = benchmark_scenarios(&cfg.scenario, &cfg.eval, cfg.seed)?;
    let rows = run_benchmark(&policies, &geometry, &scenarios, &cfg.integrator)?;
    rows.write_csv(create(&out.join("episodes.csv"))?, create(&out.join("steps.csv"))?)?;
    let report = compute_report(&rows, &cfg.eval, &cfg.objective, cfg.seed)?;
    report.write_json(create(&out.join("report.json"))?)?;
    report.write_csv(create(&out.join("report.csv"))?)?;
    let md = report.to_markdown();
    write_text(&out.join("report.md"), &md)?;
    println!("{md}");
    Ok(())
}

pub fn theory(cfg: &RunConfig, out: &Path, args: &CheckpointArgs) -> Result<(), CliError> {
    let dir = checkpoint_dir(args, out);
    let route_aware = if checkpoint_path(dir, PolicyVariant::RouteAwareCtxCvar).exists() {
        load_checkpoint(dir, PolicyVariant::RouteAwareCtxCvar)?.policy().clone()
    } else {
        instantiate_variant(PolicyVariant::RouteAwareCtxCvar, &cfg.field, &cfg.gate, cfg.seed)?.policy
    };
    let inputs = TheoryInputs {
        layout: &cfg.scenario,
        integrator: &cfg.integrator,
        base: &cfg.field,
        gate: &cfg.gate,
        route_aware: &route_aware,
        seed: cfg.seed,
    };
    let table = theory_check_suite(&inputs, &cfg.theory)?;
    make_dir(out)?;
    table.write_csv(create(&out.join("theory.csv"))?)?;
    let md = table.to_markdown();
    write_text(&out.join("theory.md"), &md)?;
    println!("{md}");
    let failed = table.rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: table.rows.len(),
        });
    }
    Ok(())
}

pub fn export(cfg: &RunConfig, out: &Path, args: &ExportArgs) -> Result<(), CliError> {
    let dir = checkpoint_dir(&args.checkpoints, out).to_path_buf();
    let policies = cfg
        .variants
        .iter()
        .map(|&v| load_checkpoint(&dir, v).map(|ck| (v, ck.policy().clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let seed = args.scenario_seed.unwrap_or(cfg.seed);
    let sc = sample_certified(args.regime, seed, &cfg.scenario)?;
    make_dir(out)?;
    let stem = format!("{}_{seed}", args.regime.name());
    let text = serde_json::to_string_pretty(&sc.spec).expect("scenario spec serializes");
    write_text(&out.join(format!("{stem}.json")), &text)?;
    sc.patch.write_csv(Field::SoftRisk, create(&out.join(format!("{stem}_soft_risk.csv")))?)?;
    sc.patch.write_csv(Field::Sdf, create(&out.join(format!("{stem}_sdf.csv")))?)?;
    for (variant, policy) in &policies {
        let rec = rollout(&sc, policy, &cfg.integrator, RolloutOptions::default()).map_err(riskfield::export::ExportError::from)?;
        write_trajectory_csv(&rec, create(&out.join(format!("{stem}_{}_trajectory.csv", variant.slug())))?)?;
        write_gate_trace_csv(&sc, policy, &cfg.integrator, create(&out.join(format!("{stem}_{}_gate.csv", variant.slug())))?)?;
        eprintln!("{variant}: {:?} after {} steps", rec.status, rec.steps.len());
    }
    Ok(())
}
