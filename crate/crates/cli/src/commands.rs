//! Subcommand implementations. Each one resolves its config, reads input
//! artifacts, computes, writes outputs, and finishes with a manifest. A
//! diverged training or distillation run still writes its artifacts and
//! manifest before reporting the numeric failure.

use std::path::{Path, PathBuf};

use serde::Serialize;

use patchflow_core::analytic::{verify_field, verify_theorem1, MixtureField, TheoremReport};
use patchflow_core::distill::distill_ladd;
use patchflow_core::flow::euler_sample;
use patchflow_core::metrics::eval_report;
use patchflow_core::model::{ModelField, VelocityModel};
use patchflow_core::objective::CfgField;
use patchflow_core::rng::seeded_normal_grid;
use patchflow_core::synth::{gen_triples, Dataset};
use patchflow_core::train::{run_ablation_grid, train_stage1, EvalRow, PairMode, TrainOutput};
use patchflow_core::GridShape;

use crate::config::{DataKind, FileConfig};
use crate::manifest::{hash_dir, hash_file, RunContext};
use crate::{CliError, Command};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, out } => cmd_gen_data(config.as_deref(), out),
        Command::Train {
            config,
            data,
            out,
            alpha,
            beta,
            seed,
            epochs,
            uncond_ratio,
            stopgrad,
            pair_mode,
            fixed_gap,
        } => {
            let mut cfg = FileConfig::load(config.as_deref())?;
            let t = &mut cfg.train;
            apply(&mut t.alpha, alpha);
            apply(&mut t.beta, beta);
            apply(&mut t.seed, seed);
            apply(&mut t.epochs, epochs);
            apply(&mut t.uncond_ratio, uncond_ratio);
            apply(&mut t.stopgrad, stopgrad);
            apply(&mut t.fixed_gap, fixed_gap);
            if let Some(mode) = pair_mode {
                t.pair_mode = parse_pair_mode(&mode)?;
            }
            cmd_train(cfg, &data, out)
        }
        Command::Ablate { config, data, out } => {
            let cfg = FileConfig::load(config.as_deref())?;
            cmd_ablate(cfg, &data, out)
        }
        Command::Distill {
            config,
            teacher,
            data,
            out,
            adv_weight,
            seed,
        } => {
            let mut cfg = FileConfig::load(config.as_deref())?;
            apply(&mut cfg.distill.adv_weight, adv_weight);
            apply(&mut cfg.distill.seed, seed);
            cmd_distill(cfg, &teacher, &data, out)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            steps,
            instances,
            seed,
        } => {
            let mut cfg = FileConfig::load(config.as_deref())?;
            apply(&mut cfg.eval.steps, steps);
            apply(&mut cfg.eval.instances, instances);
            apply(&mut cfg.eval.seed, seed);
            cmd_eval(cfg, &checkpoint, &data, out)
        }
        Command::Sample {
            config,
            checkpoint,
            data,
            out,
            instance,
            steps,
            seed,
        } => {
            let mut cfg = FileConfig::load(config.as_deref())?;
            apply(&mut cfg.sample.instance, instance);
            apply(&mut cfg.sample.steps, steps);
            apply(&mut cfg.sample.seed, seed);
            cmd_sample(cfg, &checkpoint, &data, out)
        }
        Command::VerifyTheorem {
            steps,
            samples,
            seed,
            mixture,
            out,
        } => cmd_verify_theorem(&steps, samples, seed, mixture, out),
    }
}

fn apply<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_pair_mode(s: &str) -> Result<PairMode, CliError> {
    match s {
        "free" => Ok(PairMode::Free),
        "fixed-interval" => Ok(PairMode::FixedInterval),
        other => Err(CliError::Config(format!(
            "pair mode must be free or fixed-interval, got {other}"
        ))),
    }
}

/// `$PATCHFLOW_OUT` or `./runs`.
fn out_root() -> PathBuf {
    std::env::var_os("PATCHFLOW_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn prepare_run_dir(out: Option<String>, default_name: &str) -> Result<PathBuf, CliError> {
    let dir = out_root().join(out.as_deref().unwrap_or(default_name));
    std::fs::create_dir_all(&dir).map_err(CliError::from_io)?;
    Ok(dir)
}

fn require_exists(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    require_exists(dir)?;
    require_exists(&dir.join("manifest.json"))?;
    require_exists(&dir.join("data.bin"))?;
    Ok(Dataset::load(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<VelocityModel, CliError> {
    require_exists(path)?;
    Ok(VelocityModel::load(path)?)
}

fn check_model_matches_data(model: &VelocityModel, data: &Dataset) -> Result<(), CliError> {
    let shape = model.config().grid_shape();
    if shape != data.shape {
        return Err(CliError::Incompatible(format!(
            "checkpoint expects {}x{}x{} grids, dataset holds {}x{}x{}",
            shape.channels,
            shape.height,
            shape.width,
            data.shape.channels,
            data.shape.height,
            data.shape.width
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(CliError::from_io)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Numeric(format!("serializing {}: {e}", path.display())))?;
    write_text(path, &text)
}

/// Quotes a CSV field when it contains a delimiter, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(
        "epoch,one_step_endpoint_mse,one_step_garment_region_mse,one_step_energy_distance,\
         one_step_mean_chord_deviation,one_step_mean_velocity_dispersion,\
         multi_step_endpoint_mse,multi_step_garment_region_mse,multi_step_energy_distance,\
         multi_step_mean_chord_deviation,multi_step_mean_velocity_dispersion\n",
    );
    for row in rows {
        let a = &row.one_step;
        let b = &row.multi_step;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            row.epoch,
            a.endpoint_mse,
            a.garment_region_mse,
            a.energy_distance,
            a.mean_chord_deviation,
            a.mean_velocity_dispersion,
            b.endpoint_mse,
            b.garment_region_mse,
            b.energy_distance,
            b.mean_chord_deviation,
            b.mean_velocity_dispersion,
        ));
    }
    out
}

fn train_artifacts(dir: &Path, output: &TrainOutput) -> Result<(), CliError> {
    let mut metrics = String::from("epoch,fm,garment,consistency,total,lr\n");
    for e in &output.epochs {
        metrics.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.fm, e.garment, e.consistency, e.total, e.lr
        ));
    }
    write_text(&dir.join("metrics.csv"), &metrics)?;
    write_text(&dir.join("evals.csv"), &eval_csv(&output.evals))?;
    Ok(())
}

fn cmd_gen_data(config: Option<&Path>, out: Option<String>) -> Result<(), CliError> {
    let cfg = FileConfig::load(config)?;
    cfg.cross_validate()?;
    let ctx = RunContext::new("gen-data", &cfg)?;
    let dir = prepare_run_dir(out, "gen-data")?;
    let d = &cfg.data;
    match d.kind {
        DataKind::Instances => {
            let dataset =
                Dataset::generate(d.n, d.shape(), d.residual_count, d.residual_scale, d.seed)?;
            dataset.save(&dir.join("dataset"))?;
        }
        DataKind::Triples => {
            let triples = gen_triples(d.n, d.shape(), d.residual_count, d.residual_scale, d.seed)?;
            write_json(&dir.join("triples.json"), &triples)?;
        }
    }
    ctx.write(&dir)?;
    Ok(())
}

fn cmd_train(cfg: FileConfig, data_dir: &Path, out: Option<String>) -> Result<(), CliError> {
    cfg.cross_validate()?;
    let data = load_dataset(data_dir)?;
    let model_config = cfg.model.to_model_config(data.shape);
    model_config
        .validate()
        .map_err(|e| CliError::Incompatible(format!("model config vs dataset: {e}")))?;
    let train_config = cfg.train.to_train_config();

    let mut ctx = RunContext::new("train", &cfg)?;
    ctx.record_input("dataset", hash_dir(data_dir)?);
    let dir = prepare_run_dir(out, "train")?;

    let output = train_stage1(&model_config, &train_config, &data)?;
    output.model.save(&dir.join("model.ckpt"))?;
    train_artifacts(&dir, &output)?;
    ctx.write(&dir)?;
    if let Some((epoch, update)) = output.diverged {
        return Err(CliError::Numeric(format!(
            "training diverged at epoch {epoch}, update {update}; last good checkpoint kept"
        )));
    }
    Ok(())
}

fn cmd_ablate(cfg: FileConfig, data_dir: &Path, out: Option<String>) -> Result<(), CliError> {
    cfg.cross_validate()?;
    let data = load_dataset(data_dir)?;
    let model_config = cfg.model.to_model_config(data.shape);
    model_config
        .validate()
        .map_err(|e| CliError::Incompatible(format!("model config vs dataset: {e}")))?;
    let base = cfg.train.to_train_config();

    let mut ctx = RunContext::new("ablate", &cfg)?;
    ctx.record_input("dataset", hash_dir(data_dir)?);
    let dir = prepare_run_dir(out, "ablate")?;

    let result = run_ablation_grid(&model_config, &base, &data)?;
    let mut table = String::from(
        "label,uncond_training,cfg_inference,steps,energy_distance,endpoint_mse,garment_region_mse\n",
    );
    for row in &result.rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&row.label),
            row.cell.uncond_training,
            row.cell.cfg_inference,
            row.cell.steps,
            row.energy_distance,
            row.endpoint_mse,
            row.garment_region_mse,
        ));
    }
    write_text(&dir.join("ablation.csv"), &table)?;
    write_text(&dir.join("curves_ut.csv"), &eval_csv(&result.ut.evals))?;
    write_text(&dir.join("curves_nout.csv"), &eval_csv(&result.nout.evals))?;
    result.ut.model.save(&dir.join("model_ut.ckpt"))?;
    result.nout.model.save(&dir.join("model_nout.ckpt"))?;
    ctx.write(&dir)?;
    Ok(())
}

fn cmd_distill(
    cfg: FileConfig,
    teacher_path: &Path,
    data_dir: &Path,
    out: Option<String>,
) -> Result<(), CliError> {
    let distill_config = cfg.distill.to_distill_config();
    let teacher = load_checkpoint(teacher_path)?;
    let data = load_dataset(data_dir)?;
    check_model_matches_data(&teacher, &data)?;
    distill_config.validate(teacher.config().depth)?;

    let mut ctx = RunContext::new("distill", &cfg)?;
    ctx.record_input("dataset", hash_dir(data_dir)?);
    ctx.record_input("teacher", hash_file(teacher_path)?);
    let dir = prepare_run_dir(out, "distill")?;

    let output = distill_ladd(&teacher, &distill_config, &data)?;
    output.student.save(&dir.join("student.ckpt"))?;
    let mut log = String::from("epoch,recon,gen_adv,disc,student_endpoint_mse\n");
    for e in &output.log {
        log.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.recon, e.gen_adv, e.disc, e.student_endpoint_mse
        ));
    }
    write_text(&dir.join("distill_log.csv"), &log)?;
    ctx.write(&dir)?;
    if let Some((epoch, update)) = output.diverged {
        return Err(CliError::Numeric(format!(
            "distillation diverged at epoch {epoch}, update {update}; checkpoints kept"
        )));
    }
    Ok(())
}

fn cmd_eval(
    cfg: FileConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: Option<String>,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let mut data = load_dataset(data_dir)?;
    check_model_matches_data(&model, &data)?;
    if cfg.eval.instances > 0 && cfg.eval.instances < data.len() {
        data.instances.truncate(cfg.eval.instances);
    }

    let mut ctx = RunContext::new("eval", &cfg)?;
    ctx.record_input("dataset", hash_dir(data_dir)?);
    ctx.record_input("checkpoint", hash_file(checkpoint)?);
    let dir = prepare_run_dir(out, "eval")?;

    let report = eval_report(&model, &data, cfg.eval.steps, cfg.eval.seed)?;
    write_json(&dir.join("report.json"), &report)?;
    ctx.write(&dir)?;
    Ok(())
}

fn cmd_sample(
    cfg: FileConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: Option<String>,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let data = load_dataset(data_dir)?;
    check_model_matches_data(&model, &data)?;
    let s = &cfg.sample;
    if s.instance >= data.len() {
        return Err(CliError::Config(format!(
            "sample.instance {} out of range, dataset has {} instances",
            s.instance,
            data.len()
        )));
    }
    if s.steps == 0 {
        return Err(CliError::Config("sample.steps must be at least 1".into()));
    }

    let mut ctx = RunContext::new("sample", &cfg)?;
    ctx.record_input("dataset", hash_dir(data_dir)?);
    ctx.record_input("checkpoint", hash_file(checkpoint)?);
    let dir = prepare_run_dir(out, "sample")?;

    let inst = &data.instances[s.instance];
    let eps = seeded_normal_grid(s.seed, "sample-noise", s.instance as u64, data.shape);
    let traj = if s.cfg {
        let field = CfgField::new(&model, &inst.person, &inst.garment, s.cfg_scale);
        euler_sample(&field, &eps, s.steps)?
    } else {
        let field = ModelField {
            model: &model,
            person: &inst.person,
            garment: &inst.garment,
        };
        euler_sample(&field, &eps, s.steps)?
    };
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    std::fs::write(dir.join("trajectory.csv"), csv).map_err(CliError::from_io)?;
    write_json(&dir.join("final.json"), traj.final_state())?;
    ctx.write(&dir)?;
    Ok(())
}

#[derive(Serialize)]
struct VerifyArgs {
    steps: Vec<usize>,
    samples: usize,
    seed: u64,
    mixture: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    mode: &'static str,
    steps: Vec<usize>,
    samples: usize,
    seed: u64,
    #[serde(flatten)]
    report: TheoremReport,
}

fn cmd_verify_theorem(
    steps: &str,
    samples: usize,
    seed: u64,
    mixture: bool,
    out: Option<String>,
) -> Result<(), CliError> {
    let step_counts: Vec<usize> = steps
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad step count {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if step_counts.is_empty() || step_counts.contains(&0) {
        return Err(CliError::Config(
            "step counts must be a non-empty list of positive integers".into(),
        ));
    }
    if samples == 0 {
        return Err(CliError::Config("samples must be at least 1".into()));
    }

    let args = VerifyArgs {
        steps: step_counts.clone(),
        samples,
        seed,
        mixture,
    };
    let ctx = RunContext::new("verify-theorem", &args)?;
    let dir = prepare_run_dir(out, "verify-theorem")?;

    let shape = GridShape::new(3, 16, 16);
    let eps_samples: Vec<_> = (0..samples)
        .map(|i| seeded_normal_grid(seed, "theorem-noise", i as u64, shape))
        .collect();
    let report = if mixture {
        // Two well-separated modes make the marginal field visibly curved.
        let a = seeded_normal_grid(seed, "mixture-a", 0, shape).scale(3.0);
        let b = seeded_normal_grid(seed, "mixture-b", 0, shape).scale(3.0);
        let field = MixtureField::new(vec![(0.5, a), (0.5, b)])?;
        verify_field(&field, &eps_samples, &step_counts)?
    } else {
        let target = seeded_normal_grid(seed, "theorem-target", 0, shape);
        verify_theorem1(&target, &eps_samples, &step_counts)?
    };

    println!(
        "{}: max endpoint discrepancy {:.3e}, max chord deviation {:.3e}",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_endpoint_discrepancy,
        report.max_chord_deviation,
    );
    let pass = report.pass;
    write_json(
        &dir.join("report.json"),
        &VerifyReport {
            mode: if mixture { "mixture" } else { "delta" },
            steps: step_counts,
            samples,
            seed,
            report,
        },
    )?;
    ctx.write(&dir)?;
    if !mixture && !pass {
        return Err(CliError::Numeric(
            "delta-field step-count invariance failed".into(),
        ));
    }
    Ok(())
}
