use std::path::{Path, PathBuf};

use cdrnp::autodiff::{Fault, MAX_EPS, MIN_EPS};
use cdrnp::checkpoint::Checkpoint;
use cdrnp::config::RunConfig;
use cdrnp::eval::{baseline_report, evaluate, evaluate_repeats, predict_user};
use cdrnp::pipeline::{prepare, Prepared};
use cdrnp::synth::{generate_synthetic, oracle_noise_mae, ORACLE_DRAWS};
use cdrnp::training::{check_model_gradients, init_rng, vocab_of, LossWeights, TrainLog, Trainer};
use cdrnp::model::Cdrnp;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::manifest::RunManifest;
use crate::{Command, Common};

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Upper bound on `d` and task sizes for `gradcheck`.
pub const GRADCHECK_MAX_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cdrnp::Error),
    #[error("gradient check failed: `{param}` has relative error {error:.3e} > {GRADCHECK_TOLERANCE:e}")]
    GradCheck { param: String, error: f64 },
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(cdrnp::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<T>(context: impl Into<String>, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io {
        context: context.into(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("json serialises");
    Ok(cdrnp::checkpoint::write_atomic(path, &bytes)?)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).map_err(|e| match e {
        cdrnp::Error::Io(err) => CliError::Usage(format!("cannot read {}: {err}", common.config.display())),
        other => CliError::Core(other),
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Ingest { common, .. }
            | Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Predict { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }

    fn out_dir(&self) -> PathBuf {
        let parent = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
        match self {
            Command::Ingest { out, .. } | Command::Synth { out, .. } | Command::Train { out, .. } => out.clone(),
            Command::Gradcheck { out, .. } => out.clone(),
            Command::Evaluate { out, checkpoint, .. } | Command::Predict { out, checkpoint, .. } => {
                out.clone().unwrap_or_else(|| parent(checkpoint))
            }
        }
    }

    /// Argument checks that count as usage errors.
    fn preflight(&self, cfg: &RunConfig) -> Result<()> {
        match self {
            Command::Synth { .. } if cfg.synth.is_none() => {
                Err(CliError::Usage("synth needs a [synth] section in the config".into()))
            }
            Command::Evaluate { repeats: 0, .. } => Err(CliError::Usage("--repeats must be positive".into())),
            Command::Gradcheck { eps, .. } => {
                if !(MIN_EPS..=MAX_EPS).contains(eps) {
                    return Err(CliError::Usage(format!("--eps {eps} outside [{MIN_EPS:e}, {MAX_EPS:e}]")));
                }
                let t = &cfg.train;
                if cfg.model.d > GRADCHECK_MAX_DIM
                    || t.support_size > GRADCHECK_MAX_DIM
                    || t.query_size > GRADCHECK_MAX_DIM
                {
                    return Err(CliError::Usage(format!(
                        "gradcheck needs d, support_size and query_size <= {GRADCHECK_MAX_DIM}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Loads the config, dispatches, and records a manifest for every run
/// that got past argument validation.
pub fn run(cmd: Command) -> Result<()> {
    let cfg = load_config(cmd.common())?;
    cmd.preflight(&cfg)?;
    let out = cmd.out_dir();
    io(format!("creating {}", out.display()), std::fs::create_dir_all(&out))?;

    let mut manifest = RunManifest::start(cmd.name());
    manifest.config_path = Some(cmd.common().config.clone());
    manifest.config_hash = Some(cfg.hash());
    manifest.seed = Some(cfg.seed);
    io("hashing config", manifest.input(&cmd.common().config))?;
    if let Some(data) = &cfg.data {
        for p in [&data.source, &data.target] {
            io(format!("reading {}", p.display()), manifest.input(p))?;
        }
    }

    let result = dispatch(cmd, &cfg, &out, &mut manifest);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => e.to_string(),
    };
    let written = manifest.finish(&out, status);
    result?;
    io("writing manifest", written)?;
    Ok(())
}

fn dispatch(cmd: Command, cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Ingest { .. } => ingest(cfg, out, m),
        Command::Synth { .. } => synth(cfg, out, m),
        Command::Train { resume, .. } => train(cfg, out, resume, m),
        Command::Evaluate {
            checkpoint, repeats, ..
        } => evaluate_cmd(cfg, &checkpoint, out, repeats, m),
        Command::Predict {
            checkpoint,
            user,
            items,
            out: explicit,
            ..
        } => predict(cfg, &checkpoint, &user, &items, explicit.as_deref().map(|_| out), m),
        Command::Gradcheck { eps, inject_fault, .. } => gradcheck(cfg, eps, inject_fault, out, m),
    }
}

fn emit(m: &mut RunManifest, path: &Path) -> Result<()> {
    io(format!("hashing {}", path.display()), m.output(path))
}

fn ingest(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let run = prepare(cfg)?;
    let pool = run.pool(cfg)?;
    let (src, tgt) = (&run.data.source, &run.data.target);
    let summary = json!({
        "source": { "users": src.num_users(), "items": src.num_items(), "ratings": src.num_ratings() },
        "target": { "users": tgt.num_users(), "items": tgt.num_items(), "ratings": tgt.num_ratings() },
        "overlap_users": run.split.overlap_users.len(),
        "train_users": run.split.train_users.len(),
        "test_users": run.split.test_users.len(),
        "train_pool": pool.train_pool_len(),
        "alpha": run.split.alpha,
        "seed": run.split.seed,
    });
    println!("{:<8} {:>8} {:>8} {:>10}", "domain", "users", "items", "ratings");
    for (name, d) in [("source", src), ("target", tgt)] {
        println!("{name:<8} {:>8} {:>8} {:>10}", d.num_users(), d.num_items(), d.num_ratings());
    }
    println!(
        "overlap {} -> train {} / test {} (alpha {})",
        run.split.overlap_users.len(),
        run.split.train_users.len(),
        run.split.test_users.len(),
        run.split.alpha
    );
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    let split_path = out.join("split.json");
    write_json(&split_path, &run.split)?;
    let test_path = out.join("test_users.txt");
    run.split.write_manifest(&test_path)?;
    for p in [&summary_path, &split_path, &test_path] {
        emit(m, p)?;
    }
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<()> {
    let scfg = cfg.synth.as_ref().expect("checked in preflight");
    let (src, tgt, truth) = generate_synthetic(scfg)?;
    let oracle = oracle_noise_mae(scfg, ORACLE_DRAWS, scfg.seed);
    let paths = [out.join("source.csv"), out.join("target.csv"), out.join("user_latents.csv"), out.join("oracle.json")];
    src.write_csv(&paths[0])?;
    tgt.write_csv(&paths[1])?;
    truth.write_user_latents(&paths[2])?;
    write_json(&paths[3], &oracle)?;
    println!(
        "source {} ratings, target {} ratings; noise MAE floor {:.4} (± {:.4}), unclipped {:.4}",
        src.num_ratings(),
        tgt.num_ratings(),
        oracle.monte_carlo,
        oracle.std_error,
        oracle.analytic
    );
    for p in &paths {
        emit(m, p)?;
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, resume: bool, m: &mut RunManifest) -> Result<()> {
    let run = prepare(cfg)?;
    let latest = out.join("latest.ckpt");
    let log_path = out.join("train_log.jsonl");
    let hash = cfg.hash();
    let mut trainer = if resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        if ck.config_hash != hash {
            return Err(cdrnp::Error::Checkpoint(format!("{} was written by a different config", latest.display())).into());
        }
        let adam = ck
            .optimizer
            .ok_or_else(|| cdrnp::Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let mut log = if log_path.exists() {
            TrainLog::read_jsonl(&log_path)?
        } else {
            TrainLog::default()
        };
        log.records.truncate(ck.epoch);
        if log.records.len() != ck.epoch {
            return Err(cdrnp::Error::Checkpoint("training log is shorter than the checkpoint".into()).into());
        }
        println!("resuming after epoch {}", ck.epoch);
        Trainer::resume(cfg.training(), &run.data, &run.split, ck.model, adam, log)?
    } else {
        Trainer::new(cfg.model, cfg.training(), &run.data, &run.split)?
    };

    println!("{:>5} {:>6} {:>10} {:>10} {:>10} {:>8}", "epoch", "tasks", "L_rec", "L_KL", "L_aux", "secs");
    while !trainer.is_finished() {
        let r = trainer.run_epoch()?;
        println!(
            "{:>5} {:>6} {:>10.5} {:>10.5} {:>10.5} {:>8.2}",
            r.epoch, r.tasks, r.rec, r.kl, r.aux, r.wall_seconds
        );
        checkpoint_of(&trainer, &hash).save(&latest)?;
        trainer.log().write_jsonl(&log_path)?;
    }
    let final_path = out.join("final.ckpt");
    let ck = checkpoint_of(&trainer, &hash);
    ck.save(&final_path)?;
    if !latest.exists() {
        ck.save(&latest)?;
    }
    trainer.log().write_jsonl(&log_path)?;
    for p in [&final_path, &latest, &log_path] {
        emit(m, p)?;
    }
    Ok(())
}

fn checkpoint_of(trainer: &Trainer, hash: &str) -> Checkpoint {
    Checkpoint {
        model: trainer.model().clone(),
        optimizer: Some(trainer.optimizer().clone()),
        epoch: trainer.epochs_done(),
        config_hash: hash.to_string(),
    }
}

fn load_model(path: &Path, run: &Prepared, m: &mut RunManifest) -> Result<Cdrnp> {
    io(format!("reading {}", path.display()), m.input(path))?;
    let ck = Checkpoint::load(path)?;
    if ck.model.vocab != vocab_of(&run.data) {
        return Err(cdrnp::Error::Checkpoint(format!(
            "checkpoint vocabulary {:?} does not match the configured data",
            ck.model.vocab
        ))
        .into());
    }
    Ok(ck.model)
}

fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path, out: &Path, repeats: usize, m: &mut RunManifest) -> Result<()> {
    let run = prepare(cfg)?;
    let model = load_model(checkpoint, &run, m)?;
    let pool = run.pool(cfg)?;
    let hash = cfg.hash();
    let workers = cfg.train.workers;
    let (baseline_mean, baseline) = baseline_report(&pool, cfg.seed, &hash)?;
    let path = out.join("metrics.json");
    if repeats == 1 {
        let report = evaluate(&model, &pool, cfg.seed, &hash, workers)?;
        print!("{}", report.table());
        println!("baseline (mean {baseline_mean:.4}): MAE {:.4}, RMSE {:.4}", baseline.mae, baseline.rmse);
        write_json(&path, &json!({ "cdrnp": report, "baseline": baseline, "baseline_mean": baseline_mean }))?;
    } else {
        let summary = evaluate_repeats(&model, &pool, cfg.seed, repeats, &hash, workers)?;
        println!(
            "{repeats} runs: MAE {:.4} ± {:.4}, RMSE {:.4} ± {:.4}",
            summary.mae_mean, summary.mae_std, summary.rmse_mean, summary.rmse_std
        );
        println!("baseline (mean {baseline_mean:.4}): MAE {:.4}, RMSE {:.4}", baseline.mae, baseline.rmse);
        write_json(&path, &json!({ "cdrnp": summary, "baseline": baseline, "baseline_mean": baseline_mean }))?;
    }
    emit(m, &path)
}

fn predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    user: &str,
    items: &[String],
    out: Option<&Path>,
    m: &mut RunManifest,
) -> Result<()> {
    let run = prepare(cfg)?;
    let model = load_model(checkpoint, &run, m)?;
    let pool = run.pool(cfg)?;
    let ranked = predict_user(&model, &run.data, &pool, user, items, cfg.seed)?;
    println!("{:>4} {:<20} {:>8}", "rank", "item", "rating");
    for (i, (item, r)) in ranked.iter().enumerate() {
        println!("{:>4} {item:<20} {r:>8.4}", i + 1);
    }
    if let Some(dir) = out {
        let path = dir.join("predictions.json");
        let rows: Vec<_> = ranked.iter().map(|(i, r)| json!({ "item": i, "rating": r })).collect();
        write_json(&path, &json!({ "user": user, "ranking": rows }))?;
        emit(m, &path)?;
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, eps: f64, inject_fault: bool, out: &Path, m: &mut RunManifest) -> Result<()> {
    let run = prepare(cfg)?;
    let pool = run.pool(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let task = pool.training_task(&mut rng)?;
    let src = run.data.source.ratings();
    let n_aux = cfg.train.aux_batch.clamp(1, GRADCHECK_MAX_DIM).min(src.len());
    let aux: Vec<_> = index::sample(&mut rng, src.len(), n_aux)
        .into_iter()
        .map(|i| (src[i].user, src[i].item, src[i].rating))
        .collect();
    let mut model = Cdrnp::init(cfg.model, vocab_of(&run.data), &mut init_rng(cfg.seed))?;
    let fault = inject_fault.then_some(Fault::TanhBackward);
    let weights = LossWeights::from(&cfg.training());
    let report = check_model_gradients(&mut model, weights, &task, &aux, eps, cfg.seed, fault)?;

    println!("{:<24} {:>12} {:>8} {:>8}", "parameter", "max rel err", "checked", "skipped");
    for p in &report.per_param {
        println!("{:<24} {:>12.3e} {:>8} {:>8}", p.name, p.max_rel_error, p.checked, p.skipped);
    }
    println!("overall {:.3e} (eps {eps:e}, {} kink coordinates skipped)", report.max_rel_error, report.skipped);

    let path = out.join("gradcheck.json");
    let params: Vec<_> = report
        .per_param
        .iter()
        .map(|p| json!({ "name": p.name, "max_rel_error": p.max_rel_error, "checked": p.checked, "skipped": p.skipped }))
        .collect();
    write_json(
        &path,
        &json!({ "eps": eps, "max_rel_error": report.max_rel_error, "skipped": report.skipped, "params": params }),
    )?;
    emit(m, &path)?;

    match report.worst() {
        Some(w) if w.max_rel_error > GRADCHECK_TOLERANCE => Err(CliError::GradCheck {
            param: w.name.clone(),
            error: w.max_rel_error,
        }),
        _ => Ok(()),
    }
}
