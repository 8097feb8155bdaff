//! Episodic training: one optimizer step per sampled task.

mod loss;
mod optim;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{auxiliary_source_loss, kl_diag_gaussian, kl_divergence, mse, task_loss, LossNodes};
pub use optim::Adam;

use crate::autodiff::{gradient_check, Fault, GradCheckReport, Gradients, Tape, Var};
use crate::data::{CrossDomain, CrossDomainSplit};
use crate::error::{Error, Result};
use crate::model::{Cdrnp, ModelConfig, Vocab};
use crate::tasks::{Phase, Task, TaskConfig, TaskPool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// KL weight λ in `[0, 1]`.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Defaults to enough tasks to cover the training pool once.
    pub tasks_per_epoch: Option<usize>,
    pub support_size: usize,
    pub query_size: usize,
    pub history_len: usize,
    pub aux_weight: f64,
    /// Source ratings per auxiliary minibatch.
    pub aux_batch: usize,
    /// Keep held-out users out of the auxiliary objective.
    pub freeze_cold_users: bool,
    /// Tasks evaluated concurrently per optimizer step.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 0.1,
            learning_rate: 0.01,
            epochs: 10,
            tasks_per_epoch: None,
            support_size: 40,
            query_size: 40,
            history_len: 20,
            aux_weight: 0.1,
            aux_batch: 64,
            freeze_cold_users: false,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} not in [0, 1]", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad(format!("aux_weight {} must be non-negative", self.aux_weight));
        }
        if self.epochs == 0
            || self.support_size == 0
            || self.query_size == 0
            || self.history_len == 0
            || self.workers == 0
            || self.tasks_per_epoch == Some(0)
        {
            return bad("epochs, task sizes, workers and tasks_per_epoch must be positive".into());
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            support_size: self.support_size,
            query_size: self.query_size,
            history_len: self.history_len,
        }
    }
}

/// Means over one epoch's tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub tasks: usize,
    pub rec: f64,
    pub kl: f64,
    pub aux: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(TrainLog { records })
    }
}

/// Embedding table sizes implied by a dataset pair.
pub fn vocab_of(data: &CrossDomain) -> Vocab {
    Vocab {
        users: data.num_user_rows(),
        src_items: data.source.num_items(),
        tgt_items: data.target.num_items(),
    }
}

/// Rng for model initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rng for one epoch; a function of `(seed, epoch)` only, so resuming
/// reproduces an uninterrupted run.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// Wall clock; reads zero where the platform has no clock (wasm32).
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

struct Outcome {
    grads: Gradients,
    rec: f64,
    kl: f64,
    aux: f64,
}

struct Job {
    task: Task,
    aux: Vec<(usize, usize, f64)>,
    seed: u64,
}

/// Loss weights shared by training and gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub aux_weight: f64,
}

impl From<&TrainingConfig> for LossWeights {
    fn from(cfg: &TrainingConfig) -> Self {
        LossWeights {
            lambda: cfg.lambda,
            aux_weight: cfg.aux_weight,
        }
    }
}

/// Loss node and its `(rec, kl, aux)` values.
pub struct TrainingLoss {
    pub total: Var,
    pub rec: f64,
    pub kl: f64,
    pub aux: f64,
}

/// Records `L_rec + λ·L_KL + w_aux·L_aux` for one task on `tape`.
pub fn training_loss<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    model: &Cdrnp,
    weights: LossWeights,
    task: &Task,
    aux_batch: &[(usize, usize, f64)],
    rng: &mut R,
) -> Result<TrainingLoss> {
    let fwd = model.forward_task(tape, task, Phase::Training, rng)?;
    let targets = task
        .query
        .iter()
        .map(|e| e.rating.ok_or_else(|| Error::contract("training query without a rating")))
        .collect::<Result<Vec<_>>>()?;
    let parts = task_loss(tape, &fwd.predictions, &targets, &fwd.latents, weights.lambda)?;
    let mut total = parts.total;
    let mut aux = 0.0;
    if weights.aux_weight > 0.0 && !aux_batch.is_empty() {
        let a = auxiliary_source_loss(tape, model, aux_batch)?;
        aux = tape.scalar(a);
        let weighted = tape.scale(a, weights.aux_weight)?;
        total = tape.add(total, weighted)?;
    }
    Ok(TrainingLoss {
        total,
        rec: tape.scalar(parts.rec),
        kl: tape.scalar(parts.kl),
        aux,
    })
}

/// Finite-difference check of the full training loss over every model
/// parameter. The latent noise is frozen by reseeding with `seed` on every
/// evaluation.
pub fn check_model_gradients(
    model: &mut Cdrnp,
    weights: LossWeights,
    task: &Task,
    aux_batch: &[(usize, usize, f64)],
    eps: f64,
    seed: u64,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let mut store = std::mem::take(&mut model.store);
    let report = gradient_check(&mut store, eps, |tape| {
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(training_loss(tape, model, weights, task, aux_batch, &mut rng)?.total)
    });
    model.store = store;
    report
}

fn task_outcome(model: &Cdrnp, cfg: &TrainingConfig, job: &Job) -> Result<Outcome> {
    let mut tape = Tape::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let loss = training_loss(&mut tape, model, cfg.into(), &job.task, &job.aux, &mut rng)?;
    let grads = tape.backward(loss.total)?;
    Ok(Outcome {
        grads,
        rec: loss.rec,
        kl: loss.kl,
        aux: loss.aux,
    })
}

/// Stateful epoch loop; owns the model and optimizer between epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainingConfig,
    pool: TaskPool,
    aux_pool: Vec<(usize, usize, f64)>,
    model: Cdrnp,
    adam: Adam,
    log: TrainLog,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainingConfig, data: &CrossDomain, split: &CrossDomainSplit) -> Result<Self> {
        let model = Cdrnp::init(model_cfg, vocab_of(data), &mut init_rng(cfg.seed))?;
        let adam = Adam::new(&model.store, cfg.learning_rate);
        Self::resume(cfg, data, split, model, adam, TrainLog::default())
    }

    /// Continues from saved state; `log` holds the completed epochs.
    pub fn resume(
        cfg: TrainingConfig,
        data: &CrossDomain,
        split: &CrossDomainSplit,
        model: Cdrnp,
        adam: Adam,
        log: TrainLog,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.vocab != vocab_of(data) {
            return Err(Error::Checkpoint(format!(
                "model vocabulary {:?} does not match data {:?}",
                model.vocab,
                vocab_of(data)
            )));
        }
        let pool = TaskPool::new(data, split, cfg.task_config())?;
        let need = cfg.support_size + cfg.query_size;
        if pool.train_pool_len() < need {
            return Err(Error::InsufficientPool {
                required: need,
                available: pool.train_pool_len(),
            });
        }
        let frozen: std::collections::HashSet<&str> = if cfg.freeze_cold_users {
            split.test_users.iter().map(String::as_str).collect()
        } else {
            Default::default()
        };
        let src = &data.source;
        let aux_pool = src
            .ratings()
            .iter()
            .filter(|r| !frozen.contains(src.user_id(r.user)))
            .map(|r| (r.user, r.item, r.rating))
            .collect();
        Ok(Trainer {
            cfg,
            pool,
            aux_pool,
            model,
            adam,
            log,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Cdrnp {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn pool(&self) -> &TaskPool {
        &self.pool
    }

    pub fn epochs_done(&self) -> usize {
        self.log.records.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.cfg.epochs
    }

    pub fn tasks_per_epoch(&self) -> usize {
        self.cfg.tasks_per_epoch.unwrap_or_else(|| {
            let per_task = self.cfg.support_size + self.cfg.query_size;
            self.pool.train_pool_len().div_ceil(per_task).max(1)
        })
    }

    fn next_job<R: Rng>(&self, rng: &mut R) -> Result<Job> {
        let task = self.pool.training_task(rng)?;
        let aux = if self.cfg.aux_weight > 0.0 && !self.aux_pool.is_empty() {
            let n = self.cfg.aux_batch.min(self.aux_pool.len());
            index::sample(rng, self.aux_pool.len(), n)
                .into_iter()
                .map(|i| self.aux_pool[i])
                .collect()
        } else {
            Vec::new()
        };
        Ok(Job {
            task,
            aux,
            seed: rng.random(),
        })
    }

    /// Runs the next epoch and appends its record to the log.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epochs_done() + 1;
        let start = Stopwatch::start();
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let n_tasks = self.tasks_per_epoch();
        let (mut rec, mut kl, mut aux) = (0.0, 0.0, 0.0);

        let mut done = 0;
        while done < n_tasks {
            let group = self.cfg.workers.min(n_tasks - done);
            let jobs = (0..group).map(|_| self.next_job(&mut rng)).collect::<Result<Vec<_>>>()?;
            let outcomes = self.outcomes(&jobs);
            for (k, outcome) in outcomes.into_iter().enumerate() {
                let o = outcome.map_err(|e| diverged(e, epoch, done + k, (f64::NAN, f64::NAN, f64::NAN)))?;
                if !(o.rec.is_finite() && o.kl.is_finite() && o.aux.is_finite()) {
                    return Err(diverged_at(epoch, done + k, (o.rec, o.kl, o.aux)));
                }
                rec += o.rec;
                kl += o.kl;
                aux += o.aux;
                self.model.store.accumulate(&o.grads);
            }
            let last = done + group - 1;
            self.adam
                .step(&mut self.model.store)
                .map_err(|e| diverged(e, epoch, last, (rec, kl, aux)))?;
            done += group;
        }

        let n = n_tasks as f64;
        let record = EpochRecord {
            epoch,
            tasks: n_tasks,
            rec: rec / n,
            kl: kl / n,
            aux: aux / n,
            wall_seconds: start.seconds(),
        };
        self.log.records.push(record.clone());
        Ok(record)
    }

    fn outcomes(&self, jobs: &[Job]) -> Vec<Result<Outcome>> {
        if jobs.len() == 1 {
            return vec![task_outcome(&self.model, &self.cfg, &jobs[0])];
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|job| s.spawn(move || task_outcome(&self.model, &self.cfg, job)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    }

    pub fn finish(self) -> (Cdrnp, TrainLog) {
        (self.model, self.log)
    }
}

fn diverged_at(epoch: usize, task: usize, (rec, kl, aux): (f64, f64, f64)) -> Error {
    Error::Diverged {
        epoch,
        task,
        rec,
        kl,
        aux,
    }
}

fn diverged(e: Error, epoch: usize, task: usize, parts: (f64, f64, f64)) -> Error {
    match e {
        Error::NonFinite(_) => diverged_at(epoch, task, parts),
        other => other,
    }
}

/// Trains for `cfg.epochs` epochs from a fresh initialisation.
pub fn train(
    model_cfg: ModelConfig,
    cfg: TrainingConfig,
    data: &CrossDomain,
    split: &CrossDomainSplit,
) -> Result<(Cdrnp, TrainLog)> {
    let mut trainer = Trainer::new(model_cfg, cfg, data, split)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_cold_start, DomainDataset, DomainTag, Interaction};

    fn toy() -> (CrossDomain, CrossDomainSplit) {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for u in 0..12 {
            for i in 0..6 {
                let r = ((u * 7 + i * 3) % 5 + 1) as f64;
                src.push(Interaction::new(format!("u{u}"), format!("s{i}"), r, (u * 10 + i) as u64).unwrap());
                let r = ((u + i) % 5 + 1) as f64;
                tgt.push(Interaction::new(format!("u{u}"), format!("t{i}"), r, (u * 10 + i) as u64).unwrap());
            }
        }
        let data = CrossDomain::new(
            DomainDataset::from_interactions(DomainTag::Source, src, 1).unwrap(),
            DomainDataset::from_interactions(DomainTag::Target, tgt, 1).unwrap(),
        );
        let split = split_cold_start(&data.overlap().0, 0.25, 3).unwrap();
        (data, split)
    }

    fn tiny() -> (ModelConfig, TrainingConfig) {
        let m = ModelConfig {
            d: 3,
            hidden: 8,
            ..ModelConfig::default()
        };
        let t = TrainingConfig {
            epochs: 2,
            tasks_per_epoch: Some(4),
            support_size: 5,
            query_size: 4,
            history_len: 4,
            aux_batch: 8,
            ..TrainingConfig::default()
        };
        (m, t)
    }

    #[test]
    fn one_record_per_epoch() {
        let (data, split) = toy();
        let (m, t) = tiny();
        let (_, log) = train(m, t, &data, &split).unwrap();
        assert_eq!(log.records.len(), 2);
        assert!(log.records.iter().all(|r| r.rec.is_finite() && r.kl >= 0.0 && r.tasks == 4));
    }

    #[test]
    fn deterministic_single_worker() {
        let (data, split) = toy();
        let (m, t) = tiny();
        let a = train(m, t.clone(), &data, &split).unwrap();
        let b = train(m, t, &data, &split).unwrap();
        assert_eq!(a.0.store.checksum(), b.0.store.checksum());
        assert_eq!(a.1.records[1].rec, b.1.records[1].rec);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (data, split) = toy();
        let (m, t) = tiny();
        let (full, _) = train(m, t.clone(), &data, &split).unwrap();

        let mut first = Trainer::new(m, t.clone(), &data, &split).unwrap();
        first.run_epoch().unwrap();
        let adam = first.optimizer().clone();
        let log = first.log().clone();
        let (model, _) = first.finish();
        let mut second = Trainer::resume(t, &data, &split, model, adam, log).unwrap();
        second.run_epoch().unwrap();
        assert!(second.is_finished());
        assert_eq!(second.model().store.checksum(), full.store.checksum());
    }

    #[test]
    fn workers_change_grouping_not_validity() {
        let (data, split) = toy();
        let (m, mut t) = tiny();
        t.workers = 2;
        let a = train(m, t.clone(), &data, &split).unwrap();
        let b = train(m, t, &data, &split).unwrap();
        assert_eq!(a.0.store.checksum(), b.0.store.checksum());
    }

    #[test]
    fn zero_aux_weight_leaves_aux_head_untouched() {
        let (data, split) = toy();
        let (m, mut t) = tiny();
        t.aux_weight = 0.0;
        let init = Cdrnp::init(m, vocab_of(&data), &mut init_rng(t.seed)).unwrap();
        let (trained, log) = train(m, t, &data, &split).unwrap();
        assert!(log.records.iter().all(|r| r.aux == 0.0));
        for name in ["aux.0.w", "aux.1.b"] {
            let a = init.store.value(init.store.id(name).unwrap());
            let b = trained.store.value(trained.store.id(name).unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn aux_loss_decreases() {
        let (data, _) = toy();
        let (m, _) = tiny();
        let mut model = Cdrnp::init(m, vocab_of(&data), &mut init_rng(1)).unwrap();
        let batch: Vec<_> = data.source.ratings().iter().map(|r| (r.user, r.item, r.rating)).collect();
        let mut adam = Adam::new(&model.store, 0.01);
        let eval = |model: &Cdrnp| {
            let mut tape = Tape::new(&model.store);
            let l = auxiliary_source_loss(&mut tape, model, &batch).unwrap();
            tape.scalar(l)
        };
        let before = eval(&model);
        for _ in 0..200 {
            let grads = {
                let mut tape = Tape::new(&model.store);
                let l = auxiliary_source_loss(&mut tape, &model, &batch).unwrap();
                tape.backward(l).unwrap()
            };
            model.store.accumulate(&grads);
            adam.step(&mut model.store).unwrap();
        }
        assert!(eval(&model) < before);
    }

    #[test]
    fn full_loss_gradients_match_differences() {
        let (data, split) = toy();
        let (m, t) = tiny();
        let pool = TaskPool::new(&data, &split, t.task_config()).unwrap();
        let task = pool.training_task(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let aux: Vec<_> = data.source.ratings()[..6].iter().map(|r| (r.user, r.item, r.rating)).collect();
        let mut model = Cdrnp::init(m, vocab_of(&data), &mut init_rng(0)).unwrap();
        let before = model.store.checksum();
        let w = LossWeights::from(&t);
        let report = check_model_gradients(&mut model, w, &task, &aux, 1e-5, 0, None).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{:?}", report.worst());
        assert_eq!(model.store.checksum(), before);
        let faulty = check_model_gradients(&mut model, w, &task, &aux, 1e-5, 0, Some(Fault::TanhBackward)).unwrap();
        assert!(faulty.max_rel_error > 1e-4);
    }

    #[test]
    fn insufficient_pool_is_reported() {
        let (data, split) = toy();
        let (m, mut t) = tiny();
        t.support_size = 500;
        assert!(matches!(
            Trainer::new(m, t, &data, &split),
            Err(Error::InsufficientPool { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainingConfig { lambda: 1.5, ..Default::default() },
            TrainingConfig { epochs: 0, ..Default::default() },
            TrainingConfig { workers: 0, ..Default::default() },
            TrainingConfig { tasks_per_epoch: Some(0), ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        assert!(TrainingConfig::default().validate().is_ok());
    }

    #[test]
    fn log_round_trip() {
        let (data, split) = toy();
        let (m, t) = tiny();
        let (_, log) = train(m, t, &data, &split).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        log.write_jsonl(&path).unwrap();
        assert_eq!(TrainLog::read_jsonl(&path).unwrap(), log);
    }
}
