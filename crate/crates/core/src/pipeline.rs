//! Glue from a [`RunConfig`] to split, trained model and report.

use crate::config::RunConfig;
use crate::data::{load_ratings, split_cold_start, CrossDomain, CrossDomainSplit, DomainTag};
use crate::error::Result;
use crate::eval::{baseline_report, evaluate, MetricsReport};
use crate::model::Cdrnp;
use crate::synth::{generate_synthetic, GroundTruth};
use crate::tasks::TaskPool;
use crate::training::{train, TrainLog};

/// Loaded data and the cold-start split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: CrossDomain,
    pub split: CrossDomainSplit,
    pub truth: Option<GroundTruth>,
}

impl Prepared {
    pub fn pool(&self, cfg: &RunConfig) -> Result<TaskPool> {
        TaskPool::new(&self.data, &self.split, cfg.training().task_config())
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (data, truth) = match (&cfg.data, &cfg.synth) {
        (Some(d), _) => {
            let source = load_ratings(&d.source, DomainTag::Source, d.min_count)?;
            let target = load_ratings(&d.target, DomainTag::Target, d.min_count)?;
            (CrossDomain::new(source, target), None)
        }
        (None, Some(s)) => {
            let (source, target, truth) = generate_synthetic(s)?;
            (CrossDomain::new(source, target), Some(truth))
        }
        (None, None) => unreachable!("validated"),
    };
    let split = split_cold_start(&data.overlap().0, cfg.alpha, cfg.seed)?;
    Ok(Prepared { data, split, truth })
}

/// Outcome of a full train-and-evaluate run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Cdrnp,
    pub log: TrainLog,
    pub report: MetricsReport,
    pub baseline: MetricsReport,
    pub baseline_mean: f64,
}

pub fn train_and_evaluate(cfg: &RunConfig, prepared: &Prepared) -> Result<RunOutcome> {
    let (model, log) = train(cfg.model, cfg.training(), &prepared.data, &prepared.split)?;
    let pool = prepared.pool(cfg)?;
    let hash = cfg.hash();
    let report = evaluate(&model, &pool, cfg.seed, &hash, cfg.train.workers)?;
    let (baseline_mean, baseline) = baseline_report(&pool, cfg.seed, &hash)?;
    Ok(RunOutcome {
        model,
        log,
        report,
        baseline,
        baseline_mean,
    })
}
