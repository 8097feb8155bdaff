//! Browser demo: trains a small model on synthetic ratings and exposes
//! training progress, history attention and cold-start predictions.

use cdrnp::config::RunConfig;
use cdrnp::eval::{baseline_report, evaluate};
use cdrnp::model::ModelConfig;
use cdrnp::pipeline::{prepare, Prepared};
use cdrnp::synth::SynthConfig;
use cdrnp::tasks::TaskPool;
use cdrnp::training::{Trainer, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct EpochView {
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub aux: f64,
    pub mae: f64,
    pub rmse: f64,
    pub baseline_mae: f64,
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    pub item: String,
    pub rating: f64,
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct PredictionView {
    pub item: String,
    pub predicted: f64,
    pub actual: f64,
}

/// Demo state without any JavaScript types, so it runs natively too.
pub struct DemoState {
    cfg: RunConfig,
    run: Prepared,
    pool: TaskPool,
    trainer: Trainer,
    baseline_mae: f64,
}

impl DemoState {
    pub fn new(n_users: usize, seed: u64) -> cdrnp::Result<Self> {
        let cfg = RunConfig {
            seed,
            alpha: 0.2,
            data: None,
            synth: Some(SynthConfig {
                n_users,
                n_src_items: 60,
                n_tgt_items: 60,
                ratings_per_user: 15,
                seed,
                ..SynthConfig::default()
            }),
            model: ModelConfig {
                d: 4,
                hidden: 32,
                ..ModelConfig::default()
            },
            train: TrainingConfig {
                epochs: usize::MAX,
                tasks_per_epoch: Some(100),
                support_size: 20,
                query_size: 20,
                history_len: 10,
                aux_weight: 1.0,
                ..TrainingConfig::default()
            },
        };
        let run = prepare(&cfg)?;
        let pool = run.pool(&cfg)?;
        let trainer = Trainer::new(cfg.model, cfg.training(), &run.data, &run.split)?;
        let baseline_mae = baseline_report(&pool, seed, "")?.1.mae;
        Ok(DemoState {
            cfg,
            run,
            pool,
            trainer,
            baseline_mae,
        })
    }

    pub fn train_epoch(&mut self) -> cdrnp::Result<EpochView> {
        let r = self.trainer.run_epoch()?;
        let report = evaluate(self.trainer.model(), &self.pool, self.cfg.seed, "", 1)?;
        Ok(EpochView {
            epoch: r.epoch,
            rec: r.rec,
            kl: r.kl,
            aux: r.aux,
            mae: report.mae,
            rmse: report.rmse,
            baseline_mae: self.baseline_mae,
        })
    }

    pub fn cold_users(&self) -> &[String] {
        &self.run.split.test_users
    }

    fn source_user(&self, user: &str) -> cdrnp::Result<usize> {
        self.run.data.source.user(user).ok_or_else(|| cdrnp::Error::Lookup {
            kind: "source user",
            id: user.to_string(),
        })
    }

    /// Attention over the user's most recent source ratings.
    pub fn attention(&self, user: &str) -> cdrnp::Result<Vec<AttentionView>> {
        let u = self.source_user(user)?;
        let src = &self.run.data.source;
        let history = self.pool.history(u);
        let weights = self.trainer.model().history_attention(history)?;
        let recent = &src.user_ratings(u)[src.user_ratings(u).len() - history.len()..];
        Ok(recent
            .iter()
            .zip(weights)
            .map(|(r, weight)| AttentionView {
                item: src.item_id(r.item).to_string(),
                rating: r.rating,
                weight,
            })
            .collect())
    }

    /// Predicted against held-out target ratings of a cold-start user.
    pub fn predict(&self, user: &str) -> cdrnp::Result<Vec<PredictionView>> {
        let idx = self
            .cold_users()
            .iter()
            .position(|u| u == user)
            .ok_or_else(|| cdrnp::Error::Lookup {
                kind: "cold-start user",
                id: user.to_string(),
            })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ idx as u64);
        let task = self
            .pool
            .testing_task(user, &mut rng)?
            .ok_or_else(|| cdrnp::Error::Evaluation(format!("{user} has no target ratings")))?;
        let preds = self.trainer.model().predict(&task, &mut rng)?;
        let tgt = &self.run.data.target;
        Ok(task
            .query
            .iter()
            .zip(preds.iter().zip(&task.hidden))
            .map(|(q, (&predicted, &actual))| PredictionView {
                item: tgt.item_id(q.candidate).to_string(),
                predicted,
                actual,
            })
            .collect())
    }
}

fn js(e: cdrnp::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("view serialises")
}

#[wasm_bindgen]
pub struct Demo(DemoState);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(n_users: u32, seed: u32) -> Result<Demo, JsError> {
        DemoState::new(n_users as usize, u64::from(seed)).map(Demo).map_err(js)
    }

    /// One epoch, then a cold-start evaluation. JSON [`EpochView`].
    #[wasm_bindgen(js_name = trainEpoch)]
    pub fn train_epoch(&mut self) -> Result<String, JsError> {
        self.0.train_epoch().map(|v| to_json(&v)).map_err(js)
    }

    /// JSON array of held-out user ids.
    #[wasm_bindgen(js_name = coldUsers)]
    pub fn cold_users(&self) -> String {
        to_json(&self.0.cold_users())
    }

    /// JSON array of [`AttentionView`].
    pub fn attention(&self, user: &str) -> Result<String, JsError> {
        self.0.attention(user).map(|v| to_json(&v)).map_err(js)
    }

    /// JSON array of [`PredictionView`].
    pub fn predict(&self, user: &str) -> Result<String, JsError> {
        self.0.predict(user).map(|v| to_json(&v)).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_trains_and_answers() {
        let mut d = DemoState::new(60, 1).unwrap();
        let first = d.train_epoch().unwrap();
        let second = d.train_epoch().unwrap();
        assert_eq!((first.epoch, second.epoch), (1, 2));
        assert!(second.mae.is_finite() && second.baseline_mae > 0.0);

        let user = d.cold_users()[0].clone();
        let att = d.attention(&user).unwrap();
        assert_eq!(att.len(), 10);
        assert!((att.iter().map(|a| a.weight).sum::<f64>() - 1.0).abs() < 1e-9);

        let preds = d.predict(&user).unwrap();
        assert_eq!(preds.len(), 15);
        assert!(d.predict("nobody").is_err());
        assert!(d.attention("nobody").is_err());
    }
}
