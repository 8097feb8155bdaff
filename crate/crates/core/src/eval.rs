//! Cold-start scoring of a trained model.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CrossDomain;
use crate::error::{Error, Result};
use crate::model::Cdrnp;
use crate::tasks::{Task, TaskPool};

const EVAL_STREAM_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

/// `(mae, rmse)` of aligned predictions and targets.
pub fn compute_metrics(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::contract(format!(
            "metrics over {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len() as f64;
    let (abs, sq) = predictions
        .iter()
        .zip(targets)
        .fold((0.0, 0.0), |(a, s), (p, t)| (a + (p - t).abs(), s + (p - t) * (p - t)));
    Ok((abs / n, (sq / n).sqrt()))
}

/// Predictions and ground truth for one cold-start user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScore {
    pub user: String,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Averaged over all query examples.
    pub mae: f64,
    pub rmse: f64,
    /// Per-user metrics averaged over users.
    pub macro_mae: f64,
    pub macro_rmse: f64,
    pub n_examples: usize,
    pub n_users: usize,
    pub n_skipped_users: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_scores(scores: &[UserScore], skipped: usize, config_hash: &str, seed: u64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Evaluation(format!("all {skipped} test users were skipped")));
        }
        let mut all_p = Vec::new();
        let mut all_t = Vec::new();
        let (mut macro_mae, mut macro_rmse) = (0.0, 0.0);
        for s in scores {
            let (m, r) = compute_metrics(&s.predictions, &s.targets)?;
            macro_mae += m;
            macro_rmse += r;
            all_p.extend_from_slice(&s.predictions);
            all_t.extend_from_slice(&s.targets);
        }
        let (mae, rmse) = compute_metrics(&all_p, &all_t)?;
        let users = scores.len() as f64;
        Ok(MetricsReport {
            mae,
            rmse,
            macro_mae: macro_mae / users,
            macro_rmse: macro_rmse / users,
            n_examples: all_p.len(),
            n_users: scores.len(),
            n_skipped_users: skipped,
            config_hash: config_hash.to_string(),
            seed,
        })
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        format!(
            "{:<12} {:>10} {:>10}\n{:<12} {:>10.4} {:>10.4}\n{:<12} {:>10.4} {:>10.4}\nusers {} (skipped {}), examples {}\n",
            "", "MAE", "RMSE", "micro", self.mae, self.rmse, "macro", self.macro_mae, self.macro_rmse,
            self.n_users, self.n_skipped_users, self.n_examples
        )
    }
}

/// Support-sampling rng for the `index`-th test user.
pub fn user_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM_KEY);
    rng.set_stream(index as u64);
    rng
}

/// Scores every test user with `predict`. Users without target ratings are
/// skipped. Each user's support rng depends only on the user's position in
/// the sorted test list, so the result does not depend on scheduling.
pub fn score_users<F>(pool: &TaskPool, seed: u64, workers: usize, predict: F) -> Result<(Vec<UserScore>, usize)>
where
    F: Fn(&Task, &mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
{
    let users = pool.test_users();
    let one = |i: usize| -> Result<Option<UserScore>> {
        let mut rng = user_rng(seed, i);
        let Some(task) = pool.testing_task(&users[i], &mut rng)? else {
            return Ok(None);
        };
        let predictions = predict(&task, &mut rng)?;
        Ok(Some(UserScore {
            user: users[i].clone(),
            predictions,
            targets: task.hidden,
        }))
    };
    let results: Vec<Result<Option<UserScore>>> = if workers <= 1 {
        (0..users.len()).map(one).collect()
    } else {
        let chunk = users.len().div_ceil(workers).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..users.len())
                .step_by(chunk)
                .map(|start| {
                    let one = &one;
                    s.spawn(move || (start..(start + chunk).min(users.len())).map(one).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut scores = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(s) => scores.push(s),
            None => skipped += 1,
        }
    }
    Ok((scores, skipped))
}

/// Runs one testing episode per cold-start user and aggregates the errors.
pub fn evaluate(model: &Cdrnp, pool: &TaskPool, seed: u64, config_hash: &str, workers: usize) -> Result<MetricsReport> {
    let (scores, skipped) = score_users(pool, seed, workers, |task, rng| model.predict(task, rng))?;
    MetricsReport::from_scores(&scores, skipped, config_hash, seed)
}

/// Mean of the target ratings visible during training.
pub fn baseline_mean(pool: &TaskPool) -> Result<f64> {
    let (sum, n) = pool.train_ratings().fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
    if n == 0 {
        return Err(Error::Evaluation("no visible target ratings for the baseline".into()));
    }
    Ok(sum / n as f64)
}

/// Report for predicting the training mean everywhere, over the same
/// query sets as [`evaluate`].
pub fn baseline_report(pool: &TaskPool, seed: u64, config_hash: &str) -> Result<(f64, MetricsReport)> {
    let mean = baseline_mean(pool)?;
    let (scores, skipped) = score_users(pool, seed, 1, |task, _| Ok(vec![mean; task.query.len()]))?;
    Ok((mean, MetricsReport::from_scores(&scores, skipped, config_hash, seed)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub runs: Vec<MetricsReport>,
}

/// Re-evaluates with seeds `seed, seed + 1, …` and reports mean and
/// sample standard deviation.
pub fn evaluate_repeats(
    model: &Cdrnp,
    pool: &TaskPool,
    seed: u64,
    repeats: usize,
    config_hash: &str,
    workers: usize,
) -> Result<RepeatSummary> {
    if repeats == 0 {
        return Err(Error::contract("repeats must be positive"));
    }
    let runs = (0..repeats as u64)
        .map(|r| evaluate(model, pool, seed.wrapping_add(r), config_hash, workers))
        .collect::<Result<Vec<_>>>()?;
    let stats = |f: fn(&MetricsReport) -> f64| {
        let n = runs.len() as f64;
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (mae_mean, mae_std) = stats(|r| r.mae);
    let (rmse_mean, rmse_std) = stats(|r| r.rmse);
    Ok(RepeatSummary {
        mae_mean,
        mae_std,
        rmse_mean,
        rmse_std,
        runs,
    })
}

/// Ranks target candidates for a user with source history. Duplicate ids
/// keep their first occurrence; ties are broken by item index.
pub fn predict_user(
    model: &Cdrnp,
    data: &CrossDomain,
    pool: &TaskPool,
    user_id: &str,
    candidates: &[String],
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let user = data.source.user(user_id).ok_or_else(|| Error::Lookup {
        kind: "source user",
        id: user_id.to_string(),
    })?;
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for id in candidates {
        let item = data.target.item(id).ok_or_else(|| Error::Lookup {
            kind: "target item",
            id: id.clone(),
        })?;
        if seen.insert(item) {
            items.push(item);
        }
    }
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM_KEY);
    let task = pool.prediction_task(user, &items, &mut rng)?;
    let scores = model.predict(&task, &mut rng)?;
    let mut ranked: Vec<(usize, f64)> = items.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .map(|(i, s)| (data.target.item_id(i).to_string(), s))
        .collect())
}
