//! Meta-learning episodes: a support set the model conditions on and a
//! query set it predicts.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{history_of, CrossDomain, CrossDomainSplit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Testing,
}

/// `(user, source history, target candidate)` with its rating when visible.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingExample {
    /// Dense source-domain user index (also the user-embedding row).
    pub user: usize,
    /// Source item indices, oldest first. Never empty.
    pub history: Vec<usize>,
    /// Dense target-domain item index.
    pub candidate: usize,
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: Vec<RatingExample>,
    pub query: Vec<RatingExample>,
    pub phase: Phase,
    /// Ground truth for testing-phase queries, aligned with `query`.
    /// Only the scorer reads it.
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub support_size: usize,
    pub query_size: usize,
    pub history_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            support_size: 40,
            query_size: 40,
            history_len: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Triple {
    user: usize,
    item: usize,
    rating: f64,
}

/// Precomputed sampling pools for one split.
#[derive(Debug, Clone)]
pub struct TaskPool {
    cfg: TaskConfig,
    histories: Vec<Vec<usize>>,
    train: Vec<Triple>,
    test: HashMap<String, (usize, Vec<(usize, f64)>)>,
    test_order: Vec<String>,
}

impl TaskPool {
    pub fn new(data: &CrossDomain, split: &CrossDomainSplit, cfg: TaskConfig) -> Result<Self> {
        if cfg.support_size == 0 || cfg.query_size == 0 || cfg.history_len == 0 {
            return Err(Error::contract("task sizes must be positive"));
        }
        let (src, tgt) = (&data.source, &data.target);
        let histories = (0..src.num_users())
            .map(|u| history_of(src, u, cfg.history_len).iter().map(|r| r.item).collect())
            .collect();

        let lookup = |id: &str| -> Result<(usize, usize)> {
            let s = src.user(id).ok_or_else(|| Error::Lookup {
                kind: "source user",
                id: id.to_string(),
            })?;
            let t = tgt.user(id).ok_or_else(|| Error::Lookup {
                kind: "target user",
                id: id.to_string(),
            })?;
            Ok((s, t))
        };

        let mut train = Vec::new();
        for id in &split.train_users {
            let (s, t) = lookup(id)?;
            for (item, rating) in latest_per_item(tgt.user_ratings(t)) {
                train.push(Triple { user: s, item, rating });
            }
        }

        let mut test = HashMap::new();
        for id in &split.test_users {
            let s = src.user(id).ok_or_else(|| Error::Lookup {
                kind: "source user",
                id: id.clone(),
            })?;
            let targets = tgt
                .user(id)
                .map(|t| latest_per_item(tgt.user_ratings(t)))
                .unwrap_or_default();
            test.insert(id.clone(), (s, targets));
        }

        Ok(TaskPool {
            cfg,
            histories,
            train,
            test,
            test_order: split.test_users.clone(),
        })
    }

    pub fn config(&self) -> TaskConfig {
        self.cfg
    }

    /// Number of visible `(train user, target item)` ratings.
    pub fn train_pool_len(&self) -> usize {
        self.train.len()
    }

    pub fn train_ratings(&self) -> impl Iterator<Item = f64> + '_ {
        self.train.iter().map(|t| t.rating)
    }

    /// Test users in sorted order.
    pub fn test_users(&self) -> &[String] {
        &self.test_order
    }

    pub fn history(&self, source_user: usize) -> &[usize] {
        &self.histories[source_user]
    }

    fn example(&self, t: &Triple, visible: bool) -> RatingExample {
        RatingExample {
            user: t.user,
            history: self.histories[t.user].clone(),
            candidate: t.item,
            rating: visible.then_some(t.rating),
        }
    }

    fn sample_support<R: Rng + ?Sized>(&self, rng: &mut R, extra: usize) -> Result<Vec<RatingExample>> {
        let need = self.cfg.support_size + extra;
        if self.train.len() < need {
            return Err(Error::InsufficientPool {
                required: need,
                available: self.train.len(),
            });
        }
        Ok(index::sample(rng, self.train.len(), need)
            .into_iter()
            .map(|i| self.example(&self.train[i], true))
            .collect())
    }

    /// A training episode: `support_size + query_size` distinct train-user
    /// ratings drawn without replacement, the first block as support.
    pub fn training_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Task> {
        let mut all = self.sample_support(rng, self.cfg.query_size)?;
        let query = all.split_off(self.cfg.support_size);
        Ok(Task {
            support: all,
            query,
            phase: Phase::Training,
            hidden: Vec::new(),
        })
    }

    /// A testing episode for one held-out user: support from train users,
    /// query = every target rating of `user_id` with the rating hidden.
    /// `Ok(None)` when the user has no target ratings.
    pub fn testing_task<R: Rng + ?Sized>(&self, user_id: &str, rng: &mut R) -> Result<Option<Task>> {
        let (s, targets) = self.test.get(user_id).ok_or_else(|| Error::Lookup {
            kind: "test user",
            id: user_id.to_string(),
        })?;
        if targets.is_empty() {
            return Ok(None);
        }
        let support = self.sample_support(rng, 0)?;
        let query = targets
            .iter()
            .map(|&(item, _)| RatingExample {
                user: *s,
                history: self.histories[*s].clone(),
                candidate: item,
                rating: None,
            })
            .collect();
        Ok(Some(Task {
            support,
            query,
            phase: Phase::Testing,
            hidden: targets.iter().map(|&(_, r)| r).collect(),
        }))
    }

    /// A testing episode for arbitrary target candidates of a source user.
    pub fn prediction_task<R: Rng + ?Sized>(&self, source_user: usize, candidates: &[usize], rng: &mut R) -> Result<Task> {
        let history = self.histories.get(source_user).ok_or_else(|| Error::Lookup {
            kind: "source user",
            id: source_user.to_string(),
        })?;
        if history.is_empty() {
            return Err(Error::Lookup {
                kind: "source history of user",
                id: source_user.to_string(),
            });
        }
        let support = self.sample_support(rng, 0)?;
        let query = candidates
            .iter()
            .map(|&candidate| RatingExample {
                user: source_user,
                history: history.clone(),
                candidate,
                rating: None,
            })
            .collect();
        Ok(Task {
            support,
            query,
            phase: Phase::Testing,
            hidden: Vec::new(),
        })
    }
}

/// One `(item, rating)` per item, keeping the most recent rating, in order
/// of first rating.
fn latest_per_item(ratings: &[crate::data::Rating]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(ratings.len());
    let mut pos: HashMap<usize, usize> = HashMap::new();
    for r in ratings {
        match pos.get(&r.item) {
            Some(&p) => out[p].1 = r.rating,
            None => {
                pos.insert(r.item, out.len());
                out.push((r.item, r.rating));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{DomainDataset, DomainTag, Interaction};

    /// `n_train` train users with `per_user` target ratings each plus the
    /// listed test users with the given target counts.
    fn fixture(n_train: usize, per_user: usize, test_counts: &[usize]) -> (CrossDomain, CrossDomainSplit) {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut ts = 0;
        let mut add_user = |id: String, n_tgt: usize, src: &mut Vec<Interaction>, tgt: &mut Vec<Interaction>| {
            for k in 0..3 {
                ts += 1;
                src.push(Interaction::new(id.clone(), format!("s{k}"), 3.0, ts).unwrap());
            }
            for k in 0..n_tgt {
                ts += 1;
                tgt.push(Interaction::new(id.clone(), format!("t{k}"), (k % 5) as f64, ts).unwrap());
            }
        };
        let mut train_ids = Vec::new();
        for i in 0..n_train {
            let id = format!("train{i:03}");
            add_user(id.clone(), per_user, &mut src, &mut tgt);
            train_ids.push(id);
        }
        let mut test_ids = Vec::new();
        for (i, &c) in test_counts.iter().enumerate() {
            let id = format!("test{i:03}");
            add_user(id.clone(), c, &mut src, &mut tgt);
            test_ids.push(id);
        }
        let source = DomainDataset::from_interactions(DomainTag::Source, src, 1).unwrap();
        let target = DomainDataset::from_interactions(DomainTag::Target, tgt, 1).unwrap();
        let data = CrossDomain::new(source, target);
        let mut overlap = train_ids.clone();
        overlap.extend(test_ids.clone());
        train_ids.sort();
        test_ids.sort();
        let split = CrossDomainSplit {
            overlap_users: overlap,
            train_users: train_ids,
            test_users: test_ids,
            alpha: 0.5,
            seed: 0,
        };
        (data, split)
    }

    fn cfg(s: usize, q: usize) -> TaskConfig {
        TaskConfig {
            support_size: s,
            query_size: q,
            history_len: 20,
        }
    }

    #[test]
    fn ample_pool_gives_requested_sizes() {
        let (data, split) = fixture(10, 10, &[5]);
        let pool = TaskPool::new(&data, &split, TaskConfig::default()).unwrap();
        let t = pool.training_task(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.support.len(), 40);
        assert_eq!(t.query.len(), 40);
    }

    #[test]
    fn exact_pool_and_short_pool() {
        let (data, split) = fixture(1, 5, &[1]);
        let pool = TaskPool::new(&data, &split, cfg(3, 2)).unwrap();
        let t = pool.training_task(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((t.support.len(), t.query.len()), (3, 2));
        assert!(disjoint(&t));

        let (data, split) = fixture(1, 4, &[1]);
        let pool = TaskPool::new(&data, &split, cfg(3, 2)).unwrap();
        match pool.training_task(&mut ChaCha8Rng::seed_from_u64(1)) {
            Err(Error::InsufficientPool { required, available }) => {
                assert_eq!((required, available), (5, 4));
            }
            other => panic!("expected insufficient pool, got {other:?}"),
        }
    }

    #[test]
    fn testing_task_hides_query_ratings() {
        let (data, split) = fixture(10, 10, &[5, 0]);
        let pool = TaskPool::new(&data, &split, TaskConfig::default()).unwrap();
        let t = pool
            .testing_task("test000", &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .unwrap();
        assert_eq!(t.query.len(), 5);
        assert_eq!(t.support.len(), 40);
        assert_eq!(t.hidden.len(), 5);
        assert!(t.query.iter().all(|e| e.rating.is_none()));
        assert!(t.support.iter().all(|e| e.rating.is_some()));

        assert!(pool
            .testing_task("test001", &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .is_none());
        assert!(pool.testing_task("train000", &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn testing_support_is_deterministic() {
        let (data, split) = fixture(10, 10, &[5]);
        let pool = TaskPool::new(&data, &split, TaskConfig::default()).unwrap();
        let a = pool.testing_task("test000", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = pool.testing_task("test000", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn query_users_never_in_training_tasks() {
        let (data, split) = fixture(8, 10, &[4, 6, 3]);
        let pool = TaskPool::new(&data, &split, cfg(10, 10)).unwrap();
        let test_rows: HashSet<usize> = split
            .test_users
            .iter()
            .map(|id| data.source.user(id).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = pool.training_task(&mut rng).unwrap();
            for e in t.support.iter().chain(&t.query) {
                assert!(!test_rows.contains(&e.user));
            }
        }
        for id in &split.test_users {
            let t = pool.testing_task(id, &mut rng).unwrap().unwrap();
            assert!(t.support.iter().all(|e| !test_rows.contains(&e.user)));
            assert!(t.query.iter().all(|e| test_rows.contains(&e.user)));
        }
    }

    fn disjoint(t: &Task) -> bool {
        let s: HashSet<(usize, usize)> = t.support.iter().map(|e| (e.user, e.candidate)).collect();
        t.query.iter().all(|e| !s.contains(&(e.user, e.candidate)))
    }

    #[test]
    fn histories_attached_and_non_empty() {
        let (data, split) = fixture(4, 10, &[2]);
        let pool = TaskPool::new(&data, &split, cfg(5, 5)).unwrap();
        let t = pool.training_task(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(t.support.iter().chain(&t.query).all(|e| e.history.len() == 3));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn support_and_query_disjoint(seed in any::<u64>(), s in 1usize..20, q in 1usize..20) {
                let (data, split) = fixture(6, 8, &[2]);
                let pool = TaskPool::new(&data, &split, cfg(s, q)).unwrap();
                let t = pool.training_task(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert!(disjoint(&t));
            }
        }
    }
}
