//! Rating files, per-domain indexing, user overlap and the cold-start split.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_RATING: f64 = 0.0;
pub const MAX_RATING: f64 = 5.0;
pub const DEFAULT_MIN_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTag::Source => f.write_str("source"),
            DomainTag::Target => f.write_str("target"),
        }
    }
}

/// One raw rating record with external ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: u64,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, rating: f64, timestamp: u64) -> Result<Self> {
        if !(MIN_RATING..=MAX_RATING).contains(&rating) {
            return Err(Error::Validation(format!(
                "rating {rating} outside [{MIN_RATING}, {MAX_RATING}]"
            )));
        }
        Ok(Interaction {
            user_id: user_id.into(),
            item_id: item_id.into(),
            rating,
            timestamp,
        })
    }
}

/// A rating with dense per-domain indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: u64,
}

/// One domain's users, items and ratings.
///
/// Dense indices follow first appearance in the (filtered) input order;
/// ratings are grouped by user and sorted by timestamp within a user.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    tag: DomainTag,
    users: Vec<String>,
    user_index: HashMap<String, usize>,
    items: Vec<String>,
    item_index: HashMap<String, usize>,
    ratings: Vec<Rating>,
    user_ranges: Vec<Range<usize>>,
}

impl DomainDataset {
    /// Builds a dataset, dropping users and items with fewer than
    /// `min_count` ratings until every survivor meets the threshold.
    pub fn from_interactions(tag: DomainTag, records: Vec<Interaction>, min_count: usize) -> Result<Self> {
        for r in &records {
            if !(MIN_RATING..=MAX_RATING).contains(&r.rating) {
                return Err(Error::Validation(format!(
                    "rating {} for ({}, {}) outside [{MIN_RATING}, {MAX_RATING}]",
                    r.rating, r.user_id, r.item_id
                )));
            }
        }
        let kept = filter_min_count(records, min_count);

        let mut users = Vec::new();
        let mut user_index = HashMap::new();
        let mut items = Vec::new();
        let mut item_index = HashMap::new();
        let mut ratings = Vec::with_capacity(kept.len());
        for r in kept {
            let u = *user_index.entry(r.user_id.clone()).or_insert_with(|| {
                users.push(r.user_id.clone());
                users.len() - 1
            });
            let i = *item_index.entry(r.item_id.clone()).or_insert_with(|| {
                items.push(r.item_id.clone());
                items.len() - 1
            });
            ratings.push(Rating {
                user: u,
                item: i,
                rating: r.rating,
                timestamp: r.timestamp,
            });
        }
        // stable: equal timestamps keep file order
        ratings.sort_by_key(|r| (r.user, r.timestamp));

        let mut user_ranges = vec![0..0; users.len()];
        let mut start = 0;
        while start < ratings.len() {
            let u = ratings[start].user;
            let end = start + ratings[start..].iter().take_while(|r| r.user == u).count();
            user_ranges[u] = start..end;
            start = end;
        }

        Ok(DomainDataset {
            tag,
            users,
            user_index,
            items,
            item_index,
            ratings,
            user_ranges,
        })
    }

    pub fn tag(&self) -> DomainTag {
        self.tag
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_ratings(&self) -> usize {
        self.ratings.len()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.users[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.items[item]
    }

    pub fn user(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    /// A user's ratings in chronological order.
    pub fn user_ratings(&self, user: usize) -> &[Rating] {
        &self.ratings[self.user_ranges[user].clone()]
    }

    /// Back to external-id records in stored order.
    pub fn to_interactions(&self) -> Vec<Interaction> {
        self.ratings
            .iter()
            .map(|r| Interaction {
                user_id: self.users[r.user].clone(),
                item_id: self.items[r.item].clone(),
                rating: r.rating,
                timestamp: r.timestamp,
            })
            .collect()
    }

    /// Writes the dataset as headerless `user,item,rating,timestamp` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.ratings {
            // `{}` on f64 prints the shortest string that parses back exactly
            writeln!(
                w,
                "{},{},{},{}",
                self.users[r.user], self.items[r.item], r.rating, r.timestamp
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn filter_min_count(mut records: Vec<Interaction>, min_count: usize) -> Vec<Interaction> {
    if min_count <= 1 {
        return records;
    }
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *user_counts.entry(&r.user_id).or_default() += 1;
            *item_counts.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| user_counts[r.user_id.as_str()] >= min_count && item_counts[r.item_id.as_str()] >= min_count)
            .collect();
        if keep.iter().all(|&k| k) {
            return records;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
}

/// Parses one headerless CSV ratings file.
pub fn read_ratings(path: &Path) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad rating `{}`", fields[2])))?;
        let timestamp: u64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp `{}`", fields[3])))?;
        let rec = Interaction::new(fields[0].trim(), fields[1].trim(), rating, timestamp).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}:{lineno}: {msg}", path.display())),
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads a ratings file and applies iterative min-count filtering.
pub fn load_ratings(path: &Path, tag: DomainTag, min_count: usize) -> Result<DomainDataset> {
    DomainDataset::from_interactions(tag, read_ratings(path)?, min_count)
}

/// Overlapping users (present in both domains) and source-only users, each
/// as a sorted list of external ids.
pub fn compute_overlap(source: &DomainDataset, target: &DomainDataset) -> (Vec<String>, Vec<String>) {
    let src: BTreeSet<&str> = source.users().iter().map(String::as_str).collect();
    let tgt: BTreeSet<&str> = target.users().iter().map(String::as_str).collect();
    let overlap = src.intersection(&tgt).map(|s| s.to_string()).collect();
    let source_only = src.difference(&tgt).map(|s| s.to_string()).collect();
    (overlap, source_only)
}

/// Partition of overlapping users into meta-training users and held-out
/// users whose target ratings are hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainSplit {
    pub overlap_users: Vec<String>,
    pub train_users: Vec<String>,
    pub test_users: Vec<String>,
    pub alpha: f64,
    pub seed: u64,
}

impl CrossDomainSplit {
    /// Test-user ids, one per line.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for u in &self.test_users {
            s.push_str(u);
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Shuffles `overlap` with `seed` and holds out the first
/// `floor(alpha · N)` users for testing. Both halves are returned sorted.
pub fn split_cold_start(overlap: &[String], alpha: f64, seed: u64) -> Result<CrossDomainSplit> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Split(format!("alpha {alpha} not in (0, 1)")));
    }
    if overlap.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 overlapping users, have {}",
            overlap.len()
        )));
    }
    let mut sorted = overlap.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut shuffled = sorted.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (alpha * sorted.len() as f64).floor() as usize;
    let mut test_users = shuffled[..n_test].to_vec();
    let mut train_users = shuffled[n_test..].to_vec();
    test_users.sort();
    train_users.sort();
    Ok(CrossDomainSplit {
        overlap_users: sorted,
        train_users,
        test_users,
        alpha,
        seed,
    })
}

/// Item history of a source user: chronological, truncated to the most
/// recent `max_len` ratings.
pub fn build_history(source: &DomainDataset, user_id: &str, max_len: usize) -> Result<Vec<Rating>> {
    let u = source.user(user_id).ok_or_else(|| Error::Lookup {
        kind: "source user",
        id: user_id.to_string(),
    })?;
    Ok(history_of(source, u, max_len).to_vec())
}

pub(crate) fn history_of(source: &DomainDataset, user: usize, max_len: usize) -> &[Rating] {
    let all = source.user_ratings(user);
    &all[all.len().saturating_sub(max_len)..]
}

/// Source and target datasets with the user linkage the model needs.
///
/// The model keeps one user-embedding table: rows `0..|U^s|` are source
/// users (same order as the source index), followed by target-only users.
#[derive(Debug, Clone)]
pub struct CrossDomain {
    pub source: DomainDataset,
    pub target: DomainDataset,
    target_to_row: Vec<usize>,
    num_user_rows: usize,
}

impl CrossDomain {
    pub fn new(source: DomainDataset, target: DomainDataset) -> Self {
        let mut next = source.num_users();
        let target_to_row = target
            .users()
            .iter()
            .map(|id| {
                source.user(id).unwrap_or_else(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        CrossDomain {
            source,
            target,
            target_to_row,
            num_user_rows: next,
        }
    }

    /// Size of the shared user-embedding table, `|U^s ∪ U^t|`.
    pub fn num_user_rows(&self) -> usize {
        self.num_user_rows
    }

    pub fn user_row_of_target(&self, target_user: usize) -> usize {
        self.target_to_row[target_user]
    }

    pub fn overlap(&self) -> (Vec<String>, Vec<String>) {
        compute_overlap(&self.source, &self.target)
    }
}
