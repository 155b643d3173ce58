//! Interaction ingestion, k-core filtering, chronological staging and the
//! validation/test holdout protocol.
//!
//! Stages are 0-based in code. Reports and CSV files number them from 1.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw event as it appears in the input log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

/// An interaction with dense user/item indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub timestamp: u64,
}

/// Time-ordered interactions with dense index maps.
///
/// `users[k]` is the external id of user index `k`; likewise for `items`.
/// Indices are assigned in order of first appearance in the sorted log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from raw interactions. Sorting is stable, so ties keep
    /// their input order.
    pub fn from_interactions(mut raw: Vec<Interaction>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyDataset);
        }
        raw.sort_by_key(|x| x.timestamp);
        let mut user_ix: HashMap<String, usize> = HashMap::new();
        let mut item_ix: HashMap<String, usize> = HashMap::new();
        let mut users = Vec::new();
        let mut items = Vec::new();
        let events = raw
            .into_iter()
            .map(|x| {
                let user = *user_ix.entry(x.user.clone()).or_insert_with(|| {
                    users.push(x.user);
                    users.len() - 1
                });
                let item = *item_ix.entry(x.item.clone()).or_insert_with(|| {
                    items.push(x.item);
                    items.len() - 1
                });
                Event {
                    user,
                    item,
                    timestamp: x.timestamp,
                }
            })
            .collect();
        Ok(Dataset {
            events,
            users,
            items,
        })
    }

    /// Re-indexes a subset of this dataset's (already sorted) events.
    fn reindexed(&self, kept: impl Iterator<Item = Event>) -> Dataset {
        let mut user_map = vec![usize::MAX; self.users.len()];
        let mut item_map = vec![usize::MAX; self.items.len()];
        let mut users = Vec::new();
        let mut items = Vec::new();
        let events = kept
            .map(|e| {
                if user_map[e.user] == usize::MAX {
                    user_map[e.user] = users.len();
                    users.push(self.users[e.user].clone());
                }
                if item_map[e.item] == usize::MAX {
                    item_map[e.item] = items.len();
                    items.push(self.items[e.item].clone());
                }
                Event {
                    user: user_map[e.user],
                    item: item_map[e.item],
                    timestamp: e.timestamp,
                }
            })
            .collect();
        Dataset {
            events,
            users,
            items,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn interaction(&self, k: usize) -> Interaction {
        let e = self.events[k];
        Interaction {
            user: self.users[e.user].clone(),
            item: self.items[e.item].clone(),
            timestamp: e.timestamp,
        }
    }

    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        (0..self.events.len()).map(|k| self.interaction(k))
    }
}

/// Parses `user<delim>item<delim>timestamp` lines. Extra trailing columns are
/// ignored; blank lines are skipped.
pub fn parse_interactions<R: Read>(reader: R, delimiter: char) -> Result<Dataset> {
    let mut raw = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(delimiter);
        let (user, item, ts) = match (cols.next(), cols.next(), cols.next()) {
            (Some(u), Some(i), Some(t)) => (u.trim(), i.trim(), t.trim()),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected user, item and timestamp columns".into(),
                })
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        let timestamp = ts.parse::<u64>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad timestamp {ts:?}: {e}"),
        })?;
        raw.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Dataset::from_interactions(raw)
}

pub fn load_interactions(path: impl AsRef<Path>, delimiter: char) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(file, delimiter)
}

pub fn write_interactions<W: Write>(d: &Dataset, out: W, delimiter: char) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for e in &d.events {
        writeln!(
            out,
            "{}{delimiter}{}{delimiter}{}",
            d.users[e.user], d.items[e.item], e.timestamp
        )?;
    }
    out.flush()
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// every survivor has at least `k`. Degrees count duplicate events.
pub fn kcore_filter(d: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::config("k-core k must be at least 1"));
    }
    let mut alive = vec![true; d.events.len()];
    loop {
        let mut user_deg = vec![0usize; d.num_users()];
        let mut item_deg = vec![0usize; d.num_items()];
        for (e, _) in d.events.iter().zip(&alive).filter(|(_, a)| **a) {
            user_deg[e.user] += 1;
            item_deg[e.item] += 1;
        }
        let mut changed = false;
        for (e, a) in d.events.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[e.user] < k || item_deg[e.item] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let out = d.reindexed(
        d.events
            .iter()
            .zip(&alive)
            .filter(|(_, a)| **a)
            .map(|(e, _)| *e),
    );
    if out.is_empty() {
        return Err(Error::EmptyAfterFilter { k });
    }
    Ok(out)
}

/// Interactions bucketed into equal-width time stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedDataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    /// `stages.len() + 1` edges; stage `s` covers `[boundaries[s], boundaries[s+1])`,
    /// the last stage is closed on the right.
    pub boundaries: Vec<f64>,
    pub stages: Vec<Vec<Event>>,
}

impl StagedDataset {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// `(stage, event)` pairs in time order.
    pub fn events(&self) -> impl Iterator<Item = (usize, &Event)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, evs)| evs.iter().map(move |e| (s, e)))
    }

    pub fn last_stage(&self) -> &[Event] {
        self.stages.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn stage_of(ts: u64, lo: u64, range: u64, n: usize) -> usize {
    if range == 0 {
        return 0;
    }
    let s = ((ts - lo) as u128 * n as u128 / range as u128) as usize;
    s.min(n - 1)
}

/// Partitions `events` (sorted by time) into `n` equal-width intervals spanning
/// their own min and max timestamps.
pub(crate) fn bucket_by_time(events: &[Event], n: usize) -> (Vec<f64>, Vec<Vec<Event>>) {
    let lo = events.iter().map(|e| e.timestamp).min().unwrap_or(0);
    let hi = events.iter().map(|e| e.timestamp).max().unwrap_or(0);
    let range = hi - lo;
    let boundaries = (0..=n)
        .map(|s| lo as f64 + range as f64 * s as f64 / n as f64)
        .collect();
    let mut stages = vec![Vec::new(); n];
    for e in events {
        stages[stage_of(e.timestamp, lo, range, n)].push(*e);
    }
    (boundaries, stages)
}

pub fn split_stages(d: &Dataset, num_stages: usize) -> Result<StagedDataset> {
    if num_stages == 0 {
        return Err(Error::config("stage count must be at least 1"));
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (boundaries, stages) = bucket_by_time(&d.events, num_stages);
    Ok(StagedDataset {
        users: d.users.clone(),
        items: d.items.clone(),
        boundaries,
        stages,
    })
}

/// Per-user held-out items, deduplicated and sorted.
pub type GroundTruth = BTreeMap<usize, Vec<usize>>;

/// Sorted distinct training items of every user.
#[derive(Debug, Clone, Default)]
pub struct UserItemSets {
    sets: Vec<Vec<usize>>,
}

impl UserItemSets {
    pub fn from_staged(s: &StagedDataset) -> Self {
        let mut sets = vec![Vec::new(); s.num_users()];
        for (_, e) in s.events() {
            sets[e.user].push(e.item);
        }
        for v in &mut sets {
            v.sort_unstable();
            v.dedup();
        }
        UserItemSets { sets }
    }

    /// From per-user item lists in any order.
    pub fn from_rows(mut sets: Vec<Vec<usize>>) -> Self {
        for v in &mut sets {
            v.sort_unstable();
            v.dedup();
        }
        UserItemSets { sets }
    }

    pub fn items(&self, user: usize) -> &[usize] {
        self.sets.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items(user).binary_search(&item).is_ok()
    }

    pub fn num_users(&self) -> usize {
        self.sets.len()
    }
}

/// Counts reads of the test holdout so selection code can be audited.
#[derive(Debug, Default)]
pub struct AccessAudit {
    test_reads: AtomicUsize,
}

impl Clone for AccessAudit {
    fn clone(&self) -> Self {
        AccessAudit {
            test_reads: AtomicUsize::new(self.test_reads.load(Ordering::Relaxed)),
        }
    }
}

/// Training stages plus the user-level validation/test holdout drawn from the
/// final stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSplit {
    pub train: StagedDataset,
    validation: Vec<Event>,
    test: Vec<Event>,
    pub excluded: Vec<Event>,
    pub validation_users: Vec<usize>,
    pub test_users: Vec<usize>,
    pub seed: u64,
    pub valid_frac: f64,
    #[serde(skip)]
    audit: AccessAudit,
    #[serde(skip)]
    train_sets: OnceLock<UserItemSets>,
}

fn truth_of(events: &[Event]) -> GroundTruth {
    let mut truth = GroundTruth::new();
    for e in events {
        truth.entry(e.user).or_default().push(e.item);
    }
    for v in truth.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    truth
}

impl EvalSplit {
    pub fn validation(&self) -> &[Event] {
        &self.validation
    }

    /// Raw test events. Every call is recorded by the access audit.
    pub fn test(&self) -> &[Event] {
        self.audit.test_reads.fetch_add(1, Ordering::Relaxed);
        &self.test
    }

    pub fn validation_truth(&self) -> GroundTruth {
        truth_of(&self.validation)
    }

    /// Deduplicated test ground truth. Recorded by the access audit.
    pub fn test_truth(&self) -> GroundTruth {
        truth_of(self.test())
    }

    /// Number of times the test holdout has been read.
    pub fn test_reads(&self) -> usize {
        self.audit.test_reads.load(Ordering::Relaxed)
    }

    pub fn train_sets(&self) -> &UserItemSets {
        self.train_sets
            .get_or_init(|| UserItemSets::from_staged(&self.train))
    }

    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn summary(&self) -> SplitSummary {
        SplitSummary {
            users: self.num_users(),
            items: self.num_items(),
            train_interactions: self.train.num_interactions(),
            stages: self
                .train
                .stages
                .iter()
                .enumerate()
                .map(|(s, evs)| StageSummary {
                    stage: s + 1,
                    start: self.train.boundaries[s],
                    end: self.train.boundaries[s + 1],
                    interactions: evs.len(),
                })
                .collect(),
            validation_users: self.validation_users.len(),
            validation_interactions: self.validation.len(),
            test_users: self.test_users.len(),
            test_interactions: self.test.len(),
            excluded_interactions: self.excluded.len(),
            seed: self.seed,
            valid_frac: self.valid_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub start: f64,
    pub end: f64,
    pub interactions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub users: usize,
    pub items: usize,
    pub train_interactions: usize,
    pub stages: Vec<StageSummary>,
    pub validation_users: usize,
    pub validation_interactions: usize,
    pub test_users: usize,
    pub test_interactions: usize,
    pub excluded_interactions: usize,
    pub seed: u64,
    pub valid_frac: f64,
}

/// Holds out the final stage. Holdout events whose user or item never occurs
/// in the earlier stages are excluded first; the remaining holdout users are
/// shuffled with `seed` and the first `round(valid_frac * n)` become
/// validation users.
pub fn make_eval_split(s: &StagedDataset, valid_frac: f64, seed: u64) -> Result<EvalSplit> {
    if s.num_stages() < 2 {
        return Err(Error::config("evaluation split needs at least 2 stages"));
    }
    if !(valid_frac > 0.0 && valid_frac < 1.0) {
        return Err(Error::config(format!(
            "valid_frac must lie in (0, 1), got {valid_frac}"
        )));
    }
    let t = s.num_stages() - 1;
    let train = StagedDataset {
        users: s.users.clone(),
        items: s.items.clone(),
        boundaries: s.boundaries[..=t].to_vec(),
        stages: s.stages[..t].to_vec(),
    };
    let mut seen_user = vec![false; s.num_users()];
    let mut seen_item = vec![false; s.num_items()];
    for (_, e) in train.events() {
        seen_user[e.user] = true;
        seen_item[e.item] = true;
    }
    let (kept, excluded): (Vec<Event>, Vec<Event>) = s.stages[t]
        .iter()
        .partition(|e| seen_user[e.user] && seen_item[e.item]);
    if kept.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    let mut users: Vec<usize> = kept.iter().map(|e| e.user).collect();
    users.sort_unstable();
    users.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let n_valid = (valid_frac * users.len() as f64).round() as usize;
    let mut validation_users = users[..n_valid].to_vec();
    let mut test_users = users[n_valid..].to_vec();
    validation_users.sort_unstable();
    test_users.sort_unstable();
    let mut is_valid = vec![false; s.num_users()];
    for &u in &validation_users {
        is_valid[u] = true;
    }
    let (validation, test) = kept.into_iter().partition(|e| is_valid[e.user]);
    Ok(EvalSplit {
        train,
        validation,
        test,
        excluded,
        validation_users,
        test_users,
        seed,
        valid_frac,
        audit: AccessAudit::default(),
        train_sets: OnceLock::new(),
    })
}
