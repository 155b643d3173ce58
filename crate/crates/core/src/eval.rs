//! All-ranking top-K recommendation, accuracy metrics and the popularity
//! group recommendation-rate analysis.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSplit, GroundTruth, UserItemSets};
use crate::error::{Error, Result};
use crate::popularity::PopularityForecast;
use crate::scoring::{elu_prime, pop_power, Matcher};

/// Scores every item for a user. Implementations must be total over valid
/// (user, item) pairs.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;

    fn score(&self, user: usize, item: usize) -> f64;

    fn score_user(&self, user: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.score(user, i);
        }
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn num_items(&self) -> usize {
        (**self).num_items()
    }
    fn score(&self, user: usize, item: usize) -> f64 {
        (**self).score(user, item)
    }
    fn score_user(&self, user: usize, out: &mut [f64]) {
        (**self).score_user(user, out)
    }
}

/// Raw match `f(u, i)`.
pub struct MatchScorer<'a, M: Matcher>(pub &'a M);

impl<M: Matcher> Scorer for MatchScorer<'_, M> {
    fn num_items(&self) -> usize {
        self.0.num_items()
    }
    fn score(&self, user: usize, item: usize) -> f64 {
        self.0.raw_match(user, item)
    }
}

/// Deconfounded ranking: `elu'(f(u, i))`.
pub struct PdScorer<'a, M: Matcher>(pub &'a M);

impl<M: Matcher> Scorer for PdScorer<'_, M> {
    fn num_items(&self) -> usize {
        self.0.num_items()
    }
    fn score(&self, user: usize, item: usize) -> f64 {
        elu_prime(self.0.raw_match(user, item))
    }
}

/// Adjusted ranking: `elu'(f(u, i)) * m_tilde_i^gamma_tilde`.
pub struct PdaScorer<'a, M: Matcher> {
    model: &'a M,
    weights: Vec<f64>,
}

impl<'a, M: Matcher> PdaScorer<'a, M> {
    pub fn new(model: &'a M, forecast: &PopularityForecast, gamma_tilde: f64) -> Result<Self> {
        if !(gamma_tilde >= 0.0) {
            return Err(Error::config(format!(
                "gamma_tilde must be non-negative, got {gamma_tilde}"
            )));
        }
        if forecast.m_tilde.len() < model.num_items() {
            return Err(Error::MissingForecast(forecast.m_tilde.len()));
        }
        let weights = forecast.m_tilde[..model.num_items()]
            .iter()
            .map(|&m| {
                if m > 0.0 {
                    Ok(pop_power(m, gamma_tilde))
                } else {
                    Err(Error::NonPositivePopularity(m))
                }
            })
            .collect::<Result<_>>()?;
        Ok(PdaScorer { model, weights })
    }
}

impl<M: Matcher> Scorer for PdaScorer<'_, M> {
    fn num_items(&self) -> usize {
        self.model.num_items()
    }
    fn score(&self, user: usize, item: usize) -> f64 {
        elu_prime(self.model.raw_match(user, item)) * self.weights[item]
    }
}

/// A scorer multiplied by a constant.
pub struct Scaled<S>(pub S, pub f64);

impl<S: Scorer> Scorer for Scaled<S> {
    fn num_items(&self) -> usize {
        self.0.num_items()
    }
    fn score(&self, user: usize, item: usize) -> f64 {
        self.0.score(user, item) * self.1
    }
}

/// Adapts a closure into a [`Scorer`].
pub struct FnScorer<F> {
    pub num_items: usize,
    pub f: F,
}

impl<F: Fn(usize, usize) -> f64 + Sync> Scorer for FnScorer<F> {
    fn num_items(&self) -> usize {
        self.num_items
    }
    fn score(&self, user: usize, item: usize) -> f64 {
        (self.f)(user, item)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    /// Fewer than K candidates were available.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub k: usize,
    pub lists: Vec<UserRanking>,
}

impl RankedList {
    pub fn any_truncated(&self) -> bool {
        self.lists.iter().any(|l| l.truncated)
    }
}

/// Descending score, ascending item index.
#[inline]
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn rank_one<S: Scorer>(scorer: &S, seen: &[usize], user: usize, k: usize) -> UserRanking {
    let n = scorer.num_items();
    let mut scores = vec![0.0; n];
    scorer.score_user(user, &mut scores);
    let mut cand: Vec<(f64, usize)> = scores
        .into_iter()
        .enumerate()
        .filter(|(i, _)| seen.binary_search(i).is_err())
        .map(|(i, s)| (s, i))
        .collect();
    let truncated = cand.len() < k;
    if cand.len() > k && k > 0 {
        cand.select_nth_unstable_by(k - 1, rank_order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_order);
    cand.truncate(k);
    UserRanking {
        user,
        items: cand.iter().map(|c| c.1).collect(),
        scores: cand.iter().map(|c| c.0).collect(),
        truncated,
    }
}

/// Ranks all items each user has not interacted with in training and keeps
/// the top `k`.
pub fn rank_users<S: Scorer>(
    scorer: &S,
    train: &UserItemSets,
    users: &[usize],
    k: usize,
) -> RankedList {
    let lists = users
        .par_iter()
        .map(|&u| rank_one(scorer, train.items(u), u, k))
        .collect();
    RankedList { k, lists }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    Validation,
    Test,
}

pub fn recommend_topk<S: Scorer>(
    scorer: &S,
    split: &EvalSplit,
    holdout: Holdout,
    k: usize,
) -> RankedList {
    let users = match holdout {
        Holdout::Validation => &split.validation_users,
        Holdout::Test => &split.test_users,
    };
    rank_users(scorer, split.train_sets(), users, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub hit_ratio: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Keyed by K.
    pub metrics: BTreeMap<usize, Metrics>,
    pub users_evaluated: usize,
    pub users_without_truth: usize,
}

/// Metrics of one ranked list prefix against one user's truth set.
pub fn user_metrics(ranked: &[usize], truth: &[usize], k: usize) -> Metrics {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if truth.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let ideal = truth.len().min(k);
    let idcg: f64 = (0..ideal).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Metrics {
        recall: hits as f64 / truth.len() as f64,
        precision: hits as f64 / k as f64,
        hit_ratio: if hits > 0 { 1.0 } else { 0.0 },
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
    }
}

/// User-averaged metrics for each K in `ks` (each must be ≤ the list's K).
/// Users without ground truth are skipped and counted.
pub fn compute_metrics(rl: &RankedList, truth: &GroundTruth, ks: &[usize]) -> Result<MetricsReport> {
    if let Some(&bad) = ks.iter().find(|&&k| k > rl.k || k == 0) {
        return Err(Error::config(format!(
            "metric cutoff {bad} exceeds ranked list length {}",
            rl.k
        )));
    }
    let mut sums: BTreeMap<usize, Metrics> = ks.iter().map(|&k| (k, Metrics::default())).collect();
    let mut evaluated = 0usize;
    let mut missing = 0usize;
    for l in &rl.lists {
        let Some(t) = truth.get(&l.user).filter(|t| !t.is_empty()) else {
            missing += 1;
            continue;
        };
        evaluated += 1;
        for (&k, s) in sums.iter_mut() {
            let m = user_metrics(&l.items, t, k);
            s.recall += m.recall;
            s.precision += m.precision;
            s.hit_ratio += m.hit_ratio;
            s.ndcg += m.ndcg;
        }
    }
    if evaluated > 0 {
        let n = evaluated as f64;
        for s in sums.values_mut() {
            s.recall /= n;
            s.precision /= n;
            s.hit_ratio /= n;
            s.ndcg /= n;
        }
    }
    Ok(MetricsReport {
        metrics: sums,
        users_evaluated: evaluated,
        users_without_truth: missing,
    })
}

/// One row of the optional per-user metrics export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserMetricsRow {
    pub user: usize,
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub hit_ratio: f64,
    pub ndcg: f64,
}

pub fn per_user_metrics(rl: &RankedList, truth: &GroundTruth, ks: &[usize]) -> Vec<UserMetricsRow> {
    let mut rows = Vec::new();
    for l in &rl.lists {
        let Some(t) = truth.get(&l.user).filter(|t| !t.is_empty()) else {
            continue;
        };
        for &k in ks {
            let m = user_metrics(&l.items, t, k);
            rows.push(UserMetricsRow {
                user: l.user,
                k,
                recall: m.recall,
                precision: m.precision,
                hit_ratio: m.hit_ratio,
                ndcg: m.ndcg,
            });
        }
    }
    rows
}

/// Validation Recall@k for a scorer; the model-selection signal.
pub fn validation_recall<S: Scorer>(
    scorer: &S,
    split: &EvalSplit,
    truth: &GroundTruth,
    k: usize,
) -> Result<f64> {
    let rl = recommend_topk(scorer, split, Holdout::Validation, k);
    let report = compute_metrics(&rl, truth, &[k])?;
    if report.users_evaluated == 0 {
        return Err(Error::NoValidationUsers);
    }
    Ok(report.metrics[&k].recall)
}

/// Items grouped by popularity so that each group carries about the same
/// share of interactions. Group 0 holds the most popular items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub groups: usize,
    pub assignment: Vec<usize>,
    /// Interaction count per group.
    pub mass: Vec<u64>,
    pub members: Vec<Vec<usize>>,
}

/// Sorts items by `counts` (descending, ties by index) and fills groups
/// greedily, closing a group once it holds at least `total / groups` of the
/// interactions. The last group takes the remainder.
pub fn partition_groups(counts: &[u64], groups: usize) -> Result<GroupPartition> {
    if groups == 0 {
        return Err(Error::config("group count must be at least 1"));
    }
    if counts.len() < groups {
        return Err(Error::TooFewItems {
            groups,
            items: counts.len(),
        });
    }
    let total: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut assignment = vec![0usize; counts.len()];
    let mut mass = vec![0u64; groups];
    let mut members = vec![Vec::new(); groups];
    let mut g = 0usize;
    for i in order {
        assignment[i] = g;
        mass[g] += counts[i];
        members[g].push(i);
        // mass/total >= 1/groups, in integers
        if g + 1 < groups && mass[g] as u128 * groups as u128 >= total as u128 {
            g += 1;
        }
    }
    Ok(GroupPartition {
        groups,
        assignment,
        mass,
        members,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRate {
    pub rates: Vec<f64>,
    /// Population standard deviation of `rates`.
    pub std_dev: f64,
}

fn rates_from_tallies(tally: &[u64]) -> RecommendationRate {
    let total: u64 = tally.iter().sum();
    let rates: Vec<f64> = tally
        .iter()
        .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
        .collect();
    let g = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / g;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    RecommendationRate {
        rates,
        std_dev: var.sqrt(),
    }
}

/// Share of all recommendation slots that land in each group.
pub fn recommendation_rate(rl: &RankedList, gp: &GroupPartition) -> RecommendationRate {
    let mut tally = vec![0u64; gp.groups];
    for l in &rl.lists {
        for &i in &l.items {
            tally[gp.assignment[i]] += 1;
        }
    }
    rates_from_tallies(&tally)
}

/// The same rate computed over the training interactions themselves.
pub fn training_rate(counts: &[u64], gp: &GroupPartition) -> RecommendationRate {
    let mut tally = vec![0u64; gp.groups];
    for (i, &c) in counts.iter().enumerate() {
        tally[gp.assignment[i]] += c;
    }
    rates_from_tallies(&tally)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(rows: Vec<Vec<usize>>) -> UserItemSets {
        use crate::data::{Event, StagedDataset};
        let n_users = rows.len();
        let mut evs = Vec::new();
        for (u, items) in rows.into_iter().enumerate() {
            for i in items {
                evs.push(Event {
                    user: u,
                    item: i,
                    timestamp: 0,
                });
            }
        }
        UserItemSets::from_staged(&StagedDataset {
            users: (0..n_users).map(|u| u.to_string()).collect(),
            items: vec![],
            boundaries: vec![0.0, 1.0],
            stages: vec![evs],
        })
    }

    fn const_scorer(n: usize, scores: Vec<f64>) -> FnScorer<impl Fn(usize, usize) -> f64 + Sync> {
        FnScorer {
            num_items: n,
            f: move |_, i| scores[i],
        }
    }

    #[test]
    fn training_items_are_excluded() {
        let s = const_scorer(3, vec![3.0, 2.0, 1.0]);
        let rl = rank_users(&s, &sets(vec![vec![1]]), &[0], 2);
        assert_eq!(rl.lists[0].items, vec![0, 2]);
    }

    #[test]
    fn ties_break_by_index() {
        let s = const_scorer(5, vec![1.0; 5]);
        let rl = rank_users(&s, &sets(vec![vec![]]), &[0], 5);
        assert_eq!(rl.lists[0].items, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn short_candidate_list_is_flagged() {
        let s = const_scorer(3, vec![1.0, 2.0, 3.0]);
        let rl = rank_users(&s, &sets(vec![vec![0, 1]]), &[0], 2);
        assert_eq!(rl.lists[0].items, vec![2]);
        assert!(rl.any_truncated());
    }

    #[test]
    fn metrics_single_hit() {
        let ranked: Vec<usize> = (0..20).collect();
        let m = user_metrics(&ranked, &[0], 20);
        assert_eq!((m.recall, m.precision, m.hit_ratio, m.ndcg), (1.0, 0.05, 1.0, 1.0));
        let m = user_metrics(&ranked, &[2], 20);
        assert_eq!(m.ndcg, 0.5);
    }

    #[test]
    fn metrics_skip_users_without_truth() {
        let rl = RankedList {
            k: 2,
            lists: vec![
                UserRanking {
                    user: 0,
                    items: vec![1, 2],
                    scores: vec![1.0, 0.5],
                    truncated: false,
                },
                UserRanking {
                    user: 1,
                    items: vec![1, 2],
                    scores: vec![1.0, 0.5],
                    truncated: false,
                },
            ],
        };
        let mut truth = GroundTruth::new();
        truth.insert(0, vec![2, 5]);
        let r = compute_metrics(&rl, &truth, &[1, 2]).unwrap();
        assert_eq!(r.users_evaluated, 1);
        assert_eq!(r.users_without_truth, 1);
        assert_eq!(r.metrics[&1].recall, 0.0);
        assert_eq!(r.metrics[&2].recall, 0.5);
        assert!(compute_metrics(&rl, &truth, &[3]).is_err());
    }

    #[test]
    fn groups_equal_items() {
        let gp = partition_groups(&[5, 5, 5, 5], 2).unwrap();
        assert_eq!(gp.members, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn dominant_item_forms_first_group() {
        let gp = partition_groups(&[1, 60, 1, 1, 1], 2).unwrap();
        assert_eq!(gp.members[0], vec![1]);
        assert_eq!(gp.members[1], vec![0, 2, 3, 4]);
    }

    #[test]
    fn skewed_partition_matches_hand_trace() {
        // counts sorted: 30(i0) 20(i1) 15(i2) 10(i3) 8(i4) 6(i5) 5(i6) 3(i7) 2(i8) 1(i9)
        // total 100, G=4 -> close when group mass >= 25
        // g0: 30 -> close. g1: 20, +15=35 -> close. g2: 10, 18, 24, 29 -> close.
        // g3: rest (3, 2, 1)
        let counts = [30, 20, 15, 10, 8, 6, 5, 3, 2, 1];
        let gp = partition_groups(&counts, 4).unwrap();
        assert_eq!(
            gp.members,
            vec![vec![0], vec![1, 2], vec![3, 4, 5, 6], vec![7, 8, 9]]
        );
        assert_eq!(gp.mass, vec![30, 35, 29, 6]);
        assert!(partition_groups(&counts, 11).is_err());
    }

    #[test]
    fn rate_of_single_group() {
        let gp = partition_groups(&[5, 5, 5, 5], 4).unwrap();
        let rl = RankedList {
            k: 1,
            lists: vec![UserRanking {
                user: 0,
                items: vec![0],
                scores: vec![1.0],
                truncated: false,
            }],
        };
        let rr = recommendation_rate(&rl, &gp);
        assert_eq!(rr.rates, vec![1.0, 0.0, 0.0, 0.0]);
        assert!((rr.std_dev - 3f64.sqrt() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn training_rate_is_near_uniform() {
        let counts: Vec<u64> = (1..=200).map(|i| 2000 / i).collect();
        let gp = partition_groups(&counts, 10).unwrap();
        let rr = training_rate(&counts, &gp);
        let total: u64 = counts.iter().sum();
        let max_share = *counts.iter().max().unwrap() as f64 / total as f64;
        assert!((rr.rates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for r in &rr.rates[..9] {
            assert!((r - 0.1).abs() <= max_share);
        }
    }
}
