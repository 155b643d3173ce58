//! Stage-local and pooled item popularity, the drift-of-popularity measure
//! and next-stage popularity forecasts.

use serde::{Deserialize, Serialize};

use crate::data::{bucket_by_time, Event, StagedDataset};
use crate::error::{Error, Result};

/// How zero-count entries are lifted above zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPolicy {
    /// Half of one interaction's share within the stage: `0.5 / n_stage`.
    /// An empty stage uses half a share of the whole table instead.
    #[default]
    HalfShare,
    Fixed(f64),
}

/// Per-stage item popularity.
///
/// `counts[t][i]` is the raw interaction count of item `i` in stage `t`;
/// `m[t][i]` the stage share with zeros clamped up to `epsilon[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub m: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub epsilon: Vec<f64>,
    /// Single pooled row serving every stage.
    pub pooled: bool,
}

impl PopularityTable {
    fn from_counts(counts: Vec<Vec<u64>>, policy: EpsilonPolicy, pooled: bool) -> Self {
        let grand: u64 = counts.iter().flatten().sum();
        let mut m = Vec::with_capacity(counts.len());
        let mut epsilon = Vec::with_capacity(counts.len());
        for row in &counts {
            let total: u64 = row.iter().sum();
            let eps = match policy {
                EpsilonPolicy::Fixed(e) => e,
                EpsilonPolicy::HalfShare if total > 0 => 0.5 / total as f64,
                EpsilonPolicy::HalfShare => 0.5 / grand.max(1) as f64,
            };
            m.push(
                row.iter()
                    .map(|&c| {
                        if c == 0 {
                            eps
                        } else {
                            c as f64 / total as f64
                        }
                    })
                    .collect(),
            );
            epsilon.push(eps);
        }
        PopularityTable {
            m,
            counts,
            epsilon,
            pooled,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.m.len()
    }

    pub fn num_items(&self) -> usize {
        self.m.first().map_or(0, Vec::len)
    }

    fn row(&self, stage: usize) -> usize {
        if self.pooled {
            0
        } else {
            stage
        }
    }

    /// Clamped popularity of `item` at `stage`. A pooled table answers every
    /// stage from its single row.
    pub fn get(&self, stage: usize, item: usize) -> f64 {
        self.m[self.row(stage)][item]
    }

    pub fn stage_total(&self, stage: usize) -> u64 {
        self.counts[self.row(stage)].iter().sum()
    }

    /// Unclamped stage distribution; `None` for an empty stage.
    pub fn distribution(&self, stage: usize) -> Result<Option<Vec<f64>>> {
        let row = self.counts.get(stage).ok_or(Error::StageOutOfRange {
            stage,
            stages: self.counts.len(),
        })?;
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Ok(None);
        }
        Ok(Some(row.iter().map(|&c| c as f64 / total as f64).collect()))
    }

    /// Counts summed over all stages.
    pub fn pooled_counts(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.num_items()];
        for row in &self.counts {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }
}

fn count_rows<'a>(
    stages: impl Iterator<Item = &'a [Event]>,
    num_items: usize,
) -> Vec<Vec<u64>> {
    stages
        .map(|evs| {
            let mut c = vec![0u64; num_items];
            for e in evs {
                c[e.item] += 1;
            }
            c
        })
        .collect()
}

pub fn local_popularity(s: &StagedDataset, policy: EpsilonPolicy) -> PopularityTable {
    let counts = count_rows(s.stages.iter().map(Vec::as_slice), s.num_items());
    PopularityTable::from_counts(counts, policy, false)
}

/// Popularity over all stages pooled into a single row.
pub fn global_popularity(s: &StagedDataset, policy: EpsilonPolicy) -> PopularityTable {
    let mut counts = vec![0u64; s.num_items()];
    for (_, e) in s.events() {
        counts[e.item] += 1;
    }
    PopularityTable::from_counts(vec![counts], policy, true)
}

fn kl_term(p: f64, mid: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / mid).ln()
    }
}

/// Jensen-Shannon divergence with natural logarithm. Both inputs must be
/// probability vectors of equal length.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let mid = 0.5 * (a + b);
        kl_p += kl_term(a, mid);
        kl_q += kl_term(b, mid);
    }
    (0.5 * kl_p + 0.5 * kl_q).clamp(0.0, std::f64::consts::LN_2)
}

/// Drift of popularity between stages `t` and `s` of the table, computed on
/// the unclamped distributions.
pub fn drift_of_popularity(p: &PopularityTable, t: usize, s: usize) -> Result<f64> {
    let a = p.distribution(t)?.ok_or(Error::EmptyStage(t))?;
    let b = p.distribution(s)?.ok_or(Error::EmptyStage(s))?;
    if t == s {
        return Ok(0.0);
    }
    Ok(jensen_shannon(&a, &b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastMethod {
    /// Method (a): reuse the last stage's popularity.
    #[default]
    LastStage,
    /// Method (b): extrapolate the change between the last two stages.
    LinearTrend,
}

impl std::str::FromStr for ForecastMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "last-stage" | "last_stage" => Ok(ForecastMethod::LastStage),
            "b" | "linear-trend" | "linear_trend" => Ok(ForecastMethod::LinearTrend),
            _ => Err(Error::config(format!("unknown forecast method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityForecast {
    pub m_tilde: Vec<f64>,
    pub method: ForecastMethod,
    pub alpha: f64,
    pub substages: usize,
}

impl PopularityForecast {
    pub fn get(&self, item: usize) -> Result<f64> {
        self.m_tilde
            .get(item)
            .copied()
            .ok_or(Error::MissingForecast(item))
    }

    /// Same forecast value for every item.
    pub fn uniform(num_items: usize) -> Self {
        PopularityForecast {
            m_tilde: vec![1.0 / num_items.max(1) as f64; num_items],
            method: ForecastMethod::LastStage,
            alpha: 0.0,
            substages: 1,
        }
    }
}

/// Forecasts from the last one or two rows of a stage-local table.
pub fn forecast_from_table(
    p: &PopularityTable,
    method: ForecastMethod,
    alpha: f64,
) -> Result<PopularityForecast> {
    let t = p.num_stages();
    if t == 0 {
        return Err(Error::EmptyDataset);
    }
    if p.stage_total(t - 1) == 0 {
        return Err(Error::EmptyStage(t - 1));
    }
    let last = &p.m[t - 1];
    let eps = p.epsilon[t - 1];
    let m_tilde = match method {
        ForecastMethod::LastStage => last.clone(),
        ForecastMethod::LinearTrend => {
            if t < 2 {
                return Err(Error::config("linear-trend forecast needs two stages"));
            }
            let prev = &p.m[t - 2];
            last.iter()
                .zip(prev)
                .map(|(&a, &b)| (a + alpha * (a - b)).max(eps))
                .collect()
        }
    };
    Ok(PopularityForecast {
        m_tilde,
        method,
        alpha,
        substages: 1,
    })
}

/// Forecasts next-stage popularity. With `substages > 1` the last training
/// stage is re-split into that many equal-width sub-stages (over its own time
/// span) and the forecast is driven by the final one or two of them.
pub fn forecast_popularity(
    s: &StagedDataset,
    method: ForecastMethod,
    alpha: f64,
    substages: usize,
    policy: EpsilonPolicy,
) -> Result<PopularityForecast> {
    if substages == 0 {
        return Err(Error::config("substage count must be at least 1"));
    }
    if s.num_stages() == 0 {
        return Err(Error::EmptyDataset);
    }
    if substages == 1 {
        return forecast_from_table(&local_popularity(s, policy), method, alpha);
    }
    let last = s.last_stage();
    let mut stamps: Vec<u64> = last.iter().map(|e| e.timestamp).collect();
    stamps.sort_unstable();
    stamps.dedup();
    if stamps.len() < substages {
        return Err(Error::DegenerateSubstages {
            requested: substages,
            distinct: stamps.len(),
        });
    }
    let (_, parts) = bucket_by_time(last, substages);
    let counts = count_rows(parts.iter().map(Vec::as_slice), s.num_items());
    let table = PopularityTable::from_counts(counts, policy, false);
    let mut f = forecast_from_table(&table, method, alpha)?;
    f.substages = substages;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_stages, Dataset, Interaction};

    fn staged(stages: &[&[(usize, usize)]], num_items: usize) -> StagedDataset {
        // (item, count) pairs per stage, user fixed.
        let mut stages_out = Vec::new();
        let mut ts = 0;
        for st in stages {
            let mut evs = Vec::new();
            for &(item, n) in st.iter() {
                for _ in 0..n {
                    evs.push(Event {
                        user: 0,
                        item,
                        timestamp: ts,
                    });
                    ts += 1;
                }
            }
            stages_out.push(evs);
        }
        StagedDataset {
            users: vec!["u".into()],
            items: (0..num_items).map(|i| format!("i{i}")).collect(),
            boundaries: (0..=stages.len()).map(|k| k as f64).collect(),
            stages: stages_out,
        }
    }

    #[test]
    fn single_support_stage() {
        let p = local_popularity(&staged(&[&[(0, 4)]], 3), EpsilonPolicy::HalfShare);
        assert_eq!(p.m[0][0], 1.0);
        assert_eq!(p.m[0][1], 0.125);
    }

    #[test]
    fn shares_from_counts() {
        let p = local_popularity(&staged(&[&[(0, 3), (1, 1)]], 3), EpsilonPolicy::HalfShare);
        assert_eq!(p.m[0][0], 0.75);
        assert_eq!(p.m[0][1], 0.25);
        assert_eq!(p.counts[0], vec![3, 1, 0]);
    }

    #[test]
    fn zero_count_clamp_is_half_share() {
        let p = local_popularity(&staged(&[&[(0, 100)]], 2), EpsilonPolicy::HalfShare);
        assert_eq!(p.m[0][1], 0.005);
        assert_eq!(p.epsilon[0], 0.005);
        let p = local_popularity(&staged(&[&[(0, 100)]], 2), EpsilonPolicy::Fixed(1e-6));
        assert_eq!(p.m[0][1], 1e-6);
    }

    #[test]
    fn empty_stage_is_all_epsilon() {
        let p = local_popularity(&staged(&[&[(0, 4)], &[]], 2), EpsilonPolicy::HalfShare);
        assert_eq!(p.m[1], vec![0.125, 0.125]);
        assert!(p.distribution(1).unwrap().is_none());
    }

    #[test]
    fn global_pools_stages() {
        let g = global_popularity(&staged(&[&[(0, 1)], &[(0, 1)]], 1), EpsilonPolicy::HalfShare);
        assert_eq!(g.m[0][0], 1.0);
        let g = global_popularity(
            &staged(&[&[(0, 3), (1, 1)], &[(1, 4)]], 3),
            EpsilonPolicy::HalfShare,
        );
        assert_eq!(g.m[0][0], 0.375);
        assert_eq!(g.m[0][1], 0.625);
        assert_eq!(g.m[0][2], 0.5 / 8.0);
        assert_eq!(g.get(7, 1), 0.625);
    }

    #[test]
    fn drift_basics() {
        let p = local_popularity(
            &staged(&[&[(0, 1)], &[(1, 1)], &[(0, 3), (1, 1)], &[(0, 1), (1, 3)]], 2),
            EpsilonPolicy::HalfShare,
        );
        assert_eq!(drift_of_popularity(&p, 2, 2).unwrap(), 0.0);
        let d = drift_of_popularity(&p, 0, 1).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(
            drift_of_popularity(&p, 2, 3).unwrap(),
            drift_of_popularity(&p, 3, 2).unwrap()
        );
        assert!(matches!(
            drift_of_popularity(&p, 0, 9),
            Err(Error::StageOutOfRange { .. })
        ));
    }

    #[test]
    fn linear_trend_forecast() {
        // stage shares: prev 0.2, last 0.3 for item 0
        let s = staged(&[&[(0, 2), (1, 8)], &[(0, 3), (1, 7)]], 2);
        let p = local_popularity(&s, EpsilonPolicy::HalfShare);
        let f = forecast_from_table(&p, ForecastMethod::LinearTrend, 1.0).unwrap();
        assert!((f.m_tilde[0] - 0.4).abs() < 1e-12);
        let f0 = forecast_from_table(&p, ForecastMethod::LinearTrend, 0.0).unwrap();
        let fa = forecast_from_table(&p, ForecastMethod::LastStage, 0.0).unwrap();
        assert_eq!(f0.m_tilde, fa.m_tilde);
        assert_eq!(fa.m_tilde, p.m[1]);
    }

    #[test]
    fn negative_trend_is_clamped() {
        let s = staged(&[&[(0, 5), (1, 5)], &[(0, 1), (1, 9)]], 2);
        let p = local_popularity(&s, EpsilonPolicy::HalfShare);
        let f = forecast_from_table(&p, ForecastMethod::LinearTrend, 1.0).unwrap();
        // 0.1 + (0.1 - 0.5) = -0.3
        assert_eq!(f.m_tilde[0], p.epsilon[1]);
    }

    #[test]
    fn substage_forecast_uses_final_substage() {
        let rows = vec![
            ("u", "a", 0u64),
            ("u", "a", 10),
            ("u", "a", 11),
            ("u", "b", 18),
            ("u", "b", 19),
        ];
        let d = Dataset::from_interactions(
            rows.into_iter()
                .map(|(u, i, t)| Interaction {
                    user: u.into(),
                    item: i.into(),
                    timestamp: t,
                })
                .collect(),
        )
        .unwrap();
        let s = split_stages(&d, 2).unwrap();
        // last stage holds ts 10,11,18,19; halves: {10,11} | {18,19}
        let f = forecast_popularity(&s, ForecastMethod::LastStage, 0.0, 2, EpsilonPolicy::HalfShare)
            .unwrap();
        assert_eq!(f.substages, 2);
        assert_eq!(f.m_tilde, vec![0.25, 1.0]);
        let f = forecast_popularity(&s, ForecastMethod::LinearTrend, 1.0, 2, EpsilonPolicy::HalfShare)
            .unwrap();
        assert_eq!(f.m_tilde, vec![0.25, 1.75]);
        assert!(matches!(
            forecast_popularity(&s, ForecastMethod::LastStage, 0.0, 5, EpsilonPolicy::HalfShare),
            Err(Error::DegenerateSubstages {
                requested: 5,
                distinct: 4
            })
        ));
    }
}
