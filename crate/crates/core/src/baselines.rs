//! Reference scorers: most-popular, most-recent, plain BPR-MF and BPR-MF with
//! forecast popularity applied at inference.

use serde::{Deserialize, Serialize};

use crate::data::EvalSplit;
use crate::error::{Error, Result};
use crate::eval::{PdaScorer, Scorer};
use crate::popularity::PopularityForecast;
use crate::scoring::FactorModel;
use crate::trainer::{Mode, PopularityScope, TrainConfig};

/// Every method the runner can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(rename = "mostpop")]
    MostPop,
    #[serde(rename = "mostrecent")]
    MostRecent,
    Bprmf,
    BprmfA,
    Pd,
    PdG,
    Pda,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::MostPop,
        Method::MostRecent,
        Method::Bprmf,
        Method::BprmfA,
        Method::Pd,
        Method::PdG,
        Method::Pda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MostPop => "mostpop",
            Method::MostRecent => "mostrecent",
            Method::Bprmf => "bprmf",
            Method::BprmfA => "bprmf-a",
            Method::Pd => "pd",
            Method::PdG => "pd-g",
            Method::Pda => "pda",
        }
    }

    /// Methods that train a factor model.
    pub fn is_trained(self) -> bool {
        !matches!(self, Method::MostPop | Method::MostRecent)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Training configuration a trained method implies, derived from `base`.
/// BPR-MF and BPR-MF-A are the same trainer with `gamma = 0`.
pub fn train_config_for(method: Method, base: &TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match method {
        Method::Bprmf | Method::BprmfA => {
            cfg.gamma = 0.0;
            cfg.mode = Mode::Pd;
            cfg.popularity_scope = PopularityScope::Local;
        }
        Method::Pd => {
            cfg.mode = Mode::Pd;
            cfg.popularity_scope = PopularityScope::Local;
        }
        Method::PdG => {
            cfg.mode = Mode::Pd;
            cfg.popularity_scope = PopularityScope::Global;
        }
        Method::Pda => {
            cfg.mode = Mode::Pda;
            cfg.popularity_scope = PopularityScope::Local;
        }
        Method::MostPop | Method::MostRecent => {
            return Err(Error::config(format!("{method} is not a trained method")))
        }
    }
    Ok(cfg)
}

/// User-independent scores from item counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountScorer {
    pub counts: Vec<f64>,
}

impl Scorer for CountScorer {
    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, _user: usize, item: usize) -> f64 {
        self.counts[item]
    }

    fn score_user(&self, _user: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.counts);
    }
}

/// Total training count of each item.
pub fn most_pop_scorer(split: &EvalSplit) -> Result<CountScorer> {
    if split.train.num_interactions() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0.0; split.num_items()];
    for (_, e) in split.train.events() {
        counts[e.item] += 1.0;
    }
    Ok(CountScorer { counts })
}

/// Count of each item in the last training stage only.
pub fn most_recent_scorer(split: &EvalSplit) -> Result<CountScorer> {
    let last = split.train.last_stage();
    if last.is_empty() {
        return Err(Error::EmptyStage(split.train.num_stages().saturating_sub(1)));
    }
    let mut counts = vec![0.0; split.num_items()];
    for e in last {
        counts[e.item] += 1.0;
    }
    Ok(CountScorer { counts })
}

/// Forecast popularity applied at inference to a model trained without
/// popularity (`gamma = 0`).
pub fn bprmf_a_scorer<'a>(
    model: &'a FactorModel,
    forecast: &PopularityForecast,
    gamma_tilde: f64,
) -> Result<PdaScorer<'a, FactorModel>> {
    if model.gamma != 0.0 {
        return Err(Error::config(format!(
            "BPRMF-A expects a model trained with gamma = 0, got {}",
            model.gamma
        )));
    }
    PdaScorer::new(model, forecast, gamma_tilde)
}
