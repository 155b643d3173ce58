//! Pairwise (BPR) training of the popularity-conditioned factor model.
//!
//! Each observed interaction `(u, i)` in stage `t` is paired with one
//! uniformly drawn unobserved item `j`; the loss is
//! `softplus(-(s(u,i,m_i^t) - s(u,j,m_j^t)))` averaged over the batch, where
//! `s = elu'(f) * m^gamma`, plus `lambda` times the batch-averaged squared norm
//! of the three embedding rows each example touches.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSplit, UserItemSets};
use crate::error::{Error, Result};
use crate::eval::{validation_recall, PdScorer, PdaScorer};
use crate::popularity::{PopularityForecast, PopularityTable};
use crate::scoring::{dot, elu_prime, elu_prime_grad, pop_power, FactorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Validate and recommend with `elu'(f)`.
    #[default]
    Pd,
    /// Validate and recommend with the forecast-adjusted score, `gamma_tilde = gamma`.
    Pda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PopularityScope {
    #[default]
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_lambda: f64,
    pub gamma: f64,
    pub mode: Mode,
    pub popularity_scope: PopularityScope,
    pub patience: usize,
    pub max_epochs: usize,
    pub embedding_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// Cutoff of the validation recall used for early stopping.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 2048,
            l2_lambda: 0.0,
            gamma: 0.0,
            mode: Mode::Pd,
            popularity_scope: PopularityScope::Local,
            patience: 100,
            max_epochs: 1000,
            embedding_dim: 64,
            init_scale: 0.1,
            seed: 0,
            eval_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be non-negative");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be at least 1");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        if self.eval_k == 0 {
            return bad("eval_k must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub user: usize,
    pub pos: usize,
    pub stage: usize,
    pub neg: usize,
}

/// Draws an item `user` never interacted with in training, uniformly, by
/// rejection against the user's training set.
pub fn sample_negative<R: Rng + ?Sized>(
    train: &UserItemSets,
    num_items: usize,
    user: usize,
    rng: &mut R,
) -> Result<usize> {
    let seen = train.items(user);
    if seen.len() >= num_items {
        return Err(Error::NoNegativeCandidate(user));
    }
    loop {
        let j = rng.random_range(0..num_items);
        if seen.binary_search(&j).is_err() {
            return Ok(j);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m_user: Vec<f64>,
    v_user: Vec<f64>,
    m_item: Vec<f64>,
    v_item: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &FactorModel) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_user: vec![0.0; model.user_emb.len()],
            v_user: vec![0.0; model.user_emb.len()],
            m_item: vec![0.0; model.item_emb.len()],
            v_item: vec![0.0; model.item_emb.len()],
        }
    }
}

/// Gradient rows for the embeddings a batch touched.
#[derive(Debug, Clone)]
pub struct SparseGrad {
    dim: usize,
    buf: Vec<f64>,
    mark: Vec<bool>,
    touched: Vec<usize>,
}

impl SparseGrad {
    pub fn new(rows: usize, dim: usize) -> Self {
        SparseGrad {
            dim,
            buf: vec![0.0; rows * dim],
            mark: vec![false; rows],
            touched: Vec::new(),
        }
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        if !self.mark[r] {
            self.mark[r] = true;
            self.touched.push(r);
        }
        &mut self.buf[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.buf[r * self.dim..(r + 1) * self.dim]
    }

    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    fn clear(&mut self) {
        for &r in &self.touched {
            self.mark[r] = false;
            self.buf[r * self.dim..(r + 1) * self.dim].fill(0.0);
        }
        self.touched.clear();
    }

    /// Dense copy, zero for untouched rows.
    pub fn to_dense(&self) -> Vec<f64> {
        self.buf.clone()
    }
}

#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub user: SparseGrad,
    pub item: SparseGrad,
}

impl BatchGrads {
    pub fn new(model: &FactorModel) -> Self {
        BatchGrads {
            user: SparseGrad::new(model.num_users, model.dim),
            item: SparseGrad::new(model.num_items, model.dim),
        }
    }
}

/// `-ln sigmoid(x)` without overflow.
#[inline]
pub fn softplus_neg(x: f64) -> f64 {
    let z = -x;
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub data: f64,
    pub l2: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.data + self.l2
    }
}

fn popularity_weight(pop: &PopularityTable, stage: usize, item: usize, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        pop_power(pop.get(stage, item), gamma)
    }
}

/// Loss and, when `grads` is given, its gradient with respect to every touched
/// embedding row.
pub fn loss_and_grad(
    model: &FactorModel,
    batch: &[TrainExample],
    pop: &PopularityTable,
    gamma: f64,
    l2_lambda: f64,
    mut grads: Option<&mut BatchGrads>,
) -> LossParts {
    let n = batch.len().max(1) as f64;
    let mut data = 0.0;
    let mut l2 = 0.0;
    for ex in batch {
        let pu = model.user_row(ex.user);
        let qi = model.item_row(ex.pos);
        let qj = model.item_row(ex.neg);
        let fi = dot(pu, qi);
        let fj = dot(pu, qj);
        let wi = popularity_weight(pop, ex.stage, ex.pos, gamma);
        let wj = popularity_weight(pop, ex.stage, ex.neg, gamma);
        let x = elu_prime(fi) * wi - elu_prime(fj) * wj;
        data += softplus_neg(x);
        if l2_lambda > 0.0 {
            l2 += dot(pu, pu) + dot(qi, qi) + dot(qj, qj);
        }
        if let Some(g) = grads.as_deref_mut() {
            let dx = -sigmoid(-x) / n;
            let a = dx * elu_prime_grad(fi) * wi;
            let b = -dx * elu_prime_grad(fj) * wj;
            let reg = 2.0 * l2_lambda / n;
            let gu = g.user.row_mut(ex.user);
            for k in 0..pu.len() {
                gu[k] += a * qi[k] + b * qj[k] + reg * pu[k];
            }
            let gi = g.item.row_mut(ex.pos);
            for k in 0..pu.len() {
                gi[k] += a * pu[k] + reg * qi[k];
            }
            let gj = g.item.row_mut(ex.neg);
            for k in 0..pu.len() {
                gj[k] += b * pu[k] + reg * qj[k];
            }
        }
    }
    LossParts {
        data: data / n,
        l2: l2_lambda * l2 / n,
    }
}

pub fn pairwise_loss(
    model: &FactorModel,
    batch: &[TrainExample],
    pop: &PopularityTable,
    cfg: &TrainConfig,
) -> f64 {
    loss_and_grad(model, batch, pop, cfg.gamma, cfg.l2_lambda, None).total()
}

fn adam_rows(
    params: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: &SparseGrad,
    lr: f64,
    state: (f64, f64, f64, u64),
) {
    let (b1, b2, eps, t) = state;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let dim = grad.dim;
    for &r in grad.touched() {
        let g = grad.row(r);
        for k in 0..dim {
            let ix = r * dim + k;
            m[ix] = b1 * m[ix] + (1.0 - b1) * g[k];
            v[ix] = b2 * v[ix] + (1.0 - b2) * g[k] * g[k];
            params[ix] -= lr * (m[ix] / c1) / ((v[ix] / c2).sqrt() + eps);
        }
    }
}

fn check_finite(grads: &BatchGrads) -> std::result::Result<(), String> {
    for (name, g) in [("user", &grads.user), ("item", &grads.item)] {
        for &r in g.touched() {
            if let Some(k) = g.row(r).iter().position(|x| !x.is_finite()) {
                return Err(format!("{name} row {r} coordinate {k} = {}", g.row(r)[k]));
            }
        }
    }
    Ok(())
}

/// One Adam update on the rows touched by `batch`; untouched rows and their
/// moment estimates are left as they are. Returns the batch loss before the
/// update.
pub fn step(
    model: &mut FactorModel,
    adam: &mut AdamState,
    grads: &mut BatchGrads,
    batch: &[TrainExample],
    pop: &PopularityTable,
    cfg: &TrainConfig,
) -> std::result::Result<f64, String> {
    assert!(!batch.is_empty(), "batch must not be empty");
    grads.user.clear();
    grads.item.clear();
    let loss = loss_and_grad(model, batch, pop, cfg.gamma, cfg.l2_lambda, Some(grads));
    check_finite(grads)?;
    adam.step += 1;
    let st = (adam.beta1, adam.beta2, adam.eps, adam.step);
    adam_rows(
        &mut model.user_emb,
        &mut adam.m_user,
        &mut adam.v_user,
        &grads.user,
        cfg.learning_rate,
        st,
    );
    adam_rows(
        &mut model.item_emb,
        &mut adam.m_item,
        &mut adam.v_item,
        &grads.item,
        cfg.learning_rate,
        st,
    );
    Ok(loss.total())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub valid_recall: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation recall.
    pub model: FactorModel,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub log: Vec<EpochLog>,
}

pub fn write_log_jsonl<W: Write>(log: &[EpochLog], mut out: W) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        writeln!(out).map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

/// Source of per-epoch validation scores. The default implementation ranks
/// validation users with the mode's scorer; tests substitute scripted values.
pub trait Validator {
    fn validate(&mut self, model: &FactorModel, epoch: usize) -> Result<f64>;
}

/// Recall@k on the validation holdout with the mode's scorer.
pub struct HoldoutValidator<'a> {
    split: &'a EvalSplit,
    truth: crate::data::GroundTruth,
    forecast: Option<&'a PopularityForecast>,
    mode: Mode,
    gamma: f64,
    k: usize,
}

impl<'a> HoldoutValidator<'a> {
    pub fn new(
        split: &'a EvalSplit,
        forecast: Option<&'a PopularityForecast>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let truth = split.validation_truth();
        if truth.is_empty() {
            return Err(Error::NoValidationUsers);
        }
        if cfg.mode == Mode::Pda && forecast.is_none() {
            return Err(Error::config("PDA mode needs a popularity forecast"));
        }
        Ok(HoldoutValidator {
            split,
            truth,
            forecast,
            mode: cfg.mode,
            gamma: cfg.gamma,
            k: cfg.eval_k,
        })
    }
}

impl Validator for HoldoutValidator<'_> {
    fn validate(&mut self, model: &FactorModel, _epoch: usize) -> Result<f64> {
        match self.mode {
            Mode::Pd => validation_recall(&PdScorer(model), self.split, &self.truth, self.k),
            Mode::Pda => {
                let f = self.forecast.expect("checked in constructor");
                let scorer = PdaScorer::new(model, f, self.gamma)?;
                validation_recall(&scorer, self.split, &self.truth, self.k)
            }
        }
    }
}

/// Every training interaction as `(user, item, stage)`.
pub fn positive_triples(split: &EvalSplit) -> Vec<(usize, usize, usize)> {
    split
        .train
        .events()
        .map(|(s, e)| (e.user, e.item, s))
        .collect()
}

/// Trains with early stopping on validation Recall@`eval_k`.
pub fn train(
    split: &EvalSplit,
    pop: &PopularityTable,
    forecast: Option<&PopularityForecast>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut validator = HoldoutValidator::new(split, forecast, cfg)?;
    train_with(split, pop, cfg, &mut validator)
}

pub fn train_with<V: Validator>(
    split: &EvalSplit,
    pop: &PopularityTable,
    cfg: &TrainConfig,
    validator: &mut V,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match (cfg.popularity_scope, pop.pooled) {
        (PopularityScope::Local, true) => {
            return Err(Error::config("local popularity scope needs a per-stage table"))
        }
        (PopularityScope::Global, false) => {
            return Err(Error::config("global popularity scope needs a pooled table"))
        }
        _ => {}
    }
    if pop.num_items() != split.num_items() {
        return Err(Error::config("popularity table does not match the item catalog"));
    }
    let train_sets = split.train_sets();
    let num_items = split.num_items();
    let mut model = FactorModel::random(
        split.num_users(),
        num_items,
        cfg.embedding_dim,
        cfg.init_scale,
        cfg.seed,
    );
    model.gamma = cfg.gamma;
    model.gamma_tilde = match cfg.mode {
        Mode::Pd => 0.0,
        Mode::Pda => cfg.gamma,
    };
    let mut adam = AdamState::new(&model);
    let mut grads = BatchGrads::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut positives = positive_triples(split);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut best: Option<(usize, f64, FactorModel)> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        positives.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in positives.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            for &(user, pos, stage) in chunk {
                let neg = sample_negative(train_sets, num_items, user, &mut rng)?;
                batch.push(TrainExample {
                    user,
                    pos,
                    stage,
                    neg,
                });
            }
            if b == 0 {
                let ex = batch[0];
                assert!(
                    train_sets.contains(ex.user, ex.pos) && !train_sets.contains(ex.user, ex.neg),
                    "training example violates the positive/negative contract: {ex:?}"
                );
            }
            loss_sum += step(&mut model, &mut adam, &mut grads, &batch, pop, cfg).map_err(
                |detail| Error::NonFiniteGradient {
                    epoch,
                    batch: b,
                    detail,
                },
            )?;
            batches += 1;
        }
        let recall = validator.validate(&model, epoch)?;
        let improved = best.as_ref().is_none_or(|(_, r, _)| recall > *r);
        if improved {
            best = Some((epoch, recall, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            valid_recall: recall,
            best: improved,
        });
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_recall, model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_recall,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_eval_split, split_stages, Dataset, Interaction};
    use crate::popularity::{global_popularity, local_popularity, EpsilonPolicy};

    fn toy_split() -> EvalSplit {
        let mut rows = Vec::new();
        for u in 0..12 {
            for (k, i) in [(u % 6), ((u + 1) % 6), ((u + 2) % 6)].iter().enumerate() {
                rows.push(Interaction {
                    user: format!("u{u}"),
                    item: format!("i{i}"),
                    timestamp: (k * 10 + u) as u64,
                });
            }
            rows.push(Interaction {
                user: format!("u{u}"),
                item: format!("i{}", (u + 3) % 6),
                timestamp: 100,
            });
        }
        let d = Dataset::from_interactions(rows).unwrap();
        make_eval_split(&split_stages(&d, 3).unwrap(), 0.5, 1).unwrap()
    }

    #[test]
    fn negatives_avoid_training_items() {
        let split = toy_split();
        let sets = split.train_sets();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for u in 0..12 {
            for _ in 0..50 {
                let j = sample_negative(sets, 6, u, &mut rng).unwrap();
                assert!(!sets.contains(u, j));
            }
        }
    }

    fn one_user_sets(items: &[usize]) -> UserItemSets {
        use crate::data::{Event, StagedDataset};
        UserItemSets::from_staged(&StagedDataset {
            users: vec!["u".into()],
            items: vec![],
            boundaries: vec![0.0, 1.0],
            stages: vec![items
                .iter()
                .map(|&item| Event {
                    user: 0,
                    item,
                    timestamp: 0,
                })
                .collect()],
        })
    }

    #[test]
    fn forced_and_impossible_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets = one_user_sets(&[0, 1, 3]);
        for _ in 0..100 {
            assert_eq!(sample_negative(&sets, 4, 0, &mut rng).unwrap(), 2);
        }
        assert!(matches!(
            sample_negative(&one_user_sets(&[0, 1, 2, 3]), 4, 0, &mut rng),
            Err(Error::NoNegativeCandidate(0))
        ));
    }

    #[test]
    fn negatives_are_uniform() {
        // 2 of 4 items seen: each free item expects 5000 of 10000 draws,
        // binomial sd = 50; chi-square with 1 dof below 10.83 (p = 0.001).
        let sets = one_user_sets(&[0, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut hits = [0u64; 4];
        for _ in 0..10_000 {
            hits[sample_negative(&sets, 4, 0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(hits[0] + hits[2], 0);
        let chi2 = [hits[1], hits[3]]
            .iter()
            .map(|&h| (h as f64 - 5000.0).powi(2) / 5000.0)
            .sum::<f64>();
        assert!(chi2 < 10.83, "chi2 = {chi2}, hits = {hits:?}");
        assert!((hits[1] as f64 - 5000.0).abs() <= 150.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_neg(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus_neg(800.0) >= 0.0 && softplus_neg(800.0) < 1e-300);
        assert!((softplus_neg(-800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn equal_scores_give_ln2() {
        let split = toy_split();
        let pop = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let model = FactorModel::zeros(split.num_users(), split.num_items(), 4);
        let batch = [TrainExample {
            user: 0,
            pos: 0,
            stage: 0,
            neg: 5,
        }];
        let cfg = TrainConfig::default();
        assert!((pairwise_loss(&model, &batch, &pop, &cfg) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn l2_term_only_adds() {
        let split = toy_split();
        let pop = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let model = FactorModel::random(split.num_users(), split.num_items(), 4, 0.3, 3);
        let batch = [TrainExample {
            user: 1,
            pos: 1,
            stage: 0,
            neg: 4,
        }];
        let p0 = loss_and_grad(&model, &batch, &pop, 0.1, 0.0, None);
        assert_eq!(p0.l2, 0.0);
        let p1 = loss_and_grad(&model, &batch, &pop, 0.1, 0.01, None);
        assert_eq!(p1.data, p0.data);
        assert!(p1.total() >= p0.total());
    }

    #[test]
    fn zero_learning_rate_leaves_model() {
        let split = toy_split();
        let pop = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let mut model = FactorModel::random(split.num_users(), split.num_items(), 4, 0.1, 3);
        let before = model.clone();
        let mut adam = AdamState::new(&model);
        let mut grads = BatchGrads::new(&model);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let batch = [TrainExample {
            user: 0,
            pos: 0,
            stage: 0,
            neg: 5,
        }];
        step(&mut model, &mut adam, &mut grads, &batch, &pop, &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn untouched_rows_stay_put() {
        let split = toy_split();
        let pop = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let mut model = FactorModel::random(split.num_users(), split.num_items(), 4, 0.1, 3);
        let before = model.clone();
        let mut adam = AdamState::new(&model);
        let mut grads = BatchGrads::new(&model);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            gamma: 0.2,
            ..Default::default()
        };
        let batch = [TrainExample {
            user: 2,
            pos: 2,
            stage: 0,
            neg: 5,
        }];
        for _ in 0..3 {
            step(&mut model, &mut adam, &mut grads, &batch, &pop, &cfg).unwrap();
        }
        for u in (0..split.num_users()).filter(|&u| u != 2) {
            assert_eq!(model.user_row(u), before.user_row(u));
        }
        for i in [0, 1, 3, 4] {
            assert_eq!(model.item_row(i), before.item_row(i));
        }
        assert_ne!(model.user_row(2), before.user_row(2));
    }

    #[test]
    fn single_step_descends() {
        let split = toy_split();
        let pop = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let mut model = FactorModel::random(split.num_users(), split.num_items(), 8, 0.1, 5);
        let mut adam = AdamState::new(&model);
        let mut grads = BatchGrads::new(&model);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            gamma: 0.1,
            ..Default::default()
        };
        let batch = [TrainExample {
            user: 3,
            pos: 3,
            stage: 0,
            neg: 0,
        }];
        let before = pairwise_loss(&model, &batch, &pop, &cfg);
        step(&mut model, &mut adam, &mut grads, &batch, &pop, &cfg).unwrap();
        assert!(pairwise_loss(&model, &batch, &pop, &cfg) < before);
    }

    struct Scripted(Vec<f64>);

    impl Validator for Scripted {
        fn validate(&mut self, _: &FactorModel, epoch: usize) -> Result<f64> {
            Ok(self.0[epoch - 1])
        }
    }

    #[test]
    fn early_stop_returns_first_epoch() {
        let split = toy_split();
        let pop = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let cfg = TrainConfig {
            patience: 1,
            max_epochs: 10,
            embedding_dim: 4,
            batch_size: 8,
            learning_rate: 0.01,
            ..Default::default()
        };
        let out = train_with(&split, &pop, &cfg, &mut Scripted(vec![0.5, 0.4, 0.3, 0.2])).unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.best_epoch, 1);
        // Epoch-1 checkpoint replay: one epoch with patience 1 and an improving
        // score gives the same parameters.
        let cfg1 = TrainConfig {
            max_epochs: 1,
            ..cfg.clone()
        };
        let one = train_with(&split, &pop, &cfg1, &mut Scripted(vec![0.5])).unwrap();
        assert_eq!(one.model, out.model);
    }

    #[test]
    fn scope_must_match_table() {
        let split = toy_split();
        let local = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let global = global_popularity(&split.train, EpsilonPolicy::HalfShare);
        let cfg = TrainConfig {
            popularity_scope: PopularityScope::Global,
            max_epochs: 1,
            ..Default::default()
        };
        assert!(train_with(&split, &local, &cfg, &mut Scripted(vec![0.0])).is_err());
        assert!(train_with(&split, &global, &cfg, &mut Scripted(vec![0.0])).is_ok());
    }

    #[test]
    fn training_is_deterministic() {
        let split = toy_split();
        let pop = local_popularity(&split.train, EpsilonPolicy::HalfShare);
        let cfg = TrainConfig {
            max_epochs: 5,
            patience: 5,
            embedding_dim: 4,
            batch_size: 4,
            learning_rate: 0.01,
            gamma: 0.1,
            seed: 9,
            ..Default::default()
        };
        let a = train(&split, &pop, None, &cfg).unwrap();
        let b = train(&split, &pop, None, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
    }
}
