//! Synthetic interaction logs generated from a popularity-confounded causal
//! graph with known ground-truth interest.
//!
//! Per stage `t` every event is produced as:
//!
//! 1. exposure: item `i` drawn with probability proportional to
//!    `z_i^t ^ exposure_bias_strength` (popularity drives exposure);
//! 2. a user `u` drawn uniformly;
//! 3. consumption accepted with probability proportional to
//!    `interest(u, i) * z_i^t ^ conformity_strength` (rejection sampling
//!    against the global bound), otherwise the draw is discarded.
//!
//! The popularity snapshot `z^t` mixes an injected per-item trajectory with
//! the previous stage's realized shares (`feedback`).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event};
use crate::error::{Error, Result};

/// Time units per stage in generated timestamps.
pub const STAGE_SPAN: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Rank of the nonnegative interest factors.
    pub latent_dim: usize,
    /// Factors are `softplus(latent_scale * N(0, 1))`; larger scales give
    /// sparser, more user-specific tastes.
    pub latent_scale: f64,
    /// Interest is `(u . v / latent_dim)^sharpness`.
    pub interest_sharpness: f64,
    /// Exponent on popularity in the consumption probability (Z -> C).
    pub conformity_strength: f64,
    /// Exponent on popularity in the exposure probability (Z -> I).
    pub exposure_bias_strength: f64,
    pub stages: usize,
    pub events_per_stage: usize,
    /// Standard deviation of items' static log-popularity. Zero gives a
    /// uniform trajectory.
    pub popularity_spread: f64,
    /// Amplitude of each item's rise-and-fall in log-popularity. Zero gives a
    /// driftless trajectory.
    pub drift_strength: f64,
    /// Width, in stages, of an item's popularity lifecycle.
    pub lifecycle_width: f64,
    /// Weight of the previous stage's realized popularity in the snapshot.
    pub feedback: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_users: 1000,
            num_items: 500,
            latent_dim: 8,
            latent_scale: 1.0,
            interest_sharpness: 4.0,
            conformity_strength: 0.5,
            exposure_bias_strength: 0.5,
            stages: 10,
            events_per_stage: 10_000,
            popularity_spread: 1.0,
            drift_strength: 0.0,
            lifecycle_width: 2.0,
            feedback: 0.2,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.num_users == 0 || self.num_items == 0 {
            return bad("simulation needs users and items");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.stages == 0 || self.events_per_stage == 0 {
            return bad("stages and events_per_stage must be positive");
        }
        if !(self.conformity_strength >= 0.0 && self.exposure_bias_strength >= 0.0) {
            return bad("causal edge strengths must be non-negative");
        }
        if !(self.interest_sharpness > 0.0 && self.latent_scale > 0.0) {
            return bad("interest_sharpness and latent_scale must be positive");
        }
        if !(self.popularity_spread >= 0.0 && self.drift_strength >= 0.0) {
            return bad("popularity spread and drift must be non-negative");
        }
        if !(self.lifecycle_width > 0.0) {
            return bad("lifecycle_width must be positive");
        }
        if !(0.0..=1.0).contains(&self.feedback) {
            return bad("feedback must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Ground truth of a simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub config: SimConfig,
    /// Row-major `num_users x num_items`, non-negative.
    pub true_interest: Vec<f64>,
    /// Injected popularity per stage (`stages x num_items`), each row sums to 1.
    pub trajectory: Vec<Vec<f64>>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

impl SimWorld {
    /// Draws interest factors and the popularity trajectory from `config.seed`.
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let d = config.latent_dim;
        let user_f: Vec<f64> = (0..config.num_users * d)
            .map(|_| softplus(config.latent_scale * normal.sample(&mut rng)))
            .collect();
        let item_f: Vec<f64> = (0..config.num_items * d)
            .map(|_| softplus(config.latent_scale * normal.sample(&mut rng)))
            .collect();
        let mut true_interest = Vec::with_capacity(config.num_users * config.num_items);
        for u in 0..config.num_users {
            let pu = &user_f[u * d..(u + 1) * d];
            for i in 0..config.num_items {
                let qi = &item_f[i * d..(i + 1) * d];
                let x: f64 = pu.iter().zip(qi).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                true_interest.push(x.powf(config.interest_sharpness));
            }
        }
        let base: Vec<f64> = (0..config.num_items)
            .map(|_| config.popularity_spread * normal.sample(&mut rng))
            .collect();
        // Peaks spread over the horizon and slightly beyond it, so some items
        // are still rising when the log ends.
        let t_max = config.stages as f64;
        let peaks: Vec<f64> = (0..config.num_items)
            .map(|_| rng.random_range(-0.2 * t_max..1.2 * t_max))
            .collect();
        let trajectory = (0..config.stages)
            .map(|t| {
                let mut row: Vec<f64> = (0..config.num_items)
                    .map(|i| {
                        let z = (t as f64 - peaks[i]) / config.lifecycle_width;
                        (base[i] - config.drift_strength * (1.0 - (-0.5 * z * z).exp())).exp()
                    })
                    .collect();
                normalize(&mut row);
                row
            })
            .collect();
        let world = SimWorld {
            config,
            true_interest,
            trajectory,
        };
        if world.true_interest.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateWorld("all interest is zero".into()));
        }
        Ok(world)
    }

    pub fn num_users(&self) -> usize {
        self.config.num_users
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn interest(&self, user: usize, item: usize) -> f64 {
        self.true_interest[user * self.config.num_items + item]
    }

    pub fn interest_row(&self, user: usize) -> &[f64] {
        let n = self.config.num_items;
        &self.true_interest[user * n..(user + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.config.num_users * self.config.num_items;
        if self.true_interest.len() != n {
            return Err(Error::DegenerateWorld("interest matrix has the wrong shape".into()));
        }
        if self.true_interest.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::DegenerateWorld("interest must be finite and non-negative".into()));
        }
        if self.true_interest.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateWorld("all interest is zero".into()));
        }
        if self.trajectory.len() != self.config.stages
            || self.trajectory.iter().any(|r| r.len() != self.config.num_items)
        {
            return Err(Error::DegenerateWorld("trajectory has the wrong shape".into()));
        }
        Ok(())
    }

    pub fn write_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let w: SimWorld = serde_json::from_reader(std::io::BufReader::new(f))?;
        w.validate()?;
        Ok(w)
    }
}

/// Cumulative-weight sampler.
struct Categorical {
    cum: Vec<f64>,
}

impl Categorical {
    fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cum = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Categorical { cum }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cum.last().expect("non-empty");
        let x = rng.random::<f64>() * total;
        self.cum.partition_point(|&c| c <= x).min(self.cum.len() - 1)
    }
}

/// Generated log plus the world and the popularity snapshots that drove it.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub dataset: Dataset,
    pub world: SimWorld,
    /// Popularity snapshot `z^t` used in each stage.
    pub snapshots: Vec<Vec<f64>>,
    user_of: HashMap<String, usize>,
    item_of: HashMap<String, usize>,
}

impl SimDataset {
    /// World user index of a dataset user id.
    pub fn world_user(&self, external: &str) -> Option<usize> {
        self.user_of.get(external).copied()
    }

    pub fn world_item(&self, external: &str) -> Option<usize> {
        self.item_of.get(external).copied()
    }
}

pub fn user_id(u: usize) -> String {
    format!("u{u}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i}")
}

/// Runs the generative process for every stage with `events_per_stage`
/// accepted events each. Stage `t` events get timestamps spread over
/// `[t * STAGE_SPAN, (t + 1) * STAGE_SPAN - 1]`, so equal-width staging of the
/// output recovers the generating stages exactly.
pub fn generate(world: &SimWorld, events_per_stage: usize) -> Result<SimDataset> {
    world.validate()?;
    let cfg = &world.config;
    if events_per_stage == 0 {
        return Err(Error::config("events_per_stage must be positive"));
    }
    let n_items = cfg.num_items;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let max_interest = world.true_interest.iter().cloned().fold(0.0, f64::max);

    let mut events: Vec<(usize, usize, u64)> = Vec::with_capacity(cfg.stages * events_per_stage);
    let mut snapshots = Vec::with_capacity(cfg.stages);
    let mut realized: Option<Vec<f64>> = None;
    for t in 0..cfg.stages {
        let mut z = world.trajectory[t].clone();
        if let Some(prev) = &realized {
            for (zi, pi) in z.iter_mut().zip(prev) {
                *zi = (1.0 - cfg.feedback) * *zi + cfg.feedback * pi;
            }
        }
        normalize(&mut z);
        let exposure: Vec<f64> = z.iter().map(|&p| p.powf(cfg.exposure_bias_strength)).collect();
        let conformity: Vec<f64> = z.iter().map(|&p| p.powf(cfg.conformity_strength)).collect();
        let bound = max_interest * conformity.iter().cloned().fold(0.0, f64::max);
        let expose = Categorical::new(&exposure);
        let mut counts = vec![0u64; n_items];
        let mut accepted = 0usize;
        while accepted < events_per_stage {
            let i = expose.sample(&mut rng);
            let u = rng.random_range(0..cfg.num_users);
            let p = world.interest(u, i) * conformity[i] / bound;
            if rng.random::<f64>() < p {
                let offset = if events_per_stage > 1 {
                    accepted as u64 * (STAGE_SPAN - 1) / (events_per_stage as u64 - 1)
                } else {
                    0
                };
                events.push((u, i, t as u64 * STAGE_SPAN + offset));
                counts[i] += 1;
                accepted += 1;
            }
        }
        // Realized shares, with half a count of smoothing for unseen items.
        let total = accepted as f64 + 0.5 * n_items as f64;
        realized = Some(counts.iter().map(|&c| (c as f64 + 0.5) / total).collect());
        snapshots.push(z);
    }

    let raw = events
        .into_iter()
        .map(|(u, i, ts)| crate::data::Interaction {
            user: user_id(u),
            item: item_id(i),
            timestamp: ts,
        })
        .collect();
    let dataset = Dataset::from_interactions(raw)?;
    let user_of = dataset
        .users
        .iter()
        .map(|s| (s.clone(), s[1..].parse().expect("generated id")))
        .collect();
    let item_of = dataset
        .items
        .iter()
        .map(|s| (s.clone(), s[1..].parse().expect("generated id")))
        .collect();
    Ok(SimDataset {
        dataset,
        world: world.clone(),
        snapshots,
        user_of,
        item_of,
    })
}

/// Top-`k` items by true interest, ties by index.
pub fn oracle_ranking(world: &SimWorld, user: usize, k: usize) -> Vec<usize> {
    let row = world.interest_row(user);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Dataset events with world indices, for analyses against ground truth.
pub fn world_events(sim: &SimDataset) -> Vec<Event> {
    sim.dataset
        .events
        .iter()
        .map(|e| Event {
            user: sim.user_of[&sim.dataset.users[e.user]],
            item: sim.item_of[&sim.dataset.items[e.item]],
            timestamp: e.timestamp,
        })
        .collect()
}
