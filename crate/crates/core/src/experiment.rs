//! Experiment orchestration: configuration, grid search with validation-only
//! selection, report files and comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    bprmf_a_scorer, most_pop_scorer, most_recent_scorer, train_config_for, CountScorer, Method,
};
use crate::data::{
    kcore_filter, load_interactions, make_eval_split, split_stages, Dataset, EvalSplit,
    SplitSummary, StagedDataset,
};
use crate::error::Error;
use crate::eval::{
    compute_metrics, partition_groups, recommend_topk, recommendation_rate, training_rate,
    validation_recall, GroupPartition, Holdout, Metrics, MetricsReport, PdScorer, PdaScorer,
    RankedList, RecommendationRate, Scorer,
};
use crate::popularity::{
    drift_of_popularity, forecast_popularity, global_popularity, local_popularity, EpsilonPolicy,
    ForecastMethod, PopularityForecast, PopularityTable,
};
use crate::scoring::FactorModel;
use crate::sim::{generate, SimConfig, SimWorld};
use crate::trainer::{train, EpochLog, PopularityScope, TrainConfig};

/// Inclusive arithmetic grid `start, start + step, ...` up to `stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn single(v: f64) -> Self {
        Grid {
            start: v,
            stop: v,
            step: 1.0,
        }
    }

    pub fn values(&self) -> anyhow::Result<Vec<f64>> {
        ensure!(
            self.start.is_finite() && self.stop.is_finite() && self.step.is_finite(),
            "grid bounds must be finite"
        );
        ensure!(self.step > 0.0, "grid step must be positive");
        ensure!(self.stop >= self.start, "grid stop lies below its start");
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n)
            .map(|k| ((self.start + k as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

/// Where the interactions come from: a delimited file or a simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub delimiter: char,
    pub simulate: Option<SimConfig>,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource {
            path: None,
            delimiter: '\t',
            simulate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSpec {
    pub method: ForecastMethod,
    pub alpha: f64,
    pub substages: usize,
}

impl Default for ForecastSpec {
    fn default() -> Self {
        ForecastSpec {
            method: ForecastMethod::LinearTrend,
            alpha: 1.0,
            substages: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Zero disables the k-core filter.
    pub kcore: usize,
    pub stages: usize,
    pub valid_frac: f64,
    pub method: Method,
    pub train: TrainConfig,
    pub forecast: ForecastSpec,
    pub gamma_grid: Grid,
    pub gamma_tilde_grid: Grid,
    /// Search the inference exponent for PDA instead of reusing the training one.
    pub tune_gamma_tilde: bool,
    /// Unchanged validation steps after which the inference-exponent search stops.
    pub flat_steps: usize,
    pub ks: Vec<usize>,
    pub rr_k: usize,
    pub rr_groups: usize,
    pub output_dir: PathBuf,
    /// Drives the split, the trainer and the simulator.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            kcore: 10,
            stages: 10,
            valid_frac: 0.5,
            method: Method::Pd,
            train: TrainConfig::default(),
            forecast: ForecastSpec::default(),
            gamma_grid: Grid {
                start: 0.02,
                stop: 0.25,
                step: 0.02,
            },
            gamma_tilde_grid: Grid {
                start: 0.02,
                stop: 1.0,
                step: 0.02,
            },
            tune_gamma_tilde: false,
            flat_steps: 3,
            ks: vec![20, 50],
            rr_k: 20,
            rr_groups: 10,
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        toml::from_str(s).context("parsing experiment config")
    }

    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serializing experiment config")
    }

    /// Copy with the top-level seed pushed into the trainer and simulator.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = c.seed;
        if let Some(sim) = c.data.simulate.as_mut() {
            sim.seed = c.seed;
        }
        c
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.data.path, &self.data.simulate) {
            (Some(p), None) => ensure!(p.exists(), "input file {} does not exist", p.display()),
            (None, Some(sim)) => sim.validate()?,
            _ => bail!("exactly one of data.path and data.simulate must be set"),
        }
        ensure!(self.stages >= 2, "at least 2 stages are needed");
        ensure!(
            self.valid_frac > 0.0 && self.valid_frac < 1.0,
            "valid_frac must lie in (0, 1)"
        );
        ensure!(
            !self.ks.is_empty() && self.ks.iter().all(|&k| k > 0),
            "K list must be non-empty and positive"
        );
        ensure!(self.rr_k > 0 && self.rr_groups > 0, "rr_k and rr_groups must be positive");
        ensure!(self.flat_steps > 0, "flat_steps must be positive");
        ensure!(
            self.forecast.alpha.is_finite() && self.forecast.substages >= 1,
            "forecast alpha must be finite and substages at least 1"
        );
        ensure!(
            !self.gamma_grid.values()?.is_empty() && !self.gamma_tilde_grid.values()?.is_empty(),
            "grids must be non-empty"
        );
        self.train.validate()?;
        Ok(())
    }
}

/// Dataset after filtering, staging and holdout carving.
pub struct Prepared {
    pub staged: StagedDataset,
    pub split: EvalSplit,
    pub world: Option<SimWorld>,
}

pub fn load_source(src: &DataSource) -> anyhow::Result<(Dataset, Option<SimWorld>)> {
    match (&src.path, &src.simulate) {
        (Some(p), None) => Ok((load_interactions(p, src.delimiter)?, None)),
        (None, Some(sim)) => {
            let world = SimWorld::new(sim.clone())?;
            let generated = generate(&world, sim.events_per_stage)?;
            Ok((generated.dataset, Some(world)))
        }
        _ => bail!("exactly one of data.path and data.simulate must be set"),
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<Prepared> {
    let (raw, world) = load_source(&cfg.data)?;
    let filtered = if cfg.kcore > 0 {
        kcore_filter(&raw, cfg.kcore)?
    } else {
        raw
    };
    let staged = split_stages(&filtered, cfg.stages)?;
    let split = make_eval_split(&staged, cfg.valid_frac, cfg.seed)?;
    Ok(Prepared {
        staged,
        split,
        world,
    })
}

/// Popularity tables and forecast derived from the training stages.
pub struct PopularityContext {
    pub local: PopularityTable,
    pub global: PopularityTable,
    pub forecast: PopularityForecast,
}

pub fn popularity_context(
    split: &EvalSplit,
    spec: &ForecastSpec,
) -> anyhow::Result<PopularityContext> {
    let policy = EpsilonPolicy::HalfShare;
    Ok(PopularityContext {
        local: local_popularity(&split.train, policy),
        global: global_popularity(&split.train, policy),
        forecast: forecast_popularity(
            &split.train,
            spec.method,
            spec.alpha,
            spec.substages,
            policy,
        )?,
    })
}

/// Scorer of any method, behind one type.
pub enum MethodScorer<'a> {
    Count(CountScorer),
    Pd(PdScorer<'a, FactorModel>),
    Pda(PdaScorer<'a, FactorModel>),
}

impl Scorer for MethodScorer<'_> {
    fn num_items(&self) -> usize {
        match self {
            MethodScorer::Count(s) => s.num_items(),
            MethodScorer::Pd(s) => s.num_items(),
            MethodScorer::Pda(s) => s.num_items(),
        }
    }

    fn score(&self, user: usize, item: usize) -> f64 {
        match self {
            MethodScorer::Count(s) => s.score(user, item),
            MethodScorer::Pd(s) => s.score(user, item),
            MethodScorer::Pda(s) => s.score(user, item),
        }
    }

    fn score_user(&self, user: usize, out: &mut [f64]) {
        match self {
            MethodScorer::Count(s) => s.score_user(user, out),
            MethodScorer::Pd(s) => s.score_user(user, out),
            MethodScorer::Pda(s) => s.score_user(user, out),
        }
    }
}

/// Builds the inference scorer of `method`. Trained methods need `model`;
/// forecast-adjusted ones need `gamma_tilde`.
pub fn method_scorer<'a>(
    method: Method,
    split: &EvalSplit,
    model: Option<&'a FactorModel>,
    forecast: &PopularityForecast,
    gamma_tilde: Option<f64>,
) -> anyhow::Result<MethodScorer<'a>> {
    let need_model = || model.ok_or_else(|| anyhow::anyhow!("{method} needs a trained model"));
    let need_gt =
        || gamma_tilde.ok_or_else(|| anyhow::anyhow!("{method} needs an inference exponent"));
    Ok(match method {
        Method::MostPop => MethodScorer::Count(most_pop_scorer(split)?),
        Method::MostRecent => MethodScorer::Count(most_recent_scorer(split)?),
        Method::Bprmf | Method::Pd | Method::PdG => MethodScorer::Pd(PdScorer(need_model()?)),
        Method::BprmfA => MethodScorer::Pda(bprmf_a_scorer(need_model()?, forecast, need_gt()?)?),
        Method::Pda => MethodScorer::Pda(PdaScorer::new(need_model()?, forecast, need_gt()?)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub gamma: f64,
    pub gamma_tilde: Option<f64>,
    pub valid_recall: f64,
    pub best_epoch: Option<usize>,
}

/// Outcome of model selection on the validation holdout.
#[derive(Debug, Clone)]
pub struct Selection {
    pub model: Option<FactorModel>,
    pub gamma: Option<f64>,
    pub gamma_tilde: Option<f64>,
    pub best_epoch: Option<usize>,
    pub valid_recall: f64,
    pub log: Vec<EpochLog>,
    pub trace: Vec<GridPoint>,
}

/// Sweeps `grid` in order and keeps the best validation recall; stops once
/// the recall (rounded to 6 decimals) has not changed for `flat_steps`
/// consecutive steps.
pub fn sweep_gamma_tilde(
    method: Method,
    split: &EvalSplit,
    model: &FactorModel,
    forecast: &PopularityForecast,
    grid: &[f64],
    flat_steps: usize,
    k: usize,
) -> anyhow::Result<(f64, f64, Vec<GridPoint>)> {
    let truth = split.validation_truth();
    let mut best: Option<(f64, f64)> = None;
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut flat = 0usize;
    for &gt in grid {
        let scorer = method_scorer(method, split, Some(model), forecast, Some(gt))?;
        let r = validation_recall(&scorer, split, &truth, k)?;
        trace.push(GridPoint {
            gamma: model.gamma,
            gamma_tilde: Some(gt),
            valid_recall: r,
            best_epoch: None,
        });
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((gt, r));
        }
        let rounded = (r * 1e6).round();
        if prev == Some(rounded) {
            flat += 1;
            if flat >= flat_steps {
                break;
            }
        } else {
            flat = 0;
        }
        prev = Some(rounded);
    }
    let (gt, r) = best.context("empty inference-exponent grid")?;
    Ok((gt, r, trace))
}

/// Grid search over the training exponent (and, where it applies, the
/// inference exponent). Reads only the validation holdout.
pub fn select(
    cfg: &ExperimentConfig,
    split: &EvalSplit,
    pc: &PopularityContext,
) -> anyhow::Result<Selection> {
    let method = cfg.method;
    let k = cfg.train.eval_k;
    if !method.is_trained() {
        let scorer = method_scorer(method, split, None, &pc.forecast, None)?;
        let r = validation_recall(&scorer, split, &split.validation_truth(), k)?;
        return Ok(Selection {
            model: None,
            gamma: None,
            gamma_tilde: None,
            best_epoch: None,
            valid_recall: r,
            log: Vec::new(),
            trace: Vec::new(),
        });
    }
    let gammas = match method {
        Method::Bprmf | Method::BprmfA => vec![0.0],
        _ => cfg.gamma_grid.values()?,
    };
    let mut trace = Vec::new();
    let mut best: Option<(f64, crate::trainer::TrainOutcome)> = None;
    for g in gammas {
        let tcfg = train_config_for(
            method,
            &TrainConfig {
                gamma: g,
                ..cfg.train.clone()
            },
        )?;
        let pop = match tcfg.popularity_scope {
            PopularityScope::Local => &pc.local,
            PopularityScope::Global => &pc.global,
        };
        let fc = (method == Method::Pda).then_some(&pc.forecast);
        let out = train(split, pop, fc, &tcfg).with_context(|| format!("training at gamma {g}"))?;
        trace.push(GridPoint {
            gamma: g,
            gamma_tilde: fc.map(|_| g),
            valid_recall: out.best_recall,
            best_epoch: Some(out.best_epoch),
        });
        if best.as_ref().is_none_or(|(_, b)| out.best_recall > b.best_recall) {
            best = Some((g, out));
        }
    }
    let (gamma, out) = best.context("empty gamma grid")?;
    let (gamma_tilde, valid_recall) = match method {
        Method::BprmfA => {
            let (gt, r, t) = sweep_gamma_tilde(
                method,
                split,
                &out.model,
                &pc.forecast,
                &cfg.gamma_tilde_grid.values()?,
                cfg.flat_steps,
                k,
            )?;
            trace.extend(t);
            (Some(gt), r)
        }
        Method::Pda if cfg.tune_gamma_tilde => {
            let (gt, r, t) = sweep_gamma_tilde(
                method,
                split,
                &out.model,
                &pc.forecast,
                &cfg.gamma_tilde_grid.values()?,
                cfg.flat_steps,
                k,
            )?;
            trace.extend(t);
            if r > out.best_recall {
                (Some(gt), r)
            } else {
                (Some(gamma), out.best_recall)
            }
        }
        Method::Pda => (Some(gamma), out.best_recall),
        _ => (None, out.best_recall),
    };
    Ok(Selection {
        model: Some(out.model),
        gamma: Some(gamma),
        gamma_tilde,
        best_epoch: Some(out.best_epoch),
        valid_recall,
        log: out.log,
        trace,
    })
}

/// Keeps the first `k` entries of every list.
pub fn prefix(rl: &RankedList, k: usize) -> RankedList {
    let mut out = rl.clone();
    out.k = k.min(rl.k);
    for l in &mut out.lists {
        l.items.truncate(k);
        l.scores.truncate(k);
    }
    out
}

pub struct TestEvaluation {
    pub metrics: MetricsReport,
    pub rr: RecommendationRate,
    pub ranked: RankedList,
}

/// Ranks test users once at the largest cutoff and derives metrics at every
/// K plus the group recommendation rate at `rr_k`.
pub fn evaluate_test<S: Scorer>(
    scorer: &S,
    split: &EvalSplit,
    ks: &[usize],
    rr_k: usize,
    groups: &GroupPartition,
) -> anyhow::Result<TestEvaluation> {
    let kmax = ks.iter().copied().chain([rr_k]).max().unwrap_or(rr_k);
    let ranked = recommend_topk(scorer, split, Holdout::Test, kmax);
    let truth = split.test_truth();
    let metrics = compute_metrics(&ranked, &truth, ks)?;
    let rr = recommendation_rate(&prefix(&ranked, rr_k), groups);
    Ok(TestEvaluation {
        metrics,
        rr,
        ranked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    /// 1-based stage index.
    pub stage: usize,
    /// Drift to the following stage; empty for the last stage.
    pub dp_next: Option<f64>,
    /// Drift from the first stage.
    pub dp_from_first: Option<f64>,
}

/// Per-stage drift series. Pairs that involve an empty stage yield `None`.
pub fn drift_rows(table: &PopularityTable) -> Vec<DriftRow> {
    let n = table.num_stages();
    (0..n)
        .map(|t| DriftRow {
            stage: t + 1,
            dp_next: (t + 1 < n)
                .then(|| drift_of_popularity(table, t, t + 1).ok())
                .flatten(),
            dp_from_first: drift_of_popularity(table, 0, t).ok(),
        })
        .collect()
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Header lines embedding the run's config and seed in text artifacts.
pub fn provenance_header(method: Method, seed: u64, config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    format!("# method={method} seed={seed}\n# config={json}\n")
}

pub fn drift_csv(rows: &[DriftRow], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str("stage,dp_next,dp_from_first\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{}",
            r.stage,
            opt_cell(r.dp_next),
            opt_cell(r.dp_from_first)
        );
    }
    s
}

pub fn rr_csv(
    groups: &GroupPartition,
    train_rr: &RecommendationRate,
    rr: &RecommendationRate,
    header: &str,
) -> String {
    let mut s = String::from(header);
    s.push_str("group,items,train_interactions,training_rate,recommendation_rate\n");
    for g in 0..groups.groups {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            g + 1,
            groups.members[g].len(),
            groups.mass[g],
            train_rr.rates[g],
            rr.rates[g]
        );
    }
    s
}

/// Everything `run` learned, serialized as the metrics JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub split: SplitSummary,
    pub selected_gamma: Option<f64>,
    pub selected_gamma_tilde: Option<f64>,
    pub best_epoch: Option<usize>,
    pub valid_recall: f64,
    pub grid: Vec<GridPoint>,
    /// Test holdout reads observed before evaluation; always zero.
    pub test_reads_during_selection: usize,
    pub metrics: MetricsReport,
    pub rr_k: usize,
    pub rr: RecommendationRate,
    pub training_rr: RecommendationRate,
}

/// Fields shared by every report that `compare` accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub method: Method,
    pub seed: u64,
    pub metrics: MetricsReport,
}

impl From<&RunReport> for ReportSummary {
    fn from(r: &RunReport) -> Self {
        ReportSummary {
            method: r.method,
            seed: r.seed,
            metrics: r.metrics.clone(),
        }
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub selection: Selection,
    pub drift: Vec<DriftRow>,
    pub groups: GroupPartition,
}

/// Runs one experiment in memory without writing files.
pub fn execute(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let cfg = cfg.resolved();
    cfg.validate().context("config")?;
    let prepared = prepare(&cfg).context("prepare")?;
    let split = &prepared.split;
    let pc = popularity_context(split, &cfg.forecast).context("popularity")?;
    let selection = select(&cfg, split, &pc).context("train")?;
    let reads = split.test_reads();
    if reads != 0 {
        bail!("test holdout was read {reads} times during selection");
    }

    let counts = pc.global.pooled_counts();
    let groups = partition_groups(&counts, cfg.rr_groups).context("analyze")?;
    let scorer = method_scorer(
        cfg.method,
        split,
        selection.model.as_ref(),
        &pc.forecast,
        selection.gamma_tilde,
    )
    .context("evaluate")?;
    let ev = evaluate_test(&scorer, split, &cfg.ks, cfg.rr_k, &groups).context("evaluate")?;
    let drift = drift_rows(&local_popularity(&prepared.staged, EpsilonPolicy::HalfShare));

    let report = RunReport {
        method: cfg.method,
        seed: cfg.seed,
        split: split.summary(),
        selected_gamma: selection.gamma,
        selected_gamma_tilde: selection.gamma_tilde,
        best_epoch: selection.best_epoch,
        valid_recall: selection.valid_recall,
        grid: selection.trace.clone(),
        test_reads_during_selection: reads,
        metrics: ev.metrics,
        rr_k: cfg.rr_k,
        rr: ev.rr,
        training_rr: training_rate(&counts, &groups),
        config: cfg,
    };
    Ok(RunOutput {
        report,
        selection,
        drift,
        groups,
    })
}

pub const METRICS_FILE: &str = "metrics.json";
pub const RR_FILE: &str = "rr.csv";
pub const DRIFT_FILE: &str = "drift.csv";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn write(path: PathBuf, contents: &[u8]) -> anyhow::Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e).into())
}

/// Training log as JSON lines, preceded by a header line with config and seed.
pub fn log_jsonl(log: &[EpochLog], method: Method, seed: u64, config: &ExperimentConfig) -> String {
    let header = serde_json::json!({ "method": method, "seed": seed, "config": config });
    let mut s = format!("{header}\n");
    for e in log {
        s.push_str(&serde_json::to_string(e).expect("log serializes"));
        s.push('\n');
    }
    s
}

/// Runs one experiment and writes its artifacts into `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let out = execute(cfg)?;
    let r = &out.report;
    let dir = &r.config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = provenance_header(r.method, r.seed, &r.config);
    let mut json = serde_json::to_string_pretty(r)?;
    json.push('\n');
    write(dir.join(METRICS_FILE), json.as_bytes())?;
    write(
        dir.join(RR_FILE),
        rr_csv(&out.groups, &r.training_rr, &r.rr, &header).as_bytes(),
    )?;
    write(dir.join(DRIFT_FILE), drift_csv(&out.drift, &header).as_bytes())?;
    write(
        dir.join(LOG_FILE),
        log_jsonl(&out.selection.log, r.method, r.seed, &r.config).as_bytes(),
    )?;
    let snapshot = format!("# method={} seed={}\n{}", r.method, r.seed, r.config.to_toml()?);
    write(dir.join(CONFIG_FILE), snapshot.as_bytes())?;
    if let Some(m) = &out.selection.model {
        m.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(out)
}

/// Methods by metrics, with relative improvement over the first report.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub ks: Vec<usize>,
    pub labels: Vec<String>,
    pub rows: Vec<BTreeMap<usize, Metrics>>,
}

pub const METRIC_NAMES: [&str; 4] = ["recall", "precision", "hr", "ndcg"];

fn metric_values(m: &Metrics) -> [f64; 4] {
    [m.recall, m.precision, m.hit_ratio, m.ndcg]
}

fn rel_improvement(value: f64, base: f64) -> f64 {
    if value == base {
        0.0
    } else {
        100.0 * (value / base - 1.0)
    }
}

pub fn compare(reports: &[ReportSummary]) -> anyhow::Result<Comparison> {
    ensure!(reports.len() >= 2, "comparison needs at least two reports");
    let ks: BTreeSet<usize> = reports[0].metrics.metrics.keys().copied().collect();
    for r in &reports[1..] {
        let other: BTreeSet<usize> = r.metrics.metrics.keys().copied().collect();
        if other != ks {
            return Err(Error::ReportMismatch(format!(
                "K sets differ: {:?} vs {:?}",
                ks, other
            ))
            .into());
        }
    }
    let mut labels: Vec<String> = reports.iter().map(|r| r.method.to_string()).collect();
    let names = labels.clone();
    for (i, l) in labels.iter_mut().enumerate() {
        if names.iter().filter(|n| *n == l).count() > 1 {
            *l = format!("{l}#{}", i + 1);
        }
    }
    Ok(Comparison {
        ks: ks.into_iter().collect(),
        labels,
        rows: reports.iter().map(|r| r.metrics.metrics.clone()).collect(),
    })
}

impl Comparison {
    /// Relative improvement in percent of `row` over the first row, per metric.
    pub fn metric_ri(&self, row: usize, k: usize) -> [f64; 4] {
        let v = metric_values(&self.rows[row][&k]);
        let b = metric_values(&self.rows[0][&k]);
        std::array::from_fn(|j| rel_improvement(v[j], b[j]))
    }

    /// Mean of the per-metric improvements at `k`.
    pub fn ri(&self, row: usize, k: usize) -> f64 {
        self.metric_ri(row, k).iter().sum::<f64>() / 4.0
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        let mut rule = String::from("|---|");
        for k in &self.ks {
            for n in ["Recall", "Precision", "HR", "NDCG", "RI"] {
                let _ = write!(s, " {n}@{k} |");
                rule.push_str("---:|");
            }
        }
        s.push('\n');
        s.push_str(&rule);
        s.push('\n');
        for (i, label) in self.labels.iter().enumerate() {
            let _ = write!(s, "| {label} |");
            for &k in &self.ks {
                for v in metric_values(&self.rows[i][&k]) {
                    let _ = write!(s, " {v:.4} |");
                }
                if i == 0 {
                    s.push_str(" - |");
                } else {
                    let _ = write!(s, " {:.1}% |", self.ri(i, k));
                }
            }
            s.push('\n');
        }
        s
    }

    /// Long format: one line per method, K and metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,k,metric,value,ri_percent\n");
        for (i, label) in self.labels.iter().enumerate() {
            for &k in &self.ks {
                let vals = metric_values(&self.rows[i][&k]);
                let ri = self.metric_ri(i, k);
                for j in 0..4 {
                    let _ = writeln!(s, "{label},{k},{},{},{}", METRIC_NAMES[j], vals[j], ri[j]);
                }
            }
        }
        s
    }
}
