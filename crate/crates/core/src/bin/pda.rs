//! Command-line front end: data preparation, simulation, training,
//! evaluation, drift and recommendation-rate analyses, and report comparison.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pda_core::baselines::{train_config_for, Method};
use pda_core::data::{kcore_filter, load_interactions, split_stages, write_interactions, EvalSplit};
use pda_core::eval::{partition_groups, per_user_metrics, training_rate, MetricsReport, RecommendationRate};
use pda_core::experiment::{
    compare, drift_csv, drift_rows, evaluate_test, method_scorer, popularity_context, rr_csv,
    ExperimentConfig, ForecastSpec, ReportSummary,
};
use pda_core::popularity::{local_popularity, EpsilonPolicy, ForecastMethod};
use pda_core::scoring::FactorModel;
use pda_core::sim::{generate, SimConfig, SimWorld};
use pda_core::trainer::{train, PopularityScope, TrainConfig};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "PDA_THREADS";

#[derive(Parser)]
#[command(name = "pda", version, about = "Popularity-deconfounded recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter, stage and split an interaction file into a split cache.
    Prepare(PrepareArgs),
    /// Generate a synthetic interaction log and its ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Train one model on a split cache and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a method on the test holdout of a split cache.
    Evaluate(EvaluateArgs),
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Tabulate several reports with relative improvements over the first.
    Compare(CompareArgs),
    /// Run a full experiment from a config file.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Popularity drift between stages.
    Drift(DriftArgs),
    /// Recommendation rate per popularity group.
    Rr(RrArgs),
}

fn parse_delimiter(s: &str) -> Result<char, String> {
    match s {
        "tab" | "\\t" | "\t" => Ok('\t'),
        "comma" => Ok(','),
        "space" => Ok(' '),
        _ => {
            let mut c = s.chars();
            match (c.next(), c.next()) {
                (Some(ch), None) => Ok(ch),
                _ => Err(format!("delimiter must be one character or tab/comma/space, got {s:?}")),
            }
        }
    }
}

#[derive(Args)]
struct InputArgs {
    /// Interaction file with user, item and timestamp columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tab", value_parser = parse_delimiter)]
    delimiter: char,
    /// Minimum degree of the k-core filter; 0 disables it.
    #[arg(long, default_value_t = 10)]
    kcore: usize,
    #[arg(long, default_value_t = 10)]
    stages: usize,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 0.5)]
    valid_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split cache to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    /// TOML file with simulator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    events_per_stage: Option<usize>,
    #[arg(long)]
    conformity: Option<f64>,
    #[arg(long)]
    exposure: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    lifecycle_width: Option<f64>,
    #[arg(long)]
    feedback: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    latent_scale: Option<f64>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long, default_value = "tab", value_parser = parse_delimiter)]
    delimiter: char,
    /// Interaction file to write.
    #[arg(long)]
    out: PathBuf,
    /// World file; defaults to `<out>.world.json`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    /// `a` (last stage) or `b` (linear trend).
    #[arg(long, default_value = "b")]
    forecast: ForecastMethod,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    substages: usize,
}

impl ForecastArgs {
    fn spec(&self) -> ForecastSpec {
        ForecastSpec {
            method: self.forecast,
            alpha: self.alpha,
            substages: self.substages,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    seed: u64,
    /// TOML file with trainer settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[command(flatten)]
    forecast: ForecastArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ScorerArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    method: Method,
    /// Checkpoint of a trained method.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Inference exponent; PDA defaults to the checkpoint's.
    #[arg(long)]
    gamma_tilde: Option<f64>,
    #[command(flatten)]
    forecast: ForecastArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long = "k", value_delimiter = ',', default_values_t = [20, 50])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    rr_k: usize,
    #[arg(long, default_value_t = 10)]
    groups: usize,
    /// JSON report to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-user metrics CSV.
    #[arg(long)]
    per_user: Option<PathBuf>,
}

#[derive(Args)]
struct DriftArgs {
    /// Interaction file; all of its stages are analyzed.
    #[arg(long, conflicts_with = "split")]
    input: Option<PathBuf>,
    /// Split cache; its training stages are analyzed.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "tab", value_parser = parse_delimiter)]
    delimiter: char,
    #[arg(long, default_value_t = 10)]
    kcore: usize,
    #[arg(long, default_value_t = 10)]
    stages: usize,
    /// CSV to write; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RrArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    groups: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Report JSON files; the first is the reference row.
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    /// `md` or `csv`.
    #[arg(long, default_value = "md")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// Report written by `evaluate`.
#[derive(Debug, Serialize, Deserialize)]
struct EvalReport {
    method: Method,
    seed: u64,
    checkpoint: Option<PathBuf>,
    gamma: Option<f64>,
    gamma_tilde: Option<f64>,
    forecast: ForecastSpec,
    metrics: MetricsReport,
    rr_k: usize,
    rr: RecommendationRate,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn read_split(path: &Path) -> Result<EvalSplit> {
    EvalSplit::read_cache(path).with_context(|| format!("reading split cache {}", path.display()))
}

fn load_model(method: Method, checkpoint: Option<&Path>) -> Result<Option<FactorModel>> {
    match (method.is_trained(), checkpoint) {
        (false, _) => Ok(None),
        (true, Some(p)) => Ok(Some(
            FactorModel::load(p).with_context(|| format!("loading {}", p.display()))?,
        )),
        (true, None) => bail!("{method} needs --checkpoint"),
    }
}

fn resolve_gamma_tilde(method: Method, arg: Option<f64>, model: Option<&FactorModel>) -> Result<Option<f64>> {
    Ok(match method {
        Method::Pda => Some(arg.or(model.map(|m| m.gamma_tilde)).context("missing gamma tilde")?),
        Method::BprmfA => Some(arg.context("bprmf-a needs --gamma-tilde")?),
        _ => None,
    })
}

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        data: pda_core::experiment::DataSource {
            path: Some(a.input.input),
            delimiter: a.input.delimiter,
            simulate: None,
        },
        kcore: a.input.kcore,
        stages: a.input.stages,
        valid_frac: a.valid_frac,
        seed: a.seed,
        ..Default::default()
    };
    let p = pda_core::experiment::prepare(&cfg).context("prepare")?;
    p.split.write_cache(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&p.split.summary())?);
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SimConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    cfg.seed = a.seed;
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => { $(if let Some(v) = a.$arg { cfg.$field = v; })* };
    }
    set!(num_users <- users, num_items <- items, stages <- stages,
         events_per_stage <- events_per_stage, conformity_strength <- conformity,
         exposure_bias_strength <- exposure, drift_strength <- drift,
         popularity_spread <- spread, lifecycle_width <- lifecycle_width,
         feedback <- feedback, latent_dim <- latent_dim, latent_scale <- latent_scale,
         interest_sharpness <- sharpness);
    let world = SimWorld::new(cfg.clone()).context("simulate")?;
    let sim = generate(&world, cfg.events_per_stage).context("simulate")?;
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = std::io::BufWriter::new(f);
    write_interactions(&sim.dataset, &mut w, a.delimiter)?;
    w.flush()?;
    let sidecar = a.sidecar.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".world.json");
        s.into()
    });
    world.write_sidecar(&sidecar)?;
    eprintln!(
        "wrote {} interactions to {} and world to {}",
        sim.dataset.len(),
        a.out.display(),
        sidecar.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    if !a.method.is_trained() {
        bail!("{} has nothing to train", a.method);
    }
    let mut base = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    base.seed = a.seed;
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => { $(if let Some(v) = a.$arg { base.$field = v; })* };
    }
    set!(gamma <- gamma, learning_rate <- lr, batch_size <- batch_size, l2_lambda <- l2,
         embedding_dim <- dim, max_epochs <- max_epochs, patience <- patience);
    let cfg = train_config_for(a.method, &base)?;
    let split = read_split(&a.split)?;
    let pc = popularity_context(&split, &a.forecast.spec()).context("popularity")?;
    let pop = match cfg.popularity_scope {
        PopularityScope::Local => &pc.local,
        PopularityScope::Global => &pc.global,
    };
    let fc = (a.method == Method::Pda).then_some(&pc.forecast);
    let out = train(&split, pop, fc, &cfg).context("train")?;
    out.model.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        s.into()
    });
    let header = serde_json::json!({ "method": a.method, "seed": a.seed, "config": cfg });
    let mut text = format!("{header}\n");
    for e in &out.log {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(&log_path, text).with_context(|| format!("writing {}", log_path.display()))?;
    eprintln!(
        "best epoch {} with validation recall@{} {:.6}",
        out.best_epoch, cfg.eval_k, out.best_recall
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let s = &a.scorer;
    let split = read_split(&s.split)?;
    let model = load_model(s.method, s.checkpoint.as_deref())?;
    let gt = resolve_gamma_tilde(s.method, s.gamma_tilde, model.as_ref())?;
    let pc = popularity_context(&split, &s.forecast.spec()).context("popularity")?;
    let scorer = method_scorer(s.method, &split, model.as_ref(), &pc.forecast, gt)?;
    let groups = partition_groups(&pc.global.pooled_counts(), a.groups)?;
    let ev = evaluate_test(&scorer, &split, &a.ks, a.rr_k, &groups).context("evaluate")?;
    if let Some(p) = &a.per_user {
        let mut text = String::from("user,k,recall,precision,hit_ratio,ndcg\n");
        for r in per_user_metrics(&ev.ranked, &split.test_truth(), &a.ks) {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                split.train.users[r.user], r.k, r.recall, r.precision, r.hit_ratio, r.ndcg
            ));
        }
        emit(Some(p), &text)?;
    }
    let report = EvalReport {
        method: s.method,
        seed: model.as_ref().map_or(split.seed, |m| m.seed),
        checkpoint: s.checkpoint.clone(),
        gamma: model.as_ref().map(|m| m.gamma),
        gamma_tilde: gt,
        forecast: s.forecast.spec(),
        metrics: ev.metrics,
        rr_k: a.rr_k,
        rr: ev.rr,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    emit(Some(&a.out), &json)
}

fn cmd_drift(a: DriftArgs) -> Result<()> {
    let staged = match (&a.input, &a.split) {
        (Some(p), None) => {
            let d = load_interactions(p, a.delimiter)?;
            let d = if a.kcore > 0 { kcore_filter(&d, a.kcore)? } else { d };
            split_stages(&d, a.stages)?
        }
        (None, Some(p)) => read_split(p)?.train,
        _ => bail!("give exactly one of --input and --split"),
    };
    let rows = drift_rows(&local_popularity(&staged, EpsilonPolicy::HalfShare));
    emit(a.out.as_deref(), &drift_csv(&rows, ""))
}

fn cmd_rr(a: RrArgs) -> Result<()> {
    let s = &a.scorer;
    let split = read_split(&s.split)?;
    let model = load_model(s.method, s.checkpoint.as_deref())?;
    let gt = resolve_gamma_tilde(s.method, s.gamma_tilde, model.as_ref())?;
    let pc = popularity_context(&split, &s.forecast.spec()).context("popularity")?;
    let scorer = method_scorer(s.method, &split, model.as_ref(), &pc.forecast, gt)?;
    let counts = pc.global.pooled_counts();
    let groups = partition_groups(&counts, a.groups)?;
    let ev = evaluate_test(&scorer, &split, &[a.k], a.k, &groups).context("evaluate")?;
    let header = format!("# method={} rr_std={}\n", s.method, ev.rr.std_dev);
    emit(
        a.out.as_deref(),
        &rr_csv(&groups, &training_rate(&counts, &groups), &ev.rr, &header),
    )
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ReportSummary>(&text)
                .with_context(|| format!("parsing report {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = compare(&reports)?;
    let text = match a.format.as_str() {
        "md" | "markdown" => table.to_markdown(),
        "csv" => table.to_csv(),
        f => bail!("unknown format {f:?}; use md or csv"),
    };
    emit(a.out.as_deref(), &text)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    let out = pda_core::experiment::run(&cfg)?;
    let r = &out.report;
    for (k, m) in &r.metrics.metrics {
        eprintln!(
            "{} recall@{k} {:.4} ndcg@{k} {:.4}",
            r.method, m.recall, m.ndcg
        );
    }
    eprintln!("artifacts in {}", r.config.output_dir.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.cmd {
        Cmd::Prepare(a) => cmd_prepare(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Analyze(AnalyzeCmd::Drift(a)) => cmd_drift(a),
        Cmd::Analyze(AnalyzeCmd::Rr(a)) => cmd_rr(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Run(a) => cmd_run(a),
    }
}
