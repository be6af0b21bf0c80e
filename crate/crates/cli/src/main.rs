//! Headless PRODUQD: scripted runs, SAIL baselines, the dimensionality
//! reduction comparison and the HTTP service.

use std::fmt;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use produqd::domains::{self, Domain, ExternalConfig};
use produqd::experiments::{dr_compare, sail_baseline, DrComparison, DrConfig, DrSource};
use produqd::ideation::{
    auto_select, events_of, run_iteration, select_classes, similarity_report, start_run, IdeationConfig, IdeationRun,
    Policy, Progress, SimilarityReport,
};
use produqd::store::{export, ExportFormat, ExportWhat};
use produqd::Genome;
use produqd_service::ServiceConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "produqd", version, about = "Prototype discovery with surrogate-assisted quality-diversity search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full ideation run with a scripted selection policy.
    Run(RunArgs),
    /// Unseeded SAIL over the whole space, optionally paired with ideation runs.
    SailBaseline(BaselineArgs),
    /// Class separation after t-SNE, PCA and no reduction.
    DrCompare(DrArgs),
    /// HTTP service for interactive runs.
    Serve(ServeArgs),
}

#[derive(Args)]
struct IdeationArgs {
    /// Settings file written by an earlier command (its config.json); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// UCB exploration weight for acquisition.
    #[arg(long)]
    kappa: Option<f64>,
    /// Size of the initial Sobol sample.
    #[arg(long)]
    initial_samples: Option<usize>,
    /// Precise evaluations per SAIL round.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Executable speaking the JSON-lines evaluation protocol.
    #[arg(long)]
    evaluator_cmd: Option<PathBuf>,
    /// Seconds to wait for each evaluator response.
    #[arg(long)]
    evaluator_timeout: Option<f64>,
    #[arg(long, default_value = "produqd-out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: IdeationArgs,
    #[arg(long)]
    iterations: Option<usize>,
    /// Precise evaluations per iteration.
    #[arg(long)]
    budget: Option<usize>,
    /// largest | largest-k=N | nearest-previous | random[=SEED]; a comma
    /// separated list gives one policy per iteration, the last one repeating.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    run_id: Option<String>,
    /// Also persist the run in this service store so it can be continued.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: IdeationArgs,
    /// Total precise evaluations, initial sample included.
    #[arg(long)]
    budget: Option<usize>,
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
    /// Pair each baseline with an ideation run of the same total budget.
    #[arg(long)]
    compare: bool,
    /// Ideation iterations of the paired runs.
    #[arg(long)]
    iterations: Option<usize>,
    /// Evaluations per iteration of the paired runs.
    #[arg(long)]
    iteration_budget: Option<usize>,
    #[arg(long)]
    policy: Option<String>,
    /// JSON array holding the genome to measure similarity against.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct DrArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use prediction-map elites of this domain instead of synthetic clusters.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    initial_samples: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value = "produqd-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "PRODUQD_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, env = "PRODUQD_STORE", default_value = "produqd-store")]
    store: PathBuf,
    #[arg(long, env = "PRODUQD_KAPPA")]
    kappa: Option<f64>,
    #[arg(long, env = "PRODUQD_INITIAL_SAMPLES")]
    initial_samples: Option<usize>,
    /// Default evaluations per iteration.
    #[arg(long, env = "PRODUQD_BUDGET")]
    budget: Option<usize>,
    #[arg(long, env = "PRODUQD_EVALUATOR_CMD")]
    evaluator_cmd: Option<PathBuf>,
    #[arg(long, env = "PRODUQD_EVALUATOR_TIMEOUT")]
    evaluator_timeout: Option<f64>,
}

/// Bad input from the caller; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return ("validation", 2);
        }
        if let Some(pe) = cause.downcast_ref::<produqd::Error>() {
            return if pe.is_validation() { ("validation", 2) } else { ("runtime", 3) };
        }
    }
    ("runtime", 3)
}

fn error_line(kind: &str, code: u8, message: &str) {
    eprintln!("error: {}", json!({ "kind": kind, "exit_code": code, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            error_line("validation", 2, e.kind().as_str().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::SailBaseline(a) => cmd_sail_baseline(a),
        Command::DrCompare(a) => cmd_dr_compare(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            error_line(kind, code, &format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}

/// The materialized settings of a command, printed first and saved as
/// config.json; `--config` reads it back.
#[derive(Debug, Serialize, Deserialize)]
struct Header<T> {
    command: String,
    settings: T,
}

fn print_header<T: Serialize>(command: &str, settings: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let header = Header {
        command: command.to_string(),
        settings,
    };
    println!("config {}", serde_json::to_string(&header)?);
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&header)? + "\n")?;
    }
    Ok(())
}

fn read_header<T: for<'de> Deserialize<'de>>(path: &Path, command: &str) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let header: Header<T> =
        serde_json::from_str(&text).map_err(|e| usage(format!("{} is not a settings file: {e}", path.display())))?;
    if header.command != command {
        bail!(usage(format!("{} holds settings for {}, not {command}", path.display(), header.command)));
    }
    Ok(header.settings)
}

fn apply_common(mut cfg: IdeationConfig, a: &IdeationArgs) -> IdeationConfig {
    if let Some(d) = &a.domain {
        cfg.domain = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.kappa {
        cfg.sail.ucb.kappa = k;
    }
    if let Some(n) = a.initial_samples {
        cfg.initial_samples = n;
    }
    if let Some(b) = a.batch_size {
        cfg.sail.batch_size = b;
    }
    if let Some(cmd) = &a.evaluator_cmd {
        cfg.external = Some(ExternalConfig::new(cmd));
    }
    if let (Some(t), Some(ext)) = (a.evaluator_timeout, cfg.external.as_mut()) {
        ext.timeout_secs = t;
    }
    cfg
}

/// One policy per iteration; the last entry repeats.
fn parse_policies(spec: &str) -> anyhow::Result<Vec<Policy>> {
    let list = spec.split(',').map(|p| p.trim().parse::<Policy>()).collect::<produqd::Result<Vec<_>>>()?;
    if list.first() == Some(&Policy::NearestPrevious) {
        bail!(usage(
            "policy nearest-previous cannot choose in iteration 1: there is no earlier selection to be near; \
             start with another policy, e.g. --policy largest,nearest-previous"
        ));
    }
    Ok(list)
}

fn policy_for(policies: &[Policy], iteration: usize) -> Policy {
    policies[(iteration - 1).min(policies.len() - 1)]
}

fn open_domain(cfg: &IdeationConfig) -> anyhow::Result<std::sync::Arc<dyn Domain>> {
    cfg.validate()?;
    Ok(domains::open(&cfg.domain, cfg.external.as_ref())?)
}

fn log_progress(p: Progress) {
    match p {
        Progress::Illuminating(s) => tracing::debug!(phase = ?s.phase, round = s.round, rounds = s.rounds, samples = s.samples_acquired, "illuminating"),
        Progress::ExtractingClasses { elites } => tracing::debug!(elites, "extracting classes"),
    }
}

/// Runs `iterations` iterations, choosing classes with the policies.
fn drive(run: &mut IdeationRun, domain: &dyn Domain, iterations: usize, budget: usize, policies: &[Policy], echo: bool) -> anyhow::Result<()> {
    for k in 1..=iterations {
        let rec = run_iteration(run, domain, budget, &log_progress)?;
        let (classes, acquired, status) = (rec.class_count(), rec.samples_acquired, rec.status.clone());
        let policy = policy_for(policies, k);
        let pick = auto_select(run, policy).with_context(|| format!("selecting in iteration {k}"))?;
        select_classes(run, k, &pick.classes)?;
        if pick.undersupplied {
            tracing::warn!(iteration = k, "fewer classes than the policy asked for");
        }
        if echo {
            println!(
                "iteration {k}: {classes} classes, selected {:?}, {acquired} samples acquired, status {}",
                pick.classes,
                serde_json::to_string(&status)?
            );
        }
    }
    Ok(())
}

fn write_run(dir: &Path, run: &IdeationRun) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string(run)? + "\n")?;
    let mut events = String::new();
    for e in events_of(run) {
        events.push_str(&serde_json::to_string(&e)?);
        events.push('\n');
    }
    fs::write(dir.join("events.jsonl"), events)?;
    fs::write(dir.join("archive.csv"), export(run, ExportWhat::Archive, ExportFormat::Csv, None)?)?;
    fs::write(dir.join("tree.csv"), export(run, ExportWhat::Tree, ExportFormat::Csv, None)?)?;
    for it in &run.iterations {
        let bytes = export(run, ExportWhat::PredictionMap, ExportFormat::Csv, Some(it.index))?;
        fs::write(dir.join(format!("prediction_map_{}.csv", it.index)), bytes)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RunSettings {
    ideation: IdeationConfig,
    iterations: usize,
    policy: String,
    run_id: String,
    store: Option<PathBuf>,
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let base = match &a.common.config {
        Some(p) => read_header::<RunSettings>(p, "run")?,
        None => RunSettings {
            ideation: IdeationConfig::default(),
            iterations: 3,
            policy: "largest".into(),
            run_id: String::new(),
            store: None,
        },
    };
    let mut ideation = apply_common(base.ideation, &a.common);
    if let Some(b) = a.budget {
        ideation.sample_budget = b;
    }
    let settings = RunSettings {
        iterations: a.iterations.unwrap_or(base.iterations),
        policy: a.policy.unwrap_or(base.policy),
        run_id: a
            .run_id
            .or(Some(base.run_id).filter(|r| !r.is_empty()))
            .unwrap_or_else(|| format!("{}-seed-{}", ideation.domain, ideation.seed)),
        store: a.store.or(base.store),
        ideation,
    };
    if settings.iterations == 0 {
        bail!(usage("--iterations must be at least 1"));
    }
    let policies = parse_policies(&settings.policy)?;
    produqd::store::validate_run_id(&settings.run_id)?;
    let store = settings.store.as_ref().map(produqd::store::RunStore::open).transpose()?;
    if store.as_ref().is_some_and(|s| s.exists(&settings.run_id)) {
        bail!(usage(format!("run {} already exists in the store", settings.run_id)));
    }
    print_header("run", &settings, Some(&a.common.out))?;

    let domain = open_domain(&settings.ideation)?;
    let mut run = start_run(settings.ideation.clone(), domain.as_ref(), settings.run_id.clone())?;
    drive(&mut run, domain.as_ref(), settings.iterations, settings.ideation.sample_budget, &policies, true)?;
    write_run(&a.common.out, &run)?;
    if let Some(store) = store {
        store.save(&run)?;
        for e in events_of(&run) {
            store.append_event(&run.run_id, &e)?;
        }
    }
    println!(
        "archive {} designs, {} invalid, {} tree nodes; written to {}",
        run.archive.len(),
        run.invalid.len(),
        run.tree.len(),
        a.common.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompareSettings {
    iterations: usize,
    iteration_budget: usize,
    policy: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BaselineSettings {
    ideation: IdeationConfig,
    total_budget: usize,
    seeds: usize,
    compare: Option<CompareSettings>,
    reference: Option<Genome>,
}

/// One method's similarity figures for one seed.
#[derive(Debug, Serialize)]
struct ComparisonRow {
    seed: u64,
    method: &'static str,
    samples: usize,
    archive_size: usize,
    elites: usize,
    mean_distance: f64,
    mean_spread: f64,
    median_predicted_fitness: f64,
    median_true_fitness: Option<f64>,
}

impl ComparisonRow {
    fn new(seed: u64, method: &'static str, run: &IdeationRun, report: &SimilarityReport) -> Self {
        Self {
            seed,
            method,
            samples: run.archive.len() + run.invalid.len(),
            archive_size: run.archive.len(),
            elites: report.elites,
            mean_distance: report.distance.mean,
            mean_spread: report.mean_spread,
            median_predicted_fitness: report.predicted_fitness.median,
            median_true_fitness: report.true_fitness.as_ref().map(|s| s.median),
        }
    }
}

#[derive(Debug, Serialize)]
struct ComparisonMean {
    method: &'static str,
    seeds: usize,
    mean_distance: f64,
    mean_spread: f64,
    median_predicted_fitness: f64,
    median_true_fitness: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(rows: &[ComparisonRow]) -> Vec<ComparisonMean> {
    let mut methods: Vec<&'static str> = rows.iter().map(|r| r.method).collect();
    methods.dedup();
    methods.sort_unstable();
    methods.dedup();
    methods
        .into_iter()
        .map(|m| {
            let rs: Vec<&ComparisonRow> = rows.iter().filter(|r| r.method == m).collect();
            let true_fitness: Option<Vec<f64>> = rs.iter().map(|r| r.median_true_fitness).collect();
            ComparisonMean {
                method: m,
                seeds: rs.len(),
                mean_distance: mean(rs.iter().map(|r| r.mean_distance)),
                mean_spread: mean(rs.iter().map(|r| r.mean_spread)),
                median_predicted_fitness: mean(rs.iter().map(|r| r.median_predicted_fitness)),
                median_true_fitness: true_fitness.map(|v| mean(v.into_iter())),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_reference(path: &Path) -> anyhow::Result<Genome> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{} is not a JSON array of numbers: {e}", path.display())))
}

fn cmd_sail_baseline(a: BaselineArgs) -> anyhow::Result<()> {
    let base = match &a.common.config {
        Some(p) => Some(read_header::<BaselineSettings>(p, "sail-baseline")?),
        None => None,
    };
    let ideation = apply_common(base.as_ref().map_or_else(IdeationConfig::default, |b| b.ideation.clone()), &a.common);
    let base_compare = base.as_ref().and_then(|b| b.compare.clone());
    let compare = if a.compare || base_compare.is_some() {
        let d = base_compare.unwrap_or(CompareSettings {
            iterations: 2,
            iteration_budget: ideation.sample_budget,
            policy: "largest".into(),
        });
        Some(CompareSettings {
            iterations: a.iterations.unwrap_or(d.iterations),
            iteration_budget: a.iteration_budget.unwrap_or(d.iteration_budget),
            policy: a.policy.clone().unwrap_or(d.policy),
        })
    } else {
        if a.iterations.is_some() || a.iteration_budget.is_some() || a.policy.is_some() {
            bail!(usage("--iterations, --iteration-budget and --policy apply only with --compare"));
        }
        None
    };
    let paired_total = compare.as_ref().map(|c| ideation.initial_samples + c.iterations * c.iteration_budget);
    let total_budget = match (a.budget.or(base.as_ref().map(|b| b.total_budget)), paired_total) {
        (Some(t), Some(p)) if t != p => bail!(usage(format!(
            "--budget {t} differs from the paired runs' total of {p} (initial sample plus iterations x iteration budget)"
        ))),
        (Some(t), _) => t,
        (None, Some(p)) => p,
        (None, None) => ideation.initial_samples + 2 * ideation.sample_budget,
    };
    let reference = match &a.reference {
        Some(p) => Some(read_reference(p)?),
        None => base.as_ref().and_then(|b| b.reference.clone()),
    };
    let settings = BaselineSettings {
        ideation,
        total_budget,
        seeds: a.seeds.or(base.as_ref().map(|b| b.seeds)).unwrap_or(1),
        compare,
        reference,
    };
    if settings.seeds == 0 {
        bail!(usage("--seeds must be at least 1"));
    }
    let policies = match &settings.compare {
        Some(c) if c.iterations == 0 => bail!(usage("--iterations must be at least 1")),
        Some(c) => Some(parse_policies(&c.policy)?),
        None => None,
    };
    print_header("sail-baseline", &settings, Some(&a.common.out))?;

    let domain = open_domain(&settings.ideation)?;
    let bounds = &domain.descriptor().bounds;
    if let Some(r) = &settings.reference {
        if r.len() != bounds.dim() {
            bail!(usage(format!("reference has {} parameters; {} needs {}", r.len(), settings.ideation.domain, bounds.dim())));
        }
    }
    let analytic = domain.is_analytic().then_some(domain.as_ref());
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for seed in settings.ideation.seed..settings.ideation.seed + settings.seeds as u64 {
        let cfg = IdeationConfig {
            seed,
            ..settings.ideation.clone()
        };
        let mut reference = settings.reference.clone();
        let mut paired = None;
        if let (Some(c), Some(policies)) = (&settings.compare, &policies) {
            let cfg = IdeationConfig {
                sample_budget: c.iteration_budget,
                ..cfg.clone()
            };
            let mut run = start_run(cfg, domain.as_ref(), format!("produqd-seed-{seed}"))?;
            drive(&mut run, domain.as_ref(), c.iterations, c.iteration_budget, policies, false)?;
            write_run(&a.common.out.join(format!("produqd-{seed}")), &run)?;
            if reference.is_none() {
                let first = run.iteration(1)?;
                reference = Some(first.prototypes[first.selection[0]].genome.clone());
            }
            paired = Some(run);
        }
        let (run, map) = sail_baseline(&cfg, domain.as_ref(), settings.total_budget)?;
        let dir = a.common.out.join(format!("sail-{seed}"));
        write_run(&dir, &run)?;
        let mut csv = Vec::new();
        map.write_csv(&mut csv)?;
        fs::write(dir.join("prediction_map.csv"), csv)?;

        if let Some(reference) = reference {
            if let Some(run) = &paired {
                let last = run.latest().expect("iterations ran");
                let report = similarity_report(&last.prediction_map, last.index, &reference, bounds, analytic)?;
                rows.push(ComparisonRow::new(seed, "produqd", run, &report));
                reports.push(json!({ "seed": seed, "method": "produqd", "reference": reference, "report": report }));
            }
            let report = similarity_report(&map, 1, &reference, bounds, analytic)?;
            rows.push(ComparisonRow::new(seed, "sail", &run, &report));
            reports.push(json!({ "seed": seed, "method": "sail", "reference": reference, "report": report }));
        }
        println!(
            "seed {seed}: sail archive {} designs{}",
            run.archive.len(),
            paired.as_ref().map_or(String::new(), |p| format!(", produqd archive {} designs", p.archive.len()))
        );
    }
    if !rows.is_empty() {
        write_csv(&a.common.out.join("comparison.csv"), &rows)?;
        let means = summarize(&rows);
        write_csv(&a.common.out.join("comparison_summary.csv"), &means)?;
        fs::write(a.common.out.join("similarity.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
        println!("{:<8} {:>6} {:>14} {:>12} {:>16} {:>16}", "method", "seeds", "mean_distance", "mean_spread", "median_predicted", "median_true");
        for m in &means {
            println!(
                "{:<8} {:>6} {:>14.6} {:>12.6} {:>16.6} {:>16}",
                m.method,
                m.seeds,
                m.mean_distance,
                m.mean_spread,
                m.median_predicted_fitness,
                m.median_true_fitness.map_or("-".into(), |v| format!("{v:.6}"))
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DrRowOut {
    run: usize,
    method: &'static str,
    points: usize,
    eps: f64,
    clusters: usize,
    noise: usize,
    gplus: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DrSummaryOut {
    method: &'static str,
    runs: usize,
    defined: usize,
    mean_gplus: Option<f64>,
    mean_clusters: f64,
}

fn cmd_dr_compare(a: DrArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => read_header::<DrConfig>(p, "dr-compare")?,
        None => DrConfig::default(),
    };
    if let Some(r) = a.runs {
        config.runs = r;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(name) = &a.domain {
        let d = IdeationConfig::default();
        config.source = DrSource::Domain {
            name: name.clone(),
            initial_samples: a.initial_samples.unwrap_or(d.initial_samples),
            sample_budget: a.budget.unwrap_or(d.sample_budget),
        };
    } else if a.initial_samples.is_some() || a.budget.is_some() {
        match &mut config.source {
            DrSource::Domain { initial_samples, sample_budget, .. } => {
                *initial_samples = a.initial_samples.unwrap_or(*initial_samples);
                *sample_budget = a.budget.unwrap_or(*sample_budget);
            }
            DrSource::Blobs(_) => bail!(usage("--initial-samples and --budget apply only with --domain")),
        }
    }
    if config.runs == 0 {
        bail!(usage("--runs must be at least 1"));
    }
    if let DrSource::Domain { name, .. } = &config.source {
        domains::descriptor(name)?;
    }
    if let DrSource::Blobs(spec) = &config.source {
        if spec.clusters == 0 || spec.per_cluster == 0 {
            bail!(usage("blob source needs at least one non-empty cluster"));
        }
    }
    print_header("dr-compare", &config, Some(&a.out))?;

    let result: DrComparison = dr_compare(&config, &|run| tracing::info!(run, "dr comparison run"))?;
    let rows: Vec<DrRowOut> = result
        .rows
        .iter()
        .map(|r| DrRowOut {
            run: r.run,
            method: r.method.name(),
            points: r.points,
            eps: r.eps,
            clusters: r.clusters,
            noise: r.noise,
            gplus: r.gplus,
        })
        .collect();
    let summary: Vec<DrSummaryOut> = result
        .summary
        .iter()
        .map(|s| DrSummaryOut {
            method: s.method.name(),
            runs: s.runs,
            defined: s.defined,
            mean_gplus: s.mean_gplus,
            mean_clusters: s.mean_clusters,
        })
        .collect();
    write_csv(&a.out.join("dr_rows.csv"), &rows)?;
    write_csv(&a.out.join("dr_summary.csv"), &summary)?;
    fs::write(a.out.join("dr_compare.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    println!("{:<8} {:>6} {:>8} {:>12} {:>14}", "method", "runs", "defined", "mean_gplus", "mean_clusters");
    for s in &summary {
        println!(
            "{:<8} {:>6} {:>8} {:>12} {:>14.3}",
            s.method,
            s.runs,
            s.defined,
            s.mean_gplus.map_or("-".into(), |g| format!("{g:.6}")),
            s.mean_clusters
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ServeSettings {
    listen: SocketAddr,
    store: PathBuf,
    kappa: f64,
    initial_samples: usize,
    sample_budget: usize,
    external: Option<ExternalConfig>,
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut config = ServiceConfig::new(&a.store);
    if let Some(k) = a.kappa {
        config.kappa = k;
    }
    if let Some(n) = a.initial_samples {
        config.initial_samples = n;
    }
    if let Some(b) = a.budget {
        config.sample_budget = b;
    }
    if let Some(cmd) = &a.evaluator_cmd {
        let mut ext = ExternalConfig::new(cmd);
        if let Some(t) = a.evaluator_timeout {
            ext.timeout_secs = t;
        }
        config.external = Some(ext);
    }
    if config.kappa.is_nan() || config.kappa < 0.0 {
        bail!(usage("--kappa must be non-negative"));
    }
    print_header(
        "serve",
        &ServeSettings {
            listen: a.listen,
            store: config.store_root.clone(),
            kappa: config.kappa,
            initial_samples: config.initial_samples,
            sample_budget: config.sample_budget,
            external: config.external.clone(),
        },
        None,
    )?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.listen).await.with_context(|| format!("binding {}", a.listen))?;
        println!("listening http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        produqd_service::serve(listener, config).await?;
        Ok(())
    })
}
