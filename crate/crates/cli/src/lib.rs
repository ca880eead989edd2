//! The `pathweave` experiment driver.
//!
//! Every command validates its inputs before doing work, writes files
//! atomically (temp file + rename) and reports failures as one JSON line on
//! stderr with a distinguishing exit code:
//!
//! | code | meaning |
//! |---:|---|
//! | 0 | success |
//! | 1 | validation error (bad flags, config, or input file) |
//! | 2 | runtime error (I/O, divergence, corrupt checkpoint, ...) |
//! | 3 | fixture verification failed |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pathweave_core::checkpoint::{atomic_write, StageCheckpoint};
use pathweave_core::metrics::{self, render_comparison, render_report, ReportFormat};
use pathweave_core::trainer::{self, ModelState, TrainLog};
use pathweave_core::{Benchmark, DomainFilter, Error, ExperimentConfig, Method, MethodConfig, MetricReport, ScoreMatrix};

#[derive(Debug, Parser)]
#[command(name = "pathweave", version, about = "Continual modality-expansion experiments on a synthetic benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the benchmark described by a config and write its manifest.
    GenBench(GenBenchArgs),
    /// Pretrain, then run the full modality sequence for each method.
    Run(RunArgs),
    /// Score a checkpoint on one modality's datasets (path-switched).
    Eval(EvalArgs),
    /// Compute a metric report from a score-matrix file.
    Metrics(MetricsArgs),
    /// Render metric reports as a comparison table.
    Report(ReportArgs),
    /// Recompute the published metric cells from the bundled raw scores.
    VerifyFixture(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenBenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Override the benchmark seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (manifest.json is written inside).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Method to run (repeatable); defaults to the config's method list.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reuse an output directory written under a different config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub modality: usize,
    /// Dataset name or index within the modality; all datasets when omitted.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Override the training seed (must match the run that wrote the checkpoint).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accept a checkpoint written under a different config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Score-matrix JSON file.
    #[arg(long, conflicts_with = "fixture_method", required_unless_present = "fixture_method")]
    pub scores: Option<PathBuf>,
    /// Use the bundled raw-score fixture of this method instead of a file.
    #[arg(long)]
    pub fixture_method: Option<String>,
    /// all | in_domain | out_of_domain
    #[arg(long, default_value = "all")]
    pub filter: String,
    /// Label stored in the report; defaults to the file stem or method.
    #[arg(long)]
    pub label: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metric report JSON files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// markdown | csv
    #[arg(long, default_value = "markdown")]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Only require the anchor cells to match.
    #[arg(long)]
    pub anchors_only: bool,
    /// Write the per-cell outcome as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
    Fixture,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
            ErrorKind::Fixture => 3,
        }
    }

    /// The machine-readable line printed on stderr.
    pub fn json_line(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Validation => "validation",
            ErrorKind::Runtime => "runtime",
            ErrorKind::Fixture => "fixture",
        };
        serde_json::json!({ "error": kind, "message": self.message, "exit_code": self.exit_code() }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_)
            | Error::SiteMismatch { .. }
            | Error::UnknownModality(_)
            | Error::UnknownDataset { .. }
            | Error::IncompleteMatrix { .. }
            | Error::Json(_) => ErrorKind::Validation,
            _ => ErrorKind::Runtime,
        };
        Self { kind, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    match &args.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(atomic_write(path, text.as_bytes())?)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_gen_bench(args: &GenBenchArgs) -> CliResult<PathBuf> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.benchmark.seed = s;
    }
    cfg.benchmark.validate()?;
    let bench = Benchmark::generate(&cfg.benchmark)?;
    let path = args.out.join("manifest.json");
    write_text(&path, &serde_json::to_string_pretty(&bench.manifest()).map_err(Error::from)?)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

/// Where `cmd_run` puts the artifacts of one method.
pub fn method_dir(out: &Path, method: Method) -> PathBuf {
    out.join(method.as_str())
}

pub fn scores_path(out: &Path, method: Method) -> PathBuf {
    method_dir(out, method).join("scores.json")
}

pub fn checkpoint_path(out: &Path, method: Method, stage: usize) -> PathBuf {
    method_dir(out, method).join(format!("stage{stage}.pwck"))
}

fn resolve_methods(cfg: &ExperimentConfig, names: &[String]) -> CliResult<Vec<MethodConfig>> {
    if names.is_empty() {
        return Ok(cfg.methods.clone());
    }
    let mut out: Vec<MethodConfig> = Vec::new();
    for n in names {
        let m: Method = n.parse()?;
        if out.iter().any(|c| c.method == m) {
            return Err(CliError::validation(format!("method {n} listed twice")));
        }
        out.push(cfg.methods.iter().find(|c| c.method == m).cloned().unwrap_or_else(|| MethodConfig::new(m)));
    }
    Ok(out)
}

/// Applies `--seed` and returns the config together with the output directory.
fn run_config(args: &RunArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.plan.seed = s;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::validation("no output directory: pass --out or set output_dir"))?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn logs_jsonl(logs: &[TrainLog]) -> CliResult<String> {
    let mut s = String::new();
    for l in logs {
        s.push_str(&l.to_json_lines()?);
    }
    Ok(s)
}

/// Result of one `run` invocation: the score file written per method.
#[derive(Debug)]
pub struct RunSummary {
    pub config_hash: String,
    pub scores: Vec<(Method, PathBuf)>,
}

pub fn cmd_run(args: &RunArgs) -> CliResult<RunSummary> {
    let (mut cfg, out) = run_config(args)?;
    let methods = resolve_methods(&cfg, &args.methods)?;
    // the resolved config (including the method list) is what gets hashed and
    // written, so `eval --config OUT/config.json` matches the checkpoints
    cfg.methods = methods.clone();
    cfg.validate()?;
    let hash = cfg.config_hash();

    let cfg_path = out.join("config.json");
    if cfg_path.exists() {
        let previous = ExperimentConfig::load(&cfg_path)?;
        if previous.config_hash() != hash && !args.force {
            return Err(CliError::validation(format!(
                "{} holds results of a different config (hash {}); use --force to overwrite",
                out.display(),
                previous.config_hash()
            )));
        }
    }
    write_text(&cfg_path, &cfg.to_json()?)?;

    let bench = Benchmark::generate(&cfg.benchmark)?;
    write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&bench.manifest()).map_err(Error::from)?)?;

    log::info!("pretraining (seed {})", cfg.plan.seed);
    let pre = trainer::pretrain_for(&bench, &cfg.plan)?;
    write_text(&out.join("pretrain.jsonl"), &pre.log.to_json_lines()?)?;

    let mut scores = Vec::new();
    for mc in methods {
        let method = mc.method;
        log::info!("running {method}");
        let outcome = trainer::run_sequence_from(&bench, &pre, &cfg.plan, mc, &mut |m, state, s| {
            StageCheckpoint::from_state(m, method, &hash, state, &cfg.plan.ana, Some(s))?
                .save(&checkpoint_path(&out, method, m))
        })?;
        let path = scores_path(&out, method);
        write_text(&path, &outcome.scores.to_json()?)?;
        write_text(&method_dir(&out, method).join("train.jsonl"), &logs_jsonl(&outcome.logs)?)?;
        scores.push((method, path));
    }
    Ok(RunSummary { config_hash: hash, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalScore {
    pub modality: usize,
    pub dataset: String,
    pub score: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<Vec<EvalScore>> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.plan.seed = s;
    }
    cfg.validate()?;
    let ck = StageCheckpoint::load(&args.checkpoint, Some(&cfg.config_hash()), args.force)?;
    if args.modality > ck.meta.stage {
        return Err(CliError::validation(format!(
            "checkpoint is from stage {} and cannot serve modality {}",
            ck.meta.stage, args.modality
        )));
    }
    let state: ModelState = ck.to_state()?;
    let bench = Benchmark::generate(&cfg.benchmark)?;
    let md = bench.modality(args.modality)?;
    let chosen: Vec<usize> = match &args.dataset {
        None => (0..md.datasets.len()).collect(),
        Some(name) => {
            let idx = match name.parse::<usize>() {
                Ok(i) if i < md.datasets.len() => Some(i),
                _ => md.datasets.iter().position(|d| d.name == *name),
            };
            vec![idx.ok_or_else(|| Error::UnknownDataset { modality: args.modality, dataset: name.clone() })?]
        }
    };
    let mut out = Vec::new();
    for n in chosen {
        let ds = &md.datasets[n];
        ds.verify_eval()?;
        out.push(EvalScore { modality: args.modality, dataset: ds.name.clone(), score: state.evaluate(args.modality, ds)? });
    }
    Ok(out)
}

pub fn cmd_metrics(args: &MetricsArgs) -> CliResult<MetricReport> {
    let filter: DomainFilter = args.filter.parse()?;
    let (matrix, default_label) = match (&args.scores, &args.fixture_method) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", p.display())))?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (ScoreMatrix::from_json(&text)?, stem)
        }
        (None, Some(method)) => {
            let (raw, _) = metrics::bundled_fixture()?;
            let nm = raw
                .methods
                .into_iter()
                .find(|m| m.method == *method)
                .ok_or_else(|| CliError::validation(format!("no fixture scores for method {method:?}")))?;
            (nm.matrix, method.clone())
        }
        (None, None) => return Err(CliError::validation("pass --scores or --fixture-method")),
    };
    let label = args.label.clone().unwrap_or(default_label);
    let report = MetricReport::compute(&label, &matrix, filter)?;
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    Ok(report)
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<String> {
    let format: ReportFormat = args.format.parse()?;
    let mut reports = Vec::new();
    for p in &args.reports {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", p.display())))?;
        let r: MetricReport = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{} is not a metric report: {e}", p.display())))?;
        reports.push(r);
    }
    let mut text = render_comparison(&reports, format);
    for r in &reports {
        text.push('\n');
        text.push_str(&render_report(r, format));
    }
    emit(args.out.as_deref(), &text)?;
    Ok(text)
}

pub fn cmd_verify_fixture(args: &VerifyArgs) -> CliResult<metrics::FixtureOutcome> {
    let (raw, published) = metrics::bundled_fixture()?;
    let outcome = metrics::verify_fixture(&raw, &published)?;
    let mut text = String::new();
    for c in outcome.anchors() {
        let _ = writeln!(
            text,
            "anchor {} {:?} {} = {:.4} (published {:.2}) {}",
            c.cell.method,
            c.cell.metric,
            c.cell.stage.map(|s| format!("stage {s}")).or(c.cell.dataset.clone()).unwrap_or_default(),
            c.computed,
            c.cell.value,
            if c.pass { "ok" } else { "MISMATCH" }
        );
    }
    let bad = outcome.mismatches();
    let _ = writeln!(text, "{} cells checked, {} within ±{}", outcome.checks.len(), outcome.checks.len() - bad.len(), outcome.tolerance);
    for c in &bad {
        let _ = writeln!(
            text,
            "mismatch [{}] {} {:?} {} {:?}: computed {:.4}, published {:.2}",
            c.cell.group,
            c.cell.method,
            c.cell.metric,
            c.cell.stage.map(|s| format!("stage {s}")).or(c.cell.dataset.clone()).unwrap_or_default(),
            c.cell.domain,
            c.computed,
            c.cell.value
        );
    }
    print!("{text}");
    if let Some(p) = &args.out {
        write_text(p, &serde_json::to_string_pretty(&outcome).map_err(Error::from)?)?;
    }
    let ok = if args.anchors_only { outcome.anchors_pass() } else { outcome.all_pass() };
    if !ok {
        let n = if args.anchors_only { outcome.anchors().filter(|c| !c.pass).count() } else { bad.len() };
        return Err(CliError { kind: ErrorKind::Fixture, message: format!("{n} fixture cells outside tolerance") });
    }
    Ok(outcome)
}

/// Runs one parsed command, printing its primary output on stdout.
pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenBench(a) => {
            let p = cmd_gen_bench(a)?;
            println!("{}", p.display());
        }
        Command::Run(a) => {
            let s = cmd_run(a)?;
            for (m, p) in &s.scores {
                println!("{m}\t{}", p.display());
            }
        }
        Command::Eval(a) => {
            for s in cmd_eval(a)? {
                println!("{}", serde_json::json!({ "modality": s.modality, "dataset": s.dataset, "score": s.score }));
            }
        }
        Command::Metrics(a) => {
            cmd_metrics(a)?;
        }
        Command::Report(a) => {
            cmd_report(a)?;
        }
        Command::VerifyFixture(a) => {
            cmd_verify_fixture(a)?;
        }
    }
    Ok(())
}
