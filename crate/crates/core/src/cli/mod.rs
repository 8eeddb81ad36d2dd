//! Command-line front end.
//!
//! Every command reads its inputs from files, writes its outputs under the
//! output directory and prints a one-line JSON summary on stdout. Failures
//! print a JSON error summary naming the failing stage on stderr and exit
//! nonzero. Artifacts carry the config hash; wall-clock data only goes to
//! `run_log.jsonl`.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::annotate::{aggregate_all, apply_to_corpus, load_annotations};
use crate::artifact::{sha256_hex, write_atomic};
use crate::auxforge::{build_supervision, load_supervision, records_to_jsonl, supervision_hash, AuxError, RecordStatus};
use crate::corpus::{load_corpus, split_corpus, validate_corpus, Corpus, Split};
use crate::evalkit::{
    collect_predictions, evaluate, load_predictions, predictions_to_jsonl, render_report, MetricsReport, Task,
};
use crate::labels::Modality;
use crate::modelgw::http::HttpTransport;
use crate::modelgw::{ChatTransport, Gateway};
use crate::outparse::Reason;
use crate::promptkit::{PromptKit, TemplateSet};
use crate::scheduler::{self, emit_runspec, load_manifest, RunSpecInputs, Strategy};

pub use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "omnimer", version, about = "Multimodal emotion recognition pipeline toolkit")]
pub struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Global seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CorpusArg {
    /// Corpus manifest (JSONL); overrides `corpus.path`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EndpointArg {
    /// Endpoint API root; overrides `endpoint.url`.
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a corpus manifest and report counts.
    Validate {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Also write a speaker-disjoint resplit of the corpus here.
        #[arg(long)]
        write_splits: Option<PathBuf>,
    },
    /// Aggregate rater annotations into gold labels.
    Aggregate {
        /// Annotation records (JSONL), one judgment per line.
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        corpus: CorpusArg,
        /// Write a copy of the corpus carrying the aggregated labels.
        #[arg(long, requires = "corpus")]
        labelled_corpus: Option<PathBuf>,
    },
    /// Construct consistency-checked auxiliary supervision for the train split.
    BuildAux {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        endpoint: EndpointArg,
        /// Modalities to construct (repeatable); overrides `build_aux.modalities`.
        #[arg(long = "modality")]
        modalities: Vec<Modality>,
        /// Record cache; defaults to `<out>/supervision.cache.jsonl`.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Generation cap per record; overrides `build_aux.max_attempts`.
        #[arg(long)]
        max_attempts: Option<u32>,
    },
    /// Emit a training manifest.
    Schedule {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Supervision records; defaults to `<out>/supervision.jsonl` when present.
        #[arg(long)]
        supervision: Option<PathBuf>,
        /// multi-stage or hybrid; overrides `schedule.strategy`.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Manifest length; defaults to epochs × main-task train instances.
        #[arg(long)]
        total_steps: Option<u64>,
        /// Last auxiliary step of a multi-stage plan; defaults to 40% of the steps.
        #[arg(long)]
        t0: Option<u64>,
        /// Main-task granularity: sentiment or emotion.
        #[arg(long)]
        main_task: Option<Task>,
    },
    /// Emit the LoRA run specification for a manifest.
    Runspec {
        /// Defaults to `<out>/manifest.jsonl`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// LoRA rank.
        #[arg(long)]
        rank: Option<u32>,
        /// LoRA alpha.
        #[arg(long)]
        alpha: Option<u32>,
        #[arg(long)]
        epochs: Option<u32>,
        /// Gradient accumulation steps.
        #[arg(long)]
        grad_accum: Option<u32>,
    },
    /// Query the model on a split and store parsed predictions.
    Predict {
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        endpoint: EndpointArg,
        /// sentiment or emotion; overrides `evaluate.task`.
        #[arg(long)]
        task: Option<Task>,
        /// train, val or test; overrides `evaluate.split`.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Score a prediction file against the corpus.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Defaults to `<out>/predictions.<task>.jsonl`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// sentiment or emotion; overrides `evaluate.task`.
        #[arg(long)]
        task: Option<Task>,
        /// train, val or test; overrides `evaluate.split`.
        #[arg(long)]
        split: Option<Split>,
        /// Row name in reports; defaults to `generation.model_id`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Render metric files as text and CSV tables.
    Report {
        /// Metrics file written by `evaluate` (repeatable).
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        /// Also render the class × model F1 matrix.
        #[arg(long)]
        classes: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Aggregate { .. } => "aggregate",
            Command::BuildAux { .. } => "build-aux",
            Command::Schedule { .. } => "schedule",
            Command::Runspec { .. } => "runspec",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
        }
    }
}

/// A failure attributed to a pipeline stage.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: anyhow::Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, error: e.into() })
    }
}

fn fail(stage: &'static str, error: anyhow::Error) -> StageError {
    StageError { stage, error }
}

/// Execution context shared by the commands.
struct Ctx {
    cfg: PipelineConfig,
    config_hash: String,
    out_dir: PathBuf,
    transport: Option<Arc<dyn ChatTransport>>,
    written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    artifact: &'a str,
    sha256: String,
    config_hash: &'a str,
    command: &'a str,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&mut self, path: &Path, contents: &str) -> Result<(), StageError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("cannot create {}", dir.display()))
                .stage("output")?;
        }
        write_atomic(path, contents)
            .with_context(|| format!("cannot write {}", path.display()))
            .stage("output")?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    /// Writes a JSONL artifact plus a `.meta.json` sidecar carrying its hash
    /// and the config hash.
    fn write_jsonl(&mut self, path: &Path, contents: &str, command: &str) -> Result<(), StageError> {
        self.write(path, contents)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let meta = Sidecar {
            artifact: &name,
            sha256: sha256_hex(contents),
            config_hash: &self.config_hash,
            command,
        };
        let mut text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
        text.push('\n');
        let mut meta_path = path.as_os_str().to_owned();
        meta_path.push(".meta.json");
        self.write(Path::new(&meta_path), &text)
    }

    fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<(), StageError> {
        let mut text = serde_json::to_string_pretty(value).expect("document serializes");
        text.push('\n');
        self.write(path, &text)
    }

    fn corpus(&self, arg: &CorpusArg) -> Result<Corpus, StageError> {
        let path = arg
            .corpus
            .clone()
            .or_else(|| self.cfg.corpus.path.clone())
            .ok_or_else(|| fail("config", anyhow!("no corpus given (use --corpus or corpus.path)")))?;
        Ok(load_corpus(&path).stage("corpus")?.with_language(&self.cfg.corpus.language))
    }

    fn kit(&self) -> Result<PromptKit, StageError> {
        let templates = match &self.cfg.corpus.templates {
            Some(dir) => TemplateSet::from_dir(dir).stage("prompt")?,
            None => TemplateSet::builtin(),
        };
        Ok(PromptKit::new(templates, &self.cfg.corpus.language))
    }

    fn gateway(&self, arg: &EndpointArg) -> Result<Gateway, StageError> {
        let ep = &self.cfg.endpoint;
        let transport: Arc<dyn ChatTransport> = match &self.transport {
            Some(t) => t.clone(),
            None => {
                let url = arg
                    .endpoint
                    .clone()
                    .or_else(|| ep.url.clone())
                    .ok_or_else(|| fail("config", anyhow!("no endpoint given (use --endpoint or endpoint.url)")))?;
                let key = match &ep.api_key_env {
                    Some(var) => Some(
                        std::env::var(var)
                            .with_context(|| format!("API key variable {var} is not set"))
                            .stage("config")?,
                    ),
                    None => None,
                };
                Arc::new(HttpTransport::new(&url, key).stage("gateway")?)
            }
        };
        let mut gw = Gateway::new(transport)
            .with_retry(ep.retry)
            .with_media_policy(ep.media)
            .with_rate_limit(ep.rate_limit_rps);
        if let Some(root) = &ep.media_root {
            gw = gw.with_media_root(root);
        }
        Ok(gw)
    }
}

type Summary = BTreeMap<&'static str, Value>;

fn validate_cmd(ctx: &mut Ctx, corpus: &CorpusArg, write_splits: &Option<PathBuf>) -> Result<Summary, StageError> {
    let c = ctx.corpus(corpus)?;
    let report = validate_corpus(&c);
    let doc = json!({
        "corpus": c.name,
        "corpus_hash": c.content_hash(),
        "config_hash": ctx.config_hash,
        "report": report,
    });
    ctx.write_json(&ctx.out("validation.json"), &doc)?;
    if !report.errors.is_empty() {
        let first = &report.errors[0];
        return Err(fail(
            "validate",
            anyhow!("{} error(s); first: {}", report.errors.len(), serde_json::to_string(first).expect("issue")),
        ));
    }
    if let Some(path) = write_splits {
        let resplit = split_corpus(&c, ctx.cfg.corpus.split_ratios, ctx.cfg.effective_seed()).stage("split")?;
        ctx.write_jsonl(path, &resplit.to_jsonl(), "validate")?;
    }
    Ok(Summary::from([
        ("errors", json!(0)),
        ("warnings", json!(report.warnings.len())),
        ("samples", json!(c.samples.len())),
    ]))
}

fn aggregate_cmd(
    ctx: &mut Ctx,
    annotations: &Path,
    corpus: &CorpusArg,
    labelled: &Option<PathBuf>,
) -> Result<Summary, StageError> {
    let records = load_annotations(annotations).stage("annotations")?;
    let summary = aggregate_all(&records).stage("aggregate")?;
    let doc = json!({
        "config_hash": ctx.config_hash,
        "annotations_sha256": sha256_hex(std::fs::read(annotations).stage("annotations")?),
        "summary": summary,
    });
    ctx.write_json(&ctx.out("aggregation.json"), &doc)?;
    let mut out = Summary::from([
        ("sentiment_segments", json!(summary.sentiment.len())),
        ("emotion_segments", json!(summary.emotion.len())),
        ("sentiment_agreement", json!(summary.sentiment_agreement)),
        ("emotion_agreement", json!(summary.emotion_agreement)),
    ]);
    if let Some(path) = labelled {
        let mut c = ctx.corpus(corpus)?;
        let touched = apply_to_corpus(&mut c, &summary);
        ctx.write_jsonl(path, &c.to_jsonl(), "aggregate")?;
        out.insert("labelled_samples", json!(touched.len()));
    }
    Ok(out)
}

/// Records whose every attempt failed before the model produced any text.
fn gateway_failed(diagnostics: &[String]) -> bool {
    !diagnostics.is_empty() && diagnostics.iter().all(|d| d.contains(": gateway: "))
}

fn build_aux_cmd(
    ctx: &mut Ctx,
    corpus: &CorpusArg,
    endpoint: &EndpointArg,
    modalities: &[Modality],
    cache: &Option<PathBuf>,
    max_attempts: Option<u32>,
) -> Result<Summary, StageError> {
    let full = ctx.corpus(corpus)?;
    let train = Corpus::new(&full.name, &full.language_tag, full.split(Split::Train).cloned().collect());
    let kit = ctx.kit()?;
    let gw = ctx.gateway(endpoint)?;
    let modalities = if modalities.is_empty() { ctx.cfg.build_aux.modalities.clone() } else { modalities.to_vec() };
    let mut constructor = ctx.cfg.build_aux.constructor();
    if let Some(n) = max_attempts {
        constructor.max_attempts = n;
    }
    let cache = cache
        .clone()
        .or_else(|| ctx.cfg.build_aux.cache.clone())
        .unwrap_or_else(|| ctx.out("supervision.cache.jsonl"));
    if let Some(dir) = cache.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).stage("output")?;
    }
    let outcome = build_supervision(&train, &modalities, &gw, &kit, &ctx.cfg.generation, Some(&cache), &constructor)
        .map_err(|e| match e {
            AuxError::Corpus(_) => fail("corpus", e.into()),
            AuxError::Prompt(_) => fail("prompt", e.into()),
            AuxError::CacheCorrupt { .. } | AuxError::CacheWrite { .. } => fail("cache", e.into()),
        })?;
    ctx.written.push(cache);
    let path = ctx.out("supervision.jsonl");
    ctx.write_jsonl(&path, &records_to_jsonl(&outcome.records), "build-aux")?;

    let unreachable: Vec<_> = outcome
        .records
        .iter()
        .filter(|r| r.status == RecordStatus::Failed && gateway_failed(&r.diagnostics))
        .collect();
    if let Some(first) = unreachable.first() {
        return Err(fail(
            "gateway",
            anyhow!(
                "{} of {} record(s) failed at the gateway; first: {}",
                unreachable.len(),
                outcome.records.len(),
                first.diagnostics.last().map(String::as_str).unwrap_or_default()
            ),
        ));
    }
    Ok(Summary::from([
        ("records", json!(outcome.records.len())),
        ("retained", json!(outcome.count(RecordStatus::Retained))),
        ("regenerated", json!(outcome.count(RecordStatus::Regenerated))),
        ("failed", json!(outcome.count(RecordStatus::Failed))),
        ("reused", json!(outcome.reused)),
        ("constructed", json!(outcome.constructed)),
        ("supervision_hash", json!(supervision_hash(&outcome.records))),
    ]))
}

#[allow(clippy::too_many_arguments)]
fn schedule_cmd(
    ctx: &mut Ctx,
    corpus: &CorpusArg,
    supervision: &Option<PathBuf>,
    strategy: Option<Strategy>,
    total_steps: Option<u64>,
    t0: Option<u64>,
    main_task: Option<Task>,
) -> Result<Summary, StageError> {
    let c = ctx.corpus(corpus)?;
    let aux = match supervision {
        Some(p) => load_supervision(p).stage("supervision")?,
        None => {
            let p = ctx.out("supervision.jsonl");
            if p.exists() {
                load_supervision(&p).stage("supervision")?
            } else {
                Vec::new()
            }
        }
    };
    let mut plan = ctx.cfg.schedule.clone();
    if let Some(s) = strategy {
        plan.strategy = s;
    }
    if total_steps.is_some() {
        plan.total_steps = total_steps;
    }
    if t0.is_some() {
        plan.t0 = t0;
    }
    if let Some(t) = main_task {
        plan.main_granularity = t.instruction_type();
    }
    let kit = ctx.kit()?;
    let mut manifest = scheduler::plan(&c, &aux, &plan, &kit).stage("schedule")?;
    manifest.header.config_hash = Some(ctx.config_hash.clone());
    let text = manifest.to_jsonl();
    ctx.write(&ctx.out("manifest.jsonl"), &text)?;
    let mut counts = BTreeMap::new();
    for k in scheduler::TaskKind::ALL {
        counts.insert(k.to_string(), manifest.count_kind(k));
    }
    Ok(Summary::from([
        ("steps", json!(manifest.entries.len())),
        ("manifest_hash", json!(sha256_hex(&text))),
        ("kinds", json!(counts)),
    ]))
}

fn runspec_cmd(ctx: &mut Ctx, manifest: &Option<PathBuf>, o: crate::scheduler::RunSpecOverrides) -> Result<Summary, StageError> {
    let path = manifest.clone().unwrap_or_else(|| ctx.out("manifest.jsonl"));
    let bytes = std::fs::read(&path)
        .with_context(|| format!("cannot read manifest {}", path.display()))
        .stage("manifest")?;
    let m = load_manifest(&path).stage("manifest")?;
    let inputs = RunSpecInputs {
        manifest_path: path.display().to_string(),
        manifest_hash: sha256_hex(&bytes),
        corpus_hash: m.header.corpus_hash,
        supervision_hash: m.header.supervision_hash,
        template_hash: m.header.template_hash,
        seed: m.header.seed,
        config_hash: Some(ctx.config_hash.clone()),
    };
    let spec = emit_runspec(&inputs, &o);
    let text = spec.to_json();
    ctx.write(&ctx.out("runspec.json"), &text)?;
    Ok(Summary::from([("runspec_hash", json!(sha256_hex(&text)))]))
}

fn predict_cmd(
    ctx: &mut Ctx,
    corpus: &CorpusArg,
    endpoint: &EndpointArg,
    task: Option<Task>,
    split: Option<Split>,
) -> Result<Summary, StageError> {
    let c = ctx.corpus(corpus)?;
    let kit = ctx.kit()?;
    let gw = ctx.gateway(endpoint)?;
    let task = task.unwrap_or(ctx.cfg.evaluate.task);
    let split = split.unwrap_or(ctx.cfg.evaluate.split);
    let preds = collect_predictions(
        &c,
        split,
        &gw,
        &kit,
        &ctx.cfg.generation,
        task,
        &ctx.cfg.evaluate.compatibility,
        ctx.cfg.endpoint.parallelism,
    )
    .stage("predict")?;
    let path = ctx.out(&format!("predictions.{task}.jsonl"));
    ctx.write_jsonl(&path, &predictions_to_jsonl(&preds), "predict")?;
    let failed: Vec<_> = preds
        .iter()
        .filter_map(|p| {
            p.parsed.reasons.iter().find_map(|r| match r {
                Reason::GatewayFailure { message } => Some((p.sample_id.as_str(), message.as_str())),
                _ => None,
            })
        })
        .collect();
    if let Some((id, msg)) = failed.first() {
        return Err(fail(
            "gateway",
            anyhow!("{} of {} prediction(s) failed at the gateway; first ({id}): {msg}", failed.len(), preds.len()),
        ));
    }
    let invalid = preds.iter().filter(|p| !p.parsed.valid).count();
    Ok(Summary::from([("predictions", json!(preds.len())), ("unparseable", json!(invalid))]))
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    config_hash: String,
    corpus_hash: String,
    predictions_sha256: String,
    split: Split,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn evaluate_cmd(
    ctx: &mut Ctx,
    corpus: &CorpusArg,
    predictions: &Option<PathBuf>,
    task: Option<Task>,
    split: Option<Split>,
    name: &Option<String>,
) -> Result<Summary, StageError> {
    let c = ctx.corpus(corpus)?;
    let task = task.unwrap_or(ctx.cfg.evaluate.task);
    let split = split.unwrap_or(ctx.cfg.evaluate.split);
    let path = predictions.clone().unwrap_or_else(|| ctx.out(&format!("predictions.{task}.jsonl")));
    let bytes = std::fs::read(&path)
        .with_context(|| format!("cannot read predictions {}", path.display()))
        .stage("predictions")?;
    let preds = load_predictions(&path).stage("predictions")?;
    let name = name.clone().unwrap_or_else(|| ctx.cfg.generation.model_id.clone());
    let report = evaluate(&c, split, &preds, task).stage("evaluate")?.named(name);
    let doc = MetricsDocument {
        config_hash: ctx.config_hash.clone(),
        corpus_hash: c.content_hash(),
        predictions_sha256: sha256_hex(&bytes),
        split,
        report: &report,
    };
    ctx.write_json(&ctx.out(&format!("metrics.{task}.json")), &doc)?;
    Ok(Summary::from([
        ("n", json!(report.n)),
        ("accuracy", json!(report.accuracy)),
        ("macro_f1", json!(report.macro_f1)),
        ("weighted_f1", json!(report.weighted_f1)),
        ("invalid_rate", json!(report.invalid_rate)),
    ]))
}

fn report_cmd(ctx: &mut Ctx, metrics: &[PathBuf], classes: bool) -> Result<Summary, StageError> {
    let mut reports = Vec::new();
    for p in metrics {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("cannot read metrics {}", p.display()))
            .stage("report")?;
        let r: MetricsReport = serde_json::from_str(&text)
            .with_context(|| format!("invalid metrics file {}", p.display()))
            .stage("report")?;
        reports.push(r);
    }
    let rendered = render_report(&reports, classes);
    ctx.write(&ctx.out("report.txt"), &rendered.text)?;
    ctx.write(&ctx.out("report.csv"), &rendered.csv)?;
    if classes {
        ctx.write(&ctx.out("classes.txt"), &rendered.class_text)?;
        ctx.write(&ctx.out("classes.csv"), &rendered.class_csv)?;
    }
    Ok(Summary::from([("rows", json!(reports.len()))]))
}

fn dispatch(ctx: &mut Ctx, cmd: &Command) -> Result<Summary, StageError> {
    match cmd {
        Command::Validate { corpus, write_splits } => validate_cmd(ctx, corpus, write_splits),
        Command::Aggregate { annotations, corpus, labelled_corpus } => {
            aggregate_cmd(ctx, annotations, corpus, labelled_corpus)
        }
        Command::BuildAux { corpus, endpoint, modalities, cache, max_attempts } => {
            build_aux_cmd(ctx, corpus, endpoint, modalities, cache, *max_attempts)
        }
        Command::Schedule { corpus, supervision, strategy, total_steps, t0, main_task } => {
            schedule_cmd(ctx, corpus, supervision, *strategy, *total_steps, *t0, *main_task)
        }
        Command::Runspec { manifest, lr, rank, alpha, epochs, grad_accum } => {
            let mut o = ctx.cfg.runspec.clone();
            o.lr = lr.or(o.lr);
            o.rank = rank.or(o.rank);
            o.alpha = alpha.or(o.alpha);
            o.epochs = epochs.or(o.epochs);
            o.grad_accum = grad_accum.or(o.grad_accum);
            runspec_cmd(ctx, manifest, o)
        }
        Command::Predict { corpus, endpoint, task, split } => predict_cmd(ctx, corpus, endpoint, *task, *split),
        Command::Evaluate { corpus, predictions, task, split, name } => {
            evaluate_cmd(ctx, corpus, predictions, *task, *split, name)
        }
        Command::Report { metrics, classes } => report_cmd(ctx, metrics, *classes),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, StageError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).stage("config")?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.resolve_seed();
    Ok(cfg)
}

fn append_run_log(out_dir: &Path, entry: &Value) {
    let path = out_dir.join("run_log.jsonl");
    if std::fs::create_dir_all(out_dir).is_err() {
        return;
    }
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(f, "{entry}");
    }
}

/// Result of one invocation: exit code and the JSON summary that was printed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub code: i32,
    pub summary: Value,
}

/// Runs one command. `transport` replaces the HTTP endpoint when given.
pub fn run_with<I, T>(argv: I, transport: Option<Arc<dyn ChatTransport>>) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            let summary = if code == 0 {
                json!({"status": "ok"})
            } else {
                json!({"status": "error", "stage": "args", "message": e.kind().to_string()})
            };
            if code != 0 {
                eprintln!("{summary}");
            }
            return Outcome { code, summary };
        }
    };
    let command = cli.command.name();
    let started = Instant::now();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return report_failure(command, e),
    };
    let mut ctx = Ctx {
        config_hash: cfg.hash(),
        out_dir: cfg.output_dir.clone(),
        cfg,
        transport,
        written: Vec::new(),
    };
    let result = dispatch(&mut ctx, &cli.command);
    let outputs: Vec<String> = ctx.written.iter().map(|p| p.display().to_string()).collect();
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    append_run_log(
        &ctx.out_dir,
        &json!({
            "unix_time": unix,
            "command": command,
            "elapsed_ms": started.elapsed().as_millis() as u64,
            "config_hash": ctx.config_hash,
            "ok": result.is_ok(),
            "outputs": outputs,
        }),
    );
    match result {
        Ok(mut summary) => {
            summary.insert("status", json!("ok"));
            summary.insert("command", json!(command));
            summary.insert("config_hash", json!(ctx.config_hash));
            summary.insert("outputs", json!(outputs));
            let summary = json!(summary);
            println!("{summary}");
            Outcome { code: 0, summary }
        }
        Err(e) => report_failure(command, e),
    }
}

fn report_failure(command: &str, e: StageError) -> Outcome {
    let summary = json!({
        "status": "error",
        "command": command,
        "stage": e.stage,
        "message": format!("{:#}", e.error),
    });
    eprintln!("{summary}");
    Outcome { code: 1, summary }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, None).code
}
