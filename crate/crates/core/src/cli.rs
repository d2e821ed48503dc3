//! Command-line surface. `main` only parses arguments and maps errors to exit codes.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, PatternFilter};
use crate::augmentation::{self, ExternalSchema, LabelMapping};
use crate::autodiff::Precision;
use crate::backbones::{self, BackboneSpec};
use crate::corpus::{self, ColumnSchema, Label, LabeledDataset, SplitResult};
use crate::error::{Error, Result};
use crate::inference::{self, ModelSet, PredictionSet, SubmissionFormat};
use crate::tracking::{self, Metric, RunFilter, RunRecord, RunStatus, RunStore};
use crate::training::{self, FittedModel, OptimizerKind, SweepGrid, TrainConfig, TrainMode};

pub const DEFAULT_CONFIG: &str = "germeval.toml";

/// Project defaults; every field can be overridden by a flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    pub train_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub schema: ColumnSchema,
    /// Backbone registry file; the built-in registry when absent.
    pub registry: Option<PathBuf>,
    pub run_store: Option<PathBuf>,
    pub backbone: String,
    pub split_ratio: f64,
    pub threshold: f64,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            train_corpus: None,
            test_corpus: None,
            schema: ColumnSchema::default(),
            registry: None,
            run_store: None,
            backbone: "tiny_test".into(),
            split_ratio: 0.8,
            threshold: training::DECISION_THRESHOLD,
            train: TrainConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl ProjectConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {}", e.message())))
    }

    /// `path`, else `germeval.toml` in the working directory if present, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let path = match path {
            Some(p) => p.to_path_buf(),
            None if Path::new(DEFAULT_CONFIG).exists() => PathBuf::from(DEFAULT_CONFIG),
            None => return Ok(ProjectConfig::default()),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn registry(&self) -> Result<Vec<BackboneSpec>> {
        match &self.registry {
            Some(p) => backbones::load_registry(p),
            None => Ok(backbones::registry_default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(format!("split_ratio {} not in (0, 1)", self.split_ratio)));
        }
        let registry = self.registry()?;
        let spec = backbones::find_backbone(&registry, &self.backbone)?;
        self.train.validate(spec)
    }
}

#[derive(Debug, Parser)]
#[command(name = "germeval", version, about = "Fine-tuning harness for toxic / engaging / fact-claiming comment classification")]
pub struct Cli {
    /// Project config (TOML); defaults to ./germeval.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run store file.
    #[arg(long, global = true, env = tracking::RUN_STORE_ENV)]
    pub run_store: Option<PathBuf>,
    /// Seed for splitting, initialization, shuffling and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a labeled corpus.
    Ingest(IngestArgs),
    /// Write a seeded train/validation split manifest.
    Split(SplitArgs),
    /// One fine-tuning run on a split.
    Train(TrainArgs),
    /// A grid of runs over learning rates and epoch counts.
    Sweep(SweepArgs),
    /// Rank runs by best validation score.
    Compare(CompareArgs),
    /// Chart validation F1 per epoch.
    Plot(PlotArgs),
    /// Merge an external corpus into the toxic label; optionally run the paired comparison.
    Augment(AugmentArgs),
    /// Train submission models on the complete training data.
    TrainFull(TrainFullArgs),
    /// Predict probabilities and decisions for unlabeled comments.
    Predict(PredictArgs),
    /// Write a submission file from predictions.
    Export(ExportArgs),
    /// Gold-vs-prediction disagreement report.
    Analyze(AnalyzeArgs),
    /// Write the synthetic marker corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus file; defaults to `train_corpus`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Re-write the validated corpus here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Reuse a persisted split instead of splitting.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, default_value = "split.manifest")]
    pub output: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// adamw | adafactor
    #[arg(long)]
    pub optimizer: Option<String>,
    /// fp32 | fp16
    #[arg(long)]
    pub precision: Option<String>,
    /// joint | toxic | engaging | fact_claiming
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Validate config and data, then exit without training.
    #[arg(long)]
    pub dry_run: bool,
    /// Save the final model to this directory.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Vec<f64>,
    /// Comma-separated epoch counts.
    #[arg(long = "epoch-grid", value_delimiter = ',')]
    pub epoch_grid: Vec<usize>,
    /// Runs executing concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// macro | toxic | engaging | fact_claiming
    #[arg(long, default_value = "macro")]
    pub metric: String,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub status: Option<String>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Subtask (or `macro`) to plot.
    #[arg(long, default_value = "toxic")]
    pub subtask: String,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long, default_value = "history.svg")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub external: PathBuf,
    #[arg(long)]
    pub mapping: PathBuf,
    /// Prefix for external ids; defaults to the external file stem.
    #[arg(long)]
    pub source_tag: Option<String>,
    /// External corpus layout (TOML); headerless TSV `text<TAB>label` by default.
    #[arg(long)]
    pub external_schema: Option<PathBuf>,
    /// Write the merged corpus here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Train baseline and augmented runs on the same base split.
    #[arg(long)]
    pub run: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct TrainFullArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Retrain the configs of the K best runs in the store.
    #[arg(long)]
    pub from_top: Option<usize>,
    #[arg(long, default_value = "macro")]
    pub metric: String,
    /// In per-subtask mode, train one model for each subtask.
    #[arg(long)]
    pub all_subtasks: bool,
    #[arg(long, default_value = "models")]
    pub output_dir: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model directory; repeat once per subtask for per-subtask models.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Unlabeled comments; defaults to `test_corpus`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value = "predictions.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, default_value = "predictions.json")]
    pub predictions: PathBuf,
    #[arg(long, default_value = "submission.csv")]
    pub output: PathBuf,
    /// csv | tsv
    #[arg(long, default_value = "csv")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Gold-labeled corpus; defaults to `train_corpus`.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, default_value = "predictions.json")]
    pub predictions: PathBuf,
    /// all | disagreements-only | <pattern> | <label>:<pattern>
    #[arg(long, default_value = "disagreements-only")]
    pub filter: String,
    #[arg(long, default_value_t = analysis::DEFAULT_EXCERPT_CHARS)]
    pub excerpt: usize,
    /// Keep complete comment texts.
    #[arg(long)]
    pub full_text: bool,
    /// Text report; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value = "synthetic.csv")]
    pub output: PathBuf,
}

struct Context {
    config: ProjectConfig,
    run_store: Option<PathBuf>,
    seed: Option<u64>,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.config.train.seed)
    }

    fn store(&self) -> Result<RunStore> {
        RunStore::resolve(self.run_store.as_deref().or(self.config.run_store.as_deref()))
    }

    fn corpus_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.config.train_corpus.clone())
            .ok_or_else(|| Error::config("no corpus given: pass --input or set train_corpus"))
    }

    fn load_corpus(&self, flag: &Option<PathBuf>) -> Result<LabeledDataset> {
        corpus::load_labeled_corpus(self.corpus_path(flag)?, &self.config.schema)
    }

    fn split(&self, data: &DataArgs) -> Result<SplitResult> {
        let dataset = self.load_corpus(&data.input)?;
        match &data.manifest {
            Some(m) => SplitResult::read_manifest(&dataset, m),
            None => corpus::split(&dataset, data.ratio.unwrap_or(self.config.split_ratio), self.seed()),
        }
    }

    /// Backbone spec and train config after flag overrides, validated together.
    fn train_setup(&self, hyper: &HyperArgs) -> Result<(BackboneSpec, TrainConfig)> {
        let registry = self.config.registry()?;
        let name = hyper.backbone.as_deref().unwrap_or(&self.config.backbone);
        let spec = backbones::find_backbone(&registry, name)?.clone();
        let mut cfg = self.config.train.clone();
        cfg.seed = self.seed();
        if let Some(v) = hyper.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = hyper.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = hyper.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = hyper.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = &hyper.optimizer {
            cfg.optimizer = match v.as_str() {
                "adamw" => OptimizerKind::AdamW,
                "adafactor" => OptimizerKind::Adafactor,
                other => return Err(Error::config(format!("unknown optimizer {other:?}"))),
            };
        }
        if let Some(v) = &hyper.precision {
            cfg.precision = match v.as_str() {
                "fp32" => Precision::Fp32,
                "fp16" => Precision::Fp16,
                other => return Err(Error::config(format!("unknown precision {other:?}"))),
            };
        }
        if let Some(v) = &hyper.mode {
            cfg.mode = parse_mode(v)?;
        }
        cfg.validate(&spec)?;
        Ok((spec, cfg))
    }
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "joint" | "joint_multilabel" => Ok(TrainMode::JointMultilabel),
        label => Ok(TrainMode::PerSubtask(label.parse()?)),
    }
}

fn parse_metric(s: &str) -> Result<Metric> {
    s.parse()
}

fn out(line: impl AsRef<str>) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", line.as_ref());
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn summarize(record: &RunRecord) -> String {
    let mut line = format!(
        "run_id={} backbone={} status={} epochs={}",
        record.run_id,
        record.backbone,
        record.status.as_str(),
        record.epoch_history.len()
    );
    if let Some((best, epoch)) = record.best(Metric::Macro) {
        line.push_str(&format!(" best_macro_f1={best:.4} best_epoch={epoch}"));
        if let Ok(signal) = training::detect_overfitting(&record.epoch_history, 2) {
            line.push_str(&format!(" overfitting={}", signal.overfitting));
        }
    }
    if let Some(last) = record.epoch_history.last() {
        line.push_str(&format!(" final_loss={:.5}", last.train_loss));
    }
    line
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let config = ProjectConfig::load(cli.config.as_deref())?;
    config.validate()?;
    let ctx = Context {
        config,
        run_store: cli.run_store,
        seed: cli.seed,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Split(a) => split_cmd(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
        Command::Plot(a) => plot(&ctx, a),
        Command::Augment(a) => augment(&ctx, a),
        Command::TrainFull(a) => train_full(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Export(a) => export(a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
    }
}

fn ingest(ctx: &Context, a: IngestArgs) -> Result<()> {
    let ds = ctx.load_corpus(&a.input)?;
    let mut line = format!(
        "entries={} empty_texts={} digest={}",
        ds.len(),
        ds.empty_text_count(),
        training::dataset_digest(&ds)
    );
    for l in Label::ALL {
        let present = ds.entries().iter().filter(|e| e.labels.get(l) == corpus::LabelValue::Present).count();
        let known = ds.entries().iter().filter(|e| e.labels.get(l).is_known()).count();
        line.push_str(&format!(" {}={present}/{known}", l.key()));
    }
    out(line);
    if let Some(p) = a.output {
        corpus::write_labeled_corpus(&ds, &p, &ctx.config.schema)?;
    }
    Ok(())
}

fn split_cmd(ctx: &Context, a: SplitArgs) -> Result<()> {
    let ds = ctx.load_corpus(&a.input)?;
    let s = corpus::split(&ds, a.ratio.unwrap_or(ctx.config.split_ratio), ctx.seed())?;
    s.write_manifest(&a.output)?;
    out(format!(
        "train={} validation={} manifest={} digest={}",
        s.train.len(),
        s.validation.len(),
        a.output.display(),
        s.manifest_digest()
    ));
    Ok(())
}

fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let (spec, cfg) = ctx.train_setup(&a.hyper)?;
    let split = ctx.split(&a.data)?;
    if a.dry_run {
        out(format!(
            "dry_run=ok backbone={} train={} validation={} config={}",
            spec.name,
            split.train.len(),
            split.validation.len(),
            serde_json::to_string(&cfg)?
        ));
        return Ok(());
    }
    let store = ctx.store()?;
    let (model, record) = training::fine_tune(&split, &spec, &cfg, &store)?;
    if let Some(dir) = &a.save_model {
        model.save(dir)?;
    }
    out(summarize(&record));
    Ok(())
}

fn sweep(ctx: &Context, a: SweepArgs) -> Result<()> {
    let (spec, base) = ctx.train_setup(&a.hyper)?;
    let mut grid = ctx.config.sweep.clone();
    if !a.lrs.is_empty() {
        grid.learning_rates = a.lrs.clone();
    }
    if !a.epoch_grid.is_empty() {
        grid.epochs = a.epoch_grid.clone();
    }
    if let Some(b) = a.hyper.batch_size {
        grid.batch_size = b;
    }
    let configs = grid.configs(&base);
    for c in &configs {
        c.validate(&spec)?;
    }
    let split = ctx.split(&a.data)?;
    let store = ctx.store()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunRecord>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.clamp(1, configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let r = training::fine_tune(&split, &spec, cfg, &store).map(|(_, rec)| rec);
                results.lock().unwrap_or_else(|e| e.into_inner()).push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by_key(|(i, _)| *i);
    let mut first_error = None;
    for (_, r) in results {
        match r {
            Ok(rec) => out(summarize(&rec)),
            Err(e) => {
                out(format!("run_failed: {e}"));
                first_error.get_or_insert(e);
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

fn filter_from(backbone: &Option<String>, status: &Option<String>) -> Result<RunFilter> {
    let status = match status.as_deref() {
        None => None,
        Some("completed") => Some(RunStatus::Completed),
        Some("diverged") => Some(RunStatus::Diverged),
        Some("partial") => Some(RunStatus::Partial),
        Some(other) => return Err(Error::config(format!("unknown status {other:?}"))),
    };
    Ok(RunFilter {
        backbone: backbone.clone(),
        status,
    })
}

fn compare(ctx: &Context, a: CompareArgs) -> Result<()> {
    let metric = parse_metric(&a.metric)?;
    let runs = ctx.store()?.load()?;
    let rows = tracking::compare_runs(&runs, &filter_from(&a.backbone, &a.status)?, metric);
    print!("{}", tracking::comparison_tsv(&rows, metric));
    Ok(())
}

fn plot(ctx: &Context, a: PlotArgs) -> Result<()> {
    let metric = parse_metric(&a.subtask)?;
    let filter = filter_from(&a.backbone, &None)?;
    let runs: Vec<RunRecord> = ctx.store()?.load()?.into_iter().filter(|r| filter.matches(r)).collect();
    let sidecar = tracking::plot_history(&runs, metric, &a.output)?;
    out(format!("chart={} table={}", a.output.display(), sidecar.display()));
    Ok(())
}

fn augment(ctx: &Context, a: AugmentArgs) -> Result<()> {
    let base = ctx.load_corpus(&a.data.input)?;
    let schema = match &a.external_schema {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<ExternalSchema>(&text)
                .map_err(|e| Error::config(format!("{}: {}", p.display(), e.message())))?
        }
        None => ExternalSchema::default(),
    };
    let external = augmentation::load_external(&a.external, &schema, a.source_tag.as_deref())?;
    let mapping = LabelMapping::load(&a.mapping)?;
    let (merged, report) = augmentation::merge_external(&base, &external, &mapping)?;
    out(format!(
        "base={} external={} toxic_present={} toxic_absent={} dropped={} merged={}",
        report.base_count,
        report.external_count,
        report.toxic_present,
        report.toxic_absent,
        report.drop_count,
        report.merged_count
    ));
    if let Some(p) = &a.output {
        corpus::write_labeled_corpus(&merged, p, &ctx.config.schema)?;
    }
    if a.run {
        let (spec, mut cfg) = ctx.train_setup(&a.hyper)?;
        if a.hyper.mode.is_none() {
            cfg.mode = TrainMode::PerSubtask(Label::Toxic);
        }
        let ratio = a.data.ratio.unwrap_or(ctx.config.split_ratio);
        let paired = augmentation::paired_splits(&base, &external, &mapping, ratio, ctx.seed())?;
        let (baseline, augmented) = augmentation::run_paired(&paired, &spec, &cfg, &ctx.store()?)?;
        out(format!("baseline {}", summarize(&baseline)));
        out(format!("augmented {}", summarize(&augmented)));
    }
    Ok(())
}

fn train_full(ctx: &Context, a: TrainFullArgs) -> Result<()> {
    let dataset = ctx.load_corpus(&a.input)?;
    let registry = ctx.config.registry()?;
    let store = ctx.store()?;
    let mut plans: Vec<(BackboneSpec, TrainConfig, String)> = Vec::new();
    match a.from_top {
        Some(k) => {
            let metric = parse_metric(&a.metric)?;
            let top = inference::select_top_runs(&store.load()?, metric, k)?;
            if top.is_empty() {
                return Err(Error::validation("no run in the store has validation scores"));
            }
            for r in top {
                let spec = backbones::find_backbone(&registry, &r.backbone)?.clone();
                plans.push((spec, r.config.clone(), r.run_id.clone()));
            }
        }
        None => {
            let (spec, cfg) = ctx.train_setup(&a.hyper)?;
            plans.push((spec, cfg, "manual".into()));
        }
    }
    for (spec, cfg, origin) in plans {
        let results = match (cfg.mode, a.all_subtasks) {
            (TrainMode::PerSubtask(_), true) => training::train_full_per_subtask(&dataset, &spec, &cfg, &store)?,
            _ => vec![training::train_on_full_data(&dataset, &spec, &cfg, &store)?],
        };
        for (model, record) in results {
            let dir = a.output_dir.join(&record.run_id);
            model.save(&dir)?;
            out(format!("from={origin} model={} {}", dir.display(), summarize(&record)));
        }
    }
    Ok(())
}

fn predict(ctx: &Context, a: PredictArgs) -> Result<()> {
    let models = a.models.iter().map(|d| FittedModel::load(d)).collect::<Result<Vec<_>>>()?;
    let set = ModelSet::from_models(models)?;
    let path = a
        .input
        .clone()
        .or_else(|| ctx.config.test_corpus.clone())
        .ok_or_else(|| Error::config("no comments given: pass --input or set test_corpus"))?;
    let comments = corpus::load_comments(&path, &ctx.config.schema)?;
    let preds = inference::predict(&set, &comments, a.threshold.unwrap_or(ctx.config.threshold))?;
    preds.save(&a.output)?;
    let mut positives: BTreeMap<Label, usize> = BTreeMap::new();
    for p in &preds.predictions {
        for (&l, &d) in &p.decisions {
            *positives.entry(l).or_default() += d as usize;
        }
    }
    let counts: Vec<String> = positives.iter().map(|(l, n)| format!("{}={n}", l.key())).collect();
    out(format!("comments={} positive: {} output={}", preds.predictions.len(), counts.join(" "), a.output.display()));
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let format: SubmissionFormat = a.format.parse()?;
    let preds = PredictionSet::load(&a.predictions)?;
    inference::export_submission(&preds, &a.output, format)?;
    out(format!("rows={} output={}", preds.predictions.len(), a.output.display()));
    Ok(())
}

fn analyze(ctx: &Context, a: AnalyzeArgs) -> Result<()> {
    let filter: PatternFilter = a.filter.parse()?;
    let gold = ctx.load_corpus(&a.gold)?;
    let preds = PredictionSet::load(&a.predictions)?;
    let limit = (!a.full_text).then_some(a.excerpt);
    let report = analysis::disagreement_report(&gold, &preds, filter, limit)?;
    match &a.output {
        Some(p) => write_file(p, report.to_text())?,
        None => print!("{}", report.to_text()),
    }
    if let Some(p) = &a.tsv {
        write_file(p, report.to_tsv())?;
    }
    Ok(())
}

fn synth(ctx: &Context, a: SynthArgs) -> Result<()> {
    let ds = corpus::synthetic_marker_corpus(a.n, ctx.seed());
    corpus::write_labeled_corpus(&ds, &a.output, &ColumnSchema::default())?;
    out(format!("entries={} output={}", ds.len(), a.output.display()));
    Ok(())
}

/// One-line, machine-parseable error report.
pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    let flat: String = message
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" | ");
    format!("error kind={kind} code={code}: {flat}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ProjectConfig::parse("threshold = 0.5\nbogus = 1\n", "t").is_err());
        assert!(ProjectConfig::parse("[train]\nlr = 1\n", "t").is_err());
        let c = ProjectConfig::parse("backbone = \"tiny_test\"\n[train]\nlearning_rate = 0.003\nmax_len = 64\n", "t").unwrap();
        assert_eq!(c.train.learning_rate, 0.003);
        assert_eq!(c.train.epochs, TrainConfig::default().epochs);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let bad = ProjectConfig {
            threshold: 1.0,
            ..ProjectConfig::default()
        };
        assert!(bad.validate().is_err());
        let unknown = ProjectConfig {
            backbone: "nope".into(),
            ..ProjectConfig::default()
        };
        assert!(unknown.validate().is_err());
    }

    #[test]
    fn error_line_is_single_line() {
        let l = error_line("usage", 1, "bad flag\n\n  tip: see --help\n");
        assert_eq!(l, "error kind=usage code=1: bad flag | tip: see --help");
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
