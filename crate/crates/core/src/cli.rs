//! Experiment runner behind the `ctxsql` binary: `run`, `eval`, `ftdata`
//! and `report`. Every command is a plain function so tests can drive it
//! with an injected transport.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, load_schema_catalog, sample_cells, SchemaCatalog, Split};
use crate::eval::{self, EvalReport, ScoreOptions};
use crate::llm::{HttpTransport, LlmClient, MockScript, MockTransport, ResponseCache, Transport, UsageLedger};
use crate::pipeline::{
    build_finetune_dataset, finetune_job_stub, read_finetune_records, read_predictions, write_finetune_jsonl,
    CorrectorMode, FinetuneBuild, IclStrategy, Pipeline, RunConfig, StrategyConfig,
};
use crate::promptgen::{HistoryMode, PromptStyle};
use crate::select::{Embedder, ExemplarPool, HashingEmbedder, HttpEmbeddingProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmProvider {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSpec {
    pub provider: LlmProvider,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub mock_script: Option<PathBuf>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for LlmSpec {
    fn default() -> Self {
        Self {
            provider: LlmProvider::Http,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            mock_script: None,
            max_in_flight: 4,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingBackend {
    #[default]
    Hashing,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSpec {
    pub provider: EmbeddingBackend,
    pub model: String,
    pub dim: usize,
    pub base_url: String,
    pub api_key_env: String,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        Self {
            provider: EmbeddingBackend::Hashing,
            model: "all-mpnet-base-v2".into(),
            dim: 768,
            base_url: "http://localhost:8080/v1".into(),
            api_key_env: "EMBEDDING_API_KEY".into(),
        }
    }
}

/// Everything one experiment needs. Loaded from TOML, then overridden by
/// command-line flags; the resolved form is written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub label: Option<String>,
    pub dataset: PathBuf,
    pub split: Split,
    /// Training set supplying in-context exemplars.
    pub train: Option<PathBuf>,
    pub tables: PathBuf,
    pub database_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
    pub timeout_secs: u64,
    pub run: RunConfig,
    pub llm: LlmSpec,
    pub embedding: EmbeddingSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            label: None,
            dataset: PathBuf::new(),
            split: Split::Test,
            train: None,
            tables: PathBuf::new(),
            database_dir: None,
            output_dir: PathBuf::from("runs/default"),
            cache_dir: None,
            workers: 4,
            timeout_secs: 30,
            run: RunConfig::default(),
            llm: LlmSpec::default(),
            embedding: EmbeddingSpec::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentSpec {
    /// Relative paths in the file are taken relative to the file itself.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec: ExperimentSpec = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut spec.dataset);
        rebase(base, &mut spec.tables);
        rebase(base, &mut spec.output_dir);
        for p in [&mut spec.train, &mut spec.database_dir, &mut spec.cache_dir, &mut spec.llm.mock_script]
            .into_iter()
            .flatten()
        {
            rebase(base, p);
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Checks referenced paths before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        let must_exist = |what: &str, p: &Path| -> Result<()> {
            if p.as_os_str().is_empty() {
                bail!("{what} path is not set");
            }
            if !p.exists() {
                bail!("{what} not found: {}", p.display());
            }
            Ok(())
        };
        must_exist("dataset", &self.dataset)?;
        must_exist("tables", &self.tables)?;
        if let Some(d) = &self.database_dir {
            must_exist("database directory", d)?;
        }
        if let Some(s) = &self.run.strategy {
            let needs_train = s.kind != IclStrategy::GatReviser || s.reviser_exemplars;
            match &self.train {
                Some(t) => must_exist("train set", t)?,
                None if needs_train => bail!("strategy {} needs a `train` exemplar set", s.kind),
                None => {}
            }
        }
        if self.llm.provider == LlmProvider::Mock {
            match &self.llm.mock_script {
                Some(p) => must_exist("mock script", p)?,
                None => bail!("llm.provider = mock needs llm.mock_script"),
            }
        }
        Ok(())
    }

    fn catalog(&self) -> Result<SchemaCatalog> {
        let catalog = load_schema_catalog(&self.tables)?;
        Ok(match &self.database_dir {
            Some(d) => catalog.with_database_dir(d),
            None => catalog,
        })
    }

    fn transport(&self) -> Result<Arc<dyn Transport>> {
        Ok(match self.llm.provider {
            LlmProvider::Mock => {
                let path = self.llm.mock_script.as_deref().context("mock provider without script")?;
                Arc::new(MockTransport::new(MockScript::load(path).map_err(anyhow::Error::msg)?))
            }
            LlmProvider::Http => {
                let mut t = HttpTransport::from_env(&self.llm.base_url, &self.llm.api_key_env);
                t.timeout = Duration::from_secs(self.llm.timeout_secs);
                Arc::new(t)
            }
        })
    }

    fn embedder(&self) -> Result<Embedder> {
        let provider: Box<dyn crate::select::EmbeddingProvider> = match self.embedding.provider {
            EmbeddingBackend::Hashing => Box::new(HashingEmbedder::new(self.embedding.dim)),
            EmbeddingBackend::Http => Box::new(HttpEmbeddingProvider {
                base_url: self.embedding.base_url.clone(),
                model: self.embedding.model.clone(),
                api_key: std::env::var(&self.embedding.api_key_env).ok().filter(|k| !k.is_empty()),
                dim: self.embedding.dim,
                timeout: Duration::from_secs(self.llm.timeout_secs),
            }),
        };
        let embedder = Embedder::new(provider);
        Ok(match &self.cache_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let name = format!("embeddings-{}-{}.json", self.embedding.model.replace('/', "_"), self.embedding.dim);
                embedder.with_cache_file(&dir.join(name))?
            }
            None => embedder,
        })
    }
}

/// What `run` leaves behind, besides its files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub predictions: usize,
    pub transport_calls: u64,
    pub usage: UsageLedger,
    pub output_dir: PathBuf,
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const USAGE_FILE: &str = "usage.json";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const REPORT_FILE: &str = "report.json";
pub const DETAIL_FILE: &str = "per_turn.csv";

/// Runs one experiment. `transport` replaces the configured provider.
pub fn cmd_run(spec: &ExperimentSpec, transport: Option<Arc<dyn Transport>>) -> Result<RunSummary> {
    spec.validate()?;
    let dataset = load_dataset(&spec.dataset, spec.split)?;
    let catalog = spec.catalog()?;
    dataset.validate_against(&catalog)?;

    let mut schemas = BTreeMap::new();
    for db_id in dataset.database_ids() {
        let schema = catalog.get(db_id).expect("validated above");
        let schema = if spec.run.with_values {
            sample_cells(schema, spec.run.value_rows, spec.run.seed)?
        } else {
            schema.clone()
        };
        schemas.insert(db_id.to_string(), schema);
    }

    let transport = match transport {
        Some(t) => t,
        None => spec.transport()?,
    };
    let mut client = LlmClient::new(transport).with_max_in_flight(spec.llm.max_in_flight);
    if let Some(dir) = &spec.cache_dir {
        client = client.with_cache(ResponseCache::new(&dir.join("llm")).map_err(anyhow::Error::msg)?);
    }

    let pool = match (&spec.run.strategy, &spec.train) {
        (Some(_), Some(train)) => Some(ExemplarPool::from_dataset(&load_dataset(train, Split::Train)?)),
        _ => None,
    };
    let needs_embedder = spec
        .run
        .strategy
        .is_some_and(|s| matches!(s.kind, IclStrategy::Qts | IclStrategy::Mqs | IclStrategy::Dail));
    let embedder = if needs_embedder { Some(spec.embedder()?) } else { None };
    let pool = match (pool, &embedder) {
        (Some(mut p), Some(e)) => {
            p.prepare_embeddings(e, &catalog)?;
            Some(p)
        }
        (p, _) => p,
    };

    std::fs::create_dir_all(&spec.output_dir)
        .with_context(|| format!("creating {}", spec.output_dir.display()))?;
    std::fs::write(spec.output_dir.join(CONFIG_FILE), spec.to_toml())?;

    let mut pipeline = Pipeline::new(&client, &spec.run);
    if let Some(p) = &pool {
        pipeline = pipeline.with_pool(p, &catalog);
    }
    if let Some(e) = &embedder {
        pipeline = pipeline.with_embedder(e);
    }
    let predictions = pipeline.run_dataset(&dataset, &schemas, spec.workers, Some(&spec.output_dir.join(PREDICTIONS_FILE)))?;

    let summary = RunSummary {
        predictions: predictions.len(),
        transport_calls: client.transport_calls(),
        usage: client.usage(),
        output_dir: spec.output_dir.clone(),
    };
    std::fs::write(spec.output_dir.join(USAGE_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Scores a predictions file. Missing turns count as incorrect and are
/// listed; predictions for turns not in the dataset are an error.
pub fn cmd_eval(
    predictions: &Path,
    dataset: &Path,
    tables: &Path,
    database_dir: Option<&Path>,
    opts: &ScoreOptions,
    out_dir: Option<&Path>,
    label: Option<String>,
) -> Result<EvalReport> {
    let preds = if predictions.exists() {
        read_predictions(predictions)?
    } else {
        bail!("predictions file not found: {}", predictions.display());
    };
    let ds = load_dataset(dataset, Split::Test)?;
    let mut catalog = load_schema_catalog(tables)?;
    if let Some(d) = database_dir {
        catalog = catalog.with_database_dir(d);
    }
    let mut report = eval::score(&ds, &preds, &catalog, opts)?;
    report.label = label;
    if !report.missing.is_empty() {
        let shown: Vec<String> = report.missing.iter().take(20).map(|(i, t)| format!("{i}#{t}")).collect();
        log::warn!(
            "{} turns have no prediction and count as incorrect: {}{}",
            report.missing.len(),
            shown.join(", "),
            if report.missing.len() > 20 { ", ..." } else { "" }
        );
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report.write_json(&dir.join(REPORT_FILE))?;
        report.write_csv(&dir.join(DETAIL_FILE))?;
    }
    Ok(report)
}

/// Builds the corrector fine-tune file plus a job stub at `<out>.job.json`.
pub fn cmd_ftdata(records: &Path, tables: &Path, out: &Path) -> Result<FinetuneBuild> {
    let recs = read_finetune_records(records)?;
    let catalog = load_schema_catalog(tables)?;
    let build = build_finetune_dataset(&recs, &catalog)?;
    write_finetune_jsonl(&build.samples, out)?;
    let stub = finetune_job_stub(&out.display().to_string(), build.balance);
    let mut job = out.as_os_str().to_owned();
    job.push(".job.json");
    std::fs::write(PathBuf::from(job), serde_json::to_string_pretty(&stub)?)?;
    Ok(build)
}

#[derive(Deserialize)]
struct ReportFile {
    label: Option<String>,
    ex: f64,
    ix: f64,
    n_questions: usize,
    n_interactions: usize,
    correct_questions: usize,
    correct_interactions: usize,
}

/// Reads report files (or run directories holding `report.json`) into a grid.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    let mut reports = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
        let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let r: ReportFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
        let fallback = p.file_stem().map(|s| s.to_string_lossy().into_owned());
        reports.push(EvalReport {
            label: r.label.or(fallback),
            ex: r.ex,
            ix: r.ix,
            n_questions: r.n_questions,
            n_interactions: r.n_interactions,
            correct_questions: r.correct_questions,
            correct_interactions: r.correct_interactions,
            missing: Vec::new(),
            per_turn: Vec::new(),
        });
    }
    Ok(format!("{}\n{}", eval::render_table(&reports), eval::render_grid(&reports)))
}

#[derive(Debug, Parser)]
#[command(name = "ctxsql", version, about = "Context-dependent text-to-SQL experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate predictions for every turn of a dataset.
    Run(Box<RunArgs>),
    /// Score predictions by execution (EX and IX).
    Eval(EvalArgs),
    /// Build the corrector fine-tuning file.
    Ftdata(FtdataArgs),
    /// Compare several evaluated runs.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// TOML experiment file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub tables: Option<PathBuf>,
    #[arg(long)]
    pub database_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// BSp, TRp, CRp or ODp.
    #[arg(long)]
    pub style: Option<PromptStyle>,
    /// none, questions_only or questions_and_predicted_sql.
    #[arg(long)]
    pub history: Option<HistoryMode>,
    /// Random, QTSs, MQSs, QRSs, DAILs or GATr.
    #[arg(long)]
    pub strategy: Option<IclStrategy>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub reviser_exemplars: Option<bool>,
    #[arg(long)]
    pub with_values: Option<bool>,
    #[arg(long)]
    pub value_rows: Option<usize>,
    #[arg(long)]
    pub budget_tokens: Option<usize>,
    #[arg(long)]
    pub max_shots: Option<usize>,
    /// off, verifier or corrector.
    #[arg(long)]
    pub corrector: Option<CorrectorMode>,
    #[arg(long)]
    pub verifier_max_retries: Option<u32>,
    #[arg(long)]
    pub generator_model: Option<String>,
    #[arg(long)]
    pub verifier_model: Option<String>,
    #[arg(long)]
    pub corrector_model: Option<String>,
    #[arg(long)]
    pub preliminary_model: Option<String>,
    #[arg(long)]
    pub embedding_model: Option<String>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
}

impl RunArgs {
    /// File values first, then every flag that was given.
    pub fn resolve(&self) -> Result<ExperimentSpec> {
        let mut s = match &self.config {
            Some(p) => ExperimentSpec::from_toml_file(p)?,
            None => ExperimentSpec::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = &self.$flag {
                    $($field)+ = v.clone().into();
                }
            };
        }
        set!(label => s.label);
        set!(dataset => s.dataset);
        set!(split => s.split);
        set!(train => s.train);
        set!(tables => s.tables);
        set!(database_dir => s.database_dir);
        set!(output_dir => s.output_dir);
        set!(cache_dir => s.cache_dir);
        set!(workers => s.workers);
        set!(timeout_secs => s.timeout_secs);
        set!(seed => s.run.seed);
        set!(style => s.run.style);
        set!(history => s.run.history_mode);
        set!(with_values => s.run.with_values);
        set!(value_rows => s.run.value_rows);
        set!(budget_tokens => s.run.budget_tokens);
        set!(max_shots => s.run.max_shots);
        set!(corrector => s.run.corrector);
        set!(verifier_max_retries => s.run.verifier_max_retries);
        set!(generator_model => s.run.models.generator);
        set!(verifier_model => s.run.models.verifier);
        set!(corrector_model => s.run.models.corrector);
        set!(preliminary_model => s.run.models.preliminary);
        set!(embedding_model => s.embedding.model);
        set!(base_url => s.llm.base_url);
        if let Some(p) = &self.mock_script {
            s.llm.mock_script = Some(p.clone());
            s.llm.provider = LlmProvider::Mock;
        }
        if let Some(kind) = self.strategy {
            let prev = s.run.strategy.unwrap_or(StrategyConfig::new(kind));
            s.run.strategy = Some(StrategyConfig { kind, ..prev });
        }
        if let Some(st) = &mut s.run.strategy {
            if let Some(k) = self.k {
                st.k = k;
            }
            if let Some(t) = self.threshold {
                st.threshold = t;
            }
            if let Some(r) = self.reviser_exemplars {
                st.reviser_exemplars = r;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub database_dir: Option<PathBuf>,
    /// Directory for report.json and per_turn.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    #[arg(long)]
    pub column_permutation: bool,
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct FtdataArgs {
    /// One JSON record per line: db_id, question, sql, gold_sql.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files or run directories containing one.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

/// Entry point shared by the binary and tests.
pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let spec = args.resolve()?;
            let s = cmd_run(&spec, None)?;
            let totals = s.usage.totals();
            println!(
                "{} predictions -> {} ({} provider requests, {} cache hits, {} prompt / {} completion tokens)",
                s.predictions,
                s.output_dir.join(PREDICTIONS_FILE).display(),
                totals.requests,
                totals.cache_hits,
                totals.prompt_tokens,
                totals.completion_tokens
            );
        }
        Command::Eval(a) => {
            let opts = ScoreOptions {
                timeout: Duration::from_secs(a.timeout_secs),
                column_permutation: a.column_permutation,
                epsilon: a.epsilon,
            };
            let r = cmd_eval(&a.predictions, &a.dataset, &a.tables, a.database_dir.as_deref(), &opts, a.out.as_deref(), a.label)?;
            print!("{}", eval::render_table(std::slice::from_ref(&r)));
        }
        Command::Ftdata(a) => {
            let b = cmd_ftdata(&a.records, &a.tables, &a.out)?;
            println!(
                "{} samples -> {}; correct/incorrect: {}",
                b.samples.len(),
                a.out.display(),
                b.balance
            );
        }
        Command::Report(a) => print!("{}", cmd_report(&a.reports)?),
    }
    Ok(())
}
