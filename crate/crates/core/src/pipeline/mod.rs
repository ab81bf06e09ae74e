//! Per-interaction prediction loop plus the reviser, verifier and corrector
//! post-passes.

mod finetune;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, DatabaseSchema, Dataset, Interaction, SchemaCatalog};
use crate::llm::{ChatMessage, ChatRequest, ChatResponse, LlmClient, LlmError};
use crate::promptgen::{
    self, HistoryItem, HistoryMode, IclBudget, PromptError, PromptStyle, RenderOptions, Shot,
};
use crate::select::{self, Embedder, ExemplarPool, SelectError, SelectionResult, SelectionStrategy};
use crate::sqltext::{extract_sql, SqlTextError};

pub use finetune::{
    build_finetune_dataset, corrector_user_message, decode_finetune_line, finetune_job_stub, read_finetune_records,
    write_finetune_jsonl, FinetuneBuild, FinetuneLabel, FinetuneRecord, FinetuneSample, LabelBalance,
    CORRECTOR_INSTRUCTION,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error("no SQL in model response: {0}")]
    Extraction(SqlTextError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

/// Which post-pass runs after generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectorMode {
    #[default]
    Off,
    Verifier,
    Corrector,
}

impl std::str::FromStr for CorrectorMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(CorrectorMode::Off),
            "verifier" | "gatv" => Ok(CorrectorMode::Verifier),
            "corrector" | "gatc" => Ok(CorrectorMode::Corrector),
            _ => Err(PipelineError::Config(format!("unknown corrector mode `{s}`"))),
        }
    }
}

/// In-context technique: one of the selection strategies, or the reviser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IclStrategy {
    Random,
    #[serde(rename = "QTSs")]
    Qts,
    #[serde(rename = "MQSs")]
    Mqs,
    #[serde(rename = "QRSs")]
    Qrs,
    #[serde(rename = "DAILs")]
    Dail,
    #[serde(rename = "GATr")]
    GatReviser,
}

impl IclStrategy {
    pub fn selection(self) -> Option<SelectionStrategy> {
        match self {
            IclStrategy::Random => Some(SelectionStrategy::Random),
            IclStrategy::Qts => Some(SelectionStrategy::Qts),
            IclStrategy::Mqs => Some(SelectionStrategy::Mqs),
            IclStrategy::Qrs => Some(SelectionStrategy::Qrs),
            IclStrategy::Dail => Some(SelectionStrategy::Dail),
            IclStrategy::GatReviser => None,
        }
    }

    fn needs_preliminary(self) -> bool {
        matches!(self, IclStrategy::Qrs | IclStrategy::Dail | IclStrategy::GatReviser)
    }

    fn needs_embeddings(self) -> bool {
        matches!(self, IclStrategy::Qts | IclStrategy::Mqs | IclStrategy::Dail)
    }
}

impl std::fmt::Display for IclStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.selection() {
            Some(s) => write!(f, "{s}"),
            None => f.write_str("GATr"),
        }
    }
}

impl std::str::FromStr for IclStrategy {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if matches!(s.to_ascii_lowercase().as_str(), "gatr" | "gat_reviser" | "reviser") {
            return Ok(IclStrategy::GatReviser);
        }
        let sel: SelectionStrategy = s
            .parse()
            .map_err(|_| PipelineError::Config(format!("unknown strategy `{s}`")))?;
        Ok(match sel {
            SelectionStrategy::Random => IclStrategy::Random,
            SelectionStrategy::Qts => IclStrategy::Qts,
            SelectionStrategy::Mqs => IclStrategy::Mqs,
            SelectionStrategy::Qrs => IclStrategy::Qrs,
            SelectionStrategy::Dail => IclStrategy::Dail,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: IclStrategy,
    pub k: usize,
    /// DAILs stage-one similarity cutoff.
    pub threshold: f64,
    /// Whether the reviser prompt also carries QRSs-selected exemplars.
    #[serde(default)]
    pub reviser_exemplars: bool,
}

impl StrategyConfig {
    pub fn new(kind: IclStrategy) -> Self {
        Self { kind, k: 3, threshold: 0.7, reviser_exemplars: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: String,
    pub verifier: String,
    pub corrector: String,
    pub preliminary: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: "gpt-3.5-turbo".into(),
            verifier: "gpt-3.5-turbo".into(),
            corrector: "ft:gpt-3.5-turbo:gat-corrector".into(),
            preliminary: "gpt-3.5-turbo".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub style: PromptStyle,
    pub history_mode: HistoryMode,
    pub strategy: Option<StrategyConfig>,
    pub with_values: bool,
    pub value_rows: usize,
    pub budget_tokens: usize,
    pub max_shots: usize,
    pub corrector: CorrectorMode,
    pub verifier_max_retries: u32,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: u64,
    pub models: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            style: PromptStyle::Odp,
            history_mode: HistoryMode::default(),
            strategy: None,
            with_values: false,
            value_rows: 3,
            budget_tokens: 4096,
            max_shots: 3,
            corrector: CorrectorMode::Off,
            verifier_max_retries: 1,
            temperature: 0.0,
            max_output_tokens: 512,
            seed: 0,
            models: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.budget_tokens == 0 {
            return Err(PipelineError::Config("budget_tokens must be > 0".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(PipelineError::Config("temperature must be >= 0".into()));
        }
        if let Some(s) = &self.strategy {
            if !(0.0..=1.0).contains(&s.threshold) {
                return Err(PipelineError::Config("threshold must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions { style: self.style, history_mode: self.history_mode, with_values: self.with_values }
    }

    fn budget(&self) -> IclBudget {
        IclBudget { budget_tokens: self.budget_tokens, max_shots: self.max_shots }
    }

    fn request(&self, model: &str, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: model.to_string(),
            messages,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierVerdict {
    pub is_correct: bool,
    pub explanation: String,
}

/// Reads a leading true/false (any case, optional punctuation) and keeps the
/// remainder as the explanation. Anything else is a false verdict carrying
/// the raw text.
pub fn parse_verdict(raw: &str) -> VerifierVerdict {
    let trimmed = raw.trim();
    let body = trimmed.trim_start_matches(|c: char| !c.is_alphanumeric());
    let lower = body.to_ascii_lowercase();
    let fallback = || {
        if trimmed.is_empty() { "empty verifier response".to_string() } else { trimmed.to_string() }
    };
    for (word, is_correct) in [("true", true), ("false", false)] {
        if !lower.starts_with(word) {
            continue;
        }
        let rest = &body[word.len()..];
        if rest.chars().next().is_some_and(|c| c.is_alphanumeric() || c == '_') {
            break;
        }
        let explanation = rest
            .trim_start_matches(|c: char| c.is_whitespace() || ":.,;-!*\"'".contains(c))
            .trim()
            .to_string();
        if !is_correct && explanation.is_empty() {
            return VerifierVerdict { is_correct, explanation: fallback() };
        }
        return VerifierVerdict { is_correct, explanation };
    }
    VerifierVerdict { is_correct: false, explanation: fallback() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    fn add(&mut self, r: &ChatResponse) {
        self.prompt_tokens += r.prompt_tokens;
        self.completion_tokens += r.completion_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionStatus {
    #[default]
    Answered,
    ExtractionFailed,
    Unanswered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub interaction_id: String,
    pub turn_position: u32,
    pub status: PredictionStatus,
    pub raw_response: String,
    pub extracted_sql: String,
    #[serde(default)]
    pub corrected_sql: Option<String>,
    #[serde(default)]
    pub preliminary_sql: Option<String>,
    #[serde(default)]
    pub verifier_verdicts: Vec<VerifierVerdict>,
    #[serde(default)]
    pub correction_fallback: bool,
    #[serde(default)]
    pub shot_count: usize,
    /// Chat calls made for this turn, post-passes included.
    #[serde(default)]
    pub llm_calls: u32,
    /// The subset of `llm_calls` spent in the verifier or corrector.
    #[serde(default)]
    pub correction_calls: u32,
    #[serde(default)]
    pub usage: TokenUsage,
    #[serde(default)]
    pub error: Option<String>,
}

impl Prediction {
    fn new(interaction_id: &str, turn_position: u32) -> Self {
        Self {
            interaction_id: interaction_id.to_string(),
            turn_position,
            status: PredictionStatus::Answered,
            raw_response: String::new(),
            extracted_sql: String::new(),
            corrected_sql: None,
            preliminary_sql: None,
            verifier_verdicts: Vec::new(),
            correction_fallback: false,
            shot_count: 0,
            llm_calls: 0,
            correction_calls: 0,
            usage: TokenUsage::default(),
            error: None,
        }
    }

    /// Gold-free stand-in for a turn the pipeline never answered.
    pub fn unanswered(interaction_id: &str, turn_position: u32, error: impl Into<String>) -> Self {
        Self {
            status: PredictionStatus::Unanswered,
            error: Some(error.into()),
            ..Self::new(interaction_id, turn_position)
        }
    }

    /// The SQL that is scored and carried into later history.
    pub fn final_sql(&self) -> Option<&str> {
        if self.status == PredictionStatus::Unanswered {
            return None;
        }
        let sql = self.corrected_sql.as_deref().unwrap_or(&self.extracted_sql);
        (!sql.trim().is_empty()).then_some(sql)
    }
}

/// Supplies the draft SQL that QRSs, DAILs and the reviser start from.
pub trait PreliminaryPredictor: Send + Sync {
    fn predict(&self, schema: &DatabaseSchema, history: &[HistoryItem], question: &str) -> Result<String, PipelineError>;
}

/// Predictor that always returns the same SQL; handy in tests.
pub struct FixedPreliminary(pub String);

impl PreliminaryPredictor for FixedPreliminary {
    fn predict(&self, _: &DatabaseSchema, _: &[HistoryItem], _: &str) -> Result<String, PipelineError> {
        Ok(self.0.clone())
    }
}

const REVISER_INSTRUCTIONS: [&str; 3] = [
    "A draft SQL query for this question was produced by another model:",
    "Check the draft against the schema and the question. Return it unchanged if it answers the question, otherwise return a fixed query.",
    "Reply with the SQL query only.",
];

pub const VERIFIER_INSTRUCTION: &str = "You are a helpful assistant that judges whether an SQL query correctly answers the user's question. Reply with True if it does. Otherwise reply with False, a colon, and a short explanation of the error.";

/// Accumulates calls and tokens for one turn.
struct TurnLedger<'p> {
    prediction: &'p mut Prediction,
}

impl TurnLedger<'_> {
    fn charge(&mut self, r: &ChatResponse, correction: bool) {
        self.prediction.llm_calls += 1;
        if correction {
            self.prediction.correction_calls += 1;
        }
        self.prediction.usage.add(r);
    }
}

/// Runs turns against an [`LlmClient`] under one [`RunConfig`].
pub struct Pipeline<'a> {
    client: &'a LlmClient,
    config: &'a RunConfig,
    pool: Option<&'a ExemplarPool>,
    exemplar_schemas: Option<&'a SchemaCatalog>,
    embedder: Option<&'a Embedder>,
    preliminary: Option<&'a dyn PreliminaryPredictor>,
}

impl<'a> Pipeline<'a> {
    pub fn new(client: &'a LlmClient, config: &'a RunConfig) -> Self {
        Self { client, config, pool: None, exemplar_schemas: None, embedder: None, preliminary: None }
    }

    /// Exemplars and the catalog their schemas come from.
    pub fn with_pool(mut self, pool: &'a ExemplarPool, schemas: &'a SchemaCatalog) -> Self {
        self.pool = Some(pool);
        self.exemplar_schemas = Some(schemas);
        self
    }

    pub fn with_embedder(mut self, embedder: &'a Embedder) -> Self {
        self.embedder = Some(embedder);
        self
    }

    /// Replaces the default zero-shot ODp draft from the preliminary model.
    pub fn with_preliminary(mut self, p: &'a dyn PreliminaryPredictor) -> Self {
        self.preliminary = Some(p);
        self
    }

    pub fn config(&self) -> &RunConfig {
        self.config
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.config.validate()?;
        let Some(s) = &self.config.strategy else {
            return Ok(());
        };
        let wants_pool = s.kind.selection().is_some() || s.reviser_exemplars;
        if wants_pool && self.pool.is_none() {
            return Err(PipelineError::Config(format!("strategy {} needs an exemplar pool", s.kind)));
        }
        if s.kind.needs_embeddings() {
            if self.embedder.is_none() {
                return Err(PipelineError::Config(format!("strategy {} needs an embedder", s.kind)));
            }
            if !self.pool.is_some_and(|p| p.embeddings_ready) {
                return Err(SelectError::EmbeddingsNotReady.into());
            }
        }
        Ok(())
    }

    fn chat(&self, model: &str, messages: Vec<ChatMessage>) -> Result<ChatResponse, PipelineError> {
        Ok(self.client.chat(&self.config.request(model, messages))?)
    }

    fn preliminary_sql(
        &self,
        schema: &DatabaseSchema,
        history: &[HistoryItem],
        question: &str,
        ledger: &mut TurnLedger<'_>,
    ) -> Result<String, PipelineError> {
        if let Some(p) = self.preliminary {
            return p.predict(schema, history, question);
        }
        let opts = RenderOptions { style: PromptStyle::Odp, ..self.config.render_options() };
        let prompt = promptgen::render_zero_shot(schema, history, question, &opts)?;
        let r = self.chat(&self.config.models.preliminary, vec![ChatMessage::user(prompt.text)])?;
        ledger.charge(&r, false);
        extract_sql(&r.text).map_err(PipelineError::Extraction)
    }

    fn turn_seed(&self, interaction_id: &str, position: u32) -> u64 {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(interaction_id.as_bytes());
        h.update(position.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
    }

    fn select(
        &self,
        strategy: SelectionStrategy,
        sc: &StrategyConfig,
        schema: &DatabaseSchema,
        question: &str,
        draft: Option<&str>,
        seed: u64,
    ) -> Result<SelectionResult, PipelineError> {
        let pool = self.pool.ok_or_else(|| PipelineError::Config("no exemplar pool".into()))?;
        let need_embedder = || self.embedder.ok_or_else(|| PipelineError::Config("no embedder".into()));
        let draft = || draft.ok_or_else(|| PipelineError::Config("strategy needs a preliminary SQL".into()));
        Ok(match strategy {
            SelectionStrategy::Random => select::select_random(pool, sc.k, seed),
            SelectionStrategy::Qts => select::select_qts(pool, need_embedder()?, question, sc.k)?,
            SelectionStrategy::Mqs => select::select_mqs(pool, need_embedder()?, question, schema, sc.k)?,
            SelectionStrategy::Qrs => select::select_qrs(pool, draft()?, sc.k)?,
            SelectionStrategy::Dail => {
                select::select_dail(pool, need_embedder()?, question, schema, draft()?, sc.k, sc.threshold)?
            }
        })
    }

    fn shots(&self, selected: &SelectionResult) -> Result<Vec<Shot<'a>>, PipelineError> {
        let pool = self.pool.ok_or_else(|| PipelineError::Config("no exemplar pool".into()))?;
        let schemas = self.exemplar_schemas.ok_or_else(|| PipelineError::Config("no exemplar schemas".into()))?;
        selected
            .indices()
            .into_iter()
            .map(|i| {
                let ex = &pool.exemplars[i];
                let schema = schemas
                    .get(&ex.db_id)
                    .ok_or_else(|| PipelineError::Config(format!("exemplar database `{}` not in catalog", ex.db_id)))?;
                Ok(Shot { schema, question: &ex.question, sql: &ex.gold_sql })
            })
            .collect()
    }

    /// Generation prompt for one turn, with any preliminary SQL it needed.
    fn generation_prompt(
        &self,
        schema: &DatabaseSchema,
        history: &[HistoryItem],
        question: &str,
        seed: u64,
        ledger: &mut TurnLedger<'_>,
    ) -> Result<(String, usize, Option<String>), PipelineError> {
        let opts = self.config.render_options();
        let Some(sc) = self.config.strategy else {
            let p = promptgen::render_zero_shot(schema, history, question, &opts)?;
            return Ok((p.text, 0, None));
        };
        let draft = if sc.kind.needs_preliminary() {
            Some(self.preliminary_sql(schema, history, question, ledger)?)
        } else {
            None
        };
        match sc.kind.selection() {
            Some(strategy) => {
                let selected = self.select(strategy, &sc, schema, question, draft.as_deref(), seed)?;
                let shots = self.shots(&selected)?;
                let p = promptgen::render_icl(schema, history, question, &shots, &opts, self.config.budget())?;
                Ok((p.text, p.shot_count, draft))
            }
            None => {
                let draft = draft.expect("reviser always drafts");
                let (text, shots) = self.reviser_prompt(schema, history, question, &draft, seed)?;
                Ok((text, shots, Some(draft)))
            }
        }
    }

    fn reviser_prompt(
        &self,
        schema: &DatabaseSchema,
        history: &[HistoryItem],
        question: &str,
        draft: &str,
        seed: u64,
    ) -> Result<(String, usize), PipelineError> {
        if draft.trim().is_empty() {
            return Err(PipelineError::Precondition("preliminary SQL is empty".into()));
        }
        let opts = self.config.render_options();
        let style = self.config.style;
        let with_exemplars = self.config.strategy.is_some_and(|s| s.reviser_exemplars);
        let base = if with_exemplars {
            let sc = self.config.strategy.expect("checked above");
            let selected = self.select(SelectionStrategy::Qrs, &sc, schema, question, Some(draft), seed)?;
            let shots = self.shots(&selected)?;
            promptgen::render_icl(schema, history, question, &shots, &opts, self.config.budget())?
        } else {
            promptgen::render_zero_shot(schema, history, question, &opts)?
        };
        let text = format!(
            "{}\n{}\n{}\n{}\n{}",
            base.text,
            style.comment(REVISER_INSTRUCTIONS[0]),
            draft.trim(),
            style.comment(REVISER_INSTRUCTIONS[1]),
            style.comment(REVISER_INSTRUCTIONS[2]),
        );
        Ok((text, base.shot_count))
    }

    /// Reviser flow: the model rewrites or repairs a draft SQL.
    pub fn revise_gatr(
        &self,
        schema: &DatabaseSchema,
        history: &[HistoryItem],
        question: &str,
        preliminary_sql: &str,
    ) -> Result<Prediction, PipelineError> {
        let mut prediction = Prediction::new("", 0);
        let (text, shots) = self.reviser_prompt(schema, history, question, preliminary_sql, 0)?;
        let r = self.chat(&self.config.models.generator, vec![ChatMessage::user(text)])?;
        TurnLedger { prediction: &mut prediction }.charge(&r, false);
        prediction.preliminary_sql = Some(preliminary_sql.to_string());
        prediction.shot_count = shots;
        prediction.extracted_sql = extract_sql(&r.text).map_err(PipelineError::Extraction)?;
        prediction.raw_response = r.text;
        Ok(prediction)
    }

    fn verifier_messages(schema: &DatabaseSchema, question: &str, sql: &str) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(VERIFIER_INSTRUCTION),
            ChatMessage::user(corrector_user_message(schema, question, sql)),
        ]
    }

    pub fn verify_gatv(&self, schema: &DatabaseSchema, question: &str, sql: &str) -> Result<VerifierVerdict, PipelineError> {
        self.verify_charged(schema, question, sql).map(|(v, _)| v)
    }

    fn verify_charged(
        &self,
        schema: &DatabaseSchema,
        question: &str,
        sql: &str,
    ) -> Result<(VerifierVerdict, ChatResponse), PipelineError> {
        if question.trim().is_empty() || sql.trim().is_empty() {
            return Err(PipelineError::Precondition("verifier needs a question and SQL".into()));
        }
        let r = self.chat(&self.config.models.verifier, Self::verifier_messages(schema, question, sql))?;
        Ok((parse_verdict(&r.text), r))
    }

    fn feedback_prompt(&self, generation_prompt: &str, sql: &str, explanation: &str) -> String {
        let style = self.config.style;
        format!(
            "{generation_prompt}\n{}\n{}\n{}\n{}",
            style.comment("A previous attempt produced this SQL query, which was judged incorrect:"),
            sql,
            style.comment(&format!("Reason: {}", explanation.replace('\n', " "))),
            style.comment("Write a new SQL query that fixes the error. Reply with the SQL query only."),
        )
    }

    /// Verify, and on a false verdict regenerate with the explanation
    /// appended, up to `verifier_max_retries` times. An LLM failure inside
    /// the loop keeps the last SQL that was obtained.
    pub fn verifier_retry_loop(
        &self,
        schema: &DatabaseSchema,
        question: &str,
        generation_prompt: &str,
        mut prediction: Prediction,
    ) -> Result<Prediction, PipelineError> {
        if self.config.corrector != CorrectorMode::Verifier {
            return Err(PipelineError::Precondition("verifier loop requires corrector = verifier".into()));
        }
        let mut current = prediction.extracted_sql.clone();
        let mut retries = 0;
        loop {
            let verdict = match self.verify_charged(schema, question, &current) {
                Ok((v, r)) => {
                    TurnLedger { prediction: &mut prediction }.charge(&r, true);
                    v
                }
                Err(e) => {
                    log::warn!("verifier failed: {e}; keeping last SQL");
                    prediction.correction_fallback = true;
                    break;
                }
            };
            let correct = verdict.is_correct;
            let explanation = verdict.explanation.clone();
            prediction.verifier_verdicts.push(verdict);
            if correct || retries >= self.config.verifier_max_retries {
                break;
            }
            retries += 1;
            let prompt = self.feedback_prompt(generation_prompt, &current, &explanation);
            match self.chat(&self.config.models.generator, vec![ChatMessage::user(prompt)]) {
                Ok(r) => {
                    TurnLedger { prediction: &mut prediction }.charge(&r, true);
                    match extract_sql(&r.text) {
                        Ok(sql) => current = sql,
                        Err(e) => {
                            log::warn!("regeneration had no SQL ({e}); keeping last SQL");
                            prediction.correction_fallback = true;
                            break;
                        }
                    }
                }
                Err(e) => {
                    log::warn!("regeneration failed: {e}; keeping last SQL");
                    prediction.correction_fallback = true;
                    break;
                }
            }
        }
        prediction.corrected_sql = Some(current);
        Ok(prediction)
    }

    /// One call to the fine-tuned corrector. Returns the corrected SQL and
    /// whether the input had to be kept because the reply held no SQL.
    pub fn correct_gatc(&self, schema: &DatabaseSchema, question: &str, sql: &str) -> Result<(String, bool), PipelineError> {
        self.correct_charged(schema, question, sql).map(|(s, fb, _)| (s, fb))
    }

    fn correct_charged(
        &self,
        schema: &DatabaseSchema,
        question: &str,
        sql: &str,
    ) -> Result<(String, bool, ChatResponse), PipelineError> {
        if question.trim().is_empty() || sql.trim().is_empty() {
            return Err(PipelineError::Precondition("corrector needs a question and SQL".into()));
        }
        let messages = vec![
            ChatMessage::system(CORRECTOR_INSTRUCTION),
            ChatMessage::user(corrector_user_message(schema, question, sql)),
        ];
        let r = self.chat(&self.config.models.corrector, messages)?;
        match extract_sql(&r.text) {
            Ok(fixed) => Ok((fixed, false, r)),
            Err(_) => Ok((sql.to_string(), true, r)),
        }
    }

    fn run_turn(
        &self,
        interaction_id: &str,
        schema: &DatabaseSchema,
        history: &[HistoryItem],
        position: u32,
        question: &str,
    ) -> Result<Prediction, PipelineError> {
        let mut prediction = Prediction::new(interaction_id, position);
        let seed = self.turn_seed(interaction_id, position);
        let (prompt, shots, draft) =
            self.generation_prompt(schema, history, question, seed, &mut TurnLedger { prediction: &mut prediction })?;
        prediction.shot_count = shots;
        prediction.preliminary_sql = draft;
        let r = self.chat(&self.config.models.generator, vec![ChatMessage::user(prompt.clone())])?;
        TurnLedger { prediction: &mut prediction }.charge(&r, false);
        prediction.raw_response = r.text;
        match extract_sql(&prediction.raw_response) {
            Ok(sql) => prediction.extracted_sql = sql,
            Err(e) => {
                prediction.status = PredictionStatus::ExtractionFailed;
                prediction.error = Some(e.to_string());
                return Ok(prediction);
            }
        }
        match self.config.corrector {
            CorrectorMode::Off => Ok(prediction),
            CorrectorMode::Verifier => self.verifier_retry_loop(schema, question, &prompt, prediction),
            CorrectorMode::Corrector => {
                match self.correct_charged(schema, question, &prediction.extracted_sql) {
                    Ok((sql, fallback, r)) => {
                        TurnLedger { prediction: &mut prediction }.charge(&r, true);
                        prediction.corrected_sql = Some(sql);
                        prediction.correction_fallback = fallback;
                    }
                    Err(e) => {
                        log::warn!("corrector failed: {e}; keeping generated SQL");
                        prediction.corrected_sql = Some(prediction.extracted_sql.clone());
                        prediction.correction_fallback = true;
                    }
                }
                Ok(prediction)
            }
        }
    }

    /// Answers turns in order. A failed generation call ends the interaction:
    /// that turn and every later one come back unanswered.
    pub fn run_interaction(&self, interaction: &Interaction, schema: &DatabaseSchema) -> Result<Vec<Prediction>, PipelineError> {
        if schema.db_id != interaction.db_id {
            return Err(PipelineError::Precondition(format!(
                "schema `{}` does not match interaction database `{}`",
                schema.db_id, interaction.db_id
            )));
        }
        self.validate()?;
        let mut history: Vec<HistoryItem> = Vec::new();
        let mut out = Vec::with_capacity(interaction.turns.len());
        let mut turns = interaction.turns.iter();
        for turn in turns.by_ref() {
            match self.run_turn(&interaction.id, schema, &history, turn.position, &turn.question) {
                Ok(p) => {
                    history.push(HistoryItem {
                        question: turn.question.clone(),
                        sql: p.final_sql().unwrap_or("").to_string(),
                    });
                    out.push(p);
                }
                Err(e) => {
                    log::warn!("interaction {} turn {}: {e}", interaction.id, turn.position);
                    out.push(Prediction::unanswered(&interaction.id, turn.position, e.to_string()));
                    break;
                }
            }
        }
        for turn in turns {
            out.push(Prediction::unanswered(&interaction.id, turn.position, "aborted after earlier failure"));
        }
        Ok(out)
    }

    /// Runs every interaction on `workers` threads and appends predictions
    /// to `out` in dataset order, flushing after each interaction so an
    /// interrupted run leaves a valid prefix.
    pub fn run_dataset(
        &self,
        dataset: &Dataset,
        schemas: &BTreeMap<String, DatabaseSchema>,
        workers: usize,
        out: Option<&Path>,
    ) -> Result<Vec<Prediction>, PipelineError> {
        self.validate()?;
        for i in &dataset.interactions {
            if !schemas.contains_key(&i.db_id) {
                return Err(PipelineError::Config(format!("no schema for database `{}`", i.db_id)));
            }
        }
        let mut writer = match out {
            Some(path) => Some(BufWriter::new(File::create(path).map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?)),
            None => None,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let (tx, rx) = mpsc::channel::<(usize, Result<Vec<Prediction>, PipelineError>)>();
        let mut results: Vec<Option<Vec<Prediction>>> = vec![None; dataset.interactions.len()];
        let mut first_error: Option<PipelineError> = None;
        std::thread::scope(|scope| {
            scope.spawn(|| {
                pool.install(|| {
                    dataset.interactions.par_iter().enumerate().for_each_with(tx, |tx, (i, inter)| {
                        let r = self.run_interaction(inter, &schemas[&inter.db_id]);
                        let _ = tx.send((i, r));
                    });
                });
            });
            let mut next = 0;
            for (i, r) in rx {
                match r {
                    Ok(p) => results[i] = Some(p),
                    Err(e) => {
                        first_error.get_or_insert(e);
                        results[i] = Some(Vec::new());
                    }
                }
                while next < results.len() && results[next].is_some() {
                    if let (Some(w), None) = (writer.as_mut(), first_error.as_ref()) {
                        if let Err(e) = write_predictions(w, results[next].as_deref().unwrap_or_default()) {
                            first_error.get_or_insert(PipelineError::Io { path: "predictions".into(), source: e });
                        }
                    }
                    next += 1;
                }
            }
        });
        if let Some(e) = first_error {
            return Err(e);
        }
        Ok(results.into_iter().flatten().flatten().collect())
    }
}

fn write_predictions(w: &mut impl Write, preds: &[Prediction]) -> std::io::Result<()> {
    for p in preds {
        serde_json::to_writer(&mut *w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads a predictions file; blank lines are skipped.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Record { line: i + 1, message: e.to_string() })
        })
        .collect()
}
