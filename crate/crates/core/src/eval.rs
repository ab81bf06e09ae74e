//! Execution-based scoring: per-turn execution accuracy (EX) and
//! whole-interaction accuracy (IX).

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, SchemaCatalog};
use crate::pipeline::Prediction;
use crate::sqltext::has_top_level_order_by;
use crate::value::{Row, Value};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions do not match any dataset turn: {0}")]
    Unaligned(String),
    #[error("duplicate prediction for interaction {0} turn {1}")]
    Duplicate(String, u32),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Rows,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Row>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
}

impl ExecutionOutcome {
    pub fn rows(rows: Vec<Row>) -> Self {
        Self { status: ExecStatus::Rows, rows: Some(rows), error_text: None }
    }

    pub fn error(text: impl Into<String>) -> Self {
        Self { status: ExecStatus::Error, rows: None, error_text: Some(text.into()) }
    }

    pub fn timeout(after: Duration) -> Self {
        Self {
            status: ExecStatus::Timeout,
            rows: None,
            error_text: Some(format!("interrupted after {} ms", after.as_millis())),
        }
    }
}

fn open_for_query(db_file: &Path) -> rusqlite::Result<Connection> {
    let conn = Connection::open_with_flags(
        db_file,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.execute_batch("PRAGMA query_only = ON")?;
    Ok(conn)
}

/// Runs one statement on a fresh read-only connection. Failures of every
/// kind, write attempts included, come back as an outcome, never an `Err`.
pub fn execute_sql(db_file: &Path, sql: &str, timeout: Duration) -> ExecutionOutcome {
    let sql = sql.trim().trim_end_matches(';').trim();
    if sql.is_empty() {
        return ExecutionOutcome::error("empty SQL");
    }
    let lead = sql
        .trim_start_matches('(')
        .split(|c: char| !c.is_ascii_alphabetic())
        .next()
        .unwrap_or("")
        .to_ascii_uppercase();
    if !matches!(lead.as_str(), "SELECT" | "WITH" | "VALUES") {
        return ExecutionOutcome::error(format!("only queries are executed, got {lead}"));
    }
    if !db_file.is_file() {
        return ExecutionOutcome::error(format!("database file not found: {}", db_file.display()));
    }
    let conn = match open_for_query(db_file) {
        Ok(c) => c,
        Err(e) => return ExecutionOutcome::error(format!("cannot open {}: {e}", db_file.display())),
    };
    let start = Instant::now();
    conn.progress_handler(1_000, Some(move || start.elapsed() > timeout));
    let result = (|| -> rusqlite::Result<Result<Vec<Row>, String>> {
        let mut batch = rusqlite::Batch::new(&conn, sql);
        let Some(mut stmt) = batch.next()? else {
            return Ok(Err("empty SQL".into()));
        };
        if batch.next()?.is_some() {
            return Ok(Err("multiple statements are rejected".into()));
        }
        if !stmt.readonly() {
            return Ok(Err("write statements are rejected".into()));
        }
        let ncols = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut r = Vec::with_capacity(ncols);
            for i in 0..ncols {
                r.push(Value::from_sqlite(row.get_ref(i)?));
            }
            out.push(r);
        }
        Ok(Ok(out))
    })();
    match result {
        Ok(Ok(rows)) => ExecutionOutcome::rows(rows),
        Ok(Err(msg)) => ExecutionOutcome::error(msg),
        Err(rusqlite::Error::SqliteFailure(f, _)) if f.code == rusqlite::ErrorCode::OperationInterrupted => {
            ExecutionOutcome::timeout(timeout)
        }
        Err(e) => ExecutionOutcome::error(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub order_sensitive: bool,
    /// Accept predictions whose columns are a permutation of the gold columns.
    pub column_permutation: bool,
    /// Absolute tolerance for numeric cells; 0 means exact.
    pub epsilon: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { order_sensitive: false, column_permutation: false, epsilon: 0.0 }
    }
}

impl CompareOptions {
    pub fn ordered(order_sensitive: bool) -> Self {
        Self { order_sensitive, ..Self::default() }
    }
}

fn cell_cmp(a: &Value, b: &Value) -> Ordering {
    a.normalized().total_cmp(&b.normalized())
}

fn cell_eq(a: &Value, b: &Value, epsilon: f64) -> bool {
    if epsilon > 0.0 {
        if let (Some(x), Some(y)) = (a.as_f64(), b.as_f64()) {
            return (x - y).abs() <= epsilon;
        }
    }
    cell_cmp(a, b) == Ordering::Equal
}

fn row_cmp(a: &[Value], b: &[Value]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| cell_cmp(x, y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn rows_equal(gold: &[Row], pred: &[Row], order_sensitive: bool, epsilon: f64) -> bool {
    if gold.len() != pred.len() {
        return false;
    }
    let pair_eq = |g: &Row, p: &Row| g.len() == p.len() && g.iter().zip(p).all(|(x, y)| cell_eq(x, y, epsilon));
    if order_sensitive {
        return gold.iter().zip(pred).all(|(g, p)| pair_eq(g, p));
    }
    let mut g: Vec<&Row> = gold.iter().collect();
    let mut p: Vec<&Row> = pred.iter().collect();
    g.sort_by(|a, b| row_cmp(a, b));
    p.sort_by(|a, b| row_cmp(a, b));
    g.iter().zip(&p).all(|(a, b)| pair_eq(a, b))
}

fn permute(rows: &[Row], perm: &[usize]) -> Vec<Row> {
    rows.iter().map(|r| perm.iter().map(|&j| r[j].clone()).collect()).collect()
}

/// Column `i` of gold may map to column `j` of pred only when the two
/// columns hold the same multiset of cells.
fn permutation_candidates(gold: &[Row], pred: &[Row], width: usize) -> Vec<Vec<usize>> {
    let column = |rows: &[Row], j: usize| {
        let mut c: Vec<Value> = rows.iter().map(|r| r[j].normalized()).collect();
        c.sort_by(Value::total_cmp);
        c
    };
    let gold_cols: Vec<_> = (0..width).map(|i| column(gold, i)).collect();
    let pred_cols: Vec<_> = (0..width).map(|j| column(pred, j)).collect();
    (0..width)
        .map(|i| {
            (0..width)
                .filter(|&j| {
                    gold_cols[i].len() == pred_cols[j].len()
                        && gold_cols[i].iter().zip(&pred_cols[j]).all(|(a, b)| a.total_cmp(b) == Ordering::Equal)
                })
                .collect()
        })
        .collect()
}

fn search_permutation(
    gold: &[Row],
    pred: &[Row],
    candidates: &[Vec<usize>],
    perm: &mut Vec<usize>,
    used: &mut [bool],
    opts: &CompareOptions,
) -> bool {
    let i = perm.len();
    if i == candidates.len() {
        return rows_equal(gold, &permute(pred, perm), opts.order_sensitive, opts.epsilon);
    }
    for &j in &candidates[i] {
        if used[j] {
            continue;
        }
        used[j] = true;
        perm.push(j);
        if search_permutation(gold, pred, candidates, perm, used, opts) {
            return true;
        }
        perm.pop();
        used[j] = false;
    }
    false
}

/// False unless both sides produced rows. Rows compare positionally, as an
/// ordered list when `order_sensitive`, otherwise as a multiset.
pub fn compare_outcomes(gold: &ExecutionOutcome, pred: &ExecutionOutcome, opts: &CompareOptions) -> bool {
    let (Some(g), Some(p)) = (&gold.rows, &pred.rows) else {
        return false;
    };
    if gold.status != ExecStatus::Rows || pred.status != ExecStatus::Rows {
        return false;
    }
    if rows_equal(g, p, opts.order_sensitive, opts.epsilon) {
        return true;
    }
    if !opts.column_permutation || g.len() != p.len() || g.is_empty() {
        return false;
    }
    let width = g[0].len();
    if g.iter().chain(p.iter()).any(|r| r.len() != width) {
        return false;
    }
    let candidates = if opts.epsilon > 0.0 {
        vec![(0..width).collect(); width]
    } else {
        permutation_candidates(g, p, width)
    };
    search_permutation(g, p, &candidates, &mut Vec::new(), &mut vec![false; width], opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub interaction_id: String,
    pub turn_position: u32,
    pub correct: bool,
    pub gold_outcome: ExecutionOutcome,
    pub pred_outcome: ExecutionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Counts behind the two percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub ex: f64,
    pub ix: f64,
    pub n_questions: usize,
    pub n_interactions: usize,
    pub correct_questions: usize,
    pub correct_interactions: usize,
}

/// EX and IX from per-interaction correctness flags. An interaction counts
/// toward IX only when every one of its turns is correct.
pub fn tally(interactions: &[Vec<bool>]) -> Tally {
    let n_questions: usize = interactions.iter().map(Vec::len).sum();
    let correct_questions = interactions.iter().flatten().filter(|c| **c).count();
    let counted: Vec<_> = interactions.iter().filter(|t| !t.is_empty()).collect();
    let correct_interactions = counted.iter().filter(|t| t.iter().all(|c| *c)).count();
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Tally {
        ex: pct(correct_questions, n_questions),
        ix: pct(correct_interactions, counted.len()),
        n_questions,
        n_interactions: counted.len(),
        correct_questions,
        correct_interactions,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub ex: f64,
    pub ix: f64,
    pub n_questions: usize,
    pub n_interactions: usize,
    pub correct_questions: usize,
    pub correct_interactions: usize,
    /// Dataset turns that had no prediction (scored incorrect).
    #[serde(default)]
    pub missing: Vec<(String, u32)>,
    pub per_turn: Vec<TurnResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub timeout: Duration,
    pub column_permutation: bool,
    pub epsilon: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT, column_permutation: false, epsilon: 0.0 }
    }
}

/// (interaction index, interaction id, db id, position, gold SQL, prediction)
type Job<'a> = (usize, &'a str, &'a str, u32, &'a str, Option<&'a Prediction>);

/// Scores the corrected SQL when present, else the extracted SQL. Turns
/// without a prediction, or whose database is missing, count as incorrect.
pub fn score(
    dataset: &Dataset,
    predictions: &[Prediction],
    catalog: &SchemaCatalog,
    opts: &ScoreOptions,
) -> Result<EvalReport, EvalError> {
    let mut by_turn: HashMap<(&str, u32), &Prediction> = HashMap::new();
    for p in predictions {
        if by_turn.insert((p.interaction_id.as_str(), p.turn_position), p).is_some() {
            return Err(EvalError::Duplicate(p.interaction_id.clone(), p.turn_position));
        }
    }
    let known: std::collections::HashSet<(&str, u32)> = dataset
        .interactions
        .iter()
        .flat_map(|i| i.turns.iter().map(move |t| (i.id.as_str(), t.position)))
        .collect();
    let mut stray: Vec<String> = by_turn
        .keys()
        .filter(|k| !known.contains(*k))
        .map(|(id, pos)| format!("{id}#{pos}"))
        .collect();
    if !stray.is_empty() {
        stray.sort();
        return Err(EvalError::Unaligned(stray.join(", ")));
    }

    let jobs: Vec<Job> = dataset
        .interactions
        .iter()
        .enumerate()
        .flat_map(|(ii, inter)| {
            let by_turn = &by_turn;
            inter.turns.iter().map(move |t| {
                (ii, inter.id.as_str(), inter.db_id.as_str(), t.position, t.gold_sql.as_str(), by_turn.get(&(inter.id.as_str(), t.position)).copied())
            })
        })
        .collect();

    let results: Vec<(usize, TurnResult)> = jobs
        .par_iter()
        .map(|&(ii, id, db_id, position, gold_sql, pred)| {
            let mut diagnostic = None;
            let db_file = catalog.get(db_id).map(|s| s.db_file_path.clone());
            let gold_outcome = match &db_file {
                Some(f) => execute_sql(f, gold_sql, opts.timeout),
                None => ExecutionOutcome::error(format!("unknown database `{db_id}`")),
            };
            if gold_outcome.status != ExecStatus::Rows {
                diagnostic = Some(format!(
                    "gold query failed: {}",
                    gold_outcome.error_text.as_deref().unwrap_or("")
                ));
            }
            let pred_outcome = match (pred.and_then(Prediction::final_sql), &db_file) {
                (Some(sql), Some(f)) => execute_sql(f, sql, opts.timeout),
                (None, _) => {
                    diagnostic.get_or_insert_with(|| match pred {
                        None => "no prediction".into(),
                        Some(p) => format!("not answered: {:?}", p.status),
                    });
                    ExecutionOutcome::error("no SQL to execute")
                }
                (_, None) => ExecutionOutcome::error(format!("unknown database `{db_id}`")),
            };
            let order_sensitive = has_top_level_order_by(gold_sql).unwrap_or(false);
            let cmp = CompareOptions { order_sensitive, column_permutation: opts.column_permutation, epsilon: opts.epsilon };
            let correct = compare_outcomes(&gold_outcome, &pred_outcome, &cmp);
            (ii, TurnResult { interaction_id: id.to_string(), turn_position: position, correct, gold_outcome, pred_outcome, diagnostic })
        })
        .collect();

    let mut flags: Vec<Vec<bool>> = dataset.interactions.iter().map(|i| Vec::with_capacity(i.turns.len())).collect();
    for (ii, r) in &results {
        flags[*ii].push(r.correct);
    }
    let t = tally(&flags);
    let missing = jobs
        .iter()
        .filter(|j| j.5.is_none())
        .map(|j| (j.1.to_string(), j.3))
        .collect();
    Ok(EvalReport {
        label: None,
        ex: t.ex,
        ix: t.ix,
        n_questions: t.n_questions,
        n_interactions: t.n_interactions,
        correct_questions: t.correct_questions,
        correct_interactions: t.correct_interactions,
        missing,
        per_turn: results.into_iter().map(|(_, r)| r).collect(),
    })
}

impl EvalReport {
    /// Summary without per-turn rows, suited for report files.
    pub fn summary_json(&self) -> serde_json::Value {
        let turns: Vec<_> = self
            .per_turn
            .iter()
            .map(|t| {
                serde_json::json!({
                    "interaction_id": t.interaction_id,
                    "turn_position": t.turn_position,
                    "correct": t.correct,
                    "gold_status": t.gold_outcome.status,
                    "pred_status": t.pred_outcome.status,
                    "diagnostic": t.diagnostic,
                })
            })
            .collect();
        serde_json::json!({
            "label": self.label,
            "ex": self.ex,
            "ix": self.ix,
            "n_questions": self.n_questions,
            "n_interactions": self.n_interactions,
            "correct_questions": self.correct_questions,
            "correct_interactions": self.correct_interactions,
            "missing": self.missing,
            "per_turn": turns,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("report serializes");
        std::fs::write(path, text).map_err(|e| EvalError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    /// Comma-separated per-turn detail for error analysis.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |e: String| EvalError::Io { path: path.display().to_string(), message: e };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(e.to_string()))?;
        w.write_record(["interaction_id", "turn_position", "correct", "gold_status", "pred_status", "gold_rows", "pred_rows", "diagnostic"])
            .map_err(|e| io(e.to_string()))?;
        for t in &self.per_turn {
            let status = |o: &ExecutionOutcome| serde_json::to_value(o.status).expect("status").as_str().unwrap_or("").to_string();
            let nrows = |o: &ExecutionOutcome| o.rows.as_ref().map_or(String::new(), |r| r.len().to_string());
            w.write_record([
                t.interaction_id.clone(),
                t.turn_position.to_string(),
                t.correct.to_string(),
                status(&t.gold_outcome),
                status(&t.pred_outcome),
                nrows(&t.gold_outcome),
                nrows(&t.pred_outcome),
                t.diagnostic.clone().unwrap_or_default(),
            ])
            .map_err(|e| io(e.to_string()))?;
        }
        w.flush().map_err(|e| io(e.to_string()))
    }
}

/// Plain-text table of one or more reports; rows are labelled by
/// `EvalReport::label`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let labels: Vec<String> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| r.label.clone().unwrap_or_else(|| format!("run {}", i + 1)))
        .collect();
    let w = labels.iter().map(String::len).max().unwrap_or(0).max(10);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}  {:>11}  {:>13}", "run", "EX", "IX", "questions", "interactions");
    let _ = writeln!(out, "{}", "-".repeat(w + 46));
    for (label, r) in labels.iter().zip(reports) {
        let _ = writeln!(
            out,
            "{:<w$}  {:>6.1}%  {:>6.1}%  {:>5}/{:<5}  {:>6}/{:<6}",
            label, r.ex, r.ix, r.correct_questions, r.n_questions, r.correct_interactions, r.n_interactions
        );
    }
    out
}

/// Lays reports out as a model-by-technique grid of `EX / IX` cells.
/// Labels of the form `technique@model` pick the cell; others use `-`.
pub fn render_grid(reports: &[EvalReport]) -> String {
    let mut cells: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut models: Vec<String> = Vec::new();
    for r in reports {
        let label = r.label.clone().unwrap_or_default();
        let (tech, model) = label.split_once('@').map_or((label.as_str(), "-"), |(t, m)| (t, m));
        if !models.iter().any(|m| m == model) {
            models.push(model.to_string());
        }
        cells
            .entry(tech.to_string())
            .or_default()
            .insert(model.to_string(), format!("{:.1} / {:.1}", r.ex, r.ix));
    }
    let tw = cells.keys().map(String::len).max().unwrap_or(0).max(9);
    let mut out = format!("{:<tw$}", "technique");
    for m in &models {
        let _ = write!(out, "  {:>17}", format!("{m} EX/IX"));
    }
    out.push('\n');
    for (tech, row) in &cells {
        let _ = write!(out, "{tech:<tw$}");
        for m in &models {
            let _ = write!(out, "  {:>17}", row.get(m).map_or("", String::as_str));
        }
        out.push('\n');
    }
    out
}
