//! Prompt rendering for the four question representations (BSp, TRp, CRp,
//! ODp), conversational history threading, and in-context-learning assembly
//! under a token budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatabaseSchema, TableSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error("prompt without exemplars needs {needed} tokens, over the budget of {budget}")]
    OverBudget { needed: usize, budget: usize },
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptStyle {
    #[serde(rename = "BSp")]
    Bsp,
    #[serde(rename = "TRp")]
    Trp,
    #[serde(rename = "CRp")]
    Crp,
    #[serde(rename = "ODp")]
    Odp,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 4] = [PromptStyle::Bsp, PromptStyle::Trp, PromptStyle::Crp, PromptStyle::Odp];

    pub fn name(self) -> &'static str {
        match self {
            PromptStyle::Bsp => "BSp",
            PromptStyle::Trp => "TRp",
            PromptStyle::Crp => "CRp",
            PromptStyle::Odp => "ODp",
        }
    }

    /// Wraps one free-text line in the style's comment convention.
    pub fn comment(self, line: &str) -> String {
        match self {
            PromptStyle::Bsp | PromptStyle::Trp => line.to_string(),
            PromptStyle::Crp => format!("/* {line} */"),
            PromptStyle::Odp => format!("### {line}"),
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptStyle {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bsp" => Ok(PromptStyle::Bsp),
            "trp" => Ok(PromptStyle::Trp),
            "crp" => Ok(PromptStyle::Crp),
            "odp" => Ok(PromptStyle::Odp),
            _ => Err(PromptError::Unknown {
                kind: "prompt style",
                value: s.to_string(),
            }),
        }
    }
}

/// How earlier turns of the conversation are serialized into the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    None,
    QuestionsOnly,
    #[default]
    QuestionsAndPredictedSql,
}

impl FromStr for HistoryMode {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(HistoryMode::None),
            "questions_only" | "questions" => Ok(HistoryMode::QuestionsOnly),
            "questions_and_predicted_sql" | "questions_and_sql" => Ok(HistoryMode::QuestionsAndPredictedSql),
            _ => Err(PromptError::Unknown {
                kind: "history mode",
                value: s.to_string(),
            }),
        }
    }
}

/// One earlier turn: its question and the SQL the pipeline settled on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub question: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub style: PromptStyle,
    pub shot_count: usize,
    pub estimated_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub style: PromptStyle,
    pub history_mode: HistoryMode,
    pub with_values: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            style: PromptStyle::Odp,
            history_mode: HistoryMode::default(),
            with_values: false,
        }
    }
}

/// Token counting hook. Implement with a real tokenizer when exact counts matter.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// ceil(bytes / 4). Conservative for multi-byte scripts such as Arabic.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteEstimator;

impl TokenEstimator for ByteEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    ByteEstimator.estimate(text)
}

const MAX_GLANCE_TEXT: usize = 64;

fn glance_literal(v: &crate::value::Value) -> String {
    match v {
        crate::value::Value::Text(t) if t.chars().count() > MAX_GLANCE_TEXT => {
            let cut: String = t.chars().take(MAX_GLANCE_TEXT).collect();
            format!("'{}...'", cut.replace('\'', "''"))
        }
        other => other.to_sql_literal(),
    }
}

/// `values: t = (r1), (r2)`; None when the table has no samples.
fn glance_line(table: &TableSpec) -> Option<String> {
    if table.sample_rows.is_empty() {
        return None;
    }
    let rows: Vec<String> = table
        .sample_rows
        .iter()
        .map(|r| format!("({})", r.iter().map(glance_literal).collect::<Vec<_>>().join(", ")))
        .collect();
    Some(format!("values: {} = {}", table.name, rows.join(", ")))
}

fn column_list(table: &TableSpec) -> String {
    table
        .columns
        .iter()
        .map(|c| c.name.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

fn create_table_block(table: &TableSpec) -> String {
    let mut lines = vec![format!("CREATE TABLE {} (", table.name)];
    for c in &table.columns {
        let pk = if c.is_primary_key { " PRIMARY KEY" } else { "" };
        lines.push(format!("     {} {}{},", c.name, c.data_type.as_label(), pk));
    }
    let fks: Vec<String> = table
        .columns
        .iter()
        .filter_map(|c| {
            c.foreign_key
                .as_ref()
                .map(|fk| format!("     FOREIGN KEY ({}) REFERENCES {} ({})", c.name, fk.table, fk.column))
        })
        .collect();
    if !fks.is_empty() {
        lines.push(fks.join(",\n"));
    }
    lines.push(");".to_string());
    lines.join("\n")
}

/// Renders the schema section in the given representation. Zero tables
/// render as an empty string.
pub fn render_schema(schema: &DatabaseSchema, style: PromptStyle, with_values: bool) -> String {
    if schema.tables.is_empty() {
        return String::new();
    }
    let glances: Vec<String> = if with_values {
        schema.tables.iter().filter_map(glance_line).collect()
    } else {
        Vec::new()
    };
    match style {
        PromptStyle::Bsp | PromptStyle::Trp => {
            let mut lines: Vec<String> = schema
                .tables
                .iter()
                .map(|t| format!("Table {}, columns = [{}]", t.name, column_list(t)))
                .collect();
            lines.extend(glances);
            lines.join("\n")
        }
        PromptStyle::Crp => {
            let mut text = schema
                .tables
                .iter()
                .map(create_table_block)
                .collect::<Vec<_>>()
                .join("\n\n");
            for g in glances {
                text.push('\n');
                text.push_str(&format!("/* {g} */"));
            }
            text
        }
        PromptStyle::Odp => {
            let mut lines = vec!["#".to_string()];
            lines.extend(schema.tables.iter().map(|t| format!("# {}({})", t.name, column_list(t))));
            lines.extend(glances.into_iter().map(|g| format!("# {g}")));
            lines.push("#".to_string());
            lines.join("\n")
        }
    }
}

const HISTORY_HEADER: &str = "Previous questions in this conversation:";

fn history_lines(history: &[HistoryItem], mode: HistoryMode) -> Vec<String> {
    let mut lines = Vec::new();
    if mode == HistoryMode::None {
        return lines;
    }
    for (i, item) in history.iter().enumerate() {
        lines.push(format!("Question {}: {}", i + 1, item.question));
        if mode == HistoryMode::QuestionsAndPredictedSql {
            lines.push(format!("SQL {}: {}", i + 1, item.sql));
        }
    }
    lines
}

/// The style's layout without any exemplars; the body of every prompt.
fn render_target(schema: &DatabaseSchema, history: &[HistoryItem], question: &str, opts: &RenderOptions) -> String {
    let schema_text = render_schema(schema, opts.style, opts.with_values);
    let hist = history_lines(history, opts.history_mode);
    let mut out = String::new();
    match opts.style {
        PromptStyle::Bsp => {
            if !schema_text.is_empty() {
                out.push_str(&schema_text);
                out.push_str("\n\n");
            }
            for l in &hist {
                out.push_str(l);
                out.push('\n');
            }
            out.push_str(question);
        }
        PromptStyle::Trp => {
            out.push_str("Given the following database schema:\n");
            if !schema_text.is_empty() {
                out.push_str(&schema_text);
                out.push('\n');
            }
            out.push('\n');
            if !hist.is_empty() {
                out.push_str(HISTORY_HEADER);
                out.push('\n');
                out.push_str(&hist.join("\n"));
                out.push_str("\n\n");
            }
            out.push_str("Answer the following question:\n");
            out.push_str(question);
        }
        PromptStyle::Crp => {
            out.push_str("/*Given the following database schema: */\n");
            if !schema_text.is_empty() {
                out.push_str(&schema_text);
                out.push('\n');
            }
            out.push('\n');
            if !hist.is_empty() {
                out.push_str("/*");
                out.push_str(HISTORY_HEADER);
                out.push('\n');
                out.push_str(&hist.join("\n"));
                out.push_str("\n*/\n");
            }
            out.push_str(&format!("/*Answer the following question: {question} */"));
        }
        PromptStyle::Odp => {
            out.push_str("###Complete sqlite SQL query only and with no explanation\n");
            out.push_str("### SQLite SQL tables , with their properties:\n");
            if !schema_text.is_empty() {
                out.push_str(&schema_text);
                out.push('\n');
            }
            if !hist.is_empty() {
                out.push_str(&format!("### {HISTORY_HEADER}\n"));
                for l in &hist {
                    out.push_str(&format!("### {l}\n"));
                }
            }
            out.push_str(&format!("### {question}"));
        }
    }
    out
}

fn finish(text: String, style: PromptStyle, shot_count: usize, estimator: &dyn TokenEstimator) -> RenderedPrompt {
    RenderedPrompt {
        estimated_tokens: estimator.estimate(&text),
        text,
        style,
        shot_count,
    }
}

pub fn render_zero_shot(
    schema: &DatabaseSchema,
    history: &[HistoryItem],
    question: &str,
    opts: &RenderOptions,
) -> Result<RenderedPrompt, PromptError> {
    render_zero_shot_with(schema, history, question, opts, &ByteEstimator)
}

pub fn render_zero_shot_with(
    schema: &DatabaseSchema,
    history: &[HistoryItem],
    question: &str,
    opts: &RenderOptions,
    estimator: &dyn TokenEstimator,
) -> Result<RenderedPrompt, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let text = render_target(schema, history, question, opts);
    Ok(finish(text, opts.style, 0, estimator))
}

/// A solved example shown ahead of the target, with its own database schema.
#[derive(Debug, Clone, Copy)]
pub struct Shot<'a> {
    pub schema: &'a DatabaseSchema,
    pub question: &'a str,
    pub sql: &'a str,
}

/// Exemplar blocks always use the TRp layout, whatever the target style.
pub fn render_shot(shot: &Shot<'_>) -> String {
    format!(
        "Given the following database schema:\n{}\nAnswer the following question:\n{}\n{}",
        render_schema(shot.schema, PromptStyle::Trp, false),
        shot.question,
        shot.sql
    )
}

fn assemble(blocks: &[String], target: &str) -> String {
    if blocks.is_empty() {
        return target.to_string();
    }
    format!("{}\n\n\n{}", blocks.join("\n\n"), target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclBudget {
    pub budget_tokens: usize,
    pub max_shots: usize,
}

impl Default for IclBudget {
    fn default() -> Self {
        Self {
            budget_tokens: 4096,
            max_shots: 3,
        }
    }
}

pub fn render_icl(
    schema: &DatabaseSchema,
    history: &[HistoryItem],
    question: &str,
    shots: &[Shot<'_>],
    opts: &RenderOptions,
    budget: IclBudget,
) -> Result<RenderedPrompt, PromptError> {
    render_icl_with(schema, history, question, shots, opts, budget, &ByteEstimator)
}

/// Prepends up to `max_shots` best-first exemplars. While the prompt exceeds
/// the budget the lowest-ranked remaining exemplar is dropped; the schema and
/// target question are never dropped.
pub fn render_icl_with(
    schema: &DatabaseSchema,
    history: &[HistoryItem],
    question: &str,
    shots: &[Shot<'_>],
    opts: &RenderOptions,
    budget: IclBudget,
    estimator: &dyn TokenEstimator,
) -> Result<RenderedPrompt, PromptError> {
    if budget.budget_tokens == 0 {
        return Err(PromptError::ZeroBudget);
    }
    let target = render_zero_shot_with(schema, history, question, opts, estimator)?;
    if target.estimated_tokens > budget.budget_tokens {
        return Err(PromptError::OverBudget {
            needed: target.estimated_tokens,
            budget: budget.budget_tokens,
        });
    }
    let mut blocks: Vec<String> = shots.iter().take(budget.max_shots).map(render_shot).collect();
    loop {
        let text = assemble(&blocks, &target.text);
        let tokens = estimator.estimate(&text);
        if tokens <= budget.budget_tokens {
            return Ok(RenderedPrompt {
                text,
                style: opts.style,
                shot_count: blocks.len(),
                estimated_tokens: tokens,
            });
        }
        blocks.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ColumnSpec, DataType};
    use crate::fixtures::student_dorm_schema;
    use crate::value::Value;
    use proptest::prelude::*;
    use std::path::PathBuf;

    const Q: &str = "How many students are there?";

    fn opts(style: PromptStyle) -> RenderOptions {
        RenderOptions {
            style,
            history_mode: HistoryMode::QuestionsAndPredictedSql,
            with_values: false,
        }
    }

    #[test]
    fn bsp_schema_lines() {
        assert_eq!(
            render_schema(&student_dorm_schema(), PromptStyle::Bsp, false),
            "Table student, columns = [StuID, Fname, LName]\nTable dorm, columns = [dormid, dorm_name]"
        );
    }

    #[test]
    fn odp_schema_block() {
        assert_eq!(
            render_schema(&student_dorm_schema(), PromptStyle::Odp, false),
            "#\n# student(StuID, Fname, LName)\n# dorm(dormid, dorm_name)\n#"
        );
    }

    #[test]
    fn empty_schema_renders_empty() {
        let s = DatabaseSchema {
            db_id: "e".into(),
            tables: vec![],
            db_file_path: PathBuf::new(),
        };
        for style in PromptStyle::ALL {
            assert_eq!(render_schema(&s, style, true), "");
            assert!(render_zero_shot(&s, &[], Q, &opts(style)).is_ok());
        }
    }

    #[test]
    fn value_glances_follow_comment_marker() {
        let mut s = student_dorm_schema();
        s.tables[1].sample_rows = vec![
            vec![Value::Integer(1), Value::Text("Smith Hall".into())],
            vec![Value::Integer(2), Value::Text("O'Neil".into())],
        ];
        let line = "values: dorm = (1, 'Smith Hall'), (2, 'O''Neil')";
        assert!(render_schema(&s, PromptStyle::Trp, true).ends_with(&format!("\n{line}")));
        assert!(render_schema(&s, PromptStyle::Crp, true).ends_with(&format!("\n/* {line} */")));
        assert!(render_schema(&s, PromptStyle::Odp, true).ends_with(&format!("\n# {line}\n#")));
        // without the flag nothing is appended
        assert!(!render_schema(&s, PromptStyle::Bsp, false).contains("values:"));
    }

    #[test]
    fn crp_multiple_foreign_keys_comma_separated() {
        let s = DatabaseSchema {
            db_id: "x".into(),
            tables: vec![TableSpec::new(
                "t",
                vec![
                    ColumnSpec::new("a", DataType::Number).references("u", "a"),
                    ColumnSpec::new("b", DataType::Number).references("v", "b"),
                ],
            )],
            db_file_path: PathBuf::new(),
        };
        assert_eq!(
            render_schema(&s, PromptStyle::Crp, false),
            "CREATE TABLE t (\n     a number,\n     b number,\n     FOREIGN KEY (a) REFERENCES u (a),\n     FOREIGN KEY (b) REFERENCES v (b)\n);"
        );
    }

    fn history() -> Vec<HistoryItem> {
        vec![
            HistoryItem {
                question: "List all students.".into(),
                sql: "SELECT * FROM student".into(),
            },
            HistoryItem {
                question: "Only their first names.".into(),
                sql: "SELECT Fname FROM student".into(),
            },
        ]
    }

    #[test]
    fn history_in_order_before_question() {
        let s = student_dorm_schema();
        for style in PromptStyle::ALL {
            let mut o = opts(style);
            o.history_mode = HistoryMode::QuestionsOnly;
            let p = render_zero_shot(&s, &history(), Q, &o).unwrap();
            let a = p.text.find("List all students.").unwrap();
            let b = p.text.find("Only their first names.").unwrap();
            let q = p.text.rfind(Q).unwrap();
            assert!(a < b && b < q, "{style}: {}", p.text);
            assert!(!p.text.contains("SELECT * FROM student"));
        }
    }

    #[test]
    fn history_with_sql() {
        let p = render_zero_shot(&student_dorm_schema(), &history(), Q, &opts(PromptStyle::Odp)).unwrap();
        assert!(p.text.contains("### SQL 2: SELECT Fname FROM student\n### How many students are there?"));
    }

    #[test]
    fn mode_none_matches_first_turn() {
        let s = student_dorm_schema();
        for style in PromptStyle::ALL {
            let mut o = opts(style);
            o.history_mode = HistoryMode::None;
            let later = render_zero_shot(&s, &history(), Q, &o).unwrap();
            let first = render_zero_shot(&s, &[], Q, &opts(style)).unwrap();
            assert_eq!(later, first);
        }
    }

    #[test]
    fn empty_question_rejected() {
        assert_eq!(
            render_zero_shot(&student_dorm_schema(), &[], "  ", &opts(PromptStyle::Bsp)).unwrap_err(),
            PromptError::EmptyQuestion
        );
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"a".repeat(400)), 100);
        assert_eq!(estimate_tokens(&"a".repeat(401)), 101);
        // Arabic letters are two bytes each
        assert_eq!(estimate_tokens("كم"), 1);
    }

    fn shot_pool(schema: &DatabaseSchema) -> Vec<Shot<'_>> {
        vec![
            Shot { schema, question: "How many City are there?", sql: "SELECT count(*) FROM City" },
            Shot { schema, question: "How many teams do we have?", sql: "SELECT count(teamID) FROM Team" },
            Shot { schema, question: "How many books available?", sql: "SELECT count(*) FROM Book" },
        ]
    }

    #[test]
    fn icl_generous_budget_keeps_three() {
        let s = student_dorm_schema();
        let p = render_icl(&s, &[], Q, &shot_pool(&s), &opts(PromptStyle::Odp), IclBudget::default()).unwrap();
        assert_eq!(p.shot_count, 3);
        assert_eq!(p.text.matches("Given the following database schema:").count(), 3);
        assert_eq!(p.estimated_tokens, estimate_tokens(&p.text));
    }

    #[test]
    fn icl_tight_budget_keeps_top_ranked() {
        let s = student_dorm_schema();
        let shots = shot_pool(&s);
        let o = opts(PromptStyle::Odp);
        // measure the one-shot render, then give exactly that budget
        let one = render_icl(&s, &[], Q, &shots[..1], &o, IclBudget { budget_tokens: 100_000, max_shots: 1 }).unwrap();
        let two = render_icl(&s, &[], Q, &shots[..2], &o, IclBudget { budget_tokens: 100_000, max_shots: 2 }).unwrap();
        assert!(two.estimated_tokens > one.estimated_tokens);
        let budget = IclBudget { budget_tokens: one.estimated_tokens, max_shots: 3 };
        let p = render_icl(&s, &[], Q, &shots, &o, budget).unwrap();
        assert_eq!(p.shot_count, 1);
        assert!(p.text.contains("How many City are there?"));
        assert!(!p.text.contains("How many teams"));
    }

    #[test]
    fn icl_without_shots_equals_zero_shot() {
        let s = student_dorm_schema();
        for style in PromptStyle::ALL {
            let z = render_zero_shot(&s, &history(), Q, &opts(style)).unwrap();
            let i = render_icl(&s, &history(), Q, &[], &opts(style), IclBudget::default()).unwrap();
            assert_eq!(z, i);
        }
    }

    #[test]
    fn icl_target_over_budget_is_reported() {
        let s = student_dorm_schema();
        let err = render_icl(&s, &[], Q, &[], &opts(PromptStyle::Odp), IclBudget { budget_tokens: 5, max_shots: 3 }).unwrap_err();
        assert!(matches!(err, PromptError::OverBudget { budget: 5, .. }));
    }

    proptest! {
        #[test]
        fn estimate_is_monotone(a in ".{0,200}", b in ".{0,200}") {
            let ab = format!("{a}{b}");
            prop_assert!(estimate_tokens(&ab) >= estimate_tokens(&a));
        }

        #[test]
        fn icl_respects_budget_and_is_monotone(budget in 60usize..600) {
            let s = student_dorm_schema();
            let shots = shot_pool(&s);
            let o = opts(PromptStyle::Odp);
            let small = render_icl(&s, &[], Q, &shots, &o, IclBudget { budget_tokens: budget, max_shots: 3 });
            let large = render_icl(&s, &[], Q, &shots, &o, IclBudget { budget_tokens: budget + 37, max_shots: 3 });
            if let Ok(p) = &small {
                prop_assert!(p.estimated_tokens <= budget);
                prop_assert!(large.as_ref().unwrap().shot_count >= p.shot_count);
            }
        }
    }
}
