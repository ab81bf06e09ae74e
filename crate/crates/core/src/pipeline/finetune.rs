use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::{DatabaseSchema, SchemaCatalog};
use crate::llm::{ChatMessage, Role};
use crate::promptgen::{render_schema, PromptStyle};
use crate::sqltext::tokenize_sql;

/// System turn of every corrector conversation, training and inference alike.
pub const CORRECTOR_INSTRUCTION: &str =
    "You are a helpful assistant that check if SQL query are correctly representing user Question.";

/// `{BSp schema}\n"{question}"\n{sql}`
pub fn corrector_user_message(schema: &DatabaseSchema, question: &str, sql: &str) -> String {
    format!("{}\n\"{}\"\n{}", render_schema(schema, PromptStyle::Bsp, false), question, sql)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneLabel {
    CorrectPassthrough,
    Corrected,
}

/// One input row for the builder. `sql` is the candidate shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub db_id: String,
    pub question: String,
    pub sql: String,
    pub gold_sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSample {
    pub messages: Vec<ChatMessage>,
    pub label: FinetuneLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBalance {
    pub correct: usize,
    pub corrected: usize,
}

impl std::fmt::Display for LabelBalance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.correct, self.corrected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinetuneBuild {
    pub samples: Vec<FinetuneSample>,
    pub balance: LabelBalance,
}

fn same_sql(a: &str, b: &str) -> bool {
    a.trim().trim_end_matches(';').trim() == b.trim().trim_end_matches(';').trim()
}

fn sample_for(schema: &DatabaseSchema, r: &FinetuneRecord) -> FinetuneSample {
    let passthrough = same_sql(&r.sql, &r.gold_sql);
    let answer = if passthrough { r.sql.trim() } else { r.gold_sql.trim() };
    FinetuneSample {
        messages: vec![
            ChatMessage::system(CORRECTOR_INSTRUCTION),
            ChatMessage::user(corrector_user_message(schema, r.question.trim(), r.sql.trim())),
            ChatMessage::assistant(answer),
        ],
        label: if passthrough { FinetuneLabel::CorrectPassthrough } else { FinetuneLabel::Corrected },
    }
}

/// Record errors carry a 1-based record number in `line`.
pub fn build_finetune_dataset(records: &[FinetuneRecord], catalog: &SchemaCatalog) -> Result<FinetuneBuild, PipelineError> {
    let mut samples = Vec::with_capacity(records.len());
    let mut balance = LabelBalance::default();
    for (i, r) in records.iter().enumerate() {
        let bad = |message: String| PipelineError::Record { line: i + 1, message };
        for (field, value) in [("question", &r.question), ("sql", &r.sql), ("gold_sql", &r.gold_sql)] {
            if value.trim().is_empty() {
                return Err(bad(format!("{field} is empty")));
            }
        }
        if r.question.contains('\n') {
            return Err(bad("question spans several lines".into()));
        }
        tokenize_sql(&r.gold_sql).map_err(|e| bad(format!("gold_sql: {e}")))?;
        let schema = catalog.get(&r.db_id).ok_or_else(|| bad(format!("unknown database `{}`", r.db_id)))?;
        let sample = sample_for(schema, r);
        match sample.label {
            FinetuneLabel::CorrectPassthrough => balance.correct += 1,
            FinetuneLabel::Corrected => balance.corrected += 1,
        }
        samples.push(sample);
    }
    Ok(FinetuneBuild { samples, balance })
}

/// Line-delimited records; malformed lines are reported by line number.
pub fn read_finetune_records(path: &Path) -> Result<Vec<FinetuneRecord>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: FinetuneRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::Record { line: i + 1, message: e.to_string() })?;
        for (field, value) in [("db_id", &r.db_id), ("question", &r.question), ("sql", &r.sql), ("gold_sql", &r.gold_sql)] {
            if value.trim().is_empty() {
                return Err(PipelineError::Record { line: i + 1, message: format!("{field} is empty") });
            }
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Line {
    messages: Vec<ChatMessage>,
}

/// One `{"messages": [...]}` object per line, as fine-tuning uploads expect.
pub fn write_finetune_jsonl(samples: &[FinetuneSample], path: &Path) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in samples {
        serde_json::to_writer(&mut w, &Line { messages: s.messages.clone() }).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parses one emitted line and checks the sample invariants; the label is
/// recovered by comparing the assistant reply with the SQL in the user turn.
pub fn decode_finetune_line(line: &str) -> Result<FinetuneSample, String> {
    let parsed: Line = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let roles: Vec<Role> = parsed.messages.iter().map(|m| m.role).collect();
    if roles != [Role::System, Role::User, Role::Assistant] {
        return Err(format!("expected system, user, assistant; got {roles:?}"));
    }
    let [system, user, assistant] = &parsed.messages[..] else { unreachable!() };
    if system.content != CORRECTOR_INSTRUCTION {
        return Err("system message is not the corrector instruction".into());
    }
    tokenize_sql(&assistant.content).map_err(|e| format!("assistant content is not SQL: {e}"))?;
    let lines: Vec<&str> = user.content.split('\n').collect();
    let q = lines
        .iter()
        .position(|l| l.starts_with('"'))
        .ok_or("user message has no quoted question")?;
    let sql = lines[q + 1..].join("\n");
    if sql.trim().is_empty() {
        return Err("user message has no SQL".into());
    }
    let label = if same_sql(&sql, &assistant.content) {
        FinetuneLabel::CorrectPassthrough
    } else {
        FinetuneLabel::Corrected
    };
    Ok(FinetuneSample { messages: parsed.messages, label })
}

/// Parameters for a provider fine-tuning job; submission is left to the user.
pub fn finetune_job_stub(training_file: &str, balance: LabelBalance) -> serde_json::Value {
    serde_json::json!({
        "model": "gpt-3.5-turbo",
        "training_file": training_file,
        "hyperparameters": { "n_epochs": 3 },
        "suffix": "gat-corrector",
        "label_balance": { "correct_passthrough": balance.correct, "corrected": balance.corrected },
    })
}
