//! Dataset, schema catalog and database ingestion.
//!
//! Datasets and catalogs use the public SParC interchange layout: a JSON
//! array of interactions whose turns carry `utterance` and `query`, and a
//! separate `tables.json` catalog with index-based column and key lists.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::value::{Row, Value};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed record at interaction index {index}: {reason}")]
    MalformedInteraction { index: usize, reason: String },
    #[error("malformed schema entry at index {index}: {reason}")]
    MalformedSchema { index: usize, reason: String },
    #[error("duplicate db_id `{0}` in schema catalog")]
    DuplicateDbId(String),
    #[error("duplicate interaction id `{0}`")]
    DuplicateInteraction(String),
    #[error("dangling foreign key in `{db_id}`: {table}.{column} references {target}")]
    DanglingForeignKey {
        db_id: String,
        table: String,
        column: String,
        target: String,
    },
    #[error("invalid schema `{db_id}`: {reason}")]
    InvalidSchema { db_id: String, reason: String },
    #[error("unknown db_id `{db_id}` referenced by interaction `{interaction}`")]
    UnknownDatabase { db_id: String, interaction: String },
    #[error("cannot open database {path}: {source}")]
    Database {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
    #[error("unknown split `{0}` (expected train or test)")]
    UnknownSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Text,
    Number,
    Time,
    Boolean,
    Other,
}

impl DataType {
    /// Unrecognised labels map to `Other`.
    pub fn parse_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "text" | "varchar" | "char" | "string" => DataType::Text,
            "number" | "int" | "integer" | "real" | "float" | "numeric" => DataType::Number,
            "time" | "date" | "datetime" | "timestamp" => DataType::Time,
            "boolean" | "bool" => DataType::Boolean,
            _ => DataType::Other,
        }
    }

    /// Label as written in SParC catalogs.
    pub fn as_label(self) -> &'static str {
        match self {
            DataType::Text => "text",
            DataType::Number => "number",
            DataType::Time => "time",
            DataType::Boolean => "boolean",
            DataType::Other => "others",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub data_type: DataType,
    pub is_primary_key: bool,
    pub foreign_key: Option<ForeignKey>,
    /// Natural-language alias from the catalog, if any. Not used for rendering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, data_type: DataType) -> Self {
        Self {
            name: name.into(),
            data_type,
            is_primary_key: false,
            foreign_key: None,
            alias: None,
        }
    }

    pub fn primary_key(mut self) -> Self {
        self.is_primary_key = true;
        self
    }

    pub fn references(mut self, table: impl Into<String>, column: impl Into<String>) -> Self {
        self.foreign_key = Some(ForeignKey {
            table: table.into(),
            column: column.into(),
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub sample_rows: Vec<Row>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl TableSpec {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnSpec>) -> Self {
        Self {
            name: name.into(),
            columns,
            sample_rows: Vec::new(),
            alias: None,
        }
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableSpec>,
    pub db_file_path: PathBuf,
}

impl DatabaseSchema {
    pub fn table(&self, name: &str) -> Option<&TableSpec> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Checks name uniqueness, sample-row arity and foreign-key resolution.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidSchema {
            db_id: self.db_id.clone(),
            reason,
        };
        if self.db_id.is_empty() {
            return Err(invalid("empty db_id".into()));
        }
        let mut tables = HashSet::new();
        for t in &self.tables {
            if !tables.insert(t.name.to_ascii_lowercase()) {
                return Err(invalid(format!("duplicate table `{}`", t.name)));
            }
            let mut cols = HashSet::new();
            for c in &t.columns {
                if c.name.is_empty() {
                    return Err(invalid(format!("empty column name in `{}`", t.name)));
                }
                if !cols.insert(c.name.to_ascii_lowercase()) {
                    return Err(invalid(format!("duplicate column `{}.{}`", t.name, c.name)));
                }
            }
            if let Some(row) = t.sample_rows.iter().find(|r| r.len() != t.columns.len()) {
                return Err(invalid(format!(
                    "sample row in `{}` has {} values for {} columns",
                    t.name,
                    row.len(),
                    t.columns.len()
                )));
            }
        }
        for t in &self.tables {
            for c in &t.columns {
                if let Some(fk) = &c.foreign_key {
                    let resolved = self
                        .table(&fk.table)
                        .and_then(|target| target.column(&fk.column))
                        .is_some();
                    if !resolved {
                        return Err(CorpusError::DanglingForeignKey {
                            db_id: self.db_id.clone(),
                            table: t.name.clone(),
                            column: c.name.clone(),
                            target: format!("{}.{}", fk.table, fk.column),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Every table and column name, for question masking.
    pub fn identifier_names(&self) -> Vec<&str> {
        let mut names = Vec::new();
        for t in &self.tables {
            names.push(t.name.as_str());
            names.extend(t.columns.iter().map(|c| c.name.as_str()));
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub position: u32,
    pub question: String,
    pub gold_sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub id: String,
    pub db_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" | "dev" => Ok(Split::Test),
            other => Err(CorpusError::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    pub fn question_count(&self) -> usize {
        self.interactions.iter().map(|i| i.turns.len()).sum()
    }

    /// Distinct databases referenced by the interactions.
    pub fn database_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.interactions.iter().map(|i| i.db_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The deferred check from loading: every interaction's db_id must be cataloged.
    pub fn validate_against(&self, catalog: &SchemaCatalog) -> Result<(), CorpusError> {
        for i in &self.interactions {
            if catalog.get(&i.db_id).is_none() {
                return Err(CorpusError::UnknownDatabase {
                    db_id: i.db_id.clone(),
                    interaction: i.id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Serializes back to the SParC interchange layout.
    pub fn to_sparc_json(&self) -> Json {
        let items: Vec<RawInteraction> = self
            .interactions
            .iter()
            .map(|i| RawInteraction {
                database_id: i.db_id.clone(),
                interaction_id: Some(i.id.clone()),
                interaction: i
                    .turns
                    .iter()
                    .map(|t| RawTurn {
                        utterance: t.question.clone(),
                        query: t.gold_sql.clone(),
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_value(items).expect("dataset serializes")
    }

    pub fn write_sparc(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(&self.to_sparc_json()).expect("dataset serializes");
        fs::write(path, text).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A solved training sample used as an in-context shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub db_id: String,
    pub question: String,
    pub gold_sql: String,
    #[serde(default)]
    pub question_embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub masked_embedding: Option<Vec<f64>>,
}

impl Exemplar {
    pub fn new(db_id: impl Into<String>, question: impl Into<String>, gold_sql: impl Into<String>) -> Self {
        Self {
            db_id: db_id.into(),
            question: question.into(),
            gold_sql: gold_sql.into(),
            question_embedding: None,
            masked_embedding: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTurn {
    utterance: String,
    query: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInteraction {
    database_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    interaction_id: Option<String>,
    interaction: Vec<RawTurn>,
}

fn read_json(path: &Path) -> Result<Json, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a SParC-layout dataset file.
///
/// Interactions without an `interaction_id` are numbered by their position in
/// the file. The db_id check is deferred to [`Dataset::validate_against`].
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset, CorpusError> {
    let json = read_json(path)?;
    let items = match json {
        Json::Array(items) => items,
        _ => {
            return Err(CorpusError::MalformedInteraction {
                index: 0,
                reason: "top level is not an array of interactions".into(),
            })
        }
    };
    let mut interactions = Vec::with_capacity(items.len());
    let mut seen = HashSet::new();
    for (index, item) in items.into_iter().enumerate() {
        let raw: RawInteraction = serde_json::from_value(item).map_err(|e| {
            CorpusError::MalformedInteraction {
                index,
                reason: e.to_string(),
            }
        })?;
        let malformed = |reason: &str| CorpusError::MalformedInteraction {
            index,
            reason: reason.to_string(),
        };
        if raw.database_id.is_empty() {
            return Err(malformed("empty database_id"));
        }
        if raw.interaction.is_empty() {
            return Err(malformed("interaction has no turns"));
        }
        let mut turns = Vec::with_capacity(raw.interaction.len());
        for (k, t) in raw.interaction.into_iter().enumerate() {
            if t.utterance.trim().is_empty() {
                return Err(malformed(&format!("turn {} has an empty utterance", k + 1)));
            }
            if t.query.trim().is_empty() {
                return Err(malformed(&format!("turn {} has an empty query", k + 1)));
            }
            turns.push(Turn {
                position: k as u32 + 1,
                question: t.utterance,
                gold_sql: t.query,
            });
        }
        let id = raw.interaction_id.unwrap_or_else(|| index.to_string());
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateInteraction(id));
        }
        interactions.push(Interaction {
            id,
            db_id: raw.database_id,
            turns,
        });
    }
    Ok(Dataset {
        split,
        interactions,
    })
}

#[derive(Debug, Deserialize, Serialize)]
struct RawSchema {
    db_id: String,
    table_names_original: Vec<String>,
    #[serde(default)]
    table_names: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    #[serde(default)]
    column_names: Vec<(i64, String)>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<KeyRef>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

/// Spider-family catalogs list composite keys as nested arrays.
#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum KeyRef {
    One(usize),
    Many(Vec<usize>),
}

/// All schemas of one catalog file, keyed by db_id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchemaCatalog {
    schemas: BTreeMap<String, DatabaseSchema>,
}

impl SchemaCatalog {
    pub fn from_schemas(schemas: impl IntoIterator<Item = DatabaseSchema>) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        for s in schemas {
            s.validate()?;
            let id = s.db_id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(CorpusError::DuplicateDbId(id));
            }
        }
        Ok(Self { schemas: map })
    }

    pub fn get(&self, db_id: &str) -> Option<&DatabaseSchema> {
        self.schemas.get(db_id)
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatabaseSchema> {
        self.schemas.values()
    }

    pub fn mean_tables_per_db(&self) -> f64 {
        if self.schemas.is_empty() {
            return 0.0;
        }
        let total: usize = self.schemas.values().map(|s| s.tables.len()).sum();
        total as f64 / self.schemas.len() as f64
    }

    /// Points every schema at `<dir>/<db_id>/<db_id>.sqlite`.
    pub fn with_database_dir(mut self, dir: &Path) -> Self {
        for (id, s) in self.schemas.iter_mut() {
            s.db_file_path = dir.join(id).join(format!("{id}.sqlite"));
        }
        self
    }

    /// Serializes back to the SParC `tables.json` layout.
    pub fn to_sparc_json(&self) -> Json {
        let raws: Vec<RawSchema> = self.schemas.values().map(schema_to_raw).collect();
        serde_json::to_value(raws).expect("catalog serializes")
    }
}

fn schema_to_raw(s: &DatabaseSchema) -> RawSchema {
    let mut column_names_original = vec![(-1, "*".to_string())];
    let mut column_names = vec![(-1, "*".to_string())];
    let mut column_types = vec!["text".to_string()];
    let mut index_of = BTreeMap::new();
    for (ti, t) in s.tables.iter().enumerate() {
        for c in &t.columns {
            index_of.insert(
                (t.name.to_ascii_lowercase(), c.name.to_ascii_lowercase()),
                column_names_original.len(),
            );
            column_names_original.push((ti as i64, c.name.clone()));
            column_names.push((ti as i64, c.alias.clone().unwrap_or_else(|| c.name.clone())));
            column_types.push(c.data_type.as_label().to_string());
        }
    }
    let mut primary_keys = Vec::new();
    let mut foreign_keys = Vec::new();
    for t in &s.tables {
        let pk: Vec<usize> = t
            .columns
            .iter()
            .filter(|c| c.is_primary_key)
            .map(|c| index_of[&(t.name.to_ascii_lowercase(), c.name.to_ascii_lowercase())])
            .collect();
        match pk.len() {
            0 => {}
            1 => primary_keys.push(KeyRef::One(pk[0])),
            _ => primary_keys.push(KeyRef::Many(pk)),
        }
        for c in &t.columns {
            if let Some(fk) = &c.foreign_key {
                let from = index_of[&(t.name.to_ascii_lowercase(), c.name.to_ascii_lowercase())];
                if let Some(&to) =
                    index_of.get(&(fk.table.to_ascii_lowercase(), fk.column.to_ascii_lowercase()))
                {
                    foreign_keys.push((from, to));
                }
            }
        }
    }
    RawSchema {
        db_id: s.db_id.clone(),
        table_names_original: s.tables.iter().map(|t| t.name.clone()).collect(),
        table_names: s
            .tables
            .iter()
            .map(|t| t.alias.clone().unwrap_or_else(|| t.name.clone()))
            .collect(),
        column_names_original,
        column_names,
        column_types,
        primary_keys,
        foreign_keys,
    }
}

fn raw_to_schema(index: usize, raw: RawSchema, db_dir: &Path) -> Result<DatabaseSchema, CorpusError> {
    let malformed = |reason: String| CorpusError::MalformedSchema { index, reason };
    if raw.db_id.is_empty() {
        return Err(malformed("empty db_id".into()));
    }
    if raw.column_types.len() != raw.column_names_original.len() {
        return Err(malformed(format!(
            "`{}`: {} column types for {} columns",
            raw.db_id,
            raw.column_types.len(),
            raw.column_names_original.len()
        )));
    }
    let mut tables: Vec<TableSpec> = raw
        .table_names_original
        .iter()
        .enumerate()
        .map(|(i, name)| TableSpec {
            name: name.clone(),
            columns: Vec::new(),
            sample_rows: Vec::new(),
            alias: raw.table_names.get(i).filter(|a| *a != name).cloned(),
        })
        .collect();
    // catalog column index -> (table index, position within table)
    let mut located: Vec<Option<(usize, usize)>> = Vec::with_capacity(raw.column_names_original.len());
    for (ci, (ti, name)) in raw.column_names_original.iter().enumerate() {
        if *ti < 0 {
            located.push(None);
            continue;
        }
        let ti = *ti as usize;
        let table = tables.get_mut(ti).ok_or_else(|| {
            malformed(format!(
                "`{}`: column `{name}` refers to table index {ti}",
                raw.db_id
            ))
        })?;
        let alias = raw
            .column_names
            .get(ci)
            .map(|(_, a)| a)
            .filter(|a| *a != name)
            .cloned();
        located.push(Some((ti, table.columns.len())));
        table.columns.push(ColumnSpec {
            name: name.clone(),
            data_type: DataType::parse_label(&raw.column_types[ci]),
            is_primary_key: false,
            foreign_key: None,
            alias,
        });
    }
    let pk_indices = raw.primary_keys.iter().flat_map(|k| match k {
        KeyRef::One(i) => vec![*i],
        KeyRef::Many(v) => v.clone(),
    });
    for ci in pk_indices {
        let (ti, pos) = located
            .get(ci)
            .copied()
            .flatten()
            .ok_or_else(|| malformed(format!("`{}`: primary key index {ci} out of range", raw.db_id)))?;
        tables[ti].columns[pos].is_primary_key = true;
    }
    for &(from, to) in &raw.foreign_keys {
        let (fti, fpos) = located.get(from).copied().flatten().ok_or_else(|| {
            malformed(format!("`{}`: foreign key source index {from} out of range", raw.db_id))
        })?;
        let target = located.get(to).copied().flatten();
        match target {
            Some((tti, tpos)) => {
                let fk = ForeignKey {
                    table: tables[tti].name.clone(),
                    column: tables[tti].columns[tpos].name.clone(),
                };
                tables[fti].columns[fpos].foreign_key = Some(fk);
            }
            None => {
                return Err(CorpusError::DanglingForeignKey {
                    db_id: raw.db_id.clone(),
                    table: tables[fti].name.clone(),
                    column: tables[fti].columns[fpos].name.clone(),
                    target: format!("column index {to}"),
                })
            }
        }
    }
    let db_file_path = db_dir.join(&raw.db_id).join(format!("{}.sqlite", raw.db_id));
    Ok(DatabaseSchema {
        db_id: raw.db_id,
        tables,
        db_file_path,
    })
}

/// Loads a SParC `tables.json` catalog.
///
/// Database files default to `<catalog dir>/database/<db_id>/<db_id>.sqlite`;
/// use [`SchemaCatalog::with_database_dir`] to point elsewhere.
pub fn load_schema_catalog(path: &Path) -> Result<SchemaCatalog, CorpusError> {
    let json = read_json(path)?;
    let items = match json {
        Json::Array(items) => items,
        _ => {
            return Err(CorpusError::MalformedSchema {
                index: 0,
                reason: "top level is not an array of schemas".into(),
            })
        }
    };
    let db_dir = path
        .parent()
        .map(|p| p.join("database"))
        .unwrap_or_else(|| PathBuf::from("database"));
    let mut schemas = Vec::with_capacity(items.len());
    for (index, item) in items.into_iter().enumerate() {
        let raw: RawSchema = serde_json::from_value(item).map_err(|e| CorpusError::MalformedSchema {
            index,
            reason: e.to_string(),
        })?;
        schemas.push(raw_to_schema(index, raw, &db_dir)?);
    }
    SchemaCatalog::from_schemas(schemas)
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

pub(crate) fn open_read_only(path: &Path) -> Result<Connection, CorpusError> {
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|source| CorpusError::Database {
        path: path.to_path_buf(),
        source,
    })
}

fn table_exists(conn: &Connection, table: &str) -> bool {
    conn.query_row(
        "SELECT 1 FROM sqlite_master WHERE type IN ('table', 'view') AND name = ?1 COLLATE NOCASE",
        [table],
        |_| Ok(()),
    )
    .is_ok()
}

fn table_seed(seed: u64, table: &str) -> u64 {
    // FNV-1a over the table name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in table.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

fn sample_table(
    conn: &Connection,
    table: &TableSpec,
    rows_per_table: usize,
    seed: u64,
) -> rusqlite::Result<Vec<Row>> {
    let cols = table
        .columns
        .iter()
        .map(|c| quote_ident(&c.name))
        .collect::<Vec<_>>()
        .join(", ");
    let tname = quote_ident(&table.name);
    let mut rng = ChaCha8Rng::seed_from_u64(table_seed(seed, &table.name));

    let rowids: rusqlite::Result<Vec<i64>> = conn
        .prepare(&format!("SELECT rowid FROM {tname} ORDER BY rowid"))
        .and_then(|mut stmt| stmt.query_map([], |r| r.get(0))?.collect());
    let read_row = |r: &rusqlite::Row<'_>| -> rusqlite::Result<Row> {
        (0..table.columns.len())
            .map(|i| r.get_ref(i).map(Value::from_sqlite))
            .collect()
    };
    match rowids {
        Ok(mut ids) => {
            ids.shuffle(&mut rng);
            ids.truncate(rows_per_table);
            ids.sort_unstable();
            let mut stmt = conn.prepare(&format!("SELECT {cols} FROM {tname} WHERE rowid = ?1"))?;
            ids.iter().map(|id| stmt.query_row([id], read_row)).collect()
        }
        Err(_) => {
            // WITHOUT ROWID tables: shuffle positions of a full read instead.
            let mut stmt = conn.prepare(&format!("SELECT {cols} FROM {tname}"))?;
            let all: Vec<Row> = stmt.query_map([], read_row)?.collect::<rusqlite::Result<_>>()?;
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(rows_per_table);
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| all[i].clone()).collect())
        }
    }
}

/// Fills `sample_rows` with up to `rows_per_table` rows per table, chosen by
/// a seeded shuffle of rowids. Column structure is left untouched.
///
/// A cataloged table missing from the file gets empty samples and a warning.
pub fn sample_cells(
    schema: &DatabaseSchema,
    rows_per_table: usize,
    seed: u64,
) -> Result<DatabaseSchema, CorpusError> {
    let conn = open_read_only(&schema.db_file_path)?;
    // Opening is lazy in SQLite; force a read so a bad file fails here.
    conn.query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0))
        .map_err(|source| CorpusError::Database {
            path: schema.db_file_path.clone(),
            source,
        })?;
    let mut out = schema.clone();
    for table in &mut out.tables {
        table.sample_rows.clear();
        if rows_per_table == 0 {
            continue;
        }
        if !table_exists(&conn, &table.name) {
            log::warn!(
                "table `{}` of `{}` is absent from {}",
                table.name,
                schema.db_id,
                schema.db_file_path.display()
            );
            continue;
        }
        match sample_table(&conn, table, rows_per_table, seed) {
            Ok(rows) => table.sample_rows = rows,
            Err(e) => log::warn!("cannot sample `{}.{}`: {e}", schema.db_id, table.name),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    const DATASET: &str = r#"[
      {"database_id": "dorm_1", "interaction": [
        {"utterance": "How many students are there?", "query": "SELECT count(*) FROM student", "utterance_toks": []},
        {"utterance": "Which of them are older than 20?", "query": "SELECT * FROM student WHERE age > 20"}
      ], "final": {"utterance": "x", "query": "y"}},
      {"database_id": "dorm_1", "interaction": [
        {"utterance": "List dorm names.", "query": "SELECT dorm_name FROM dorm"}
      ]}
    ]"#;

    const TABLES: &str = r#"[{
      "db_id": "dorm_1",
      "table_names_original": ["student", "dorm"],
      "table_names": ["student", "dorm"],
      "column_names_original": [[-1, "*"], [0, "StuID"], [0, "Fname"], [0, "dormid"], [1, "dormid"], [1, "dorm_name"]],
      "column_names": [[-1, "*"], [0, "stu id"], [0, "first name"], [0, "dorm id"], [1, "dorm id"], [1, "dorm name"]],
      "column_types": ["text", "number", "text", "number", "number", "varchar(20)"],
      "primary_keys": [1, 4],
      "foreign_keys": [[3, 4]]
    }]"#;

    #[test]
    fn loads_sparc_dataset() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "dev.json", DATASET);
        let ds = load_dataset(&p, Split::Test).unwrap();
        assert_eq!(ds.interactions.len(), 2);
        assert_eq!(ds.question_count(), 3);
        assert_eq!(ds.interactions[0].id, "0");
        let positions: Vec<u32> = ds.interactions[0].turns.iter().map(|t| t.position).collect();
        assert_eq!(positions, vec![1, 2]);
        assert_eq!(ds.interactions[0].turns[1].gold_sql, "SELECT * FROM student WHERE age > 20");
    }

    #[test]
    fn empty_dataset_is_fine() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "empty.json", "[]");
        let ds = load_dataset(&p, Split::Train).unwrap();
        assert!(ds.interactions.is_empty());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/dev.json"), Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn malformed_record_reports_index() {
        let dir = TempDir::new().unwrap();
        let p = write(
            &dir,
            "bad.json",
            r#"[{"database_id": "a", "interaction": [{"utterance": "q", "query": "SELECT 1"}]},
                {"database_id": "a", "interaction": [{"utterance": "q"}]}]"#,
        );
        match load_dataset(&p, Split::Test).unwrap_err() {
            CorpusError::MalformedInteraction { index, .. } => assert_eq!(index, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dataset_round_trips() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "dev.json", DATASET);
        let ds = load_dataset(&p, Split::Test).unwrap();
        let out = dir.path().join("again.json");
        ds.write_sparc(&out).unwrap();
        assert_eq!(load_dataset(&out, Split::Test).unwrap(), ds);
    }

    #[test]
    fn loads_catalog_with_keys() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "tables.json", TABLES);
        let cat = load_schema_catalog(&p).unwrap();
        assert_eq!(cat.len(), 1);
        let s = cat.get("dorm_1").unwrap();
        assert_eq!(s.tables.len(), 2);
        let student = s.table("student").unwrap();
        assert!(student.columns[0].is_primary_key);
        assert_eq!(
            student.column("dormid").unwrap().foreign_key,
            Some(ForeignKey {
                table: "dorm".into(),
                column: "dormid".into()
            })
        );
        assert_eq!(student.column("Fname").unwrap().alias.as_deref(), Some("first name"));
        // varchar(20) is not a known label
        assert_eq!(s.table("dorm").unwrap().columns[1].data_type, DataType::Other);
        assert_eq!(s.db_file_path, dir.path().join("database/dorm_1/dorm_1.sqlite"));
        assert!((cat.mean_tables_per_db() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_table_catalog() {
        let dir = TempDir::new().unwrap();
        let p = write(
            &dir,
            "tables.json",
            r#"[{"db_id": "one", "table_names_original": ["t"], "column_names_original": [[-1, "*"], [0, "a"]],
                 "column_types": ["text", "number"], "primary_keys": [], "foreign_keys": []}]"#,
        );
        let cat = load_schema_catalog(&p).unwrap();
        assert_eq!(cat.get("one").unwrap().tables[0].columns.len(), 1);
    }

    #[test]
    fn duplicate_db_id_rejected() {
        let dir = TempDir::new().unwrap();
        let one = r#"{"db_id": "x", "table_names_original": ["t"], "column_names_original": [[-1, "*"], [0, "a"]], "column_types": ["text", "number"]}"#;
        let p = write(&dir, "tables.json", &format!("[{one},{one}]"));
        assert!(matches!(
            load_schema_catalog(&p).unwrap_err(),
            CorpusError::DuplicateDbId(id) if id == "x"
        ));
    }

    #[test]
    fn dangling_foreign_key_names_column() {
        let dir = TempDir::new().unwrap();
        let p = write(
            &dir,
            "tables.json",
            r#"[{"db_id": "x", "table_names_original": ["t"], "column_names_original": [[-1, "*"], [0, "a"]],
                 "column_types": ["text", "number"], "foreign_keys": [[1, 9]]}]"#,
        );
        let err = load_schema_catalog(&p).unwrap_err();
        assert!(err.to_string().contains("t.a"), "{err}");

        // Same check on directly constructed schemas: FK to an absent table.
        let s = DatabaseSchema {
            db_id: "d".into(),
            tables: vec![TableSpec::new(
                "dorm",
                vec![ColumnSpec::new("dormid", DataType::Number).references("Dorm_amenity", "dormid")],
            )],
            db_file_path: PathBuf::new(),
        };
        match s.validate().unwrap_err() {
            CorpusError::DanglingForeignKey { table, column, .. } => {
                assert_eq!((table.as_str(), column.as_str()), ("dorm", "dormid"))
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn catalog_round_trips() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "tables.json", TABLES);
        let cat = load_schema_catalog(&p).unwrap();
        let again = write(&dir, "again.json", &cat.to_sparc_json().to_string());
        assert_eq!(load_schema_catalog(&again).unwrap(), cat);
    }

    #[test]
    fn unknown_db_is_deferred_to_validation() {
        let dir = TempDir::new().unwrap();
        let ds = load_dataset(&write(&dir, "dev.json", DATASET), Split::Test).unwrap();
        let empty = SchemaCatalog::default();
        assert!(matches!(
            ds.validate_against(&empty).unwrap_err(),
            CorpusError::UnknownDatabase { .. }
        ));
    }

    fn fixture_db(dir: &TempDir, rows: usize) -> DatabaseSchema {
        let path = dir.path().join("f.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch("CREATE TABLE t (a INTEGER, b TEXT);").unwrap();
        for i in 0..rows {
            conn.execute("INSERT INTO t VALUES (?1, ?2)", (i as i64, format!("v{i}")))
                .unwrap();
        }
        DatabaseSchema {
            db_id: "f".into(),
            tables: vec![
                TableSpec::new(
                    "t",
                    vec![
                        ColumnSpec::new("a", DataType::Number),
                        ColumnSpec::new("b", DataType::Text),
                    ],
                ),
                TableSpec::new("ghost", vec![ColumnSpec::new("x", DataType::Text)]),
            ],
            db_file_path: path,
        }
    }

    #[test]
    fn sampling_zero_rows_is_empty() {
        let dir = TempDir::new().unwrap();
        let s = sample_cells(&fixture_db(&dir, 5), 0, 1).unwrap();
        assert!(s.tables.iter().all(|t| t.sample_rows.is_empty()));
    }

    #[test]
    fn sampling_small_table_returns_all_rows() {
        let dir = TempDir::new().unwrap();
        let s = sample_cells(&fixture_db(&dir, 2), 3, 1).unwrap();
        assert_eq!(
            s.tables[0].sample_rows,
            vec![
                vec![Value::Integer(0), Value::Text("v0".into())],
                vec![Value::Integer(1), Value::Text("v1".into())],
            ]
        );
        // missing table: warning, empty samples
        assert!(s.tables[1].sample_rows.is_empty());
    }

    #[test]
    fn sampling_is_seeded() {
        let dir = TempDir::new().unwrap();
        let schema = fixture_db(&dir, 50);
        let a = sample_cells(&schema, 3, 7).unwrap();
        let b = sample_cells(&schema, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tables[0].sample_rows.len(), 3);
        // structure untouched
        assert_eq!(a.tables[0].columns, schema.tables[0].columns);
    }

    #[test]
    fn unopenable_database_errors() {
        let dir = TempDir::new().unwrap();
        let mut schema = fixture_db(&dir, 1);
        schema.db_file_path = dir.path().join("missing.sqlite");
        assert!(matches!(
            sample_cells(&schema, 3, 0).unwrap_err(),
            CorpusError::Database { .. }
        ));
    }
}
