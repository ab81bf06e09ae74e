//! In-context exemplar selection over a training pool: Random, question
//! similarity (QTSs), masked question similarity (MQSs), query similarity
//! (QRSs) and DAIL selection (DAILs).
//!
//! Every ranking sorts by score descending and breaks ties by the lower
//! exemplar index.

pub mod embed;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, DatabaseSchema, Exemplar, SchemaCatalog};
use crate::sqltext::{jaccard, syntax_set_with, SqlTextError, SyntaxOptions, SyntaxSet};

pub use embed::{Embedder, EmbeddingProvider, HashingEmbedder, HttpEmbeddingProvider, ProviderError};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("exemplar embeddings have not been prepared")]
    EmbeddingsNotReady,
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Sql(#[from] SqlTextError),
    #[error("threshold {0} is outside [0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionStrategy {
    Random,
    #[serde(rename = "QTSs")]
    Qts,
    #[serde(rename = "MQSs")]
    Mqs,
    #[serde(rename = "QRSs")]
    Qrs,
    #[serde(rename = "DAILs")]
    Dail,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Random => "Random",
            SelectionStrategy::Qts => "QTSs",
            SelectionStrategy::Mqs => "MQSs",
            SelectionStrategy::Qrs => "QRSs",
            SelectionStrategy::Dail => "DAILs",
        })
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(SelectionStrategy::Random),
            "qts" | "qtss" => Ok(SelectionStrategy::Qts),
            "mqs" | "mqss" => Ok(SelectionStrategy::Mqs),
            "qrs" | "qrss" => Ok(SelectionStrategy::Qrs),
            "dail" | "dails" => Ok(SelectionStrategy::Dail),
            _ => Err(format!("unknown selection strategy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ranked: Vec<Ranked>,
    pub strategy: SelectionStrategy,
}

impl SelectionResult {
    pub fn indices(&self) -> Vec<usize> {
        self.ranked.iter().map(|r| r.index).collect()
    }
}

/// Training exemplars with precomputed embeddings and gold syntax sets.
#[derive(Debug, Clone)]
pub struct ExemplarPool {
    pub exemplars: Vec<Exemplar>,
    pub embedding_dim: usize,
    pub embeddings_ready: bool,
    syntax: Vec<SyntaxSet>,
    syntax_options: SyntaxOptions,
}

impl ExemplarPool {
    pub fn new(exemplars: Vec<Exemplar>) -> Self {
        Self::with_syntax_options(exemplars, SyntaxOptions::default())
    }

    pub fn with_syntax_options(exemplars: Vec<Exemplar>, syntax_options: SyntaxOptions) -> Self {
        let syntax = exemplars
            .iter()
            .map(|e| {
                syntax_set_with(&e.gold_sql, &syntax_options).unwrap_or_else(|err| {
                    log::warn!("exemplar SQL `{}` does not tokenize: {err}", e.gold_sql);
                    SyntaxSet::default()
                })
            })
            .collect();
        let embedding_dim = exemplars
            .first()
            .and_then(|e| e.question_embedding.as_ref())
            .map_or(0, Vec::len);
        let embeddings_ready = !exemplars.is_empty()
            && exemplars.iter().all(|e| {
                matches!((&e.question_embedding, &e.masked_embedding),
                    (Some(q), Some(m)) if q.len() == embedding_dim && m.len() == embedding_dim && embedding_dim > 0)
            });
        Self {
            exemplars,
            embedding_dim,
            embeddings_ready,
            syntax,
            syntax_options,
        }
    }

    /// One exemplar per turn of every training interaction.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let exemplars = dataset
            .interactions
            .iter()
            .flat_map(|i| {
                i.turns
                    .iter()
                    .map(move |t| Exemplar::new(i.db_id.clone(), t.question.clone(), t.gold_sql.clone()))
            })
            .collect();
        Self::new(exemplars)
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn syntax_options(&self) -> &SyntaxOptions {
        &self.syntax_options
    }

    pub fn gold_syntax(&self, index: usize) -> &SyntaxSet {
        &self.syntax[index]
    }

    /// Embeds every question and its schema-masked form. Masking uses the
    /// exemplar's own database schema from `catalog`.
    pub fn prepare_embeddings(&mut self, embedder: &Embedder, catalog: &SchemaCatalog) -> Result<(), SelectError> {
        let questions: Vec<String> = self.exemplars.iter().map(|e| e.question.clone()).collect();
        let masked: Vec<String> = self
            .exemplars
            .iter()
            .map(|e| match catalog.get(&e.db_id) {
                Some(schema) => mask_schema_mentions(&e.question, schema),
                None => e.question.clone(),
            })
            .collect();
        let q = embedder.embed(&questions)?;
        let m = embedder.embed(&masked)?;
        for ((e, qv), mv) in self.exemplars.iter_mut().zip(q).zip(m) {
            e.question_embedding = Some(qv);
            e.masked_embedding = Some(mv);
        }
        self.embedding_dim = embedder.dim();
        self.embeddings_ready = !self.exemplars.is_empty();
        Ok(())
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SelectError> {
    if u.len() != v.len() {
        return Err(SelectError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SelectError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn trim_punct(token: &str) -> (&str, &str, &str) {
    let is_p = |c: char| !c.is_alphanumeric() && c != '_';
    let core_start = token.find(|c: char| !is_p(c)).unwrap_or(token.len());
    let core_end = token.rfind(|c: char| !is_p(c)).map_or(core_start, |i| i + token[i..].chars().next().map_or(1, char::len_utf8));
    (&token[..core_start], &token[core_start..core_end], &token[core_end..])
}

/// Replaces every whitespace-delimited token equal (case-insensitively, edge
/// punctuation ignored) to a table or column name with `<MSK>`.
pub fn mask_schema_mentions(question: &str, schema: &DatabaseSchema) -> String {
    let names: HashSet<String> = schema.identifier_names().iter().map(|n| n.to_lowercase()).collect();
    let mut out = String::with_capacity(question.len());
    let mut rest = question;
    while !rest.is_empty() {
        let ws_end = rest.find(|c: char| !c.is_whitespace()).unwrap_or(rest.len());
        out.push_str(&rest[..ws_end]);
        rest = &rest[ws_end..];
        let tok_end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let token = &rest[..tok_end];
        let (lead, core, trail) = trim_punct(token);
        if !core.is_empty() && names.contains(&core.to_lowercase()) {
            out.push_str(lead);
            out.push_str("<MSK>");
            out.push_str(trail);
        } else {
            out.push_str(token);
        }
        rest = &rest[tok_end..];
    }
    out
}

fn by_score_then_index(a: &Ranked, b: &Ranked) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

fn top_k(mut scored: Vec<Ranked>, k: usize) -> Vec<Ranked> {
    scored.sort_by(by_score_then_index);
    scored.truncate(k);
    scored
}

pub fn select_random(pool: &ExemplarPool, k: usize, seed: u64) -> SelectionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pool.len();
    let ranked = sample(&mut rng, n, k.min(n))
        .into_iter()
        .map(|index| Ranked { index, score: 0.0 })
        .collect();
    SelectionResult {
        ranked,
        strategy: SelectionStrategy::Random,
    }
}

#[derive(Clone, Copy)]
enum Field {
    Question,
    Masked,
}

fn cosine_scores(pool: &ExemplarPool, query: &[f64], field: Field) -> Result<Vec<Ranked>, SelectError> {
    if !pool.embeddings_ready {
        return Err(SelectError::EmbeddingsNotReady);
    }
    pool.exemplars
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let v = match field {
                Field::Question => e.question_embedding.as_deref(),
                Field::Masked => e.masked_embedding.as_deref(),
            }
            .ok_or(SelectError::EmbeddingsNotReady)?;
            Ok(Ranked {
                index,
                score: cosine(query, v)?,
            })
        })
        .collect()
}

/// QTSs over a precomputed target-question vector.
pub fn rank_by_question(pool: &ExemplarPool, query: &[f64], k: usize) -> Result<SelectionResult, SelectError> {
    Ok(SelectionResult {
        ranked: top_k(cosine_scores(pool, query, Field::Question)?, k),
        strategy: SelectionStrategy::Qts,
    })
}

/// MQSs over a precomputed masked target-question vector.
pub fn rank_by_masked_question(pool: &ExemplarPool, query: &[f64], k: usize) -> Result<SelectionResult, SelectError> {
    Ok(SelectionResult {
        ranked: top_k(cosine_scores(pool, query, Field::Masked)?, k),
        strategy: SelectionStrategy::Mqs,
    })
}

fn jaccard_scores(pool: &ExemplarPool, predicted: &SyntaxSet, among: impl Iterator<Item = usize>) -> Vec<Ranked> {
    among
        .map(|index| Ranked {
            index,
            score: jaccard(predicted, &pool.syntax[index]),
        })
        .collect()
}

/// QRSs over a precomputed syntax set of the preliminary SQL.
pub fn rank_by_query(pool: &ExemplarPool, predicted: &SyntaxSet, k: usize) -> SelectionResult {
    SelectionResult {
        ranked: top_k(jaccard_scores(pool, predicted, 0..pool.len()), k),
        strategy: SelectionStrategy::Qrs,
    }
}

/// Stage 1 of DAILs: indices whose masked-question cosine is at least `threshold`.
pub fn dail_survivors(pool: &ExemplarPool, masked_query: &[f64], threshold: f64) -> Result<Vec<usize>, SelectError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SelectError::Threshold(threshold));
    }
    let mut stage1 = cosine_scores(pool, masked_query, Field::Masked)?;
    stage1.sort_by(by_score_then_index);
    Ok(stage1
        .into_iter()
        .filter(|r| r.score >= threshold)
        .map(|r| r.index)
        .collect())
}

/// DAILs: filter by masked-question similarity, re-rank survivors by query similarity.
pub fn rank_dail(
    pool: &ExemplarPool,
    masked_query: &[f64],
    predicted: &SyntaxSet,
    k: usize,
    threshold: f64,
) -> Result<SelectionResult, SelectError> {
    let survivors = dail_survivors(pool, masked_query, threshold)?;
    Ok(SelectionResult {
        ranked: top_k(jaccard_scores(pool, predicted, survivors.into_iter()), k),
        strategy: SelectionStrategy::Dail,
    })
}

pub fn select_qts(pool: &ExemplarPool, embedder: &Embedder, target_question: &str, k: usize) -> Result<SelectionResult, SelectError> {
    if !pool.embeddings_ready {
        return Err(SelectError::EmbeddingsNotReady);
    }
    let q = embedder.embed_one(target_question)?;
    rank_by_question(pool, &q, k)
}

pub fn select_mqs(
    pool: &ExemplarPool,
    embedder: &Embedder,
    target_question: &str,
    schema: &DatabaseSchema,
    k: usize,
) -> Result<SelectionResult, SelectError> {
    if !pool.embeddings_ready {
        return Err(SelectError::EmbeddingsNotReady);
    }
    let q = embedder.embed_one(&mask_schema_mentions(target_question, schema))?;
    rank_by_masked_question(pool, &q, k)
}

pub fn select_qrs(pool: &ExemplarPool, predicted_sql: &str, k: usize) -> Result<SelectionResult, SelectError> {
    let predicted = syntax_set_with(predicted_sql, &pool.syntax_options)?;
    Ok(rank_by_query(pool, &predicted, k))
}

pub fn select_dail(
    pool: &ExemplarPool,
    embedder: &Embedder,
    target_question: &str,
    schema: &DatabaseSchema,
    predicted_sql: &str,
    k: usize,
    threshold: f64,
) -> Result<SelectionResult, SelectError> {
    if !pool.embeddings_ready {
        return Err(SelectError::EmbeddingsNotReady);
    }
    let predicted = syntax_set_with(predicted_sql, &pool.syntax_options)?;
    let q = embedder.embed_one(&mask_schema_mentions(target_question, schema))?;
    rank_dail(pool, &q, &predicted, k, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::student_dorm_schema;
    use proptest::prelude::*;

    fn basis(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn pool_with(vectors: Vec<Vec<f64>>, sqls: &[&str]) -> ExemplarPool {
        let ex = vectors
            .into_iter()
            .zip(sqls)
            .enumerate()
            .map(|(i, (v, sql))| Exemplar {
                db_id: "d".into(),
                question: format!("q{i}"),
                gold_sql: sql.to_string(),
                question_embedding: Some(v.clone()),
                masked_embedding: Some(v),
            })
            .collect();
        ExemplarPool::new(ex)
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(SelectError::ZeroVector)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(SelectError::DimensionMismatch { .. })));
    }

    #[test]
    fn masking_examples() {
        let s = student_dorm_schema();
        assert_eq!(mask_schema_mentions("How many student are there?", &s), "How many <MSK> are there?");
        assert_eq!(mask_schema_mentions("How many people live here?", &s), "How many people live here?");
        // table and column, case-insensitive, punctuation kept, spacing kept
        assert_eq!(
            mask_schema_mentions("Show  the FNAME of each Student.", &s),
            "Show  the <MSK> of each <MSK>."
        );
        assert_eq!(mask_schema_mentions("(dorm_name)?", &s), "(<MSK>)?");
    }

    #[test]
    fn random_selection() {
        let pool = pool_with(vec![basis(0, 2); 5], &["SELECT 1"; 5]);
        assert!(select_random(&pool, 0, 1).ranked.is_empty());
        let mut all = select_random(&pool, 10, 1).indices();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(select_random(&pool, 3, 9), select_random(&pool, 3, 9));
        assert!(select_random(&pool, 3, 9).ranked.iter().all(|r| r.score == 0.0));
    }

    #[test]
    fn qts_basis_vectors() {
        let pool = pool_with((0..3).map(|i| basis(i, 3)).collect(), &["SELECT 1"; 3]);
        // brute force: cosine(e2, e_i) = [0, 0, 1] -> index 2 wins
        let r = rank_by_question(&pool, &basis(2, 3), 1).unwrap();
        assert_eq!(r.indices(), vec![2]);
        assert_eq!(r.ranked[0].score, 1.0);
        // k beyond pool ranks everything, ties by index
        assert_eq!(rank_by_question(&pool, &basis(2, 3), 10).unwrap().indices(), vec![2, 0, 1]);
    }

    #[test]
    fn qts_verbatim_question_ranks_first() {
        let embedder = Embedder::new(Box::new(HashingEmbedder::new(64)));
        let mut pool = ExemplarPool::new(vec![
            Exemplar::new("d", "List all cities", "SELECT * FROM city"),
            Exemplar::new("d", "How many students are there?", "SELECT count(*) FROM student"),
            Exemplar::new("d", "Name every dorm", "SELECT dorm_name FROM dorm"),
        ]);
        pool.prepare_embeddings(&embedder, &SchemaCatalog::default()).unwrap();
        let r = select_qts(&pool, &embedder, "How many students are there?", 3).unwrap();
        assert_eq!(r.ranked[0].index, 1);
        assert!((r.ranked[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unprepared_pool_is_rejected() {
        let embedder = Embedder::new(Box::new(HashingEmbedder::new(8)));
        let pool = ExemplarPool::new(vec![Exemplar::new("d", "q", "SELECT 1")]);
        assert!(matches!(
            select_qts(&pool, &embedder, "q", 1),
            Err(SelectError::EmbeddingsNotReady)
        ));
        assert!(matches!(
            select_dail(&pool, &embedder, "q", &student_dorm_schema(), "SELECT 1", 1, 0.5),
            Err(SelectError::EmbeddingsNotReady)
        ));
    }

    #[test]
    fn mqs_ties_after_masking() {
        let schema_a = DatabaseSchema {
            db_id: "a".into(),
            tables: vec![crate::corpus::TableSpec::new("singer", vec![])],
            db_file_path: Default::default(),
        };
        let schema_b = DatabaseSchema {
            db_id: "b".into(),
            tables: vec![crate::corpus::TableSpec::new("album", vec![])],
            db_file_path: Default::default(),
        };
        let catalog = SchemaCatalog::from_schemas([schema_a, schema_b]).unwrap();
        let embedder = Embedder::new(Box::new(HashingEmbedder::new(64)));
        let mut pool = ExemplarPool::new(vec![
            Exemplar::new("a", "How many singer are there?", "SELECT count(*) FROM singer"),
            Exemplar::new("b", "How many album are there?", "SELECT count(*) FROM album"),
        ]);
        pool.prepare_embeddings(&embedder, &catalog).unwrap();
        let target = student_dorm_schema();
        let r = select_mqs(&pool, &embedder, "How many student are there?", &target, 2).unwrap();
        assert!((r.ranked[0].score - r.ranked[1].score).abs() < 1e-6);
        assert_eq!(r.indices(), vec![0, 1]);
        assert!(select_mqs(&pool, &embedder, "x", &target, 0).unwrap().ranked.is_empty());
    }

    #[test]
    fn mqs_equals_qts_without_overlap() {
        let embedder = Embedder::new(Box::new(HashingEmbedder::new(64)));
        let mut pool = ExemplarPool::new(vec![
            Exemplar::new("zz", "list people", "SELECT 1"),
            Exemplar::new("zz", "count the items please", "SELECT 2"),
            Exemplar::new("zz", "what are the names", "SELECT 3"),
        ]);
        pool.prepare_embeddings(&embedder, &SchemaCatalog::default()).unwrap();
        let s = student_dorm_schema();
        let q = "count the names";
        assert_eq!(
            select_mqs(&pool, &embedder, q, &s, 3).unwrap().ranked,
            select_qts(&pool, &embedder, q, 3).unwrap().ranked
        );
    }

    #[test]
    fn qrs_hand_computed() {
        let pool = pool_with(
            vec![basis(0, 2), basis(1, 2)],
            &["SELECT count(*) FROM b", "SELECT x FROM b WHERE y=1"],
        );
        // predicted {SELECT, COUNT, FROM}
        // entry 0: {SELECT, COUNT, FROM} -> 3/3 = 1
        // entry 1: {SELECT, FROM, WHERE, =} -> |{SELECT, FROM}| / |{SELECT, COUNT, FROM, WHERE, =}| = 2/5
        let r = select_qrs(&pool, "SELECT count(*) FROM a", 2).unwrap();
        assert_eq!(r.indices(), vec![0, 1]);
        assert_eq!(r.ranked[0].score, 1.0);
        assert!((r.ranked[1].score - 0.4).abs() < 1e-12);
        assert!(select_qrs(&pool, "SELECT 1", 0).unwrap().ranked.is_empty());
        assert!(select_qrs(&pool, "SELECT 'oops", 1).is_err());
    }

    #[test]
    fn dail_hand_built() {
        // A, B close to the query in masked space; C far. Jaccard prefers B.
        let q = vec![1.0, 0.0];
        let pool = pool_with(
            vec![vec![1.0, 0.1], vec![1.0, 0.3], vec![0.0, 1.0]],
            &[
                "SELECT a FROM t WHERE b = 1",
                "SELECT count(*) FROM t",
                "SELECT count(*) FROM t",
            ],
        );
        let predicted = crate::sqltext::syntax_set("SELECT count(*) FROM u").unwrap();
        // stage 1 cosines: A = 0.995, B = 0.958, C = 0 -> threshold 0.9 keeps {A, B}
        assert_eq!(dail_survivors(&pool, &q, 0.9).unwrap(), vec![0, 1]);
        // stage 2: B = 1.0, A = 2/5
        let r = rank_dail(&pool, &q, &predicted, 3, 0.9).unwrap();
        assert_eq!(r.indices(), vec![1, 0]);
        // threshold 0 equals QRSs
        assert_eq!(rank_dail(&pool, &q, &predicted, 3, 0.0).unwrap().ranked, rank_by_query(&pool, &predicted, 3).ranked);
        // threshold 1 with no exact match -> empty
        assert!(rank_dail(&pool, &q, &predicted, 3, 1.0).unwrap().ranked.is_empty());
        assert!(matches!(rank_dail(&pool, &q, &predicted, 3, 1.5), Err(SelectError::Threshold(_))));
    }

    fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(
            prop::collection::vec(-3i32..=3, d).prop_map(|v| {
                let mut v: Vec<f64> = v.into_iter().map(f64::from).collect();
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                v
            }),
            1..n,
        )
    }

    proptest! {
        #[test]
        fn rankings_bounded_and_distinct(vs in vecs(40, 4), k in 0usize..50, seed in any::<u64>()) {
            let n = vs.len();
            let sqls = vec!["SELECT a FROM t"; n];
            let pool = pool_with(vs.clone(), &sqls);
            let q = vs[0].clone();
            for r in [
                rank_by_question(&pool, &q, k).unwrap(),
                rank_by_masked_question(&pool, &q, k).unwrap(),
                select_qrs(&pool, "SELECT count(*) FROM t", k).unwrap(),
                select_random(&pool, k, seed),
            ] {
                prop_assert!(r.ranked.len() <= k.min(n));
                let mut idx = r.indices();
                idx.sort_unstable();
                idx.dedup();
                prop_assert_eq!(idx.len(), r.ranked.len());
                prop_assert!(r.ranked.iter().all(|x| x.index < n));
                prop_assert!(r.ranked.windows(2).all(|w| w[0].score >= w[1].score));
            }
        }

        #[test]
        fn positive_scaling_keeps_rankings(vs in vecs(30, 3), scale in 0.01f64..100.0) {
            let n = vs.len();
            let sqls = vec!["SELECT 1"; n];
            let pool = pool_with(vs.clone(), &sqls);
            let scaled = pool_with(vs.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect(), &sqls);
            let q = vs[n - 1].clone();
            let a = rank_by_question(&pool, &q, n).unwrap().ranked;
            let b = rank_by_question(&scaled, &q, n).unwrap().ranked;
            // identical up to reordering among exact mathematical ties
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.score - y.score).abs() < 1e-9);
                if x.index != y.index {
                    let sx = b.iter().find(|r| r.index == x.index).unwrap().score;
                    prop_assert!((sx - x.score).abs() < 1e-9);
                }
            }
            // power-of-two scaling is exact, so the order is bit-identical
            let exact = pool_with(vs.iter().map(|v| v.iter().map(|x| x * 8.0).collect()).collect(), &sqls);
            prop_assert_eq!(
                rank_by_question(&pool, &q, n).unwrap().indices(),
                rank_by_question(&exact, &q, n).unwrap().indices()
            );
        }

        #[test]
        fn raising_threshold_shrinks_survivors(vs in vecs(30, 3), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let n = vs.len();
            let pool = pool_with(vs.clone(), &vec!["SELECT 1"; n]);
            let a: HashSet<usize> = dail_survivors(&pool, &vs[0], lo).unwrap().into_iter().collect();
            let b: HashSet<usize> = dail_survivors(&pool, &vs[0], hi).unwrap().into_iter().collect();
            prop_assert!(b.is_subset(&a));
        }
    }
}
