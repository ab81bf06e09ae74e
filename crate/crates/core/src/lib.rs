//! Context-dependent text-to-SQL with large language models: prompt
//! rendering, exemplar selection, post-correction and execution-based scoring.

pub mod cli;
pub mod corpus;
pub mod eval;
pub mod llm;
pub mod pipeline;
pub mod promptgen;
pub mod select;
pub mod sqltext;
pub mod value;

#[doc(hidden)]
pub mod fixtures;

pub use corpus::{DatabaseSchema, Dataset, Exemplar, Interaction, SchemaCatalog, Split, Turn};
pub use promptgen::{HistoryMode, PromptStyle};
pub use select::SelectionStrategy;
