//! Hazard Analysis and Risk Assessment (HARA) driven by a chain of LLM
//! prompts.
//!
//! An item definition goes through six stages (malfunctions, road
//! geometries, scenario expansion, severity, safety goals, clustering) and
//! comes out as a CSV table for expert review. Every prompt and answer is
//! recorded in a hash-chained ledger, which makes runs resumable and
//! replayable.

pub mod digest;
pub mod domain;
pub mod ledger;
pub mod orchestrator;
pub mod parsing;
pub mod provider;
pub mod stage;
pub mod synth;
pub mod table;
pub mod templates;

pub use domain::ItemDefinition;
pub use ledger::{Ledger, LedgerContents, LedgerHeader};
pub use orchestrator::{Pipeline, PipelineError, RunConfig, RunOutcome};
pub use provider::CompletionProvider;
pub use stage::Stage;
pub use table::HaraTable;
pub use templates::TemplateSet;
