//! Runs the six stages from an item definition to a [`HaraTable`].
//!
//! Stages are barriers. Expansion, severity and safety-goal calls fan out
//! over a bounded worker pool; identifiers are assigned only after each
//! barrier, in sorted key order, so results do not depend on completion
//! order or on the concurrency limit. Every provider exchange is appended
//! to the ledger before its response is used, and recorded exchanges are
//! replayed instead of re-sent when a run is resumed or exported.

mod engine;
mod pool;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::domain::{HazardousEvent, ItemDefinition, Malfunction, RoadGeometry};
use crate::ledger::{EntryKind, Ledger, LedgerContents, LedgerError, LedgerHeader, NewEntry};
use crate::parsing::ParseFailure;
use crate::provider::{CompletionProvider, ProbePlan, RetryPolicy};
use crate::stage::Stage;
use crate::table::{HaraTable, Provenance};
use crate::templates::{TemplateError, TemplateSet};

use engine::Engine;

/// What to do when one malfunction × geometry expansion fails for good.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    #[default]
    Abort,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub concurrency_limit: usize,
    /// Attempts per logical call, the first one included.
    pub repair_budget: u32,
    pub retry: RetryPolicy,
    pub geometries_requested: usize,
    pub representatives_per_quadrant: usize,
    /// Upper bound on the estimated prompt size per stage, in tokens.
    pub stage_budgets: BTreeMap<Stage, usize>,
    pub expansion_failure: FailurePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-4".to_string(),
            temperature: 0.0,
            max_output_tokens: 4096,
            concurrency_limit: 4,
            repair_budget: 3,
            retry: RetryPolicy::default(),
            geometries_requested: 20,
            representatives_per_quadrant: 5,
            stage_budgets: Self::default_budgets(),
            expansion_failure: FailurePolicy::Abort,
        }
    }
}

impl RunConfig {
    pub fn default_budgets() -> BTreeMap<Stage, usize> {
        Stage::ALL
            .iter()
            .map(|&s| (s, if s == Stage::ClusterSelect { 24_000 } else { 8_000 }))
            .collect()
    }

    pub fn budget(&self, stage: Stage) -> usize {
        self.stage_budgets
            .get(&stage)
            .copied()
            .unwrap_or_else(|| Self::default_budgets()[&stage])
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.model_id.trim().is_empty() {
            return bad("model_id is empty".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        for (name, value) in [
            ("max_output_tokens", self.max_output_tokens as usize),
            ("concurrency_limit", self.concurrency_limit),
            ("repair_budget", self.repair_budget as usize),
            ("geometries_requested", self.geometries_requested),
            ("representatives_per_quadrant", self.representatives_per_quadrant),
        ] {
            if value < 1 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if let Some((stage, _)) = self.stage_budgets.iter().find(|(_, b)| **b < 1) {
            return bad(format!("token budget for {stage} must be at least 1"));
        }
        Ok(())
    }

    /// Canonical JSON form stored in the ledger header.
    pub fn to_params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_params(params: &serde_json::Value) -> Result<Self, PipelineError> {
        serde_json::from_value(params.clone())
            .map_err(|e| PipelineError::Config(format!("ledger header parameters: {e}")))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_params().to_string())
    }
}

#[derive(Debug, Error)]
pub enum StageErrorKind {
    #[error("no usable answer after {attempts} attempts; last problem: {last}")]
    RepairExhausted { attempts: u32, last: ParseFailure },
    #[error("provider failure: {0}")]
    Transport(String),
    #[error("prompt estimate of {estimate} tokens exceeds the stage budget of {budget}")]
    BudgetExceeded { estimate: usize, budget: usize },
    #[error("prompt rendering: {0}")]
    Prompt(TemplateError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
#[error("stage {stage} failed for {subject}: {kind}")]
pub struct StageError {
    pub stage: Stage,
    pub subject: String,
    pub kind: StageErrorKind,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Stage(Box<StageError>),
    /// The ledger holds no answer for a call needed by an offline replay.
    #[error("incomplete: {0}")]
    Incomplete(Stage),
    #[error("result violates domain invariants: {0}")]
    Invariant(String),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage(e) => Some(e.stage),
            PipelineError::Incomplete(s) => Some(*s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    /// Calls that reached the provider, per stage.
    pub provider_calls: BTreeMap<Stage, usize>,
    /// Calls answered from the ledger, per stage.
    pub replayed: BTreeMap<Stage, usize>,
    /// Repair prompts sent, per stage.
    pub repairs: BTreeMap<Stage, usize>,
    pub retries: usize,
    pub skipped_pairs: usize,
    pub dropped_rows: usize,
}

impl RunStats {
    pub fn calls(&self, stage: Stage) -> usize {
        self.provider_calls.get(&stage).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.provider_calls.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub table: HaraTable,
    pub malfunctions: Vec<Malfunction>,
    pub geometries: Vec<RoadGeometry>,
    /// Every assessed event, selected or not.
    pub events: Vec<HazardousEvent>,
    pub stats: RunStats,
}

/// Placeholders each stage template must declare, no more and no less.
pub fn stage_bindings(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Hazards => &["item_definition"],
        Stage::Geometries => &["item_definition", "geometry_count"],
        Stage::Expansion => &["item_definition", "malfunction", "geometry"],
        Stage::Severity => &["item_definition", "malfunction", "scenario", "hazardous_event"],
        Stage::SafetyGoal => &[
            "item_definition",
            "malfunction",
            "scenario",
            "hazardous_event",
            "severity",
            "rationale",
        ],
        Stage::ClusterSelect => &["item_definition", "category", "selection_count", "events"],
    }
}

pub struct Pipeline<'a> {
    templates: &'a TemplateSet,
    config: RunConfig,
}

impl<'a> Pipeline<'a> {
    /// Validates the configuration and checks that every template declares
    /// exactly the placeholders its stage binds.
    pub fn new(templates: &'a TemplateSet, config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        for stage in Stage::ALL {
            let declared = templates.get(stage).declared_placeholders();
            let bound: BTreeSet<String> = stage_bindings(stage).iter().map(|s| s.to_string()).collect();
            if *declared != bound {
                return Err(PipelineError::Config(format!(
                    "template for {stage} declares {declared:?}, the stage binds {bound:?}"
                )));
            }
        }
        Ok(Self { templates, config })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn probe_plan(&self) -> ProbePlan {
        ProbePlan::all_stages(&self.config.model_id)
    }

    pub fn ledger_header(&self, item: &ItemDefinition, bundle_source: &str) -> LedgerHeader {
        LedgerHeader::new(
            self.templates.version(),
            bundle_source,
            &self.config.digest(),
            &self.config.model_id,
            item.clone(),
            self.config.to_params(),
        )
    }

    /// Runs every stage against `provider`, recording into `ledger`.
    pub fn run(
        &self,
        provider: &dyn CompletionProvider,
        ledger: &mut Ledger,
    ) -> Result<RunOutcome, PipelineError> {
        let item = ledger.header().item.clone();
        self.check_bundle(ledger.header())?;
        let provenance = provenance(ledger.header());
        Engine::live(self.templates, &self.config, &item, provenance, provider, ledger, &[]).execute()
    }

    /// Continues a recorded run: exchanges already in `prior` are replayed,
    /// missing ones are sent to `provider` and appended to `ledger`.
    pub fn resume(
        &self,
        provider: &dyn CompletionProvider,
        ledger: &mut Ledger,
        prior: &LedgerContents,
    ) -> Result<RunOutcome, PipelineError> {
        let item = prior.header.item.clone();
        self.check_bundle(&prior.header)?;
        if prior.header.config_digest != self.config.digest() {
            ledger.append(NewEntry::note(
                None,
                None,
                format!(
                    "resumed with configuration digest {} (recorded {})",
                    self.config.digest(),
                    prior.header.config_digest
                ),
            ))?;
        }
        let provenance = provenance(&prior.header);
        Engine::live(self.templates, &self.config, &item, provenance, provider, ledger, &prior.entries)
            .execute()
    }

    /// Re-derives the table of a completed run from the ledger alone.
    pub fn replay(&self, contents: &LedgerContents) -> Result<RunOutcome, PipelineError> {
        self.check_bundle(&contents.header)?;
        if !contents.is_complete() {
            let done: BTreeSet<Stage> = contents
                .entries
                .iter()
                .filter(|e| e.kind == EntryKind::StageComplete)
                .filter_map(|e| e.stage)
                .collect();
            let missing = Stage::ALL
                .into_iter()
                .find(|s| !done.contains(s))
                .unwrap_or(Stage::ClusterSelect);
            return Err(PipelineError::Incomplete(missing));
        }
        let item = contents.header.item.clone();
        let provenance = provenance(&contents.header);
        Engine::offline(self.templates, &self.config, &item, provenance, &contents.entries).execute()
    }

    fn check_bundle(&self, header: &LedgerHeader) -> Result<(), PipelineError> {
        if header.bundle_version != self.templates.version() {
            return Err(PipelineError::Config(format!(
                "ledger was recorded with template bundle {}, loaded bundle is {}",
                header.bundle_version,
                self.templates.version()
            )));
        }
        Ok(())
    }
}

fn provenance(header: &LedgerHeader) -> Provenance {
    Provenance {
        bundle_version: header.bundle_version.clone(),
        model_id: header.model_id.clone(),
        run_timestamp: header.created.clone(),
        config_digest: header.config_digest.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = RunConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.geometries_requested, 20);
        assert_eq!(c.representatives_per_quadrant, 5);
        assert_eq!(c.repair_budget, 3);
        for broken in [
            RunConfig { concurrency_limit: 0, ..c.clone() },
            RunConfig { repair_budget: 0, ..c.clone() },
            RunConfig { geometries_requested: 0, ..c.clone() },
            RunConfig { temperature: 3.0, ..c.clone() },
            RunConfig { model_id: " ".into(), ..c.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(PipelineError::Config(_))));
        }
    }

    #[test]
    fn params_round_trip_and_digest_is_stable() {
        let c = RunConfig {
            concurrency_limit: 7,
            expansion_failure: FailurePolicy::Skip,
            ..RunConfig::default()
        };
        let back = RunConfig::from_params(&c.to_params()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_ne!(RunConfig::default().digest(), c.digest());
    }

    #[test]
    fn builtin_bundle_passes_preflight() {
        let templates = TemplateSet::builtin();
        assert!(Pipeline::new(&templates, RunConfig::default()).is_ok());
    }
}
