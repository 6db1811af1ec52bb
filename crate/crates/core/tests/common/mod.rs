#![allow(dead_code)]

use std::path::PathBuf;

use hara_core::ledger::{verify_bytes, MemorySink};
use hara_core::provider::ScriptedProvider;
use hara_core::synth::{generate, FixturePlan, Synthesized};
use hara_core::{
    CompletionProvider, ItemDefinition, Ledger, LedgerContents, Pipeline, PipelineError, RunConfig,
    RunOutcome, TemplateSet,
};

pub fn fixture_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn item(name: &str) -> ItemDefinition {
    let text = std::fs::read_to_string(fixture_dir(name).join("item.md")).unwrap();
    ItemDefinition::from_markdown(&text, name).unwrap()
}

pub fn plan(name: &str) -> FixturePlan {
    let text = std::fs::read_to_string(fixture_dir(name).join("plan.toml")).unwrap();
    FixturePlan::from_toml(&text).unwrap()
}

pub fn synth(name: &str) -> Synthesized {
    generate(&plan(name)).unwrap()
}

pub fn checked_in(name: &str) -> ScriptedProvider {
    ScriptedProvider::load_dir(&fixture_dir(name).join("script")).unwrap()
}

/// Config matching a fixture plan, with retries that never sleep long.
pub fn config_for(plan: &FixturePlan) -> RunConfig {
    let mut config = RunConfig {
        geometries_requested: plan.geometries_requested,
        representatives_per_quadrant: plan.representatives_per_quadrant,
        ..RunConfig::default()
    };
    config.retry.base_delay_ms = 1;
    config.retry.max_delay_ms = 2;
    config
}

/// A ledger writing into memory; the returned sink shares its buffer.
pub fn memory_ledger(pipeline: &Pipeline<'_>, item: &ItemDefinition) -> (Ledger, MemorySink) {
    let sink = MemorySink::default();
    let header = pipeline.ledger_header(item, "builtin");
    let ledger = Ledger::with_sink(Box::new(sink.clone()), header).unwrap();
    (ledger, sink)
}

pub fn contents_of(sink: &MemorySink) -> LedgerContents {
    let bytes = sink.buffer.lock().unwrap().clone();
    let (report, contents) = verify_bytes(&bytes);
    assert!(report.is_intact(), "{report}");
    contents.unwrap()
}

pub struct Run {
    pub result: Result<RunOutcome, PipelineError>,
    pub sink: MemorySink,
}

pub fn run_with(
    templates: &TemplateSet,
    config: RunConfig,
    item: &ItemDefinition,
    provider: &dyn CompletionProvider,
) -> Run {
    let pipeline = Pipeline::new(templates, config).unwrap();
    let (mut ledger, sink) = memory_ledger(&pipeline, item);
    let result = pipeline.run(provider, &mut ledger);
    Run { result, sink }
}
