use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    CompletionProvider, CompletionRequest, CompletionResponse, FinishReason, ProbePlan,
    ProviderError, Readiness,
};
use crate::stage::Stage;

pub const SCRIPT_INDEX_FILE: &str = "index.json";
const SCRIPT_FORMAT: &str = "hara-script/1";

/// One canned answer. An entry without a subject applies to every subject
/// of its stage that has no entry of its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub stage: Stage,
    pub subject: Option<String>,
    pub attempt: u32,
    pub response: String,
    pub finish_reason: FinishReason,
}

impl ScriptEntry {
    pub fn new(stage: Stage, subject: Option<&str>, attempt: u32, response: impl Into<String>) -> Self {
        Self {
            stage,
            subject: subject.map(str::to_string),
            attempt,
            response: response.into(),
            finish_reason: FinishReason::Complete,
        }
    }

    pub fn finishing(mut self, reason: FinishReason) -> Self {
        self.finish_reason = reason;
        self
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    format: String,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
    attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(default = "complete", skip_serializing_if = "is_complete")]
    finish_reason: FinishReason,
}

fn complete() -> FinishReason {
    FinishReason::Complete
}

fn is_complete(r: &FinishReason) -> bool {
    *r == FinishReason::Complete
}

type Key = (Stage, Option<String>, u32);

/// Deterministic provider backed by fixtures keyed by stage, subject and
/// attempt. Unknown keys produce a non-retryable transport error.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    entries: HashMap<Key, ScriptEntry>,
}

impl ScriptedProvider {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, ProviderError> {
        let mut map = HashMap::new();
        for entry in entries {
            if entry.attempt < 1 {
                return Err(ProviderError::Fixture(format!(
                    "{} entry has attempt 0",
                    entry.stage
                )));
            }
            let key = (entry.stage, entry.subject.clone(), entry.attempt);
            if map.insert(key, entry.clone()).is_some() {
                return Err(ProviderError::Fixture(format!(
                    "duplicate entry for {} {} attempt {}",
                    entry.stage,
                    entry.subject.as_deref().unwrap_or("*"),
                    entry.attempt
                )));
            }
        }
        Ok(Self { entries: map })
    }

    /// Loads `dir/index.json`; entries may hold their text inline or name a
    /// file relative to `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, ProviderError> {
        let index_path = dir.join(SCRIPT_INDEX_FILE);
        let text = fs::read_to_string(&index_path)
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", index_path.display())))?;
        let index: IndexFile = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", index_path.display())))?;
        if index.format != SCRIPT_FORMAT {
            return Err(ProviderError::Fixture(format!(
                "unsupported script format {:?}",
                index.format
            )));
        }
        let mut entries = Vec::with_capacity(index.entries.len());
        for e in index.entries {
            let response = match (e.file, e.response) {
                (Some(file), None) => {
                    if file.contains(['/', '\\']) || file.starts_with('.') {
                        return Err(ProviderError::Fixture(format!(
                            "fixture file name {file:?} must be a plain file name"
                        )));
                    }
                    fs::read_to_string(dir.join(&file))
                        .map_err(|err| ProviderError::Fixture(format!("{file}: {err}")))?
                }
                (None, Some(text)) => text,
                _ => {
                    return Err(ProviderError::Fixture(format!(
                        "{} entry needs exactly one of `file` or `response`",
                        e.stage
                    )))
                }
            };
            entries.push(ScriptEntry {
                stage: e.stage,
                subject: e.subject,
                attempt: e.attempt,
                response,
                finish_reason: e.finish_reason,
            });
        }
        Self::new(entries)
    }

    /// Writes every entry inline into `dir/index.json`, sorted by key.
    pub fn write_dir(&self, dir: &Path) -> Result<(), ProviderError> {
        fs::create_dir_all(dir).map_err(|e| ProviderError::Fixture(e.to_string()))?;
        let index = IndexFile {
            format: SCRIPT_FORMAT.to_string(),
            entries: self
                .sorted_entries()
                .into_iter()
                .map(|e| IndexEntry {
                    stage: e.stage,
                    subject: e.subject.clone(),
                    attempt: e.attempt,
                    file: None,
                    response: Some(e.response.clone()),
                    finish_reason: e.finish_reason,
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&index)
            .map_err(|e| ProviderError::Fixture(e.to_string()))?;
        text.push('\n');
        fs::write(dir.join(SCRIPT_INDEX_FILE), text).map_err(|e| ProviderError::Fixture(e.to_string()))
    }

    pub fn sorted_entries(&self) -> Vec<&ScriptEntry> {
        let mut all: Vec<&ScriptEntry> = self.entries.values().collect();
        all.sort_by(|a, b| {
            (a.stage, &a.subject, a.attempt).cmp(&(b.stage, &b.subject, b.attempt))
        });
        all
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, stage: Stage, subject: &str, attempt: u32) -> Option<&ScriptEntry> {
        self.entries
            .get(&(stage, Some(subject.to_string()), attempt))
            .or_else(|| self.entries.get(&(stage, None, attempt)))
    }
}

impl CompletionProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResponse {
        match self.lookup(request.stage, &request.subject, request.attempt) {
            Some(entry) => {
                CompletionResponse::new(entry.response.clone(), entry.finish_reason, Duration::ZERO)
            }
            None => CompletionResponse::transport_error(
                format!(
                    "no scripted response for stage {} subject {} attempt {}",
                    request.stage, request.subject, request.attempt
                ),
                false,
            ),
        }
    }

    fn probe(&self, plan: &ProbePlan) -> Readiness {
        let covered: BTreeSet<Stage> = self
            .entries
            .keys()
            .filter(|(_, _, attempt)| *attempt == 1)
            .map(|(stage, _, _)| *stage)
            .collect();
        let mut readiness = Readiness::ready(self.name());
        for stage in &plan.stages {
            if !covered.contains(stage) {
                readiness.issue(
                    "missing-fixture",
                    Some(*stage),
                    format!("no first-attempt fixture for stage {stage}"),
                );
            }
        }
        readiness
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(stage: Stage, subject: &str, attempt: u32) -> CompletionRequest {
        CompletionRequest::new("p", "m", 0.0, 10, stage, subject, attempt).unwrap()
    }

    #[test]
    fn exact_subject_beats_wildcard() {
        let p = ScriptedProvider::new([
            ScriptEntry::new(Stage::Severity, None, 1, "generic"),
            ScriptEntry::new(Stage::Severity, Some("HE002"), 1, "special"),
        ])
        .unwrap();
        assert_eq!(p.complete(&req(Stage::Severity, "HE001", 1)).raw_text, "generic");
        assert_eq!(p.complete(&req(Stage::Severity, "HE002", 1)).raw_text, "special");
    }

    #[test]
    fn unknown_key_is_fatal_transport_error() {
        let p = ScriptedProvider::new([ScriptEntry::new(Stage::Hazards, None, 1, "x")]).unwrap();
        let r = p.complete(&req(Stage::Hazards, "item", 2));
        assert_eq!(r.finish_reason, FinishReason::TransportError);
        assert!(!r.is_retryable());
        assert!(r.raw_text.contains("attempt 2"));
    }

    #[test]
    fn probe_reports_uncovered_stages() {
        let p = ScriptedProvider::new([
            ScriptEntry::new(Stage::Hazards, None, 1, "x"),
            ScriptEntry::new(Stage::Geometries, None, 2, "x"),
        ])
        .unwrap();
        let r = p.probe(&ProbePlan {
            stages: vec![Stage::Hazards, Stage::Geometries],
            model_id: "m".into(),
        });
        assert!(!r.is_ready());
        assert_eq!(r.missing_stages(), vec![Stage::Geometries]);
    }

    #[test]
    fn duplicate_entries_rejected() {
        let e = ScriptEntry::new(Stage::Hazards, None, 1, "x");
        assert!(ScriptedProvider::new([e.clone(), e]).is_err());
    }

    #[test]
    fn directory_round_trip_and_file_entries() {
        let dir = tempfile::tempdir().unwrap();
        let p = ScriptedProvider::new([
            ScriptEntry::new(Stage::Hazards, Some("item"), 1, "a,b\n"),
            ScriptEntry::new(Stage::Geometries, None, 1, "cut").finishing(FinishReason::Truncated),
        ])
        .unwrap();
        p.write_dir(dir.path()).unwrap();
        let back = ScriptedProvider::load_dir(dir.path()).unwrap();
        assert_eq!(back.sorted_entries(), p.sorted_entries());

        fs::write(dir.path().join("h.txt"), "from file").unwrap();
        fs::write(
            dir.path().join(SCRIPT_INDEX_FILE),
            r#"{"format":"hara-script/1","entries":[{"stage":"Hazards","attempt":1,"file":"h.txt"}]}"#,
        )
        .unwrap();
        let p = ScriptedProvider::load_dir(dir.path()).unwrap();
        assert_eq!(p.complete(&req(Stage::Hazards, "item", 1)).raw_text, "from file");

        fs::write(
            dir.path().join(SCRIPT_INDEX_FILE),
            r#"{"format":"hara-script/1","entries":[{"stage":"Hazards","attempt":1,"file":"../h.txt"}]}"#,
        )
        .unwrap();
        assert!(ScriptedProvider::load_dir(dir.path()).is_err());
    }
}
