use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    CompletionProvider, CompletionRequest, CompletionResponse, FinishReason, ProbePlan,
    ProviderError, Readiness,
};
use crate::stage::Stage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedExchange {
    pub stage: Stage,
    pub prompt_digest: String,
    pub attempt: u32,
    pub response_text: String,
    pub finish_reason: FinishReason,
}

/// An ordered list of exchanges, stored as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recording {
    pub exchanges: Vec<RecordedExchange>,
}

impl Recording {
    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        let mut out = Vec::new();
        for ex in &self.exchanges {
            serde_json::to_writer(&mut out, ex).map_err(|e| ProviderError::Fixture(e.to_string()))?;
            out.write_all(b"\n").expect("writing to a Vec cannot fail");
        }
        fs::write(path, out).map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.display())))?;
        let exchanges = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| ProviderError::Fixture(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { exchanges })
    }
}

/// Passes calls through to `inner` and keeps every exchange.
pub struct RecordingProvider<P> {
    inner: P,
    log: Mutex<Vec<RecordedExchange>>,
}

impl<P: CompletionProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn recording(&self) -> Recording {
        Recording {
            exchanges: self.log.lock().unwrap().clone(),
        }
    }
}

impl<P: CompletionProvider> CompletionProvider for RecordingProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResponse {
        let response = self.inner.complete(request);
        self.log.lock().unwrap().push(RecordedExchange {
            stage: request.stage,
            prompt_digest: request.prompt_digest(),
            attempt: request.attempt,
            response_text: response.raw_text.clone(),
            finish_reason: response.finish_reason,
        });
        response
    }

    fn probe(&self, plan: &ProbePlan) -> Readiness {
        self.inner.probe(plan)
    }
}

type Key = (Stage, String, u32);

/// Answers from a recording. Each key keeps a queue so repeated identical
/// requests (transport retries) get their recorded answers in order,
/// regardless of how calls for different keys interleave.
pub struct ReplayProvider {
    queues: Mutex<HashMap<Key, (Vec<RecordedExchange>, usize)>>,
    stages: BTreeSet<Stage>,
}

impl ReplayProvider {
    pub fn new(recording: &Recording) -> Self {
        let mut queues: HashMap<Key, (Vec<RecordedExchange>, usize)> = HashMap::new();
        let mut stages = BTreeSet::new();
        for ex in &recording.exchanges {
            stages.insert(ex.stage);
            queues
                .entry((ex.stage, ex.prompt_digest.clone(), ex.attempt))
                .or_default()
                .0
                .push(ex.clone());
        }
        Self {
            queues: Mutex::new(queues),
            stages,
        }
    }
}

impl CompletionProvider for ReplayProvider {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResponse {
        let key = (request.stage, request.prompt_digest(), request.attempt);
        let mut queues = self.queues.lock().unwrap();
        match queues.get_mut(&key) {
            Some((list, next)) if *next < list.len() => {
                let ex = &list[*next];
                *next += 1;
                CompletionResponse::new(ex.response_text.clone(), ex.finish_reason, Duration::ZERO)
            }
            _ => CompletionResponse::transport_error(
                format!(
                    "no recorded response for stage {} attempt {} prompt {}",
                    request.stage,
                    request.attempt,
                    &key.1[..12]
                ),
                false,
            ),
        }
    }

    fn probe(&self, plan: &ProbePlan) -> Readiness {
        let mut readiness = Readiness::ready(self.name());
        for stage in &plan.stages {
            if !self.stages.contains(stage) {
                readiness.issue(
                    "missing-fixture",
                    Some(*stage),
                    format!("recording has no exchange for stage {stage}"),
                );
            }
        }
        readiness
    }
}
