use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use super::pool::map_bounded;
use super::{FailurePolicy, PipelineError, RunConfig, RunOutcome, RunStats, StageError, StageErrorKind};
use crate::domain::{
    classify_quadrant, validate_event, DetailedScenario, EventId, GeometryId, GoalId, Guideword,
    HazardousEvent, ItemDefinition, Malfunction, MalfunctionId, Quadrant, RoadGeometry,
    RunContext, SafetyGoal, ScenarioAgent, SeverityAssessment,
};
use crate::ledger::{EntryKind, Ledger, LedgerEntry, NewEntry};
use crate::parsing::{
    build_repair_prompt, extract_table, FailureCode, ParseFailure, StageSchema, TypedRow,
};
use crate::provider::{
    call_with_retry, Attempted, CompletionProvider, CompletionRequest, FinishReason,
};
use crate::stage::Stage;
use crate::table::{HaraRow, HaraTable, Provenance};
use crate::templates::{RenderedPrompt, TemplateSet};

const ITEM_SUBJECT: &str = "item";

type CacheKey = (Stage, String, u32, u32, String);
type MarkerKey = (EntryKind, Option<Stage>, Option<String>, Option<String>);

struct Live<'a> {
    provider: &'a dyn CompletionProvider,
    ledger: Mutex<&'a mut Ledger>,
}

pub(super) struct Engine<'a> {
    templates: &'a TemplateSet,
    config: &'a RunConfig,
    item: &'a ItemDefinition,
    provenance: Provenance,
    /// `None` replays from the ledger only and never writes.
    live: Option<Live<'a>>,
    cache: HashMap<CacheKey, LedgerEntry>,
    markers: HashSet<MarkerKey>,
    stats: Mutex<RunStats>,
}

struct Expanded {
    narrative: String,
    agents: Vec<ScenarioAgent>,
    consequence: String,
}

fn marker_key(entry_kind: EntryKind, stage: Option<Stage>, subject: Option<&str>, note: Option<&str>) -> MarkerKey {
    match entry_kind {
        EntryKind::Note => (entry_kind, stage, subject.map(str::to_string), note.map(str::to_string)),
        _ => (entry_kind, stage, None, None),
    }
}

impl<'a> Engine<'a> {
    pub(super) fn live(
        templates: &'a TemplateSet,
        config: &'a RunConfig,
        item: &'a ItemDefinition,
        provenance: Provenance,
        provider: &'a dyn CompletionProvider,
        ledger: &'a mut Ledger,
        prior: &[LedgerEntry],
    ) -> Self {
        let mut engine = Self::offline(templates, config, item, provenance, prior);
        engine.live = Some(Live {
            provider,
            ledger: Mutex::new(ledger),
        });
        engine
    }

    pub(super) fn offline(
        templates: &'a TemplateSet,
        config: &'a RunConfig,
        item: &'a ItemDefinition,
        provenance: Provenance,
        prior: &[LedgerEntry],
    ) -> Self {
        let mut cache = HashMap::new();
        let mut markers = HashSet::new();
        for e in prior {
            match e.kind {
                EntryKind::Exchange => {
                    if let (Some(stage), Some(subject), Some(attempt), Some(retry), Some(digest)) =
                        (e.stage, &e.subject, e.attempt, e.retry, &e.request_digest)
                    {
                        cache
                            .entry((stage, subject.clone(), attempt, retry, digest.clone()))
                            .or_insert_with(|| e.clone());
                    }
                }
                EntryKind::Terminal => {}
                kind => {
                    markers.insert(marker_key(kind, e.stage, e.subject.as_deref(), e.note.as_deref()));
                }
            }
        }
        Self {
            templates,
            config,
            item,
            provenance,
            live: None,
            cache,
            markers,
            stats: Mutex::new(RunStats::default()),
        }
    }

    pub(super) fn execute(self) -> Result<RunOutcome, PipelineError> {
        match self.stages() {
            Ok(outcome) => Ok(outcome),
            Err(error) => {
                if let (Some(live), false) = (&self.live, matches!(error, PipelineError::Ledger(_))) {
                    let subject = match &error {
                        PipelineError::Stage(e) => Some(e.subject.as_str()),
                        _ => None,
                    };
                    live.ledger
                        .lock()
                        .unwrap()
                        .append(NewEntry::terminal(error.stage(), subject, error.to_string()))?;
                }
                Err(error)
            }
        }
    }

    /// Appends a note or marker unless an identical one was recorded by an
    /// earlier session of this run.
    fn record(&self, entry: NewEntry) -> Result<(), PipelineError> {
        let Some(live) = &self.live else { return Ok(()) };
        let key = marker_key(entry.kind, entry.stage, entry.subject.as_deref(), entry.note.as_deref());
        if self.markers.contains(&key) {
            return Ok(());
        }
        live.ledger.lock().unwrap().append(entry)?;
        Ok(())
    }

    fn bump(&self, f: impl FnOnce(&mut RunStats)) {
        f(&mut self.stats.lock().unwrap());
    }

    /// One transport try: from the ledger if recorded, otherwise from the
    /// provider. A live response is used only as returned by the ledger.
    fn exchange(&self, request: &CompletionRequest, retry: u32) -> Result<Attempted, PipelineError> {
        let key = (
            request.stage,
            request.subject.clone(),
            request.attempt,
            retry,
            request.prompt_digest(),
        );
        if let Some(entry) = self.cache.get(&key) {
            self.bump(|s| *s.replayed.entry(request.stage).or_default() += 1);
            return Ok(Attempted {
                response: entry.response().expect("cached entries are exchanges"),
                replayed: true,
            });
        }
        let Some(live) = &self.live else {
            return Err(PipelineError::Incomplete(request.stage));
        };
        let response = live.provider.complete(request);
        self.bump(|s| *s.provider_calls.entry(request.stage).or_default() += 1);
        let entry = live
            .ledger
            .lock()
            .unwrap()
            .append(NewEntry::exchange(request, retry, &response))?;
        let mut recorded = entry.response().expect("appended an exchange");
        recorded.provider_meta = response.provider_meta;
        recorded.latency = response.latency;
        Ok(Attempted {
            response: recorded,
            replayed: false,
        })
    }

    fn stage_error(stage: Stage, subject: &str, kind: StageErrorKind) -> PipelineError {
        PipelineError::Stage(Box::new(StageError {
            stage,
            subject: subject.to_string(),
            kind,
        }))
    }

    fn item_text(&self) -> String {
        let description = self.item.description().trim();
        if description.contains(self.item.function_name()) {
            description.to_string()
        } else {
            format!("Function: {}\n\n{description}", self.item.function_name())
        }
    }

    fn render(&self, stage: Stage, subject: &str, bindings: Vec<(&str, String)>) -> Result<RenderedPrompt, PipelineError> {
        self.templates
            .get(stage)
            .render(bindings)
            .map_err(|e| Self::stage_error(stage, subject, StageErrorKind::Prompt(e)))
    }

    /// Sends `prompt`, parses the answer against `schema` and converts it,
    /// re-prompting with a repair prompt up to the repair budget.
    fn call_stage<T>(
        &self,
        subject: &str,
        prompt: &RenderedPrompt,
        schema: &StageSchema,
        convert: impl Fn(Vec<TypedRow>) -> Result<T, ParseFailure>,
    ) -> Result<T, PipelineError> {
        let stage = prompt.stage;
        let cfg = self.config;
        let budget = cfg.budget(stage);
        let mut current = prompt.clone();
        let mut last = None;
        for attempt in 1..=cfg.repair_budget {
            if current.token_estimate > budget {
                return Err(Self::stage_error(
                    stage,
                    subject,
                    StageErrorKind::BudgetExceeded {
                        estimate: current.token_estimate,
                        budget,
                    },
                ));
            }
            let request = CompletionRequest::new(
                current.text.clone(),
                cfg.model_id.clone(),
                cfg.temperature,
                cfg.max_output_tokens,
                stage,
                subject,
                attempt,
            )
            .map_err(|e| Self::stage_error(stage, subject, StageErrorKind::Invalid(e.to_string())))?;
            let response = call_with_retry(
                &cfg.retry,
                |retry| {
                    if retry > 0 {
                        self.bump(|s| s.retries += 1);
                    }
                    self.exchange(&request, retry)
                },
                std::thread::sleep,
            )?;
            let failure = match response.finish_reason {
                FinishReason::TransportError => {
                    return Err(Self::stage_error(
                        stage,
                        subject,
                        StageErrorKind::Transport(response.raw_text),
                    ))
                }
                FinishReason::Refused => ParseFailure::new(
                    FailureCode::NoTableFound,
                    "the answer was empty or declined; this is a routine engineering analysis task",
                    &response.raw_text,
                )
                .with_expected(schema.header_line()),
                FinishReason::Truncated => ParseFailure::new(
                    FailureCode::Truncated,
                    "the answer stopped at the output length limit",
                    tail(&response.raw_text, 300),
                ),
                FinishReason::Complete => {
                    match extract_table(&response.raw_text, schema).and_then(&convert) {
                        Ok(value) => return Ok(value),
                        Err(failure) => failure,
                    }
                }
            };
            tracing::debug!(%stage, subject, attempt, code = %failure.code, "answer rejected");
            if attempt < cfg.repair_budget {
                self.bump(|s| *s.repairs.entry(stage).or_default() += 1);
                current = build_repair_prompt(prompt, &failure);
            }
            last = Some(failure);
        }
        Err(Self::stage_error(
            stage,
            subject,
            StageErrorKind::RepairExhausted {
                attempts: cfg.repair_budget,
                last: last.expect("at least one attempt"),
            },
        ))
    }

    fn stages(&self) -> Result<RunOutcome, PipelineError> {
        let malfunctions = self.identify_hazards()?;
        self.record(NewEntry::stage_complete(
            Stage::Hazards,
            format!("{} malfunctions", malfunctions.len()),
        ))?;

        let geometries = self.generate_geometries()?;
        self.record(NewEntry::stage_complete(
            Stage::Geometries,
            format!("{} road geometries", geometries.len()),
        ))?;

        let mut events = self.expand_scenarios(&malfunctions, &geometries)?;
        self.record(NewEntry::stage_complete(
            Stage::Expansion,
            format!("{} hazardous events", events.len()),
        ))?;

        let ctx = RunContext::new(&malfunctions, &geometries);
        self.assess_severities(&ctx, &mut events)?;
        self.record(NewEntry::stage_complete(
            Stage::Severity,
            format!("{} events assessed", events.len()),
        ))?;

        let goals = self.formulate_goals(&ctx, &mut events)?;
        self.record(NewEntry::stage_complete(
            Stage::SafetyGoal,
            format!("{goals} safety goals"),
        ))?;

        for event in &events {
            let report = validate_event(event, &ctx);
            if !report.is_clean() {
                let detail: Vec<String> = report.violations.iter().map(|v| v.detail.clone()).collect();
                return Err(PipelineError::Invariant(detail.join("; ")));
            }
        }

        let rows = self.cluster_and_select(&ctx, &events)?;
        self.record(NewEntry::stage_complete(
            Stage::ClusterSelect,
            format!("{} representative events", rows.len()),
        ))?;
        let table = HaraTable::new(rows, self.provenance.clone());
        self.record(NewEntry::run_complete(format!("table with {} rows", table.rows().len())))?;

        Ok(RunOutcome {
            table,
            malfunctions,
            geometries,
            events,
            stats: self.stats.lock().unwrap().clone(),
        })
    }

    fn identify_hazards(&self) -> Result<Vec<Malfunction>, PipelineError> {
        let prompt = self.render(Stage::Hazards, ITEM_SUBJECT, vec![("item_definition", self.item_text())])?;
        let rows = self.call_stage(ITEM_SUBJECT, &prompt, &StageSchema::hazards(), |rows| {
            Ok(rows
                .iter()
                .map(|r| (r.guideword(0).expect("guideword column").clone(), r.text(1)))
                .collect::<Vec<(Guideword, String)>>())
        })?;
        let mut seen = HashSet::new();
        let mut malfunctions = Vec::new();
        for (guideword, statement) in rows {
            let key = statement.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            if !seen.insert(key) {
                continue;
            }
            let id = MalfunctionId::new(malfunctions.len() as u32 + 1);
            let m = Malfunction::new(id, guideword, statement)
                .map_err(|e| Self::stage_error(Stage::Hazards, ITEM_SUBJECT, StageErrorKind::Invalid(e.to_string())))?;
            malfunctions.push(m);
        }
        Ok(malfunctions)
    }

    fn generate_geometries(&self) -> Result<Vec<RoadGeometry>, PipelineError> {
        let count = self.config.geometries_requested;
        let prompt = self.render(
            Stage::Geometries,
            ITEM_SUBJECT,
            vec![
                ("item_definition", self.item_text()),
                ("geometry_count", count.to_string()),
            ],
        )?;
        self.call_stage(ITEM_SUBJECT, &prompt, &StageSchema::geometries(count), |rows| {
            rows.iter()
                .enumerate()
                .map(|(i, r)| {
                    let lanes = r.integer(0).expect("integer column");
                    let lanes = u32::try_from(lanes).ok().filter(|n| *n >= 1).ok_or_else(|| {
                        ParseFailure::new(
                            FailureCode::BadCell,
                            format!("row {}, column Lanes: {lanes} is not a positive lane count", i + 1),
                            &r.text(0),
                        )
                        .with_expected("Lanes: a whole number of at least 1")
                    })?;
                    let features = r
                        .text(3)
                        .split(';')
                        .map(str::trim)
                        .filter(|f| !matches!(f.to_ascii_lowercase().as_str(), "" | "none" | "-" | "n/a"))
                        .map(str::to_string)
                        .collect();
                    Ok(RoadGeometry::new(GeometryId::new(i as u32 + 1), lanes, r.text(1), r.text(2), features)
                        .expect("lane count checked"))
                })
                .collect()
        })
    }

    fn expand_scenarios(
        &self,
        malfunctions: &[Malfunction],
        geometries: &[RoadGeometry],
    ) -> Result<Vec<HazardousEvent>, PipelineError> {
        let pairs: Vec<(&Malfunction, &RoadGeometry)> = malfunctions
            .iter()
            .flat_map(|m| geometries.iter().map(move |g| (m, g)))
            .collect();
        let item_text = self.item_text();
        let policy = self.config.expansion_failure;
        let results = map_bounded(&pairs, self.config.concurrency_limit, policy == FailurePolicy::Abort, |(m, g)| {
            let subject = format!("{}/{}", m.id, g.id);
            let prompt = self.render(
                Stage::Expansion,
                &subject,
                vec![
                    ("item_definition", item_text.clone()),
                    ("malfunction", m.summary()),
                    ("geometry", g.summary()),
                ],
            )?;
            self.call_stage(&subject, &prompt, &StageSchema::expansion(), |rows| {
                Ok(rows
                    .iter()
                    .map(|r| Expanded {
                        narrative: r.text(0),
                        agents: parse_agents(&r.text(1)),
                        consequence: r.text(2),
                    })
                    .collect::<Vec<_>>())
            })
        });

        let mut events = Vec::new();
        for ((m, g), result) in pairs.iter().zip(results) {
            let subject = format!("{}/{}", m.id, g.id);
            let rows = match result {
                None => continue,
                Some(Ok(rows)) => rows,
                Some(Err(PipelineError::Stage(e))) if policy == FailurePolicy::Skip => {
                    self.bump(|s| s.skipped_pairs += 1);
                    self.record(NewEntry::note(
                        Some(Stage::Expansion),
                        Some(&subject),
                        format!("combination skipped: {}", e.kind),
                    ))?;
                    continue;
                }
                Some(Err(e)) => return Err(e),
            };
            for (i, row) in rows.into_iter().enumerate() {
                if row.consequence.trim().is_empty() {
                    self.bump(|s| s.dropped_rows += 1);
                    self.record(NewEntry::note(
                        Some(Stage::Expansion),
                        Some(&subject),
                        format!("row {} dropped: no hazardous event stated", i + 1),
                    ))?;
                    continue;
                }
                events.push(HazardousEvent {
                    id: EventId::new(events.len() as u32 + 1),
                    malfunction_ref: m.id,
                    scenario: DetailedScenario {
                        geometry_ref: g.id,
                        agents: row.agents,
                        narrative: row.narrative,
                    },
                    consequence: row.consequence,
                    assessment: None,
                    goal: None,
                });
            }
        }
        Ok(events)
    }

    fn event_bindings(&self, ctx: &RunContext, event: &HazardousEvent) -> Vec<(&'static str, String)> {
        let m = &ctx.malfunctions[&event.malfunction_ref];
        let g = &ctx.geometries[&event.scenario.geometry_ref];
        vec![
            ("item_definition", self.item_text()),
            ("malfunction", m.summary()),
            (
                "scenario",
                format!("Core scenario: {}\nDetailed scenario: {}", g.summary(), event.scenario.describe()),
            ),
            ("hazardous_event", event.consequence.clone()),
        ]
    }

    fn assess_severities(&self, ctx: &RunContext, events: &mut [HazardousEvent]) -> Result<(), PipelineError> {
        let results = map_bounded(events, self.config.concurrency_limit, true, |event| {
            let subject = event.id.to_string();
            let prompt = self.render(Stage::Severity, &subject, self.event_bindings(ctx, event))?;
            self.call_stage(&subject, &prompt, &StageSchema::severity(), |rows| {
                let row = &rows[0];
                SeverityAssessment::new(row.severity(0).expect("severity column"), row.text(1)).map_err(|e| {
                    ParseFailure::new(FailureCode::BadCell, e.to_string(), &row.text(1))
                })
            })
        });
        for (event, result) in events.iter_mut().zip(results) {
            match result {
                Some(Ok(assessment)) => event.assessment = Some(assessment),
                Some(Err(e)) => return Err(e),
                None => {}
            }
        }
        Ok(())
    }

    fn formulate_goals(&self, ctx: &RunContext, events: &mut [HazardousEvent]) -> Result<usize, PipelineError> {
        let gated: Vec<&HazardousEvent> = events
            .iter()
            .filter(|e| e.assessment.as_ref().is_some_and(|a| a.severity.requires_goal()))
            .collect();
        let results = map_bounded(&gated, self.config.concurrency_limit, true, |event| {
            let subject = event.id.to_string();
            let assessment = event.assessment.as_ref().expect("gated on assessment");
            let mut bindings = self.event_bindings(ctx, event);
            bindings.push(("severity", assessment.severity.to_string()));
            bindings.push(("rationale", assessment.rationale.clone()));
            let prompt = self.render(Stage::SafetyGoal, &subject, bindings)?;
            self.call_stage(&subject, &prompt, &StageSchema::safety_goal(), |rows| Ok(rows[0].text(0)))
        });
        let mut texts: BTreeMap<EventId, String> = BTreeMap::new();
        for (event, result) in gated.iter().zip(results) {
            match result {
                Some(Ok(text)) => {
                    texts.insert(event.id, text);
                }
                Some(Err(e)) => return Err(e),
                None => {}
            }
        }
        let mut next = 1;
        for event in events.iter_mut() {
            if let Some(text) = texts.remove(&event.id) {
                event.goal = Some(SafetyGoal {
                    id: GoalId::new(next),
                    event_ref: event.id,
                    text,
                });
                next += 1;
            }
        }
        Ok(next as usize - 1)
    }

    fn cluster_and_select(&self, ctx: &RunContext, events: &[HazardousEvent]) -> Result<Vec<HaraRow>, PipelineError> {
        let mut quadrants: BTreeMap<Quadrant, Vec<&HazardousEvent>> = BTreeMap::new();
        for event in events {
            let q = classify_quadrant(event, ctx).map_err(|e| PipelineError::Invariant(e.to_string()))?;
            quadrants.entry(q).or_default().push(event);
        }
        let wanted = self.config.representatives_per_quadrant;
        let mut rows = Vec::new();
        for quadrant in Quadrant::ALL {
            let Some(members) = quadrants.get(&quadrant) else { continue };
            let selected: Vec<EventId> = if members.len() <= wanted {
                members.iter().map(|e| e.id).collect()
            } else {
                self.select_representatives(ctx, quadrant, members, wanted)?
            };
            for id in selected {
                let event = members.iter().find(|e| e.id == id).expect("selection is a subset");
                rows.push(table_row(ctx, event));
            }
        }
        Ok(rows)
    }

    fn select_representatives(
        &self,
        ctx: &RunContext,
        quadrant: Quadrant,
        members: &[&HazardousEvent],
        wanted: usize,
    ) -> Result<Vec<EventId>, PipelineError> {
        let subject = quadrant.key();
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        writer.write_record(["ID", "Summary"]).expect("in-memory write");
        for event in members {
            writer
                .write_record([event.id.to_string(), event_summary(ctx, event)])
                .expect("in-memory write");
        }
        let listing = String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8");
        let prompt = self.render(
            Stage::ClusterSelect,
            subject,
            vec![
                ("item_definition", self.item_text()),
                ("category", quadrant.to_string()),
                ("selection_count", wanted.to_string()),
                ("events", listing.trim_end().to_string()),
            ],
        )?;
        let valid: Vec<EventId> = members.iter().map(|e| e.id).collect();
        let valid_list = valid.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(", ");
        self.call_stage(subject, &prompt, &StageSchema::cluster_select(wanted), |rows| {
            let mut chosen = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                let raw = row.text(0);
                let id = raw.parse::<EventId>().ok().filter(|id| valid.contains(id));
                let problem = match id {
                    None => Some(format!("row {}: {raw} is not one of the listed hazardous events", i + 1)),
                    Some(id) if chosen.contains(&id) => Some(format!("row {}: {raw} is selected twice", i + 1)),
                    Some(_) => None,
                };
                if let Some(detail) = problem {
                    return Err(ParseFailure::new(FailureCode::BadCell, detail, &raw)
                        .with_expected(format!("ID: {valid_list}")));
                }
                chosen.push(id.expect("checked above"));
            }
            chosen.sort();
            Ok(chosen)
        })
    }
}

fn tail(text: &str, max_chars: usize) -> &str {
    let count = text.chars().count();
    match text.char_indices().nth(count.saturating_sub(max_chars)) {
        Some((i, _)) => &text[i..],
        None => text,
    }
}

/// `"car: ahead, braking; cyclist: crossing"` → two agents.
fn parse_agents(text: &str) -> Vec<ScenarioAgent> {
    text.split(';')
        .map(str::trim)
        .filter(|part| !part.is_empty())
        .map(|part| match part.split_once(':') {
            Some((label, trajectory)) => ScenarioAgent {
                label: label.trim().to_string(),
                trajectory: trajectory.trim().to_string(),
            },
            None => ScenarioAgent {
                label: part.to_string(),
                trajectory: String::new(),
            },
        })
        .collect()
}

fn event_summary(ctx: &RunContext, event: &HazardousEvent) -> String {
    let m = &ctx.malfunctions[&event.malfunction_ref];
    let g = &ctx.geometries[&event.scenario.geometry_ref];
    let severity = event
        .assessment
        .as_ref()
        .map(|a| a.severity.to_string())
        .unwrap_or_default();
    format!(
        "{} | {} | {} | {} | {severity}",
        m.statement,
        g.summary(),
        event.scenario.describe(),
        event.consequence
    )
}

fn table_row(ctx: &RunContext, event: &HazardousEvent) -> HaraRow {
    let m = &ctx.malfunctions[&event.malfunction_ref];
    let g = &ctx.geometries[&event.scenario.geometry_ref];
    let assessment = event.assessment.as_ref().expect("assessed before selection");
    HaraRow {
        id: event.id,
        guideword: m.guideword.clone(),
        malfunction: m.statement.clone(),
        core_scenario: g.summary(),
        detailed_scenario: event.scenario.describe(),
        hazardous_event: event.consequence.clone(),
        severity: assessment.severity,
        severity_rationale: assessment.rationale.clone(),
        safety_goal: event.goal.as_ref().map(|g| g.text.clone()).unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agents_are_split_on_semicolons() {
        let agents = parse_agents("truck: ahead, braking; pedestrian ; cyclist:crossing from left;");
        assert_eq!(agents.len(), 3);
        assert_eq!(agents[0].label, "truck");
        assert_eq!(agents[0].trajectory, "ahead, braking");
        assert_eq!(agents[1].trajectory, "");
        assert_eq!(agents[2].trajectory, "crossing from left");
        assert!(parse_agents("  ").is_empty());
    }

    #[test]
    fn tail_keeps_last_chars() {
        assert_eq!(tail("abcdef", 3), "def");
        assert_eq!(tail("ab", 3), "ab");
        assert_eq!(tail("ééé", 2), "éé");
    }
}
