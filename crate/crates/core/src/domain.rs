//! HARA domain model: item definition, malfunctions, road geometries,
//! hazardous events with their severity assessment and safety goal, and the
//! rule-based quadrant used to cluster events before representative
//! selection.
//!
//! Every type here is an immutable value once built. Identifiers are assigned
//! by the orchestrator, never by the model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

fn invalid(what: &'static str, reason: impl Into<String>) -> DomainError {
    DomainError::Invalid {
        what,
        reason: reason.into(),
    }
}

macro_rules! entity_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal, $width:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(into = "String", try_from = "String")]
        pub struct $name(u32);

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            /// Sequence numbers start at 1.
            pub fn new(n: u32) -> Self {
                assert!(n >= 1, "identifier sequence starts at 1");
                Self(n)
            }

            pub fn number(self) -> u32 {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{:0width$}", $prefix, self.0, width = $width)
            }
        }

        impl FromStr for $name {
            type Err = DomainError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let s = s.trim();
                let digits = s
                    .get(..$prefix.len())
                    .filter(|p| p.eq_ignore_ascii_case($prefix))
                    .map(|_| &s[$prefix.len()..])
                    .ok_or_else(|| invalid("identifier", format!("{s:?} lacks prefix {}", $prefix)))?;
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(invalid("identifier", format!("{s:?} is not {}<digits>", $prefix)));
                }
                match digits.parse::<u32>() {
                    Ok(n) if n >= 1 => Ok(Self(n)),
                    _ => Err(invalid("identifier", format!("{s:?} is out of range"))),
                }
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.to_string()
            }
        }

        impl TryFrom<String> for $name {
            type Error = DomainError;

            fn try_from(s: String) -> Result<Self, Self::Error> {
                s.parse()
            }
        }
    };
}

entity_id!(
    /// `M01`, `M02`, ...
    MalfunctionId, "M", 2
);
entity_id!(
    /// `G01`, `G02`, ...
    GeometryId, "G", 2
);
entity_id!(
    /// `HE001`, `HE002`, ...
    EventId, "HE", 3
);
entity_id!(
    /// `SG001`, `SG002`, ...
    GoalId, "SG", 3
);

/// The sole functional input to a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDefinition {
    function_name: String,
    description: String,
}

impl ItemDefinition {
    pub fn new(
        function_name: impl Into<String>,
        description: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let function_name = function_name.into().trim().to_string();
        let description = description.into();
        if description.trim().is_empty() {
            return Err(invalid("item definition", "description is empty"));
        }
        if function_name.is_empty() {
            return Err(invalid("item definition", "function name is empty"));
        }
        if let Some(c) = function_name
            .chars()
            .find(|c| matches!(c, '/' | '\\' | ',' | '"' | '\n' | '\r'))
        {
            return Err(invalid(
                "item definition",
                format!("function name contains forbidden character {c:?}"),
            ));
        }
        Ok(Self {
            function_name,
            description,
        })
    }

    /// Builds an item definition from a markdown document. The first level-1
    /// heading names the function; otherwise `fallback_name` is used. The whole
    /// document is kept as the description.
    pub fn from_markdown(text: &str, fallback_name: &str) -> Result<Self, DomainError> {
        let name = text
            .lines()
            .find_map(|line| line.strip_prefix("# "))
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .unwrap_or(fallback_name);
        Self::new(name, text.replace("\r\n", "\n"))
    }

    pub fn function_name(&self) -> &str {
        &self.function_name
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GuidewordKind {
    Omission,
    Commission,
}

impl GuidewordKind {
    pub const ALL: [GuidewordKind; 2] = [GuidewordKind::Omission, GuidewordKind::Commission];

    pub fn as_str(self) -> &'static str {
        match self {
            GuidewordKind::Omission => "Omission",
            GuidewordKind::Commission => "Commission",
        }
    }
}

impl fmt::Display for GuidewordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A primary guideword plus an optional refinement such as "too late".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Guideword {
    pub kind: GuidewordKind,
    pub qualifier: Option<String>,
}

impl Guideword {
    pub fn new(kind: GuidewordKind, qualifier: Option<String>) -> Self {
        let qualifier = qualifier
            .map(|q| q.trim().to_string())
            .filter(|q| !q.is_empty());
        Self { kind, qualifier }
    }
}

impl fmt::Display for Guideword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.qualifier {
            Some(q) => write!(f, "{} ({q})", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

impl FromStr for Guideword {
    type Err = DomainError;

    /// Accepts `Omission`, `Commission`, and either followed by a qualifier,
    /// e.g. `Commission (too much)` or `Omission - too late`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let lower = trimmed.to_ascii_lowercase();
        let (kind, rest) = GuidewordKind::ALL
            .iter()
            .find_map(|kind| {
                let word = kind.as_str();
                lower
                    .starts_with(&word.to_ascii_lowercase())
                    .then(|| (*kind, &trimmed[word.len()..]))
            })
            .ok_or_else(|| {
                invalid(
                    "guideword",
                    format!("{trimmed:?} is neither Omission nor Commission"),
                )
            })?;
        // "Omissions" or "Commissioning" are not guidewords.
        if rest.chars().next().is_some_and(|c| c.is_alphanumeric()) {
            return Err(invalid(
                "guideword",
                format!("{trimmed:?} is neither Omission nor Commission"),
            ));
        }
        let qualifier = rest
            .trim()
            .trim_start_matches(['-', ':', '/', '(', '–'])
            .trim_end_matches(')')
            .trim();
        Ok(Guideword::new(kind, Some(qualifier.to_string())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Malfunction {
    pub id: MalfunctionId,
    pub guideword: Guideword,
    pub statement: String,
}

impl Malfunction {
    pub fn new(
        id: MalfunctionId,
        guideword: Guideword,
        statement: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let statement = statement.into().trim().to_string();
        if statement.is_empty() {
            return Err(invalid("malfunction", "statement is empty"));
        }
        Ok(Self {
            id,
            guideword,
            statement,
        })
    }

    pub fn summary(&self) -> String {
        format!("{}: {}", self.guideword, self.statement)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub id: GeometryId,
    pub lanes: u32,
    pub shape: String,
    pub slope: String,
    pub features: Vec<String>,
}

impl RoadGeometry {
    pub fn new(
        id: GeometryId,
        lanes: u32,
        shape: impl Into<String>,
        slope: impl Into<String>,
        features: Vec<String>,
    ) -> Result<Self, DomainError> {
        if lanes < 1 {
            return Err(invalid("road geometry", "lane count must be at least 1"));
        }
        Ok(Self {
            id,
            lanes,
            shape: shape.into().trim().to_string(),
            slope: slope.into().trim().to_string(),
            features: features
                .into_iter()
                .map(|f| f.trim().to_string())
                .filter(|f| !f.is_empty())
                .collect(),
        })
    }

    /// One-line description used in prompts and the exported table.
    pub fn summary(&self) -> String {
        let lanes = if self.lanes == 1 {
            "1 lane".to_string()
        } else {
            format!("{} lanes", self.lanes)
        };
        let mut parts = vec![lanes, self.shape.clone(), self.slope.clone()];
        parts.retain(|p| !p.is_empty());
        let mut text = parts.join(", ");
        if !self.features.is_empty() {
            text.push_str("; features: ");
            text.push_str(&self.features.join(", "));
        }
        text
    }
}

/// An object or agent in a detailed scenario and how it moves relative to the
/// ego vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioAgent {
    pub label: String,
    pub trajectory: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetailedScenario {
    pub geometry_ref: GeometryId,
    pub agents: Vec<ScenarioAgent>,
    pub narrative: String,
}

impl DetailedScenario {
    /// Narrative followed by the agent list, as shown to reviewers.
    pub fn describe(&self) -> String {
        if self.agents.is_empty() {
            return self.narrative.clone();
        }
        let agents = self
            .agents
            .iter()
            .map(|a| {
                if a.trajectory.is_empty() {
                    a.label.clone()
                } else {
                    format!("{} ({})", a.label, a.trajectory)
                }
            })
            .collect::<Vec<_>>()
            .join("; ");
        let narrative = self.narrative.trim_end();
        let stop = if narrative.ends_with(['.', '!', '?']) { "" } else { "." };
        format!("{narrative}{stop} Agents: {agents}.")
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Severity {
    S0,
    S1,
    S2,
    S3,
}

impl Severity {
    pub const ALL: [Severity; 4] = [Severity::S0, Severity::S1, Severity::S2, Severity::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::S0 => "S0",
            Severity::S1 => "S1",
            Severity::S2 => "S2",
            Severity::S3 => "S3",
        }
    }

    pub fn band(self) -> SeverityBand {
        match self {
            Severity::S0 | Severity::S1 => SeverityBand::Low,
            Severity::S2 | Severity::S3 => SeverityBand::High,
        }
    }

    /// Only events above S0 receive a safety goal.
    pub fn requires_goal(self) -> bool {
        self > Severity::S0
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = DomainError;

    /// Exactly `S0`..`S3` after trimming; nothing else is coerced.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Severity::ALL
            .iter()
            .copied()
            .find(|sev| sev.as_str() == s.trim())
            .ok_or_else(|| invalid("severity", format!("{:?} is not one of S0, S1, S2, S3", s.trim())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityAssessment {
    pub severity: Severity,
    pub rationale: String,
}

impl SeverityAssessment {
    pub fn new(severity: Severity, rationale: impl Into<String>) -> Result<Self, DomainError> {
        let rationale = rationale.into().trim().to_string();
        if rationale.is_empty() {
            return Err(invalid("severity assessment", "rationale is empty"));
        }
        Ok(Self {
            severity,
            rationale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyGoal {
    pub id: GoalId,
    pub event_ref: EventId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HazardousEvent {
    pub id: EventId,
    pub malfunction_ref: MalfunctionId,
    pub scenario: DetailedScenario,
    pub consequence: String,
    pub assessment: Option<SeverityAssessment>,
    pub goal: Option<SafetyGoal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeverityBand {
    /// S0/S1
    Low,
    /// S2/S3
    High,
}

impl SeverityBand {
    pub fn as_str(self) -> &'static str {
        match self {
            SeverityBand::Low => "S0/S1",
            SeverityBand::High => "S2/S3",
        }
    }
}

/// One of the four clusters: guideword kind crossed with severity band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Quadrant {
    pub guideword_kind: GuidewordKind,
    pub severity_band: SeverityBand,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::new(GuidewordKind::Omission, SeverityBand::Low),
        Quadrant::new(GuidewordKind::Omission, SeverityBand::High),
        Quadrant::new(GuidewordKind::Commission, SeverityBand::Low),
        Quadrant::new(GuidewordKind::Commission, SeverityBand::High),
    ];

    pub const fn new(guideword_kind: GuidewordKind, severity_band: SeverityBand) -> Self {
        Self {
            guideword_kind,
            severity_band,
        }
    }

    pub fn of(kind: GuidewordKind, severity: Severity) -> Self {
        Self::new(kind, severity.band())
    }

    /// Stable key used in ledger subjects and fixture indexes, e.g. `omission-high`.
    pub fn key(self) -> &'static str {
        match (self.guideword_kind, self.severity_band) {
            (GuidewordKind::Omission, SeverityBand::Low) => "omission-low",
            (GuidewordKind::Omission, SeverityBand::High) => "omission-high",
            (GuidewordKind::Commission, SeverityBand::Low) => "commission-low",
            (GuidewordKind::Commission, SeverityBand::High) => "commission-high",
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}", self.guideword_kind, self.severity_band.as_str())
    }
}

/// Identifier tables of a run, used to resolve references.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub malfunctions: BTreeMap<MalfunctionId, Malfunction>,
    pub geometries: BTreeMap<GeometryId, RoadGeometry>,
}

impl RunContext {
    pub fn new(malfunctions: &[Malfunction], geometries: &[RoadGeometry]) -> Self {
        Self {
            malfunctions: malfunctions.iter().map(|m| (m.id, m.clone())).collect(),
            geometries: geometries.iter().map(|g| (g.id, g.clone())).collect(),
        }
    }
}

pub fn classify_quadrant(event: &HazardousEvent, ctx: &RunContext) -> Result<Quadrant, DomainError> {
    let malfunction = ctx.malfunctions.get(&event.malfunction_ref).ok_or_else(|| {
        DomainError::Integrity(format!(
            "event {} references unknown malfunction {}",
            event.id, event.malfunction_ref
        ))
    })?;
    let assessment = event.assessment.as_ref().ok_or_else(|| {
        DomainError::Precondition(format!("event {} has no severity assessment", event.id))
    })?;
    Ok(Quadrant::of(malfunction.guideword.kind, assessment.severity))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationCode {
    GoalMissingForPositiveSeverity,
    GoalPresentForS0,
    GoalWithoutAssessment,
    GoalEventMismatch,
    UnresolvedMalfunction,
    UnresolvedGeometry,
    EmptyField,
    DuplicateId,
    BadGuideword,
    BadSeverity,
    BadId,
    RowOrder,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::GoalMissingForPositiveSeverity => "goal-missing-for-S>0",
            ViolationCode::GoalPresentForS0 => "goal-present-for-S0",
            ViolationCode::GoalWithoutAssessment => "goal-without-assessment",
            ViolationCode::GoalEventMismatch => "goal-event-mismatch",
            ViolationCode::UnresolvedMalfunction => "unresolved-malfunction",
            ViolationCode::UnresolvedGeometry => "unresolved-geometry",
            ViolationCode::EmptyField => "empty-field",
            ViolationCode::DuplicateId => "duplicate-id",
            ViolationCode::BadGuideword => "bad-guideword",
            ViolationCode::BadSeverity => "bad-severity",
            ViolationCode::BadId => "bad-id",
            ViolationCode::RowOrder => "row-order",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, code: ViolationCode, detail: impl Into<String>) {
        self.violations.push(Violation {
            code,
            detail: detail.into(),
        });
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }
}

/// Checks referential and presence invariants of one event. Violations are
/// returned as data.
pub fn validate_event(event: &HazardousEvent, ctx: &RunContext) -> ValidationReport {
    let mut report = ValidationReport::default();
    let id = event.id;
    if !ctx.malfunctions.contains_key(&event.malfunction_ref) {
        report.push(
            ViolationCode::UnresolvedMalfunction,
            format!("{id}: malfunction {} not in run", event.malfunction_ref),
        );
    }
    if !ctx.geometries.contains_key(&event.scenario.geometry_ref) {
        report.push(
            ViolationCode::UnresolvedGeometry,
            format!("{id}: geometry {} not in run", event.scenario.geometry_ref),
        );
    }
    if event.scenario.narrative.trim().is_empty() {
        report.push(ViolationCode::EmptyField, format!("{id}: empty scenario narrative"));
    }
    if event.consequence.trim().is_empty() {
        report.push(ViolationCode::EmptyField, format!("{id}: empty consequence"));
    }
    if let Some(a) = &event.assessment {
        if a.rationale.trim().is_empty() {
            report.push(ViolationCode::EmptyField, format!("{id}: empty severity rationale"));
        }
    }
    if let Some(goal) = &event.goal {
        if goal.text.trim().is_empty() {
            report.push(ViolationCode::EmptyField, format!("{id}: empty safety goal text"));
        }
        if goal.event_ref != id {
            report.push(
                ViolationCode::GoalEventMismatch,
                format!("{id}: goal {} refers to {}", goal.id, goal.event_ref),
            );
        }
    }
    match (&event.assessment, &event.goal) {
        (Some(a), None) if a.severity.requires_goal() => report.push(
            ViolationCode::GoalMissingForPositiveSeverity,
            format!("{id}: severity {} without safety goal", a.severity),
        ),
        (Some(a), Some(_)) if !a.severity.requires_goal() => report.push(
            ViolationCode::GoalPresentForS0,
            format!("{id}: safety goal on an S0 event"),
        ),
        (None, Some(_)) => report.push(
            ViolationCode::GoalWithoutAssessment,
            format!("{id}: safety goal without severity assessment"),
        ),
        _ => {}
    }
    report
}

/// Reports ids that occur more than once.
pub fn duplicate_ids<T: Ord + Copy + fmt::Display>(ids: impl IntoIterator<Item = T>) -> ValidationReport {
    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    let mut report = ValidationReport::default();
    for id in ids {
        if !seen.insert(id) && reported.insert(id) {
            report.push(ViolationCode::DuplicateId, format!("{id} occurs more than once"));
        }
    }
    report
}
