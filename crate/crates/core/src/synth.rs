//! Deterministic generator of scripted-provider fixtures.
//!
//! A [`FixturePlan`] holds hand-written, function-specific text (the
//! malfunctions, the road geometries and pools of scenario fragments and
//! outcomes). [`generate`] draws from it with a seeded ChaCha generator and
//! emits one scripted answer per pipeline call, keyed exactly as the
//! orchestrator will ask for it. Along the way it tracks, independently of
//! the orchestrator, how many events, goals and rows the run must produce;
//! tests compare the two.
//!
//! Plans can inject faults (markdown tables, prose wrapping, short tables,
//! invalid tokens, foreign ids) so that fixture runs exercise the repair
//! loop.

use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::domain::{EventId, Guideword, GuidewordKind, Quadrant, Severity};
use crate::parsing::{serialize_rows, StageSchema};
use crate::provider::{FinishReason, ProviderError, ScriptEntry, ScriptedProvider};
use crate::stage::Stage;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("fixture plan: {0}")]
    Invalid(String),
    #[error("fixture plan: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedMalfunction {
    pub guideword: String,
    pub statement: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedGeometry {
    pub lanes: u32,
    pub shape: String,
    #[serde(default)]
    pub slope: String,
    #[serde(default)]
    pub features: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedOutcome {
    pub consequence: String,
    pub severity: String,
    pub rationale: String,
    #[serde(default)]
    pub goal: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Faults {
    /// Repeat one malfunction with different casing and spacing.
    pub hazards_duplicate: bool,
    /// First geometries answer is two rows short.
    pub geometries_short_first: bool,
    /// Share of answers formatted as markdown pipe tables.
    pub markdown_rate: f64,
    /// Share of answers wrapped in prose and a code fence.
    pub prose_rate: f64,
    /// Share of severity calls whose first answer uses an invalid token.
    pub severity_bad_token_rate: f64,
    /// Share of expansion rows without a stated hazardous event.
    pub empty_consequence_rate: f64,
    /// Share of expansion calls whose first answer is cut off.
    pub truncated_rate: f64,
    /// First selection of the first clustered quadrant names a foreign id.
    pub cluster_foreign_first: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixturePlan {
    pub seed: u64,
    #[serde(default = "default_geometries")]
    pub geometries_requested: usize,
    #[serde(default = "default_representatives")]
    pub representatives_per_quadrant: usize,
    /// Inclusive range of detailed scenarios per malfunction × geometry.
    pub events_per_pair: [usize; 2],
    pub malfunctions: Vec<PlannedMalfunction>,
    pub geometries: Vec<PlannedGeometry>,
    pub narratives: Vec<String>,
    pub agents: Vec<String>,
    pub outcomes: Vec<PlannedOutcome>,
    #[serde(default)]
    pub faults: Faults,
}

fn default_geometries() -> usize {
    20
}

fn default_representatives() -> usize {
    5
}

impl FixturePlan {
    pub fn from_toml(text: &str) -> Result<Self, PlanError> {
        let plan: Self = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::Invalid(m));
        if self.malfunctions.is_empty() {
            return bad("no malfunctions".into());
        }
        if self.geometries.len() < self.geometries_requested || self.geometries_requested == 0 {
            return bad(format!(
                "{} geometries listed, {} requested",
                self.geometries.len(),
                self.geometries_requested
            ));
        }
        if self.narratives.is_empty() || self.agents.is_empty() || self.outcomes.is_empty() {
            return bad("narrative, agent and outcome pools must not be empty".into());
        }
        if self.events_per_pair[0] > self.events_per_pair[1] {
            return bad("events_per_pair must be [min, max]".into());
        }
        for m in &self.malfunctions {
            m.guideword
                .parse::<Guideword>()
                .map_err(|e| PlanError::Invalid(format!("{:?}: {e}", m.guideword)))?;
        }
        for o in &self.outcomes {
            let s: Severity = o
                .severity
                .parse()
                .map_err(|_| PlanError::Invalid(format!("bad severity {:?}", o.severity)))?;
            if s.requires_goal() == o.goal.trim().is_empty() {
                return bad(format!("outcome {:?}: goal must be given exactly when severity > S0", o.consequence));
            }
        }
        for g in &self.geometries {
            if g.lanes == 0 {
                return bad(format!("geometry {:?} has no lanes", g.shape));
            }
        }
        let texts = self
            .malfunctions
            .iter()
            .map(|m| &m.statement)
            .chain(&self.narratives)
            .chain(&self.agents)
            .chain(self.outcomes.iter().flat_map(|o| [&o.consequence, &o.rationale, &o.goal]));
        for t in texts {
            if t.contains(['|', '\n']) {
                return bad(format!("text {t:?} must not contain '|' or line breaks"));
            }
        }
        Ok(())
    }
}

/// Counts the orchestrator must reproduce for the generated fixtures.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub malfunctions: usize,
    pub geometries: usize,
    pub events: usize,
    pub dropped_rows: usize,
    pub severity_counts: BTreeMap<Severity, usize>,
    pub goals: usize,
    pub quadrant_sizes: BTreeMap<Quadrant, usize>,
    /// Sum over quadrants of min(size, representatives).
    pub expected_rows: usize,
    /// Repair prompts the faults will trigger, per stage.
    pub repairs: BTreeMap<Stage, usize>,
}

pub struct Synthesized {
    pub provider: ScriptedProvider,
    pub summary: SynthSummary,
}

struct Gen<'p> {
    plan: &'p FixturePlan,
    rng: ChaCha8Rng,
    entries: Vec<ScriptEntry>,
    summary: SynthSummary,
}

impl Gen<'_> {
    fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.rng.random_bool(p.min(1.0))
    }

    /// Formats rows as the model might: plain CSV, a markdown table, or
    /// either one wrapped in prose.
    fn dress(&mut self, schema: &StageSchema, rows: &[Vec<String>]) -> String {
        let markdown = self.chance(self.plan.faults.markdown_rate);
        let prose = self.chance(self.plan.faults.prose_rate);
        let table = if markdown {
            let header: Vec<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
            let mut out = format!("| {} |\n|{}|\n", header.join(" | "), vec!["---"; header.len()].join("|"));
            for row in rows {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            out
        } else {
            serialize_rows(schema, rows)
        };
        if prose {
            format!("Here is the requested table.\n\n```csv\n{table}```\n\nLet me know if you need further detail.")
        } else {
            table
        }
    }

    fn push(&mut self, stage: Stage, subject: &str, attempt: u32, response: String) {
        self.entries.push(ScriptEntry::new(stage, Some(subject), attempt, response));
    }

    fn repair(&mut self, stage: Stage) {
        *self.summary.repairs.entry(stage).or_default() += 1;
    }
}

/// Generates scripted answers for every call a run over `plan` will make.
pub fn generate(plan: &FixturePlan) -> Result<Synthesized, PlanError> {
    plan.validate()?;
    let mut g = Gen {
        plan,
        rng: ChaCha8Rng::seed_from_u64(plan.seed),
        entries: Vec::new(),
        summary: SynthSummary::default(),
    };
    let faults = &plan.faults;

    // stage 1
    let schema = StageSchema::hazards();
    let mut rows: Vec<Vec<String>> = plan
        .malfunctions
        .iter()
        .map(|m| vec![m.guideword.clone(), m.statement.clone()])
        .collect();
    if faults.hazards_duplicate {
        let first = &plan.malfunctions[0];
        let shouted = format!("  {}  ", first.statement.to_uppercase().replace(' ', "  "));
        rows.push(vec![first.guideword.clone(), shouted]);
    }
    let answer = g.dress(&schema, &rows);
    g.push(Stage::Hazards, "item", 1, answer);
    let kinds: Vec<GuidewordKind> = plan
        .malfunctions
        .iter()
        .map(|m| m.guideword.parse::<Guideword>().expect("validated").kind)
        .collect();
    g.summary.malfunctions = plan.malfunctions.len();

    // stage 2
    let n = plan.geometries_requested;
    let schema = StageSchema::geometries(n);
    let rows: Vec<Vec<String>> = plan.geometries[..n]
        .iter()
        .map(|geo| {
            let features = if geo.features.is_empty() { "none".to_string() } else { geo.features.clone() };
            vec![geo.lanes.to_string(), geo.shape.clone(), geo.slope.clone(), features]
        })
        .collect();
    let mut attempt = 1;
    if faults.geometries_short_first && n > 2 {
        let short = g.dress(&schema, &rows[..n - 2]);
        g.push(Stage::Geometries, "item", 1, short);
        g.repair(Stage::Geometries);
        attempt = 2;
    }
    let answer = g.dress(&schema, &rows);
    g.push(Stage::Geometries, "item", attempt, answer);
    g.summary.geometries = n;

    // stage 3: ids follow malfunction, geometry, row order
    let schema = StageSchema::expansion();
    let mut events: Vec<(EventId, GuidewordKind, usize)> = Vec::new();
    for (mi, kind) in kinds.iter().enumerate() {
        for (gi, geo) in plan.geometries[..n].iter().enumerate() {
            let subject = format!("M{:02}/G{:02}", mi + 1, gi + 1);
            let [lo, hi] = plan.events_per_pair;
            let count = g.rng.random_range(lo..=hi);
            let mut rows = Vec::with_capacity(count);
            for _ in 0..count {
                let narrative = plan.narratives.choose(&mut g.rng).expect("non-empty").replace("{shape}", &geo.shape);
                let agent_count = g.rng.random_range(1..=2.min(plan.agents.len()));
                let agents = index::sample(&mut g.rng, plan.agents.len(), agent_count)
                    .into_iter()
                    .map(|i| plan.agents[i].clone())
                    .collect::<Vec<_>>()
                    .join("; ");
                let outcome = g.rng.random_range(0..plan.outcomes.len());
                if g.chance(faults.empty_consequence_rate) {
                    rows.push(vec![narrative, agents, String::new()]);
                    g.summary.dropped_rows += 1;
                    continue;
                }
                rows.push(vec![narrative, agents, plan.outcomes[outcome].consequence.clone()]);
                let id = EventId::new(events.len() as u32 + 1);
                events.push((id, *kind, outcome));
            }
            let mut attempt = 1;
            if !rows.is_empty() && g.chance(faults.truncated_rate) {
                let full = serialize_rows(&schema, &rows);
                let cut = &full[..full.len() * 2 / 3];
                let cut = cut.char_indices().last().map(|(i, _)| &cut[..i]).unwrap_or(cut);
                g.entries.push(
                    ScriptEntry::new(Stage::Expansion, Some(&subject), 1, cut).finishing(FinishReason::Truncated),
                );
                g.repair(Stage::Expansion);
                attempt = 2;
            }
            let answer = g.dress(&schema, &rows);
            g.push(Stage::Expansion, &subject, attempt, answer);
        }
    }
    g.summary.events = events.len();

    // stage 4
    let schema = StageSchema::severity();
    for (id, _, outcome) in &events {
        let o = &plan.outcomes[*outcome];
        let subject = id.to_string();
        let mut attempt = 1;
        if g.chance(faults.severity_bad_token_rate) {
            let token = ["S4", "moderate", "S2-S3", "high"].choose(&mut g.rng).expect("non-empty");
            let wrong = g.dress(&schema, &[vec![token.to_string(), o.rationale.clone()]]);
            g.push(Stage::Severity, &subject, 1, wrong);
            g.repair(Stage::Severity);
            attempt = 2;
        }
        let answer = g.dress(&schema, &[vec![o.severity.clone(), o.rationale.clone()]]);
        g.push(Stage::Severity, &subject, attempt, answer);
        let severity: Severity = o.severity.parse().expect("validated");
        *g.summary.severity_counts.entry(severity).or_default() += 1;
    }

    // stage 5, only where the severity calls for a goal
    let schema = StageSchema::safety_goal();
    for (id, _, outcome) in &events {
        let o = &plan.outcomes[*outcome];
        let severity: Severity = o.severity.parse().expect("validated");
        if severity.requires_goal() {
            let answer = g.dress(&schema, &[vec![o.goal.clone()]]);
            g.push(Stage::SafetyGoal, &id.to_string(), 1, answer);
            g.summary.goals += 1;
        }
    }

    // stage 6
    let wanted = plan.representatives_per_quadrant;
    let mut quadrants: BTreeMap<Quadrant, Vec<EventId>> = BTreeMap::new();
    for (id, kind, outcome) in &events {
        let severity: Severity = plan.outcomes[*outcome].severity.parse().expect("validated");
        quadrants.entry(Quadrant::of(*kind, severity)).or_default().push(*id);
    }
    let schema = StageSchema::cluster_select(wanted);
    let mut foreign_pending = faults.cluster_foreign_first;
    let mut any_call = false;
    for (quadrant, ids) in &quadrants {
        g.summary.quadrant_sizes.insert(*quadrant, ids.len());
        g.summary.expected_rows += ids.len().min(wanted);
        if ids.len() <= wanted {
            continue;
        }
        any_call = true;
        let picks: Vec<Vec<String>> = index::sample(&mut g.rng, ids.len(), wanted)
            .into_iter()
            .map(|i| vec![ids[i].to_string()])
            .collect();
        let mut attempt = 1;
        if foreign_pending {
            if let Some(foreign) = events.iter().map(|e| e.0).find(|id| !ids.contains(id)) {
                let mut wrong = picks.clone();
                wrong[0] = vec![foreign.to_string()];
                let answer = g.dress(&schema, &wrong);
                g.push(Stage::ClusterSelect, quadrant.key(), 1, answer);
                g.repair(Stage::ClusterSelect);
                attempt = 2;
                foreign_pending = false;
            }
        }
        let answer = g.dress(&schema, &picks);
        g.push(Stage::ClusterSelect, quadrant.key(), attempt, answer);
    }
    if !any_call {
        // never asked for; keeps the fixture set complete for probing
        g.entries.push(ScriptEntry::new(Stage::ClusterSelect, None, 1, "ID\n"));
    }

    let provider = ScriptedProvider::new(g.entries)?;
    Ok(Synthesized {
        provider,
        summary: g.summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_plan() -> FixturePlan {
        FixturePlan::from_toml(
            r#"
seed = 7
geometries_requested = 3
representatives_per_quadrant = 2
events_per_pair = [1, 2]
narratives = ["Ego drives on a {shape} road"]
agents = ["truck: ahead, braking", "cyclist: crossing"]
[[malfunctions]]
guideword = "Omission"
statement = "No output when needed"
[[malfunctions]]
guideword = "Commission (too late)"
statement = "Output too late"
[[geometries]]
lanes = 1
shape = "straight"
[[geometries]]
lanes = 2
shape = "curve"
slope = "downhill"
features = "bridge"
[[geometries]]
lanes = 3
shape = "straight"
[[outcomes]]
consequence = "Minor scrape"
severity = "S0"
rationale = "Low speed"
[[outcomes]]
consequence = "Collision with truck"
severity = "S3"
rationale = "High speed, heavy partner"
goal = "Avoid collisions caused by missing output"
"#,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_fixtures() {
        let a = generate(&small_plan()).unwrap();
        let b = generate(&small_plan()).unwrap();
        assert_eq!(a.provider.sorted_entries(), b.provider.sorted_entries());
        assert_eq!(a.summary, b.summary);
        let mut other = small_plan();
        other.seed = 8;
        let c = generate(&other).unwrap();
        assert_ne!(a.provider.sorted_entries(), c.provider.sorted_entries());
    }

    #[test]
    fn summary_is_consistent() {
        let s = generate(&small_plan()).unwrap().summary;
        assert_eq!(s.malfunctions, 2);
        assert_eq!(s.geometries, 3);
        assert!((6..=12).contains(&s.events));
        assert_eq!(s.severity_counts.values().sum::<usize>(), s.events);
        assert_eq!(s.goals, s.severity_counts.get(&Severity::S3).copied().unwrap_or(0));
        assert_eq!(s.quadrant_sizes.values().sum::<usize>(), s.events);
    }

    #[test]
    fn plan_validation() {
        let mut p = small_plan();
        p.outcomes[0].goal = "should not be here".into();
        assert!(p.validate().is_err());
        let mut p = small_plan();
        p.geometries_requested = 4;
        assert!(p.validate().is_err());
        let mut p = small_plan();
        p.narratives[0] = "a | b".into();
        assert!(p.validate().is_err());
        assert!(FixturePlan::from_toml("seed = 1\nunknown = 2").is_err());
    }
}
