//! The exported HARA table: one row per selected hazardous event.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    duplicate_ids, EventId, Guideword, Quadrant, Severity, ValidationReport, ViolationCode,
};

/// Bit-exact header of the exported CSV.
pub const CSV_HEADER: [&str; 9] = [
    "ID",
    "Guideword",
    "Malfunction",
    "Core Scenario",
    "Detailed Scenario",
    "Hazardous Event",
    "Severity",
    "Severity Rationale",
    "Safety Goal",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaraRow {
    pub id: EventId,
    pub guideword: Guideword,
    pub malfunction: String,
    pub core_scenario: String,
    pub detailed_scenario: String,
    pub hazardous_event: String,
    pub severity: Severity,
    pub severity_rationale: String,
    /// Empty exactly for S0 rows.
    pub safety_goal: String,
}

impl HaraRow {
    pub fn quadrant(&self) -> Quadrant {
        Quadrant::of(self.guideword.kind, self.severity)
    }

    fn record(&self) -> [String; 9] {
        [
            self.id.to_string(),
            self.guideword.to_string(),
            self.malfunction.clone(),
            self.core_scenario.clone(),
            self.detailed_scenario.clone(),
            self.hazardous_event.clone(),
            self.severity.to_string(),
            self.severity_rationale.clone(),
            self.safety_goal.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub bundle_version: String,
    pub model_id: String,
    pub run_timestamp: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HaraTable {
    rows: Vec<HaraRow>,
    pub provenance: Provenance,
}

impl HaraTable {
    /// Sorts rows by (quadrant, event id).
    pub fn new(mut rows: Vec<HaraRow>, provenance: Provenance) -> Self {
        rows.sort_by_key(|r| (r.quadrant(), r.id));
        Self { rows, provenance }
    }

    pub fn rows(&self) -> &[HaraRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    /// Row count per quadrant, in quadrant order.
    pub fn quadrant_counts(&self) -> BTreeMap<Quadrant, usize> {
        let mut counts = BTreeMap::new();
        for row in &self.rows {
            *counts.entry(row.quadrant()).or_default() += 1;
        }
        counts
    }
}

/// Writes rows under [`CSV_HEADER`] with LF line endings.
pub fn rows_to_csv(rows: &[HaraRow]) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer.write_record(CSV_HEADER).expect("in-memory write");
    for row in rows {
        writer.write_record(row.record()).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("header is {found:?}, expected {expected:?}")]
    Header { found: String, expected: String },
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
}

/// Result of checking an exported table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableCheck {
    pub rows: usize,
    pub report: ValidationReport,
}

/// Re-parses an exported CSV and checks every row-level and table-level
/// invariant. Structural problems (wrong header, ragged rows, invalid
/// UTF-8) are errors; invariant violations are reported as data.
pub fn validate_csv(bytes: &[u8]) -> Result<TableCheck, TableError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let header = reader.headers().map_err(|e| TableError::Malformed {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.iter().ne(CSV_HEADER) {
        return Err(TableError::Header {
            found: header.iter().collect::<Vec<_>>().join(","),
            expected: CSV_HEADER.join(","),
        });
    }

    let mut report = ValidationReport::default();
    let mut ids = Vec::new();
    let mut last_key: Option<(Quadrant, EventId)> = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| TableError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        rows += 1;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cell = |i: usize| record.get(i).unwrap_or_default().trim();
        let label = format!("line {line}");

        let id = match cell(0).parse::<EventId>() {
            Ok(id) => {
                ids.push(id);
                Some(id)
            }
            Err(_) => {
                report.push(ViolationCode::BadId, format!("{label}: {:?} is not an event id", cell(0)));
                None
            }
        };
        let label = id.map(|i| i.to_string()).unwrap_or(label);
        let guideword = cell(1).parse::<Guideword>().ok();
        if guideword.is_none() {
            report.push(ViolationCode::BadGuideword, format!("{label}: {:?}", cell(1)));
        }
        let severity = cell(6).parse::<Severity>().ok();
        if severity.is_none() {
            report.push(ViolationCode::BadSeverity, format!("{label}: {:?}", cell(6)));
        }
        for (i, name) in CSV_HEADER.iter().enumerate().take(8).skip(2) {
            if i != 6 && cell(i).is_empty() {
                report.push(ViolationCode::EmptyField, format!("{label}: empty {name}"));
            }
        }
        if let Some(severity) = severity {
            let has_goal = !cell(8).is_empty();
            if severity.requires_goal() && !has_goal {
                report.push(
                    ViolationCode::GoalMissingForPositiveSeverity,
                    format!("{label}: severity {severity} without safety goal"),
                );
            }
            if !severity.requires_goal() && has_goal {
                report.push(ViolationCode::GoalPresentForS0, format!("{label}: safety goal on an S0 row"));
            }
        }
        if let (Some(id), Some(g), Some(s)) = (id, &guideword, severity) {
            let key = (Quadrant::of(g.kind, s), id);
            if last_key.is_some_and(|prev| prev >= key) {
                report.push(
                    ViolationCode::RowOrder,
                    format!("{label}: rows must be ordered by quadrant, then id"),
                );
            }
            last_key = Some(key);
        }
    }
    report.extend(duplicate_ids(ids));
    Ok(TableCheck { rows, report })
}
