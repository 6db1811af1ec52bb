use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The six prompt stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Hazards,
    Geometries,
    Expansion,
    Severity,
    SafetyGoal,
    ClusterSelect,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Hazards,
        Stage::Geometries,
        Stage::Expansion,
        Stage::Severity,
        Stage::SafetyGoal,
        Stage::ClusterSelect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Hazards => "Hazards",
            Stage::Geometries => "Geometries",
            Stage::Expansion => "Expansion",
            Stage::Severity => "Severity",
            Stage::SafetyGoal => "SafetyGoal",
            Stage::ClusterSelect => "ClusterSelect",
        }
    }

    /// 1-based position in the pipeline.
    pub fn ordinal(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).unwrap() + 1
    }

    pub fn next(self) -> Option<Stage> {
        Stage::ALL.get(self.ordinal()).copied()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown stage: {0}")]
pub struct UnknownStage(pub String);

impl FromStr for Stage {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .iter()
            .copied()
            .find(|stage| stage.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownStage(s.to_string()))
    }
}
