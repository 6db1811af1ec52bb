//! Run configuration: a TOML file, then command-line overrides on top.
//!
//! ```toml
//! item = "item.md"
//! output = "out/hara.csv"
//! ledger = "out/run.ledger.jsonl"
//! # templates = "my-bundle"        # directory; the built-in bundle otherwise
//!
//! [run]
//! model_id = "gpt-4"
//! concurrency_limit = 4
//!
//! [budgets]
//! ClusterSelect = 24000
//!
//! [provider]
//! kind = "live"                     # live | scripted | replay
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! credential_env = "OPENAI_API_KEY"
//! ```
//!
//! Relative paths in the file are taken relative to the file's directory.
//! The credential itself is never read from the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use hara_core::orchestrator::FailurePolicy;
use hara_core::provider::HttpProviderConfig;
use hara_core::{RunConfig, Stage};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Live,
    Scripted,
    Replay,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProviderSection {
    kind: Option<ProviderKind>,
    /// scripted: directory holding `index.json`
    fixtures: Option<PathBuf>,
    /// replay: a ledger or a recording file
    source: Option<PathBuf>,
    endpoint: Option<String>,
    credential_env: Option<String>,
    timeout_secs: Option<u64>,
    max_in_flight: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    item: Option<PathBuf>,
    output: Option<PathBuf>,
    ledger: Option<PathBuf>,
    templates: Option<PathBuf>,
    #[serde(default)]
    run: RunConfig,
    #[serde(default)]
    budgets: BTreeMap<String, usize>,
    #[serde(default)]
    provider: ProviderSection,
}

/// Flags that override the configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Configuration file (TOML)
    #[arg(short, long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Item definition (plain text or markdown)
    #[arg(long, value_name = "FILE")]
    pub item: Option<PathBuf>,
    /// Output CSV
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Ledger file
    #[arg(long, value_name = "FILE")]
    pub ledger: Option<PathBuf>,
    /// Template bundle directory (default: built-in bundle)
    #[arg(long, value_name = "DIR")]
    pub templates: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Scripted provider fixture directory
    #[arg(long, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,
    /// Replay provider source (ledger or recording)
    #[arg(long, value_name = "FILE")]
    pub source: Option<PathBuf>,
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API credential
    #[arg(long, value_name = "VAR")]
    pub credential_env: Option<String>,
    #[arg(long, value_name = "SECS")]
    pub timeout_secs: Option<u64>,
    #[arg(long, value_name = "N")]
    pub max_in_flight: Option<usize>,

    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_name = "N")]
    pub max_output_tokens: Option<u32>,
    #[arg(long, value_name = "N")]
    pub concurrency_limit: Option<usize>,
    #[arg(long, value_name = "N")]
    pub repair_budget: Option<u32>,
    #[arg(long, value_name = "N")]
    pub max_retries: Option<u32>,
    #[arg(long, value_name = "N")]
    pub geometries_requested: Option<usize>,
    #[arg(long, value_name = "N")]
    pub representatives_per_quadrant: Option<usize>,
    #[arg(long, value_enum)]
    pub expansion_failure: Option<FailureArg>,
    /// Token budget for one stage, e.g. `--budget Severity=6000`
    #[arg(long = "budget", value_name = "STAGE=N", value_parser = parse_budget)]
    pub budgets: Vec<(Stage, usize)>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FailureArg {
    Abort,
    Skip,
}

fn parse_budget(s: &str) -> Result<(Stage, usize), String> {
    let (stage, n) = s.split_once('=').ok_or("expected STAGE=N")?;
    let stage: Stage = stage.parse().map_err(|e| format!("{e}"))?;
    let n = n.trim().parse().map_err(|e| format!("{n:?}: {e}"))?;
    Ok((stage, n))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Live(HttpProviderConfig),
    Scripted { fixtures: PathBuf },
    Replay { source: PathBuf },
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub item: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub run: RunConfig,
    pub provider: Option<ProviderSpec>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl CliConfig {
    pub fn load(overrides: &Overrides) -> Result<Self, String> {
        let (file, base) = match &overrides.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let file: FileConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, base)
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        let at = |p: Option<PathBuf>| p.map(|p| resolve(&base, p));

        let mut run = file.run;
        for (name, budget) in file.budgets {
            let stage: Stage = name.parse().map_err(|e| format!("[budgets]: {e}"))?;
            run.stage_budgets.insert(stage, budget);
        }
        let o = overrides;
        if let Some(v) = &o.model_id {
            run.model_id = v.clone();
        }
        if let Some(v) = o.temperature {
            run.temperature = v;
        }
        if let Some(v) = o.max_output_tokens {
            run.max_output_tokens = v;
        }
        if let Some(v) = o.concurrency_limit {
            run.concurrency_limit = v;
        }
        if let Some(v) = o.repair_budget {
            run.repair_budget = v;
        }
        if let Some(v) = o.max_retries {
            run.retry.max_retries = v;
        }
        if let Some(v) = o.geometries_requested {
            run.geometries_requested = v;
        }
        if let Some(v) = o.representatives_per_quadrant {
            run.representatives_per_quadrant = v;
        }
        if let Some(v) = o.expansion_failure {
            run.expansion_failure = match v {
                FailureArg::Abort => FailurePolicy::Abort,
                FailureArg::Skip => FailurePolicy::Skip,
            };
        }
        for (stage, budget) in &o.budgets {
            run.stage_budgets.insert(*stage, *budget);
        }
        run.validate().map_err(|e| e.to_string())?;

        let p = file.provider;
        let kind = o.provider.or(p.kind);
        let provider = match kind {
            None => None,
            Some(ProviderKind::Scripted) => {
                let fixtures = o.fixtures.clone().or(at(p.fixtures)).ok_or("scripted provider needs `fixtures`")?;
                Some(ProviderSpec::Scripted { fixtures })
            }
            Some(ProviderKind::Replay) => {
                let source = o.source.clone().or(at(p.source)).ok_or("replay provider needs `source`")?;
                Some(ProviderSpec::Replay { source })
            }
            Some(ProviderKind::Live) => {
                let endpoint = o.endpoint.clone().or(p.endpoint).ok_or("live provider needs `endpoint`")?;
                let credential_env = o
                    .credential_env
                    .clone()
                    .or(p.credential_env)
                    .ok_or("live provider needs `credential_env`")?;
                let mut http = HttpProviderConfig::new(endpoint, credential_env);
                if let Some(v) = o.timeout_secs.or(p.timeout_secs) {
                    http.timeout_secs = v;
                }
                if let Some(v) = o.max_in_flight.or(p.max_in_flight) {
                    if v == 0 {
                        return Err("max_in_flight must be at least 1".into());
                    }
                    http.max_in_flight = v;
                }
                Some(ProviderSpec::Live(http))
            }
        };

        Ok(Self {
            item: o.item.clone().or(at(file.item)),
            output: o.output.clone().or(at(file.output)),
            ledger: o.ledger.clone().or(at(file.ledger)),
            templates: o.templates.clone().or(at(file.templates)),
            run,
            provider,
        })
    }
}
