//! `hara`: run, resume, export and check LLM-driven hazard analyses.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hara_core::digest::sha256_hex;
use hara_core::ledger::{read_ledger, verify_ledger, LedgerError};
use hara_core::provider::{HttpProvider, Recording, ReplayProvider, ScriptedProvider};
use hara_core::table::{validate_csv, Provenance};
use hara_core::{
    CompletionProvider, ItemDefinition, Ledger, LedgerContents, Pipeline, PipelineError, RunConfig, RunOutcome,
    Stage, TemplateSet,
};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use config::{CliConfig, Overrides, ProviderSpec};

#[derive(Parser)]
#[command(name = "hara", version, about = "Hazard analysis and risk assessment through a chain of LLM prompts")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug); HARA_LOG overrides
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all six stages and write the CSV table
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Replace an existing ledger instead of refusing
        #[arg(long)]
        force: bool,
    },
    /// Continue an interrupted run from its ledger
    Resume {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-derive the CSV of a completed run from its ledger, offline
    Export {
        /// Ledger of a completed run
        ledger: PathBuf,
        /// Output CSV
        #[arg(short, long)]
        output: PathBuf,
        /// Template bundle directory, if the run did not use the built-in one
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Check the hash chain of a ledger
    VerifyLedger { ledger: PathBuf },
    /// Check an exported CSV against the table invariants
    Validate { csv: PathBuf },
    /// Check that the configured provider can serve every stage
    Probe {
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Findings = 1,
    Usage = 2,
    Config = 3,
    Probe = 4,
    Stage = 5,
    LedgerIo = 6,
    Integrity = 7,
    CsvParse = 8,
    Incomplete = 9,
}

struct Failure {
    exit: Exit,
    message: String,
}

impl Failure {
    fn new(exit: Exit, message: impl fmt::Display) -> Self {
        Self {
            exit,
            message: message.to_string(),
        }
    }
}

impl From<LedgerError> for Failure {
    fn from(e: LedgerError) -> Self {
        let exit = match &e {
            LedgerError::Integrity(_) => Exit::Integrity,
            LedgerError::Exists(_) => Exit::Usage,
            _ => Exit::LedgerIo,
        };
        Failure::new(exit, e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Template(_) => Failure::new(Exit::Config, e),
            PipelineError::Ledger(inner) => inner.into(),
            PipelineError::Stage(_) | PipelineError::Invariant(_) => Failure::new(Exit::Stage, e),
            PipelineError::Incomplete(_) => Failure::new(Exit::Incomplete, e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn config_err(e: impl fmt::Display) -> Failure {
    Failure::new(Exit::Config, e)
}

fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| config_err(format!("no {name} given (config file or --{name})")))
}

fn load_templates(dir: Option<&Path>) -> Result<(TemplateSet, String), Failure> {
    match dir {
        None => Ok((TemplateSet::builtin(), "builtin".to_string())),
        Some(dir) => {
            let set = TemplateSet::load_dir(dir).map_err(config_err)?;
            Ok((set, dir.display().to_string()))
        }
    }
}

fn load_item(path: &Path) -> Result<ItemDefinition, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("item definition {}: {e}", path.display())))?;
    let fallback = path.file_stem().and_then(|s| s.to_str()).unwrap_or("item");
    ItemDefinition::from_markdown(&text, fallback).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn build_provider(spec: &Option<ProviderSpec>) -> Result<Box<dyn CompletionProvider>, Failure> {
    let spec = spec
        .as_ref()
        .ok_or_else(|| config_err("no provider configured ([provider] kind or --provider)"))?;
    Ok(match spec {
        ProviderSpec::Live(http) => Box::new(HttpProvider::from_env(http.clone()).map_err(config_err)?),
        ProviderSpec::Scripted { fixtures } => Box::new(ScriptedProvider::load_dir(fixtures).map_err(config_err)?),
        ProviderSpec::Replay { source } => {
            // a ledger of an earlier run, or a bare recording
            let recording = match read_ledger(source) {
                Ok(contents) => contents.recording(),
                Err(LedgerError::Integrity(_)) | Err(LedgerError::Io { .. }) => {
                    Recording::load(source).map_err(config_err)?
                }
                Err(e) => return Err(e.into()),
            };
            Box::new(ReplayProvider::new(&recording))
        }
    })
}

fn probe(pipeline: &Pipeline<'_>, provider: &dyn CompletionProvider) -> CmdResult {
    let readiness = provider.probe(&pipeline.probe_plan());
    if readiness.is_ready() {
        tracing::info!("{readiness}");
        Ok(())
    } else {
        Err(Failure::new(Exit::Probe, readiness))
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    rows: usize,
    csv_sha256: String,
    ledger: String,
}

fn provenance_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    output.with_file_name(name)
}

/// Writes the CSV (via a temporary file and rename) and its provenance
/// sidecar, which carries what the fixed CSV header cannot.
fn write_table(outcome: &RunOutcome, output: &Path, ledger: &Path) -> CmdResult {
    let io = |e: std::io::Error| Failure::new(Exit::LedgerIo, format!("{}: {e}", output.display()));
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let csv = outcome.table.to_csv();
    let tmp = output.with_extension("csv.partial");
    fs::write(&tmp, &csv).map_err(io)?;
    fs::rename(&tmp, output).map_err(io)?;
    let sidecar = Sidecar {
        provenance: &outcome.table.provenance,
        rows: outcome.table.rows().len(),
        csv_sha256: sha256_hex(&csv),
        ledger: ledger.display().to_string(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    fs::write(provenance_path(output), json).map_err(io)?;
    println!("{} ({} rows)", output.display(), outcome.table.rows().len());
    Ok(())
}

fn report_stats(outcome: &RunOutcome) {
    let s = &outcome.stats;
    for stage in Stage::ALL {
        let repairs = s.repairs.get(&stage).copied().unwrap_or(0);
        let replayed = s.replayed.get(&stage).copied().unwrap_or(0);
        eprintln!(
            "  {:<14} {:>4} calls {:>3} repairs {:>4} from ledger",
            stage.as_str(),
            s.calls(stage),
            repairs,
            replayed
        );
    }
    if s.retries + s.skipped_pairs + s.dropped_rows > 0 {
        eprintln!(
            "  {} transport retries, {} skipped pairs, {} dropped rows",
            s.retries, s.skipped_pairs, s.dropped_rows
        );
    }
}

fn finish(result: Result<RunOutcome, PipelineError>, output: &Path, ledger_path: &Path) -> CmdResult {
    match result {
        Ok(outcome) => {
            report_stats(&outcome);
            write_table(&outcome, output, ledger_path)
        }
        Err(e) => {
            eprintln!("ledger: {}", ledger_path.display());
            Err(e.into())
        }
    }
}

fn cmd_run(overrides: &Overrides, force: bool) -> CmdResult {
    let cfg = CliConfig::load(overrides).map_err(config_err)?;
    let item = load_item(required(&cfg.item, "item")?)?;
    let output = required(&cfg.output, "output")?;
    let ledger_path = required(&cfg.ledger, "ledger")?;
    let (templates, source) = load_templates(cfg.templates.as_deref())?;
    let pipeline = Pipeline::new(&templates, cfg.run.clone())?;
    let provider = build_provider(&cfg.provider)?;

    if ledger_path.exists() {
        if !force {
            return Err(Failure::new(
                Exit::Usage,
                format!(
                    "ledger {} already exists; use `hara resume` to continue it or --force to start over",
                    ledger_path.display()
                ),
            ));
        }
        fs::remove_file(ledger_path).map_err(|e| Failure::new(Exit::LedgerIo, format!("{}: {e}", ledger_path.display())))?;
    }
    if let Some(parent) = ledger_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::new(Exit::LedgerIo, format!("{}: {e}", parent.display())))?;
    }
    let mut ledger = Ledger::create(ledger_path, pipeline.ledger_header(&item, &source))?;
    probe(&pipeline, provider.as_ref())?;
    let result = pipeline.run(provider.as_ref(), &mut ledger);
    finish(result, output, ledger_path)
}

fn cmd_resume(overrides: &Overrides) -> CmdResult {
    let cfg = CliConfig::load(overrides).map_err(config_err)?;
    let output = required(&cfg.output, "output")?;
    let ledger_path = required(&cfg.ledger, "ledger")?;
    let (mut ledger, prior) = Ledger::open(ledger_path)?;
    let (templates, _) = load_templates(cfg.templates.as_deref())?;
    let pipeline = Pipeline::new(&templates, cfg.run.clone())?;
    let result = if prior.is_complete() {
        tracing::info!("ledger holds a completed run; nothing to call");
        pipeline.replay(&prior)
    } else {
        let provider = build_provider(&cfg.provider)?;
        probe(&pipeline, provider.as_ref())?;
        pipeline.resume(provider.as_ref(), &mut ledger, &prior)
    };
    finish(result, output, ledger_path)
}

fn last_completed(contents: &LedgerContents) -> Option<Stage> {
    contents
        .entries
        .iter()
        .filter(|e| e.kind == hara_core::ledger::EntryKind::StageComplete)
        .filter_map(|e| e.stage)
        .max()
}

fn cmd_export(ledger_path: &Path, output: &Path, templates_dir: Option<&Path>) -> CmdResult {
    let contents = read_ledger(ledger_path)?;
    let recorded_dir = Some(contents.header.bundle_source.as_str())
        .filter(|s| *s != "builtin")
        .map(PathBuf::from);
    let dir = templates_dir.map(Path::to_path_buf).or(recorded_dir);
    let (templates, _) = load_templates(dir.as_deref())?;
    let config = RunConfig::from_params(&contents.header.params)?;
    let pipeline = Pipeline::new(&templates, config)?;
    match pipeline.replay(&contents) {
        Ok(outcome) => write_table(&outcome, output, ledger_path),
        Err(e @ PipelineError::Incomplete(_)) => {
            let done = last_completed(&contents).map_or("none".to_string(), |s| s.to_string());
            Err(Failure::new(Exit::Incomplete, format!("{e} (last completed stage: {done})")))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_verify(ledger_path: &Path) -> CmdResult {
    let report = verify_ledger(ledger_path)?;
    if report.is_intact() {
        println!("{}: {report}", ledger_path.display());
        Ok(())
    } else {
        Err(Failure::new(Exit::Integrity, format!("{}: {report}", ledger_path.display())))
    }
}

fn cmd_validate(csv: &Path) -> CmdResult {
    let bytes = fs::read(csv).map_err(|e| Failure::new(Exit::CsvParse, format!("{}: {e}", csv.display())))?;
    let check = validate_csv(&bytes).map_err(|e| Failure::new(Exit::CsvParse, format!("{}: {e}", csv.display())))?;
    if check.report.is_clean() {
        println!("{}: {} rows, clean", csv.display(), check.rows);
        return Ok(());
    }
    for v in &check.report.violations {
        println!("[{}] {}", v.code, v.detail);
    }
    Err(Failure::new(
        Exit::Findings,
        format!("{}: {} violations in {} rows", csv.display(), check.report.violations.len(), check.rows),
    ))
}

fn cmd_probe(overrides: &Overrides) -> CmdResult {
    let cfg = CliConfig::load(overrides).map_err(config_err)?;
    let (templates, _) = load_templates(cfg.templates.as_deref())?;
    let pipeline = Pipeline::new(&templates, cfg.run.clone())?;
    let provider = build_provider(&cfg.provider)?;
    probe(&pipeline, provider.as_ref())?;
    println!("{}: ready for all six stages", provider.name());
    Ok(())
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("HARA_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Run { overrides, force } => cmd_run(overrides, *force),
        Command::Resume { overrides } => cmd_resume(overrides),
        Command::Export {
            ledger,
            output,
            templates,
        } => cmd_export(ledger, output, templates.as_deref()),
        Command::VerifyLedger { ledger } => cmd_verify(ledger),
        Command::Validate { csv } => cmd_validate(csv),
        Command::Probe { overrides } => cmd_probe(overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit as u8)
        }
    }
}
