//! Append-only, hash-chained audit ledger stored as JSON lines.
//!
//! Line 1 is a [`LedgerHeader`]; every further line is a [`LedgerEntry`].
//! Each entry's `entry_hash` is the SHA-256 of its own canonical
//! serialization with `entry_hash` blanked, and its `prev_hash` is the
//! previous entry's hash (all zeros for the first). Verification re-parses
//! every line, requires the re-serialization to be byte-identical, and
//! recomputes the chain, so any single-byte change is caught.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256_hex, HASH_ALGORITHM};
use crate::domain::ItemDefinition;
use crate::provider::{
    CompletionRequest, CompletionResponse, FinishReason, RecordedExchange, Recording,
};
use crate::stage::Stage;

pub const LEDGER_FORMAT: &str = "hara-ledger/1";
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("ledger {} already exists", .0.display())]
    Exists(PathBuf),
    #[error("ledger write failed: {0}")]
    Storage(io::Error),
    #[error("ledger is unusable after an earlier write failure")]
    Poisoned,
    #[error("{0}")]
    Integrity(IntegrityReport),
    #[error("cannot serialize ledger record: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerHeader {
    pub format: String,
    pub artifact_version: String,
    pub bundle_version: String,
    /// `builtin` or the directory the bundle was loaded from.
    pub bundle_source: String,
    pub config_digest: String,
    pub model_id: String,
    pub hash_algorithm: String,
    pub created: String,
    pub item: ItemDefinition,
    /// Pipeline configuration, sufficient to re-derive the table offline.
    pub params: serde_json::Value,
    pub header_hash: String,
}

impl LedgerHeader {
    pub fn new(
        bundle_version: &str,
        bundle_source: &str,
        config_digest: &str,
        model_id: &str,
        item: ItemDefinition,
        params: serde_json::Value,
    ) -> Self {
        let mut header = Self {
            format: LEDGER_FORMAT.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            bundle_version: bundle_version.to_string(),
            bundle_source: bundle_source.to_string(),
            config_digest: config_digest.to_string(),
            model_id: model_id.to_string(),
            hash_algorithm: HASH_ALGORITHM.to_string(),
            created: now(),
            item,
            params,
            header_hash: String::new(),
        };
        header.header_hash = header.compute_hash();
        header
    }

    fn compute_hash(&self) -> String {
        let mut blank = self.clone();
        blank.header_hash.clear();
        sha256_hex(serde_json::to_string(&blank).expect("header serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    Exchange,
    Note,
    StageComplete,
    Terminal,
    RunComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub sequence: u64,
    pub kind: EntryKind,
    pub stage: Option<Stage>,
    pub subject: Option<String>,
    pub attempt: Option<u32>,
    pub retry: Option<u32>,
    pub request_digest: Option<String>,
    pub request_text: Option<String>,
    pub response_text: Option<String>,
    pub finish_reason: Option<FinishReason>,
    pub note: Option<String>,
    pub timestamp: String,
    pub prev_hash: String,
    pub entry_hash: String,
}

impl LedgerEntry {
    fn compute_hash(&self) -> String {
        let mut blank = self.clone();
        blank.entry_hash.clear();
        sha256_hex(serde_json::to_string(&blank).expect("entry serializes"))
    }

    /// The response recorded by an exchange entry.
    pub fn response(&self) -> Option<CompletionResponse> {
        if self.kind != EntryKind::Exchange {
            return None;
        }
        let text = self.response_text.clone().unwrap_or_default();
        let reason = self.finish_reason?;
        let mut response = CompletionResponse::new(text, reason, Default::default());
        // keep the recorded reason even for an empty complete answer
        response.finish_reason = reason;
        Some(response)
    }
}

/// Content of an entry to append; sequence, hashes and timestamp are
/// filled in by [`Ledger::append`].
#[derive(Debug, Clone, PartialEq)]
pub struct NewEntry {
    pub kind: EntryKind,
    pub stage: Option<Stage>,
    pub subject: Option<String>,
    pub attempt: Option<u32>,
    pub retry: Option<u32>,
    pub request_text: Option<String>,
    pub response_text: Option<String>,
    pub finish_reason: Option<FinishReason>,
    pub note: Option<String>,
}

impl NewEntry {
    fn bare(kind: EntryKind, stage: Option<Stage>) -> Self {
        Self {
            kind,
            stage,
            subject: None,
            attempt: None,
            retry: None,
            request_text: None,
            response_text: None,
            finish_reason: None,
            note: None,
        }
    }

    pub fn exchange(request: &CompletionRequest, retry: u32, response: &CompletionResponse) -> Self {
        Self {
            subject: Some(request.subject.clone()),
            attempt: Some(request.attempt),
            retry: Some(retry),
            request_text: Some(request.prompt_text.clone()),
            response_text: Some(response.raw_text.clone()),
            finish_reason: Some(response.finish_reason),
            ..Self::bare(EntryKind::Exchange, Some(request.stage))
        }
    }

    pub fn note(stage: Option<Stage>, subject: Option<&str>, note: impl Into<String>) -> Self {
        Self {
            subject: subject.map(str::to_string),
            note: Some(note.into()),
            ..Self::bare(EntryKind::Note, stage)
        }
    }

    pub fn stage_complete(stage: Stage, note: impl Into<String>) -> Self {
        Self {
            note: Some(note.into()),
            ..Self::bare(EntryKind::StageComplete, Some(stage))
        }
    }

    pub fn terminal(stage: Option<Stage>, subject: Option<&str>, note: impl Into<String>) -> Self {
        Self {
            subject: subject.map(str::to_string),
            note: Some(note.into()),
            ..Self::bare(EntryKind::Terminal, stage)
        }
    }

    pub fn run_complete(note: impl Into<String>) -> Self {
        Self {
            note: Some(note.into()),
            ..Self::bare(EntryKind::RunComplete, None)
        }
    }
}

/// Durable storage for ledger lines. `append_line` must persist the whole
/// line or fail.
pub trait LedgerSink: Send {
    fn append_line(&mut self, line: &[u8]) -> io::Result<()>;
}

pub struct FileSink {
    file: File,
}

impl LedgerSink for FileSink {
    fn append_line(&mut self, line: &[u8]) -> io::Result<()> {
        self.file.write_all(line)?;
        self.file.flush()?;
        self.file.sync_data()
    }
}

/// In-memory sink sharing its buffer, for tests and dry runs.
#[derive(Clone, Default)]
pub struct MemorySink {
    pub buffer: Arc<Mutex<Vec<u8>>>,
}

impl LedgerSink for MemorySink {
    fn append_line(&mut self, line: &[u8]) -> io::Result<()> {
        self.buffer.lock().unwrap().extend_from_slice(line);
        Ok(())
    }
}

pub struct Ledger {
    sink: Box<dyn LedgerSink>,
    header: LedgerHeader,
    next_sequence: u64,
    last_hash: String,
    poisoned: bool,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn encode<T: Serialize>(record: &T) -> Result<Vec<u8>, LedgerError> {
    let mut line = serde_json::to_vec(record).map_err(|e| LedgerError::Encode(e.to_string()))?;
    line.push(b'\n');
    Ok(line)
}

impl Ledger {
    /// Creates a new ledger file; refuses to overwrite an existing one.
    pub fn create(path: &Path, header: LedgerHeader) -> Result<Self, LedgerError> {
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => LedgerError::Exists(path.to_path_buf()),
                _ => LedgerError::Io {
                    path: path.to_path_buf(),
                    source: e,
                },
            })?;
        Self::with_sink(Box::new(FileSink { file }), header)
    }

    /// Starts a ledger on an arbitrary sink by writing the header.
    pub fn with_sink(mut sink: Box<dyn LedgerSink>, header: LedgerHeader) -> Result<Self, LedgerError> {
        sink.append_line(&encode(&header)?).map_err(LedgerError::Storage)?;
        Ok(Self {
            sink,
            header,
            next_sequence: 1,
            last_hash: GENESIS_HASH.to_string(),
            poisoned: false,
        })
    }

    /// Verifies an existing ledger and reopens it for appending.
    pub fn open(path: &Path) -> Result<(Self, LedgerContents), LedgerError> {
        let contents = read_ledger(path)?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| LedgerError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        let ledger = Self::continue_on(Box::new(FileSink { file }), &contents);
        Ok((ledger, contents))
    }

    /// Continues a verified ledger on `sink` (which must already hold it).
    pub fn continue_on(sink: Box<dyn LedgerSink>, contents: &LedgerContents) -> Self {
        let (next_sequence, last_hash) = match contents.entries.last() {
            Some(e) => (e.sequence + 1, e.entry_hash.clone()),
            None => (1, GENESIS_HASH.to_string()),
        };
        Self {
            sink,
            header: contents.header.clone(),
            next_sequence,
            last_hash,
            poisoned: false,
        }
    }

    pub fn header(&self) -> &LedgerHeader {
        &self.header
    }

    /// Number of entries written so far, header excluded.
    pub fn len(&self) -> u64 {
        self.next_sequence - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persists one entry and returns it as stored. A failed write poisons
    /// the ledger: no later append can succeed.
    pub fn append(&mut self, new: NewEntry) -> Result<LedgerEntry, LedgerError> {
        if self.poisoned {
            return Err(LedgerError::Poisoned);
        }
        let mut entry = LedgerEntry {
            sequence: self.next_sequence,
            kind: new.kind,
            stage: new.stage,
            subject: new.subject,
            attempt: new.attempt,
            retry: new.retry,
            request_digest: new.request_text.as_deref().map(sha256_hex),
            request_text: new.request_text,
            response_text: new.response_text,
            finish_reason: new.finish_reason,
            note: new.note,
            timestamp: now(),
            prev_hash: self.last_hash.clone(),
            entry_hash: String::new(),
        };
        entry.entry_hash = entry.compute_hash();
        let line = encode(&entry)?;
        if let Err(e) = self.sink.append_line(&line) {
            self.poisoned = true;
            return Err(LedgerError::Storage(e));
        }
        self.next_sequence += 1;
        self.last_hash = entry.entry_hash.clone();
        Ok(entry)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerContents {
    pub header: LedgerHeader,
    pub entries: Vec<LedgerEntry>,
}

impl LedgerContents {
    pub fn is_complete(&self) -> bool {
        self.entries.iter().any(|e| e.kind == EntryKind::RunComplete)
    }

    /// Exchange entries in ledger order, as a replay recording.
    pub fn recording(&self) -> Recording {
        Recording {
            exchanges: self
                .entries
                .iter()
                .filter(|e| e.kind == EntryKind::Exchange)
                .filter_map(|e| {
                    Some(RecordedExchange {
                        stage: e.stage?,
                        prompt_digest: e.request_digest.clone()?,
                        attempt: e.attempt?,
                        response_text: e.response_text.clone().unwrap_or_default(),
                        finish_reason: e.finish_reason?,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    /// 0 is the header; entries count from 1.
    pub sequence: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityReport {
    pub entries_checked: u64,
    pub first_divergence: Option<Divergence>,
}

impl IntegrityReport {
    pub fn is_intact(&self) -> bool {
        self.first_divergence.is_none()
    }
}

impl std::fmt::Display for IntegrityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.first_divergence {
            None => write!(f, "ledger intact: header and {} entries verified", self.entries_checked),
            Some(d) if d.sequence == 0 => write!(f, "ledger integrity failure in header: {}", d.reason),
            Some(d) => write!(
                f,
                "ledger integrity failure at entry {}: {}",
                d.sequence, d.reason
            ),
        }
    }
}

fn check_canonical<T: Serialize>(value: &T, line: &[u8]) -> Result<(), String> {
    let again = serde_json::to_vec(value).map_err(|e| e.to_string())?;
    if again != line {
        return Err("record is not in canonical form".into());
    }
    Ok(())
}

/// Verifies the whole chain from raw bytes.
pub fn verify_bytes(bytes: &[u8]) -> (IntegrityReport, Option<LedgerContents>) {
    let fail = |sequence: u64, checked: u64, reason: String| {
        (
            IntegrityReport {
                entries_checked: checked,
                first_divergence: Some(Divergence { sequence, reason }),
            },
            None,
        )
    };
    if bytes.is_empty() {
        return fail(0, 0, "ledger is empty".into());
    }
    let mut lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    let trailing = lines.pop();
    let unterminated = trailing.is_some_and(|t| !t.is_empty());
    if unterminated {
        // keep the partial line so it is reported at its position
        lines.push(trailing.unwrap_or_default());
    }

    let header_line = lines[0];
    let header: LedgerHeader = match serde_json::from_slice(header_line) {
        Ok(h) => h,
        Err(e) => return fail(0, 0, format!("header does not parse: {e}")),
    };
    if let Err(reason) = check_canonical(&header, header_line) {
        return fail(0, 0, reason);
    }
    if header.format != LEDGER_FORMAT || header.hash_algorithm != HASH_ALGORITHM {
        return fail(0, 0, "unsupported ledger format or hash algorithm".into());
    }
    if header.header_hash != header.compute_hash() {
        return fail(0, 0, "header hash mismatch".into());
    }
    if lines.len() == 1 && unterminated {
        return fail(0, 0, "header line is not newline-terminated".into());
    }

    let mut entries = Vec::with_capacity(lines.len() - 1);
    let mut prev = GENESIS_HASH.to_string();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let expected = i as u64;
        let checked = expected - 1;
        let entry: LedgerEntry = match serde_json::from_slice(line) {
            Ok(e) => e,
            Err(e) => return fail(expected, checked, format!("entry does not parse: {e}")),
        };
        if let Err(reason) = check_canonical(&entry, line) {
            return fail(expected, checked, reason);
        }
        if entry.sequence != expected {
            return fail(
                expected,
                checked,
                format!("sequence {} where {expected} was expected", entry.sequence),
            );
        }
        if entry.prev_hash != prev {
            return fail(expected, checked, "previous-hash link broken".into());
        }
        if entry.entry_hash != entry.compute_hash() {
            return fail(expected, checked, "entry hash mismatch".into());
        }
        if entry.request_digest.as_deref() != entry.request_text.as_deref().map(sha256_hex).as_deref() {
            return fail(expected, checked, "request digest does not match request text".into());
        }
        if i == lines.len() - 1 && unterminated {
            return fail(expected, checked, "last entry is not newline-terminated".into());
        }
        prev = entry.entry_hash.clone();
        entries.push(entry);
    }
    (
        IntegrityReport {
            entries_checked: entries.len() as u64,
            first_divergence: None,
        },
        Some(LedgerContents { header, entries }),
    )
}

pub fn verify_ledger(path: &Path) -> Result<IntegrityReport, LedgerError> {
    let bytes = std::fs::read(path).map_err(|e| LedgerError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(verify_bytes(&bytes).0)
}

/// Reads and verifies a ledger; any divergence is an error.
pub fn read_ledger(path: &Path) -> Result<LedgerContents, LedgerError> {
    let bytes = std::fs::read(path).map_err(|e| LedgerError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    match verify_bytes(&bytes) {
        (_, Some(contents)) => Ok(contents),
        (report, None) => Err(LedgerError::Integrity(report)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> LedgerHeader {
        LedgerHeader::new(
            "hara-v1.0.0",
            "builtin",
            "abc",
            "model-x",
            ItemDefinition::new("Brake", "Brakes the car.").unwrap(),
            serde_json::json!({"temperature": 0.0, "limit": 4}),
        )
    }

    fn request(attempt: u32) -> CompletionRequest {
        CompletionRequest::new("prompt \"quoted\"\nline", "m", 0.0, 10, Stage::Severity, "HE001", attempt)
            .unwrap()
    }

    fn sample(n: usize) -> Vec<u8> {
        let sink = MemorySink::default();
        let mut ledger = Ledger::with_sink(Box::new(sink.clone()), header()).unwrap();
        for i in 0..n {
            let resp = CompletionResponse::complete(format!("Severity,Rationale\nS1,r{i}\n"));
            ledger.append(NewEntry::exchange(&request(1), 0, &resp)).unwrap();
        }
        ledger.append(NewEntry::run_complete("done")).unwrap();
        let bytes = sink.buffer.lock().unwrap().clone();
        bytes
    }

    #[test]
    fn chain_verifies_and_round_trips() {
        let bytes = sample(3);
        let (report, contents) = verify_bytes(&bytes);
        assert!(report.is_intact(), "{report}");
        let contents = contents.unwrap();
        assert_eq!(contents.entries.len(), 4);
        assert_eq!(contents.entries[0].prev_hash, GENESIS_HASH);
        assert_eq!(contents.entries[1].prev_hash, contents.entries[0].entry_hash);
        assert!(contents.is_complete());
        assert_eq!(contents.recording().exchanges.len(), 3);
        let resp = contents.entries[0].response().unwrap();
        assert_eq!(resp.raw_text, "Severity,Rationale\nS1,r0\n");
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = sample(2);
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x20, 0x80] {
                let mut bad = bytes.clone();
                bad[i] ^= flip;
                let (report, _) = verify_bytes(&bad);
                assert!(!report.is_intact(), "flip {flip:#x} at byte {i} went unnoticed");
            }
        }
    }

    #[test]
    fn reports_first_bad_sequence() {
        let bytes = sample(3);
        let text = String::from_utf8(bytes).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("r1", "r9");
        let bad = lines.join("\n") + "\n";
        let (report, _) = verify_bytes(bad.as_bytes());
        let d = report.first_divergence.unwrap();
        assert_eq!(d.sequence, 2);
        assert_eq!(report.entries_checked, 1);
    }

    #[test]
    fn truncated_tail_and_removed_entry_detected() {
        let bytes = sample(3);
        let (report, _) = verify_bytes(&bytes[..bytes.len() - 10]);
        assert!(!report.is_intact());
        let text = String::from_utf8(bytes).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(2);
        let (report, _) = verify_bytes((lines.join("\n") + "\n").as_bytes());
        assert_eq!(report.first_divergence.unwrap().sequence, 2);
    }

    struct FailAfter {
        left: usize,
    }

    impl LedgerSink for FailAfter {
        fn append_line(&mut self, _line: &[u8]) -> io::Result<()> {
            if self.left == 0 {
                return Err(io::Error::other("disk full"));
            }
            self.left -= 1;
            Ok(())
        }
    }

    #[test]
    fn failed_write_poisons() {
        let mut ledger = Ledger::with_sink(Box::new(FailAfter { left: 2 }), header()).unwrap();
        ledger.append(NewEntry::note(None, None, "one")).unwrap();
        assert!(matches!(
            ledger.append(NewEntry::note(None, None, "two")),
            Err(LedgerError::Storage(_))
        ));
        assert!(matches!(
            ledger.append(NewEntry::note(None, None, "three")),
            Err(LedgerError::Poisoned)
        ));
        assert_eq!(ledger.len(), 1);
    }

    #[test]
    fn file_create_open_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        {
            let mut l = Ledger::create(&path, header()).unwrap();
            l.append(NewEntry::stage_complete(Stage::Hazards, "3 malfunctions")).unwrap();
        }
        assert!(matches!(Ledger::create(&path, header()), Err(LedgerError::Exists(_))));
        let (mut l, contents) = Ledger::open(&path).unwrap();
        assert_eq!(contents.entries.len(), 1);
        l.append(NewEntry::terminal(Some(Stage::Geometries), None, "aborted")).unwrap();
        let report = verify_ledger(&path).unwrap();
        assert!(report.is_intact());
        assert_eq!(report.entries_checked, 2);
    }
}
