use std::fs;
use std::io::{Seek, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn hara(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hara"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HARA_LOG")
        .stdin(Stdio::null())
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A scratch copy of a fixture: item, scripted answers and a config.
fn workspace(name: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = fixtures().join(name);
    fs::copy(src.join("item.md"), dir.path().join("item.md")).unwrap();
    fs::create_dir(dir.path().join("script")).unwrap();
    fs::copy(src.join("script/index.json"), dir.path().join("script/index.json")).unwrap();
    fs::write(
        dir.path().join("hara.toml"),
        "item = \"item.md\"\noutput = \"out/hara.csv\"\nledger = \"out/run.jsonl\"\n\n[provider]\nkind = \"scripted\"\nfixtures = \"script\"\n",
    )
    .unwrap();
    dir
}

/// Drops every scripted answer of one stage from the workspace fixtures.
fn remove_stage(dir: &Path, stage: &str) {
    let path = dir.join("script/index.json");
    let mut index: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    index["entries"].as_array_mut().unwrap().retain(|e| e["stage"] != stage);
    fs::write(&path, serde_json::to_string(&index).unwrap()).unwrap();
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn run_writes_csv_and_provenance() {
    let ws = workspace("caem");
    let out = hara(&["run", "-c", "hara.toml"], ws.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("(20 rows)"));

    let csv = fs::read_to_string(ws.path().join("out/hara.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert!(csv.starts_with(
        "ID,Guideword,Malfunction,Core Scenario,Detailed Scenario,Hazardous Event,Severity,Severity Rationale,Safety Goal\n"
    ));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path().join("out/hara.csv.provenance.json")).unwrap()).unwrap();
    assert_eq!(sidecar["bundle_version"], "hara-v1.0.0");
    assert_eq!(sidecar["model_id"], "gpt-4");
    assert_eq!(sidecar["rows"], 20);

    let validate = hara(&["validate", "out/hara.csv"], ws.path());
    assert_eq!(code(&validate), 0, "{}", String::from_utf8_lossy(&validate.stdout));
    let verify = hara(&["verify-ledger", "out/run.jsonl"], ws.path());
    assert_eq!(code(&verify), 0);
}

#[test]
fn existing_ledger_needs_force_and_reruns_are_identical() {
    let ws = workspace("alc");
    assert_eq!(code(&hara(&["run", "-c", "hara.toml"], ws.path())), 0);
    let first = fs::read(ws.path().join("out/hara.csv")).unwrap();

    let refused = hara(&["run", "-c", "hara.toml"], ws.path());
    assert_eq!(code(&refused), 2);
    assert!(stderr(&refused).contains("already exists"));

    let forced = hara(&["run", "-c", "hara.toml", "--force", "--concurrency-limit", "1"], ws.path());
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(fs::read(ws.path().join("out/hara.csv")).unwrap(), first);
}

#[test]
fn missing_item_is_a_config_error_before_any_call() {
    let ws = workspace("caem");
    fs::remove_file(ws.path().join("item.md")).unwrap();
    let out = hara(&["run", "-c", "hara.toml"], ws.path());
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("item definition"));
    assert!(!ws.path().join("out/run.jsonl").exists());
}

#[test]
fn bad_config_and_usage_errors() {
    let ws = workspace("caem");
    fs::write(ws.path().join("bad.toml"), "[run]\nconcurrency_limit = 0\n").unwrap();
    assert_eq!(code(&hara(&["run", "-c", "bad.toml"], ws.path())), 3);
    assert_eq!(code(&hara(&["run", "-c", "missing.toml"], ws.path())), 3);
    assert_eq!(code(&hara(&["frobnicate"], ws.path())), 2);
    assert_eq!(code(&hara(&["run", "--budget", "Exposure=3"], ws.path())), 2);
}

#[test]
fn missing_fixtures_fail_the_probe_with_only_a_header_written() {
    let ws = workspace("caem");
    remove_stage(ws.path(), "SafetyGoal");
    let out = hara(&["run", "-c", "hara.toml"], ws.path());
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("missing-fixture"));
    assert_eq!(line_count(&ws.path().join("out/run.jsonl")), 1);

    let probe = hara(&["probe", "-c", "hara.toml"], ws.path());
    assert_eq!(code(&probe), 4);
}

#[test]
fn live_provider_without_credential_fails_the_probe() {
    let ws = workspace("caem");
    let out = Command::new(env!("CARGO_BIN_EXE_hara"))
        .args([
            "probe",
            "--provider",
            "live",
            "--endpoint",
            "http://127.0.0.1:9/v1/chat/completions",
            "--credential-env",
            "HARA_TEST_NO_SUCH_VARIABLE",
        ])
        .current_dir(ws.path())
        .env_remove("HARA_TEST_NO_SUCH_VARIABLE")
        .output()
        .unwrap();
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("HARA_TEST_NO_SUCH_VARIABLE"));
}

#[test]
fn stage_error_then_resume_completes_the_run() {
    let reference = workspace("caem");
    assert_eq!(code(&hara(&["run", "-c", "hara.toml"], reference.path())), 0);

    let ws = workspace("caem");
    let full_index = fs::read(ws.path().join("script/index.json")).unwrap();
    // the probe still sees goal fixtures, but one event has none
    let path = ws.path().join("script/index.json");
    let mut index: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let entries = index["entries"].as_array_mut().unwrap();
    let victim = entries
        .iter()
        .filter(|e| e["stage"] == "SafetyGoal")
        .map(|e| e["subject"].clone())
        .max_by_key(|s| s.as_str().unwrap_or_default().to_string())
        .unwrap();
    entries.retain(|e| !(e["stage"] == "SafetyGoal" && e["subject"] == victim));
    fs::write(&path, serde_json::to_string(&index).unwrap()).unwrap();

    let failed = hara(&["run", "-c", "hara.toml", "--concurrency-limit", "1"], ws.path());
    assert_eq!(code(&failed), 5, "{}", stderr(&failed));
    assert!(stderr(&failed).contains("ledger: "));
    assert!(stderr(&failed).contains("SafetyGoal"));

    let incomplete = hara(&["export", "out/run.jsonl", "-o", "early.csv"], ws.path());
    assert_eq!(code(&incomplete), 9);
    assert!(stderr(&incomplete).contains("incomplete: SafetyGoal (last completed stage: Severity)"));

    fs::write(&path, full_index).unwrap();
    let resumed = hara(&["resume", "-c", "hara.toml", "-v"], ws.path());
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    assert_eq!(
        fs::read(ws.path().join("out/hara.csv")).unwrap(),
        fs::read(reference.path().join("out/hara.csv")).unwrap()
    );
}

#[test]
fn export_reproduces_the_csv_and_reports_incomplete_runs() {
    let ws = workspace("alc");
    assert_eq!(code(&hara(&["run", "-c", "hara.toml"], ws.path())), 0);
    let out = hara(&["export", "out/run.jsonl", "-o", "again.csv"], ws.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(ws.path().join("again.csv")).unwrap(),
        fs::read(ws.path().join("out/hara.csv")).unwrap()
    );

    // cut the ledger in the middle of the severity stage
    let text = fs::read_to_string(ws.path().join("out/run.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let severity: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.contains("\"stage\":\"Severity\"") && l.contains("\"kind\":\"exchange\""))
        .map(|(i, _)| i)
        .collect();
    let cut = severity[severity.len() / 2];
    fs::write(ws.path().join("cut.jsonl"), lines[..=cut].join("\n") + "\n").unwrap();
    let out = hara(&["export", "cut.jsonl", "-o", "cut.csv"], ws.path());
    assert_eq!(code(&out), 9);
    assert!(stderr(&out).contains("incomplete: Severity"), "{}", stderr(&out));
    assert!(!ws.path().join("cut.csv").exists());
}

#[test]
fn corrupted_ledger_is_an_integrity_error() {
    let ws = workspace("alc");
    assert_eq!(code(&hara(&["run", "-c", "hara.toml"], ws.path())), 0);
    let path = ws.path().join("out/run.jsonl");
    let mut bytes = fs::read(&path).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 0x01;
    fs::write(&path, bytes).unwrap();

    let verify = hara(&["verify-ledger", "out/run.jsonl"], ws.path());
    assert_eq!(code(&verify), 7);
    assert!(stderr(&verify).contains("integrity failure at entry"), "{}", stderr(&verify));
    assert_eq!(code(&hara(&["export", "out/run.jsonl", "-o", "x.csv"], ws.path())), 7);
    assert_eq!(code(&hara(&["resume", "-c", "hara.toml"], ws.path())), 7);
    assert_eq!(code(&hara(&["verify-ledger", "nope.jsonl"], ws.path())), 6);
}

#[test]
fn validate_reports_edited_tables() {
    let ws = workspace("caem");
    assert_eq!(code(&hara(&["run", "-c", "hara.toml"], ws.path())), 0);
    let csv = fs::read_to_string(ws.path().join("out/hara.csv")).unwrap();
    let mut lines: Vec<String> = csv.lines().map(str::to_string).collect();

    // drop the goal of an S2 row
    let s2 = lines.iter().position(|l| l.contains(",S2,")).unwrap();
    let cut = lines[s2].rfind(',').unwrap();
    lines[s2].truncate(cut + 1);
    fs::write(ws.path().join("edited.csv"), lines.join("\n") + "\n").unwrap();
    let out = hara(&["validate", "edited.csv"], ws.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("[goal-missing-for-S>0]"));

    // duplicate an id
    let mut dup: Vec<String> = csv.lines().map(str::to_string).collect();
    let id = dup[1][..5].to_string();
    dup[2].replace_range(..5, &id);
    fs::write(ws.path().join("dup.csv"), dup.join("\n") + "\n").unwrap();
    let out = hara(&["validate", "dup.csv"], ws.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("[duplicate-id]"));

    fs::write(ws.path().join("junk.csv"), "Name,Value\n1,2\n").unwrap();
    assert_eq!(code(&hara(&["validate", "junk.csv"], ws.path())), 8);
    assert_eq!(code(&hara(&["validate", "absent.csv"], ws.path())), 8);
}

#[test]
fn replay_provider_reruns_from_a_ledger() {
    let ws = workspace("alc");
    assert_eq!(code(&hara(&["run", "-c", "hara.toml"], ws.path())), 0);
    let out = hara(
        &["run", "-c", "hara.toml", "--provider", "replay", "--source", "out/run.jsonl", "--ledger", "replayed.jsonl", "-o", "replayed.csv"],
        ws.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(ws.path().join("replayed.csv")).unwrap(),
        fs::read(ws.path().join("out/hara.csv")).unwrap()
    );
}

/// The run must not consume any input: stdin is a file and its shared offset
/// is checked afterwards.
#[test]
fn run_never_reads_standard_input() {
    let ws = workspace("caem");
    let mut input = tempfile::tempfile().unwrap();
    input.write_all(b"y\ny\ny\n").unwrap();
    input.rewind().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hara"))
        .args(["run", "-c", "hara.toml"])
        .current_dir(ws.path())
        .stdin(Stdio::from(input.try_clone().unwrap()))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(input.stream_position().unwrap(), 0, "the run read from stdin");
}
