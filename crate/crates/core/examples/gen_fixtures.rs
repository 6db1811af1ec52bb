//! Regenerates the scripted answers for a fixture directory from its
//! `plan.toml`, writing `<dir>/script/index.json`.
//!
//! Usage: `cargo run -p hara-core --example gen_fixtures -- fixtures/caem [...]`

use std::path::Path;
use std::process::ExitCode;

use hara_core::synth::{generate, FixturePlan};

fn regenerate(dir: &Path) -> Result<(), String> {
    let plan_path = dir.join("plan.toml");
    let text = std::fs::read_to_string(&plan_path).map_err(|e| format!("{}: {e}", plan_path.display()))?;
    let plan = FixturePlan::from_toml(&text).map_err(|e| format!("{}: {e}", plan_path.display()))?;
    let out = generate(&plan).map_err(|e| e.to_string())?;
    let script = dir.join("script");
    out.provider.write_dir(&script).map_err(|e| e.to_string())?;
    let s = &out.summary;
    println!(
        "{}: {} entries, {} malfunctions, {} geometries, {} events ({} dropped), {} goals, {} table rows",
        dir.display(),
        out.provider.len(),
        s.malfunctions,
        s.geometries,
        s.events,
        s.dropped_rows,
        s.goals,
        s.expected_rows
    );
    for (q, n) in &s.quadrant_sizes {
        println!("  {q}: {n}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let dirs: Vec<String> = std::env::args().skip(1).collect();
    if dirs.is_empty() {
        eprintln!("usage: gen_fixtures <fixture-dir>...");
        return ExitCode::from(2);
    }
    for dir in &dirs {
        if let Err(e) = regenerate(Path::new(dir)) {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}
