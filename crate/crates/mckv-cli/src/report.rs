//! The `report` subcommand: re-summarize an artifact directory from its
//! manifest and verify artifact integrity (checksums, parseability).

use std::path::Path;

use mckv::scenario::Scenario;

use crate::manifest::{fnv1a_bytes, Manifest};
use crate::table::read_table;

pub enum ReportOutcome {
    /// All gates passed and every artifact is intact.
    Clean,
    /// Failed gates and/or integrity problems (named).
    Problems(Vec<String>),
}

/// Load and verify one artifact file; `Ok(())` means intact.
fn verify_artifact(dir: &Path, name: &str) -> Result<(), String> {
    let path = dir.join(name);
    if name.starts_with("scenario_") && name.ends_with(".csv") {
        Scenario::load(&path).map_err(|e| format!("{name}: {e}"))?;
        return Ok(());
    }
    let text =
        std::fs::read_to_string(&path).map_err(|e| format!("{name}: {e}"))?;
    if name.ends_with(".json") {
        serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| format!("{name}: invalid JSON: {e}"))?;
        return Ok(());
    }
    if name.ends_with(".csv") {
        read_table(&text).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(())
}

pub fn summarize(dir: &Path, manifest: &Manifest) -> ReportOutcome {
    println!("experiment: {}", manifest.kind);
    println!(
        "seeds: master {} first-scenario {}",
        manifest.master_seed, manifest.first_scenario
    );
    println!(
        "size: {} particles x {} scenarios, {} worker thread(s)",
        manifest.n_particles, manifest.n_scenarios, manifest.worker_threads
    );
    println!("wall clock: {:.3} s", manifest.wall_clock_seconds);
    println!("config hash: {}", manifest.config_hash);
    println!("artifacts ({}):", manifest.artifacts.len());

    let mut problems = Vec::new();
    if format!("{:016x}", fnv1a_bytes(manifest.config_text.as_bytes())) != manifest.config_hash {
        problems.push("manifest: config_hash does not match embedded config_text".to_string());
    }
    for name in &manifest.artifacts {
        match verify_artifact(dir, name) {
            Ok(()) => println!("  {name}: ok"),
            Err(e) => {
                println!("  {name}: CORRUPT");
                problems.push(e);
            }
        }
    }
    println!("gates:");
    for gate in &manifest.gates {
        println!(
            "  {}: {} {} {} ... {}",
            gate.name,
            gate.value,
            gate.direction,
            gate.threshold,
            if gate.passed { "ok" } else { "FAIL" }
        );
        if !gate.passed {
            problems.push(format!("gate {} failed", gate.name));
        }
    }
    if problems.is_empty() {
        ReportOutcome::Clean
    } else {
        ReportOutcome::Problems(problems)
    }
}
