//! Command-line front end: run, validate, and re-report experiments
//! defined by flat TOML configuration files.
//!
//! Exit codes: 0 when every tolerance gate passes, 1 on gate failures (or
//! runtime errors), 2 on configuration parse/validation errors (no
//! artifacts are written in that case). The `MCKV_WORKERS` environment
//! variable caps the worker-thread pool; runs are deterministic regardless
//! of its value.

mod config;
mod experiments;
mod manifest;
mod report;
mod table;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{parse_config, ExperimentConfig};
use manifest::{fnv1a_bytes, write_manifest, Manifest};
use report::ReportOutcome;

#[derive(Parser)]
#[command(
    name = "mckv",
    version,
    about = "Simulation and verification laboratory for conditional mean-field dynamics \
             driven by idiosyncratic and shared noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file and write artifacts.
    Run { config: PathBuf },
    /// Parse and validate a config file without running anything.
    Validate { config: PathBuf },
    /// Summarize an artifact directory and verify its integrity.
    Report { artifact_dir: PathBuf },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = Cli::parse();

    if let Ok(raw) = std::env::var("MCKV_WORKERS") {
        let workers: usize = match raw.trim().parse() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("error: MCKV_WORKERS must be a positive integer, got `{raw}`");
                return 2;
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: failed to size the worker pool: {e}");
            return 2;
        }
    }

    match cli.command {
        Command::Run { config } => match load_config(&config) {
            Ok(cfg) => run(&cfg),
            Err(code) => code,
        },
        Command::Validate { config } => match load_config(&config) {
            Ok(cfg) => {
                println!(
                    "config valid: kind = {}, output_dir = {}",
                    cfg.kind.as_str(),
                    cfg.output_dir.display()
                );
                0
            }
            Err(code) => code,
        },
        Command::Report { artifact_dir } => run_report(&artifact_dir),
    }
}

/// Read and parse a config; on failure print `path:line:col: message` and
/// yield exit code 2.
fn load_config(path: &Path) -> Result<ExperimentConfig, i32> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: {}:1:1: {e}", path.display());
            return Err(2);
        }
    };
    match parse_config(&text) {
        Ok(cfg) => Ok(cfg),
        Err(fail) => {
            eprintln!("error: {}:{fail}", path.display());
            Err(2)
        }
    }
}

fn run(cfg: &ExperimentConfig) -> i32 {
    let out = cfg.output_dir.clone();
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("error: cannot create output directory {}: {e}", out.display());
        return 1;
    }
    let start = Instant::now();
    let result = experiments::run_experiment(cfg, &out);
    let wall = start.elapsed().as_secs_f64();
    let output = match result {
        Ok(output) => output,
        Err(e) => {
            eprintln!("error: experiment failed: {e:#}");
            return 1;
        }
    };

    let passed = output.gates.iter().all(|g| g.passed);
    let mut versions = BTreeMap::new();
    versions.insert("mckv".to_string(), mckv::VERSION.to_string());
    versions.insert(
        "mckv-cli".to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    );
    let manifest = Manifest {
        kind: cfg.kind.as_str().to_string(),
        config_hash: format!("{:016x}", fnv1a_bytes(cfg.raw_text.as_bytes())),
        config_text: cfg.raw_text.clone(),
        master_seed: cfg.simulation.master_seed,
        first_scenario: cfg.simulation.first_scenario,
        n_particles: cfg.simulation.n_particles,
        n_scenarios: cfg.simulation.n_scenarios,
        worker_threads: rayon::current_num_threads(),
        versions,
        wall_clock_seconds: wall,
        artifacts: output.artifacts,
        gates: output.gates,
        passed,
    };
    if let Err(e) = write_manifest(&out, &manifest) {
        eprintln!("error: cannot write manifest: {e}");
        return 1;
    }

    for gate in &manifest.gates {
        println!(
            "gate {}: {} {} {} ... {}",
            gate.name,
            gate.value,
            gate.direction,
            gate.threshold,
            if gate.passed { "ok" } else { "FAIL" }
        );
    }
    if passed {
        println!(
            "all {} gates passed; artifacts in {}",
            manifest.gates.len(),
            out.display()
        );
        0
    } else {
        let failing: Vec<&str> = manifest
            .gates
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.name.as_str())
            .collect();
        eprintln!("failed gates: {}", failing.join(", "));
        1
    }
}

fn run_report(dir: &Path) -> i32 {
    let path = dir.join("manifest.json");
    let text = match std::fs::read_to_string(&path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: {}:1:1: {e}", path.display());
            return 2;
        }
    };
    let manifest: Manifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!(
                "error: {}:{}:{}: {e}",
                path.display(),
                e.line(),
                e.column()
            );
            return 2;
        }
    };
    match report::summarize(dir, &manifest) {
        ReportOutcome::Clean => {
            println!("all gates passed; artifacts intact");
            0
        }
        ReportOutcome::Problems(problems) => {
            for p in &problems {
                eprintln!("problem: {p}");
            }
            1
        }
    }
}
