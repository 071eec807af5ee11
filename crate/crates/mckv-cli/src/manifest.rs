//! Run manifest: enough information to reconstruct and audit a run from
//! its artifact directory alone (the full config text is embedded).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One tolerance gate, evaluated by an experiment pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `"<="` or `">="`: how `value` is compared against `threshold`.
    pub direction: String,
    pub passed: bool,
}

impl Gate {
    /// Gate that passes when `value <= threshold`.
    pub fn le(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Gate {
            name: name.into(),
            value,
            threshold,
            direction: "<=".into(),
            passed: value <= threshold,
        }
    }

    /// Gate that passes when `value >= threshold`.
    pub fn ge(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Gate {
            name: name.into(),
            value,
            threshold,
            direction: ">=".into(),
            passed: value >= threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    /// FNV-1a (64-bit, hex) of the verbatim config text.
    pub config_hash: String,
    /// The verbatim config text the run was started with.
    pub config_text: String,
    pub master_seed: u64,
    pub first_scenario: u64,
    pub n_particles: usize,
    pub n_scenarios: usize,
    pub worker_threads: usize,
    pub versions: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    /// Artifact file names (relative to the directory), manifest excluded.
    pub artifacts: Vec<String>,
    pub gates: Vec<Gate>,
    pub passed: bool,
}

pub fn fnv1a_bytes(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in bytes {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)
}
