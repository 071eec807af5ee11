//! Common-noise scenarios.
//!
//! A scenario is one realized path of the shared Brownian motion `B` on a
//! time grid, together with the seeds that make every draw derived from it
//! reproducible. All particles of a system see the same scenario path; their
//! idiosyncratic noise comes from separate streams derived from the same
//! `(master_seed, scenario_index)` pair, so a scenario is a complete, portable
//! description of "one world" of the common noise.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::{StreamRng, COMMON_NOISE_STREAM};

/// One realized common-noise path plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    grid: TimeGrid,
    d: usize,
    master_seed: u64,
    scenario_index: u64,
    /// Brownian increments, step-major: `increments[k*d + j]` is component `j`
    /// of `B_{k+1} - B_k`. Each is an independent `N(0, dt)` draw.
    increments: Vec<f64>,
    /// Path values at nodes, node-major: `path[k*d + j]`; `path[0..d]` is 0.
    path: Vec<f64>,
}

impl Scenario {
    /// Generate the scenario for `(master_seed, scenario_index)` on `grid`.
    ///
    /// The path is a pure function of its arguments: increments are
    /// `sqrt(dt) * N(0,1)` draws from the scenario's common-noise stream, and
    /// `B_0 = 0`.
    pub fn generate(master_seed: u64, scenario_index: u64, grid: TimeGrid, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("common noise dimension must be >= 1"));
        }
        let mut rng = StreamRng::for_stream(master_seed, scenario_index, COMMON_NOISE_STREAM);
        let sqrt_dt = grid.dt().sqrt();
        let n = grid.n_steps();
        let mut increments = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            increments.push(sqrt_dt * rng.next_standard_normal());
        }
        Self::from_increments(master_seed, scenario_index, grid, d, increments)
    }

    /// Build a scenario from explicit increments (synthetic or replayed
    /// paths). The provenance fields are caller-asserted.
    pub fn from_increments(
        master_seed: u64,
        scenario_index: u64,
        grid: TimeGrid,
        d: usize,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if increments.len() != grid.n_steps() * d {
            return Err(Error::DimensionMismatch {
                context: "scenario increments",
                expected: grid.n_steps() * d,
                got: increments.len(),
            });
        }
        let mut path = vec![0.0; grid.n_nodes() * d];
        for k in 0..grid.n_steps() {
            for j in 0..d {
                path[(k + 1) * d + j] = path[k * d + j] + increments[k * d + j];
            }
        }
        Ok(Scenario {
            grid,
            d,
            master_seed,
            scenario_index,
            increments,
            path,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn scenario_index(&self) -> u64 {
        self.scenario_index
    }

    /// `B` at node `k` as a `d`-vector slice.
    pub fn value(&self, k: usize) -> &[f64] {
        &self.path[k * self.d..(k + 1) * self.d]
    }

    /// Increment `B_{k+1} - B_k` as a `d`-vector slice.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.d..(k + 1) * self.d]
    }

    /// True when two scenarios describe the same world (same seeds and grid).
    pub fn same_world(&self, other: &Scenario) -> bool {
        self.master_seed == other.master_seed
            && self.scenario_index == other.scenario_index
            && self.grid == other.grid
            && self.d == other.d
    }

    /// The same Brownian world on a coarser time grid: consecutive groups of
    /// `factor` increments are summed. Used for step-size refinement studies
    /// where the coarse and fine runs must share one realized path.
    pub fn coarsen(&self, factor: usize) -> Result<Scenario> {
        if factor == 0 || self.grid.n_steps() % factor != 0 {
            return Err(Error::InvalidParameter(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.grid.n_steps()
            )));
        }
        let coarse_steps = self.grid.n_steps() / factor;
        let grid = TimeGrid::new(self.grid.t_end(), coarse_steps)?;
        let mut increments = vec![0.0; coarse_steps * self.d];
        for k in 0..self.grid.n_steps() {
            for j in 0..self.d {
                increments[(k / factor) * self.d + j] += self.increments[k * self.d + j];
            }
        }
        Self::from_increments(self.master_seed, self.scenario_index, grid, self.d, increments)
    }

    /// Serialize to CSV: a header naming the identity fields, one row with
    /// their values, then one row of `d` increment components per step, and a
    /// trailing checksum comment. Floats use shortest round-trip formatting,
    /// so loading reproduces the path bit-exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("seed,scenario_index,d,n_steps,T\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            self.master_seed,
            self.scenario_index,
            self.d,
            self.grid.n_steps(),
            self.grid.t_end()
        );
        for k in 0..self.grid.n_steps() {
            let row = self.increment(k);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "# checksum={:016x}", fnv1a(&self.increments));
        out
    }

    /// Parse a scenario previously written by [`Scenario::to_csv`].
    ///
    /// Truncated files, malformed rows and checksum mismatches are rejected.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::CorruptArtifact("empty scenario file".into()))?;
        if header.trim() != "seed,scenario_index,d,n_steps,T" {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {header:?}"),
            });
        }
        let (_, id_row) = lines.next().ok_or_else(|| Error::CorruptArtifact(
            "scenario file missing identity row".into(),
        ))?;
        let fields: Vec<&str> = id_row.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: 2,
                message: format!("expected 5 identity fields, got {}", fields.len()),
            });
        }
        let parse_u64 = |s: &str, line: usize| {
            s.parse::<u64>().map_err(|e| Error::Parse {
                line,
                message: format!("bad integer {s:?}: {e}"),
            })
        };
        let master_seed = parse_u64(fields[0], 2)?;
        let scenario_index = parse_u64(fields[1], 2)?;
        let d = parse_u64(fields[2], 2)? as usize;
        let n_steps = parse_u64(fields[3], 2)? as usize;
        let t_end: f64 = fields[4].parse().map_err(|e| Error::Parse {
            line: 2,
            message: format!("bad horizon {:?}: {e}", fields[4]),
        })?;
        let grid = TimeGrid::new(t_end, n_steps)?;
        if d == 0 {
            return Err(Error::invalid("common noise dimension must be >= 1"));
        }

        let mut increments = Vec::with_capacity(n_steps * d);
        let mut checksum: Option<u64> = None;
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(hex) = rest.trim().strip_prefix("checksum=") {
                    checksum = Some(u64::from_str_radix(hex, 16).map_err(|e| Error::Parse {
                        line: idx + 1,
                        message: format!("bad checksum: {e}"),
                    })?);
                }
                continue;
            }
            for field in line.split(',') {
                let v: f64 = field.parse().map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: format!("bad increment {field:?}: {e}"),
                })?;
                increments.push(v);
            }
        }
        if increments.len() != n_steps * d {
            return Err(Error::CorruptArtifact(format!(
                "scenario file truncated: expected {} increment values, found {}",
                n_steps * d,
                increments.len()
            )));
        }
        if let Some(stored) = checksum {
            let actual = fnv1a(&increments);
            if stored != actual {
                return Err(Error::CorruptArtifact(format!(
                    "scenario checksum mismatch: stored {stored:016x}, computed {actual:016x}"
                )));
            }
        }
        Self::from_increments(master_seed, scenario_index, grid, d, increments)
    }

    /// Write the CSV representation to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Load a scenario from `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text)
    }
}

/// Generate scenarios `first_index .. first_index + count` for one master seed.
pub fn scenario_batch(
    master_seed: u64,
    first_index: u64,
    count: usize,
    grid: TimeGrid,
    d: usize,
) -> Result<Vec<Scenario>> {
    (0..count as u64)
        .map(|i| Scenario::generate(master_seed, first_index + i, grid, d))
        .collect()
}

/// FNV-1a over the raw bits of a float slice; used as an artifact checksum.
pub fn fnv1a(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        }
    }
    hash
}
