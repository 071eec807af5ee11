//! Experiment configuration: a flat `key = value` TOML file with one table
//! per concern. Parsing is strict — unknown sections or keys are rejected —
//! and every error carries the line and column it points at.

use std::fmt;
use std::path::PathBuf;

use mckv::coeffs::{CoeffInput, CoefficientField};
use mckv::grid::TimeGrid;
use mckv::particle::InitialLaw;

/// A configuration problem, located in the source text.
#[derive(Debug, Clone)]
pub struct ParseFail {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for ParseFail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ParseFail {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    HierarchyCheck,
    Mimicking,
    MfcCompare,
    MollifySuite,
    Picard,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::HierarchyCheck => "hierarchy_check",
            ExperimentKind::Mimicking => "mimicking",
            ExperimentKind::MfcCompare => "mfc_compare",
            ExperimentKind::MollifySuite => "mollify_suite",
            ExperimentKind::Picard => "picard",
        }
    }
}

/// Known parametric coefficient families.
#[derive(Debug, Clone)]
pub enum SystemConfig {
    /// `b = -rate x + rate mean_weight E[X]`, constant volatilities.
    MeanReverting {
        rate: f64,
        mean_weight: f64,
        sigma: f64,
        gamma: f64,
    },
    /// All three coefficients constant.
    Constant { drift: f64, sigma: f64, gamma: f64 },
    /// `b = b0 + b1 x + b2 x^2`, `sigma = s0 + s1 sin x`,
    /// `gamma = g0 + g1 cos x`.
    PolySine {
        b0: f64,
        b1: f64,
        b2: f64,
        s0: f64,
        s1: f64,
        g0: f64,
        g1: f64,
    },
}

impl SystemConfig {
    pub fn build(&self) -> CoefficientField {
        match *self {
            SystemConfig::MeanReverting {
                rate,
                mean_weight,
                sigma,
                gamma,
            } => CoefficientField::ou_1d(rate, mean_weight, sigma, gamma),
            SystemConfig::Constant { drift, sigma, gamma } => {
                CoefficientField::constant_1d(drift, sigma, gamma)
            }
            SystemConfig::PolySine {
                b0,
                b1,
                b2,
                s0,
                s1,
                g0,
                g1,
            } => CoefficientField::custom_1d(
                move |inp: &CoeffInput| {
                    let x = inp.x[0];
                    b0 + b1 * x + b2 * x * x
                },
                move |inp: &CoeffInput| s0 + s1 * inp.x[0].sin(),
                move |inp: &CoeffInput| g0 + g1 * inp.x[0].cos(),
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationSection {
    pub n_particles: usize,
    pub n_scenarios: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub master_seed: u64,
    pub first_scenario: u64,
}

#[derive(Debug, Clone)]
pub enum InitialSection {
    Gaussian { mean: f64, std_dev: f64 },
    Point { center: f64 },
}

impl InitialSection {
    pub fn law(&self) -> InitialLaw {
        match *self {
            InitialSection::Gaussian { mean, std_dev } => InitialLaw::Gaussian {
                mean: vec![mean],
                std_dev: vec![std_dev],
            },
            InitialSection::Point { center } => InitialLaw::point_1d(center),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpaceSection {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_cells: usize,
    pub basis_lo: f64,
    pub basis_hi: f64,
    pub basis_count: usize,
}

#[derive(Debug, Clone)]
pub struct MimickingSection {
    pub drift_noise: f64,
    pub own_noise_volatility: bool,
    pub bandwidth_scale: f64,
    pub max_samples_per_slice: usize,
    pub compare_fractions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ControlSection {
    pub action_lo: f64,
    pub action_hi: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub initial_std: f64,
    pub noise_scale: f64,
    pub feedback_gain: f64,
}

#[derive(Debug, Clone)]
pub struct MollifySection {
    pub n_draws: usize,
    pub atoms: usize,
    pub cutoff_atoms: usize,
}

#[derive(Debug, Clone)]
pub struct PicardSection {
    pub max_iterations: usize,
    pub tolerance: f64,
}

/// Tolerance gates; any key may be overridden in `[tolerances]`.
#[derive(Debug, Clone)]
pub struct Tolerances {
    pub w1_max: f64,
    pub weak_residual_max: f64,
    pub fpe_z_max: f64,
    pub functional_z_max: f64,
    pub pooled_w1_max: f64,
    pub gap_z_max: f64,
    pub marginal_z_max: f64,
    pub feasible_min: f64,
    pub contraction_slack_max: f64,
    pub psd_defect_min: f64,
    pub ratio_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            w1_max: 0.02,
            weak_residual_max: 5e-3,
            fpe_z_max: 3.0,
            functional_z_max: 3.0,
            pooled_w1_max: 0.05,
            gap_z_max: 3.0,
            marginal_z_max: 3.0,
            feasible_min: 0.99,
            contraction_slack_max: 1e-6,
            psd_defect_min: -1e-8,
            ratio_max: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    pub system: Option<SystemConfig>,
    pub simulation: SimulationSection,
    pub initial: Option<InitialSection>,
    pub space: Option<SpaceSection>,
    pub mimicking: MimickingSection,
    pub control: Option<ControlSection>,
    pub mollify: MollifySection,
    pub picard: PicardSection,
    pub tolerances: Tolerances,
    /// Verbatim source text, embedded in the manifest so an artifact
    /// directory reconstructs its run without the original file.
    pub raw_text: String,
}

impl ExperimentConfig {
    pub fn time_grid(&self) -> TimeGrid {
        // Validated at parse time.
        TimeGrid::new(self.simulation.horizon, self.simulation.n_steps).unwrap()
    }
}

fn offset_to_line_col(src: &str, offset: usize) -> (usize, usize) {
    let mut line = 1;
    let mut col = 1;
    for (i, ch) in src.char_indices() {
        if i >= offset {
            break;
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}

/// Best-effort location of a section header or a key inside it.
fn locate(src: &str, section: &str, key: Option<&str>) -> (usize, usize) {
    let header = format!("[{section}]");
    let mut in_section = false;
    let mut section_line = None;
    for (idx, raw) in src.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.starts_with('[') {
            in_section = trimmed == header;
            if in_section && section_line.is_none() {
                section_line = Some(idx + 1);
            }
            continue;
        }
        if in_section {
            if let (Some(key), Some(eq)) = (key, raw.find('=')) {
                if raw[..eq].trim() == key {
                    let col = raw.find(key).map_or(1, |c| c + 1);
                    return (idx + 1, col);
                }
            }
        }
    }
    (section_line.unwrap_or(1), 1)
}

/// One section of the raw TOML, consumed key by key so that leftovers can
/// be rejected.
struct SectionReader<'a> {
    src: &'a str,
    name: &'static str,
    table: toml::Table,
}

impl<'a> SectionReader<'a> {
    fn fail(&self, key: Option<&str>, message: String) -> ParseFail {
        let (line, col) = locate(self.src, self.name, key);
        ParseFail { line, col, message }
    }

    fn missing(&self, key: &str) -> ParseFail {
        self.fail(
            None,
            format!("missing required key `{key}` in [{}]", self.name),
        )
    }

    fn f64(&mut self, key: &str) -> Result<f64, ParseFail> {
        match self.table.remove(key) {
            Some(toml::Value::Float(v)) => Ok(v),
            Some(toml::Value::Integer(v)) => Ok(v as f64),
            Some(other) => Err(self.fail(
                Some(key),
                format!("`{key}` must be a number, got {}", other.type_str()),
            )),
            None => Err(self.missing(key)),
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, ParseFail> {
        if self.table.contains_key(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    fn finite_f64(&mut self, key: &str) -> Result<f64, ParseFail> {
        let v = self.f64(key)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.fail(Some(key), format!("`{key}` must be finite")))
        }
    }

    fn finite_f64_or(&mut self, key: &str, default: f64) -> Result<f64, ParseFail> {
        let v = self.f64_or(key, default)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.fail(Some(key), format!("`{key}` must be finite")))
        }
    }

    fn integer(&mut self, key: &str) -> Result<i64, ParseFail> {
        match self.table.remove(key) {
            Some(toml::Value::Integer(v)) => Ok(v),
            Some(other) => Err(self.fail(
                Some(key),
                format!("`{key}` must be an integer, got {}", other.type_str()),
            )),
            None => Err(self.missing(key)),
        }
    }

    fn usize_min(&mut self, key: &str, min: usize) -> Result<usize, ParseFail> {
        let v = self.integer(key)?;
        if v < min as i64 {
            return Err(self.fail(Some(key), format!("`{key}` must be at least {min}, got {v}")));
        }
        Ok(v as usize)
    }

    fn usize_min_or(&mut self, key: &str, min: usize, default: usize) -> Result<usize, ParseFail> {
        if self.table.contains_key(key) {
            self.usize_min(key, min)
        } else {
            Ok(default)
        }
    }

    fn u64(&mut self, key: &str) -> Result<u64, ParseFail> {
        let v = self.integer(key)?;
        if v < 0 {
            return Err(self.fail(Some(key), format!("`{key}` must be non-negative, got {v}")));
        }
        Ok(v as u64)
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64, ParseFail> {
        if self.table.contains_key(key) {
            self.u64(key)
        } else {
            Ok(default)
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, ParseFail> {
        match self.table.remove(key) {
            Some(toml::Value::Boolean(v)) => Ok(v),
            Some(other) => Err(self.fail(
                Some(key),
                format!("`{key}` must be a boolean, got {}", other.type_str()),
            )),
            None => Ok(default),
        }
    }

    fn string(&mut self, key: &str) -> Result<String, ParseFail> {
        match self.table.remove(key) {
            Some(toml::Value::String(v)) => Ok(v),
            Some(other) => Err(self.fail(
                Some(key),
                format!("`{key}` must be a string, got {}", other.type_str()),
            )),
            None => Err(self.missing(key)),
        }
    }

    fn f64_array_or(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, ParseFail> {
        match self.table.remove(key) {
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .map(|item| match item {
                    toml::Value::Float(v) => Ok(v),
                    toml::Value::Integer(v) => Ok(v as f64),
                    other => Err(self.fail(
                        Some(key),
                        format!("`{key}` must contain numbers, got {}", other.type_str()),
                    )),
                })
                .collect(),
            Some(other) => Err(self.fail(
                Some(key),
                format!("`{key}` must be an array, got {}", other.type_str()),
            )),
            None => Ok(default.to_vec()),
        }
    }

    fn finish(self) -> Result<(), ParseFail> {
        if let Some(key) = self.table.keys().next() {
            let key = key.clone();
            return Err(self.fail(Some(&key), format!("unknown key `{key}` in [{}]", self.name)));
        }
        Ok(())
    }
}

fn take_section<'a>(
    src: &'a str,
    root: &mut toml::Table,
    name: &'static str,
) -> Result<Option<SectionReader<'a>>, ParseFail> {
    match root.remove(name) {
        Some(toml::Value::Table(table)) => Ok(Some(SectionReader { src, name, table })),
        Some(_) => {
            let (line, col) = locate(src, name, None);
            Err(ParseFail {
                line,
                col,
                message: format!("`{name}` must be a `[{name}]` section"),
            })
        }
        None => Ok(None),
    }
}

fn require_section<'a>(
    src: &'a str,
    root: &mut toml::Table,
    name: &'static str,
    kind: ExperimentKind,
) -> Result<SectionReader<'a>, ParseFail> {
    take_section(src, root, name)?.ok_or_else(|| ParseFail {
        line: 1,
        col: 1,
        message: format!(
            "experiment kind `{}` requires a [{name}] section",
            kind.as_str()
        ),
    })
}

pub fn parse_config(src: &str) -> Result<ExperimentConfig, ParseFail> {
    let mut root: toml::Table = src.parse().map_err(|e: toml::de::Error| {
        let (line, col) = e
            .span()
            .map_or((1, 1), |span| offset_to_line_col(src, span.start));
        ParseFail {
            line,
            col,
            message: e.message().to_string(),
        }
    })?;

    // [experiment]
    let mut experiment = require_section(src, &mut root, "experiment", ExperimentKind::Picard)
        .map_err(|_| ParseFail {
            line: 1,
            col: 1,
            message: "missing [experiment] section".into(),
        })?;
    let kind_name = experiment.string("kind")?;
    let kind = match kind_name.as_str() {
        "hierarchy_check" => ExperimentKind::HierarchyCheck,
        "mimicking" => ExperimentKind::Mimicking,
        "mfc_compare" => ExperimentKind::MfcCompare,
        "mollify_suite" => ExperimentKind::MollifySuite,
        "picard" => ExperimentKind::Picard,
        other => {
            return Err(experiment.fail(
                Some("kind"),
                format!(
                    "unknown experiment kind `{other}` (expected hierarchy_check, mimicking, \
                     mfc_compare, mollify_suite, or picard)"
                ),
            ))
        }
    };
    let output_dir = PathBuf::from(experiment.string("output_dir")?);
    experiment.finish()?;

    // [simulation] — required for every kind: seeds and sizes always present.
    let mut sim = require_section(src, &mut root, "simulation", kind)?;
    let n_particles = sim.usize_min("n_particles", 1)?;
    let n_scenarios = sim.usize_min("n_scenarios", 1)?;
    let horizon = sim.f64("horizon")?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(sim.fail(Some("horizon"), "`horizon` must be positive and finite".into()));
    }
    let n_steps = sim.usize_min("n_steps", 1)?;
    let master_seed = sim.u64("master_seed")?;
    let first_scenario = sim.u64_or("first_scenario", 0)?;
    sim.finish()?;
    let simulation = SimulationSection {
        n_particles,
        n_scenarios,
        horizon,
        n_steps,
        master_seed,
        first_scenario,
    };
    TimeGrid::new(horizon, n_steps).map_err(|e| ParseFail {
        line: locate(src, "simulation", None).0,
        col: 1,
        message: format!("invalid time grid: {e}"),
    })?;

    // [system]
    let needs_system = matches!(
        kind,
        ExperimentKind::HierarchyCheck | ExperimentKind::Mimicking | ExperimentKind::Picard
    );
    let system = if needs_system {
        let mut sec = require_section(src, &mut root, "system", kind)?;
        let family = sec.string("family")?;
        let built = match family.as_str() {
            "mean_reverting" => SystemConfig::MeanReverting {
                rate: sec.finite_f64("rate")?,
                mean_weight: sec.finite_f64("mean_weight")?,
                sigma: sec.finite_f64("sigma")?,
                gamma: sec.finite_f64("gamma")?,
            },
            "constant" => SystemConfig::Constant {
                drift: sec.finite_f64("drift")?,
                sigma: sec.finite_f64("sigma")?,
                gamma: sec.finite_f64("gamma")?,
            },
            "polysine" => SystemConfig::PolySine {
                b0: sec.finite_f64("b0")?,
                b1: sec.finite_f64("b1")?,
                b2: sec.finite_f64("b2")?,
                s0: sec.finite_f64("s0")?,
                s1: sec.finite_f64("s1")?,
                g0: sec.finite_f64("g0")?,
                g1: sec.finite_f64("g1")?,
            },
            other => {
                return Err(sec.fail(
                    Some("family"),
                    format!(
                        "unknown coefficient family `{other}` (expected mean_reverting, \
                         constant, or polysine)"
                    ),
                ))
            }
        };
        sec.finish()?;
        Some(built)
    } else {
        None
    };

    // [initial]
    let needs_initial = matches!(
        kind,
        ExperimentKind::HierarchyCheck | ExperimentKind::Mimicking | ExperimentKind::Picard
    );
    let initial = if needs_initial {
        let mut sec = require_section(src, &mut root, "initial", kind)?;
        let ikind = sec.string("kind")?;
        let built = match ikind.as_str() {
            "gaussian" => {
                let mean = sec.finite_f64("mean")?;
                let std_dev = sec.f64("std_dev")?;
                if !(std_dev.is_finite() && std_dev > 0.0) {
                    return Err(
                        sec.fail(Some("std_dev"), "`std_dev` must be positive and finite".into())
                    );
                }
                InitialSection::Gaussian { mean, std_dev }
            }
            "point" => InitialSection::Point {
                center: sec.finite_f64("center")?,
            },
            other => {
                return Err(sec.fail(
                    Some("kind"),
                    format!("unknown initial law `{other}` (expected gaussian or point)"),
                ))
            }
        };
        sec.finish()?;
        Some(built)
    } else {
        None
    };

    // [space] — hierarchy only.
    let space = if kind == ExperimentKind::HierarchyCheck {
        let mut sec = require_section(src, &mut root, "space", kind)?;
        let x_lo = sec.finite_f64("x_lo")?;
        let x_hi = sec.finite_f64("x_hi")?;
        if x_lo >= x_hi {
            return Err(sec.fail(Some("x_hi"), "`x_hi` must exceed `x_lo`".into()));
        }
        let n_cells = sec.usize_min("n_cells", 2)?;
        let basis_lo = sec.finite_f64_or("basis_lo", x_lo * 0.5)?;
        let basis_hi = sec.finite_f64_or("basis_hi", x_hi * 0.5)?;
        if basis_lo >= basis_hi {
            return Err(sec.fail(Some("basis_hi"), "`basis_hi` must exceed `basis_lo`".into()));
        }
        let basis_count = sec.usize_min_or("basis_count", 1, 8)?;
        sec.finish()?;
        Some(SpaceSection {
            x_lo,
            x_hi,
            n_cells,
            basis_lo,
            basis_hi,
            basis_count,
        })
    } else {
        None
    };

    // [mimicking] — optional; defaults otherwise.
    let mimicking = if kind == ExperimentKind::Mimicking {
        if let Some(mut sec) = take_section(src, &mut root, "mimicking")? {
            let drift_noise = sec.finite_f64_or("drift_noise", 1.0)?;
            let own_noise_volatility = sec.bool_or("own_noise_volatility", false)?;
            let bandwidth_scale = sec.f64_or("bandwidth_scale", 1.0)?;
            if !(bandwidth_scale.is_finite() && bandwidth_scale > 0.0) {
                return Err(sec.fail(
                    Some("bandwidth_scale"),
                    "`bandwidth_scale` must be positive and finite".into(),
                ));
            }
            let max_samples_per_slice = sec.usize_min_or("max_samples_per_slice", 100, 16_384)?;
            let compare_fractions =
                sec.f64_array_or("compare_fractions", &[0.25, 0.5, 1.0])?;
            if compare_fractions.is_empty()
                || compare_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
            {
                return Err(sec.fail(
                    Some("compare_fractions"),
                    "`compare_fractions` must be a non-empty array of values in (0, 1]".into(),
                ));
            }
            sec.finish()?;
            MimickingSection {
                drift_noise,
                own_noise_volatility,
                bandwidth_scale,
                max_samples_per_slice,
                compare_fractions,
            }
        } else {
            MimickingSection {
                drift_noise: 1.0,
                own_noise_volatility: false,
                bandwidth_scale: 1.0,
                max_samples_per_slice: 16_384,
                compare_fractions: vec![0.25, 0.5, 1.0],
            }
        }
    } else {
        MimickingSection {
            drift_noise: 1.0,
            own_noise_volatility: false,
            bandwidth_scale: 1.0,
            max_samples_per_slice: 16_384,
            compare_fractions: vec![0.25, 0.5, 1.0],
        }
    };

    // [control] — conversion experiment only.
    let control = if kind == ExperimentKind::MfcCompare {
        let mut sec = require_section(src, &mut root, "control", kind)?;
        let action_lo = sec.finite_f64("action_lo")?;
        let action_hi = sec.finite_f64("action_hi")?;
        if action_lo >= action_hi {
            return Err(sec.fail(Some("action_hi"), "`action_hi` must exceed `action_lo`".into()));
        }
        let sigma = sec.finite_f64("sigma")?;
        let gamma = sec.finite_f64("gamma")?;
        let initial_std = sec.f64("initial_std")?;
        if !(initial_std.is_finite() && initial_std > 0.0) {
            return Err(
                sec.fail(Some("initial_std"), "`initial_std` must be positive and finite".into())
            );
        }
        let noise_scale = sec.f64_or("noise_scale", 1.0)?;
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(sec.fail(
                Some("noise_scale"),
                "`noise_scale` must be non-negative and finite".into(),
            ));
        }
        let feedback_gain =
            sec.finite_f64_or("feedback_gain", 0.0)?;
        sec.finish()?;
        Some(ControlSection {
            action_lo,
            action_hi,
            sigma,
            gamma,
            initial_std,
            noise_scale,
            feedback_gain,
        })
    } else {
        None
    };

    // [mollify] — optional.
    let mollify = if kind == ExperimentKind::MollifySuite {
        if let Some(mut sec) = take_section(src, &mut root, "mollify")? {
            let n_draws = sec.usize_min_or("n_draws", 1, 50)?;
            let atoms = sec.usize_min_or("atoms", 2, 40)?;
            let cutoff_atoms = sec.usize_min_or("cutoff_atoms", 2, 200)?;
            sec.finish()?;
            MollifySection {
                n_draws,
                atoms,
                cutoff_atoms,
            }
        } else {
            MollifySection {
                n_draws: 50,
                atoms: 40,
                cutoff_atoms: 200,
            }
        }
    } else {
        MollifySection {
            n_draws: 50,
            atoms: 40,
            cutoff_atoms: 200,
        }
    };

    // [picard] — optional.
    let picard = if kind == ExperimentKind::Picard {
        if let Some(mut sec) = take_section(src, &mut root, "picard")? {
            let max_iterations = sec.usize_min_or("max_iterations", 2, 40)?;
            let tolerance = sec.f64_or("tolerance", 1e-8)?;
            if !(tolerance.is_finite() && tolerance > 0.0) {
                return Err(
                    sec.fail(Some("tolerance"), "`tolerance` must be positive and finite".into())
                );
            }
            sec.finish()?;
            PicardSection {
                max_iterations,
                tolerance,
            }
        } else {
            PicardSection {
                max_iterations: 40,
                tolerance: 1e-8,
            }
        }
    } else {
        PicardSection {
            max_iterations: 40,
            tolerance: 1e-8,
        }
    };

    // [tolerances] — optional overrides, accepted for any kind.
    let mut tolerances = Tolerances::default();
    if let Some(mut sec) = take_section(src, &mut root, "tolerances")? {
        tolerances.w1_max = sec.f64_or("w1_max", tolerances.w1_max)?;
        tolerances.weak_residual_max =
            sec.f64_or("weak_residual_max", tolerances.weak_residual_max)?;
        tolerances.fpe_z_max = sec.f64_or("fpe_z_max", tolerances.fpe_z_max)?;
        tolerances.functional_z_max =
            sec.f64_or("functional_z_max", tolerances.functional_z_max)?;
        tolerances.pooled_w1_max = sec.f64_or("pooled_w1_max", tolerances.pooled_w1_max)?;
        tolerances.gap_z_max = sec.f64_or("gap_z_max", tolerances.gap_z_max)?;
        tolerances.marginal_z_max = sec.f64_or("marginal_z_max", tolerances.marginal_z_max)?;
        tolerances.feasible_min = sec.f64_or("feasible_min", tolerances.feasible_min)?;
        tolerances.contraction_slack_max =
            sec.f64_or("contraction_slack_max", tolerances.contraction_slack_max)?;
        tolerances.psd_defect_min = sec.f64_or("psd_defect_min", tolerances.psd_defect_min)?;
        tolerances.ratio_max = sec.f64_or("ratio_max", tolerances.ratio_max)?;
        sec.finish()?;
    }

    // Anything left over is either an unknown section or one that this
    // experiment kind does not read; both are configuration mistakes.
    if let Some(name) = root.keys().next() {
        let (line, col) = locate(src, name, None);
        return Err(ParseFail {
            line,
            col,
            message: format!(
                "section `[{name}]` is not used by experiment kind `{}`",
                kind.as_str()
            ),
        });
    }

    Ok(ExperimentConfig {
        kind,
        output_dir,
        system,
        simulation,
        initial,
        space,
        mimicking,
        control,
        mollify,
        picard,
        tolerances,
        raw_text: src.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[experiment]
kind = "picard"
output_dir = "out"

[simulation]
n_particles = 100
n_scenarios = 2
horizon = 0.5
n_steps = 10
master_seed = 7

[system]
family = "constant"
drift = 0.0
sigma = 0.1
gamma = 0.0

[initial]
kind = "point"
center = 0.0
"#;

    #[test]
    fn a_complete_config_parses() {
        let cfg = parse_config(GOOD).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Picard);
        assert_eq!(cfg.simulation.master_seed, 7);
        assert_eq!(cfg.picard.max_iterations, 40);
    }

    #[test]
    fn missing_seed_is_located_at_the_simulation_section() {
        let text = GOOD.replace("master_seed = 7\n", "");
        let err = parse_config(&text).unwrap_err();
        assert!(err.message.contains("master_seed"), "{}", err.message);
        assert!(err.line > 1);
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let err = parse_config("[experiment\nkind = \"picard\"").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.col >= 1);
    }

    #[test]
    fn unknown_keys_families_and_sections_are_rejected() {
        let err = parse_config(&GOOD.replace("center = 0.0", "center = 0.0\nwobble = 1")).unwrap_err();
        assert!(err.message.contains("wobble"), "{}", err.message);

        let err = parse_config(&GOOD.replace("\"constant\"", "\"pony\"")).unwrap_err();
        assert!(err.message.contains("pony"), "{}", err.message);

        let err = parse_config(&format!("{GOOD}\n[control]\naction_lo = 0.0\n")).unwrap_err();
        assert!(err.message.contains("control"), "{}", err.message);
    }

    #[test]
    fn zero_particles_are_rejected() {
        let err = parse_config(&GOOD.replace("n_particles = 100", "n_particles = 0")).unwrap_err();
        assert!(err.message.contains("n_particles"), "{}", err.message);
    }
}
