//! Config files, the classify / run / sweep / estimate-cgn commands, and
//! their on-disk outputs.
//!
//! Configs are INI-like: `[block]` headers followed by `key = value` lines.
//! `#` starts a comment. Unknown blocks or keys are rejected.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::diagnostics::{self, BoundCaps, BoundCheckSummary, Functional};
use crate::elliptic::EllipticOptions;
use crate::error::{Error, Result};
use crate::gn::{estimate_cgn, CgnEstimate, GnInstance};
use crate::grid::{integrate, Grid};
use crate::integrator::{
    make_initial_with, run, DiffusionMode, InitialKind, RunHooks, SignalInit, Status,
    StepperOptions, Verdict,
};
use crate::kinetics::{classify_values, estimate_mu, MuSearch, RegimeReport, SourceSpec};
use crate::operators::FluxScheme;

pub const EXIT_BOUNDED: i32 = 0;
pub const EXIT_BLOWUP: i32 = 2;
pub const EXIT_FAILED: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_USAGE: i32 = 64;

pub const PHASE_HEADER: &str = "sweep_value,regime,verdict,max_u_linf,max_u_l1,M,gap";

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("grid", &["nx", "ny", "lx", "ly"]),
    ("physics", &["tau", "chi"]),
    ("source", &["family", "a", "b", "theta", "gamma", "path"]),
    (
        "initial",
        &["kind", "value", "center", "width", "mass", "amplitude", "base", "seed", "v0"],
    ),
    (
        "run",
        &[
            "t_end",
            "cfl",
            "dt_min",
            "dt_max",
            "linf_cap",
            "collapse_fraction",
            "collapse_radius",
            "collapse_time",
            "record_every",
            "snapshot_every",
            "flux",
            "diffusion",
            "elliptic_tol",
        ],
    ),
    (
        "classify",
        &["c_gn", "c_gn_budget", "gn_floor_budget", "c_gn_scan", "u0_mass", "seed"],
    ),
    ("sweep", &["parameter", "values", "parallel"]),
];

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but uninterpreted `block.key = value` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

fn known_key(block: &str, key: &str) -> bool {
    KNOWN_KEYS
        .iter()
        .any(|(b, keys)| *b == block && keys.contains(&key))
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut block: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config { line, message: "unterminated block header".into() })?
                    .trim();
                if !KNOWN_KEYS.iter().any(|(b, _)| *b == name) {
                    return Err(Error::Config { line, message: format!("unknown block [{name}]") });
                }
                block = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, found {content:?}"),
            })?;
            let key = key.trim();
            let Some(b) = &block else {
                return Err(Error::Config { line, message: format!("key {key:?} outside any block") });
            };
            if !known_key(b, key) {
                return Err(Error::Config { line, message: format!("unknown key {key:?} in [{b}]") });
            }
            let full = format!("{b}.{key}");
            let value = value.split_whitespace().collect::<Vec<_>>().join(" ");
            if entries.insert(full.clone(), Entry { value, line }).is_some() {
                return Err(Error::Config { line, message: format!("duplicate key {full}") });
            }
        }
        Ok(Self { entries })
    }

    /// Sets `block.key`, e.g. for `--seed` or a sweep value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (b, k) = key
            .split_once('.')
            .filter(|(b, k)| known_key(b, k))
            .ok_or_else(|| Error::Config { line: 0, message: format!("unknown key {key:?}") })?;
        let line = self.entries.get(key).map_or(0, |e| e.line);
        self.entries.insert(format!("{b}.{k}"), Entry { value: value.trim().to_string(), line });
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    /// One sorted `block.key=value` line per entry.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .fold(String::new(), |mut s, (k, e)| {
                let _ = writeln!(s, "{k}={}", e.value);
                s
            })
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn config_err(&self, key: &str, message: impl fmt::Display) -> Error {
        Error::Config { line: self.line(key), message: format!("{key}: {message}") }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| self.config_err(key, format!("cannot parse {v:?}: {e}"))),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.parsed(key)?
            .ok_or_else(|| Error::Config { line: 0, message: format!("missing required key {key}") })
    }

    fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        v.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|w| !w.is_empty())
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|e| self.config_err(key, format!("cannot parse {w:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Which `C_GN` enters the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CgnChoice {
    Value(f64),
    /// Use the estimator's lower bound. This makes the threshold optimistic.
    Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyConfig {
    pub c_gn: CgnChoice,
    pub c_gn_budget: usize,
    /// Budget for the sanity-floor estimate printed next to a supplied
    /// `C_GN`; 0 disables it.
    pub gn_floor_budget: usize,
    /// `(lo, hi, n)`: also classify at `n` log-spaced `C_GN` values.
    pub c_gn_scan: Option<(f64, f64, usize)>,
    pub u0_mass: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stepper: StepperOptions,
    pub record_every: usize,
    /// 0 disables snapshots.
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
    pub parallel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub base_dir: Option<PathBuf>,
    pub grid: Grid,
    pub initial: InitialKind,
    pub signal_init: SignalInit,
    pub run: RunConfig,
    pub classify: ClassifyConfig,
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        Self::from_raw(RawConfig::parse(text)?, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn from_raw(raw: RawConfig, base_dir: Option<&Path>) -> Result<Self> {
        let grid = Grid::new(
            raw.required("grid.nx")?,
            raw.required("grid.ny")?,
            raw.or("grid.lx", 1.0)?,
            raw.or("grid.ly", 1.0)?,
        )
        .map_err(|e| raw.config_err("grid.nx", e))?;

        let tau: f64 = raw.or("physics.tau", 0.0)?;
        let chi: f64 = raw.or("physics.chi", 1.0)?;
        if !(chi > 0.0 && chi.is_finite()) {
            return Err(raw.config_err("physics.chi", "must be positive"));
        }
        let source = parse_source(&raw, base_dir)?;
        let (initial, signal_init) = parse_initial(&raw, &grid)?;

        let defaults = StepperOptions::default();
        let flux = match raw.get("run.flux").unwrap_or("upwind") {
            "upwind" => FluxScheme::Upwind,
            "central" => FluxScheme::Central,
            other => return Err(raw.config_err("run.flux", format!("unknown scheme {other:?}"))),
        };
        let diffusion = match raw.get("run.diffusion").unwrap_or("implicit") {
            "implicit" => DiffusionMode::Implicit,
            "explicit" => DiffusionMode::Explicit,
            other => return Err(raw.config_err("run.diffusion", format!("unknown mode {other:?}"))),
        };
        let stepper = StepperOptions {
            tau,
            chi,
            cfl: raw.or("run.cfl", defaults.cfl)?,
            dt_min: raw.or("run.dt_min", defaults.dt_min)?,
            dt_max: raw.or("run.dt_max", defaults.dt_max)?,
            blowup_linf_cap: raw.or("run.linf_cap", defaults.blowup_linf_cap)?,
            collapse_fraction: raw.or("run.collapse_fraction", defaults.collapse_fraction)?,
            collapse_radius: raw.or("run.collapse_radius", defaults.collapse_radius)?,
            collapse_time: raw.or("run.collapse_time", defaults.collapse_time)?,
            t_end: raw.required("run.t_end")?,
            source,
            flux,
            diffusion,
            elliptic: EllipticOptions {
                tol: raw.or("run.elliptic_tol", defaults.elliptic.tol)?,
                max_iters: None,
            },
        };
        stepper.validate().map_err(|e| raw.config_err("run.t_end", e))?;
        let run = RunConfig {
            stepper,
            record_every: raw.or("run.record_every", 1)?,
            snapshot_every: raw.or("run.snapshot_every", 0)?,
        };
        if run.record_every == 0 {
            return Err(raw.config_err("run.record_every", "must be at least 1"));
        }

        let c_gn = match raw.get("classify.c_gn").unwrap_or("estimate") {
            "estimate" => CgnChoice::Estimate,
            _ => {
                let c: f64 = raw.required("classify.c_gn")?;
                if !(c > 0.0 && c.is_finite()) {
                    return Err(raw.config_err("classify.c_gn", "must be positive"));
                }
                CgnChoice::Value(c)
            }
        };
        let c_gn_scan = match raw.floats("classify.c_gn_scan")? {
            None => None,
            Some(v) if v.len() == 3 && v[0] > 0.0 && v[1] >= v[0] && v[2] >= 1.0 && v[2].fract() == 0.0 => {
                Some((v[0], v[1], v[2] as usize))
            }
            Some(_) => {
                return Err(raw.config_err("classify.c_gn_scan", "expected `lo hi n` with 0 < lo <= hi, n >= 1"))
            }
        };
        let u0_mass: Option<f64> = raw.parsed("classify.u0_mass")?;
        if u0_mass.is_some_and(|m| !(m >= 0.0 && m.is_finite())) {
            return Err(raw.config_err("classify.u0_mass", "must be >= 0"));
        }
        let classify = ClassifyConfig {
            c_gn,
            c_gn_budget: raw.or("classify.c_gn_budget", 256)?,
            gn_floor_budget: raw.or("classify.gn_floor_budget", 256)?,
            c_gn_scan,
            u0_mass,
            seed: raw.or("classify.seed", 0)?,
        };
        if classify.c_gn == CgnChoice::Estimate && classify.c_gn_budget == 0 {
            return Err(raw.config_err("classify.c_gn_budget", "must be positive"));
        }

        let sweep = match raw.get("sweep.parameter") {
            None => None,
            Some(p) => {
                let (b, k) = p
                    .split_once('.')
                    .filter(|(b, k)| *b != "sweep" && known_key(b, k))
                    .ok_or_else(|| raw.config_err("sweep.parameter", format!("cannot sweep {p:?}")))?;
                let parallel: usize = raw.or("sweep.parallel", 1)?;
                Some(SweepConfig {
                    parameter: format!("{b}.{k}"),
                    values: raw.floats("sweep.values")?.unwrap_or_default(),
                    parallel: parallel.max(1),
                })
            }
        };

        Ok(Self {
            base_dir: base_dir.map(Path::to_path_buf),
            raw,
            grid,
            initial,
            signal_init,
            run,
            classify,
            sweep,
        })
    }

    /// Re-parses with `key` replaced by `value`.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut raw = self.raw.clone();
        raw.set(key, value)?;
        Self::from_raw(raw, self.base_dir.as_deref())
    }

    /// Applies `--seed` to every seeded component.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        let mut raw = self.raw.clone();
        raw.set("initial.seed", &seed.to_string())?;
        raw.set("classify.seed", &seed.to_string())?;
        Self::from_raw(raw, self.base_dir.as_deref())
    }

    pub fn hash(&self) -> String {
        self.raw.hash()
    }

    pub fn source(&self) -> &SourceSpec {
        &self.run.stepper.source
    }
}

fn parse_source(raw: &RawConfig, base_dir: Option<&Path>) -> Result<SourceSpec> {
    let family = raw.get("source.family").unwrap_or("zero");
    let text = if family.contains(' ') {
        family.to_string()
    } else {
        let num = |k: &str| -> Result<f64> { raw.required(&format!("source.{k}")) };
        match family {
            "zero" => "zero".to_string(),
            "logistic" => format!("logistic {} {} {}", num("a")?, num("b")?, num("theta")?),
            "sublog" => format!("sublog {} {} {}", num("a")?, num("b")?, num("gamma")?),
            "subloglog" => format!("subloglog {} {}", num("a")?, num("b")?),
            "tabulated" => format!(
                "tabulated {}",
                raw.get("source.path")
                    .ok_or_else(|| raw.config_err("source.path", "missing table path"))?
            ),
            other => return Err(raw.config_err("source.family", format!("unknown family {other:?}"))),
        }
    };
    SourceSpec::parse(&text, base_dir).map_err(|e| raw.config_err("source.family", e))
}

fn parse_initial(raw: &RawConfig, grid: &Grid) -> Result<(InitialKind, SignalInit)> {
    let kind = match raw.get("initial.kind").unwrap_or("constant") {
        "constant" => InitialKind::Constant { value: raw.or("initial.value", 1.0)? },
        "bump" => {
            let center = match raw.floats("initial.center")? {
                None => (0.5 * grid.lx(), 0.5 * grid.ly()),
                Some(c) if c.len() == 2 => (c[0], c[1]),
                Some(_) => return Err(raw.config_err("initial.center", "expected `x y`")),
            };
            InitialKind::GaussianBump {
                center,
                width: raw.required("initial.width")?,
                mass: raw.required("initial.mass")?,
            }
        }
        "random" => InitialKind::RandomPerturbation {
            seed: raw.or("initial.seed", 0)?,
            amplitude: raw.or("initial.amplitude", 0.1)?,
            base: raw.or("initial.base", 1.0)?,
        },
        other => return Err(raw.config_err("initial.kind", format!("unknown kind {other:?}"))),
    };
    let signal = match raw.get("initial.v0").unwrap_or("elliptic") {
        "elliptic" => SignalInit::Elliptic,
        _ => SignalInit::Constant(raw.required("initial.v0")?),
    };
    Ok((kind, signal))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Output of the classify command.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutcome {
    pub report: RegimeReport,
    pub c_gn_source: &'static str,
    /// Estimator lower bound printed beside a supplied `C_GN`.
    pub c_gn_floor: Option<f64>,
    pub u0_mass: f64,
    pub scan: Vec<RegimeReport>,
}

impl fmt::Display for ClassifyOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.report)?;
        writeln!(f, "c_gn_source = {}", self.c_gn_source)?;
        if let Some(floor) = self.c_gn_floor {
            writeln!(f, "c_gn_floor = {floor}")?;
            if self.report.c_gn < floor {
                writeln!(f, "warning = supplied c_gn is below the estimated lower bound")?;
            }
        }
        writeln!(f, "u0_mass = {}", self.u0_mass)?;
        for r in &self.scan {
            writeln!(
                f,
                "scan c_gn = {} regime = {} gap = {}",
                r.c_gn,
                r.label(),
                r.gap
            )?;
        }
        Ok(())
    }
}

/// Classifies without writing anything.
pub fn classify_config(cfg: &ExperimentConfig) -> Result<ClassifyOutcome> {
    let cc = &cfg.classify;
    let stepper = &cfg.run.stepper;
    let u0_mass = match cc.u0_mass {
        Some(m) => m,
        None => {
            let s = make_initial_with(
                &cfg.initial,
                cfg.grid,
                stepper.tau,
                SignalInit::Constant(0.0),
                &stepper.elliptic,
            )?;
            integrate(&s.u)?
        }
    };
    let inst = GnInstance::new(cfg.grid);
    let (c_gn, c_gn_source, c_gn_floor) = match cc.c_gn {
        CgnChoice::Value(c) => {
            let floor = if cc.gn_floor_budget > 0 {
                Some(estimate_cgn(&inst, cc.gn_floor_budget, cc.seed)?.lower_bound)
            } else {
                None
            };
            (c, "configured", floor)
        }
        CgnChoice::Estimate => {
            let est = estimate_cgn(&inst, cc.c_gn_budget, cc.seed)?;
            (est.lower_bound, "estimate (lower bound, threshold optimistic)", None)
        }
    };
    let search = MuSearch::default();
    let mu = estimate_mu(&stepper.source, &search)?;
    let m = match crate::kinetics::compute_m(&stepper.source, u0_mass, cfg.grid.area()) {
        Ok(m) => m,
        Err(Error::UnboundedSource(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let classify_at = |c: f64| {
        let mut r = classify_values(mu.lower, stepper.chi, m, c);
        r.mu_trend = (!mu.closed_form).then_some(mu.trend);
        if !mu.closed_form && mu.lower != mu.numeric {
            r.reason
                .get_or_insert_with(|| format!("numeric mu tail is {}, using lower end", mu.trend));
        }
        r
    };
    let report = classify_at(c_gn);
    let scan = match cc.c_gn_scan {
        None => Vec::new(),
        Some((lo, hi, n)) => (0..n)
            .map(|k| {
                let frac = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
                classify_at(lo * (hi / lo).powf(frac))
            })
            .collect(),
    };
    Ok(ClassifyOutcome { report, c_gn_source, c_gn_floor, u0_mass, scan })
}

/// Classifies and writes `regime_report.txt` into `out`.
pub fn cmd_classify(cfg: &ExperimentConfig, out: &Path) -> Result<ClassifyOutcome> {
    let outcome = classify_config(cfg)?;
    create_dir(out)?;
    write_file(&out.join("regime_report.txt"), &outcome.to_string())?;
    Ok(outcome)
}

/// Result of one simulation, as written to `verdict.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictSummary {
    pub verdict: Verdict,
    pub status: Status,
    pub report: RegimeReport,
    pub bounds: BoundCheckSummary,
    pub wall_time: f64,
    pub step_count: usize,
    pub t_final: f64,
    pub config_hash: String,
    pub error: Option<String>,
}

impl VerdictSummary {
    pub fn exit_code(&self) -> i32 {
        exit_code(self.verdict)
    }
}

pub fn exit_code(verdict: Verdict) -> i32 {
    match verdict {
        Verdict::Bounded => EXIT_BOUNDED,
        Verdict::Blowup => EXIT_BLOWUP,
        Verdict::Inconclusive => EXIT_FAILED,
    }
}

impl fmt::Display for VerdictSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.verdict)?;
        writeln!(f, "status = {:?}", self.status)?;
        writeln!(f, "t_final = {}", self.t_final)?;
        writeln!(f, "step_count = {}", self.step_count)?;
        writeln!(f, "wall_time_s = {:.3}", self.wall_time)?;
        writeln!(f, "config_hash = {}", self.config_hash)?;
        if let Some(e) = &self.error {
            writeln!(f, "error = {e}")?;
        }
        for (func, v) in &self.bounds.maxima {
            writeln!(f, "max_{} = {v}", func.name())?;
        }
        match self.bounds.mass_within_m {
            Some(ok) => writeln!(f, "mass_within_M = {ok}")?,
            None => writeln!(f, "mass_within_M = n/a")?,
        }
        writeln!(f, "late_linf_growth = {}", self.bounds.late_growth)?;
        writeln!(f, "growth_alarm = {}", self.bounds.growth_alarm)?;
        writeln!(f, "diverged = {}", self.bounds.diverged)?;
        write!(f, "{}", self.report)
    }
}

/// Simulates, writing `diagnostics.csv`, `verdict.txt` and any snapshots.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<VerdictSummary> {
    let started = Instant::now();
    let report = classify_config(cfg)?.report;
    create_dir(out)?;
    let stepper = &cfg.run.stepper;
    let initial = make_initial_with(&cfg.initial, cfg.grid, stepper.tau, cfg.signal_init, &stepper.elliptic)?;

    let csv_path = out.join("diagnostics.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", diagnostics::CSV_HEADER).map_err(|e| Error::io(&csv_path, e))?;

    let snap_every = cfg.run.snapshot_every;
    let snap_dir = out.join("snapshots");
    let save_snapshot = |s: &crate::integrator::SimState| -> Result<()> {
        s.u.save_snapshot(&snap_dir.join(format!("u_{:08}.txt", s.step_count)), s.t)?;
        s.v.save_snapshot(&snap_dir.join(format!("v_{:08}.txt", s.step_count)), s.t)
    };
    if snap_every > 0 {
        create_dir(&snap_dir)?;
        save_snapshot(&initial)?;
    }

    let outcome = {
        let csv = &mut csv;
        let csv_path = &csv_path;
        let hooks = RunHooks {
            record_every: cfg.run.record_every,
            on_record: Some(Box::new(move |r| {
                writeln!(csv, "{}", r.csv_row()).map_err(|e| Error::io(csv_path, e))
            })),
            on_step: (snap_every > 0).then(|| {
                Box::new(move |s: &crate::integrator::SimState, _: &crate::integrator::StepInfo| {
                    if s.step_count.is_multiple_of(snap_every) || s.status != Status::Running {
                        save_snapshot(s)?;
                    }
                    Ok(())
                })
                    as Box<
                        dyn FnMut(&crate::integrator::SimState, &crate::integrator::StepInfo) -> Result<()>,
                    >
            }),
        };
        run(initial, stepper, hooks)?
    };
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;

    let caps = BoundCaps {
        caps: vec![(Functional::ULinf, stepper.blowup_linf_cap)],
        ..BoundCaps::default()
    };
    let bounds = diagnostics::check_bounds(&outcome.records, &report, &caps);
    let summary = VerdictSummary {
        verdict: outcome.verdict,
        status: outcome.state.status,
        report,
        bounds,
        wall_time: started.elapsed().as_secs_f64(),
        step_count: outcome.state.step_count,
        t_final: outcome.state.t,
        config_hash: cfg.hash(),
        error: outcome.error,
    };
    write_file(&out.join("verdict.txt"), &summary.to_string())?;
    Ok(summary)
}

/// One row of `phase.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRow {
    pub sweep_value: f64,
    pub regime: String,
    /// `bounded`, `blowup`, `inconclusive`, or `failed`.
    pub verdict: String,
    pub max_u_linf: f64,
    pub max_u_l1: f64,
    pub m: f64,
    pub gap: f64,
}

impl PhaseRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sweep_value, self.regime, self.verdict, self.max_u_linf, self.max_u_l1, self.m, self.gap
        )
    }
}

/// Runs the config once per sweep value and writes `phase.csv`.
///
/// Run `k` writes into `out/run_kkk`. Failures are recorded as `failed`
/// and do not stop the sweep. `parallel` overrides the config's pool size.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, parallel: Option<usize>) -> Result<Vec<PhaseRow>> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Config {
        line: 0,
        message: "config has no [sweep] block".into(),
    })?;
    create_dir(out)?;
    let threads = parallel.unwrap_or(sweep.parallel).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Construction(format!("thread pool: {e}")))?;

    let one = |k: usize, value: f64| -> Result<PhaseRow> {
        let dir = out.join(format!("run_{k:03}"));
        let failed = |regime: String| PhaseRow {
            sweep_value: value,
            regime,
            verdict: "failed".into(),
            max_u_linf: f64::NAN,
            max_u_l1: f64::NAN,
            m: f64::NAN,
            gap: f64::NAN,
        };
        let run_cfg = match cfg.with_override(&sweep.parameter, &value.to_string()) {
            Ok(c) => c,
            Err(_) => return Ok(failed("invalid".into())),
        };
        match cmd_run(&run_cfg, &dir) {
            Ok(s) => Ok(PhaseRow {
                sweep_value: value,
                regime: s.report.regime.to_string(),
                verdict: s.verdict.to_string(),
                max_u_linf: s.bounds.max_of(Functional::ULinf),
                max_u_l1: s.bounds.max_of(Functional::UL1),
                m: s.report.m,
                gap: s.report.gap,
            }),
            Err(e @ Error::Io { .. }) => Err(e),
            Err(e) => {
                let _ = create_dir(&dir).and_then(|_| write_file(&dir.join("error.txt"), &format!("{e}\n")));
                Ok(failed("unknown".into()))
            }
        }
    };
    let rows: Vec<PhaseRow> = pool.install(|| {
        sweep
            .values
            .par_iter()
            .enumerate()
            .map(|(k, &v)| one(k, v))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut text = String::new();
    let _ = writeln!(text, "{PHASE_HEADER}");
    for r in &rows {
        let _ = writeln!(text, "{}", r.csv_row());
    }
    write_file(&out.join("phase.csv"), &text)?;
    Ok(rows)
}

/// Runs the GN estimator on the config's grid and writes `cgn_estimate.txt`.
pub fn cmd_estimate_cgn(cfg: &ExperimentConfig, out: &Path) -> Result<CgnEstimate> {
    let cc = &cfg.classify;
    let est = estimate_cgn(&GnInstance::new(cfg.grid), cc.c_gn_budget.max(1), cc.seed)?;
    create_dir(out)?;
    let text = format!(
        "lower_bound = {}\nbest_trial = {}\nevaluations = {}\nbudget = {}\nseed = {}\nthreshold_at_bound = {}\n",
        est.lower_bound,
        est.best,
        est.evaluations,
        cc.c_gn_budget.max(1),
        cc.seed,
        crate::kinetics::gn_threshold(est.lower_bound),
    );
    write_file(&out.join("cgn_estimate.txt"), &text)?;
    Ok(est)
}

/// Maps a command error to the process exit code.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Config { .. } | Error::Parse(_) | Error::Construction(_) | Error::Domain(_) => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
[grid]
nx = 16
ny = 16

[physics]
tau = 0
chi = 1

[source]
family = logistic 1 1 2

[initial]
kind = bump
width = 0.1
mass = 1

[run]
t_end = 0.05

[classify]
c_gn = 1.0
gn_floor_budget = 0
";

    #[test]
    fn parses_blocks_and_defaults() {
        let cfg = ExperimentConfig::parse(BASE, None).unwrap();
        assert_eq!(cfg.grid.nx(), 16);
        assert_eq!(cfg.run.stepper.cfl, 0.4);
        assert_eq!(cfg.run.record_every, 1);
        assert_eq!(cfg.classify.c_gn, CgnChoice::Value(1.0));
        assert!(matches!(cfg.initial, InitialKind::GaussianBump { center: (c, _), .. } if c == 0.5));
        assert!(cfg.sweep.is_none());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = BASE.replace("chi = 1", "chi = one");
        match ExperimentConfig::parse(&bad, None) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        let bad = BASE.replace("nx = 16", "nz = 16");
        assert!(matches!(ExperimentConfig::parse(&bad, None), Err(Error::Config { line: 2, .. })));
        let bad = format!("{BASE}\n[bogus]\n");
        assert!(ExperimentConfig::parse(&bad, None).is_err());
        let bad = BASE.replace("family = logistic 1 1 2", "family = logistic 1 -1 2");
        assert!(matches!(ExperimentConfig::parse(&bad, None), Err(Error::Config { line: 10, .. })));
    }

    #[test]
    fn hash_ignores_layout_but_not_values() {
        let a = ExperimentConfig::parse(BASE, None).unwrap();
        let spaced = BASE.replace("nx = 16", "nx    =   16   # cells");
        let b = ExperimentConfig::parse(&spaced, None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = a.with_override("physics.chi", "2").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(c.run.stepper.chi, 2.0);
    }

    #[test]
    fn keyed_source_matches_inline() {
        let keyed = BASE.replace("family = logistic 1 1 2", "family = logistic\na = 1\nb = 1\ntheta = 2");
        let a = ExperimentConfig::parse(BASE, None).unwrap();
        let b = ExperimentConfig::parse(&keyed, None).unwrap();
        assert_eq!(a.source(), b.source());
        let swept = b.with_override("source.b", "3").unwrap();
        assert_eq!(swept.source(), &SourceSpec::logistic(1.0, 3.0, 2.0).unwrap());
    }

    #[test]
    fn classify_logistic_is_b1() {
        let cfg = ExperimentConfig::parse(BASE, None).unwrap();
        let out = classify_config(&cfg).unwrap();
        assert_eq!(out.report.regime.to_string(), "B1");
        assert!((out.u0_mass - 1.0).abs() < 1e-12);
        let zero = ExperimentConfig::parse(&BASE.replace("logistic 1 1 2", "zero"), None).unwrap();
        assert_eq!(classify_config(&zero).unwrap().report.label(), "NotCovered (M unbounded)");
    }

    #[test]
    fn scan_reports_each_value() {
        let text = BASE.replace("c_gn = 1.0", "c_gn = 1.0\nc_gn_scan = 0.5 2 3");
        let cfg = ExperimentConfig::parse(&text, None).unwrap();
        let out = classify_config(&cfg).unwrap();
        assert_eq!(out.scan.len(), 3);
        assert!((out.scan[1].c_gn - 1.0).abs() < 1e-12);
        assert!(out.to_string().contains("scan c_gn = 2"));
    }
}
