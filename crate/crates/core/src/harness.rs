//! Experiment configuration, orchestration and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bsde_solver::{estimate_u_point, SolverConfig, SolverMode};
use crate::diagnostics::{
    coupling_report_streaming, tightness_criterion, DiagnosticsReport, TightnessReport,
};
use crate::error::{Error, Result};
use crate::forward_sim::{batch_simulate_bundles, write_paths_csv, BatchOptions, TimeGrid};
use crate::geometry::{property_suite, ConvexDomain, ConvexDomainSpec};
use crate::problems::{builtin, validate_instance, ProblemInstance, StartPoint, BUILTIN_NAMES};
use crate::rng::Stream;

/// Environment variable consulted for the worker count when no flag is given.
pub const WORKERS_ENV: &str = "PENALTY_MC_WORKERS";

pub const CSV_HEADER: &str =
    "problem,n,dt,paths,component,estimate,stderr,exact,abs_error,sup_coupling_distance,wall_time_ms";

/// A builtin by name, optionally with its domain and horizon replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSpec {
    Builtin(String),
    Inline {
        builtin: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<ConvexDomainSpec>,
    },
}

impl ProblemSpec {
    pub fn name(&self) -> &str {
        match self {
            ProblemSpec::Builtin(name) | ProblemSpec::Inline { builtin: name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSpec {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Horizon `T`; the problem's own when absent.
    #[serde(alias = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            horizon: None,
            steps: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WorkersRepr", into = "WorkersRepr")]
pub enum Workers {
    Auto,
    Count(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WorkersRepr {
    Count(usize),
    Named(String),
}

impl TryFrom<WorkersRepr> for Workers {
    type Error = String;

    fn try_from(value: WorkersRepr) -> std::result::Result<Self, String> {
        match value {
            WorkersRepr::Count(0) => Err("workers must be positive".into()),
            WorkersRepr::Count(n) => Ok(Workers::Count(n)),
            WorkersRepr::Named(s) if s == "auto" => Ok(Workers::Auto),
            WorkersRepr::Named(s) => Err(format!(
                "workers must be an integer or \"auto\", got \"{s}\""
            )),
        }
    }
}

impl From<Workers> for WorkersRepr {
    fn from(value: Workers) -> Self {
        match value {
            Workers::Auto => WorkersRepr::Named("auto".into()),
            Workers::Count(n) => WorkersRepr::Count(n),
        }
    }
}

impl std::str::FromStr for Workers {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.parse::<usize>() {
            Ok(n) => Workers::try_from(WorkersRepr::Count(n)),
            Err(_) => Workers::try_from(WorkersRepr::Named(s.to_string())),
        }
    }
}

fn default_paths() -> usize {
    10_000
}

fn default_schedule() -> Vec<u32> {
    vec![4, 16, 64, 256]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_format() -> Format {
    Format::Csv
}

fn default_workers() -> Workers {
    Workers::Auto
}

fn default_coupling_paths() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub seed: u64,
    /// Start point; the problem's own when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<StartSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_schedule")]
    pub n_schedule: Vec<u32>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_format")]
    pub format: Format,
    #[serde(default = "default_workers")]
    pub workers: Workers,
    /// Paths used for the coupling diagnostics of a convergence run.
    #[serde(default = "default_coupling_paths")]
    pub coupling_paths: usize,
}

fn field(name: &str, message: impl Into<String>) -> Error {
    Error::ConfigField {
        field: name.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn minimal(problem: &str, seed: u64) -> Self {
        Self {
            problem: ProblemSpec::Builtin(problem.into()),
            seed,
            start: None,
            grid: GridSpec::default(),
            paths: default_paths(),
            n_schedule: default_schedule(),
            solver: SolverConfig::default(),
            output: default_output(),
            format: default_format(),
            workers: default_workers(),
            coupling_paths: default_coupling_paths(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !BUILTIN_NAMES.contains(&self.problem.name()) {
            return Err(field(
                "problem",
                format!(
                    "unknown problem '{}'; expected one of {}",
                    self.problem.name(),
                    BUILTIN_NAMES.join(", ")
                ),
            ));
        }
        if self.n_schedule.contains(&0) {
            return Err(field("n_schedule", "penalty levels must be >= 1"));
        }
        if self.n_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(field("n_schedule", "must be strictly increasing"));
        }
        if self.paths == 0 {
            return Err(field("paths", "must be positive"));
        }
        if self.coupling_paths == 0 {
            return Err(field("coupling_paths", "must be positive"));
        }
        if self.grid.steps == 0 {
            return Err(field("grid.steps", "must be positive"));
        }
        if let Some(t) = self.grid.horizon {
            if !(t.is_finite() && t > 0.0) {
                return Err(field("grid.horizon", "must be a positive number"));
            }
        }
        self.solver.validate()?;
        if self.solver.mode != SolverMode::LinearMc {
            let dim = match (&self.start, &self.problem) {
                (Some(s), _) => s.x.len(),
                (
                    None,
                    ProblemSpec::Inline {
                        domain: Some(d), ..
                    },
                ) => ConvexDomain::new(d.clone())?.dim(),
                _ => builtin(self.problem.name())?.dim(),
            };
            let size = self.solver.basis.size(dim);
            if self.paths < 10 * size {
                return Err(field(
                    "paths",
                    format!(
                        "lsmc with {size} basis functions needs at least {} paths",
                        10 * size
                    ),
                ));
            }
        }
        Ok(())
    }

    /// The problem instance with the config's domain, horizon and start applied.
    pub fn instance(&self) -> Result<ProblemInstance> {
        let mut inst = builtin(self.problem.name())?;
        if let ProblemSpec::Inline {
            domain: Some(spec), ..
        } = &self.problem
        {
            let domain = ConvexDomain::new(spec.clone())?;
            if domain.dim() != inst.dim() {
                return Err(field(
                    "problem.domain",
                    format!(
                        "dimension {} does not match the problem's {}",
                        domain.dim(),
                        inst.dim()
                    ),
                ));
            }
            let start = if domain.contains(&inst.start.x) {
                inst.start.clone()
            } else {
                StartPoint {
                    t: inst.start.t,
                    x: domain.project(&inst.start.x)?,
                }
            };
            inst = ProblemInstance::new(
                inst.name,
                domain,
                inst.coefficients,
                inst.drivers,
                inst.horizon,
                start,
            )?;
        }
        if let Some(t) = self.grid.horizon {
            inst.set_horizon(t)
                .map_err(|e| field("grid.horizon", e.to_string()))?;
        }
        if let Some(s) = &self.start {
            inst.set_start(StartPoint {
                t: s.t,
                x: s.x.clone(),
            })
            .map_err(|e| field("start", e.to_string()))?;
        }
        Ok(inst)
    }

    pub fn grid_for(&self, instance: &ProblemInstance) -> Result<TimeGrid> {
        TimeGrid::for_instance(instance, self.grid.steps)
    }

    /// JSON with sorted keys; equal configs give equal text.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&sort_keys(value)).expect("json value serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Parses TOML, or JSON when the text starts with `{`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?
    } else {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
            Error::ConfigParse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?
    };
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Values given on the command line; they win over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
    pub workers: Option<Workers>,
}

impl Overrides {
    /// Applies flags, then the worker environment variable when no worker flag
    /// was given.
    pub fn apply(&self, config: &mut ExperimentConfig, env_workers: Option<&str>) -> Result<()> {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.paths {
            config.paths = v;
        }
        if let Some(v) = self.steps {
            config.grid.steps = v;
        }
        if let Some(v) = &self.output {
            config.output = v.clone();
        }
        if let Some(v) = self.format {
            config.format = v;
        }
        match (self.workers, env_workers) {
            (Some(w), _) => config.workers = w,
            (None, Some(text)) => {
                config.workers = text.parse().map_err(|e: String| field(WORKERS_ENV, e))?;
            }
            (None, None) => {}
        }
        config.validate()
    }
}

/// Penalty level of a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowLevel {
    Penalized(u32),
    Reflected,
    Limit,
}

impl std::fmt::Display for RowLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowLevel::Penalized(n) => write!(f, "{n}"),
            RowLevel::Reflected => f.write_str("reflected"),
            RowLevel::Limit => f.write_str("limit"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub problem: String,
    pub n: RowLevel,
    pub dt: f64,
    pub paths: usize,
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    pub exact: Option<Vec<f64>>,
    pub abs_error: Option<Vec<f64>>,
    pub sup_coupling_distance: Option<f64>,
    pub wall_time_ms: u64,
}

impl ReportRow {
    fn new(
        instance: &ProblemInstance,
        n: RowLevel,
        grid: &TimeGrid,
        paths: usize,
        estimate: Vec<f64>,
        stderr: Vec<f64>,
        started: Instant,
    ) -> Self {
        let exact = instance.exact_value(instance.start.t, &instance.start.x);
        let abs_error = exact.as_ref().map(|e| {
            e.iter()
                .zip(&estimate)
                .map(|(a, b)| (a - b).abs())
                .collect()
        });
        Self {
            problem: instance.name.clone(),
            n,
            dt: grid.dt(),
            paths,
            estimate,
            stderr,
            exact,
            abs_error,
            sup_coupling_distance: None,
            wall_time_ms: started.elapsed().as_millis() as u64,
        }
    }

    fn check_finite(&self, row: usize) -> Result<()> {
        let bad = |field: &'static str| Error::NonFiniteRow { row, field };
        if !self.dt.is_finite() {
            return Err(bad("dt"));
        }
        let lists: [(&'static str, Option<&Vec<f64>>); 4] = [
            ("estimate", Some(&self.estimate)),
            ("stderr", Some(&self.stderr)),
            ("exact", self.exact.as_ref()),
            ("abs_error", self.abs_error.as_ref()),
        ];
        for (name, values) in lists {
            if values.is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(bad(name));
            }
        }
        if self.sup_coupling_distance.is_some_and(|v| !v.is_finite()) {
            return Err(bad("sup_coupling_distance"));
        }
        if self.exact.is_some() != self.abs_error.is_some() {
            return Err(Error::InvalidArgument(format!(
                "row {row}: abs_error must be present exactly when exact is"
            )));
        }
        Ok(())
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text for `rows`, one line per solution component.
pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv encoding failed: {e}"));
    out.write_record(&header).map_err(csv_err)?;
    for (i, row) in rows.iter().enumerate() {
        row.check_finite(i)?;
        for c in 0..row.estimate.len() {
            let opt = |v: Option<&Vec<f64>>| v.map_or(String::new(), |v| fmt_float(v[c]));
            out.write_record([
                row.problem.clone(),
                row.n.to_string(),
                fmt_float(row.dt),
                row.paths.to_string(),
                c.to_string(),
                fmt_float(row.estimate[c]),
                fmt_float(row.stderr[c]),
                opt(row.exact.as_ref()),
                opt(row.abs_error.as_ref()),
                row.sup_coupling_distance.map_or(String::new(), fmt_float),
                row.wall_time_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = out
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn begin(command: &str, config: &ExperimentConfig) -> Self {
        let now = chrono::Utc::now().to_rfc3339();
        Self {
            command: command.into(),
            config: serde_json::from_str(&config.canonical_json()).expect("canonical json parses"),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.content_hash(),
            started_at: now.clone(),
            finished_at: now,
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = chrono::Utc::now().to_rfc3339();
    }
}

/// Writes `contents` to `dir/name` through a temporary file in the same
/// directory, so a failed write leaves nothing behind.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents)
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(&target)
        .map_err(|e| Error::io(&target, e.error))?;
    Ok(target)
}

/// Writes `report.csv` or `report.json` plus `manifest.json` into `dir`.
pub fn emit_report(
    rows: &[ReportRow],
    manifest: &RunManifest,
    diagnostics: Option<&Value>,
    format: Format,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to emit an empty report".into(),
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        row.check_finite(i)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = match format {
        Format::Csv => write_atomic(dir, "report.csv", rows_to_csv(rows)?.as_bytes())?,
        Format::Json => {
            let mut body = serde_json::json!({ "rows": rows });
            if let Some(d) = diagnostics {
                body["diagnostics"] = d.clone();
            }
            let text = serde_json::to_string_pretty(&body).expect("report serializes");
            write_atomic(dir, "report.json", text.as_bytes())?
        }
    };
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let manifest_path = write_atomic(dir, "manifest.json", text.as_bytes())?;
    Ok(vec![report, manifest_path])
}

/// Runs `f` on a pool with the configured number of workers.
pub fn with_workers<T: Send>(workers: Workers, f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match workers {
        Workers::Auto => 0,
        Workers::Count(n) => n,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::WorkerPool(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationOutcome {
    pub checks: Vec<CheckOutcome>,
    pub rows: Vec<ReportRow>,
}

impl ValidationOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Domains exercised by the geometry part of validation.
pub fn geometry_suite_domains() -> Vec<(&'static str, ConvexDomain)> {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        (
            "interval",
            ConvexDomain::interval(0.0, 1.0).expect("valid interval"),
        ),
        (
            "ball",
            ConvexDomain::ball(vec![0.0, 0.0], 1.0).expect("valid ball"),
        ),
        (
            "box",
            ConvexDomain::cube(vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 0.5]).expect("valid box"),
        ),
        (
            "halfspace-intersection",
            ConvexDomain::halfspaces(
                vec![vec![-1.0, 0.0], vec![0.0, -1.0], vec![s2, s2]],
                vec![0.0, 0.0, s2],
            )
            .expect("valid triangle"),
        ),
    ]
}

fn solver_for(instance: &ProblemInstance, config: &SolverConfig) -> SolverConfig {
    let mut cfg = *config;
    if cfg.mode == SolverMode::LinearMc && !instance.drivers.is_y_free() {
        cfg.mode = SolverMode::LsmcPicard;
    }
    cfg
}

/// Validation on the shipped problems, with the configured problem's
/// overrides applied to its own entry.
pub fn run_validation(config: &ExperimentConfig) -> Result<ValidationOutcome> {
    let instances = BUILTIN_NAMES
        .iter()
        .map(|&n| {
            if n == config.problem.name() {
                config.instance()
            } else {
                builtin(n)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    run_validation_on(config, &instances)
}

/// Geometry suite, assumption checks and exact-solution comparisons for
/// `instances`, using the config's grid steps, path count, seed and solver.
pub fn run_validation_on(
    config: &ExperimentConfig,
    instances: &[ProblemInstance],
) -> Result<ValidationOutcome> {
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for (i, (name, domain)) in geometry_suite_domains().into_iter().enumerate() {
        let report = property_suite(
            &domain,
            10_000,
            &mut Stream::auxiliary(config.seed, 100 + i as u64),
        )?;
        checks.push(CheckOutcome {
            name: format!("geometry {name}"),
            passed: report.passed(),
            detail: format!("{report:?}"),
        });
    }
    for (i, inst) in instances.iter().enumerate() {
        let report = validate_instance(
            inst,
            2000,
            &mut Stream::auxiliary(config.seed, 200 + i as u64),
        )?;
        for check in &report.checks {
            checks.push(CheckOutcome {
                name: format!("{}: {}", inst.name, check.name),
                passed: check.passed,
                detail: format!(
                    "worst violation {:.3e} (tolerance {:.1e}, {} samples)",
                    check.worst_violation, check.tolerance, check.samples
                ),
            });
        }
        if inst.exact_solution.is_none() {
            continue;
        }
        let started = Instant::now();
        let grid = TimeGrid::for_instance(inst, config.grid.steps)?;
        let sol = estimate_u_point(
            inst,
            None,
            &grid,
            config.paths,
            config.seed,
            &solver_for(inst, &config.solver),
        )?;
        let row = ReportRow::new(
            inst,
            RowLevel::Reflected,
            &grid,
            config.paths,
            sol.u_hat,
            sol.stderr,
            started,
        );
        let errors = row.abs_error.clone().unwrap_or_default();
        let passed = errors
            .iter()
            .zip(&row.stderr)
            .all(|(e, s)| *e <= 3.0 * s + 0.01);
        checks.push(CheckOutcome {
            name: format!("{}: exact solution comparison", inst.name),
            passed,
            detail: format!(
                "estimate {:?}, exact {:?}, stderr {:?}",
                row.estimate, row.exact, row.stderr
            ),
        });
        rows.push(row);
    }
    Ok(ValidationOutcome { checks, rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceOutcome {
    pub rows: Vec<ReportRow>,
    pub diagnostics: DiagnosticsReport,
}

/// `u^n` for each level of the schedule followed by the reflected limit.
pub fn run_convergence(config: &ExperimentConfig) -> Result<ConvergenceOutcome> {
    if config.n_schedule.is_empty() {
        return Err(field(
            "n_schedule",
            "a convergence study needs at least one penalty level",
        ));
    }
    let inst = config.instance()?;
    let grid = config.grid_for(&inst)?;
    let solver = solver_for(&inst, &config.solver);
    let diagnostics = coupling_report_streaming(
        &inst,
        &config.n_schedule,
        &grid,
        config.coupling_paths,
        config.seed,
        &[],
    )?;
    let mut rows = Vec::new();
    for (i, &n) in config.n_schedule.iter().enumerate() {
        let started = Instant::now();
        let sol = estimate_u_point(&inst, Some(n), &grid, config.paths, config.seed, &solver)?;
        let mut row = ReportRow::new(
            &inst,
            RowLevel::Penalized(n),
            &grid,
            config.paths,
            sol.u_hat,
            sol.stderr,
            started,
        );
        row.sup_coupling_distance = Some(diagnostics.levels[i].sup_distance.mean);
        rows.push(row);
    }
    let started = Instant::now();
    let sol = estimate_u_point(&inst, None, &grid, config.paths, config.seed, &solver)?;
    rows.push(ReportRow::new(
        &inst,
        RowLevel::Limit,
        &grid,
        config.paths,
        sol.u_hat,
        sol.stderr,
        started,
    ));
    Ok(ConvergenceOutcome { rows, diagnostics })
}

/// Writes `paths_<level>.csv` for the reflected scheme and every level of the
/// schedule, with the config's path count.
pub fn run_simulate(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let inst = config.instance()?;
    let grid = config.grid_for(&inst)?;
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let mut levels: Vec<Option<u32>> = config.n_schedule.iter().map(|&n| Some(n)).collect();
    levels.push(None);
    let mut written = Vec::new();
    for level in levels {
        let bundles = batch_simulate_bundles(
            &inst,
            level,
            &grid,
            config.paths,
            config.seed,
            BatchOptions::default(),
        )?;
        let mut buf = Vec::new();
        write_paths_csv(&bundles, &mut buf).map_err(|e| Error::io(&config.output, e))?;
        let name = match level {
            Some(n) => format!("paths_n{n}.csv"),
            None => "paths_reflected.csv".to_string(),
        };
        written.push(write_atomic(&config.output, &name, &buf)?);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOutcome {
    pub coupling: DiagnosticsReport,
    pub tightness: TightnessReport,
}

/// Coupling distances and the tightness criterion over the schedule.
pub fn run_diagnose(config: &ExperimentConfig) -> Result<DiagnoseOutcome> {
    if config.n_schedule.is_empty() {
        return Err(field(
            "n_schedule",
            "diagnostics need at least one penalty level",
        ));
    }
    let inst = config.instance()?;
    let grid = config.grid_for(&inst)?;
    let coupling = coupling_report_streaming(
        &inst,
        &config.n_schedule,
        &grid,
        config.coupling_paths,
        config.seed,
        &[(0.25, 0.75)],
    )?;
    let tightness = tightness_criterion(
        &inst,
        &config.n_schedule,
        &grid,
        config.paths,
        config.seed,
        &config.solver,
    )?;
    Ok(DiagnoseOutcome {
        coupling,
        tightness,
    })
}
