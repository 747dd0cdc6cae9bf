//! Configuration-driven runner. `run` validates everything before touching the output
//! directory, executes one pipeline and writes a deterministic manifest.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 config error, 3 precondition violation,
//! 4 numerical failure.

pub mod config;
pub mod suite;

use crate::extend::{
    adapted_extension, isometric_extension, CollarChart, ExtendError, ExtensionParams, SigmaData,
};
use crate::fields::{Field, FieldKind, Grid, MapJet, M};
use crate::frames::Seeds;
use crate::io::{csv_slice, sha256_hex, to_json_bytes, write_field, IoError, Versioned, SCHEMA_VERSION};
use crate::iterate::{
    build_schedule, global_embed_demo, iterate_to_isometry, AdaptedTriple, ConvergenceReport, IterConfig, ScheduleConfig,
    SchedulePolicy,
};
use crate::stage::{perform_stage_with_seeds, PreconditionCheck, StageError, NYQUIST_LIMIT};
use crate::verify::{
    compact_amplitude, connection_gap, flat_chart, jacobian_exponent, oscillating_amplitude, run_flat_ladder, stage_certificate,
    GapReport,
};
use clap::Parser;
pub use config::{CommandKind, ConfigError, Plan, RunConfig};
use config::{Amplitude, CollarMetric, CollarProblem, ExportOptions, GridSpec, SigmaCurve, StartDelta};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const MANIFEST_SCHEMA: &str = "nashflex.manifest";

#[derive(Debug, Parser)]
#[command(name = "nashflex", version, about = "Convex-integration runs on 2-D charts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandKind,
    /// JSON run configuration (defaults for every key when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// RNG seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Held,
    /// Within the bound only thanks to the relative slack.
    HeldWithSlack,
    /// Violated, recorded, run continued.
    ViolatedRecorded,
    /// Violated, then retried with changed inputs.
    ViolatedAndRetried,
    ViolatedAndAborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionRecord {
    pub source: String,
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    PreconditionViolation,
    NumericalFailure,
    IoFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => EXIT_OK,
            RunStatus::IoFailure => EXIT_IO,
            RunStatus::PreconditionViolation => EXIT_PRECONDITION,
            RunStatus::NumericalFailure => EXIT_NUMERICAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub crate_version: String,
    pub command: CommandKind,
    pub config_sha256: String,
    pub seed: u64,
    pub status: RunStatus,
    pub exit_code: i32,
    pub error: Option<String>,
    pub preconditions: Vec<PreconditionRecord>,
    pub measured: BTreeMap<String, f64>,
    pub artifacts: Vec<Artifact>,
}

/// Result of [`run`]; `manifest` is `None` exactly when nothing was written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: Option<PathBuf>,
    pub manifest: Option<Manifest>,
    pub message: Option<String>,
}

/// Everything `run` needs; built from the command line or directly in tests.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: CommandKind,
    /// Config text (`None` reads as `{}`).
    pub config_text: Option<String>,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Invocation {
    pub fn new(command: CommandKind) -> Self {
        Invocation { command, config_text: None, base_dir: PathBuf::from("."), out: None, seed: None }
    }

    pub fn from_cli(cli: &Cli) -> Result<Self, ConfigError> {
        let (config_text, base_dir) = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                (Some(text), p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (None, PathBuf::from(".")),
        };
        Ok(Invocation { command: cli.command, config_text, base_dir, out: cli.out.clone(), seed: cli.seed })
    }
}

/// Collects what a pipeline produced.
struct Run {
    dir: PathBuf,
    export: ExportOptions,
    preconditions: Vec<PreconditionRecord>,
    measured: BTreeMap<String, f64>,
    artifacts: Vec<Artifact>,
}

/// How a pipeline ended.
enum Failure {
    Precondition(String),
    Numerical(String),
    Io(IoError),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Io(e)
    }
}

type Step = Result<(), Failure>;

impl Run {
    fn put(&mut self, key: &str, v: f64) {
        self.measured.insert(key.into(), v);
    }

    fn check(&mut self, source: &str, name: &str, measured: f64, bound: f64, outcome: Outcome) {
        self.preconditions.push(PreconditionRecord { source: source.into(), name: name.into(), measured, bound, outcome });
    }

    fn stage_checks(&mut self, source: &str, checks: &[PreconditionCheck], slack: f64, strict: bool) {
        for c in checks {
            let outcome = if !c.ok {
                if strict {
                    Outcome::ViolatedAndAborted
                } else {
                    Outcome::ViolatedRecorded
                }
            } else if c.bound > 0.0 && c.measured > c.bound / (1.0 + slack) {
                Outcome::HeldWithSlack
            } else {
                Outcome::Held
            };
            self.check(source, &c.name, c.measured, c.bound, outcome);
        }
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Step {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| IoError::Io { path: path.display().to_string(), source })?;
        self.artifacts.push(Artifact { path: name.into(), bytes: bytes.len(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, schema: &str, report: &T) -> Step {
        self.bytes(name, &to_json_bytes(&Versioned::new(schema, report)))
    }

    fn field(&mut self, stem: &str, f: &Field) -> Step {
        if !self.export.fields {
            return Ok(());
        }
        for p in write_field(&self.dir, stem, f)? {
            let bytes = std::fs::read(&p).map_err(|source| IoError::Io { path: p.display().to_string(), source })?;
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            self.artifacts.push(Artifact { path: name, bytes: bytes.len(), sha256: sha256_hex(&bytes) });
        }
        Ok(())
    }

    fn map(&mut self, stem: &str, u: &MapJet) -> Step {
        self.field(&format!("{stem}_value"), &u.value)?;
        self.field(&format!("{stem}_jacobian"), &u.jacobian)?;
        if self.export.mesh {
            let obj = crate::io::obj_mesh(&u.value, self.export.projection)?;
            self.bytes(&format!("{stem}.obj"), obj.as_bytes())?;
        }
        Ok(())
    }
}

fn io_failure_message(e: &IoError) -> String {
    format!("i/o: {e}")
}

/// Runs one invocation. Config errors return before anything is created on disk.
pub fn run(inv: &Invocation) -> RunOutcome {
    let config_fail = |e: ConfigError| RunOutcome { exit_code: EXIT_CONFIG, out_dir: None, manifest: None, message: Some(e.to_string()) };
    let text = inv.config_text.clone().unwrap_or_else(|| "{}".into());
    let cfg = match config::parse_config(&text) {
        Ok(c) => c,
        Err(e) => return config_fail(e),
    };
    let plan = match config::plan(&cfg, inv.command, &inv.base_dir) {
        Ok(p) => p,
        Err(e) => return config_fail(e),
    };
    let out = match inv.out.clone().or_else(|| cfg.out.as_ref().map(|o| inv.base_dir.join(o))) {
        Some(o) => o,
        None => return config_fail(ConfigError("no output directory (use --out or `out`)".into())),
    };
    let seed = inv.seed.or(cfg.seed).unwrap_or(0);
    if let Err(e) = std::fs::create_dir_all(&out) {
        return RunOutcome { exit_code: EXIT_IO, out_dir: None, manifest: None, message: Some(format!("{}: {e}", out.display())) };
    }
    let mut r = Run { dir: out.clone(), export: cfg.export, preconditions: Vec::new(), measured: BTreeMap::new(), artifacts: Vec::new() };
    let result = match &plan {
        Plan::Stage { grid, section } => run_stage(&mut r, grid, section, seed),
        Plan::Ladder(l) => run_ladder(&mut r, l),
        Plan::Iterate { grid, section } => run_iterate(&mut r, grid, section, seed),
        Plan::EmbedTorus { grid, section } => run_torus(&mut r, grid, section),
        Plan::Extend { problem, section } => run_extend(&mut r, problem, section),
        Plan::Verify { input, problem, suite } => run_verify(&mut r, input.as_deref(), problem.as_ref(), suite, seed),
    };
    let (status, error) = match result {
        Ok(()) => (RunStatus::Success, None),
        Err(Failure::Precondition(m)) => (RunStatus::PreconditionViolation, Some(m)),
        Err(Failure::Numerical(m)) => (RunStatus::NumericalFailure, Some(m)),
        Err(Failure::Io(e)) => (RunStatus::IoFailure, Some(io_failure_message(&e))),
    };
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        command: inv.command,
        config_sha256: sha256_hex(text.as_bytes()),
        seed,
        status,
        exit_code: status.exit_code(),
        error: error.clone(),
        preconditions: r.preconditions,
        measured: r.measured,
        artifacts: r.artifacts,
    };
    let path = out.join("manifest.json");
    let mut exit_code = status.exit_code();
    let mut message = error;
    if let Err(e) = std::fs::write(&path, to_json_bytes(&manifest)) {
        exit_code = EXIT_IO;
        message = Some(format!("{}: {e}", path.display()));
    }
    RunOutcome { exit_code, out_dir: Some(out), manifest: Some(manifest), message }
}

/// Parses arguments, runs, prints a one-line summary and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let inv = match Invocation::from_cli(&cli) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = run(&inv);
    match (&outcome.message, &outcome.out_dir) {
        (Some(m), _) => eprintln!("{}: {m}", inv.command.name()),
        (None, Some(d)) => println!("{}: ok, manifest at {}", inv.command.name(), d.join("manifest.json").display()),
        (None, None) => {}
    }
    outcome.exit_code
}

// ---------------------------------------------------------------------------
// Pipelines

fn stage_failure(e: &StageError) -> Failure {
    match e {
        StageError::Precondition { .. } | StageError::NyquistViolation { .. } | StageError::EpsilonTooLarge { .. } | StageError::Frame(_) => {
            Failure::Precondition(e.to_string())
        }
        _ => Failure::Numerical(e.to_string()),
    }
}

fn flat_metric(grid: Grid) -> Field {
    Field::constant(grid, FieldKind::Sym2, &[1.0, 0.0, 1.0])
}

fn conformal_metric(grid: Grid, m: &config::ConformalMetric) -> Field {
    Field::from_fn(grid, FieldKind::Sym2, |x, o| {
        let s = 1.0 + m.amplitude * (m.wavenumber * x[0]).sin();
        o[0] = s;
        o[1] = 0.0;
        o[2] = s;
    })
}

fn run_stage(r: &mut Run, grid: &GridSpec, s: &config::StageSection, seed: u64) -> Step {
    let mut p = crate::stage::StageParams::new(s.delta, s.lambda, s.tau);
    p.gamma = s.gamma;
    p.sigma0 = s.sigma0;
    p.c0 = s.c0;
    p.slack = s.slack;
    p.strict = s.strict;
    // default side: the oscillation sits just below the resolution limit
    let side = grid.side.unwrap_or(0.98 * NYQUIST_LIMIT / p.frequency() * (grid.resolution - 1) as f64);
    let g = Grid::square(side, grid.resolution, false).map_err(|e| Failure::Precondition(e.to_string()))?;
    let u = flat_chart(g);
    let rho = match s.amplitude {
        Amplitude::Oscillating { phase } => oscillating_amplitude(g, s.delta, s.lambda, phase),
        Amplitude::Compact => compact_amplitude(g, s.delta, s.lambda),
        Amplitude::Constant { fraction } => Field::constant(g, FieldKind::Scalar, &[fraction * s.delta.sqrt()]),
    };
    let zero = Field::zeros(g, FieldKind::Sym2);
    r.put("chart.side", side);
    r.put("chart.h", g.h());
    r.put("stage.frequency", p.frequency());
    r.put("stage.wavelength", std::f64::consts::TAU / p.frequency());
    let res = match perform_stage_with_seeds(&u, &rho, &zero, &flat_metric(g), &p, &Seeds::Coordinate { fallback_seed: seed }) {
        Ok(res) => res,
        Err(e) => {
            if let StageError::Precondition { name, measured, bound } = &e {
                r.check("stage", name, *measured, *bound, Outcome::ViolatedAndAborted);
            }
            if let StageError::NyquistViolation { lambda_tau, h, limit } = &e {
                r.check("stage", "lambda^tau h <= 2pi/16", lambda_tau * h, *limit, Outcome::ViolatedAndAborted);
            }
            return Err(stage_failure(&e));
        }
    };
    let cert = &res.certificate;
    r.stage_checks("stage", &cert.preconditions, s.slack, s.strict);
    let m = cert.measured;
    r.put("stage.v_minus_u_c0", m.v_minus_u_c0);
    r.put("stage.v_minus_u_c1", m.v_minus_u_c1);
    r.put("stage.v_c2", m.v_c2);
    r.put("stage.e_c0", m.e_c0);
    r.put("stage.e_c1", m.e_c1);
    r.put("stage.changed_nodes", cert.changed_nodes as f64);
    r.put("stage.support_reach", cert.support_reach);
    r.put("stage.support_allowed", cert.support_allowed);
    r.put("stage.decomposition_residual", cert.decomposition_residual);
    r.put("stage.newton_max_steps", cert.newton_max_steps as f64);
    r.json("certificate.json", "nashflex.stage_certificate", cert)?;
    let mut csv = String::from("quantity,measured,bound_shape,ratio\n");
    for l in stage_certificate(cert) {
        let _ = writeln!(csv, "{},{:.9e},{:.9e},{:.9e}", l.quantity, l.measured, l.bound_shape, l.ratio);
    }
    r.bytes("certificate.csv", csv.as_bytes())?;
    r.map("v", &res.v)?;
    r.field("stage_error", &res.e)?;
    r.bytes("stage_error_slice.csv", csv_slice(&res.e, 0, grid.resolution / 2)?.as_bytes())?;
    if cert.preconditions.iter().any(|c| !c.ok) && s.strict {
        return Err(Failure::Precondition("stage hypotheses violated".into()));
    }
    Ok(())
}

fn run_ladder(r: &mut Run, l: &crate::verify::FlatLadderConfig) -> Step {
    let rep = run_flat_ladder(l).map_err(|e| match e {
        crate::verify::VerifyError::Stage(s) => stage_failure(&s),
        other => Failure::Numerical(other.to_string()),
    })?;
    for (k, row) in rep.rows.iter().enumerate() {
        r.stage_checks(&format!("ladder[{k}]"), &row.certificate.preconditions, row.certificate.params.slack, row.certificate.params.strict);
    }
    let f = &rep.fit;
    r.put("ladder.side", rep.side);
    r.put("ladder.slope_e_c0", f.e_c0.slope);
    r.put("ladder.slope_v_minus_u_c0", f.v_minus_u_c0.slope);
    r.put("ladder.slope_v_c2", f.v_c2.slope);
    r.put("ladder.slope_e_c1", f.e_c1.slope);
    r.put("ladder.v_minus_u_c1_spread", f.v_minus_u_c1_spread);
    r.put("ladder.support_ok", rep.rows.iter().all(|x| x.support_ok) as u8 as f64);
    let mut csv = String::from(
        "lambda,frequency,e_c0,v_minus_u_c0,v_minus_u_c1,v_c2,e_c1,support_ok,slope_e_c0,slope_v_minus_u_c0,slope_v_c2,v_minus_u_c1_spread\n",
    );
    for row in &rep.rows {
        let c = &row.certificate;
        let m = c.measured;
        let _ = writeln!(
            csv,
            "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.6},{:.6},{:.6},{:.6}",
            c.params.lambda,
            c.params.frequency(),
            m.e_c0,
            m.v_minus_u_c0,
            m.v_minus_u_c1,
            m.v_c2,
            m.e_c1,
            row.support_ok as u8,
            f.e_c0.slope,
            f.v_minus_u_c0.slope,
            f.v_c2.slope,
            f.v_minus_u_c1_spread
        );
    }
    r.bytes("ladder.csv", csv.as_bytes())?;
    r.json("ladder.json", "nashflex.ladder", &rep)
}

fn convergence_outputs(r: &mut Run, rep: &ConvergenceReport, slack: f64) -> Step {
    for s in &rep.steps {
        if let Some(c) = &s.certificate {
            r.stage_checks(&format!("step[{}]", s.q), &c.preconditions, slack, false);
        }
    }
    r.put("iterate.completed", rep.completed as f64);
    r.put("iterate.initial_defect", rep.initial_defect);
    r.put("iterate.final_defect", rep.final_defect);
    r.put("iterate.tail_bound", rep.tail_bound);
    r.put("iterate.final_identity_residual", rep.final_identity_residual);
    r.put("iterate.locality_violations", rep.locality_violations as f64);
    r.put("iterate.untouched_nodes", rep.untouched_nodes as f64);
    r.put("iterate.untouched_bit_exact", rep.untouched_bit_exact as u8 as f64);
    r.put("iterate.theta_target", rep.theta_target);
    if let Some(e) = &rep.jacobian_exponent {
        r.put("iterate.jacobian_exponent", e.exponent);
    }
    for (k, c) in rep.c1_ratios.iter().enumerate() {
        r.put(&format!("iterate.c1_ratio[{}]", k + 1), *c);
    }
    r.json("convergence.json", "nashflex.convergence", rep)?;
    r.bytes("convergence.csv", rep.to_csv().as_bytes())
}

fn convergence_status(rep: &ConvergenceReport) -> Step {
    match &rep.error {
        None => Ok(()),
        Some(e) if rep.stopped_on_precondition => Err(Failure::Precondition(e.clone())),
        Some(e) => Err(Failure::Numerical(e.clone())),
    }
}

fn run_iterate(r: &mut Run, grid: &GridSpec, s: &config::IterateSection, seed: u64) -> Step {
    let g = Grid::square(grid.side.unwrap_or(1.0), grid.resolution, false).map_err(|e| Failure::Precondition(e.to_string()))?;
    let metric = conformal_metric(g, &s.metric);
    let k = s.start_scale;
    let u0 = MapJet::from_fn(
        g,
        M,
        |x, o| {
            o.fill(0.0);
            o[0] = k * x[0];
            o[1] = k * x[1];
        },
        |_, o| {
            o.fill(0.0);
            o[0] = k;
            o[M + 1] = k;
        },
    );
    let start = match AdaptedTriple::from_short_map(u0, metric) {
        Ok(t) => t,
        Err(e) => {
            r.check("start", "start map strictly short", f64::NAN, 0.0, Outcome::ViolatedAndAborted);
            return Err(Failure::Precondition(e.to_string()));
        }
    };
    r.check("start", "start map strictly short", start.rho.min_value(), 0.0, Outcome::Held);
    let mut sched = s.schedule.clone();
    if s.start_delta == StartDelta::FromDefect {
        let lo = start.rho.min_value();
        sched.delta1 = if lo > 0.0 { lo * lo } else { start.rho.max_value().powi(2) }.min(0.99);
    }
    r.put("iterate.delta1", sched.delta1);
    let schedule = match build_schedule(&sched) {
        Ok(x) => x,
        Err(e) => {
            if let crate::iterate::IterError::OrderingViolated { delta_ratio, .. } = &e {
                r.check("schedule", "delta_(q+1) <= delta_q / 4", *delta_ratio, 0.25, Outcome::ViolatedAndAborted);
            }
            return Err(Failure::Precondition(e.to_string()));
        }
    };
    let mut cfg = IterConfig::new(sched);
    cfg.target = s.target.clone();
    cfg.sigma0 = s.sigma0;
    cfg.gamma = s.gamma;
    cfg.c0 = s.c0;
    cfg.stage_lambda_factor = s.stage_lambda_factor;
    cfg.stage_delta_factor = s.stage_delta_factor;
    let q_max = cfg.schedule.q_max;
    let (out, rep) = iterate_to_isometry(&start, &schedule, &cfg, q_max, &Seeds::Coordinate { fallback_seed: seed });
    convergence_outputs(r, &rep, 0.05)?;
    r.map("u", &out.u)?;
    r.field("rho", &out.rho)?;
    r.field("h", &out.h)?;
    let defect = out.metric_defect();
    r.bytes("defect_slice.csv", csv_slice(&defect, 0, grid.resolution / 2)?.as_bytes())?;
    convergence_status(&rep)
}

fn run_torus(r: &mut Run, grid: &GridSpec, s: &config::TorusSection) -> Step {
    let g = Grid::square(grid.side.unwrap_or(std::f64::consts::TAU), grid.resolution, true)
        .map_err(|e| Failure::Precondition(e.to_string()))?;
    let metric = conformal_metric(g, &s.metric);
    let mut cfg = IterConfig::new(s.schedule.clone());
    cfg.sigma0 = s.sigma0;
    cfg.gamma = s.gamma;
    let (u, rep) = global_embed_demo(&metric, &cfg, s.epsilon_target).map_err(|e| {
        if e.is_precondition() {
            Failure::Precondition(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    })?;
    r.put("torus.radius", rep.radius);
    r.put("torus.delta_star", rep.delta_star);
    r.put("torus.proximity", rep.proximity);
    r.check("torus", "|u - u0|_0 <= epsilon", rep.proximity, rep.epsilon_target, if rep.proximity <= rep.epsilon_target {
        Outcome::Held
    } else {
        Outcome::ViolatedRecorded
    });
    convergence_outputs(r, &rep.convergence, 0.05)?;
    r.json("embed.json", "nashflex.embed_torus", &rep)?;
    r.map("u", &u)?;
    convergence_status(&rep.convergence)
}

fn build_collar(p: &CollarProblem, eps: f64) -> Result<(CollarChart, SigmaData), ExtendError> {
    let collar = match &p.metric {
        CollarMetric::Flat => CollarChart::flat(p.nx, p.nt, eps)?,
        CollarMetric::Cone { beta } => CollarChart::cone(p.nx, p.nt, eps, *beta)?,
        CollarMetric::Samples { length, values } => {
            let grid = Grid::new([*length, eps], [p.nx, p.nt], [true, false])?;
            CollarChart::from_field(Field::from_data(grid, FieldKind::Scalar, values.clone())?)?
        }
    };
    let sd = match &p.curve {
        SigmaCurve::Circle { normal } => SigmaData::circle(&collar, M, *normal)?,
        SigmaCurve::Samples { f, mu } => SigmaData::from_samples(&collar, M, f.clone(), mu.clone())?,
    };
    Ok((collar, sd))
}

fn extend_failure(e: &ExtendError) -> Failure {
    if e.is_precondition() {
        Failure::Precondition(e.to_string())
    } else {
        Failure::Numerical(e.to_string())
    }
}

fn gap_outputs(r: &mut Run, gap: &GapReport, sd: &SigmaData, collar: &Grid) -> Step {
    let margin = sd.margin();
    let mut csv = String::from("x,normal_term,l_term,gap,margin\n");
    for i in 0..gap.gap.len() {
        let _ = writeln!(
            csv,
            "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            collar.coord(i, 0)[0],
            gap.normal_term[i],
            gap.l_term[i],
            gap.gap[i],
            margin[i]
        );
    }
    r.put("gap.min", gap.min);
    r.put("gap.max", gap.max);
    r.put("gap.argmin", gap.argmin as f64);
    r.bytes("gap.csv", csv.as_bytes())?;
    r.json("gap.json", "nashflex.gap", gap)
}

fn run_extend(r: &mut Run, p: &CollarProblem, s: &config::ExtendSection) -> Step {
    let params: &ExtensionParams = &s.params;
    let mut eps = p.epsilon;
    let mut halvings = 0;
    // Shortness of the short extension decides the depth; halve and retry on failure.
    let (collar, sd) = loop {
        let (collar, sd) = build_collar(p, eps).map_err(|e| extend_failure(&e))?;
        match crate::extend::short_extension(&sd, &collar) {
            Ok(_) => {
                r.check("extend", &format!("short extension strictly short at depth {eps}"), eps, eps, Outcome::Held);
                break (collar, sd);
            }
            Err(ExtendError::ShortnessLost { eigen, .. })
                if halvings < p.max_halvings && !matches!(p.metric, CollarMetric::Samples { .. }) =>
            {
                r.check("extend", &format!("short extension strictly short at depth {eps}"), -eigen, 0.0, Outcome::ViolatedAndRetried);
                eps *= 0.5;
                halvings += 1;
            }
            Err(e) => {
                if let ExtendError::ShortnessLost { eigen, .. } = &e {
                    r.check("extend", &format!("short extension strictly short at depth {eps}"), -eigen, 0.0, Outcome::ViolatedAndAborted);
                }
                if let ExtendError::NotAdmissible { margin, .. } = &e {
                    r.check("extend", "admissibility margin > 0", *margin, 0.0, Outcome::ViolatedAndAborted);
                }
                return Err(extend_failure(&e));
            }
        }
    };
    r.put("extend.epsilon", eps);
    r.put("extend.halvings", halvings as f64);
    r.put("extend.h", collar.grid().h());
    let mut status: Step = Ok(());
    let (u, adapted) = match &s.iterate {
        None => {
            let (triple, rep) = adapted_extension(&sd, &collar, params).map_err(|e| extend_failure(&e))?;
            (triple.u, rep)
        }
        Some(it) => {
            let tau = it.tau.unwrap_or(params.tau);
            let mut cfg = IterConfig::new(ScheduleConfig {
                policy: SchedulePolicy::Geometric { delta_ratio: it.delta_ratio, lambda_ratio: it.lambda_ratio, lambda1: it.lambda1 },
                tau: Some(tau),
                ..ScheduleConfig::new(32.0, 1.1, 0.45, 0.5, it.q_max)
            });
            cfg.sigma0 = it.sigma0;
            cfg.gamma = params.gamma;
            let (u, rep) = isometric_extension(&sd, &collar, params, &cfg, it.q_max).map_err(|e| extend_failure(&e))?;
            r.put("extend.final_defect", rep.final_defect);
            r.put("extend.final_defect_covered", rep.final_defect_covered);
            r.put("extend.gap_vs_margin", rep.gap_vs_margin);
            r.put("extend.gap_drift", rep.gap_drift);
            convergence_outputs(r, &rep.convergence, params.slack)?;
            r.json("extension.json", "nashflex.extension", &rep)?;
            status = convergence_status(&rep.convergence);
            (u, rep.adapted)
        }
    };
    for (k, l) in adapted.layers.iter().enumerate() {
        r.stage_checks(&format!("layer[{}]", l.layer), &l.certificate.preconditions, params.slack, false);
        r.put(&format!("extend.layer[{k}].frequency"), l.frequency);
        r.put(&format!("extend.layer[{k}].stage_error_c0"), l.stage_error_c0);
    }
    r.check("extend", "admissibility margin > 0", adapted.margin_min, 0.0, Outcome::Held);
    let h_ok = adapted.h_sup_covered < adapted.h_bound;
    r.check(
        "extend",
        "|h|_0 < sigma0 / 4^(n+1) on covered rows",
        adapted.h_sup_covered,
        adapted.h_bound,
        if h_ok { Outcome::Held } else { Outcome::ViolatedRecorded },
    );
    r.put("extend.margin_min", adapted.margin_min);
    r.put("extend.layers", adapted.layers.len() as f64);
    r.put("extend.covered_from", adapted.covered_from);
    r.put("extend.initial_defect", adapted.initial_defect);
    r.put("extend.defect_after_layers", adapted.defect_after);
    r.put("extend.covered_error", adapted.covered_error);
    r.put("extend.identity_residual", adapted.identity_residual);
    let gap = connection_gap(&u, &sd);
    let (bv, bn) = crate::extend::boundary_errors(&u, &sd);
    r.put("extend.boundary_value_error", bv);
    r.put("extend.boundary_normal_error", bn);
    r.json("adapted.json", "nashflex.adapted_extension", &adapted)?;
    gap_outputs(r, &gap, &sd, collar.grid())?;
    r.map("u", &u)?;
    status
}

fn run_verify(r: &mut Run, input: Option<&Path>, problem: Option<&CollarProblem>, suite: &[config::SuiteCheck], seed: u64) -> Step {
    let mut failed = Vec::new();
    if let Some(path) = input {
        let value = crate::io::read_field(path).map_err(|e| Failure::Precondition(e.to_string()))?;
        let u = MapJet::from_samples(value).map_err(|e| Failure::Precondition(e.to_string()))?;
        let ladder = crate::fields::default_ladder(u.grid());
        match jacobian_exponent(&u, &ladder) {
            Ok(e) => {
                r.put("input.jacobian_exponent", e.exponent);
                r.put("input.jacobian_fit_residual", e.residual);
            }
            Err(e) => r.put(&format!("input.jacobian_exponent_unavailable ({e})"), f64::NAN),
        }
        if let Some(p) = problem {
            let depth = u.grid().extent[1];
            let (collar, sd) = build_collar(p, depth).map_err(|e| extend_failure(&e))?;
            if collar.grid() != u.grid() {
                return Err(Failure::Precondition("input grid does not match the collar problem".into()));
            }
            let gap = connection_gap(&u, &sd);
            gap_outputs(r, &gap, &sd, collar.grid())?;
        }
    }
    let mut reports = Vec::new();
    for &c in suite {
        let rep = suite::run_check(c, seed);
        let name = serde_json::to_value(c).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        for (k, v) in &rep.measured {
            r.put(&format!("{name}.{k}"), *v);
        }
        r.put(&format!("{name}.pass"), rep.pass as u8 as f64);
        if !rep.pass {
            failed.push(format!("{name}: {}", rep.notes.join("; ")));
        }
        reports.push(rep);
    }
    r.json("suite.json", "nashflex.verify_suite", &reports)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(failed.join(" | ")))
    }
}
