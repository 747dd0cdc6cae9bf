//! Strict run configuration. Every struct rejects unknown keys; sections that do not
//! belong to the selected command are rejected too.

use crate::extend::{CircleNormal, ExtensionParams};
use crate::fields::M;
use crate::iterate::{ScheduleConfig, SchedulePolicy, TargetSet};
use crate::verify::FlatLadderConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    /// One corrugation stage on the flat chart.
    Stage,
    /// Iteration toward an isometry on a flat chart.
    Iterate,
    /// One-sided isometric extension of a boundary curve.
    Extend,
    /// Clifford-torus start pushed toward an isometric immersion.
    EmbedTorus,
    /// Post-hoc checks: saved maps, connection gaps, the randomized suite.
    Verify,
    /// Stage scaling ladder over λ.
    Ladder,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Stage => "stage",
            CommandKind::Iterate => "iterate",
            CommandKind::Extend => "extend",
            CommandKind::EmbedTorus => "embed-torus",
            CommandKind::Verify => "verify",
            CommandKind::Ladder => "ladder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<CommandKind>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub export: ExportOptions,
    #[serde(default)]
    pub stage: Option<StageSection>,
    #[serde(default)]
    pub iterate: Option<IterateSection>,
    #[serde(default)]
    pub extend: Option<ExtendSection>,
    #[serde(default)]
    pub embed_torus: Option<TorusSection>,
    #[serde(default)]
    pub verify: Option<VerifySection>,
    #[serde(default)]
    pub ladder: Option<FlatLadderConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: usize,
    /// Chart side; each command has its own default.
    #[serde(default)]
    pub side: Option<f64>,
}

fn default_projection() -> [usize; 3] {
    [0, 1, 2]
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportOptions {
    /// Target coordinates kept in the OBJ mesh.
    #[serde(default = "default_projection")]
    pub projection: [usize; 3],
    #[serde(default = "yes")]
    pub mesh: bool,
    #[serde(default = "yes")]
    pub fields: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions { projection: default_projection(), mesh: true, fields: true }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Amplitude {
    /// `δ^{1/2}(1 + sin(λx₁ + phase))/2`.
    Oscillating { phase: f64 },
    /// Smooth bump vanishing outside a disc.
    Compact,
    /// `fraction · δ^{1/2}`.
    Constant { fraction: f64 },
}

fn d_delta() -> f64 {
    0.09
}
fn d_lambda() -> f64 {
    100.0
}
fn d_tau15() -> f64 {
    1.5
}
fn d_gamma() -> f64 {
    2.0
}
fn d_sigma0() -> f64 {
    0.1
}
fn d_one() -> f64 {
    1.0
}
fn d_slack() -> f64 {
    0.05
}
fn d_amp() -> Amplitude {
    Amplitude::Oscillating { phase: 0.3 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_tau15")]
    pub tau: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_sigma0")]
    pub sigma0: f64,
    #[serde(default = "d_one")]
    pub c0: f64,
    #[serde(default = "d_slack")]
    pub slack: f64,
    #[serde(default = "yes")]
    pub strict: bool,
    #[serde(default = "d_amp")]
    pub amplitude: Amplitude,
}

impl Default for StageSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// `G = (1 + amplitude · sin(wavenumber · x₁)) Id`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalMetric {
    #[serde(default = "d_metric_amp")]
    pub amplitude: f64,
    #[serde(default = "d_one")]
    pub wavenumber: f64,
}

fn d_metric_amp() -> f64 {
    0.1
}

impl Default for ConformalMetric {
    fn default() -> Self {
        ConformalMetric { amplitude: d_metric_amp(), wavenumber: 1.0 }
    }
}

/// How the first `δ` of the schedule is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StartDelta {
    /// `min ρ₀²` for strictly short starts, `max ρ₀²` otherwise.
    #[default]
    FromDefect,
    /// Use `schedule.delta1` as given.
    Config,
}

fn d_schedule(lambda1: f64, tau: f64, delta1: f64, q_max: usize) -> ScheduleConfig {
    ScheduleConfig {
        policy: SchedulePolicy::Geometric { delta_ratio: 0.25, lambda_ratio: 2.0, lambda1 },
        tau: Some(tau),
        ..ScheduleConfig::new(32.0, 1.1, 0.45, delta1, q_max)
    }
}

fn d_iter_schedule() -> ScheduleConfig {
    d_schedule(3.0, 2.0, 0.25, 1)
}
fn d_start_scale() -> f64 {
    0.8
}
fn d_desk_sigma0() -> f64 {
    100.0
}
fn d_four() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterateSection {
    #[serde(default)]
    pub metric: ConformalMetric,
    /// Start map `r · (x₁, x₂, 0, …)`.
    #[serde(default = "d_start_scale")]
    pub start_scale: f64,
    #[serde(default = "d_iter_schedule")]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub start_delta: StartDelta,
    #[serde(default)]
    pub target: TargetSet,
    #[serde(default = "d_desk_sigma0")]
    pub sigma0: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_one")]
    pub c0: f64,
    #[serde(default = "d_one")]
    pub stage_lambda_factor: f64,
    #[serde(default = "d_four")]
    pub stage_delta_factor: f64,
}

impl Default for IterateSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn d_torus_schedule() -> ScheduleConfig {
    d_schedule(1.8, 2.0, 0.5, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusSection {
    #[serde(default)]
    pub metric: ConformalMetric,
    #[serde(default = "d_torus_schedule")]
    pub schedule: ScheduleConfig,
    #[serde(default = "d_desk_sigma0")]
    pub sigma0: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Reported bound for `‖u − u₀‖₀`.
    #[serde(default = "d_one")]
    pub epsilon_target: f64,
}

impl Default for TorusSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

// ---------------------------------------------------------------------------
// Collar problems

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CollarMetric {
    /// `G ≡ 1` on the `2π`-periodic collar.
    Flat,
    /// `G = (1 − t sin β)²`.
    Cone { beta: f64 },
    /// Node-major samples of `G` (first axis fastest), `nx · nt` values on `[0, length) × [0, ε]`.
    Samples { length: f64, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaCurve {
    /// Unit circle in the first two target coordinates with a closed-form normal.
    Circle { normal: CircleNormal },
    /// Node-major samples of `f` and `μ` along `Σ`, `nx · m` values each.
    Samples { f: Vec<f64>, mu: Vec<f64> },
}

fn d_nx() -> usize {
    4096
}
fn d_nt() -> usize {
    128
}
fn d_eps() -> f64 {
    0.2
}
fn d_halvings() -> usize {
    3
}
fn d_flat() -> CollarMetric {
    CollarMetric::Flat
}
fn d_circle() -> SigmaCurve {
    SigmaCurve::Circle { normal: CircleNormal::Inward }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollarProblem {
    #[serde(default = "d_nx")]
    pub nx: usize,
    #[serde(default = "d_nt")]
    pub nt: usize,
    /// Collar depth; halved on loss of shortness, at most `max_halvings` times.
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_halvings")]
    pub max_halvings: usize,
    #[serde(default = "d_flat")]
    pub metric: CollarMetric,
    #[serde(default = "d_circle")]
    pub curve: SigmaCurve,
}

impl Default for CollarProblem {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn d_lambda1_collar() -> f64 {
    16.0
}
fn d_lambda_ratio() -> f64 {
    2.0
}
fn d_delta_ratio() -> f64 {
    0.25
}

/// Iteration on the covered band after the layered split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendIterate {
    pub q_max: usize,
    #[serde(default = "d_lambda1_collar")]
    pub lambda1: f64,
    #[serde(default = "d_lambda_ratio")]
    pub lambda_ratio: f64,
    #[serde(default = "d_delta_ratio")]
    pub delta_ratio: f64,
    /// Defaults to the layer exponent.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "d_desk_sigma0")]
    pub sigma0: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendSection {
    #[serde(default)]
    pub problem: Option<CollarProblem>,
    /// JSON problem file, relative to the config file.
    #[serde(default)]
    pub problem_file: Option<PathBuf>,
    #[serde(default)]
    pub params: ExtensionParams,
    #[serde(default)]
    pub iterate: Option<ExtendIterate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum SuiteCheck {
    Decompose,
    Newton,
    Frames,
    Mollify,
    Holder,
    Rigidity,
}

impl SuiteCheck {
    pub const ALL: [SuiteCheck; 6] =
        [SuiteCheck::Decompose, SuiteCheck::Newton, SuiteCheck::Frames, SuiteCheck::Mollify, SuiteCheck::Holder, SuiteCheck::Rigidity];
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Header of a saved `Map` field container, relative to the config file.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Boundary problem for the connection gap of `input`.
    #[serde(default)]
    pub problem: Option<CollarProblem>,
    #[serde(default)]
    pub problem_file: Option<PathBuf>,
    /// Randomized checks; all of them when neither `input` nor `suite` is given.
    #[serde(default)]
    pub suite: Option<Vec<SuiteCheck>>,
}

// ---------------------------------------------------------------------------
// Validation

/// Fully resolved work for one command.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Stage { grid: GridSpec, section: StageSection },
    Iterate { grid: GridSpec, section: IterateSection },
    Extend { problem: CollarProblem, section: ExtendSection },
    EmbedTorus { grid: GridSpec, section: TorusSection },
    Verify { input: Option<PathBuf>, problem: Option<CollarProblem>, suite: Vec<SuiteCheck> },
    Ladder(FlatLadderConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError(format!("parse: {e}")))
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        err(format!("{name} must be finite and positive, got {v}"))
    }
}

fn check_grid(g: &GridSpec) -> Result<(), ConfigError> {
    if g.resolution < crate::fields::MIN_RESOLUTION {
        return err(format!("grid.resolution must be at least {}", crate::fields::MIN_RESOLUTION));
    }
    if let Some(s) = g.side {
        positive("grid.side", s)?;
    }
    Ok(())
}

fn check_schedule(s: &ScheduleConfig) -> Result<(), ConfigError> {
    positive("schedule.a", s.a)?;
    if !(s.b > 1.0) {
        return err("schedule.b must exceed 1");
    }
    if !(s.theta > 0.0 && s.theta < 0.5) {
        return err("schedule.theta must lie in (0, 1/2)");
    }
    if !(s.delta1 > 0.0 && s.delta1 < 1.0) {
        return err("schedule.delta1 must lie in (0, 1)");
    }
    if let Some(t) = s.tau {
        if !(t > 1.0) {
            return err("schedule.tau must exceed 1");
        }
    }
    if let SchedulePolicy::Geometric { delta_ratio, lambda_ratio, lambda1 } = s.policy {
        if !(delta_ratio > 0.0 && delta_ratio < 1.0) {
            return err("schedule.policy.delta_ratio must lie in (0, 1)");
        }
        if !(lambda_ratio > 1.0 && lambda1 > 1.0) {
            return err("schedule.policy lambda1 and lambda_ratio must exceed 1");
        }
    }
    Ok(())
}

fn check_metric(m: &ConformalMetric) -> Result<(), ConfigError> {
    if !(m.amplitude.is_finite() && m.amplitude.abs() < 1.0) {
        return err("metric.amplitude must lie in (-1, 1)");
    }
    if !m.wavenumber.is_finite() {
        return err("metric.wavenumber must be finite");
    }
    Ok(())
}

fn check_problem(p: &CollarProblem) -> Result<(), ConfigError> {
    for (name, n) in [("nx", p.nx), ("nt", p.nt)] {
        if n < crate::fields::MIN_RESOLUTION {
            return err(format!("problem.{name} must be at least {}", crate::fields::MIN_RESOLUTION));
        }
    }
    positive("problem.epsilon", p.epsilon)?;
    match &p.metric {
        CollarMetric::Flat => {}
        CollarMetric::Cone { beta } => {
            if !beta.is_finite() {
                return err("problem.metric.beta must be finite");
            }
        }
        CollarMetric::Samples { length, values } => {
            positive("problem.metric.length", *length)?;
            if values.len() != p.nx * p.nt {
                return err(format!("problem.metric.values has {} entries, expected nx*nt = {}", values.len(), p.nx * p.nt));
            }
        }
    }
    if let SigmaCurve::Samples { f, mu } = &p.curve {
        if f.len() != p.nx * M || mu.len() != p.nx * M {
            return err(format!("problem.curve samples need nx*m = {} entries each", p.nx * M));
        }
    }
    Ok(())
}

fn load_problem(inline: Option<CollarProblem>, file: Option<PathBuf>, base: &Path) -> Result<Option<CollarProblem>, ConfigError> {
    match (inline, file) {
        (Some(_), Some(_)) => err("give either problem or problem_file, not both"),
        (Some(p), None) => Ok(Some(p)),
        (None, Some(f)) => {
            let path = base.join(f);
            let text = std::fs::read_to_string(&path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            let p = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            Ok(Some(p))
        }
        (None, None) => Ok(None),
    }
}

/// Validates `cfg` for `command` and resolves defaults and referenced files (relative to `base`).
pub fn plan(cfg: &RunConfig, command: CommandKind, base: &Path) -> Result<Plan, ConfigError> {
    if let Some(c) = cfg.command {
        if c != command {
            return err(format!("config is for `{}`, invoked as `{}`", c.name(), command.name()));
        }
    }
    let sections: [(&str, bool, CommandKind); 6] = [
        ("stage", cfg.stage.is_some(), CommandKind::Stage),
        ("iterate", cfg.iterate.is_some(), CommandKind::Iterate),
        ("extend", cfg.extend.is_some(), CommandKind::Extend),
        ("embed_torus", cfg.embed_torus.is_some(), CommandKind::EmbedTorus),
        ("verify", cfg.verify.is_some(), CommandKind::Verify),
        ("ladder", cfg.ladder.is_some(), CommandKind::Ladder),
    ];
    for (name, present, owner) in sections {
        if present && owner != command {
            return err(format!("section `{name}` does not apply to `{}`", command.name()));
        }
    }
    let uses_grid = matches!(command, CommandKind::Stage | CommandKind::Iterate | CommandKind::EmbedTorus);
    if cfg.grid.is_some() && !uses_grid {
        return err(format!("`grid` does not apply to `{}`", command.name()));
    }
    if let Some(&i) = cfg.export.projection.iter().find(|&&i| i >= M) {
        return err(format!("export.projection index {i} out of range for R^{M}"));
    }
    let grid = cfg.grid.unwrap_or(GridSpec { resolution: 256, side: None });
    check_grid(&grid)?;
    Ok(match command {
        CommandKind::Stage => {
            let s = cfg.stage.unwrap_or_default();
            for (n, v) in [("delta", s.delta), ("lambda", s.lambda), ("tau", s.tau), ("gamma", s.gamma), ("sigma0", s.sigma0), ("c0", s.c0)] {
                positive(&format!("stage.{n}"), v)?;
            }
            if !(s.slack >= 0.0) {
                return err("stage.slack must be non-negative");
            }
            if let Amplitude::Constant { fraction } = s.amplitude {
                if !(0.0..=1.0).contains(&fraction) {
                    return err("stage.amplitude.fraction must lie in [0, 1]");
                }
            }
            Plan::Stage { grid, section: s }
        }
        CommandKind::Iterate => {
            let s = cfg.iterate.clone().unwrap_or_default();
            check_schedule(&s.schedule)?;
            check_metric(&s.metric)?;
            positive("iterate.start_scale", s.start_scale)?;
            positive("iterate.sigma0", s.sigma0)?;
            positive("iterate.gamma", s.gamma)?;
            Plan::Iterate { grid, section: s }
        }
        CommandKind::EmbedTorus => {
            let s = cfg.embed_torus.clone().unwrap_or_default();
            check_schedule(&s.schedule)?;
            check_metric(&s.metric)?;
            positive("embed_torus.sigma0", s.sigma0)?;
            positive("embed_torus.gamma", s.gamma)?;
            Plan::EmbedTorus { grid, section: s }
        }
        CommandKind::Extend => {
            let mut s = cfg.extend.clone().unwrap_or_default();
            let problem = load_problem(s.problem.take(), s.problem_file.take(), base)?.unwrap_or_default();
            check_problem(&problem)?;
            if let Some(it) = &s.iterate {
                positive("extend.iterate.lambda1", it.lambda1)?;
                if !(it.lambda_ratio > 1.0 && it.delta_ratio > 0.0 && it.delta_ratio < 1.0) {
                    return err("extend.iterate ratios out of range");
                }
            }
            Plan::Extend { problem, section: s }
        }
        CommandKind::Verify => {
            let s = cfg.verify.clone().unwrap_or_default();
            let problem = load_problem(s.problem, s.problem_file, base)?;
            if let Some(p) = &problem {
                check_problem(p)?;
                if s.input.is_none() {
                    return err("verify.problem needs verify.input");
                }
            }
            let input = s.input.map(|p| base.join(p));
            if let Some(p) = &input {
                if !p.is_file() {
                    return err(format!("verify.input {} does not exist", p.display()));
                }
            }
            let mut suite = s.suite.unwrap_or_else(|| if input.is_none() { SuiteCheck::ALL.to_vec() } else { Vec::new() });
            suite.sort();
            suite.dedup();
            Plan::Verify { input, problem, suite }
        }
        CommandKind::Ladder => {
            let l = cfg.ladder.clone().unwrap_or(FlatLadderConfig {
                resolution: 256,
                side: None,
                delta: 0.09,
                tau: 1.5,
                lambdas: vec![50.0, 100.0, 200.0],
                c0: None,
                phase: 0.3,
            });
            if l.resolution < crate::fields::MIN_RESOLUTION || l.lambdas.len() < 2 {
                return err("ladder needs resolution >= 16 and at least two lambdas");
            }
            if l.lambdas.iter().any(|&x| !(x > 1.0 && x.is_finite())) {
                return err("ladder lambdas must exceed 1");
            }
            positive("ladder.delta", l.delta)?;
            if !(l.tau > 1.0) {
                return err("ladder.tau must exceed 1");
            }
            Plan::Ladder(l)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_of(text: &str, c: CommandKind) -> Result<Plan, ConfigError> {
        plan(&parse_config(text)?, c, Path::new("."))
    }

    #[test]
    fn empty_config_gives_defaults() {
        match plan_of("{}", CommandKind::Stage).unwrap() {
            Plan::Stage { grid, section } => {
                assert_eq!(grid.resolution, 256);
                assert_eq!(section.lambda, 100.0);
                assert!(section.strict);
            }
            p => panic!("{p:?}"),
        }
        match plan_of("{}", CommandKind::Verify).unwrap() {
            Plan::Verify { suite, .. } => assert_eq!(suite.len(), 6),
            p => panic!("{p:?}"),
        }
        assert!(matches!(plan_of("{}", CommandKind::Extend).unwrap(), Plan::Extend { .. }));
    }

    #[test]
    fn unknown_keys_and_wrong_sections_are_rejected() {
        assert!(parse_config(r#"{"stage": {"lamda": 3}}"#).is_err());
        assert!(parse_config(r#"{"bogus": 1}"#).is_err());
        assert!(parse_config("{not json").is_err());
        assert!(plan_of(r#"{"stage": {}}"#, CommandKind::Iterate).is_err());
        assert!(plan_of(r#"{"command": "ladder"}"#, CommandKind::Stage).is_err());
        assert!(plan_of(r#"{"grid": {"resolution": 64}}"#, CommandKind::Ladder).is_err());
        assert!(plan_of(r#"{"grid": {"resolution": 8}}"#, CommandKind::Stage).is_err());
        assert!(plan_of(r#"{"export": {"projection": [0, 1, 8]}}"#, CommandKind::Stage).is_err());
        assert!(plan_of(r#"{"extend": {"problem": {"nx": 64, "metric": {"kind": "samples", "length": 1.0, "values": [1.0]}}}}"#, CommandKind::Extend).is_err());
        assert!(plan_of(r#"{"verify": {"input": "missing.json"}}"#, CommandKind::Verify).is_err());
    }

    #[test]
    fn problem_file_is_resolved_against_the_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("p.json"), r#"{"nx": 64, "nt": 16, "metric": {"kind": "cone", "beta": 0.3}}"#).unwrap();
        let cfg = parse_config(r#"{"extend": {"problem_file": "p.json"}}"#).unwrap();
        match plan(&cfg, CommandKind::Extend, dir.path()).unwrap() {
            Plan::Extend { problem, .. } => {
                assert_eq!(problem.nx, 64);
                assert_eq!(problem.metric, CollarMetric::Cone { beta: 0.3 });
            }
            p => panic!("{p:?}"),
        }
        let both = parse_config(r#"{"extend": {"problem_file": "p.json", "problem": {}}}"#).unwrap();
        assert!(plan(&both, CommandKind::Extend, dir.path()).is_err());
    }
}
