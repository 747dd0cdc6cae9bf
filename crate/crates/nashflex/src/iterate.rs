//! Adapted-short-embedding iteration: parameter schedule, cutoff families, the
//! `ρ_q`/`h_q` recursions and the stage loop, plus the periodic-chart embedding demo.
//!
//! Sign convention: a stage returns `E = ∇vᵀ∇v − ∇uᵀ∇u − ρ̃²(G+H̃)`, so the update that keeps
//! `G − ∇uᵀ∇u = ρ²(G+h)` exact is `h_{q+1} = ((1−χ²)ρ_q²h_q − E)/ρ_{q+1}²`.

use crate::fields::{distance_to_set, Field, FieldError, FieldKind, Grid, MapJet, Sym2, N};
use crate::frames::Seeds;
use crate::stage::{perform_stage_with_seeds, StageCertificate, StageError, StageParams};
use crate::verify::{jacobian_exponent, ExponentFit};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IterError {
    #[error("precondition `{name}` failed: measured {measured:.4e}, bound {bound:.4e}")]
    Precondition { name: String, measured: f64, bound: f64 },
    #[error("ordering violated at q={q}: δ_(q+1)/δ_q = {delta_ratio:.4}, λ_(q+1)/λ_q = {lambda_ratio:.4}")]
    OrderingViolated { q: usize, delta_ratio: f64, lambda_ratio: f64 },
    #[error("cutoff radius r = {radius:.3e} at step {q} is below 4h = {limit:.3e}")]
    CutoffUnresolved { q: usize, radius: f64, limit: f64 },
    #[error("step {q}: ρ² = {value:.4e} below δ = {bound:.4e} at node {node}")]
    DefectBlowup { q: usize, node: usize, value: f64, bound: f64 },
    #[error("stage at step {q}: {source}")]
    Stage {
        q: usize,
        #[source]
        source: StageError,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
}

impl IterError {
    /// Whether the failure is a violated hypothesis rather than a numerical breakdown.
    pub fn is_precondition(&self) -> bool {
        match self {
            IterError::Precondition { .. } | IterError::OrderingViolated { .. } | IterError::CutoffUnresolved { .. } => true,
            IterError::Stage { source, .. } => {
                matches!(source, StageError::Precondition { .. } | StageError::EpsilonTooLarge { .. } | StageError::NyquistViolation { .. })
            }
            _ => false,
        }
    }
}

// ---------------------------------------------------------------------------
// Schedule

/// How `δ_q`, `λ_q` are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulePolicy {
    /// `λ_q = Aδ_q^{−1/(2θ)}`, `λ_{q+1} = λ_q^b`, `δ_{q+1} = (λ_{q+1}/A)^{−2θ}`.
    #[default]
    Power,
    /// Desk-scale compression: `δ_{q+1} = κδ_q`, `λ_{q+1} = μλ_q`, starting at `λ_1`.
    Geometric { delta_ratio: f64, lambda_ratio: f64, lambda1: f64 },
}

fn default_q_max() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub delta1: f64,
    #[serde(default = "default_q_max")]
    pub q_max: usize,
    #[serde(default)]
    pub policy: SchedulePolicy,
    /// Stage exponent; defaults to `1 + ((1−θ)/b)(b−1)`.
    #[serde(default)]
    pub tau: Option<f64>,
}

impl ScheduleConfig {
    pub fn new(a: f64, b: f64, theta: f64, delta1: f64, q_max: usize) -> Self {
        ScheduleConfig { a, b, theta, delta1, q_max, policy: SchedulePolicy::Power, tau: None }
    }
}

/// `δ_q`, `λ_q` for `q = 1..=q_max+2` (the last two feed the cutoffs of the final step).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterSchedule {
    pub config: ScheduleConfig,
    pub tau: f64,
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl IterSchedule {
    pub fn q_max(&self) -> usize {
        self.config.q_max
    }

    pub fn delta(&self, q: usize) -> f64 {
        assert!(q >= 1, "δ_q is indexed from 1");
        self.deltas[q - 1]
    }

    pub fn lambda(&self, q: usize) -> f64 {
        assert!(q >= 1, "λ_q is indexed from 1");
        self.lambdas[q - 1]
    }

    /// `r_q = λ_{q+1}^{−1}`.
    pub fn r(&self, q: usize) -> f64 {
        1.0 / self.lambda(q + 1)
    }

    /// Hölder exponent reached after `levels` applications of `θ ↦ θ/b²`.
    pub fn theta_after(&self, levels: usize) -> f64 {
        self.config.theta / self.config.b.powi(2 * levels as i32)
    }
}

fn precondition(name: &str, measured: f64, bound: f64) -> IterError {
    IterError::Precondition { name: name.into(), measured, bound }
}

pub fn build_schedule(cfg: &ScheduleConfig) -> Result<IterSchedule, IterError> {
    if !(cfg.b > 1.0) {
        return Err(precondition("b > 1", cfg.b, 1.0));
    }
    if !(cfg.theta > 0.0 && cfg.theta < 0.5) {
        return Err(precondition("0 < theta < 1/2", cfg.theta, 0.5));
    }
    if !(cfg.a >= 1.0) {
        return Err(precondition("A >= 1", cfg.a, 1.0));
    }
    if !(cfg.delta1 > 0.0 && cfg.delta1 < 1.0) {
        return Err(precondition("0 < delta1 < 1", cfg.delta1, 1.0));
    }
    let tau = cfg.tau.unwrap_or(1.0 + (1.0 - cfg.theta) / cfg.b * (cfg.b - 1.0));
    if !(tau > 1.0) {
        return Err(precondition("tau > 1", tau, 1.0));
    }
    let len = cfg.q_max + 2;
    let mut deltas = Vec::with_capacity(len);
    let mut lambdas = Vec::with_capacity(len);
    match cfg.policy {
        SchedulePolicy::Power => {
            deltas.push(cfg.delta1);
            lambdas.push(cfg.a * cfg.delta1.powf(-1.0 / (2.0 * cfg.theta)));
            for q in 1..len {
                let l = lambdas[q - 1].powf(cfg.b);
                lambdas.push(l);
                deltas.push((l / cfg.a).powf(-2.0 * cfg.theta));
            }
        }
        SchedulePolicy::Geometric { delta_ratio, lambda_ratio, lambda1 } => {
            if !(delta_ratio > 0.0 && delta_ratio < 1.0) {
                return Err(precondition("0 < delta_ratio < 1", delta_ratio, 1.0));
            }
            if !(lambda_ratio > 1.0 && lambda1 > 0.0) {
                return Err(precondition("lambda_ratio > 1", lambda_ratio, 1.0));
            }
            for q in 0..len {
                deltas.push(cfg.delta1 * delta_ratio.powi(q as i32));
                lambdas.push(lambda1 * lambda_ratio.powi(q as i32));
            }
        }
    }
    if deltas.iter().chain(&lambdas).any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(precondition("finite schedule", f64::NAN, 0.0));
    }
    for q in 1..len {
        let dr = deltas[q] / deltas[q - 1];
        let lr = lambdas[q] / lambdas[q - 1];
        if dr > 0.25 * (1.0 + 1e-12) || lr < 2.0 * (1.0 - 1e-12) {
            return Err(IterError::OrderingViolated { q, delta_ratio: dr, lambda_ratio: lr });
        }
    }
    Ok(IterSchedule { config: cfg.clone(), tau, deltas, lambdas })
}

// ---------------------------------------------------------------------------
// Cutoffs

/// Outer plateau radius of the distance profile: `ψ = 1` for `s ≤ R_STAR`, `ψ̃ = 0` for `s ≥ R_TILDE`.
pub const R_STAR: f64 = 0.75;
pub const R_TILDE: f64 = 1.0;

/// Quintic smoothstep, `0` below `a`, `1` above `b`.
pub fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (6.0 * t - 15.0))
}

/// `φ`: 0 for `s ≤ 7/4`, 1 for `s ≥ 2`.
pub fn phi(s: f64) -> f64 {
    smoothstep(1.75, 2.0, s)
}

/// `φ̃`: 0 for `s ≤ 3/2`, 1 for `s ≥ 7/4`, hence `φ̃ = 1` on `supp φ`.
pub fn phi_tilde(s: f64) -> f64 {
    smoothstep(1.5, 1.75, s)
}

const R_MID: f64 = 0.5 * (R_STAR + R_TILDE);

pub fn psi_s(s: f64) -> f64 {
    1.0 - smoothstep(R_STAR, R_MID, s)
}

pub fn psi_s_tilde(s: f64) -> f64 {
    1.0 - smoothstep(R_MID, R_TILDE, s)
}

/// The set `S` where the iteration drives the defect to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSet {
    #[default]
    WholeChart,
    /// Grid lines `x_a ∈ spacing·ℤ` of a coarse square mesh.
    Skeleton { spacing: f64 },
    /// Nodes with `lo ≤ x_axis ≤ hi`.
    Band { axis: usize, lo: f64, hi: f64 },
}

impl TargetSet {
    pub fn mask(&self, grid: &Grid) -> Vec<bool> {
        match *self {
            TargetSet::WholeChart => vec![true; grid.len()],
            TargetSet::Skeleton { spacing } => {
                let hs = grid.spacing();
                (0..grid.len())
                    .map(|idx| {
                        let x = grid.coord_of(idx);
                        (0..N).any(|a| {
                            let r = x[a] / spacing;
                            (r - r.round()).abs() * spacing < 0.5 * hs[a]
                        })
                    })
                    .collect()
            }
            TargetSet::Band { axis, lo, hi } => (0..grid.len())
                .map(|idx| {
                    let x = grid.coord_of(idx)[axis.min(N - 1)];
                    x >= lo && x <= hi
                })
                .collect(),
        }
    }

    pub fn distance(&self, grid: &Grid) -> Field {
        distance_to_set(grid, &self.mask(grid))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutoffPair {
    pub chi: Field,
    pub chi_tilde: Field,
    pub stats: CutoffStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffStats {
    pub support_chi: usize,
    pub support_chi_tilde: usize,
    pub plateau_chi: usize,
    /// `max|∇χ_q| / λ_{q+2}`.
    pub gradient_ratio: f64,
    /// Nodes with `χ > 0` and `χ̃ < 1`; zero by construction.
    pub nesting_violations: usize,
    /// Smallest distance from `supp χ` to a node outside `supp χ̃`, times `λ_{q+2}`.
    pub separation_ratio: f64,
}

/// `χ_q = φ(ρ/δ_{q+2}^{1/2}) ψ(dist(x,S)/r_{q+1})`, `χ̃_q` likewise. `rho` is the amplitude the
/// profiles read (the iteration passes the initial amplitude).
pub fn build_cutoffs(rho: &Field, dist: &Field, schedule: &IterSchedule, q: usize) -> Result<CutoffPair, IterError> {
    rho.expect_kind(FieldKind::Scalar)?;
    dist.expect_kind(FieldKind::Scalar)?;
    rho.same_shape(dist)?;
    let grid = *rho.grid();
    let sd = schedule.delta(q + 2).sqrt();
    let r = schedule.r(q + 1);
    if dist.max_value() > 0.0 && r < 4.0 * grid.h() {
        return Err(IterError::CutoffUnresolved { q, radius: r, limit: 4.0 * grid.h() });
    }
    let mut chi = Field::zeros(grid, FieldKind::Scalar);
    let mut chi_t = Field::zeros(grid, FieldKind::Scalar);
    for idx in 0..grid.len() {
        let s = rho.s(idx) / sd;
        let d = dist.s(idx) / r;
        chi.data_mut()[idx] = phi(s) * psi_s(d);
        chi_t.data_mut()[idx] = phi_tilde(s) * psi_s_tilde(d);
    }
    let lam = schedule.lambda(q + 2);
    let grad = crate::fields::gradient(&chi);
    let gmax = (0..grid.len()).map(|i| grad.at(i)[0].hypot(grad.at(i)[1])).fold(0.0, f64::max);
    let nesting_violations = (0..grid.len()).filter(|&i| chi.s(i) > 0.0 && chi_t.s(i) < 1.0).count();
    let outside: Vec<bool> = chi_t.data().iter().map(|&c| c == 0.0).collect();
    let to_outside = distance_to_set(&grid, &outside);
    let sep = (0..grid.len()).filter(|&i| chi.s(i) > 0.0).map(|i| to_outside.s(i)).fold(f64::INFINITY, f64::min);
    let stats = CutoffStats {
        support_chi: chi.data().iter().filter(|&&c| c > 0.0).count(),
        support_chi_tilde: chi_t.data().iter().filter(|&&c| c > 0.0).count(),
        plateau_chi: chi.data().iter().filter(|&&c| c == 1.0).count(),
        gradient_ratio: gmax / lam,
        nesting_violations,
        separation_ratio: sep * lam,
    };
    Ok(CutoffPair { chi, chi_tilde: chi_t, stats })
}

/// `ρ_{q+1}² = ρ_q²(1−χ_q²) + δ_{q+2}χ_q²`.
pub fn rho_update(rho: &Field, chi: &Field, delta_next: f64) -> Result<Field, IterError> {
    rho.same_shape(chi)?;
    let mut out = rho.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(chi.data()) {
        if c != 0.0 {
            let r2 = *o * *o;
            *o = (r2 * (1.0 - c * c) + delta_next * c * c).sqrt();
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Triples

/// `(u, ρ, h)` with `G − ∇uᵀ∇u = ρ²(G+h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedTriple {
    pub u: MapJet,
    pub rho: Field,
    pub h: Field,
    pub g: Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedChecks {
    pub identity_residual: f64,
    /// Smallest `t` with `−tG ≤ h ≤ tG` nodewise; adaptedness asks for `t ≤ 1/2`.
    pub h_relative: f64,
    pub rho_max: f64,
    pub rho_min: f64,
}

impl AdaptedTriple {
    pub fn new(u: MapJet, rho: Field, h: Field, g: Field) -> Result<Self, IterError> {
        rho.expect_kind(FieldKind::Scalar)?;
        h.expect_kind(FieldKind::Sym2)?;
        g.expect_kind(FieldKind::Sym2)?;
        for f in [&rho, &h, &g] {
            if f.grid() != u.grid() {
                return Err(FieldError::GridMismatch.into());
            }
        }
        Ok(AdaptedTriple { u, rho, h, g })
    }

    /// Starting triple for a strictly short map: `ρ² = tr(G−u♯e)/tr G`, `h = (G−u♯e)/ρ² − G`,
    /// which gives `h = 0` for conformal defects.
    pub fn from_short_map(u: MapJet, g: Field) -> Result<Self, IterError> {
        g.expect_kind(FieldKind::Sym2)?;
        let grid = *u.grid();
        let metric = u.metric();
        let mut rho = Field::zeros(grid, FieldKind::Scalar);
        let mut h = Field::zeros(grid, FieldKind::Sym2);
        for idx in 0..grid.len() {
            let gg = g.sym(idx);
            let d = gg.sub(metric.sym(idx));
            let (lo, _) = d.eigenvalues();
            if lo < -1e-12 {
                return Err(precondition("G - u#e >= 0", lo, 0.0));
            }
            let r2 = (d.trace() / gg.trace()).max(0.0);
            rho.data_mut()[idx] = r2.sqrt();
            if r2 > 0.0 {
                h.set_sym(idx, d.scale(1.0 / r2).sub(gg));
            }
        }
        AdaptedTriple::new(u, rho, h, g)
    }

    /// `G − ∇uᵀ∇u − ρ²(G+h)` from the tracked Jacobian.
    pub fn identity_residual(&self) -> Field {
        let metric = self.u.metric();
        let mut out = Field::zeros(*self.u.grid(), FieldKind::Sym2);
        for idx in 0..out.grid().len() {
            let gg = self.g.sym(idx);
            let r = self.rho.s(idx);
            out.set_sym(idx, gg.sub(metric.sym(idx)).sub(gg.add(self.h.sym(idx)).scale(r * r)));
        }
        out
    }

    /// `G − ∇uᵀ∇u`.
    pub fn metric_defect(&self) -> Field {
        self.g.sub(&self.u.metric()).expect("same grid by construction")
    }

    pub fn checks(&self) -> AdaptedChecks {
        let mut h_relative: f64 = 0.0;
        for idx in 0..self.g.grid().len() {
            if self.rho.s(idx) == 0.0 {
                continue;
            }
            let gg = self.g.sym(idx);
            let hh = self.h.sym(idx);
            // Largest |eigenvalue| of G^{-1/2} h G^{-1/2}, via the generalized problem.
            let inv = gg.inverse().unwrap_or(Sym2::ZERO);
            let m = [
                inv.xx * hh.xx + inv.xy * hh.xy,
                inv.xx * hh.xy + inv.xy * hh.yy,
                inv.xy * hh.xx + inv.yy * hh.xy,
                inv.xy * hh.xy + inv.yy * hh.yy,
            ];
            let tr = m[0] + m[3];
            let det = m[0] * m[3] - m[1] * m[2];
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            h_relative = h_relative.max((0.5 * tr + disc).abs()).max((0.5 * tr - disc).abs());
        }
        AdaptedChecks {
            identity_residual: self.identity_residual().sup_norm(),
            h_relative,
            rho_max: self.rho.max_value(),
            rho_min: self.rho.min_value(),
        }
    }
}

// ---------------------------------------------------------------------------
// Iteration

fn default_one() -> f64 {
    1.0
}
fn default_four() -> f64 {
    4.0
}
fn default_gamma() -> f64 {
    2.0
}
fn default_sigma0() -> f64 {
    0.1
}

/// Per-run knobs passed to every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterConfig {
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub target: TargetSet,
    /// Stage frequency parameter is `C·λ_{q+2}`.
    #[serde(default = "default_one")]
    pub stage_lambda_factor: f64,
    /// Stage amplitude bound is `c·δ_{q+1}` (capped below 1).
    #[serde(default = "default_four")]
    pub stage_delta_factor: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_one")]
    pub c0: f64,
}

impl IterConfig {
    pub fn new(schedule: ScheduleConfig) -> Self {
        IterConfig {
            schedule,
            target: TargetSet::WholeChart,
            stage_lambda_factor: 1.0,
            stage_delta_factor: 4.0,
            gamma: 2.0,
            sigma0: 0.1,
            c0: 1.0,
        }
    }

    pub fn stage_params(&self, schedule: &IterSchedule, q: usize) -> StageParams {
        let mut p = StageParams::new(
            (self.stage_delta_factor * schedule.delta(q + 1)).min(0.99),
            self.stage_lambda_factor * schedule.lambda(q + 2),
            schedule.tau,
        );
        p.gamma = self.gamma;
        p.sigma0 = self.sigma0;
        p.c0 = self.c0;
        p.strict = false;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub q: usize,
    pub delta_next: f64,
    pub delta_after: f64,
    pub stage_lambda: f64,
    pub stage_frequency: f64,
    pub cutoffs: CutoffStats,
    pub u_step_c0: f64,
    pub u_step_c1: f64,
    pub rho_max: f64,
    pub h_sup: f64,
    pub h_relative: f64,
    pub stage_error_c0: f64,
    pub identity_residual: f64,
    pub metric_defect: f64,
    /// Nodes outside `supp χ̃_q` whose triple changed.
    pub locality_violations: usize,
    pub certificate: Option<StageCertificate>,
}

/// One pass `(u_q, ρ_q, h_q) → (u_{q+1}, ρ_{q+1}, h_{q+1})`.
pub fn inductive_step(
    triple: &AdaptedTriple,
    rho_ref: &Field,
    dist: &Field,
    schedule: &IterSchedule,
    q: usize,
    cfg: &IterConfig,
    seeds: &Seeds,
) -> Result<(AdaptedTriple, StepReport), IterError> {
    let grid = *triple.u.grid();
    let cut = build_cutoffs(rho_ref, dist, schedule, q)?;
    let d2 = schedule.delta(q + 2);
    let params = cfg.stage_params(schedule, q);

    let mut rho_t = Field::zeros(grid, FieldKind::Scalar);
    let mut h_t = Field::zeros(grid, FieldKind::Sym2);
    for idx in 0..grid.len() {
        let ct = cut.chi_tilde.s(idx);
        if ct == 0.0 {
            continue;
        }
        let r2 = triple.rho.s(idx).powi(2);
        if r2 <= d2 {
            return Err(IterError::DefectBlowup { q, node: idx, value: r2, bound: d2 });
        }
        rho_t.data_mut()[idx] = cut.chi.s(idx) * (r2 - d2).sqrt();
        h_t.set_sym(idx, triple.h.sym(idx).scale(ct * r2 / (r2 - d2)));
    }
    let rho_next = rho_update(&triple.rho, &cut.chi, d2)?;

    let (u_next, e, certificate) = if cut.stats.support_chi == 0 {
        (triple.u.clone(), Field::zeros(grid, FieldKind::Sym2), None)
    } else {
        let res = perform_stage_with_seeds(&triple.u, &rho_t, &h_t, &triple.g, &params, seeds)
            .map_err(|source| IterError::Stage { q, source })?;
        (res.v, res.e, Some(res.certificate))
    };

    let mut h_next = triple.h.clone();
    for idx in 0..grid.len() {
        let c = cut.chi.s(idx);
        let r_new = rho_next.s(idx);
        if cut.chi_tilde.s(idx) > 0.0 && r_new * r_new < d2 * (1.0 - 1e-12) {
            return Err(IterError::DefectBlowup { q, node: idx, value: r_new * r_new, bound: d2 });
        }
        if c == 0.0 && e.sym(idx) == Sym2::ZERO {
            continue;
        }
        let r2 = triple.rho.s(idx).powi(2);
        let upd = triple.h.sym(idx).scale((1.0 - c * c) * r2).sub(e.sym(idx)).scale(1.0 / (r_new * r_new));
        h_next.set_sym(idx, upd);
    }

    let mut locality_violations = 0;
    for idx in 0..grid.len() {
        if cut.chi_tilde.s(idx) == 0.0
            && (u_next.value.at(idx) != triple.u.value.at(idx)
                || u_next.jacobian.at(idx) != triple.u.jacobian.at(idx)
                || rho_next.s(idx) != triple.rho.s(idx)
                || h_next.at(idx) != triple.h.at(idx))
        {
            locality_violations += 1;
        }
    }

    let step = u_next.sub(&triple.u)?;
    let next = AdaptedTriple::new(u_next, rho_next, h_next, triple.g.clone())?;
    let checks = next.checks();
    let report = StepReport {
        q,
        delta_next: schedule.delta(q + 1),
        delta_after: d2,
        stage_lambda: params.lambda,
        stage_frequency: params.frequency(),
        cutoffs: cut.stats,
        u_step_c0: step.value.sup_norm(),
        u_step_c1: step.ck_norm(1),
        rho_max: checks.rho_max,
        h_sup: next.h.sup_norm(),
        h_relative: checks.h_relative,
        stage_error_c0: e.sup_norm(),
        identity_residual: checks.identity_residual,
        metric_defect: next.metric_defect().sup_norm(),
        locality_violations,
        certificate,
    };
    Ok((next, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub tau: f64,
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub steps: Vec<StepReport>,
    pub completed: usize,
    pub initial_defect: f64,
    pub final_defect: f64,
    /// `4δ_{Q+1}` for the number of completed steps.
    pub tail_bound: f64,
    /// `‖u_{q+1}−u_q‖₁ / ‖u_q−u_{q−1}‖₁`.
    pub c1_ratios: Vec<f64>,
    pub c0_partial_sum: f64,
    pub locality_violations: usize,
    /// Nodes never inside any `supp χ̃_q`.
    pub untouched_nodes: usize,
    pub untouched_bit_exact: bool,
    pub final_identity_residual: f64,
    pub jacobian_exponent: Option<ExponentFit>,
    pub theta_target: f64,
    pub error: Option<String>,
    /// The stopping error was a violated hypothesis (see [`IterError::is_precondition`]).
    #[serde(default)]
    pub stopped_on_precondition: bool,
}

impl ConvergenceReport {
    /// Per-step CSV table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "q,delta_next,stage_lambda,stage_frequency,u_step_c0,u_step_c1,rho_max,h_sup,stage_error_c0,metric_defect,identity_residual,support_chi,locality_violations\n",
        );
        for r in &self.steps {
            s.push_str(&format!(
                "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}\n",
                r.q,
                r.delta_next,
                r.stage_lambda,
                r.stage_frequency,
                r.u_step_c0,
                r.u_step_c1,
                r.rho_max,
                r.h_sup,
                r.stage_error_c0,
                r.metric_defect,
                r.identity_residual,
                r.cutoffs.support_chi,
                r.locality_violations
            ));
        }
        s
    }
}

/// Run up to `q_max` inductive steps, stopping early (with a partial report) on the first error.
pub fn iterate_to_isometry(
    start: &AdaptedTriple,
    schedule: &IterSchedule,
    cfg: &IterConfig,
    q_max: usize,
    seeds: &Seeds,
) -> (AdaptedTriple, ConvergenceReport) {
    let grid = *start.u.grid();
    let dist = cfg.target.distance(&grid);
    let rho_ref = start.rho.clone();
    let q_max = q_max.min(schedule.q_max());
    let mut triple = start.clone();
    let mut steps = Vec::new();
    let mut touched = vec![false; grid.len()];
    let mut error = None;
    let mut stopped_on_precondition = false;
    for q in 0..q_max {
        match inductive_step(&triple, &rho_ref, &dist, schedule, q, cfg, seeds) {
            Ok((next, rep)) => {
                if let Ok(cut) = build_cutoffs(&rho_ref, &dist, schedule, q) {
                    for (t, &c) in touched.iter_mut().zip(cut.chi_tilde.data()) {
                        *t |= c > 0.0;
                    }
                }
                triple = next;
                steps.push(rep);
            }
            Err(e) => {
                stopped_on_precondition = e.is_precondition();
                error = Some(e.to_string());
                break;
            }
        }
    }
    let untouched: Vec<usize> = (0..grid.len()).filter(|&i| !touched[i]).collect();
    let untouched_bit_exact = untouched.iter().all(|&i| {
        triple.u.value.at(i) == start.u.value.at(i)
            && triple.u.jacobian.at(i) == start.u.jacobian.at(i)
            && triple.rho.s(i) == start.rho.s(i)
            && triple.h.at(i) == start.h.at(i)
    });
    let c1_ratios = steps.windows(2).map(|w| w[1].u_step_c1 / w[0].u_step_c1).collect();
    let completed = steps.len();
    let ladder = crate::fields::default_ladder(&grid);
    let report = ConvergenceReport {
        tau: schedule.tau,
        deltas: schedule.deltas.clone(),
        lambdas: schedule.lambdas.clone(),
        completed,
        initial_defect: start.metric_defect().sup_norm(),
        final_defect: triple.metric_defect().sup_norm(),
        tail_bound: 4.0 * schedule.delta(completed + 1),
        c1_ratios,
        c0_partial_sum: steps.iter().map(|s| s.u_step_c0).sum(),
        locality_violations: steps.iter().map(|s| s.locality_violations).sum(),
        untouched_nodes: untouched.len(),
        untouched_bit_exact,
        final_identity_residual: triple.identity_residual().sup_norm(),
        jacobian_exponent: if completed > 0 { jacobian_exponent(&triple.u, &ladder).ok() } else { None },
        theta_target: schedule.theta_after(completed),
        steps,
        error,
        stopped_on_precondition,
    };
    (triple, report)
}

// ---------------------------------------------------------------------------
// Periodic-chart demo

/// `u₀ = r·(cos x₁, sin x₁, cos x₂, sin x₂, 0, …)` on the `2π`-periodic chart, together with
/// its explicit normal frame as per-node seeds (constant seeds cannot frame a closed surface).
pub fn clifford_torus(grid: Grid, m: usize, r: f64) -> (MapJet, Seeds) {
    assert!(m >= 4, "torus needs four ambient coordinates");
    let u = MapJet::from_fn(
        grid,
        m,
        |x, out| {
            out[0] = r * x[0].cos();
            out[1] = r * x[0].sin();
            out[2] = r * x[1].cos();
            out[3] = r * x[1].sin();
        },
        |x, out| {
            out[0] = -r * x[0].sin();
            out[1] = r * x[0].cos();
            out[m + 2] = -r * x[1].sin();
            out[m + 3] = r * x[1].cos();
        },
    );
    let count = m - N;
    let seeds = Field::from_fn(grid, FieldKind::Vector(count * m), |x, out| {
        out[0] = x[0].cos();
        out[1] = x[0].sin();
        out[m + 2] = x[1].cos();
        out[m + 3] = x[1].sin();
        for i in 2..count {
            out[i * m + i + 2] = 1.0;
        }
    });
    (u, Seeds::PerNode(seeds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub radius: f64,
    pub delta_star: f64,
    pub start: AdaptedChecks,
    pub proximity: f64,
    pub epsilon_target: f64,
    pub convergence: ConvergenceReport,
}

/// Scaled Clifford torus start with `max ρ₀² = δ₁` (from the config), followed by the iteration.
/// The schedule is rebuilt with `δ₁ = min ρ₀²` so the first cutoff is `≡ 1` while `ρ₀² ≤ 4δ₁`.
pub fn global_embed_demo(g: &Field, cfg: &IterConfig, epsilon_target: f64) -> Result<(MapJet, EmbedReport), IterError> {
    let grid = *g.grid();
    if !(grid.periodic[0] && grid.periodic[1]) {
        return Err(precondition("periodic chart", 0.0, 1.0));
    }
    let delta1 = cfg.schedule.delta1;
    let half_trace_max = (0..grid.len()).map(|i| 0.5 * g.sym(i).trace()).fold(0.0, f64::max);
    let radius = ((1.0 - delta1) * half_trace_max).sqrt();
    let (u0, seeds) = clifford_torus(grid, crate::fields::M, radius);
    let start = AdaptedTriple::from_short_map(u0.clone(), g.clone())?;
    let checks = start.checks();
    if !(checks.rho_min > 0.0) {
        return Err(precondition("strictly short start", checks.rho_min, 0.0));
    }
    if checks.rho_max > 2.0 * checks.rho_min {
        return Err(precondition("max rho0 <= 2 min rho0", checks.rho_max, 2.0 * checks.rho_min));
    }
    let mut run = cfg.clone();
    run.schedule.delta1 = checks.rho_min.powi(2);
    let schedule = build_schedule(&run.schedule)?;
    let (end, convergence) = iterate_to_isometry(&start, &schedule, &run, schedule.q_max(), &seeds);
    let proximity = end.u.value.sub(&u0.value)?.sup_norm();
    let report = EmbedReport { radius, delta_star: run.schedule.delta1, start: checks, proximity, epsilon_target, convergence };
    Ok((end.u, report))
}
