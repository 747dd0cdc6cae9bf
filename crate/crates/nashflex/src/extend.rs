//! One-sided isometric extension off a boundary curve `Σ`.
//!
//! The collar is the chart `x ∈ [0, L)` (periodic, along `Σ`) times `t ∈ [0, ε]` with metric
//! `G(x,t)dx² + dt²`. Pipeline: admissibility of the prescribed normal `μ`, the short
//! extension `f + tμ − t²μ`, the defect density, dyadic-layer corrugation leaving the margin
//! `αρ²g`, and the hand-off to the iteration.

use crate::decompose::{decompose_spd, radius_consumed, standard_directions, DecomposeError};
use crate::fields::{dot, holder_seminorm, Field, FieldError, FieldKind, Grid, MapJet, Sym2, N};
use crate::frames::Seeds;
use crate::iterate::{build_schedule, iterate_to_isometry, smoothstep, AdaptedTriple, ConvergenceReport, IterConfig, IterError, TargetSet};
use crate::stage::{perform_stage_with_seeds, StageCertificate, StageError, StageParams, NYQUIST_LIMIT};
use crate::verify::{boundary_trace, connection_gap, fit_loglog, GapReport, LogLogFit};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtendError {
    #[error("normal not admissible at Σ-node {node}: margin {margin:.3e} <= 0")]
    NotAdmissible { node: usize, margin: f64 },
    #[error("boundary data invalid ({what}) at Σ-node {node}: {value:.3e}")]
    BadSigma { what: String, node: usize, value: f64 },
    #[error("collar metric invalid at node {node}: G = {value:.3e}")]
    BadCollar { node: usize, value: f64 },
    #[error("short extension not short at x = {x:.4}, t = {t:.4}: smallest defect eigenvalue {eigen:.3e}")]
    ShortnessLost { x: f64, t: f64, eigen: f64 },
    #[error("negative defect trace {value:.3e} at node {node}")]
    NegativeTrace { node: usize, value: f64 },
    #[error("layer {layer} unresolved: {reason}")]
    LayerUnresolved { layer: usize, reason: String },
    #[error("invalid extension parameter {name}: {value}")]
    BadParams { name: String, value: f64 },
    #[error("margin split not decomposable at node {node}: {source}")]
    Decomposition { node: usize, source: DecomposeError },
    #[error("layer {layer} stage failed: {source}")]
    Stage { layer: usize, source: StageError },
    #[error(transparent)]
    Iterate(#[from] IterError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

impl ExtendError {
    /// Violated inputs, as opposed to numerical failures inside the pipeline.
    pub fn is_precondition(&self) -> bool {
        match self {
            ExtendError::NotAdmissible { .. }
            | ExtendError::BadSigma { .. }
            | ExtendError::BadCollar { .. }
            | ExtendError::ShortnessLost { .. }
            | ExtendError::LayerUnresolved { .. }
            | ExtendError::BadParams { .. } => true,
            ExtendError::Stage { source, .. } => matches!(
                source,
                StageError::Precondition { .. } | StageError::NyquistViolation { .. } | StageError::EpsilonTooLarge { .. }
            ),
            ExtendError::Iterate(e) => e.is_precondition(),
            _ => false,
        }
    }
}

// ---------------------------------------------------------------------------
// Collar and boundary data

/// Collar coordinates `(x, t)` with the Fermi-form metric `G(x,t)dx² + dt²`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollarChart {
    grid: Grid,
    g: Field,
}

impl CollarChart {
    /// `nx` periodic nodes along a curve of length `length`, `nt` rows over `t ∈ [0, depth]`.
    pub fn new(length: f64, nx: usize, nt: usize, depth: f64, gfn: impl Fn(f64, f64) -> f64) -> Result<Self, ExtendError> {
        let grid = Grid::new([length, depth], [nx, nt], [true, false])?;
        let g = Field::scalar_fn(grid, |p| gfn(p[0], p[1]));
        Self::from_field(g)
    }

    pub fn flat(nx: usize, nt: usize, depth: f64) -> Result<Self, ExtendError> {
        Self::new(TAU, nx, nt, depth, |_, _| 1.0)
    }

    /// Collar of the cone `(1 − t sin β)²dx² + dt²`, for which the tilted circle
    /// `(1 − t sin β) f + t cos β e₃` is an isometric product extension.
    pub fn cone(nx: usize, nt: usize, depth: f64, beta: f64) -> Result<Self, ExtendError> {
        Self::new(TAU, nx, nt, depth, |_, t| (1.0 - t * beta.sin()).powi(2))
    }

    /// `G` sampled on a collar grid (`x` periodic, `t` open).
    pub fn from_field(g: Field) -> Result<Self, ExtendError> {
        g.expect_kind(FieldKind::Scalar)?;
        let grid = *g.grid();
        if !grid.periodic[0] || grid.periodic[1] {
            return Err(ExtendError::BadParams { name: "collar periodicity (x periodic, t open)".into(), value: 0.0 });
        }
        if let Some(node) = g.data().iter().position(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(ExtendError::BadCollar { node, value: g.data()[node] });
        }
        Ok(CollarChart { grid, g })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn depth(&self) -> f64 {
        self.grid.extent[1]
    }

    pub fn nx(&self) -> usize {
        self.grid.nodes[0]
    }

    /// `G` as a scalar field.
    pub fn g_scalar(&self) -> &Field {
        &self.g
    }

    /// The metric `diag(G, 1)` as a `Sym2` field.
    pub fn metric(&self) -> Field {
        let mut out = Field::zeros(self.grid, FieldKind::Sym2);
        for idx in 0..self.grid.len() {
            out.set_sym(idx, Sym2::diag(self.g.s(idx), 1.0));
        }
        out
    }

    /// `G(x, 0)` at the Σ-nodes.
    pub fn sigma_metric(&self) -> Vec<f64> {
        (0..self.nx()).map(|i| self.g.s(self.grid.index(i, 0))).collect()
    }

    /// `L(x) = −½ ∂_t G(x, 0)` from a one-sided three-point difference.
    pub fn sigma_curvature(&self) -> Vec<f64> {
        let ht = self.grid.spacing_axis(1);
        (0..self.nx())
            .map(|i| {
                let g = |j| self.g.s(self.grid.index(i, j));
                -0.5 * (-3.0 * g(0) + 4.0 * g(1) - g(2)) / (2.0 * ht)
            })
            .collect()
    }
}

/// Choice of `μ` for the unit circle `f = (cos x, sin x, 0, …)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CircleNormal {
    /// `μ = −f`.
    Inward,
    /// `μ = e₃`.
    Binormal,
    /// `μ = −sin β f + cos β e₃`.
    Tilted { beta: f64 },
}

/// Data along `Σ`: the curve `f`, its derivatives, the normal `μ`, and `G(x,0)`, `L(x)` from the collar.
/// Vector quantities are stored node-major with `m` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaData {
    m: usize,
    pub f: Vec<f64>,
    pub f_x: Vec<f64>,
    pub f_xx: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub g0: Vec<f64>,
    pub l: Vec<f64>,
}

/// Fourth-order periodic first and second differences of node-major samples.
pub(crate) fn periodic_derivatives(v: &[f64], m: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = v.len() / m;
    let at = |i: isize, c: usize| v[(i.rem_euclid(n as isize) as usize) * m + c];
    let mut d1 = vec![0.0; v.len()];
    let mut d2 = vec![0.0; v.len()];
    for i in 0..n as isize {
        for c in 0..m {
            let (m2, m1, p0, p1, p2) = (at(i - 2, c), at(i - 1, c), at(i, c), at(i + 1, c), at(i + 2, c));
            d1[i as usize * m + c] = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
            d2[i as usize * m + c] = (-m2 + 16.0 * m1 - 30.0 * p0 + 16.0 * p1 - p2) / (12.0 * h * h);
        }
    }
    (d1, d2)
}

impl SigmaData {
    /// Boundary data from samples of `f` and `μ` (node-major, `m` components per node).
    pub fn from_samples(collar: &CollarChart, m: usize, f: Vec<f64>, mu: Vec<f64>) -> Result<Self, ExtendError> {
        let nx = collar.nx();
        if m < 3 || f.len() != nx * m || mu.len() != nx * m {
            return Err(ExtendError::BadSigma { what: "sample length".into(), node: 0, value: f.len() as f64 });
        }
        let h = collar.grid.spacing_axis(0);
        let (f_x, f_xx) = periodic_derivatives(&f, m, h);
        let (mu_x, _) = periodic_derivatives(&mu, m, h);
        let sd = SigmaData { m, f, f_x, f_xx, mu, mu_x, g0: collar.sigma_metric(), l: collar.sigma_curvature() };
        sd.validate(10.0 * h * h)?;
        Ok(sd)
    }

    /// The planar unit circle in `ℝ^m` with closed-form derivatives; needs a `2π` collar.
    pub fn circle(collar: &CollarChart, m: usize, normal: CircleNormal) -> Result<Self, ExtendError> {
        if m < 3 {
            return Err(ExtendError::BadSigma { what: "target dimension".into(), node: 0, value: m as f64 });
        }
        if (collar.grid.extent[0] - TAU).abs() > 1e-12 {
            return Err(ExtendError::BadSigma { what: "circle needs a 2π collar".into(), node: 0, value: collar.grid.extent[0] });
        }
        let nx = collar.nx();
        let h = collar.grid.spacing_axis(0);
        let mut sd = SigmaData {
            m,
            f: vec![0.0; nx * m],
            f_x: vec![0.0; nx * m],
            f_xx: vec![0.0; nx * m],
            mu: vec![0.0; nx * m],
            mu_x: vec![0.0; nx * m],
            g0: collar.sigma_metric(),
            l: collar.sigma_curvature(),
        };
        for i in 0..nx {
            let (s, c) = (i as f64 * h).sin_cos();
            let o = i * m;
            sd.f[o] = c;
            sd.f[o + 1] = s;
            sd.f_x[o] = -s;
            sd.f_x[o + 1] = c;
            sd.f_xx[o] = -c;
            sd.f_xx[o + 1] = -s;
            let (a, b) = match normal {
                CircleNormal::Inward => (-1.0, 0.0),
                CircleNormal::Binormal => (0.0, 1.0),
                CircleNormal::Tilted { beta } => (-beta.sin(), beta.cos()),
            };
            sd.mu[o] = a * c;
            sd.mu[o + 1] = a * s;
            sd.mu[o + 2] = b;
            sd.mu_x[o] = -a * s;
            sd.mu_x[o + 1] = a * c;
        }
        sd.validate(1e-9)?;
        Ok(sd)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nodes(&self) -> usize {
        self.g0.len()
    }

    fn slice<'a>(&self, v: &'a [f64], i: usize) -> &'a [f64] {
        &v[i * self.m..(i + 1) * self.m]
    }

    /// `|f_x|² = G(x,0)`, `|μ| = 1`, `⟨μ, f_x⟩ = 0` to `tol` (relative to `G`).
    pub fn validate(&self, tol: f64) -> Result<(), ExtendError> {
        for i in 0..self.nodes() {
            let fx = self.slice(&self.f_x, i);
            let mu = self.slice(&self.mu, i);
            let g0 = self.g0[i];
            let checks = [
                ("|f_x|^2 = G(x,0)", (dot(fx, fx) - g0).abs() / g0),
                ("|mu| = 1", (dot(mu, mu) - 1.0).abs()),
                ("<mu, f_x> = 0", dot(mu, fx).abs() / g0.sqrt()),
            ];
            for (what, value) in checks {
                if !(value <= tol) {
                    return Err(ExtendError::BadSigma { what: what.into(), node: i, value });
                }
            }
        }
        Ok(())
    }

    /// `L̄(∂_x, ∂_x)`: the part of `f_xx` normal to `f_x`.
    pub fn l_bar(&self, i: usize) -> Vec<f64> {
        let fx = self.slice(&self.f_x, i);
        let fxx = self.slice(&self.f_xx, i);
        let s = dot(fxx, fx) / dot(fx, fx);
        fxx.iter().zip(fx).map(|(a, b)| a - s * b).collect()
    }

    /// `⟨μ, L̄(X,X)⟩ − L(X,X)` for the unit tangent `X = ∂_x/√G`.
    pub fn margin(&self) -> Vec<f64> {
        (0..self.nodes()).map(|i| (dot(self.slice(&self.mu, i), &self.l_bar(i)) - self.l[i]) / self.g0[i]).collect()
    }

    pub fn f_at(&self, i: usize) -> &[f64] {
        self.slice(&self.f, i)
    }

    pub fn mu_at(&self, i: usize) -> &[f64] {
        self.slice(&self.mu, i)
    }
}

/// Admissibility margin per Σ-node, failing unless it is strictly positive everywhere.
pub fn check_admissible(sd: &SigmaData) -> Result<Vec<f64>, ExtendError> {
    let margin = sd.margin();
    let (node, &min) = margin.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("Σ has nodes");
    // Strict positivity with a rounding allowance.
    if !(min > 1e-12) {
        return Err(ExtendError::NotAdmissible { node, margin: min });
    }
    Ok(margin)
}

// ---------------------------------------------------------------------------
// Short extension and defect density

/// `u = f + (t − t²) μ` with its exact Jacobian. Fails if the defect is not positive definite
/// on some row `t > 0`.
pub fn short_extension(sd: &SigmaData, collar: &CollarChart) -> Result<MapJet, ExtendError> {
    check_admissible(sd)?;
    if sd.nodes() != collar.nx() {
        return Err(ExtendError::BadSigma { what: "Σ-node count".into(), node: 0, value: sd.nodes() as f64 });
    }
    let grid = collar.grid;
    let m = sd.m;
    let mut val = Field::zeros(grid, FieldKind::Map(m));
    let mut jac = Field::zeros(grid, FieldKind::Gradient(m));
    for idx in 0..grid.len() {
        let (i, _) = grid.ij(idx);
        let t = grid.coord_of(idx)[1];
        let s = t - t * t;
        let (f, fx, mu, mux) = (sd.f_at(i), sd.slice(&sd.f_x, i), sd.mu_at(i), sd.slice(&sd.mu_x, i));
        let v = val.at_mut(idx);
        for c in 0..m {
            v[c] = f[c] + s * mu[c];
        }
        let j = jac.at_mut(idx);
        for c in 0..m {
            j[c] = fx[c] + s * mux[c];
            j[m + c] = (1.0 - 2.0 * t) * mu[c];
        }
    }
    let u = MapJet::new(val, jac)?;
    let d = collar.metric().sub(&u.metric())?;
    for idx in 0..grid.len() {
        let p = grid.coord_of(idx);
        if p[1] > 0.0 {
            let (lo, _) = d.sym(idx).eigenvalues();
            if !(lo > 0.0) {
                return Err(ExtendError::ShortnessLost { x: p[0], t: p[1], eigen: lo });
            }
        }
    }
    Ok(u)
}

/// `min_{t>0} λ_min(g − u♯e)/t`, the measured constant in `defect ≥ C⁻¹t·Id`.
pub fn shortness_floor(u: &MapJet, collar: &CollarChart) -> Result<f64, ExtendError> {
    let d = collar.metric().sub(&u.metric())?;
    let grid = collar.grid;
    Ok((0..grid.len())
        .filter_map(|idx| {
            let t = grid.coord_of(idx)[1];
            (t > 0.0).then(|| d.sym(idx).eigenvalues().0 / t)
        })
        .fold(f64::INFINITY, f64::min))
}

/// `ρ² = tr(g − ∇uᵀ∇u)/n`.
pub fn defect_density(u: &MapJet, g: &Field) -> Result<Field, ExtendError> {
    g.expect_kind(FieldKind::Sym2)?;
    let d = g.sub(&u.metric())?;
    let mut rho = Field::zeros(*g.grid(), FieldKind::Scalar);
    for idx in 0..g.grid().len() {
        let tr = d.sym(idx).trace();
        let scale = g.sym(idx).trace();
        if tr < -1e-12 * scale {
            return Err(ExtendError::NegativeTrace { node: idx, value: tr });
        }
        rho.data_mut()[idx] = (tr.max(0.0) / N as f64).sqrt();
    }
    Ok(rho)
}

// ---------------------------------------------------------------------------
// Dyadic layers

/// Layer cutoff `χ_q(t)` for `d_q = 2^{−q}ε`, with `s = log₂(ε/t)`: `χ₁ = 1` for `s ≤ 1`,
/// `χ_q` rises on `[q−1, q]` and falls on `[q, q+1]`. Supports are `[d_q/2, 2d_q]` (`t ≥ d_2` for
/// `q = 1`), layers of equal parity have disjoint interiors, and `Σ_{q≤Q} χ_q² = 1` on `t ≥ d_Q`.
pub fn layer_cutoff(q: usize, t: f64, eps: f64) -> f64 {
    if t <= 0.0 || q == 0 {
        return 0.0;
    }
    let a = (eps / t).log2() - (q as f64 - 1.0);
    if a >= 2.0 || (a <= 0.0 && q > 1) {
        0.0
    } else if a <= 1.0 {
        if q == 1 {
            1.0
        } else {
            (FRAC_PI_2 * smoothstep(0.0, 1.0, a)).sin()
        }
    } else {
        (FRAC_PI_2 * smoothstep(0.0, 1.0, a - 1.0)).cos()
    }
}

/// `Σ_{q ≤ layers} χ_q(t)²`.
pub fn layer_coverage(layers: usize, t: f64, eps: f64) -> f64 {
    (1..=layers).map(|q| layer_cutoff(q, t, eps).powi(2)).sum()
}

fn default_alpha() -> f64 {
    0.1
}
fn default_k() -> f64 {
    8.0
}
fn default_gamma() -> f64 {
    3.0
}
fn default_tau() -> f64 {
    1.25
}
fn default_sigma0() -> f64 {
    100.0
}
fn default_one() -> f64 {
    1.0
}
fn default_theta0() -> f64 {
    0.45
}
fn default_h_sigma0() -> f64 {
    0.1
}
fn default_slack() -> f64 {
    0.05
}

/// Knobs of the layered margin split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionParams {
    /// Margin kept for the iteration: the output defect is `αρ²(g+h)`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Layer `q` runs a stage with `λ_q = K/d_q`, i.e. frequency `(K/d_q)^τ`.
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Stage exponent: adjacent layers differ in frequency by `2^τ`.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Newton budget passed to each layer stage.
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_one")]
    pub c0: f64,
    /// Number of layers; the largest resolved count when absent.
    #[serde(default)]
    pub layers: Option<usize>,
    #[serde(default = "default_theta0")]
    pub theta0: f64,
    /// `σ₀` in the reported bound `‖h‖₀ < σ₀/4^{n+1}`.
    #[serde(default = "default_h_sigma0")]
    pub h_sigma0: f64,
    #[serde(default = "default_slack")]
    pub slack: f64,
}

impl Default for ExtensionParams {
    fn default() -> Self {
        ExtensionParams {
            alpha: default_alpha(),
            k: default_k(),
            gamma: default_gamma(),
            tau: default_tau(),
            sigma0: default_sigma0(),
            c0: default_one(),
            layers: None,
            theta0: default_theta0(),
            h_sigma0: default_h_sigma0(),
            slack: default_slack(),
        }
    }
}

impl ExtensionParams {
    fn validate(&self) -> Result<(), ExtendError> {
        let bad = |name: &str, value: f64| Err(ExtendError::BadParams { name: name.into(), value });
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha in (0,1)", self.alpha);
        }
        if !(self.k > 0.0) {
            return bad("K > 0", self.k);
        }
        if !(self.tau > 1.0) {
            return bad("tau > 1", self.tau);
        }
        if !(self.theta0 > 0.0 && self.theta0 < 0.5) {
            return bad("theta0 in (0,1/2)", self.theta0);
        }
        if self.layers == Some(0) {
            return bad("layers >= 1", 0.0);
        }
        Ok(())
    }

    /// Why layer `q` is not resolved on `grid`, if it is not.
    fn unresolved(&self, grid: &Grid, eps: f64, q: usize) -> Option<String> {
        let h = grid.h();
        let d = eps * 0.5f64.powi(q as i32);
        let freq = (self.k / d).powf(self.tau);
        if self.k / d <= 1.0 {
            Some(format!("lambda_q = K/d_q = {:.3e} <= 1", self.k / d))
        } else if d < 8.0 * h {
            Some(format!("d_q = {d:.3e} < 8h = {:.3e}", 8.0 * h))
        } else if freq * h > NYQUIST_LIMIT {
            Some(format!("frequency (K/d_q)^tau = {freq:.3e} exceeds {:.3e}", NYQUIST_LIMIT / h))
        } else {
            None
        }
    }

    /// Number of layers used on `grid`.
    pub fn resolved_layers(&self, grid: &Grid, eps: f64) -> Result<usize, ExtendError> {
        match self.layers {
            Some(q) => {
                for l in 1..=q {
                    if let Some(reason) = self.unresolved(grid, eps, l) {
                        return Err(ExtendError::LayerUnresolved { layer: l, reason });
                    }
                }
                Ok(q)
            }
            None => {
                let mut q = 0;
                while self.unresolved(grid, eps, q + 1).is_none() && q < 30 {
                    q += 1;
                }
                if q == 0 {
                    let reason = self.unresolved(grid, eps, 1).unwrap_or_default();
                    return Err(ExtendError::LayerUnresolved { layer: 1, reason });
                }
                Ok(q)
            }
        }
    }
}

/// Layers `1..=q` in processing order: odd, then even.
pub fn layer_order(q: usize) -> Vec<usize> {
    (1..=q).filter(|l| l % 2 == 1).chain((1..=q).filter(|l| l % 2 == 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub d: f64,
    pub frequency: f64,
    pub lambda: f64,
    pub delta: f64,
    pub u_step_c0: f64,
    pub u_step_c1: f64,
    /// `[∇(v − u)]_{θ₀}`.
    pub u_step_c1_theta: f64,
    pub stage_error_c0: f64,
    /// `‖E‖₀ / sup ρ_q²`.
    pub relative_error: f64,
    pub certificate: StageCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedExtensionReport {
    pub alpha: f64,
    pub margin_min: f64,
    pub margin_max: f64,
    pub shortness_floor: f64,
    pub rho_sup: f64,
    /// `max ‖h_T‖_F` for the split target `ρ_T²(g + h_T)`: decomposition radius consumed.
    pub decomposition_radius: f64,
    /// Processing order (odd layers first).
    pub order: Vec<usize>,
    pub layers: Vec<LayerReport>,
    /// Rows with `t ≥` this value are fully covered by the layers.
    pub covered_from: f64,
    /// Rows with `t <` this value are untouched.
    pub untouched_below: f64,
    pub initial_defect: f64,
    pub defect_after: f64,
    /// `max |g − v♯e − αρ²g|` on fully covered rows.
    pub covered_error: f64,
    pub h_sup_covered: f64,
    pub h_bound: f64,
    /// Nodes where `g − v♯e ≥ (α/2)ρ²g` fails.
    pub margin_violations: usize,
    pub identity_residual: f64,
    pub boundary_value_error: f64,
    pub boundary_normal_error: f64,
    pub c1_fit: Option<LogLogFit>,
    pub c1_theta_fit: Option<LogLogFit>,
    /// `(1 − 2θ₀)/2`, the expected slope of `[∇(v−u)]_{θ₀}` against `d_q`.
    pub c1_theta_expected: f64,
}

/// `sup |u − f|` and `sup |du(ν) − μ|` along `Σ`.
pub fn boundary_errors(u: &MapJet, sd: &SigmaData) -> (f64, f64) {
    let (vals, dnu) = boundary_trace(u);
    let m = sd.m;
    let mut ev: f64 = 0.0;
    let mut en: f64 = 0.0;
    for i in 0..sd.nodes() {
        for c in 0..m {
            ev = ev.max((vals[i * m + c] - sd.f[i * m + c]).abs());
            en = en.max((dnu[i * m + c] - sd.mu[i * m + c]).abs());
        }
    }
    (ev, en)
}

/// Short extension, then one stage per dyadic layer (odd layers, then even) adding
/// `χ_q²(g − u♯e − αρ²g)`. The result satisfies `g − v♯e = ρ_out²(g+h)` exactly, with
/// `ρ_out = √α ρ` and `h = −E/(αρ²)` on fully covered rows.
pub fn adapted_extension(
    sd: &SigmaData,
    collar: &CollarChart,
    params: &ExtensionParams,
) -> Result<(AdaptedTriple, AdaptedExtensionReport), ExtendError> {
    params.validate()?;
    let margin = check_admissible(sd)?;
    let u0 = short_extension(sd, collar)?;
    let grid = collar.grid;
    let eps = collar.depth();
    let g = collar.metric();
    let rho = defect_density(&u0, &g)?;
    let rho_sup = rho.max_value();
    if params.alpha * rho_sup * rho_sup > 1.0 / 16.0 {
        return Err(ExtendError::BadParams { name: "alpha rho^2 <= 1/16".into(), value: params.alpha * rho_sup * rho_sup });
    }
    let q_layers = params.resolved_layers(&grid, eps)?;
    let d0 = g.sub(&u0.metric())?;

    // Target T = D − αρ²g = ρ_T²(g + h_T) with ρ_T² = (1 − α)ρ².
    let dirs = standard_directions(N).expect("n = 2 directions");
    let mut rho_t = Field::zeros(grid, FieldKind::Scalar);
    let mut h_t = Field::zeros(grid, FieldKind::Sym2);
    for idx in 0..grid.len() {
        let r2 = rho.s(idx).powi(2);
        if r2 <= 0.0 {
            continue;
        }
        let gg = g.sym(idx);
        let t = d0.sym(idx).sub(gg.scale(params.alpha * r2));
        let rt2 = (1.0 - params.alpha) * r2;
        rho_t.data_mut()[idx] = rt2.sqrt();
        let p = t.scale(1.0 / rt2);
        h_t.set_sym(idx, p.sub(gg));
        decompose_spd(p, &dirs).map_err(|source| ExtendError::Decomposition { node: idx, source })?;
    }
    let decomposition_radius = radius_consumed(&h_t, Sym2::ZERO);

    let order = layer_order(q_layers);
    let ladder = crate::fields::default_ladder(&grid);
    let mut u = u0.clone();
    let mut e_total = Field::zeros(grid, FieldKind::Sym2);
    let mut layers = Vec::new();
    for &q in &order {
        let d = eps * 0.5f64.powi(q as i32);
        let lambda = params.k / d;
        let freq = lambda.powf(params.tau);
        let mut rho_q = rho_t.clone();
        for idx in 0..grid.len() {
            let t = grid.coord_of(idx)[1];
            rho_q.data_mut()[idx] *= layer_cutoff(q, t, eps);
        }
        let peak = rho_q.max_value();
        let delta = if peak > 0.0 { (peak * peak * (1.0 + params.slack)).min(0.99) } else { d.min(0.99) };
        let mut sp = StageParams::new(delta, lambda, params.tau);
        sp.gamma = params.gamma;
        sp.sigma0 = params.sigma0;
        sp.c0 = params.c0;
        sp.slack = params.slack;
        sp.strict = false;
        let res = perform_stage_with_seeds(&u, &rho_q, &h_t, &g, &sp, &Seeds::default())
            .map_err(|source| ExtendError::Stage { layer: q, source })?;
        let diff = res.v.sub(&u)?;
        let relative_error = if peak > 0.0 { res.e.sup_norm() / (peak * peak) } else { 0.0 };
        layers.push(LayerReport {
            layer: q,
            d,
            frequency: freq,
            lambda,
            delta,
            u_step_c0: diff.value.sup_norm(),
            u_step_c1: diff.jacobian.sup_norm(),
            u_step_c1_theta: holder_seminorm(&diff.jacobian, params.theta0, &ladder)?,
            stage_error_c0: res.e.sup_norm(),
            relative_error,
            certificate: res.certificate.clone(),
        });
        e_total = e_total.add(&res.e)?;
        u = res.v;
    }
    layers.sort_by_key(|l| l.layer);

    // ρ_out² = (α + (1 − c)(1 − α))ρ² with c the layer coverage; h from the exact identity.
    let dv = g.sub(&u.metric())?;
    let mut rho_out = Field::zeros(grid, FieldKind::Scalar);
    let mut h = Field::zeros(grid, FieldKind::Sym2);
    let mut margin_violations = 0;
    let mut covered_error: f64 = 0.0;
    let mut h_sup_covered: f64 = 0.0;
    for idx in 0..grid.len() {
        let t = grid.coord_of(idx)[1];
        let c = layer_coverage(q_layers, t, eps);
        let r2 = rho.s(idx).powi(2);
        let gg = g.sym(idx);
        let dd = dv.sym(idx);
        if dd.sub(gg.scale(0.5 * params.alpha * r2)).eigenvalues().0 < -1e-13 {
            margin_violations += 1;
        }
        if r2 <= 0.0 {
            continue;
        }
        let ro2 = (params.alpha + (1.0 - c).max(0.0) * (1.0 - params.alpha)) * r2;
        rho_out.data_mut()[idx] = ro2.sqrt();
        let hh = dd.scale(1.0 / ro2).sub(gg);
        h.set_sym(idx, hh);
        if c >= 1.0 - 1e-12 {
            covered_error = covered_error.max(dd.sub(gg.scale(params.alpha * r2)).frob());
            h_sup_covered = h_sup_covered.max(hh.frob());
        }
    }
    let (bv, bn) = boundary_errors(&u, sd);
    let ds: Vec<f64> = layers.iter().map(|l| l.d).collect();
    let c1: Vec<f64> = layers.iter().map(|l| l.u_step_c1).collect();
    let c1t: Vec<f64> = layers.iter().map(|l| l.u_step_c1_theta).collect();
    let triple = AdaptedTriple::new(u, rho_out, h, g)?;
    let margin_min = margin.iter().cloned().fold(f64::INFINITY, f64::min);
    let margin_max = margin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let report = AdaptedExtensionReport {
        alpha: params.alpha,
        margin_min,
        margin_max,
        shortness_floor: shortness_floor(&u0, collar)?,
        rho_sup,
        decomposition_radius,
        order,
        covered_from: eps * 0.5f64.powi(q_layers as i32),
        untouched_below: eps * 0.5f64.powi(q_layers as i32 + 1),
        initial_defect: d0.sup_norm(),
        defect_after: triple.metric_defect().sup_norm(),
        covered_error,
        h_sup_covered,
        h_bound: params.h_sigma0 / 4f64.powi(N as i32 + 1),
        margin_violations,
        identity_residual: triple.identity_residual().sup_norm(),
        boundary_value_error: bv,
        boundary_normal_error: bn,
        c1_fit: fit_loglog(&ds, &c1).ok(),
        c1_theta_fit: fit_loglog(&ds, &c1t).ok(),
        c1_theta_expected: 0.5 * (1.0 - 2.0 * params.theta0),
        layers,
    };
    Ok((triple, report))
}

// ---------------------------------------------------------------------------
// Isometric extension

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub adapted: AdaptedExtensionReport,
    pub convergence: ConvergenceReport,
    /// Gap of the short extension.
    pub gap_short: GapReport,
    /// Gap of the final map.
    pub gap_final: GapReport,
    /// `max |gap_final − margin|`.
    pub gap_vs_margin: f64,
    /// `max |gap_final − gap_short|`.
    pub gap_drift: f64,
    pub boundary_value_error: f64,
    pub boundary_normal_error: f64,
    pub h: f64,
    pub final_defect: f64,
    /// Defect sup on rows `t ≥ covered_from`.
    pub final_defect_covered: f64,
    pub theta_target: f64,
}

/// Adapted extension followed by the iteration restricted to the fully covered band
/// `t ≥ d_Q` (schedule started at the band's peak `ρ²`), so that the Σ rows are never written.
pub fn isometric_extension(
    sd: &SigmaData,
    collar: &CollarChart,
    params: &ExtensionParams,
    iter_cfg: &IterConfig,
    q_max: usize,
) -> Result<(MapJet, ExtensionReport), ExtendError> {
    let u_short = short_extension(sd, collar)?;
    let gap_short = connection_gap(&u_short, sd);
    let (triple, adapted) = adapted_extension(sd, collar, params)?;
    let mut cfg = iter_cfg.clone();
    let grid = collar.grid;
    let band_lo = adapted.covered_from;
    let band_peak = (0..grid.len()).filter(|&i| grid.coord_of(i)[1] >= band_lo).map(|i| triple.rho.s(i)).fold(0.0, f64::max);
    cfg.schedule.delta1 = band_peak.powi(2).min(0.99);
    cfg.schedule.q_max = cfg.schedule.q_max.max(q_max);
    cfg.target = TargetSet::Band { axis: 1, lo: band_lo, hi: collar.depth() };
    let schedule = build_schedule(&cfg.schedule)?;
    let (out, convergence) = iterate_to_isometry(&triple, &schedule, &cfg, q_max, &Seeds::default());
    let gap_final = connection_gap(&out.u, sd);
    let margin = sd.margin();
    let gap_vs_margin = gap_final.gap.iter().zip(&margin).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let gap_drift = gap_final.gap.iter().zip(&gap_short.gap).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (bv, bn) = boundary_errors(&out.u, sd);
    let defect = out.metric_defect();
    let final_defect_covered = (0..grid.len())
        .filter(|&i| grid.coord_of(i)[1] >= adapted.covered_from)
        .map(|i| defect.sym(i).frob())
        .fold(0.0, f64::max);
    let report = ExtensionReport {
        theta_target: params.theta0 / cfg.schedule.b.powi(2 * N as i32),
        final_defect: convergence.final_defect,
        final_defect_covered,
        adapted,
        convergence,
        gap_short,
        gap_final,
        gap_vs_margin,
        gap_drift,
        boundary_value_error: bv,
        boundary_normal_error: bn,
        h: grid.h(),
    };
    Ok((out.u, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::M;
    use crate::verify::fit_loglog;

    fn circle(nx: usize, nt: usize, eps: f64) -> (CollarChart, SigmaData) {
        let collar = CollarChart::flat(nx, nt, eps).unwrap();
        let sd = SigmaData::circle(&collar, M, CircleNormal::Inward).unwrap();
        (collar, sd)
    }

    /// `u = f + t e₃` on the flat collar, or `(1 − t sin β) f + t cos β e₃` on the cone.
    fn product(collar: &CollarChart, beta: f64, scale: f64) -> MapJet {
        let (sb, cb) = beta.sin_cos();
        MapJet::from_fn(
            *collar.grid(),
            M,
            |p, out| {
                let (s, c) = p[0].sin_cos();
                out[0] = scale * (1.0 - p[1] * sb) * c;
                out[1] = scale * (1.0 - p[1] * sb) * s;
                out[2] = scale * p[1] * cb;
            },
            |p, out| {
                let (s, c) = p[0].sin_cos();
                out[0] = -scale * (1.0 - p[1] * sb) * s;
                out[1] = scale * (1.0 - p[1] * sb) * c;
                out[M] = -scale * sb * c;
                out[M + 1] = -scale * sb * s;
                out[M + 2] = scale * cb;
            },
        )
    }

    #[test]
    fn circle_margin_is_unit_curvature() {
        let (_, sd) = circle(64, 16, 0.2);
        let m = check_admissible(&sd).unwrap();
        assert!(m.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert!(sd.l.iter().all(|&l| l.abs() < 1e-12));
    }

    #[test]
    fn non_admissible_normals() {
        let cone = CollarChart::cone(64, 16, 0.2, 0.5).unwrap();
        // ⟨e₃, L̄⟩ = 0 while L = sin β > 0.
        let sd = SigmaData::circle(&cone, M, CircleNormal::Binormal).unwrap();
        assert!(matches!(check_admissible(&sd), Err(ExtendError::NotAdmissible { .. })));
        // The product extension's own normal sits exactly on the margin 0.
        let sd = SigmaData::circle(&cone, M, CircleNormal::Tilted { beta: 0.5 }).unwrap();
        match check_admissible(&sd) {
            Err(ExtendError::NotAdmissible { margin, .. }) => assert!(margin.abs() < 1e-12),
            other => panic!("expected NotAdmissible, got {other:?}"),
        }
    }

    #[test]
    fn sampled_sigma_matches_closed_form() {
        let collar = CollarChart::flat(128, 16, 0.2).unwrap();
        let exact = SigmaData::circle(&collar, M, CircleNormal::Inward).unwrap();
        let sd = SigmaData::from_samples(&collar, M, exact.f.clone(), exact.mu.clone()).unwrap();
        let err = sd.f_xx.iter().zip(&exact.f_xx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
        let mut bad = exact.mu.clone();
        bad[0] *= 2.0;
        assert!(matches!(SigmaData::from_samples(&collar, M, exact.f.clone(), bad), Err(ExtendError::BadSigma { .. })));
    }

    #[test]
    fn short_extension_defect_expansion() {
        let (collar, sd) = circle(64, 65, 0.1);
        let u = short_extension(&sd, &collar).unwrap();
        let grid = *collar.grid();
        let d = collar.metric().sub(&u.metric()).unwrap();
        let h = grid.h();
        let ht = grid.spacing_axis(1);
        for i in 0..grid.nodes[0] {
            let d0 = d.sym(grid.index(i, 0));
            assert!(d0.frob() <= 10.0 * h * h);
            let d1 = d.sym(grid.index(i, 1));
            let d2 = d.sym(grid.index(i, 2));
            let slope = |a: f64, b: f64, c: f64| (-3.0 * a + 4.0 * b - c) / (2.0 * ht);
            assert!((slope(d0.yy, d1.yy, d2.yy) - 4.0).abs() < 1e-6);
            assert!((slope(d0.xx, d1.xx, d2.xx) - 2.0 * sd.margin()[i]).abs() < 10.0 * ht * ht);
        }
        assert!(shortness_floor(&u, &collar).unwrap() > 1.0);
        let (deep, sd) = circle(64, 64, 1.2);
        assert!(matches!(short_extension(&sd, &deep), Err(ExtendError::ShortnessLost { .. })));
    }

    #[test]
    fn defect_density_cases() {
        let collar = CollarChart::flat(64, 32, 0.2).unwrap();
        let g = collar.metric();
        let iso = product(&collar, 0.0, 1.0);
        assert!(defect_density(&iso, &g).unwrap().sup_norm() < 1e-7);
        let s = 0.3;
        let shrunk = product(&collar, 0.0, 1.0 - s);
        let rho = defect_density(&shrunk, &g).unwrap();
        let want = (1.0 - (1.0 - s) * (1.0f64 - s)).sqrt();
        assert!(rho.data().iter().all(|&r| (r - want).abs() < 1e-12));
        assert!(matches!(defect_density(&product(&collar, 0.0, 1.5), &g), Err(ExtendError::NegativeTrace { .. })));

        let (collar, sd) = circle(64, 128, 0.1);
        let u = short_extension(&sd, &collar).unwrap();
        let rho = defect_density(&u, &collar.metric()).unwrap();
        let grid = *collar.grid();
        let (ts, rs): (Vec<f64>, Vec<f64>) = (1..grid.nodes[1]).map(|j| (grid.coord(0, j)[1], rho.s(grid.index(0, j)))).unzip();
        let fit = fit_loglog(&ts, &rs).unwrap();
        assert!((fit.slope - 0.5).abs() < 0.1, "{}", fit.slope);
    }

    #[test]
    fn layer_partition() {
        let eps = 1.0;
        for q in 1..=4 {
            for k in 0..400 {
                let t = 1e-3 + k as f64 * 2.5e-3;
                if t >= eps * 0.5f64.powi(q as i32) {
                    assert!((layer_coverage(q, t, eps) - 1.0).abs() < 1e-12, "q {q} t {t}");
                }
                let c = layer_cutoff(q, t, eps);
                let d = eps * 0.5f64.powi(q as i32);
                if c > 0.0 {
                    assert!(t > 0.5 * d && (q == 1 || t < 2.0 * d));
                }
                assert!(layer_cutoff(q, t, eps) * layer_cutoff(q + 2, t, eps) == 0.0);
            }
        }
        assert_eq!(layer_order(4), vec![1, 3, 2, 4]);
        assert_eq!(layer_order(1), vec![1]);
    }

    #[test]
    fn layer_resolution() {
        let grid = *CollarChart::flat(512, 32, 0.2).unwrap().grid();
        let p = ExtensionParams { k: 1.6, ..ExtensionParams::default() };
        assert_eq!(p.resolved_layers(&grid, 0.2).unwrap(), 1);
        let p = ExtensionParams { k: 8.0, ..ExtensionParams::default() };
        assert!(matches!(p.resolved_layers(&grid, 0.2), Err(ExtendError::LayerUnresolved { layer: 1, .. })));
        let p = ExtensionParams { k: 1.6, layers: Some(3), ..ExtensionParams::default() };
        assert!(matches!(p.resolved_layers(&grid, 0.2), Err(ExtendError::LayerUnresolved { .. })));
    }

    #[test]
    fn one_layer_split_is_exact_and_local() {
        let (collar, sd) = circle(512, 32, 0.2);
        let p = ExtensionParams { k: 1.6, ..ExtensionParams::default() };
        let (triple, rep) = adapted_extension(&sd, &collar, &p).unwrap();
        assert_eq!(rep.layers.len(), 1);
        assert!(rep.identity_residual < 1e-12);
        assert!(triple.identity_residual().sup_norm() < 1e-12);
        assert!(rep.boundary_value_error == 0.0);
        assert!(rep.boundary_normal_error < 1e-10);
        let u0 = short_extension(&sd, &collar).unwrap();
        let grid = *collar.grid();
        for idx in 0..grid.len() {
            if grid.coord_of(idx)[1] < rep.untouched_below {
                assert_eq!(triple.u.value.at(idx), u0.value.at(idx));
                assert_eq!(triple.u.jacobian.at(idx), u0.jacobian.at(idx));
            }
        }
        assert!(rep.defect_after < rep.initial_defect);
        assert!(rep.covered_error < rep.alpha * rep.rho_sup.powi(2));
        // ρ_out = √α ρ on covered rows.
        let rho = defect_density(&u0, &collar.metric()).unwrap();
        for idx in 0..grid.len() {
            if grid.coord_of(idx)[1] >= rep.covered_from {
                assert!((triple.rho.s(idx) - p.alpha.sqrt() * rho.s(idx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flexibility_gap_is_pinned() {
        let (collar, sd) = circle(512, 32, 0.2);
        let p = ExtensionParams { k: 1.6, ..ExtensionParams::default() };
        let (triple, _) = adapted_extension(&sd, &collar, &p).unwrap();
        let gap = connection_gap(&triple.u, &sd);
        let h = collar.grid().h();
        assert!(gap.min > 0.0);
        for (g, m) in gap.gap.iter().zip(sd.margin()) {
            assert!((g - m).abs() <= 10.0 * h);
        }
    }
}
