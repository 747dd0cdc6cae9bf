//! One corrugation stage: given a short immersion `u`, an amplitude `ρ`, a
//! target `G` and a correction `H`, produce `v` with
//! `∇vᵀ∇v = ∇uᵀ∇u + ρ²(G+H) + E`.

use crate::decompose::{perturbed_decompose, standard_directions, DecomposeError, DirectionSet, NewtonOptions, Perturbation};
use crate::fields::{ck_norm, distance_to_set, dot, gradient, Field, FieldError, FieldKind, Grid, MapJet, Sym2, N, NSTAR};
use crate::frames::{normal_frame_from_jacobian, FrameError, NormalFrame, Seeds};
use crate::mollify::{mollify, mollify_jet, MollifyError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::TAU;
use thiserror::Error;

/// Oscillation resolution limit: `λ^τ h ≤ 2π/16`.
pub const NYQUIST_LIMIT: f64 = TAU / 16.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("oscillation frequency {lambda_tau:.3e} unresolved on spacing {h:.3e} (λ^τ h must be ≤ {limit:.4})")]
    NyquistViolation { lambda_tau: f64, h: f64, limit: f64 },
    #[error("precondition '{name}' failed: measured {measured:.4e}, bound {bound:.4e}")]
    Precondition { name: String, measured: f64, bound: f64 },
    #[error("ε = {eps:.3e} not below δ = {delta:.3e}; raise λ or lower C0")]
    EpsilonTooLarge { eps: f64, delta: f64 },
    #[error("decomposition failed at node {node} (|H| {h_part:.3}, Σ|ψΛ| {lambda_part:.3}, Σ|Θ| {theta_part:.3}): {source}; raise λ or C0")]
    Decompose { node: usize, h_part: f64, lambda_part: f64, theta_part: f64, source: DecomposeError },
    #[error("non-finite values in stage output")]
    NonFinite,
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Mollify(#[from] MollifyError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn default_c0() -> f64 {
    4.0
}
fn default_lambda0() -> f64 {
    32.0
}
fn default_slack() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageParams {
    pub delta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    pub sigma0: f64,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    /// Relative tolerance on the analytic hypotheses.
    #[serde(default = "default_slack")]
    pub slack: f64,
    /// Fail on the first violated hypothesis instead of recording it.
    #[serde(default = "default_true")]
    pub strict: bool,
}

impl StageParams {
    pub fn new(delta: f64, lambda: f64, tau: f64) -> Self {
        StageParams { delta, lambda, tau, gamma: 2.0, sigma0: 0.1, c0: 4.0, lambda0: 32.0, slack: 0.05, strict: true }
    }

    pub fn frequency(&self) -> f64 {
        self.lambda.powf(self.tau)
    }

    /// Mollification scale of `u`.
    pub fn ell_u(&self) -> f64 {
        self.lambda.powf(-self.tau)
    }

    /// Mollification scale of the amplitudes `b_k`.
    pub fn ell_b(&self) -> f64 {
        self.lambda.powf(1.0 - 2.0 * self.tau)
    }

    /// `ε^{1/2} = C₀ δ^{1/2} λ^{1−τ}`.
    pub fn eps_sqrt(&self) -> f64 {
        self.c0 * self.delta.sqrt() * self.lambda.powf(1.0 - self.tau)
    }

    fn validate(&self) -> Result<(), StageError> {
        let bad = |name: &str, measured: f64, bound: f64| {
            Err(StageError::Precondition { name: name.into(), measured, bound })
        };
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("0 < delta < 1", self.delta, 1.0);
        }
        if !(self.lambda > 1.0) {
            return bad("lambda > 1", self.lambda, 1.0);
        }
        if !(self.tau > 1.0) {
            return bad("tau > 1", self.tau, 1.0);
        }
        if !(self.gamma >= 1.0) {
            return bad("gamma >= 1", self.gamma, 1.0);
        }
        if !(self.sigma0 > 0.0) {
            return bad("sigma0 > 0", self.sigma0, 0.0);
        }
        if !(self.c0 >= 1.0) {
            return bad("C0 >= 1", self.c0, 1.0);
        }
        Ok(())
    }
}

/// `ψ(ρ)`: `1/ρ` above `2s`, `1/s` below `s`, a C¹ cubic blend of `1/s` and `1/ρ` between (`s = ε^{1/2}`).
pub fn psi(rho: f64, s: f64) -> f64 {
    if rho >= 2.0 * s {
        1.0 / rho
    } else if rho <= s {
        1.0 / s
    } else {
        let t = (rho - s) / s;
        let w = t * t * (3.0 - 2.0 * t);
        (1.0 - w) / s + w / rho
    }
}

/// `ψ(ρ)` nodewise. Rejects `ε ≥ δ`.
pub fn degenerate_cutoff(rho: &Field, delta: f64, lambda: f64, tau: f64, c0: f64) -> Result<Field, StageError> {
    rho.expect_kind(FieldKind::Scalar)?;
    let s = c0 * delta.sqrt() * lambda.powf(1.0 - tau);
    if !(s * s < delta) {
        return Err(StageError::EpsilonTooLarge { eps: s * s, delta });
    }
    Ok(rho.map_values(|r| psi(r.max(0.0), s)))
}

/// Oscillatory building blocks `A_k`, `B_k`, `D_k` (kinds `Gradient(m)`, `Gradient(m)`, `Map(m)`).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrugationFields {
    pub dirs: DirectionSet,
    /// Per-direction frequency `|w_k|`; equal to `λ^τ` on non-periodic charts.
    pub frequencies: [f64; NSTAR],
    pub a: Vec<Field>,
    pub b: Vec<Field>,
    pub d: Vec<Field>,
}

fn check_nyquist(grid: &Grid, frequency: f64) -> Result<(), StageError> {
    let h = grid.h();
    if frequency * h > NYQUIST_LIMIT {
        return Err(StageError::NyquistViolation { lambda_tau: frequency, h, limit: NYQUIST_LIMIT });
    }
    Ok(())
}

/// Wave vectors `freq·ν_k` rounded to the dual lattice along periodic axes, so every phase
/// `w_k·x` is periodic. Returns the unit directions of the rounded vectors and their lengths.
pub fn lattice_directions(grid: &Grid, freq: f64, dirs: &DirectionSet) -> Result<(DirectionSet, [f64; NSTAR]), StageError> {
    let mut out = [[0.0; 2]; NSTAR];
    let mut freqs = [0.0; NSTAR];
    for k in 0..NSTAR {
        let mut w = [freq * dirs.dirs[k][0], freq * dirs.dirs[k][1]];
        for (ax, wa) in w.iter_mut().enumerate() {
            if grid.periodic[ax] {
                let q = std::f64::consts::TAU / grid.extent[ax];
                *wa = (*wa / q).round() * q;
            }
        }
        let len = w[0].hypot(w[1]);
        if len == 0.0 {
            return Err(StageError::Precondition { name: "lattice wave vector nonzero".into(), measured: 0.0, bound: freq });
        }
        freqs[k] = len;
        out[k] = [w[0] / len, w[1] / len];
    }
    let set = DirectionSet::from_directions(out);
    if set.det().abs() < 1e-3 {
        return Err(StageError::Precondition { name: "lattice directions independent".into(), measured: set.det().abs(), bound: 1e-3 });
    }
    Ok((set, freqs))
}

/// Build `A_k`, `B_k`, `D_k` from a frame of `2n*` normals (`ζ_k`, `η_k` = normals `2k`, `2k+1`).
pub fn corrugation_fields(frame: &NormalFrame, freqs: [f64; NSTAR], dirs: &DirectionSet) -> Result<CorrugationFields, StageError> {
    if frame.count() != 2 * NSTAR {
        return Err(FrameError::InvalidCount { count: frame.count(), codim: 2 * NSTAR }.into());
    }
    let grid = *frame.field().grid();
    check_nyquist(&grid, freqs.iter().cloned().fold(0.0, f64::max))?;
    let m = frame.dim();
    let dframe = frame.gradient();
    let stride = frame.count() * m;
    let mut a = vec![Field::zeros(grid, FieldKind::Gradient(m)); NSTAR];
    let mut b = vec![Field::zeros(grid, FieldKind::Gradient(m)); NSTAR];
    let mut d = vec![Field::zeros(grid, FieldKind::Map(m)); NSTAR];
    for idx in 0..grid.len() {
        let x = grid.coord_of(idx);
        let df = dframe.at(idx);
        for k in 0..NSTAR {
            let nu = dirs.dirs[k];
            let (sn, cs) = (freqs[k] * (nu[0] * x[0] + nu[1] * x[1])).sin_cos();
            let zeta = frame.normal(idx, 2 * k);
            let eta = frame.normal(idx, 2 * k + 1);
            let av = a[k].at_mut(idx);
            for ax in 0..N {
                for c in 0..m {
                    av[ax * m + c] = (cs * zeta[c] - sn * eta[c]) * nu[ax];
                }
            }
            let bv = b[k].at_mut(idx);
            for ax in 0..N {
                let dz = &df[ax * stride + 2 * k * m..ax * stride + (2 * k + 1) * m];
                let de = &df[ax * stride + (2 * k + 1) * m..ax * stride + (2 * k + 2) * m];
                for c in 0..m {
                    bv[ax * m + c] = sn * dz[c] + cs * de[c];
                }
            }
            let dv = d[k].at_mut(idx);
            for c in 0..m {
                dv[c] = sn * zeta[c] + cs * eta[c];
            }
        }
    }
    Ok(CorrugationFields { dirs: dirs.clone(), frequencies: freqs, a, b, d })
}

/// `sym(XᵀY)` for two `m×2` matrices stored column-major (`[axis][c]`).
#[inline]
fn sym_prod(x: &[f64], y: &[f64], m: usize) -> Sym2 {
    let (x0, x1) = x.split_at(m);
    let (y0, y1) = y.split_at(m);
    Sym2::new(dot(x0, y0), 0.5 * (dot(x0, y1) + dot(x1, y0)), dot(x1, y1))
}

/// `sym(p ⊗ g)` for `p, g ∈ ℝ²`.
#[inline]
fn sym_vec(p: [f64; 2], g: [f64; 2]) -> Sym2 {
    Sym2::new(p[0] * g[0], 0.5 * (p[0] * g[1] + p[1] * g[0]), p[1] * g[1])
}

/// One hypothesis of the stage, checked on the discrete data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionCheck {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageNorms {
    pub v_minus_u_c0: f64,
    pub v_minus_u_c1: f64,
    pub v_c2: f64,
    pub e_c0: f64,
    pub e_c1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCertificate {
    pub input_hash: String,
    pub params: StageParams,
    pub preconditions: Vec<PreconditionCheck>,
    pub eps_sqrt: f64,
    pub b_mollified: bool,
    pub measured: StageNorms,
    /// Bound shapes `δ^{1/2}λ^{−τ}`, `δ^{1/2}`, `δ^{1/2}λ^τ`, `δλ^{2−2τ}`, `δλ` with unit constant.
    pub bounds: StageNorms,
    /// Measured over bound shape: the fitted constants.
    pub constants: StageNorms,
    pub decomposition_residual: f64,
    pub split_residual: f64,
    pub newton_max_steps: usize,
    pub frame_orthonormality: f64,
    pub changed_nodes: usize,
    pub support_reach: f64,
    pub support_allowed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub v: MapJet,
    /// `E = ∇vᵀ∇v − ∇uᵀ∇u − ρ²(G+H)`.
    pub e: Field,
    pub e1: Field,
    pub e2: Field,
    pub b: Vec<Field>,
    pub b_tilde: Vec<Field>,
    pub support: Vec<bool>,
    pub certificate: StageCertificate,
}

fn hash_inputs(u: &MapJet, rho: &Field, h: &Field, g: &Field, params: &StageParams) -> String {
    let mut hasher = Sha256::new();
    for f in [&u.value, &u.jacobian, rho, h, g] {
        for x in f.data() {
            hasher.update(x.to_le_bytes());
        }
    }
    hasher.update(serde_json::to_vec(params).unwrap_or_default());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn stage_preconditions(u: &MapJet, rho: &Field, h: &Field, params: &StageParams) -> Vec<PreconditionCheck> {
    let s = 1.0 + params.slack;
    let metric = u.metric();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for idx in 0..metric.grid().len() {
        let (a, b) = metric.sym(idx).eigenvalues();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let sd = params.delta.sqrt();
    let check = |name: &str, measured: f64, bound: f64| PreconditionCheck {
        name: name.into(),
        measured,
        bound,
        ok: measured <= bound,
    };
    vec![
        check("lambda >= lambda0", params.lambda0, params.lambda * s),
        check("metric lower bound 1/gamma", 1.0 / lo, params.gamma * s),
        check("metric upper bound gamma", hi, params.gamma * s),
        check("rho >= 0", -rho.min_value(), 0.0),
        check("rho <= delta^1/2", rho.max_value(), sd * s),
        check("|rho|_1 <= delta^1/2 lambda", ck_norm(rho, 1).unwrap_or(f64::INFINITY), sd * params.lambda * s),
        check("|H|_0 <= sigma0/2", h.sup_norm(), 0.5 * params.sigma0 * s),
        check("|H|_1 <= lambda", ck_norm(h, 1).unwrap_or(f64::INFINITY), params.lambda * s),
        check("eps < delta", params.eps_sqrt().powi(2), params.delta),
    ]
}

/// Run one stage. `u` carries its Jacobian; `rho` is scalar, `h` and `g` are `Sym2`.
pub fn perform_stage(u: &MapJet, rho: &Field, h: &Field, g: &Field, params: &StageParams) -> Result<StageResult, StageError> {
    perform_stage_with_seeds(u, rho, h, g, params, &Seeds::default())
}

/// As [`perform_stage`] with an explicit seed choice for the normal frame of `ũ`.
pub fn perform_stage_with_seeds(
    u: &MapJet,
    rho: &Field,
    h: &Field,
    g: &Field,
    params: &StageParams,
    seeds: &Seeds,
) -> Result<StageResult, StageError> {
    params.validate()?;
    rho.expect_kind(FieldKind::Scalar)?;
    h.expect_kind(FieldKind::Sym2)?;
    g.expect_kind(FieldKind::Sym2)?;
    let grid = *u.grid();
    for f in [rho, h, g] {
        if *f.grid() != grid {
            return Err(FieldError::GridMismatch.into());
        }
    }
    let m = u.dim();
    let (dirs, freqs) = lattice_directions(&grid, params.frequency(), &standard_directions(N).expect("n = 2 directions"))?;
    check_nyquist(&grid, freqs.iter().cloned().fold(0.0, f64::max))?;
    let preconditions = stage_preconditions(u, rho, h, params);
    if params.strict {
        if let Some(p) = preconditions.iter().find(|p| !p.ok) {
            if p.name == "eps < delta" {
                return Err(StageError::EpsilonTooLarge { eps: p.measured, delta: params.delta });
            }
            return Err(StageError::Precondition { name: p.name.clone(), measured: p.measured, bound: p.bound });
        }
    }
    let input_hash = hash_inputs(u, rho, h, g, params);
    let lt: [f64; NSTAR] = freqs.map(|f| 1.0 / f);
    let s_eps = params.eps_sqrt();
    let psi_field = degenerate_cutoff(rho, params.delta, params.lambda, params.tau, params.c0)?;

    let u_t = mollify_jet(u, params.ell_u())?;
    let frame = normal_frame_from_jacobian(&u_t.jacobian, 2 * NSTAR, params.gamma * (1.0 + params.slack), seeds)?;
    let cf = corrugation_fields(&frame, freqs, &dirs)?;

    let opts = NewtonOptions { sigma0: params.sigma0, ..NewtonOptions::default() };
    let mut lam_f = vec![Field::zeros(grid, FieldKind::Sym2); NSTAR];
    let mut theta_f = vec![Field::zeros(grid, FieldKind::Sym2); NSTAR * NSTAR];
    let mut bf = vec![Field::zeros(grid, FieldKind::Scalar); NSTAR];
    let mut decomposition_residual: f64 = 0.0;
    let mut newton_max_steps = 0;
    let mut pert = Perturbation::zero();
    for idx in 0..grid.len() {
        let ju = u.jacobian.at(idx);
        for k in 0..NSTAR {
            let l = sym_prod(ju, cf.a[k].at(idx), m).scale(2.0).add(sym_prod(ju, cf.b[k].at(idx), m).scale(2.0 * lt[k]));
            lam_f[k].set_sym(idx, l);
            for j in 0..NSTAR {
                let t = sym_prod(cf.a[k].at(idx), cf.b[j].at(idx), m)
                    .scale(2.0 * lt[j])
                    .add(sym_prod(cf.b[k].at(idx), cf.b[j].at(idx), m).scale(lt[k] * lt[j]));
                theta_f[k * NSTAR + j].set_sym(idx, t);
            }
        }
        let r = rho.s(idx);
        if r <= 0.0 {
            continue;
        }
        let ps = psi_field.s(idx);
        for k in 0..NSTAR {
            pert.lambda[k] = lam_f[k].sym(idx).scale(ps);
            for j in 0..NSTAR {
                pert.theta[k][j] = theta_f[k * NSTAR + j].sym(idx);
            }
        }
        let gg = g.sym(idx);
        let p = gg.add(h.sym(idx));
        let out = perturbed_decompose(p, gg, &pert, &dirs, None, &opts)
            .map_err(|source| StageError::Decompose {
                node: idx,
                h_part: h.sym(idx).frob(),
                lambda_part: pert.lambda.iter().map(|l| l.frob()).sum(),
                theta_part: pert.theta.iter().flatten().map(|t| t.frob()).sum(),
                source,
            })?;
        newton_max_steps = newton_max_steps.max(out.steps);
        let bk: [f64; 3] = std::array::from_fn(|k| r * out.a[k]);
        for k in 0..NSTAR {
            bf[k].data_mut()[idx] = bk[k];
        }
        // ρ²(G+H) = Σ b_k² ν⊗ν + Σ ρ²ψ a_k Λ_k + Σ b_i b_j Θ_ij
        let mut rec = Sym2::ZERO;
        for k in 0..NSTAR {
            rec.axpy(bk[k] * bk[k], dirs.outer(k));
            rec.axpy(r * ps * bk[k], lam_f[k].sym(idx));
            for j in 0..NSTAR {
                rec.axpy(bk[k] * bk[j], theta_f[k * NSTAR + j].sym(idx));
            }
        }
        decomposition_residual = decomposition_residual.max(rec.sub(p.scale(r * r)).frob());
    }

    let b_mollified = params.ell_b() >= 2.0 * grid.h();
    let bt: Vec<Field> = if b_mollified {
        bf.iter().map(|b| mollify(b, params.ell_b())).collect::<Result<_, _>>()?
    } else {
        bf.clone()
    };
    let dbt: Vec<Field> = bt.iter().map(gradient).collect();

    let mut v_val = u.value.clone();
    let mut v_jac = u.jacobian.clone();
    let mut e = Field::zeros(grid, FieldKind::Sym2);
    let mut e1 = Field::zeros(grid, FieldKind::Sym2);
    let mut e2 = Field::zeros(grid, FieldKind::Sym2);
    let mut support = vec![false; grid.len()];
    let mut split_residual: f64 = 0.0;
    for idx in 0..grid.len() {
        let btv: [f64; 3] = std::array::from_fn(|k| bt[k].s(idx));
        if btv.iter().all(|&x| x == 0.0) {
            // v = u and b = 0 here, so E = −ρ²(G+H) = 0 as ρ must then vanish or b̃ was cut off.
            let r = rho.s(idx);
            let target = g.sym(idx).add(h.sym(idx)).scale(r * r);
            e.set_sym(idx, target.scale(-1.0));
            let bv: [f64; 3] = std::array::from_fn(|k| bf[k].s(idx));
            let mut e1v = Sym2::ZERO;
            let ps = psi_field.s(idx);
            for k in 0..NSTAR {
                e1v.axpy(-bv[k] * bv[k], dirs.outer(k));
                e1v.axpy(-r * ps * bv[k], lam_f[k].sym(idx));
                for j in 0..NSTAR {
                    e1v.axpy(-bv[k] * bv[j], theta_f[k * NSTAR + j].sym(idx));
                }
            }
            e1.set_sym(idx, e1v);
            split_residual = split_residual.max(e.sym(idx).sub(e1v).frob());
            continue;
        }
        support[idx] = true;
        let gb: [[f64; 2]; 3] = std::array::from_fn(|k| {
            let d = dbt[k].at(idx);
            [d[0], d[1]]
        });
        {
            let vv = v_val.at_mut(idx);
            for k in 0..NSTAR {
                let dk = cf.d[k].at(idx);
                for c in 0..m {
                    vv[c] += lt[k] * btv[k] * dk[c];
                }
            }
            let vj = v_jac.at_mut(idx);
            for k in 0..NSTAR {
                let ak = cf.a[k].at(idx);
                let bk = cf.b[k].at(idx);
                let dk = cf.d[k].at(idx);
                for ax in 0..N {
                    for c in 0..m {
                        vj[ax * m + c] += btv[k] * (ak[ax * m + c] + lt[k] * bk[ax * m + c]) + lt[k] * dk[c] * gb[k][ax];
                    }
                }
            }
        }
        let ju = u.jacobian.at(idx);
        let jv = v_jac.at(idx);
        let r = rho.s(idx);
        let target = g.sym(idx).add(h.sym(idx)).scale(r * r);
        let ev = sym_prod(jv, jv, m).sub(sym_prod(ju, ju, m)).sub(target);
        e.set_sym(idx, ev);

        let bv: [f64; 3] = std::array::from_fn(|k| bf[k].s(idx));
        let ps = psi_field.s(idx);
        let mut e1v = Sym2::ZERO;
        let mut e2v = Sym2::ZERO;
        for k in 0..NSTAR {
            e1v.axpy(btv[k] * btv[k] - bv[k] * bv[k], dirs.outer(k));
            e1v.axpy(btv[k] - r * ps * bv[k], lam_f[k].sym(idx));
            for j in 0..NSTAR {
                e1v.axpy(btv[k] * btv[j] - bv[k] * bv[j], theta_f[k * NSTAR + j].sym(idx));
            }
            let dk = cf.d[k].at(idx);
            let p = [dot(&ju[..m], dk), dot(&ju[m..], dk)];
            e2v.axpy(2.0 * lt[k], sym_vec(p, gb[k]));
            e2v.axpy(lt[k] * lt[k], Sym2::outer(gb[k]));
            for i in 0..NSTAR {
                let bi = cf.b[i].at(idx);
                let q = [dot(&bi[..m], dk), dot(&bi[m..], dk)];
                e2v.axpy(2.0 * lt[i] * lt[k] * btv[i], sym_vec(q, gb[k]));
            }
        }
        e1.set_sym(idx, e1v);
        e2.set_sym(idx, e2v);
        split_residual = split_residual.max(ev.sub(e1v).sub(e2v).frob());
    }
    let v = MapJet::new(v_val, v_jac)?;
    if !(v.value.is_finite() && v.jacobian.is_finite() && e.is_finite()) {
        return Err(StageError::NonFinite);
    }

    let rho_mask: Vec<bool> = rho.data().iter().map(|&r| r > 0.0).collect();
    let dist = distance_to_set(&grid, &rho_mask);
    let changed_nodes = support.iter().filter(|&&s| s).count();
    let support_reach = support
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| dist.s(i))
        .fold(0.0, f64::max);
    let support_allowed = params.ell_b() + 2.0 * if b_mollified { params.ell_b() } else { grid.h() };

    let diff = v.sub(u)?;
    let measured = StageNorms {
        v_minus_u_c0: diff.value.sup_norm(),
        v_minus_u_c1: diff.ck_norm(1),
        v_c2: v.ck_norm(2),
        e_c0: e.sup_norm(),
        e_c1: ck_norm(&e, 1)?,
    };
    let sd = params.delta.sqrt();
    let (l, t) = (params.lambda, params.tau);
    let bounds = StageNorms {
        v_minus_u_c0: sd * l.powf(-t),
        v_minus_u_c1: sd,
        v_c2: sd * l.powf(t),
        e_c0: params.delta * l.powf(2.0 - 2.0 * t),
        e_c1: params.delta * l,
    };
    let constants = StageNorms {
        v_minus_u_c0: measured.v_minus_u_c0 / bounds.v_minus_u_c0,
        v_minus_u_c1: measured.v_minus_u_c1 / bounds.v_minus_u_c1,
        v_c2: measured.v_c2 / bounds.v_c2,
        e_c0: measured.e_c0 / bounds.e_c0,
        e_c1: measured.e_c1 / bounds.e_c1,
    };
    let certificate = StageCertificate {
        input_hash,
        params: *params,
        preconditions,
        eps_sqrt: s_eps,
        b_mollified,
        measured,
        bounds,
        constants,
        decomposition_residual,
        split_residual,
        newton_max_steps,
        frame_orthonormality: frame.quality.orthonormality,
        changed_nodes,
        support_reach,
        support_allowed,
    };
    Ok(StageResult { v, e, e1, e2, b: bf, b_tilde: bt, support, certificate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Grid, M};

    fn flat(grid: Grid) -> MapJet {
        MapJet::from_fn(
            grid,
            M,
            |x, o| {
                o.fill(0.0);
                o[0] = x[0];
                o[1] = x[1];
            },
            |_, o| {
                o.fill(0.0);
                o[0] = 1.0;
                o[M + 1] = 1.0;
            },
        )
    }

    fn id(grid: Grid) -> Field {
        Field::constant(grid, FieldKind::Sym2, &[1.0, 0.0, 1.0])
    }

    #[test]
    fn psi_plateaus_and_transition() {
        let s = 0.01;
        assert!((psi(2.0 * s, s) - 1.0 / (2.0 * s)).abs() < 1e-12);
        assert_eq!(psi(0.0, s), 1.0 / s);
        let mid = psi(1.5 * s, s);
        assert!(mid >= 1.0 / (2.0 * s) && mid <= 1.0 / s);
        let mut prev = f64::INFINITY;
        for i in 0..=400 {
            let r = 3.0 * s * i as f64 / 400.0;
            let p = psi(r, s);
            assert!(p <= prev + 1e-12);
            assert!(r * p <= 2.0 + 1e-12);
            prev = p;
        }
        // C¹ at both joints.
        let d = |r: f64| (psi(r + 1e-9, s) - psi(r - 1e-9, s)) / 2e-9;
        assert!(d(s).abs() < 1e-2 * (1.0 / (s * s)));
        assert!((d(2.0 * s) + 1.0 / (4.0 * s * s)).abs() < 1e-3 * (1.0 / (s * s)));
    }

    #[test]
    fn cutoff_rejects_large_epsilon() {
        let g = Grid::square(1.0, 16, false).unwrap();
        let rho = Field::zeros(g, FieldKind::Scalar);
        assert!(matches!(degenerate_cutoff(&rho, 0.09, 2.0, 1.5, 4.0), Err(StageError::EpsilonTooLarge { .. })));
    }

    #[test]
    fn flat_corrugation_fields() {
        let g = Grid::square(0.05, 128, false).unwrap();
        let jet = flat(g);
        let frame = normal_frame_from_jacobian(&jet.jacobian, 6, 2.0, &Seeds::default()).unwrap();
        let dirs = standard_directions(2).unwrap();
        let cf = corrugation_fields(&frame, [50f64.powf(1.5); 3], &dirs).unwrap();
        for k in 0..NSTAR {
            assert_eq!(cf.b[k].sup_norm(), 0.0);
            for idx in 0..g.len() {
                let d = cf.d[k].at(idx);
                assert!((dot(d, d) - 1.0).abs() < 1e-14);
                let a = cf.a[k].at(idx);
                assert!(dot(&a[..M], d).abs() < 1e-10 && dot(&a[M..], d).abs() < 1e-10);
                assert!(dot(&a[..M], &jet.jacobian.at(idx)[..M]).abs() < 1e-14);
            }
            let a1 = crate::fields::c1_seminorm(&cf.a[k]);
            assert!(a1 <= 4.0 * cf.frequencies[k], "{a1}");
        }
        assert!(matches!(corrugation_fields(&frame, [200f64.powf(1.5); 3], &dirs), Err(StageError::NyquistViolation { .. })));
    }

    #[test]
    fn lattice_directions_are_periodic() {
        let tau = std::f64::consts::TAU;
        let g = Grid::square(tau, 64, true).unwrap();
        let (set, f) = lattice_directions(&g, 7.3, &standard_directions(2).unwrap()).unwrap();
        for k in 0..NSTAR {
            for ax in 0..2 {
                let w = f[k] * set.dirs[k][ax];
                assert!((w - w.round()).abs() < 1e-12, "{w}");
            }
        }
        let flat = Grid::square(1.0, 64, false).unwrap();
        let (set, f) = lattice_directions(&flat, 7.3, &standard_directions(2).unwrap()).unwrap();
        assert_eq!(f, [7.3; 3]);
        assert_eq!(set, standard_directions(2).unwrap());
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let g = Grid::square(0.05, 64, false).unwrap();
        let u = flat(g);
        let rho = Field::zeros(g, FieldKind::Scalar);
        let h = Field::zeros(g, FieldKind::Sym2);
        let r = perform_stage(&u, &rho, &h, &id(g), &StageParams::new(0.09, 50.0, 1.5)).unwrap();
        assert_eq!(r.v.value, u.value);
        assert_eq!(r.e.sup_norm(), 0.0);
        assert_eq!(r.certificate.changed_nodes, 0);
    }

    fn bump_rho(g: Grid, amp: f64, c: [f64; 2], w: f64) -> Field {
        Field::scalar_fn(g, |x| {
            let r2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (w * w);
            if r2 < 1.0 {
                amp * (1.0 - r2).powi(3)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn curved_stage_identities_and_support() {
        let g = Grid::square(0.06, 128, false).unwrap();
        let u = MapJet::from_fn(
            g,
            M,
            |x, o| {
                o.fill(0.0);
                o[0] = x[0];
                o[1] = x[1];
                o[2] = 0.3 * x[0] * x[0] + 0.2 * x[0] * x[1];
                o[3] = 0.25 * x[1] * x[1];
            },
            |x, o| {
                o.fill(0.0);
                o[0] = 1.0;
                o[2] = 0.6 * x[0] + 0.2 * x[1];
                o[M + 1] = 1.0;
                o[M + 2] = 0.2 * x[0];
                o[M + 3] = 0.5 * x[1];
            },
        );
        let mut p = StageParams::new(0.04, 60.0, 1.2);
        p.c0 = 1.0;
        p.sigma0 = 0.5;
        let rho = bump_rho(g, 0.15, [0.03, 0.03], 0.025);
        let h = Field::constant(g, FieldKind::Sym2, &[0.02, 0.01, -0.01]);
        let gm = Field::constant(g, FieldKind::Sym2, &[1.0, 0.1, 0.9]);
        let r = perform_stage(&u, &rho, &h, &gm, &p).unwrap();
        let c = &r.certificate;
        assert!(c.decomposition_residual < 1e-8, "{}", c.decomposition_residual);
        assert!(c.split_residual < 1e-8, "{}", c.split_residual);
        assert!(c.changed_nodes > 0);
        assert!(c.support_reach <= c.support_allowed + 1e-12, "{} {}", c.support_reach, c.support_allowed);
        // Direct oracle: E from the finite-difference metric of the output is close to the tracked one.
        let fd = MapJet::from_samples(r.v.value.clone()).unwrap();
        let em = fd.metric().sub(&u.metric()).unwrap();
        let mut worst: f64 = 0.0;
        for j in 8..120 {
            for i in 8..120 {
                let idx = g.index(i, j);
                let rr = rho.s(idx);
                let t = gm.sym(idx).add(h.sym(idx)).scale(rr * rr);
                worst = worst.max(em.sym(idx).sub(t).sub(r.e.sym(idx)).frob());
            }
        }
        assert!(worst < 0.05 * c.measured.e_c0.max(1e-3), "{worst} vs {}", c.measured.e_c0);
        let s = serde_json::to_string(c).unwrap();
        assert!(s.contains("input_hash"));
    }

    #[test]
    fn deterministic_output() {
        let g = Grid::square(0.05, 64, false).unwrap();
        let u = flat(g);
        let rho = bump_rho(g, 0.1, [0.025, 0.025], 0.02);
        let h = Field::zeros(g, FieldKind::Sym2);
        let mut p = StageParams::new(0.09, 30.0, 1.3);
        p.lambda0 = 8.0;
        p.c0 = 1.0;
        let a = perform_stage(&u, &rho, &h, &id(g), &p).unwrap();
        let b = perform_stage(&u, &rho, &h, &id(g), &p).unwrap();
        assert_eq!(a.v, b.v);
        assert_eq!(a.certificate, b.certificate);
    }

    #[test]
    fn precondition_failures_are_named() {
        let g = Grid::square(0.05, 64, false).unwrap();
        let u = flat(g);
        let rho = Field::constant(g, FieldKind::Scalar, &[0.5]);
        let h = Field::zeros(g, FieldKind::Sym2);
        let mut p = StageParams::new(0.09, 40.0, 1.3);
        p.c0 = 1.0;
        match perform_stage(&u, &rho, &h, &id(g), &p) {
            Err(StageError::Precondition { name, .. }) => assert_eq!(name, "rho <= delta^1/2"),
            other => panic!("{other:?}"),
        }
    }
}
