//! Post-hoc checks: log-log fits, Hölder exponent estimates, stage
//! certificates and the connection gap along a boundary curve.

use crate::extend::{periodic_derivatives, SigmaData};
use crate::fields::{dot, gradient, modulus_samples, Field, FieldKind, Grid, MapJet, M};
use crate::stage::{perform_stage, StageCertificate, StageError, StageNorms, StageParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("fit degenerate: {0}")]
    FitDegenerate(String),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Field(#[from] crate::fields::FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points: usize,
}

/// Least-squares fit of `log y = slope · log x + intercept`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LogLogFit, VerifyError> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(VerifyError::FitDegenerate(format!("{} usable points", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx < 1e-24 {
        return Err(VerifyError::FitDegenerate("abscissae coincide".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LogLogFit { slope, intercept, residual, points: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    /// Fitted slope clamped to `[0, 1]`.
    pub exponent: f64,
    pub raw_slope: f64,
    pub residual: f64,
    pub points: usize,
}

/// Hölder exponent of a field read from its sampled modulus of continuity.
pub fn field_exponent(f: &Field, ladder: &[usize]) -> Result<ExponentFit, VerifyError> {
    let samples = modulus_samples(f, ladder);
    let scale = f.sup_norm().max(1.0);
    let peak = samples.iter().map(|s| s.max_diff).fold(0.0, f64::max);
    if !(peak > 1e-12 * scale) {
        return Err(VerifyError::FitDegenerate("modulus vanishes".into()));
    }
    // Modulus ω(r) = max over pairs at distance ≤ r, then fitted where positive.
    let mut pts: Vec<(f64, f64)> = samples.iter().map(|s| (s.distance, s.max_diff)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut running: f64 = 0.0;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (d, v) in pts {
        running = running.max(v);
        if running > 1e-12 * scale {
            xs.push(d);
            ys.push(running);
        }
    }
    let fit = fit_loglog(&xs, &ys)?;
    Ok(ExponentFit { exponent: fit.slope.clamp(0.0, 1.0), raw_slope: fit.slope, residual: fit.residual, points: fit.points })
}

/// Hölder exponent of `∇f` from finite differences.
pub fn holder_exponent_estimate(f: &Field, ladder: &[usize]) -> Result<ExponentFit, VerifyError> {
    field_exponent(&gradient(f), ladder)
}

/// Hölder exponent of the tracked Jacobian of a map.
pub fn jacobian_exponent(u: &MapJet, ladder: &[usize]) -> Result<ExponentFit, VerifyError> {
    field_exponent(&u.jacobian, ladder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateLine {
    pub quantity: String,
    pub measured: f64,
    pub bound_shape: f64,
    pub ratio: f64,
    pub finite: bool,
}

/// Measured-over-bound ledger of a stage certificate.
pub fn stage_certificate(cert: &StageCertificate) -> Vec<CertificateLine> {
    let rows = [
        ("|v-u|_0", cert.measured.v_minus_u_c0, cert.bounds.v_minus_u_c0),
        ("|v-u|_1", cert.measured.v_minus_u_c1, cert.bounds.v_minus_u_c1),
        ("|v|_2", cert.measured.v_c2, cert.bounds.v_c2),
        ("|E|_0", cert.measured.e_c0, cert.bounds.e_c0),
        ("|E|_1", cert.measured.e_c1, cert.bounds.e_c1),
    ];
    rows.iter()
        .map(|&(q, m, b)| {
            let ratio = m / b;
            CertificateLine { quantity: q.into(), measured: m, bound_shape: b, ratio, finite: ratio.is_finite() }
        })
        .collect()
}

/// Slopes of the certificate norms against λ across a ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderFit {
    pub lambdas: Vec<f64>,
    pub e_c0: LogLogFit,
    pub v_minus_u_c0: LogLogFit,
    pub v_c2: LogLogFit,
    pub e_c1: LogLogFit,
    /// max/min of `‖v−u‖₁` across the ladder.
    pub v_minus_u_c1_spread: f64,
}

pub fn ladder_fit(certs: &[StageCertificate]) -> Result<LadderFit, VerifyError> {
    let lambdas: Vec<f64> = certs.iter().map(|c| c.params.lambda).collect();
    let col = |f: fn(&StageNorms) -> f64| -> Vec<f64> { certs.iter().map(|c| f(&c.measured)).collect() };
    let c1 = col(|n| n.v_minus_u_c1);
    let lo = c1.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c1.iter().copied().fold(0.0, f64::max);
    Ok(LadderFit {
        e_c0: fit_loglog(&lambdas, &col(|n| n.e_c0))?,
        v_minus_u_c0: fit_loglog(&lambdas, &col(|n| n.v_minus_u_c0))?,
        v_c2: fit_loglog(&lambdas, &col(|n| n.v_c2))?,
        e_c1: fit_loglog(&lambdas, &col(|n| n.e_c1))?,
        v_minus_u_c1_spread: hi / lo,
        lambdas,
    })
}

/// Flat-chart stage benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatLadderConfig {
    pub resolution: usize,
    /// Chart side; `None` picks the largest Nyquist-safe side for the top of the ladder.
    #[serde(default)]
    pub side: Option<f64>,
    pub delta: f64,
    pub tau: f64,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub c0: Option<f64>,
    /// Phase of the amplitude oscillation.
    #[serde(default)]
    pub phase: f64,
}

impl FlatLadderConfig {
    pub fn side(&self) -> f64 {
        self.side.unwrap_or_else(|| {
            let top = self.lambdas.iter().copied().fold(0.0, f64::max);
            let h = 0.98 * crate::stage::NYQUIST_LIMIT / top.powf(self.tau);
            h * (self.resolution - 1) as f64
        })
    }

    pub fn params(&self, lambda: f64) -> StageParams {
        let mut p = StageParams::new(self.delta, lambda, self.tau);
        p.c0 = self.c0.unwrap_or(1.0);
        p.gamma = 2.0;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatLadderRow {
    pub certificate: StageCertificate,
    /// Changed nodes of the compactly supported run stay within the allowed dilation.
    pub support_ok: bool,
    pub support_reach: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatLadderReport {
    pub side: f64,
    pub rows: Vec<FlatLadderRow>,
    pub fit: LadderFit,
}

pub fn flat_chart(grid: Grid) -> MapJet {
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

/// Amplitude `δ^{1/2}(1 + sin(λx₁ + phase))/2`, so that `|∇ρ| ∝ δ^{1/2}λ`.
pub fn oscillating_amplitude(grid: Grid, delta: f64, lambda: f64, phase: f64) -> Field {
    let s = delta.sqrt();
    Field::scalar_fn(grid, |x| 0.5 * s * (1.0 + (lambda * x[0] + phase).sin()))
}

/// Compactly supported amplitude whose C¹ norm stays below `δ^{1/2}λ`.
pub fn compact_amplitude(grid: Grid, delta: f64, lambda: f64) -> Field {
    let s = delta.sqrt();
    let c = [0.5 * grid.extent[0], 0.5 * grid.extent[1]];
    let w = (0.3 * grid.extent[0].min(grid.extent[1])).max(4.0 / lambda);
    Field::scalar_fn(grid, |x| {
        let r2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (w * w);
        if r2 < 1.0 {
            0.5 * s * (1.0 - r2).powi(3)
        } else {
            0.0
        }
    })
}

pub fn run_flat_ladder(cfg: &FlatLadderConfig) -> Result<FlatLadderReport, VerifyError> {
    let side = cfg.side();
    let grid = Grid::square(side, cfg.resolution, false)?;
    let u = flat_chart(grid);
    let g = Field::constant(grid, FieldKind::Sym2, &[1.0, 0.0, 1.0]);
    let h = Field::zeros(grid, FieldKind::Sym2);
    let mut rows = Vec::new();
    for &lambda in &cfg.lambdas {
        let p = cfg.params(lambda);
        let rho = oscillating_amplitude(grid, cfg.delta, lambda, cfg.phase);
        let res = perform_stage(&u, &rho, &h, &g, &p)?;
        let rc = compact_amplitude(grid, cfg.delta, lambda);
        let sup = perform_stage(&u, &rc, &h, &g, &p)?;
        let support_ok = sup.certificate.support_reach <= sup.certificate.support_allowed + 1e-12;
        let support_reach = sup.certificate.support_reach;
        rows.push(FlatLadderRow { certificate: res.certificate, support_ok, support_reach });
    }
    let certs: Vec<StageCertificate> = rows.iter().map(|r| r.certificate.clone()).collect();
    let fit = ladder_fit(&certs)?;
    Ok(FlatLadderReport { side, rows, fit })
}

// ---------------------------------------------------------------------------
// Connection gap

/// Values on the row `t = 0` and the one-sided second-order `t`-derivative there, both
/// node-major over the first axis, read from the samples of `u`.
pub fn boundary_trace(u: &MapJet) -> (Vec<f64>, Vec<f64>) {
    let grid = *u.grid();
    let m = u.dim();
    let nx = grid.nodes[0];
    let ht = grid.spacing_axis(1);
    let mut vals = vec![0.0; nx * m];
    let mut dnu = vec![0.0; nx * m];
    for i in 0..nx {
        let (r0, r1, r2) = (u.value.at(grid.index(i, 0)), u.value.at(grid.index(i, 1)), u.value.at(grid.index(i, 2)));
        for c in 0..m {
            vals[i * m + c] = r0[c];
            dnu[i * m + c] = (-3.0 * r0[c] + 4.0 * r1[c] - r2[c]) / (2.0 * ht);
        }
    }
    (vals, dnu)
}

/// `⟨du(ν), L̄(X,X)⟩` against `L(X,X)` along `Σ`.
///
/// This certifies the computable surrogate of the rigidity/flexibility dichotomy: the gap
/// vanishes (up to discretization) for smooth isometric extensions and stays at the
/// admissibility margin for the corrugated ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `X = a(x)∂_x/√G`; `a ≡ 1` is the unit tangent.
    pub tangent_scale: Vec<f64>,
    pub normal_term: Vec<f64>,
    pub l_term: Vec<f64>,
    pub gap: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// Node of the smallest gap.
    pub argmin: usize,
}

/// Gap along the unit tangent of `Σ`.
pub fn connection_gap(u: &MapJet, sd: &SigmaData) -> GapReport {
    connection_gap_along(u, sd, &vec![1.0; sd.nodes()])
}

/// Gap along `X = a(x)∂_x/√G`. Everything except `L` is read from the samples of `u`:
/// `du(ν)` from the first collar rows, `L̄` from fourth-order differences along the `t = 0` row,
/// so the report is invariant under rigid motions of the target.
pub fn connection_gap_along(u: &MapJet, sd: &SigmaData, scale: &[f64]) -> GapReport {
    let grid = *u.grid();
    let m = u.dim();
    let (vals, dnu) = boundary_trace(u);
    let (fx, fxx) = periodic_derivatives(&vals, m, grid.spacing_axis(0));
    let n = sd.nodes();
    let (mut normal_term, mut l_term, mut gap) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let a = &fx[i * m..(i + 1) * m];
        let b = &fxx[i * m..(i + 1) * m];
        let s = dot(b, a) / dot(a, a);
        let lbar: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - s * y).collect();
        let w = scale[i] * scale[i] / sd.g0[i];
        normal_term[i] = w * dot(&dnu[i * m..(i + 1) * m], &lbar);
        l_term[i] = w * sd.l[i];
        gap[i] = normal_term[i] - l_term[i];
    }
    let (argmin, min) = gap.iter().cloned().enumerate().fold((0, f64::INFINITY), |acc, (i, g)| if g < acc.1 { (i, g) } else { acc });
    let max = gap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    GapReport { tangent_scale: scale.to_vec(), normal_term, l_term, gap, min, max, argmin }
}

/// Smooth isometric extension `(1 − t sin β) f + t cos β e₃` of the unit circle `f` into
/// the cone collar `G = (1 − t sin β)²`; `β = 0` is the flat product `f + t e₃`.
pub fn product_extension(collar: &crate::extend::CollarChart, beta: f64) -> MapJet {
    let (sb, cb) = beta.sin_cos();
    let value = Field::from_fn(*collar.grid(), FieldKind::Map(M), |p, out| {
        let (s, c) = p[0].sin_cos();
        out[0] = (1.0 - p[1] * sb) * c;
        out[1] = (1.0 - p[1] * sb) * s;
        out[2] = p[1] * cb;
    });
    MapJet::from_samples(value).expect("map samples")
}

/// Gap of the smooth product extension under refinement: this is the computable side of
/// the rigidity statement (smooth isometries have zero gap), not a certificate for rough maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidityReport {
    pub beta: f64,
    pub resolutions: Vec<usize>,
    pub spacings: Vec<f64>,
    /// `sup |gap|` per resolution.
    pub gaps: Vec<f64>,
    pub fit: LogLogFit,
}

pub fn rigidity_ladder(resolutions: &[usize], beta: f64) -> Result<RigidityReport, VerifyError> {
    use crate::extend::{CircleNormal, CollarChart, SigmaData};
    let (mut spacings, mut gaps) = (Vec::new(), Vec::new());
    for &n in resolutions {
        let collar = CollarChart::cone(n, n, 0.2, beta).map_err(|e| VerifyError::FitDegenerate(e.to_string()))?;
        let sd = SigmaData::circle(&collar, M, CircleNormal::Tilted { beta })
            .map_err(|e| VerifyError::FitDegenerate(e.to_string()))?;
        let rep = connection_gap(&product_extension(&collar, beta), &sd);
        spacings.push(collar.grid().h());
        gaps.push(rep.min.abs().max(rep.max.abs()));
    }
    let fit = fit_loglog(&spacings, &gaps)?;
    Ok(RigidityReport { beta, resolutions: resolutions.to_vec(), spacings, gaps, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglog_fit_recovers_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.5)).collect();
        let f = fit_loglog(&xs, &ys).unwrap();
        assert!((f.slope + 1.5).abs() < 1e-12 && f.residual < 1e-12);
        assert!(matches!(fit_loglog(&[1.0], &[1.0]), Err(VerifyError::FitDegenerate(_))));
        assert!(matches!(fit_loglog(&[2.0, 2.0], &[1.0, 3.0]), Err(VerifyError::FitDegenerate(_))));
    }

    #[test]
    fn exponent_smooth_and_constant() {
        let g = Grid::square(1.0, 128, false).unwrap();
        let f = Field::scalar_fn(g, |x| (2.0 * x[0]).sin() * x[1]);
        let e = holder_exponent_estimate(&f, &[2, 4, 8, 16]).unwrap();
        assert!(e.exponent >= 0.95, "{e:?}");
        let c = Field::constant(g, FieldKind::Scalar, &[2.0]);
        assert!(matches!(holder_exponent_estimate(&c, &[2, 4, 8]), Err(VerifyError::FitDegenerate(_))));
    }

    #[test]
    fn exponent_of_rough_gradient() {
        // ∂₁f = |x₁ − c|^{0.4} sign(x₁ − c).
        let g = Grid::new([1.0, 0.25], [512, 32], [false, false]).unwrap();
        let c = 0.5 + 0.3 / 511.0;
        let f = Field::scalar_fn(g, |x| (x[0] - c).abs().powf(1.4) / 1.4);
        let e = holder_exponent_estimate(&f, &[2, 4, 8, 16, 32, 64]).unwrap();
        assert!((e.exponent - 0.4).abs() < 0.05, "{e:?}");
    }

    #[test]
    fn certificate_ledger_is_finite() {
        let g = Grid::square(0.05, 64, false).unwrap();
        let u = flat_chart(g);
        let rho = oscillating_amplitude(g, 0.09, 40.0, 0.3);
        let mut p = StageParams::new(0.09, 40.0, 1.3);
        p.c0 = 1.0;
        let r = perform_stage(&u, &rho, &Field::zeros(g, FieldKind::Sym2), &Field::constant(g, FieldKind::Sym2, &[1.0, 0.0, 1.0]), &p).unwrap();
        let ledger = stage_certificate(&r.certificate);
        assert_eq!(ledger.len(), 5);
        assert!(ledger.iter().all(|l| l.finite));
    }

    #[test]
    fn gap_vanishes_for_flat_product() {
        use crate::extend::{CircleNormal, CollarChart, SigmaData};
        let collar = CollarChart::flat(64, 32, 0.2).unwrap();
        let sd = SigmaData::circle(&collar, M, CircleNormal::Binormal).unwrap();
        let rep = connection_gap(&product_extension(&collar, 0.0), &sd);
        let h = collar.grid().h();
        assert!(rep.min.abs() <= 10.0 * h && rep.max.abs() <= 10.0 * h);
    }

    #[test]
    fn gap_of_short_extension_is_margin() {
        use crate::extend::{short_extension, CircleNormal, CollarChart, SigmaData};
        let collar = CollarChart::flat(128, 32, 0.2).unwrap();
        let sd = SigmaData::circle(&collar, M, CircleNormal::Inward).unwrap();
        let u = short_extension(&sd, &collar).unwrap();
        let rep = connection_gap(&u, &sd);
        let h = collar.grid().h();
        assert!(rep.min > 0.0);
        for (g, m) in rep.gap.iter().zip(sd.margin()) {
            assert!((g - m).abs() <= 10.0 * h);
        }
        // X = a∂_x/√G scales the gap by a².
        let scaled = connection_gap_along(&u, &sd, &vec![2.0; sd.nodes()]);
        assert!(scaled.gap.iter().zip(&rep.gap).all(|(a, b)| (a - 4.0 * b).abs() < 1e-12));
    }

    #[test]
    fn gap_invariant_under_rigid_motions() {
        use crate::extend::{short_extension, CircleNormal, CollarChart, SigmaData};
        use nalgebra::DMatrix;
        use rand::{Rng, SeedableRng};
        let collar = CollarChart::flat(64, 32, 0.2).unwrap();
        let sd = SigmaData::circle(&collar, M, CircleNormal::Inward).unwrap();
        let u = short_extension(&sd, &collar).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::<f64>::from_fn(M, M, |_, _| rng.gen_range(-1.0..1.0));
        let q = a.qr().q();
        let shift: Vec<f64> = (0..M).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut moved = u.value.clone();
        for idx in 0..moved.grid().len() {
            let x = u.value.at(idx).to_vec();
            let out = moved.at_mut(idx);
            for r in 0..M {
                out[r] = shift[r] + (0..M).map(|c| q[(r, c)] * x[c]).sum::<f64>();
            }
        }
        let moved = MapJet::from_samples(moved).unwrap();
        let (a, b) = (connection_gap(&u, &sd), connection_gap(&moved, &sd));
        let diff = a.gap.iter().zip(&b.gap).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn rigidity_surrogate_converges_under_refinement() {
        let rep = rigidity_ladder(&[64, 128, 256], 0.5).unwrap();
        assert!(rep.fit.slope >= 1.0, "{rep:?}");
        assert!(rep.gaps[2] <= 10.0 * rep.spacings[2]);
    }
}
