//! Flexibility witness: the unit circle in ℝ⁸ bounding a flat collar, extended with the
//! inward normal `μ = −f` prescribed as `du(ν)` (a smooth isometric extension would need `μ = e₃`).
//!
//! Usage: `cargo run --release --example extend_circle -- [nx] [nt] [eps] [alpha] [K] [tau] [layers] [q] [lambda1]`

use nashflex::extend::{
    adapted_extension, check_admissible, isometric_extension, CircleNormal, CollarChart, ExtensionParams, SigmaData,
};
use nashflex::fields::M;
use nashflex::iterate::{IterConfig, ScheduleConfig, SchedulePolicy};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let nx = arg(0, 4096.0) as usize;
    let nt = arg(1, 128.0) as usize;
    let eps = arg(2, 0.2);
    let params = ExtensionParams {
        alpha: arg(3, 0.1),
        k: arg(4, 8.0),
        tau: arg(5, 1.25),
        layers: match arg(6, 0.0) as usize {
            0 => None,
            q => Some(q),
        },
        ..ExtensionParams::default()
    };
    let q_max = arg(7, 0.0) as usize;
    let lambda1 = arg(8, 16.0);

    let collar = CollarChart::flat(nx, nt, eps).expect("collar");
    let sd = SigmaData::circle(&collar, M, CircleNormal::Inward).expect("circle data");
    let margin = check_admissible(&sd).expect("admissible");
    println!("margin in [{:.6}, {:.6}], h = {:.3e}", margin.iter().cloned().fold(f64::INFINITY, f64::min),
        margin.iter().cloned().fold(0.0, f64::max), collar.grid().h());
    let t0 = std::time::Instant::now();
    if q_max == 0 {
        match adapted_extension(&sd, &collar, &params) {
            Err(e) => println!("adapted extension failed: {e}"),
            Ok((triple, rep)) => {
                print_adapted(&rep);
                println!("h_relative {:.3e}", triple.checks().h_relative);
            }
        }
    } else {
        let mut cfg = IterConfig::new(ScheduleConfig {
            policy: SchedulePolicy::Geometric { delta_ratio: 0.25, lambda_ratio: 2.0, lambda1 },
            tau: Some(params.tau),
            ..ScheduleConfig::new(32.0, 1.1, 0.45, 0.5, q_max)
        });
        cfg.sigma0 = 100.0;
        cfg.gamma = params.gamma;
        match isometric_extension(&sd, &collar, &params, &cfg, q_max) {
            Err(e) => println!("extension failed: {e}"),
            Ok((_, rep)) => {
                print_adapted(&rep.adapted);
                for s in &rep.convergence.steps {
                    println!(
                        "iterate q={} freq {:.1} |Δu|₁ {:.3e} |E|₀ {:.3e} defect {:.3e} support {}",
                        s.q, s.stage_frequency, s.u_step_c1, s.stage_error_c0, s.metric_defect, s.cutoffs.support_chi
                    );
                }
                if let Some(e) = &rep.convergence.error {
                    println!("iteration stopped: {e}");
                }
                println!(
                    "gap min {:.6} max {:.6}; |gap − margin| {:.3e}; drift {:.3e}",
                    rep.gap_final.min, rep.gap_final.max, rep.gap_vs_margin, rep.gap_drift
                );
                println!(
                    "boundary |u−f| {:.3e} |du(ν)−μ| {:.3e} (10h² = {:.3e}); defect {:.3e}, covered rows {:.3e}",
                    rep.boundary_value_error, rep.boundary_normal_error, 10.0 * rep.h * rep.h, rep.final_defect, rep.final_defect_covered
                );
            }
        }
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

fn print_adapted(rep: &nashflex::extend::AdaptedExtensionReport) {
    println!(
        "ρ sup {:.4}, shortness floor {:.3}, split radius {:.3}, order {:?}",
        rep.rho_sup, rep.shortness_floor, rep.decomposition_radius, rep.order
    );
    for l in &rep.layers {
        println!(
            "layer {} d {:.4} freq {:.1} |Δu|₀ {:.3e} |Δu|₁ {:.3e} [∇Δu]_θ {:.3e} |E|₀ {:.3e} |E|/ρ² {:.3e} newton {}",
            l.layer, l.d, l.frequency, l.u_step_c0, l.u_step_c1, l.u_step_c1_theta, l.stage_error_c0, l.relative_error,
            l.certificate.newton_max_steps
        );
    }
    println!(
        "defect {:.3e} → {:.3e}; covered error {:.3e}; h sup {:.3e} (bound {:.3e}); margin violations {}; residual {:.1e}",
        rep.initial_defect, rep.defect_after, rep.covered_error, rep.h_sup_covered, rep.h_bound, rep.margin_violations, rep.identity_residual
    );
    println!("boundary |v−f| {:.3e} |dv(ν)−μ| {:.3e}; covered from t = {:.4}", rep.boundary_value_error, rep.boundary_normal_error, rep.covered_from);
}
