//! Flat-chart iteration toward an isometry for `G = (1 + 0.1 sin(k x₁))·Id`.
//!
//! First shows that the power-law schedule with `A = 32, b = 1.1, θ = 0.45` cannot satisfy the
//! ordering `δ_{q+1} ≤ δ_q/4`, then runs the geometric desk-scale schedule.
//!
//! Usage: `cargo run --release --example iterate_flat -- [lambda1] [lambda_ratio] [tau] [sigma0] [res] [k] [r2] [q]`

use nashflex::fields::{Field, FieldKind, Grid, MapJet, M};
use nashflex::frames::Seeds;
use nashflex::iterate::{build_schedule, iterate_to_isometry, AdaptedTriple, IterConfig, ScheduleConfig, SchedulePolicy};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let lambda1 = arg(0, 3.0);
    let lambda_ratio = arg(1, 2.0);
    let tau = arg(2, 2.0);
    let sigma0 = arg(3, 1.0);
    let res = arg(4, 256.0) as usize;
    let k = arg(5, 1.0);
    let r2 = arg(6, 1.0);
    let q_max = arg(7, 4.0) as usize;

    let literal = ScheduleConfig::new(32.0, 1.1, 0.45, 0.1, 4);
    match build_schedule(&literal) {
        Ok(_) => println!("power schedule accepted"),
        Err(e) => println!("power schedule: {e}"),
    }

    let grid = Grid::square(1.0, res, false).expect("grid");
    let g = Field::from_fn(grid, FieldKind::Sym2, |x, out| {
        let s = 1.0 + 0.1 * (k * x[0]).sin();
        out[0] = s;
        out[2] = s;
    });
    let r = r2.sqrt();
    let u0 = MapJet::from_fn(
        grid,
        M,
        |x, out| {
            out[0] = r * x[0];
            out[1] = r * x[1];
        },
        |_, out| {
            out[0] = r;
            out[M + 1] = r;
        },
    );
    let start = AdaptedTriple::from_short_map(u0, g).expect("short start");
    // strongly short starts take δ₁ = min ρ₀² so that χ₀ ≡ 1
    let rho_min = start.rho.min_value();
    let delta1 = if rho_min > 0.0 { rho_min * rho_min } else { start.rho.max_value().powi(2) };
    let sched_cfg = ScheduleConfig {
        policy: SchedulePolicy::Geometric { delta_ratio: 0.25, lambda_ratio, lambda1 },
        tau: Some(tau),
        ..ScheduleConfig::new(32.0, 1.1, 0.45, delta1, q_max)
    };
    let schedule = build_schedule(&sched_cfg).expect("geometric schedule");
    let mut cfg = IterConfig::new(sched_cfg);
    cfg.sigma0 = sigma0;
    println!("δ₁ = {delta1:.4}, τ = {tau}, λ = {:?}", schedule.lambdas);
    let t0 = std::time::Instant::now();
    let (_, rep) = iterate_to_isometry(&start, &schedule, &cfg, q_max, &Seeds::default());
    println!("q  freq      |Δu|₀      |Δu|₁      ρmax      |h|₀      |E|₀      defect    resid");
    for s in &rep.steps {
        println!(
            "{}  {:8.2}  {:.3e}  {:.3e}  {:.3e}  {:.3e}  {:.3e}  {:.3e}  {:.1e}",
            s.q, s.stage_frequency, s.u_step_c0, s.u_step_c1, s.rho_max, s.h_sup, s.stage_error_c0, s.metric_defect, s.identity_residual
        );
    }
    println!("C¹ ratios {:?}", rep.c1_ratios);
    println!(
        "final defect {:.3e} (tail bound {:.3e}), untouched {} bit-exact {}, locality violations {}",
        rep.final_defect, rep.tail_bound, rep.untouched_nodes, rep.untouched_bit_exact, rep.locality_violations
    );
    if let Some(e) = &rep.jacobian_exponent {
        println!("∇u exponent {:.3} (θ′ = {:.3})", e.exponent, rep.theta_target);
    }
    if let Some(e) = &rep.error {
        println!("stopped: {e}");
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
