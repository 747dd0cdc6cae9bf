//! Periodic-chart embedding demo: a scaled Clifford torus in ℝ⁸ (strictly short for `G`)
//! pushed toward an isometric immersion of `G = (1 + a·sin x₁)·Id` on the `2π`-torus.
//!
//! Usage: `cargo run --release --example embed_torus -- [amplitude] [lambda1] [tau] [stages] [res]`

use nashflex::fields::{Field, FieldKind, Grid};
use nashflex::iterate::{global_embed_demo, IterConfig, ScheduleConfig, SchedulePolicy};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let amp = arg(0, 0.0);
    let lambda1 = arg(1, 2.0);
    let tau = arg(2, 2.0);
    let stages = arg(3, 2.0) as usize;
    let res = arg(4, 256.0) as usize;

    let grid = Grid::square(std::f64::consts::TAU, res, true).expect("grid");
    let g = Field::from_fn(grid, FieldKind::Sym2, |x, out| {
        let s = 1.0 + amp * x[0].sin();
        out[0] = s;
        out[2] = s;
    });
    let mut cfg = IterConfig::new(ScheduleConfig {
        policy: SchedulePolicy::Geometric { delta_ratio: 0.25, lambda_ratio: 2.0, lambda1 },
        tau: Some(tau),
        ..ScheduleConfig::new(32.0, 1.1, 0.45, 0.5, stages)
    });
    cfg.sigma0 = 100.0;
    match global_embed_demo(&g, &cfg, 1.0) {
        Err(e) => println!("demo failed: {e}"),
        Ok((_, rep)) => {
            let c = &rep.convergence;
            println!("radius {:.4}, δ* {:.4}, initial defect {:.3e}", rep.radius, rep.delta_star, c.initial_defect);
            for s in &c.steps {
                println!(
                    "q={} freq {:.2} |Δu|₀ {:.3e} |Δu|₁ {:.3e} |E|₀ {:.3e} defect {:.3e} resid {:.1e}",
                    s.q, s.stage_frequency, s.u_step_c0, s.u_step_c1, s.stage_error_c0, s.metric_defect, s.identity_residual
                );
            }
            println!("final defect {:.3e}, proximity {:.3e}", c.final_defect, rep.proximity);
            if let Some(e) = &c.error {
                println!("stopped: {e}");
            }
        }
    }
}
