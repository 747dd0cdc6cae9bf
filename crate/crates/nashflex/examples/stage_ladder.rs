//! Flat-chart stage ladder: fitted slopes of the stage norms against λ.

use nashflex::verify::{run_flat_ladder, FlatLadderConfig};

fn main() {
    let cfg = FlatLadderConfig {
        resolution: 256,
        side: None,
        delta: 0.09,
        tau: 1.5,
        lambdas: vec![50.0, 100.0, 200.0],
        c0: None,
        phase: 0.3,
    };
    let t = std::time::Instant::now();
    let report = run_flat_ladder(&cfg).expect("ladder run");
    println!("chart side {:.5}", report.side);
    println!("{:>8} {:>12} {:>12} {:>12} {:>12} {:>10} {:>8}", "lambda", "|E|_0", "|v-u|_0", "|v-u|_1", "|v|_2", "b_moll", "support");
    for r in &report.rows {
        let c = &r.certificate;
        println!(
            "{:>8} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>10} {:>8}",
            c.params.lambda, c.measured.e_c0, c.measured.v_minus_u_c0, c.measured.v_minus_u_c1, c.measured.v_c2, c.b_mollified, r.support_ok
        );
    }
    let f = &report.fit;
    println!("slope |E|_0 {:.3}, |v-u|_0 {:.3}, |v|_2 {:.3}, |v-u|_1 spread {:.3}", f.e_c0.slope, f.v_minus_u_c0.slope, f.v_c2.slope, f.v_minus_u_c1_spread);
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
}
