//! Mollifier constants across kernel widths: smoothing gain, approximation and commutator.

use nashflex::fields::{Field, Grid};
use nashflex::mollify::{mollify, mollify_constants};

fn main() {
    let grid = Grid::square(1.0, 128, false).expect("grid");
    let f = Field::scalar_fn(grid, |x| (3.0 * x[0] + 1.0).sin() * (2.0 * x[1]).cos() + 0.5 * x[0] * x[1]);
    let g = Field::scalar_fn(grid, |x| (x[0] - 0.5 * x[1]).exp() + (4.0 * x[1]).sin());
    println!("{:>6} {:>14} {:>14} {:>14} {:>12}", "ell", "smoothing", "approximation", "commutator", "|f - f*phi|0");
    for ell in [0.2, 0.1, 0.05] {
        let c = mollify_constants(&f, &g, ell).expect("constants");
        let fm = mollify(&f, ell).expect("mollify");
        let diff = f.data().iter().zip(fm.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{ell:>6} {:>14.4} {:>14.4} {:>14.4} {:>12.3e}", c.smoothing_gain, c.approximation, c.commutator, diff);
    }
}
