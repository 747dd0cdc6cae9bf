//! Empirical Hölder exponent of a gradient: a synthetic `|x − c|^0.4` kink against a smooth field.

use nashflex::fields::{Field, Grid};
use nashflex::verify::holder_exponent_estimate;

fn main() {
    let grid = Grid::new([1.0, 0.25], [512, 32], [false, false]).expect("grid");
    let ladder = [2, 4, 8, 16, 32, 64];
    for alpha in [0.2, 0.4, 0.6, 0.8] {
        let c = 0.5 + 0.3 / 511.0;
        let f = Field::scalar_fn(grid, |x| (x[0] - c).abs().powf(1.0 + alpha) / (1.0 + alpha));
        let e = holder_exponent_estimate(&f, &ladder).expect("fit");
        println!("kink exponent {alpha:.1}: fitted {:.3} (fit residual {:.1e})", e.exponent, e.residual);
    }
    let smooth = Field::scalar_fn(grid, |x| (2.0 * x[0]).sin() * (1.0 + x[1]));
    let e = holder_exponent_estimate(&smooth, &ladder).expect("fit");
    println!("smooth field: fitted {:.3}", e.exponent);
}
