//! Rank-one decompositions in the three-direction frame, exact and perturbed.

use nashflex::decompose::{decompose_spd, perturbed_decompose, standard_directions, NewtonOptions, Perturbation};
use nashflex::fields::Sym2;

fn main() {
    let dirs = standard_directions(2).expect("n = 2 frame");
    for (name, p) in [("Id", Sym2::ID), ("diag(2,1)", Sym2::diag(2.0, 1.0)), ("[[1.2,.1],[.1,.9]]", Sym2::new(1.2, 0.1, 0.9))] {
        let c = decompose_spd(p, &dirs).expect("decomposable");
        let back = dirs.resum(c);
        println!("{name:>18}: a² = ({:.6}, {:.6}, {:.6}), resum error {:.1e}", c[0], c[1], c[2], back.sub(p).frob());
    }
    match decompose_spd(Sym2::diag(1.0, 10.0), &dirs) {
        Ok(c) => println!("diag(1,10) unexpectedly decomposed: {c:?}"),
        Err(e) => println!("diag(1,10): {e}"),
    }

    // A small interference term shifts the coefficients; Newton recovers them.
    let mut pert = Perturbation::zero();
    pert.lambda[0] = Sym2::new(0.01, 0.005, -0.01);
    pert.theta[1][2] = Sym2::new(0.0, 0.004, 0.0);
    let p = Sym2::new(1.05, 0.02, 0.97);
    let out = perturbed_decompose(p, Sym2::ID, &pert, &dirs, None, &NewtonOptions::default()).expect("within budget");
    let a = out.a;
    println!("perturbed: a = ({:.6}, {:.6}, {:.6}) in {} steps, residual {:.1e}", a[0], a[1], a[2], out.steps, out.residual);
    println!("residual history {:?}", out.history);
    let big = pert.scaled(20.0);
    if let Err(e) = perturbed_decompose(p, Sym2::ID, &big, &dirs, None, &NewtonOptions::default()) {
        println!("scaled x20: {e}");
    }
}
