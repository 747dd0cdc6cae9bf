//! Connection gap of the smooth product extension of a cone collar under grid refinement,
//! next to the strictly positive gap of the inward-normal circle problem.

use nashflex::extend::{adapted_extension, CircleNormal, CollarChart, ExtensionParams, SigmaData};
use nashflex::fields::M;
use nashflex::verify::{connection_gap, rigidity_ladder};

fn main() {
    for beta in [0.0, 0.5, 1.0] {
        let r = rigidity_ladder(&[64, 128, 256, 512], beta).expect("ladder");
        let gaps: Vec<String> = r.gaps.iter().map(|g| format!("{g:.2e}")).collect();
        println!("beta {beta:.1}: gaps [{}], slope in h {:.2}", gaps.join(", "), r.fit.slope);
    }
    let collar = CollarChart::flat(1024, 64, 0.2).expect("collar");
    let sd = SigmaData::circle(&collar, M, CircleNormal::Inward).expect("circle");
    let params = ExtensionParams { k: 1.6, ..ExtensionParams::default() };
    let (triple, _) = adapted_extension(&sd, &collar, &params).expect("extension");
    let gap = connection_gap(&triple.u, &sd);
    println!("inward normal circle: gap in [{:.6}, {:.6}]", gap.min, gap.max);
}
