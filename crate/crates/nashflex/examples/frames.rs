//! Orthonormal normal frames of corrugated graph maps into ℝ⁸, built from sampled values and
//! checked against the exact Jacobians. Tangency should shrink like h² under refinement.

use nashflex::cli::suite::frame_test_maps;
use nashflex::fields::{Grid, MapJet, M, N};
use nashflex::frames::normal_frame;

fn main() {
    for res in [64, 128, 256] {
        let grid = Grid::square(1.0, res, false).expect("grid");
        let h = grid.h();
        println!("{res}² grid, h = {h:.3e}, {} normals per node", M - N);
        for (name, value, exact) in frame_test_maps(grid) {
            let jet = MapJet::from_samples(value).expect("map");
            let frame = normal_frame(&jet, M - N, 2.0).expect("frame");
            let tangency = frame.tangency_against(&exact);
            println!(
                "  {name:>10}: orthonormality {:.1e}, tangency {tangency:.3e} = {:.2} h²",
                frame.quality.orthonormality,
                tangency / (h * h)
            );
        }
    }
}
