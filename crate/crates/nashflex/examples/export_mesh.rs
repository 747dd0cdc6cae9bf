//! Writes a corrugated torus-chart map as an OBJ mesh, a field container and a CSV slice,
//! then reads the container back.
//!
//! Usage: `cargo run --release --example export_mesh -- [out_dir]`

use nashflex::fields::{Field, FieldKind, Grid, M};
use nashflex::io::{csv_slice, obj_mesh, read_field, write_field};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "mesh_out".into());
    std::fs::create_dir_all(&out).expect("output dir");
    let tau = std::f64::consts::TAU;
    let grid = Grid::new([tau, tau], [96, 48], [true, true]).expect("grid");
    let u = Field::from_fn(grid, FieldKind::Map(M), |x, o| {
        let r = 2.0 + (0.7 + 0.03 * (12.0 * x[0]).sin()) * x[1].cos();
        o[0] = r * x[0].cos();
        o[1] = r * x[0].sin();
        o[2] = 0.7 * x[1].sin();
    });
    let obj = obj_mesh(&u, [0, 1, 2]).expect("mesh");
    std::fs::write(format!("{out}/torus.obj"), &obj).expect("write obj");
    let paths = write_field(std::path::Path::new(&out), "torus", &u).expect("container");
    let back = read_field(&paths[0]).expect("read back");
    assert_eq!(back.data(), u.data());
    std::fs::write(format!("{out}/torus_row.csv"), csv_slice(&u, 0, 24).expect("slice")).expect("write csv");
    println!(
        "{} vertices, {} faces; container {} round-trips",
        obj.lines().filter(|l| l.starts_with("v ")).count(),
        obj.lines().filter(|l| l.starts_with("f ")).count(),
        paths[0].display()
    );
}
