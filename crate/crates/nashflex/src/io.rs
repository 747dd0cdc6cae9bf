//! On-disk formats: field containers (raw little-endian `f64` payload plus a JSON
//! header), CSV slices and tables, OBJ meshes and schema-versioned JSON documents.

use crate::fields::{Field, FieldError, FieldKind, Grid, MapJet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const FIELD_SCHEMA: &str = "nashflex.field";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad field container: {0}")]
    Format(String),
    #[error("projection index {index} out of range for a map into R^{dim}")]
    BadProjection { index: usize, dim: usize },
    #[error("slice index {index} out of range for axis {axis} with {len} nodes")]
    BadSlice { axis: usize, index: usize, len: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Field container

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub schema: String,
    pub version: u32,
    pub grid: Grid,
    pub kind: FieldKind,
    pub components: usize,
    pub nodes: usize,
    /// Always `"f64le"`, node-major, components contiguous.
    pub dtype: String,
    /// File name of the payload, relative to the header.
    pub payload: String,
    pub payload_bytes: usize,
    pub sha256: String,
}

pub fn encode_field(field: &Field, payload_name: &str) -> (FieldHeader, Vec<u8>) {
    let bytes: Vec<u8> = field.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    let header = FieldHeader {
        schema: FIELD_SCHEMA.into(),
        version: SCHEMA_VERSION,
        grid: *field.grid(),
        kind: field.kind(),
        components: field.comps(),
        nodes: field.grid().len(),
        dtype: "f64le".into(),
        payload: payload_name.into(),
        payload_bytes: bytes.len(),
        sha256: sha256_hex(&bytes),
    };
    (header, bytes)
}

pub fn decode_field(header: &FieldHeader, bytes: &[u8]) -> Result<Field, IoError> {
    if header.schema != FIELD_SCHEMA || header.version != SCHEMA_VERSION {
        return Err(IoError::Format(format!("unsupported schema {} v{}", header.schema, header.version)));
    }
    if header.dtype != "f64le" {
        return Err(IoError::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let grid = Grid::new(header.grid.extent, header.grid.nodes, header.grid.periodic)?;
    let expected = grid.len() * header.kind.comps() * 8;
    if header.components != header.kind.comps() || header.nodes != grid.len() {
        return Err(IoError::Format("header shape is inconsistent with grid and kind".into()));
    }
    if bytes.len() != expected || header.payload_bytes != expected {
        return Err(IoError::Format(format!("payload has {} bytes, expected {expected}", bytes.len())));
    }
    if sha256_hex(bytes) != header.sha256 {
        return Err(IoError::Format("payload checksum mismatch".into()));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Field::from_data(grid, header.kind, data)?)
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns both paths (header first).
pub fn write_field(dir: &Path, stem: &str, field: &Field) -> Result<[PathBuf; 2], IoError> {
    let bin_name = format!("{stem}.bin");
    let (header, bytes) = encode_field(field, &bin_name);
    let bin = dir.join(&bin_name);
    std::fs::write(&bin, &bytes).map_err(io_err(&bin))?;
    let json = dir.join(format!("{stem}.json"));
    write_json(&json, &header)?;
    Ok([json, bin])
}

/// Reads a container from its header path.
pub fn read_field(header_path: &Path) -> Result<Field, IoError> {
    let header: FieldHeader = read_json(header_path)?;
    let bin = header_path.parent().unwrap_or(Path::new(".")).join(&header.payload);
    let bytes = std::fs::read(&bin).map_err(io_err(&bin))?;
    decode_field(&header, &bytes)
}

pub fn write_map(dir: &Path, stem: &str, u: &MapJet) -> Result<Vec<PathBuf>, IoError> {
    let mut out = write_field(dir, &format!("{stem}_value"), &u.value)?.to_vec();
    out.extend(write_field(dir, &format!("{stem}_jacobian"), &u.jacobian)?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON documents

/// Schema-tagged wrapper for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema: String,
    pub version: u32,
    pub report: T,
}

impl<T> Versioned<T> {
    pub fn new(schema: &str, report: T) -> Self {
        Versioned { schema: schema.into(), version: SCHEMA_VERSION, report }
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable report");
    v.push(b'\n');
    v
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    std::fs::write(path, to_json_bytes(value)).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|x| format!("{x:.9e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// One grid line of a field as CSV: the coordinate along `axis`, then every component.
pub fn csv_slice(field: &Field, axis: usize, index: usize) -> Result<String, IoError> {
    let grid = field.grid();
    let other = 1 - axis.min(1);
    let len = grid.nodes[other];
    if axis > 1 || index >= len {
        return Err(IoError::BadSlice { axis, index, len });
    }
    let mut s = String::from("coord");
    for c in 0..field.comps() {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for k in 0..grid.nodes[axis] {
        let idx = if axis == 0 { grid.index(k, index) } else { grid.index(index, k) };
        let _ = write!(s, "{:.9e}", grid.coord_of(idx)[axis]);
        for v in field.at(idx) {
            let _ = write!(s, ",{v:.9e}");
        }
        s.push('\n');
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Meshes

/// Triangulated quad mesh of the image of a map projected to three target coordinates.
/// Vertices follow the node order; periodic axes get wrap faces, so a doubly periodic
/// chart yields a closed surface.
pub fn obj_mesh(u: &Field, projection: [usize; 3]) -> Result<String, IoError> {
    let dim = match u.kind() {
        FieldKind::Map(m) => m,
        k => return Err(FieldError::KindMismatch { expected: "Map(m)".into(), found: k.name() }.into()),
    };
    if let Some(&index) = projection.iter().find(|&&p| p >= dim) {
        return Err(IoError::BadProjection { index, dim });
    }
    let grid = u.grid();
    let [nx, ny] = grid.nodes;
    let mut s = format!("# nashflex mesh {nx}x{ny}, projection {projection:?}\n");
    for idx in 0..grid.len() {
        let v = u.at(idx);
        let _ = writeln!(s, "v {:.12e} {:.12e} {:.12e}", v[projection[0]], v[projection[1]], v[projection[2]]);
    }
    let cells_x = if grid.periodic[0] { nx } else { nx - 1 };
    let cells_y = if grid.periodic[1] { ny } else { ny - 1 };
    for j in 0..cells_y {
        for i in 0..cells_x {
            let (i1, j1) = ((i + 1) % nx, (j + 1) % ny);
            // OBJ indices are 1-based
            let a = grid.index(i, j) + 1;
            let b = grid.index(i1, j) + 1;
            let c = grid.index(i1, j1) + 1;
            let d = grid.index(i, j1) + 1;
            let _ = writeln!(s, "f {a} {b} {c}");
            let _ = writeln!(s, "f {a} {c} {d}");
        }
    }
    Ok(s)
}

pub fn write_obj(path: &Path, u: &Field, projection: [usize; 3]) -> Result<(), IoError> {
    let text = obj_mesh(u, projection)?;
    std::fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::flat_chart;

    fn sample_field() -> Field {
        let grid = Grid::new([1.0, 2.0], [17, 20], [false, true]).unwrap();
        Field::from_fn(grid, FieldKind::Sym2, |x, o| {
            o[0] = 1.0 + x[0];
            o[1] = (x[1] * 0.7).sin() / 3.0;
            o[2] = f64::EPSILON * x[0] - 1e300 * x[1];
        })
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let f = sample_field();
        let dir = tempfile::tempdir().unwrap();
        let [header, bin] = write_field(dir.path(), "h", &f).unwrap();
        assert!(bin.exists());
        let back = read_field(&header).unwrap();
        assert_eq!(back, f);
        let (h, bytes) = encode_field(&f, "x.bin");
        assert_eq!(h.payload_bytes, 17 * 20 * 3 * 8);
        assert_eq!(decode_field(&h, &bytes).unwrap(), f);
    }

    #[test]
    fn corrupted_container_is_rejected() {
        let f = sample_field();
        let (h, mut bytes) = encode_field(&f, "x.bin");
        bytes[5] ^= 1;
        assert!(matches!(decode_field(&h, &bytes), Err(IoError::Format(_))));
        bytes.pop();
        assert!(matches!(decode_field(&h, &bytes), Err(IoError::Format(_))));
        let mut h2 = h.clone();
        h2.kind = FieldKind::Scalar;
        let (_, good) = encode_field(&f, "x.bin");
        assert!(decode_field(&h2, &good).is_err());
        let text = serde_json::to_string(&h).unwrap().replace("\"dtype\"", "\"extra\":1,\"dtype\"");
        assert!(serde_json::from_str::<FieldHeader>(&text).is_err());
    }

    #[test]
    fn csv_slice_shape() {
        let f = sample_field();
        let s = csv_slice(&f, 0, 3).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "coord,c0,c1,c2");
        assert_eq!(lines.len(), 1 + 17);
        assert_eq!(lines[1].split(',').count(), 4);
        assert_eq!(csv_slice(&f, 1, 0).unwrap().lines().count(), 1 + 20);
        assert!(matches!(csv_slice(&f, 0, 20), Err(IoError::BadSlice { .. })));
    }

    #[test]
    fn flat_inclusion_mesh_is_planar() {
        let grid = Grid::square(1.0, 16, false).unwrap();
        let u = flat_chart(grid);
        let obj = obj_mesh(&u.value, [0, 1, 2]).unwrap();
        let verts: Vec<Vec<f64>> = obj
            .lines()
            .filter(|l| l.starts_with("v "))
            .map(|l| l[2..].split_whitespace().map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(verts.len(), 256);
        assert!(verts.iter().all(|v| v[2] == 0.0));
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 2 * 15 * 15);
        assert!(matches!(obj_mesh(&u.value, [0, 1, 8]), Err(IoError::BadProjection { index: 8, dim: 8 })));
        assert!(obj_mesh(&u.jacobian, [0, 1, 2]).is_err());
    }

    #[test]
    fn periodic_mesh_is_closed() {
        let grid = Grid::square(std::f64::consts::TAU, 16, true).unwrap();
        let (u, _) = crate::iterate::clifford_torus(grid, 8, 1.0);
        let obj = obj_mesh(&u.value, [0, 1, 2]).unwrap();
        let faces: Vec<[usize; 3]> = obj
            .lines()
            .filter(|l| l.starts_with("f "))
            .map(|l| {
                let v: Vec<usize> = l[2..].split_whitespace().map(|x| x.parse().unwrap()).collect();
                [v[0], v[1], v[2]]
            })
            .collect();
        assert_eq!(faces.len(), 2 * 16 * 16);
        // closed surface: every undirected edge is shared by exactly two triangles
        let mut edges = std::collections::HashMap::new();
        for f in &faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
        assert_eq!(256 + faces.len(), edges.len(), "Euler characteristic of the torus");
    }

    #[test]
    fn tables_and_versioned_json() {
        let empty = Versioned::new("nashflex.test", Table::new(&["q", "x"]));
        let text = String::from_utf8(to_json_bytes(&empty)).unwrap();
        let back: Versioned<Table> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, empty);
        assert_eq!(empty.report.to_csv(), "q,x\n");
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![1.0, 0.25]);
        assert_eq!(t.to_csv(), "a,b\n1.000000000e0,2.500000000e-1\n");
    }
}
