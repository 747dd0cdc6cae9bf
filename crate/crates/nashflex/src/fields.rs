//! Discrete charts, grid-sampled tensor fields, finite differences and
//! discrete C^k / Hölder norms.
//!
//! Nodes are stored row-major with the first axis fastest: node `(i, j)`
//! lives at index `j * nx + i`. Every field is node-major, so the components
//! of one node are contiguous.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chart dimension.
pub const N: usize = 2;
/// Number of independent metric components, `n(n+1)/2`.
pub const NSTAR: usize = 3;
/// Target dimension `n + 2 n*` used by the shipped pipelines.
pub const M: usize = N + 2 * NSTAR;
/// Smallest admissible number of nodes per axis.
pub const MIN_RESOLUTION: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("grid resolution {0} below the minimum of {MIN_RESOLUTION} nodes per axis")]
    ResolutionTooLow(usize),
    #[error("grid extent must be positive and finite, got {0}")]
    BadExtent(f64),
    #[error("field kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("value array has length {found}, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub extent: [f64; 2],
    pub nodes: [usize; 2],
    pub periodic: [bool; 2],
}

impl Grid {
    pub fn new(extent: [f64; 2], nodes: [usize; 2], periodic: [bool; 2]) -> Result<Self, FieldError> {
        for &l in &extent {
            if !(l.is_finite() && l > 0.0) {
                return Err(FieldError::BadExtent(l));
            }
        }
        for &n in &nodes {
            if n < MIN_RESOLUTION {
                return Err(FieldError::ResolutionTooLow(n));
            }
        }
        Ok(Grid { extent, nodes, periodic })
    }

    /// Square grid with the same resolution and periodicity on both axes.
    pub fn square(side: f64, resolution: usize, periodic: bool) -> Result<Self, FieldError> {
        Grid::new([side; 2], [resolution; 2], [periodic; 2])
    }

    pub fn spacing_axis(&self, axis: usize) -> f64 {
        if self.periodic[axis] {
            self.extent[axis] / self.nodes[axis] as f64
        } else {
            self.extent[axis] / (self.nodes[axis] - 1) as f64
        }
    }

    pub fn spacing(&self) -> [f64; 2] {
        [self.spacing_axis(0), self.spacing_axis(1)]
    }

    /// Largest spacing; the `h` used in tolerances and resolution guards.
    pub fn h(&self) -> f64 {
        let s = self.spacing();
        s[0].max(s[1])
    }

    pub fn len(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nodes[0] + i
    }

    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nodes[0], idx / self.nodes[0])
    }

    #[inline]
    pub fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        let s = self.spacing();
        [i as f64 * s[0], j as f64 * s[1]]
    }

    #[inline]
    pub fn coord_of(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.ij(idx);
        self.coord(i, j)
    }
}

/// What the components of a node mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dim", rename_all = "snake_case")]
pub enum FieldKind {
    Scalar,
    Vector(usize),
    Map(usize),
    /// Symmetric 2x2 matrix stored as `(xx, xy, yy)`.
    Sym2,
    /// First derivatives of a `c`-component field, layout `[axis][c]`.
    Gradient(usize),
    /// Second derivatives of a `c`-component field, layout `[xx, xy, yy][c]`.
    Hessian(usize),
}

impl FieldKind {
    pub fn comps(&self) -> usize {
        match *self {
            FieldKind::Scalar => 1,
            FieldKind::Vector(d) | FieldKind::Map(d) => d,
            FieldKind::Sym2 => 3,
            FieldKind::Gradient(c) => 2 * c,
            FieldKind::Hessian(c) => 3 * c,
        }
    }

    pub fn name(&self) -> String {
        format!("{self:?}")
    }
}

/// Pointwise norm of one node value of a base field: Euclidean, except that
/// `Sym2` uses the Frobenius norm.
#[inline]
pub fn value_norm(kind: FieldKind, v: &[f64]) -> f64 {
    match kind {
        FieldKind::Sym2 => (v[0] * v[0] + 2.0 * v[1] * v[1] + v[2] * v[2]).sqrt(),
        _ => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    kind: FieldKind,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        Field { grid, kind, data: vec![0.0; grid.len() * kind.comps()] }
    }

    pub fn from_data(grid: Grid, kind: FieldKind, data: Vec<f64>) -> Result<Self, FieldError> {
        let expected = grid.len() * kind.comps();
        if data.len() != expected {
            return Err(FieldError::ShapeMismatch { expected, found: data.len() });
        }
        Ok(Field { grid, kind, data })
    }

    /// Sample a closure at every node; the closure fills the node's components.
    pub fn from_fn(grid: Grid, kind: FieldKind, mut f: impl FnMut([f64; 2], &mut [f64])) -> Self {
        let c = kind.comps();
        let mut out = Field::zeros(grid, kind);
        for (idx, chunk) in out.data.chunks_mut(c).enumerate() {
            f(grid.coord_of(idx), chunk);
        }
        out
    }

    pub fn scalar_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        Field::from_fn(grid, FieldKind::Scalar, |x, o| o[0] = f(x))
    }

    pub fn constant(grid: Grid, kind: FieldKind, value: &[f64]) -> Self {
        assert_eq!(value.len(), kind.comps());
        Field::from_fn(grid, kind, |_, o| o.copy_from_slice(value))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn comps(&self) -> usize {
        self.kind.comps()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, idx: usize) -> &[f64] {
        let c = self.comps();
        &self.data[idx * c..(idx + 1) * c]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: usize) -> &mut [f64] {
        let c = self.comps();
        &mut self.data[idx * c..(idx + 1) * c]
    }

    /// Scalar value at a node (first component).
    #[inline]
    pub fn s(&self, idx: usize) -> f64 {
        self.data[idx * self.comps()]
    }

    #[inline]
    pub fn sym(&self, idx: usize) -> Sym2 {
        let v = self.at(idx);
        Sym2::new(v[0], v[1], v[2])
    }

    pub fn set_sym(&mut self, idx: usize, s: Sym2) {
        self.at_mut(idx).copy_from_slice(&[s.xx, s.xy, s.yy]);
    }

    pub fn expect_kind(&self, kind: FieldKind) -> Result<(), FieldError> {
        if self.kind != kind {
            return Err(FieldError::KindMismatch { expected: kind.name(), found: self.kind.name() });
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Field) -> Result<(), FieldError> {
        if self.grid != other.grid {
            return Err(FieldError::GridMismatch);
        }
        if self.kind != other.kind {
            return Err(FieldError::KindMismatch { expected: self.kind.name(), found: other.kind.name() });
        }
        Ok(())
    }

    /// Reinterpret the component layout without touching values.
    pub fn with_kind(mut self, kind: FieldKind) -> Result<Self, FieldError> {
        if kind.comps() != self.comps() {
            return Err(FieldError::KindMismatch { expected: self.kind.name(), found: kind.name() });
        }
        self.kind = kind;
        Ok(self)
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid, kind: self.kind, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// `alpha * self + beta * other`.
    pub fn lin_comb(&self, alpha: f64, other: &Field, beta: f64) -> Result<Field, FieldError> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| alpha * a + beta * b).collect();
        Ok(Field { grid: self.grid, kind: self.kind, data })
    }

    pub fn add(&self, other: &Field) -> Result<Field, FieldError> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Field) -> Result<Field, FieldError> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, s: f64) -> Field {
        self.map_values(|x| s * x)
    }

    /// Nodewise product with a scalar field.
    pub fn mul_scalar_field(&self, s: &Field) -> Result<Field, FieldError> {
        s.expect_kind(FieldKind::Scalar)?;
        if s.grid != self.grid {
            return Err(FieldError::GridMismatch);
        }
        let c = self.comps();
        let mut out = self.clone();
        for (idx, chunk) in out.data.chunks_mut(c).enumerate() {
            let w = s.data[idx];
            chunk.iter_mut().for_each(|x| *x *= w);
        }
        Ok(out)
    }

    /// Extract component `c` as a scalar field.
    pub fn component(&self, c: usize) -> Field {
        let k = self.comps();
        let data = (0..self.grid.len()).map(|i| self.data[i * k + c]).collect();
        Field { grid: self.grid, kind: FieldKind::Scalar, data }
    }

    /// Sup over nodes of the pointwise value norm.
    pub fn sup_norm(&self) -> f64 {
        let base = self.kind;
        self.data.chunks(self.comps()).map(|v| value_norm(base, v)).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Field) -> Result<f64, FieldError> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Symmetric 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 { xx: 0.0, xy: 0.0, yy: 0.0 };
    pub const ID: Sym2 = Sym2 { xx: 1.0, xy: 0.0, yy: 1.0 };

    pub const fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Sym2 { xx, xy, yy }
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Sym2::new(a, 0.0, b)
    }

    pub fn outer(v: [f64; 2]) -> Self {
        Sym2::new(v[0] * v[0], v[0] * v[1], v[1] * v[1])
    }

    /// `sym(a ⊗ b) = (a bᵀ + b aᵀ) / 2`.
    pub fn sym_outer(a: [f64; 2], b: [f64; 2]) -> Self {
        Sym2::new(a[0] * b[0], 0.5 * (a[0] * b[1] + a[1] * b[0]), a[1] * b[1])
    }

    pub fn add(self, o: Sym2) -> Sym2 {
        Sym2::new(self.xx + o.xx, self.xy + o.xy, self.yy + o.yy)
    }

    pub fn sub(self, o: Sym2) -> Sym2 {
        Sym2::new(self.xx - o.xx, self.xy - o.xy, self.yy - o.yy)
    }

    pub fn scale(self, s: f64) -> Sym2 {
        Sym2::new(s * self.xx, s * self.xy, s * self.yy)
    }

    pub fn axpy(&mut self, s: f64, o: Sym2) {
        self.xx += s * o.xx;
        self.xy += s * o.xy;
        self.yy += s * o.yy;
    }

    pub fn frob(self) -> f64 {
        (self.xx * self.xx + 2.0 * self.xy * self.xy + self.yy * self.yy).sqrt()
    }

    pub fn trace(self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(self) -> (f64, f64) {
        let m = 0.5 * (self.xx + self.yy);
        let d = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        (m - d, m + d)
    }

    pub fn inverse(self) -> Option<Sym2> {
        let d = self.det();
        if d.abs() < 1e-300 {
            return None;
        }
        Some(Sym2::new(self.yy / d, -self.xy / d, self.xx / d))
    }

    pub fn apply(self, v: [f64; 2]) -> [f64; 2] {
        [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
    }

    pub fn quad(self, v: [f64; 2]) -> f64 {
        let w = self.apply(v);
        w[0] * v[0] + w[1] * v[1]
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.xx, self.xy, self.yy]
    }
}

fn axis_stride(grid: &Grid, axis: usize) -> usize {
    if axis == 0 {
        1
    } else {
        grid.nodes[0]
    }
}

/// First derivative of every component along one axis.
fn d1_axis(grid: &Grid, data: &[f64], comps: usize, axis: usize) -> Vec<f64> {
    let n = grid.nodes[axis];
    let h = grid.spacing_axis(axis);
    let stride = axis_stride(grid, axis) * comps;
    let periodic = grid.periodic[axis];
    let inv2h = 0.5 / h;
    let mut out = vec![0.0; data.len()];
    for idx in 0..grid.len() {
        let (i, j) = grid.ij(idx);
        let p = if axis == 0 { i } else { j };
        let base = idx * comps;
        for c in 0..comps {
            let at = |off: isize| -> f64 { data[(base as isize + off * stride as isize) as usize + c] };
            let v = if periodic {
                let fwd = if p + 1 == n { -(n as isize - 1) } else { 1 };
                let bwd = if p == 0 { n as isize - 1 } else { -1 };
                (at(fwd) - at(bwd)) * inv2h
            } else if p == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) * inv2h
            } else if p == n - 1 {
                (3.0 * at(0) - 4.0 * at(-1) + at(-2)) * inv2h
            } else {
                (at(1) - at(-1)) * inv2h
            };
            out[base + c] = v;
        }
    }
    out
}

/// Pure second derivative of every component along one axis.
fn d2_axis(grid: &Grid, data: &[f64], comps: usize, axis: usize) -> Vec<f64> {
    let n = grid.nodes[axis];
    let h = grid.spacing_axis(axis);
    let stride = axis_stride(grid, axis) * comps;
    let periodic = grid.periodic[axis];
    let inv_h2 = 1.0 / (h * h);
    let mut out = vec![0.0; data.len()];
    for idx in 0..grid.len() {
        let (i, j) = grid.ij(idx);
        let p = if axis == 0 { i } else { j };
        let base = idx * comps;
        for c in 0..comps {
            let at = |off: isize| -> f64 { data[(base as isize + off * stride as isize) as usize + c] };
            let v = if periodic {
                let fwd = if p + 1 == n { -(n as isize - 1) } else { 1 };
                let bwd = if p == 0 { n as isize - 1 } else { -1 };
                (at(fwd) - 2.0 * at(0) + at(bwd)) * inv_h2
            } else if p == 0 {
                (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) * inv_h2
            } else if p == n - 1 {
                (2.0 * at(0) - 5.0 * at(-1) + 4.0 * at(-2) - at(-3)) * inv_h2
            } else {
                (at(1) - 2.0 * at(0) + at(-1)) * inv_h2
            };
            out[base + c] = v;
        }
    }
    out
}

fn interleave(grid: &Grid, comps: usize, blocks: &[Vec<f64>]) -> Vec<f64> {
    let nb = blocks.len();
    let mut out = vec![0.0; grid.len() * comps * nb];
    for idx in 0..grid.len() {
        for (b, block) in blocks.iter().enumerate() {
            let dst = idx * comps * nb + b * comps;
            out[dst..dst + comps].copy_from_slice(&block[idx * comps..(idx + 1) * comps]);
        }
    }
    out
}

/// Gradient of any field: output kind `Gradient(c)`, layout `[axis][c]`.
pub fn gradient(f: &Field) -> Field {
    let c = f.comps();
    let g = f.grid;
    let dx = d1_axis(&g, &f.data, c, 0);
    let dy = d1_axis(&g, &f.data, c, 1);
    Field { grid: g, kind: FieldKind::Gradient(c), data: interleave(&g, c, &[dx, dy]) }
}

/// Hessian of any field: output kind `Hessian(c)`, layout `[xx, xy, yy][c]`.
pub fn hessian(f: &Field) -> Field {
    let c = f.comps();
    let g = f.grid;
    let dxx = d2_axis(&g, &f.data, c, 0);
    let dyy = d2_axis(&g, &f.data, c, 1);
    let dx = d1_axis(&g, &f.data, c, 0);
    let dxy = d1_axis(&g, &dx, c, 1);
    Field { grid: g, kind: FieldKind::Hessian(c), data: interleave(&g, c, &[dxx, dxy, dyy]) }
}

/// Discrete derivative of order 1 (gradient) or 2 (Hessian).
pub fn differentiate(f: &Field, order: usize) -> Result<Field, FieldError> {
    match order {
        1 => Ok(gradient(f)),
        2 => Ok(hessian(f)),
        _ => Err(FieldError::InvalidParameter(format!("derivative order {order} not in {{1, 2}}"))),
    }
}

/// Derivative block `b` of a `Gradient(c)` / `Hessian(c)` field as a base-kind field.
pub fn derivative_block(d: &Field, block: usize, base: FieldKind) -> Field {
    let c = base.comps();
    let total = d.comps();
    let data = (0..d.grid.len())
        .flat_map(|i| d.data[i * total + block * c..i * total + (block + 1) * c].to_vec())
        .collect();
    Field { grid: d.grid, kind: base, data }
}

/// Pullback metric `∇uᵀ∇u` from a `Gradient(m)` field.
pub fn pullback_of_gradient(jac: &Field) -> Result<Field, FieldError> {
    let m = match jac.kind {
        FieldKind::Gradient(m) => m,
        k => return Err(FieldError::KindMismatch { expected: "Gradient(m)".into(), found: k.name() }),
    };
    if m < 2 {
        return Err(FieldError::InvalidParameter("pullback needs at least 2 target dimensions".into()));
    }
    let mut out = Field::zeros(jac.grid, FieldKind::Sym2);
    for idx in 0..jac.grid.len() {
        let v = jac.at(idx);
        let (a, b) = v.split_at(m);
        let s = Sym2::new(dot(a, a), dot(a, b), dot(b, b));
        out.set_sym(idx, s);
    }
    Ok(out)
}

/// Pullback metric of a map field using finite differences.
pub fn pullback_metric(u: &Field) -> Result<Field, FieldError> {
    match u.kind {
        FieldKind::Map(_) | FieldKind::Vector(_) => pullback_of_gradient(&gradient(u).with_kind(FieldKind::Gradient(u.comps()))?),
        k => Err(FieldError::KindMismatch { expected: "Map(m)".into(), found: k.name() }),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn block_sup(d: &Field, block: usize, base: FieldKind) -> f64 {
    let c = base.comps();
    let total = d.comps();
    (0..d.grid.len())
        .map(|i| value_norm(base, &d.data[i * total + block * c..i * total + (block + 1) * c]))
        .fold(0.0, f64::max)
}

/// Cumulative discrete norm `‖f‖_k = Σ_{j≤k} max_{|β|=j} ‖∂^β f‖_0`, `k ≤ 2`.
pub fn ck_norm(f: &Field, k: usize) -> Result<f64, FieldError> {
    if k > 2 {
        return Err(FieldError::InvalidParameter(format!("C^k norm only for k <= 2, got {k}")));
    }
    let mut total = f.sup_norm();
    if k >= 1 {
        let g = gradient(f);
        total += (0..2).map(|b| block_sup(&g, b, f.kind)).fold(0.0, f64::max);
    }
    if k == 2 {
        let h = hessian(f);
        total += (0..3).map(|b| block_sup(&h, b, f.kind)).fold(0.0, f64::max);
    }
    Ok(total)
}

/// `[f]_1 ≈ max_{|β|=1} ‖∂^β f‖_0`.
pub fn c1_seminorm(f: &Field) -> f64 {
    let g = gradient(f);
    (0..2).map(|b| block_sup(&g, b, f.kind)).fold(0.0, f64::max)
}

/// Dyadic ladder of node separations `2, 4, 8, …` below half the shorter axis.
pub fn default_ladder(grid: &Grid) -> Vec<usize> {
    let limit = grid.nodes[0].min(grid.nodes[1]) / 2;
    let mut out = Vec::new();
    let mut s = 2;
    while s <= limit {
        out.push(s);
        s *= 2;
    }
    out
}

/// One sampled pair family: separation in nodes along the axes and diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulusSample {
    pub separation: usize,
    pub distance: f64,
    pub max_diff: f64,
}

fn shifted(grid: &Grid, i: usize, j: usize, di: isize, dj: isize) -> Option<usize> {
    let mut p = [i as isize + di, j as isize + dj];
    for a in 0..2 {
        let n = grid.nodes[a] as isize;
        if grid.periodic[a] {
            p[a] = p[a].rem_euclid(n);
        } else if p[a] < 0 || p[a] >= n {
            return None;
        }
    }
    Some(grid.index(p[0] as usize, p[1] as usize))
}

/// Largest pointwise difference over node pairs at each ladder separation,
/// one sample per direction family (two axes, two diagonals).
pub fn modulus_samples(f: &Field, ladder: &[usize]) -> Vec<ModulusSample> {
    let grid = f.grid;
    let hs = grid.spacing();
    let mut out = Vec::new();
    let kind = f.kind;
    let c = f.comps();
    let mut diff = vec![0.0; c];
    for &s in ladder {
        let si = s as isize;
        let dirs: [((isize, isize), f64); 4] = [
            ((si, 0), s as f64 * hs[0]),
            ((0, si), s as f64 * hs[1]),
            ((si, si), s as f64 * hs[0].hypot(hs[1])),
            ((si, -si), s as f64 * hs[0].hypot(hs[1])),
        ];
        for ((di, dj), dist) in dirs {
            let mut best: f64 = 0.0;
            let mut any = false;
            for idx in 0..grid.len() {
                let (i, j) = grid.ij(idx);
                if let Some(o) = shifted(&grid, i, j, di, dj) {
                    any = true;
                    let a = f.at(idx);
                    let b = f.at(o);
                    for k in 0..c {
                        diff[k] = a[k] - b[k];
                    }
                    best = best.max(value_norm(kind, &diff));
                }
            }
            if any {
                out.push(ModulusSample { separation: s, distance: dist, max_diff: best });
            }
        }
    }
    out
}

/// Sampled Hölder seminorm `[f]_θ` over the dyadic pair ladder.
pub fn holder_seminorm(f: &Field, theta: f64, ladder: &[usize]) -> Result<f64, FieldError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(FieldError::InvalidParameter(format!("Hölder exponent {theta} not in (0, 1]")));
    }
    if ladder.iter().any(|&s| s < 2) {
        return Err(FieldError::InvalidParameter("ladder separations must be at least 2 nodes".into()));
    }
    Ok(modulus_samples(f, ladder)
        .iter()
        .map(|m| m.max_diff / m.distance.powf(theta))
        .fold(0.0, f64::max))
}

/// `‖f‖_θ = ‖f‖_0 + [f]_θ` on the default ladder.
pub fn holder_norm(f: &Field, theta: f64) -> Result<f64, FieldError> {
    Ok(f.sup_norm() + holder_seminorm(f, theta, &default_ladder(f.grid()))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub theta: f64,
    pub holder: f64,
    pub radii: Vec<f64>,
}

pub fn norm_report(f: &Field, theta: f64, ladder: &[usize]) -> Result<NormReport, FieldError> {
    let h = f.grid.h();
    Ok(NormReport {
        c0: ck_norm(f, 0)?,
        c1: ck_norm(f, 1)?,
        c2: ck_norm(f, 2)?,
        theta,
        holder: holder_seminorm(f, theta, ladder)?,
        radii: ladder.iter().map(|&s| s as f64 * h).collect(),
    })
}

/// A map sampled on a grid together with its Jacobian.
///
/// Maps produced by corrugation carry their chain-rule Jacobian so that
/// oscillatory factors are differentiated exactly; maps given only by samples
/// get a finite-difference Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct MapJet {
    pub value: Field,
    pub jacobian: Field,
}

impl MapJet {
    pub fn from_samples(value: Field) -> Result<Self, FieldError> {
        let m = match value.kind {
            FieldKind::Map(m) => m,
            k => return Err(FieldError::KindMismatch { expected: "Map(m)".into(), found: k.name() }),
        };
        let jacobian = gradient(&value).with_kind(FieldKind::Gradient(m))?;
        Ok(MapJet { value, jacobian })
    }

    pub fn new(value: Field, jacobian: Field) -> Result<Self, FieldError> {
        let m = match value.kind {
            FieldKind::Map(m) => m,
            k => return Err(FieldError::KindMismatch { expected: "Map(m)".into(), found: k.name() }),
        };
        jacobian.expect_kind(FieldKind::Gradient(m))?;
        if jacobian.grid != value.grid {
            return Err(FieldError::GridMismatch);
        }
        Ok(MapJet { value, jacobian })
    }

    /// Map and Jacobian from closed forms.
    pub fn from_fn(
        grid: Grid,
        m: usize,
        f: impl Fn([f64; 2], &mut [f64]),
        df: impl Fn([f64; 2], &mut [f64]),
    ) -> Self {
        MapJet { value: Field::from_fn(grid, FieldKind::Map(m), f), jacobian: Field::from_fn(grid, FieldKind::Gradient(m), df) }
    }

    pub fn grid(&self) -> &Grid {
        &self.value.grid
    }

    pub fn dim(&self) -> usize {
        self.value.comps()
    }

    pub fn metric(&self) -> Field {
        pullback_of_gradient(&self.jacobian).expect("jacobian kind checked at construction")
    }

    /// Jacobian column `∂_a u` at a node.
    #[inline]
    pub fn column(&self, idx: usize, a: usize) -> &[f64] {
        let m = self.dim();
        &self.jacobian.at(idx)[a * m..(a + 1) * m]
    }

    /// Discrete second derivatives from the Jacobian, kind `Hessian(m)`.
    pub fn second_derivatives(&self) -> Field {
        let m = self.dim();
        let g = self.value.grid;
        let dj = gradient(&self.jacobian);
        // dj layout: [axis b][axis a][m] = ∂_b ∂_a u.
        let mut out = Field::zeros(g, FieldKind::Hessian(m));
        for idx in 0..g.len() {
            let src = dj.at(idx);
            let dst = out.at_mut(idx);
            for c in 0..m {
                let d_aa = src[c];
                let d_ab = src[m + c];
                let d_ba = src[2 * m + c];
                let d_bb = src[3 * m + c];
                dst[c] = d_aa;
                dst[m + c] = 0.5 * (d_ab + d_ba);
                dst[2 * m + c] = d_bb;
            }
        }
        out
    }

    /// Cumulative norms of the map with derivatives read from the Jacobian.
    pub fn ck_norm(&self, k: usize) -> f64 {
        let base = self.value.kind;
        let mut total = self.value.sup_norm();
        if k >= 1 {
            total += (0..2).map(|b| block_sup(&self.jacobian, b, base)).fold(0.0, f64::max);
        }
        if k >= 2 {
            let h = self.second_derivatives();
            total += (0..3).map(|b| block_sup(&h, b, base)).fold(0.0, f64::max);
        }
        total
    }

    pub fn sub(&self, other: &MapJet) -> Result<MapJet, FieldError> {
        Ok(MapJet { value: self.value.sub(&other.value)?, jacobian: self.jacobian.sub(&other.jacobian)? })
    }
}

/// Squared 1-D distance transform of sampled heights `f` (infinite where absent).
fn edt_line(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * h;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = p as f64 * h;
                    let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * h;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - v[k] as f64 * h;
        *o = d * d + f[v[k]];
    }
}

fn edt_axis(data: &mut [f64], grid: &Grid, axis: usize) {
    let (nx, ny) = (grid.nodes[0], grid.nodes[1]);
    let (len, lines) = if axis == 0 { (nx, ny) } else { (ny, nx) };
    let h = grid.spacing_axis(axis);
    let periodic = grid.periodic[axis];
    let reps = if periodic { 3 } else { 1 };
    let mut line = vec![0.0; len * reps];
    let mut res = vec![0.0; len * reps];
    for l in 0..lines {
        let at = |t: usize| if axis == 0 { grid.index(t, l) } else { grid.index(l, t) };
        for t in 0..len * reps {
            line[t] = data[at(t % len)];
        }
        edt_line(&line, h, &mut res);
        let off = if periodic { len } else { 0 };
        for t in 0..len {
            data[at(t)] = res[off + t];
        }
    }
}

/// Euclidean distance from every node to the nearest node of `mask`, infinite if the mask is empty.
pub fn distance_to_set(grid: &Grid, mask: &[bool]) -> Field {
    let mut d: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    edt_axis(&mut d, grid, 0);
    edt_axis(&mut d, grid, 1);
    d.iter_mut().for_each(|x| *x = x.sqrt());
    Field { grid: *grid, kind: FieldKind::Scalar, data: d }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(n: usize) -> Grid {
        Grid::square(1.0, n, false).unwrap()
    }

    #[test]
    fn grid_spacing_definitions() {
        let g = unit_grid(128);
        assert!((g.h() - 1.0 / 127.0).abs() < 1e-15);
        let p = Grid::square(2.0 * std::f64::consts::PI, 128, true).unwrap();
        assert!((p.h() - 2.0 * std::f64::consts::PI / 128.0).abs() < 1e-15);
        assert_eq!(Grid::square(1.0, 8, false), Err(FieldError::ResolutionTooLow(8)));
        assert!(matches!(Grid::new([0.0, 1.0], [32, 32], [false; 2]), Err(FieldError::BadExtent(_))));
    }

    #[test]
    fn derivative_of_constant_and_affine() {
        let g = unit_grid(32);
        let c = Field::scalar_fn(g, |_| 3.5);
        assert!(gradient(&c).sup_norm() < 1e-12);
        let a = Field::from_fn(g, FieldKind::Map(2), |x, o| {
            o[0] = 2.0 * x[0] - x[1];
            o[1] = 0.5 * x[0] + 3.0 * x[1];
        });
        let d = gradient(&a);
        for idx in 0..g.len() {
            let v = d.at(idx);
            let expect = [2.0, 0.5, -1.0, 3.0];
            for k in 0..4 {
                assert!((v[k] - expect[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sine_derivative_second_order() {
        let g = unit_grid(128);
        let f = Field::scalar_fn(g, |x| x[0].sin());
        let d = gradient(&f);
        let exact = Field::scalar_fn(g, |x| x[0].cos());
        let err = derivative_block(&d, 0, FieldKind::Scalar).max_abs_diff(&exact).unwrap();
        assert!(err <= 10.0 * g.h() * g.h(), "err {err}");
    }

    #[test]
    fn pullback_examples() {
        let g = unit_grid(64);
        let inc = Field::from_fn(g, FieldKind::Map(M), |x, o| {
            o[0] = x[0];
            o[1] = x[1];
        });
        let met = pullback_metric(&inc).unwrap();
        for idx in 0..g.len() {
            assert!(met.sym(idx).sub(Sym2::ID).frob() < 1e-12);
        }
        let scaled = inc.scale(1.7);
        let met = pullback_metric(&scaled).unwrap();
        assert!(met.sym(7).sub(Sym2::ID.scale(1.7 * 1.7)).frob() < 1e-12);
    }

    #[test]
    fn corrugated_graph_pullback() {
        let g = Grid::square(1.0, 256, false).unwrap();
        let eps = 0.1;
        let u = Field::from_fn(g, FieldKind::Map(3), |x, o| {
            o[0] = x[0];
            o[1] = x[1];
            o[2] = eps * (x[0] / eps).sin();
        });
        let met = pullback_metric(&u).unwrap();
        let mut worst: f64 = 0.0;
        for idx in 0..g.len() {
            let x = g.coord_of(idx);
            let c = (x[0] / eps).cos();
            worst = worst.max(met.sym(idx).sub(Sym2::diag(1.0 + c * c, 1.0)).frob());
        }
        let h = g.h();
        assert!(worst < 2.0 * h * h / (eps * eps), "worst {worst}");
    }

    #[test]
    fn ck_norm_examples() {
        let g = unit_grid(64);
        let c = Field::scalar_fn(g, |_| -2.0);
        assert!((ck_norm(&c, 0).unwrap() - 2.0).abs() < 1e-14);
        assert!((ck_norm(&c, 1).unwrap() - 2.0).abs() < 1e-12);
        let lin = Field::scalar_fn(g, |x| x[0]);
        assert!((ck_norm(&lin, 1).unwrap() - 2.0).abs() < 1e-10);
        let g = unit_grid(512);
        let s = Field::scalar_fn(g, |x| (10.0 * x[0]).sin());
        let n2 = ck_norm(&s, 2).unwrap();
        assert!((n2 - 111.0).abs() / 111.0 < 0.02, "{n2}");
        assert!(ck_norm(&s, 3).is_err());
    }

    #[test]
    fn holder_examples() {
        let g = unit_grid(64);
        let ladder = default_ladder(&g);
        let c = Field::scalar_fn(g, |_| 1.0);
        assert_eq!(holder_seminorm(&c, 0.5, &ladder).unwrap(), 0.0);
        let lin = Field::scalar_fn(g, |x| x[0]);
        let v = holder_seminorm(&lin, 1.0, &ladder).unwrap();
        assert!((v - 1.0).abs() < 0.01, "{v}");
        let root = Field::scalar_fn(g, |x| x[0].sqrt());
        let v = holder_seminorm(&root, 0.5, &ladder).unwrap();
        // Brute force over all pairs on a coarse grid for comparison.
        let coarse = Grid::new([1.0, 1.0], [33, 16], [false; 2]).unwrap();
        let mut brute: f64 = 0.0;
        let hs = coarse.spacing();
        for i in 0..33 {
            for k in (i + 1)..33 {
                let (a, b) = (i as f64 * hs[0], k as f64 * hs[0]);
                brute = brute.max((b.sqrt() - a.sqrt()).abs() / (b - a).sqrt());
            }
        }
        assert!((v - brute).abs() / brute < 0.05, "{v} vs {brute}");
        assert!(holder_seminorm(&root, 0.0, &ladder).is_err());
    }

    #[test]
    fn mapjet_norms_match_samples_for_polynomials() {
        let g = unit_grid(64);
        let jet = MapJet::from_fn(
            g,
            3,
            |x, o| {
                o[0] = x[0];
                o[1] = x[1];
                o[2] = x[0] * x[0];
            },
            |x, o| {
                o.fill(0.0);
                o[0] = 1.0;
                o[2] = 2.0 * x[0];
                o[3 + 1] = 1.0;
            },
        );
        let fd = MapJet::from_samples(jet.value.clone()).unwrap();
        assert!(jet.jacobian.max_abs_diff(&fd.jacobian).unwrap() < 1e-10);
        let h = jet.second_derivatives();
        assert!((h.at(100)[2] - 2.0).abs() < 1e-8);
        assert!((jet.ck_norm(2) - fd.ck_norm(2)).abs() < 1e-8);
    }

    fn smooth(g: Grid, a: f64, b: f64, c: f64) -> Field {
        Field::scalar_fn(g, move |x| a * (3.0 * x[0] + b).sin() * (2.0 * x[1]).cos() + c * x[0] * x[1])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pullback_is_psd(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
            let g = unit_grid(24);
            let u = Field::from_fn(g, FieldKind::Map(4), |x, o| {
                o[0] = a * x[0] + (b * x[1]).sin();
                o[1] = c * x[0] * x[1];
                o[2] = (a * x[0] + c * x[1]).cos();
                o[3] = b * x[1];
            });
            let met = pullback_metric(&u).unwrap();
            for idx in 0..g.len() {
                prop_assert!(met.sym(idx).eigenvalues().0 >= -1e-12);
            }
        }

        #[test]
        fn differentiate_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, p in 0.0f64..3.0) {
            let g = unit_grid(20);
            let f = smooth(g, 1.0, p, 0.5);
            let h = smooth(g, -0.5, 2.0 * p, 2.0);
            let lhs = gradient(&f.lin_comb(a, &h, b).unwrap());
            let rhs = gradient(&f).lin_comb(a, &gradient(&h), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
        }

        #[test]
        fn leibniz_sanity(p in 0.0f64..3.0, q in 0.0f64..3.0) {
            let g = unit_grid(32);
            let f = smooth(g, 1.0, p, 0.3);
            let h = smooth(g, 0.7, q, -0.4);
            let fh = Field::from_data(g, FieldKind::Scalar, f.data().iter().zip(h.data()).map(|(x, y)| x * y).collect()).unwrap();
            let lhs = ck_norm(&fh, 1).unwrap();
            let rhs = 2.0 * (ck_norm(&f, 1).unwrap() * ck_norm(&h, 0).unwrap() + ck_norm(&f, 0).unwrap() * ck_norm(&h, 1).unwrap());
            prop_assert!(lhs <= rhs);
        }

        #[test]
        fn holder_monotone_in_exponent(p in 0.0f64..3.0, t in 0.1f64..0.9) {
            let g = unit_grid(32);
            let f = smooth(g, 1.0, p, 0.2);
            let ladder = default_ladder(&g);
            let diam = 2f64.sqrt();
            let lo = holder_seminorm(&f, t, &ladder).unwrap();
            let hi = holder_seminorm(&f, 1.0, &ladder).unwrap();
            prop_assert!(lo <= hi * diam.powf(1.0 - t) + 1e-12);
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        for periodic in [false, true] {
            let g = Grid::new([1.0, 0.6], [23, 17], [periodic, false]).unwrap();
            let mask: Vec<bool> = (0..g.len()).map(|i| (i * 37 + 11) % 53 == 0).collect();
            let d = distance_to_set(&g, &mask);
            let per = g.extent[0];
            for idx in 0..g.len() {
                let x = g.coord_of(idx);
                let mut best = f64::INFINITY;
                for (o, &m) in mask.iter().enumerate() {
                    if m {
                        let y = g.coord_of(o);
                        let mut dx = (x[0] - y[0]).abs();
                        if periodic {
                            dx = dx.min(per - dx);
                        }
                        best = best.min((dx * dx + (x[1] - y[1]).powi(2)).sqrt());
                    }
                }
                assert!((d.s(idx) - best).abs() < 1e-12, "{periodic} {idx}");
            }
        }
        let g = unit_grid(16);
        assert!(distance_to_set(&g, &vec![false; g.len()]).s(0).is_infinite());
    }
}
