//! Orthonormal normal fields along a discrete immersion.
//!
//! Constant seed vectors are projected off the tangent plane with
//! `ν_i = ξ_i − Σ_j r_ij ∂_j v`, `R = B (∇vᵀ∇v)⁻¹`, `B_ik = ⟨ξ_i, ∂_k v⟩`,
//! and then orthonormalized by Gram–Schmidt.

use crate::fields::{dot, gradient, Field, FieldError, FieldKind, MapJet, N};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("projected seeds lose rank at node {node} (pivot {pivot:.3e})")]
    DegenerateSeed { node: usize, pivot: f64 },
    #[error("metric eigenvalues {eig:?} at node {node} outside [1/{gamma}, {gamma}]")]
    FailsMetricBounds { node: usize, eig: (f64, f64), gamma: f64 },
    #[error("requested {count} normals but codimension is {codim}")]
    InvalidCount { count: usize, codim: usize },
    #[error("seed vectors must have {m} components")]
    BadSeeds { m: usize },
    #[error("frame jumps by {jump:.3} between neighbors at node {node}")]
    Discontinuous { node: usize, jump: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Seed choice for the vectors `ξ_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum Seeds {
    /// Last coordinate directions, with a random orthonormal fallback.
    Coordinate { fallback_seed: u64 },
    /// Fixed seeds, no fallback.
    Explicit(Vec<Vec<f64>>),
    /// Random orthonormal draw.
    Random(u64),
    /// Seeds varying over the chart, kind `Vector(count * m)` with layout `[i][c]`.
    PerNode(Field),
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Coordinate { fallback_seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameQuality {
    pub orthonormality: f64,
    pub tangency: f64,
    pub neighbor_jump: f64,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalFrame {
    count: usize,
    m: usize,
    /// `Vector(count * m)` with layout `[i][c]`.
    normals: Field,
    pub quality: FrameQuality,
}

fn random_orthonormal(count: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        for w in &out {
            let d = dot(&v, w);
            v.iter_mut().zip(w).for_each(|(a, b)| *a -= d * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

fn coordinate_seeds(count: usize, m: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut v = vec![0.0; m];
            v[N + i] = 1.0;
            v
        })
        .collect()
}

/// Relative pivot below which Gram–Schmidt declares rank loss.
const RANK_TOL: f64 = 1e-6;

enum SeedSource<'a> {
    Constant(&'a [Vec<f64>]),
    Field(&'a Field),
}

impl SeedSource<'_> {
    #[inline]
    fn seed(&self, idx: usize, i: usize, m: usize) -> &[f64] {
        match self {
            SeedSource::Constant(s) => &s[i],
            SeedSource::Field(f) => &f.at(idx)[i * m..(i + 1) * m],
        }
    }
}

fn build(jac: &Field, m: usize, count: usize, seeds: SeedSource<'_>, gamma: f64) -> Result<NormalFrame, FrameError> {
    let grid = *jac.grid();
    let mut normals = Field::zeros(grid, FieldKind::Vector(count * m));
    let mut orth: f64 = 0.0;
    let mut tang: f64 = 0.0;
    let mut work = vec![0.0; count * m];
    for idx in 0..grid.len() {
        let j = jac.at(idx);
        let (t0, t1) = j.split_at(m);
        let g = crate::fields::Sym2::new(dot(t0, t0), dot(t0, t1), dot(t1, t1));
        let eig = g.eigenvalues();
        if !(eig.0 >= 1.0 / gamma && eig.1 <= gamma) {
            return Err(FrameError::FailsMetricBounds { node: idx, eig, gamma });
        }
        let ginv = g.inverse().expect("positive definite");
        for i in 0..count {
            let xi = seeds.seed(idx, i, m);
            let b = [dot(xi, t0), dot(xi, t1)];
            let r = ginv.apply(b);
            let v = &mut work[i * m..(i + 1) * m];
            for c in 0..m {
                v[c] = xi[c] - r[0] * t0[c] - r[1] * t1[c];
            }
        }
        // Modified Gram–Schmidt, two passes, each also re-projecting the tangent plane.
        for i in 0..count {
            let (before, rest) = work.split_at_mut(i * m);
            let v = &mut rest[..m];
            let n0 = dot(v, v).sqrt();
            for _ in 0..2 {
                for k in 0..i {
                    let w = &before[k * m..(k + 1) * m];
                    let d = dot(v, w);
                    v.iter_mut().zip(w).for_each(|(a, b)| *a -= d * b);
                }
                let b = [dot(v, t0), dot(v, t1)];
                let r = ginv.apply(b);
                for c in 0..m {
                    v[c] -= r[0] * t0[c] + r[1] * t1[c];
                }
            }
            let n = dot(v, v).sqrt();
            if !(n > RANK_TOL * n0.max(1.0)) {
                return Err(FrameError::DegenerateSeed { node: idx, pivot: n });
            }
            v.iter_mut().for_each(|a| *a /= n);
        }
        let scale = (eig.1).sqrt();
        for i in 0..count {
            let v = &work[i * m..(i + 1) * m];
            tang = tang.max(dot(v, t0).abs().max(dot(v, t1).abs()) / scale);
            for k in 0..=i {
                let w = &work[k * m..(k + 1) * m];
                let target = if k == i { 1.0 } else { 0.0 };
                orth = orth.max((dot(v, w) - target).abs());
            }
        }
        normals.at_mut(idx).copy_from_slice(&work);
    }
    let mut frame = NormalFrame {
        count,
        m,
        normals,
        quality: FrameQuality { orthonormality: orth, tangency: tang, neighbor_jump: 0.0, used_fallback: false },
    };
    frame.quality.neighbor_jump = frame.neighbor_jump();
    Ok(frame)
}

/// Maximal frame deviation and the node where it occurs.
fn neighbor_jump_at(normals: &Field) -> (f64, usize) {
    let grid = *normals.grid();
    let (nx, ny) = (grid.nodes[0], grid.nodes[1]);
    let mut worst = (0.0, 0);
    for j in 0..ny {
        for i in 0..nx {
            let idx = grid.index(i, j);
            let a = normals.at(idx);
            let mut check = |o: usize| {
                let b = normals.at(o);
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                if d > worst.0 {
                    worst = (d, idx);
                }
            };
            if i + 1 < nx {
                check(grid.index(i + 1, j));
            }
            if j + 1 < ny {
                check(grid.index(i, j + 1));
            }
        }
    }
    worst
}

/// Normal frame from a Jacobian field `Gradient(m)`.
pub fn normal_frame_from_jacobian(jac: &Field, count: usize, gamma: f64, seeds: &Seeds) -> Result<NormalFrame, FrameError> {
    let m = match jac.kind() {
        FieldKind::Gradient(m) => m,
        k => return Err(FieldError::KindMismatch { expected: "Gradient(m)".into(), found: k.name() }.into()),
    };
    if count > m.saturating_sub(N) {
        return Err(FrameError::InvalidCount { count, codim: m.saturating_sub(N) });
    }
    let frame = match seeds {
        Seeds::Explicit(s) => {
            if s.len() != count || s.iter().any(|v| v.len() != m) {
                return Err(FrameError::BadSeeds { m });
            }
            build(jac, m, count, SeedSource::Constant(s), gamma)?
        }
        Seeds::PerNode(f) => {
            if f.kind() != FieldKind::Vector(count * m) || f.grid() != jac.grid() {
                return Err(FrameError::BadSeeds { m });
            }
            build(jac, m, count, SeedSource::Field(f), gamma)?
        }
        Seeds::Random(seed) => build(jac, m, count, SeedSource::Constant(&random_orthonormal(count, m, *seed)), gamma)?,
        Seeds::Coordinate { fallback_seed } => match build(jac, m, count, SeedSource::Constant(&coordinate_seeds(count, m)), gamma) {
            Err(FrameError::DegenerateSeed { .. }) => {
                let mut f = build(jac, m, count, SeedSource::Constant(&random_orthonormal(count, m, *fallback_seed)), gamma)?;
                f.quality.used_fallback = true;
                f
            }
            other => other?,
        },
    };
    let (jump, node) = neighbor_jump_at(&frame.normals);
    if jump >= 0.5 {
        return Err(FrameError::Discontinuous { node, jump });
    }
    Ok(frame)
}

/// Normal frame along a map, differentiating through its Jacobian.
pub fn normal_frame(v: &MapJet, count: usize, gamma: f64) -> Result<NormalFrame, FrameError> {
    normal_frame_from_jacobian(&v.jacobian, count, gamma, &Seeds::default())
}

impl NormalFrame {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn field(&self) -> &Field {
        &self.normals
    }

    #[inline]
    pub fn normal(&self, idx: usize, i: usize) -> &[f64] {
        &self.normals.at(idx)[i * self.m..(i + 1) * self.m]
    }

    /// Normal `i` as a map field.
    pub fn as_map(&self, i: usize) -> Field {
        let g = *self.normals.grid();
        let mut out = Field::zeros(g, FieldKind::Map(self.m));
        for idx in 0..g.len() {
            out.at_mut(idx).copy_from_slice(self.normal(idx, i));
        }
        out
    }

    /// Finite-difference derivatives, kind `Gradient(count * m)`, layout `[axis][i][c]`.
    pub fn gradient(&self) -> Field {
        gradient(&self.normals)
    }

    pub fn neighbor_jump(&self) -> f64 {
        neighbor_jump_at(&self.normals).0
    }

    /// Max `|⟨ζ_i, ∂_a v⟩|` against a reference Jacobian (for instance the closed form).
    pub fn tangency_against(&self, jac: &Field) -> f64 {
        let m = self.m;
        let mut worst: f64 = 0.0;
        for idx in 0..self.normals.grid().len() {
            let j = jac.at(idx);
            for i in 0..self.count {
                let v = self.normal(idx, i);
                worst = worst.max(dot(v, &j[..m]).abs().max(dot(v, &j[m..]).abs()));
            }
        }
        worst
    }

    /// Seed vectors that reproduce this frame at a node.
    pub fn seeds_at(&self, idx: usize) -> Vec<Vec<f64>> {
        (0..self.count).map(|i| self.normal(idx, i).to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Grid, M};

    fn graph_jet(grid: Grid, amp: f64, freq: f64) -> MapJet {
        MapJet::from_fn(
            grid,
            M,
            move |x, o| {
                o.fill(0.0);
                o[0] = x[0];
                o[1] = x[1];
                o[2] = amp * (freq * x[0]).sin() * (freq * x[1]).cos();
                o[3] = amp * (freq * x[1]).sin();
            },
            move |x, o| {
                o.fill(0.0);
                o[0] = 1.0;
                o[2] = amp * freq * (freq * x[0]).cos() * (freq * x[1]).cos();
                o[M + 1] = 1.0;
                o[M + 2] = -amp * freq * (freq * x[0]).sin() * (freq * x[1]).sin();
                o[M + 3] = amp * freq * (freq * x[1]).cos();
            },
        )
    }

    #[test]
    fn flat_inclusion_gives_coordinate_normals() {
        let g = Grid::square(1.0, 32, false).unwrap();
        let jet = graph_jet(g, 0.0, 1.0);
        let f = normal_frame(&jet, 6, 2.0).unwrap();
        for idx in [0, 100, g.len() - 1] {
            for i in 0..6 {
                let v = f.normal(idx, i);
                for c in 0..M {
                    let e = if c == i + 2 { 1.0 } else { 0.0 };
                    assert!((v[c] - e).abs() < 1e-14);
                }
            }
        }
        assert!(f.quality.orthonormality < 1e-14);
    }

    #[test]
    fn parabola_tangency_against_closed_form() {
        let g = Grid::square(1.0, 128, false).unwrap();
        let u = Field::from_fn(g, FieldKind::Map(M), |x, o| {
            o.fill(0.0);
            o[0] = x[0];
            o[1] = x[1];
            o[2] = x[0] * x[0] / 10.0;
        });
        let jet = MapJet::from_samples(u).unwrap();
        let f = normal_frame(&jet, 6, 2.0).unwrap();
        let exact = Field::from_fn(g, FieldKind::Gradient(M), |x, o| {
            o.fill(0.0);
            o[0] = 1.0;
            o[2] = x[0] / 5.0;
            o[M + 1] = 1.0;
        });
        let h = g.h();
        assert!(f.tangency_against(&exact) <= 10.0 * h * h);
        assert!(f.quality.orthonormality <= 1e-10);
    }

    #[test]
    fn tangent_seeds_are_degenerate() {
        let g = Grid::square(1.0, 16, false).unwrap();
        let jet = graph_jet(g, 0.0, 1.0);
        let mut s = vec![vec![0.0; M]; 2];
        s[0][0] = 1.0;
        s[1][1] = 1.0;
        let r = normal_frame_from_jacobian(&jet.jacobian, 2, 2.0, &Seeds::Explicit(s));
        assert!(matches!(r, Err(FrameError::DegenerateSeed { node: 0, .. })));
    }

    #[test]
    fn coordinate_seeds_fall_back_when_degenerate() {
        // Tangent plane spanned by e_3, e_4: coordinate seeds e_3, e_4 are tangent.
        let g = Grid::square(1.0, 16, false).unwrap();
        let jet = MapJet::from_fn(
            g,
            M,
            |x, o| {
                o.fill(0.0);
                o[2] = x[0];
                o[3] = x[1];
            },
            |_, o| {
                o.fill(0.0);
                o[2] = 1.0;
                o[M + 3] = 1.0;
            },
        );
        let f = normal_frame(&jet, 6, 2.0).unwrap();
        assert!(f.quality.used_fallback);
        assert!(f.quality.orthonormality < 1e-12 && f.quality.tangency < 1e-12);
    }

    #[test]
    fn metric_bounds_enforced() {
        let g = Grid::square(1.0, 16, false).unwrap();
        let jet = graph_jet(g, 0.0, 1.0);
        let mut small = jet.clone();
        small.jacobian = jet.jacobian.scale(0.1);
        assert!(matches!(normal_frame(&small, 6, 2.0), Err(FrameError::FailsMetricBounds { .. })));
        assert!(matches!(normal_frame(&jet, 7, 2.0), Err(FrameError::InvalidCount { .. })));
    }

    #[test]
    fn gram_schmidt_idempotent() {
        let g = Grid::square(1.0, 32, false).unwrap();
        let jet = graph_jet(g, 0.1, 3.0);
        let f = normal_frame(&jet, 6, 4.0).unwrap();
        let idx = 77;
        let single = Grid::square(1.0, 16, false).unwrap();
        let jac = Field::constant(single, FieldKind::Gradient(M), jet.jacobian.at(idx));
        let again = normal_frame_from_jacobian(&jac, 6, 4.0, &Seeds::Explicit(f.seeds_at(idx))).unwrap();
        for i in 0..6 {
            for (a, b) in again.normal(0, i).iter().zip(f.normal(idx, i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_equivariance() {
        let g = Grid::square(1.0, 24, false).unwrap();
        let jet = graph_jet(g, 0.1, 3.0);
        let q = random_orthonormal(M, M, 11);
        let rot = |v: &[f64]| -> Vec<f64> { (0..M).map(|r| dot(&q[r], v)).collect() };
        let mut rj = jet.jacobian.clone();
        for idx in 0..g.len() {
            let src = jet.jacobian.at(idx).to_vec();
            let dst = rj.at_mut(idx);
            dst[..M].copy_from_slice(&rot(&src[..M]));
            dst[M..].copy_from_slice(&rot(&src[M..]));
        }
        let seeds = coordinate_seeds(6, M);
        let rseeds: Vec<Vec<f64>> = seeds.iter().map(|s| rot(s)).collect();
        let f = normal_frame_from_jacobian(&jet.jacobian, 6, 4.0, &Seeds::Explicit(seeds)).unwrap();
        let rf = normal_frame_from_jacobian(&rj, 6, 4.0, &Seeds::Explicit(rseeds)).unwrap();
        for idx in 0..g.len() {
            for i in 0..6 {
                let expect = rot(f.normal(idx, i));
                for (a, b) in expect.iter().zip(rf.normal(idx, i)) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn frame_estimate_shape() {
        let g = Grid::square(1.0, 128, false).unwrap();
        let mut ratios = Vec::new();
        for freq in [2.0, 4.0, 8.0, 16.0] {
            let jet = graph_jet(g, 0.05, freq);
            let f = normal_frame(&jet, 6, 4.0).unwrap();
            let c1 = f.field().sup_norm() + {
                let d = f.gradient();
                d.sup_norm()
            };
            ratios.push(c1 / (1.0 + jet.ck_norm(2)));
        }
        let lo = ratios.iter().copied().fold(f64::MAX, f64::min);
        let hi = ratios.iter().copied().fold(0.0, f64::max);
        assert!(hi / lo < 4.0, "{ratios:?}");
    }
}
