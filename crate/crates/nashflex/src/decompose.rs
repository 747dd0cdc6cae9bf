//! Rank-one decompositions `P = Σ a_k² ν_k⊗ν_k` and their perturbed version
//! `P = Σ a_k² ν_k⊗ν_k + Σ a_k Λ_k + Σ a_i a_j Θ_ij`, solved per node by Newton.

use crate::fields::{Field, FieldError, FieldKind, Sym2, NSTAR};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecomposeError {
    #[error("direction sets are only provided for n = 2, got n = {0}")]
    UnsupportedDimension(usize),
    #[error("matrix is not decomposable in the frame: coefficients {coeffs:?}")]
    NotDecomposable { coeffs: [f64; 3] },
    #[error("perturbation budget {budget:.3e} not below sigma0 = {sigma0}")]
    BudgetExceeded { budget: f64, sigma0: f64 },
    #[error("Newton did not converge in {steps} steps (residual {residual:.3e})")]
    NoConvergence { steps: usize, residual: f64 },
    #[error("Newton Jacobian is singular at step {step}")]
    JacobianSingular { step: usize },
    #[error("initial guess must be strictly positive, got {0:?}")]
    NonPositiveGuess([f64; 3]),
    #[error("at node {node}: {source}")]
    AtNode { node: usize, source: Box<DecomposeError> },
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[inline]
fn vec3(s: Sym2) -> Vector3<f64> {
    Vector3::new(s.xx, s.xy, s.yy)
}

#[inline]
fn frob3(v: &Vector3<f64>) -> f64 {
    (v[0] * v[0] + 2.0 * v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub dirs: [[f64; 2]; NSTAR],
    /// Rows `vec(ν_k⊗ν_k) = (ν₁², ν₁ν₂, ν₂²)`.
    pub frame: [[f64; 3]; NSTAR],
}

impl DirectionSet {
    pub fn from_directions(dirs: [[f64; 2]; NSTAR]) -> Self {
        let frame = dirs.map(|v| {
            let s = Sym2::outer(v);
            [s.xx, s.xy, s.yy]
        });
        DirectionSet { dirs, frame }
    }

    pub fn outer(&self, k: usize) -> Sym2 {
        let r = self.frame[k];
        Sym2::new(r[0], r[1], r[2])
    }

    pub fn frame_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.frame[i][j])
    }

    pub fn det(&self) -> f64 {
        self.frame_matrix().determinant()
    }

    pub fn resum(&self, coeffs: [f64; 3]) -> Sym2 {
        (0..NSTAR).fold(Sym2::ZERO, |acc, k| acc.add(self.outer(k).scale(coeffs[k])))
    }
}

/// Equiangular directions at angles 0, π/3, 2π/3.
pub fn standard_directions(n: usize) -> Result<DirectionSet, DecomposeError> {
    if n != 2 {
        return Err(DecomposeError::UnsupportedDimension(n));
    }
    let s = 3f64.sqrt() / 2.0;
    Ok(DirectionSet::from_directions([[1.0, 0.0], [0.5, s], [-0.5, s]]))
}

/// Coefficients `a_k²` with `P = Σ a_k² ν_k⊗ν_k`.
pub fn decompose_spd(p: Sym2, dirs: &DirectionSet) -> Result<[f64; 3], DecomposeError> {
    let mt = dirs.frame_matrix().transpose();
    let c = mt.lu().solve(&vec3(p)).ok_or(DecomposeError::NotDecomposable { coeffs: [f64::NAN; 3] })?;
    let coeffs = [c[0], c[1], c[2]];
    if coeffs.iter().any(|&x| !(x > 0.0)) {
        return Err(DecomposeError::NotDecomposable { coeffs });
    }
    Ok(coeffs)
}

/// Pointwise perturbation data: `Λ_i` and `Θ_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Perturbation {
    pub lambda: [Sym2; NSTAR],
    pub theta: [[Sym2; NSTAR]; NSTAR],
}

impl Perturbation {
    pub fn zero() -> Self {
        Perturbation::default()
    }

    pub fn size(&self) -> f64 {
        let l: f64 = self.lambda.iter().map(|s| s.frob()).sum();
        let t: f64 = self.theta.iter().flatten().map(|s| s.frob()).sum();
        l + t
    }

    pub fn scaled(&self, eps: f64) -> Self {
        Perturbation { lambda: self.lambda.map(|s| s.scale(eps)), theta: self.theta.map(|r| r.map(|s| s.scale(eps))) }
    }

    /// `Σ a_i² ν_i⊗ν_i + Σ a_i Λ_i + Σ a_i a_j Θ_ij`.
    pub fn evaluate(&self, a: [f64; 3], dirs: &DirectionSet) -> Sym2 {
        let mut s = Sym2::ZERO;
        for i in 0..NSTAR {
            s.axpy(a[i] * a[i], dirs.outer(i));
            s.axpy(a[i], self.lambda[i]);
            for j in 0..NSTAR {
                s.axpy(a[i] * a[j], self.theta[i][j]);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub sigma0: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { sigma0: 0.1, max_steps: 25, tol: 1e-10, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub a: [f64; 3],
    pub seed: [f64; 3],
    pub steps: usize,
    pub residual: f64,
    /// Residual before each step, then the final residual.
    pub history: Vec<f64>,
}

/// Smallness budget `‖P − P₀‖ + Σ‖Λ_i‖ + Σ‖Θ_ij‖` at one node.
pub fn budget(p: Sym2, p0: Sym2, pert: &Perturbation) -> f64 {
    p.sub(p0).frob() + pert.size()
}

/// Solve the perturbed decomposition at one node.
pub fn perturbed_decompose(
    p: Sym2,
    p0: Sym2,
    pert: &Perturbation,
    dirs: &DirectionSet,
    guess: Option<[f64; 3]>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome, DecomposeError> {
    let b = budget(p, p0, pert);
    if !(b < opts.sigma0) {
        return Err(DecomposeError::BudgetExceeded { budget: b, sigma0: opts.sigma0 });
    }
    solve_unchecked(p, pert, dirs, guess, opts)
}

/// Newton solve without the budget precondition.
pub fn solve_unchecked(
    p: Sym2,
    pert: &Perturbation,
    dirs: &DirectionSet,
    guess: Option<[f64; 3]>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome, DecomposeError> {
    let seed = match guess {
        Some(g) => g,
        None => decompose_spd(p, dirs)?.map(f64::sqrt),
    };
    if seed.iter().any(|&x| !(x > 0.0)) {
        return Err(DecomposeError::NonPositiveGuess(seed));
    }
    let target = vec3(p);
    let residual_of = |a: &[f64; 3]| vec3(pert.evaluate(*a, dirs)) - target;
    let mut a = seed;
    let mut r = residual_of(&a);
    let mut rn = frob3(&r);
    let mut history = vec![rn];
    let mut steps = 0;
    while rn > opts.tol {
        if steps == opts.max_steps {
            return Err(DecomposeError::NoConvergence { steps, residual: rn });
        }
        let mut jac = Matrix3::zeros();
        for k in 0..NSTAR {
            let mut col = dirs.outer(k).scale(2.0 * a[k]).add(pert.lambda[k]);
            for j in 0..NSTAR {
                col = col.add(pert.theta[k][j].add(pert.theta[j][k]).scale(a[j]));
            }
            jac.set_column(k, &vec3(col));
        }
        let lu = jac.lu();
        let scale = jac.abs().max().max(1e-300);
        if lu.determinant().abs() < 1e-13 * scale.powi(3) {
            return Err(DecomposeError::JacobianSingular { step: steps });
        }
        let delta = lu.solve(&(-r)).ok_or(DecomposeError::JacobianSingular { step: steps })?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = [a[0] + t * delta[0], a[1] + t * delta[1], a[2] + t * delta[2]];
            if trial.iter().all(|&x| x > 0.0) {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        a = accepted.ok_or(DecomposeError::NoConvergence { steps, residual: rn })?;
        steps += 1;
        r = residual_of(&a);
        rn = frob3(&r);
        history.push(rn);
    }
    Ok(NewtonOutcome { a, seed, steps, residual: rn, history })
}

/// Coefficient fields over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffField {
    pub dirs: DirectionSet,
    /// `Vector(3)` field of coefficients.
    pub coeffs: Field,
}

/// Apply `decompose_spd` at every node, returning `a_k²`.
pub fn decompose_field(p: &Field, dirs: &DirectionSet) -> Result<CoeffField, DecomposeError> {
    p.expect_kind(FieldKind::Sym2)?;
    let mut out = Field::zeros(*p.grid(), FieldKind::Vector(NSTAR));
    for idx in 0..p.grid().len() {
        let c = decompose_spd(p.sym(idx), dirs).map_err(|e| DecomposeError::AtNode { node: idx, source: Box::new(e) })?;
        out.at_mut(idx).copy_from_slice(&c);
    }
    Ok(CoeffField { dirs: dirs.clone(), coeffs: out })
}

/// Largest `‖P − Id‖_F / ‖Id‖` style deviation used to report the positivity
/// radius consumed by a field relative to `reference`.
pub fn radius_consumed(p: &Field, reference: Sym2) -> f64 {
    (0..p.grid().len()).map(|i| p.sym(i).sub(reference).frob()).fold(0.0, f64::max)
}
