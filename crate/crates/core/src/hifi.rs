//! High-fidelity state, adjoint and sensitivity solves.

use std::time::Instant;

use faer::sparse::linalg::solvers::Llt;
use serde::Serialize;

use crate::error::{Result, SvrbError};
use crate::fem::problem::{AffineProblem, CoefficientValues};
use crate::fem::sparse::{dot, llt_solve, norm2, SymSparse};
use crate::fem::LinearSolver;

/// Relative residual every accepted solve must reach.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// `A_h(θ)` at one parameter, factorized once and reused for every right-hand side.
pub struct Operator<'p> {
    problem: &'p AffineProblem,
    theta: Vec<f64>,
    coeffs: CoefficientValues,
    matrix: SymSparse,
    rhs: Vec<f64>,
    factor: Option<Llt<usize, f64>>,
}

impl<'p> Operator<'p> {
    pub fn new(problem: &'p AffineProblem, theta: &[f64]) -> Result<Self> {
        let (matrix, rhs) = problem.assemble_operator(theta)?;
        let factor = match problem.solver() {
            LinearSolver::Cholesky => {
                problem.count_factorization();
                Some(matrix.cholesky()?)
            }
            LinearSolver::Cg { .. } => None,
        };
        Ok(Self {
            problem,
            theta: theta.to_vec(),
            coeffs: problem.eval_coefficients(theta),
            matrix,
            rhs,
            factor,
        })
    }

    pub fn problem(&self) -> &'p AffineProblem {
        self.problem
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn coefficients(&self) -> &CoefficientValues {
        &self.coeffs
    }

    pub fn matrix(&self) -> &SymSparse {
        &self.matrix
    }

    pub fn load(&self) -> &[f64] {
        &self.rhs
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let bnorm = norm2(b);
        if bnorm == 0.0 {
            return Ok(vec![0.0; b.len()]);
        }
        match (&self.factor, self.problem.solver()) {
            (Some(f), _) => {
                let mut x = llt_solve(f, b);
                let mut rel = self.residual(&x, b) / bnorm;
                for _ in 0..2 {
                    if rel <= SOLVE_TOLERANCE {
                        break;
                    }
                    let r: Vec<f64> = b.iter().zip(self.matrix.matvec(&x)).map(|(bi, ai)| bi - ai).collect();
                    let dx = llt_solve(f, &r);
                    x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
                    rel = self.residual(&x, b) / bnorm;
                }
                if rel > SOLVE_TOLERANCE {
                    return Err(SvrbError::SolveFailed {
                        residual: rel,
                        tolerance: SOLVE_TOLERANCE,
                    });
                }
                Ok(x)
            }
            (None, LinearSolver::Cg { max_iter }) => pcg(&self.matrix, b, max_iter),
            (None, LinearSolver::Cholesky) => unreachable!("Cholesky operator without factor"),
        }
    }

    /// Solves `A^T x = b`; identical to [`solve`](Self::solve) for the symmetric forms handled here.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve(b)
    }

    fn residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let ax = self.matrix.matvec(x);
        ax.iter().zip(b).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt()
    }

    /// `(∂θ_j A_h) v` for every j.
    pub fn d_matrix_apply(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let terms = self.problem.diffusion_terms();
        let products: Vec<Option<Vec<f64>>> = (0..terms.len())
            .map(|k| {
                let active = (0..self.coeffs.da.ncols()).any(|j| self.coeffs.da[(k, j)] != 0.0);
                active.then(|| terms[k].matrix.matvec(v))
            })
            .collect();
        (0..self.problem.dim())
            .map(|j| {
                let mut out = vec![0.0; v.len()];
                for (k, p) in products.iter().enumerate() {
                    let c = self.coeffs.da[(k, j)];
                    if let (Some(p), true) = (p, c != 0.0) {
                        out.iter_mut().zip(p).for_each(|(o, x)| *o += c * x);
                    }
                }
                out
            })
            .collect()
    }

    /// `∂θ_j f_h` for every j.
    pub fn d_load(&self) -> Vec<Vec<f64>> {
        let terms = self.problem.load_terms();
        (0..self.problem.dim())
            .map(|j| {
                let mut out = vec![0.0; self.rhs.len()];
                for (k, t) in terms.iter().enumerate() {
                    let c = self.coeffs.df[(k, j)];
                    if c != 0.0 {
                        out.iter_mut().zip(&t.vector).for_each(|(o, x)| *o += c * x);
                    }
                }
                out
            })
            .collect()
    }

    /// `Σ_k ∂θ_j cA_k wᵀA_k v − Σ_k ∂θ_j cF_k wᵀ f_k` for every j.
    pub fn lagrangian_gradient(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        let a_terms: Vec<f64> = self
            .problem
            .diffusion_terms()
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let active = (0..self.coeffs.da.ncols()).any(|j| self.coeffs.da[(k, j)] != 0.0);
                if active {
                    t.matrix.bilinear(w, v)
                } else {
                    0.0
                }
            })
            .collect();
        let f_terms: Vec<f64> = self.problem.load_terms().iter().map(|t| dot(w, &t.vector)).collect();
        (0..self.problem.dim())
            .map(|j| {
                let a: f64 = a_terms.iter().enumerate().map(|(k, x)| self.coeffs.da[(k, j)] * x).sum();
                let f: f64 = f_terms.iter().enumerate().map(|(k, x)| self.coeffs.df[(k, j)] * x).sum();
                a - f
            })
            .collect()
    }

    /// State solution `u_h(θ)`.
    pub fn state(&self) -> Result<Vec<f64>> {
        self.solve(&self.rhs)
    }

    /// Adjoint solution for a given state.
    pub fn adjoint(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.solve_transpose(&adjoint_rhs(self.problem, u))
    }
}

/// `O_h Γ⁻¹ (y − O_h^T u)`
pub fn adjoint_rhs(problem: &AffineProblem, u: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = problem
        .misfit(u)
        .iter()
        .zip(problem.noise_precision())
        .map(|(r, p)| r * p)
        .collect();
    problem.observations().transpose_apply(&w)
}

fn pcg(a: &SymSparse, b: &[f64], max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let diag = a.diagonal();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    // target a little below the acceptance threshold so roundoff in the recurrence does not matter
    let target = 0.1 * SOLVE_TOLERANCE * bnorm;
    for _ in 0..max_iter {
        a.matvec_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= target {
            break;
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let ax = a.matvec(&x);
    let rel = ax.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt() / bnorm;
    if rel > SOLVE_TOLERANCE {
        return Err(SvrbError::SolveFailed {
            residual: rel,
            tolerance: SOLVE_TOLERANCE,
        });
    }
    Ok(x)
}

/// Result of a full high-fidelity potential and gradient evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct HiFiEvaluation {
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub u: Vec<f64>,
    #[serde(skip)]
    pub psi: Vec<f64>,
    pub eta: f64,
    pub grad_eta: Vec<f64>,
    pub solve_seconds: f64,
}

pub fn solve_state(problem: &AffineProblem, theta: &[f64]) -> Result<Vec<f64>> {
    Operator::new(problem, theta)?.state()
}

pub fn solve_adjoint(problem: &AffineProblem, theta: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    Operator::new(problem, theta)?.adjoint(u)
}

/// `η_y^h(θ)` and the state it was computed from.
pub fn potential(problem: &AffineProblem, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let u = solve_state(problem, theta)?;
    Ok((problem.weighted_half_norm(&problem.misfit(&u)), u))
}

/// Potential, adjoint-based gradient, state and adjoint from a single factorization.
pub fn grad_potential(problem: &AffineProblem, theta: &[f64]) -> Result<HiFiEvaluation> {
    let start = Instant::now();
    let op = Operator::new(problem, theta)?;
    let u = op.state()?;
    let psi = op.adjoint(&u)?;
    let eta = problem.weighted_half_norm(&problem.misfit(&u));
    let grad_eta = op.lagrangian_gradient(&psi, &u);
    Ok(HiFiEvaluation {
        theta: theta.to_vec(),
        u,
        psi,
        eta,
        grad_eta,
        solve_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Parameter sensitivities of state and adjoint.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    pub du: Vec<Vec<f64>>,
    pub dpsi: Vec<Vec<f64>>,
}

impl Operator<'_> {
    pub fn sensitivities(&self, u: &[f64], psi: &[f64]) -> Result<Sensitivities> {
        let p = self.problem;
        let dau = self.d_matrix_apply(u);
        let dapsi = self.d_matrix_apply(psi);
        let df = self.d_load();
        let mut du = Vec::with_capacity(p.dim());
        let mut dpsi = Vec::with_capacity(p.dim());
        for j in 0..p.dim() {
            let rhs: Vec<f64> = df[j].iter().zip(&dau[j]).map(|(f, a)| f - a).collect();
            let duj = self.solve(&rhs)?;
            let w: Vec<f64> = p
                .observations()
                .apply(&duj)
                .iter()
                .zip(p.noise_precision())
                .map(|(o, g)| o * g)
                .collect();
            let ow = p.observations().transpose_apply(&w);
            let rhs: Vec<f64> = dapsi[j].iter().zip(&ow).map(|(a, o)| -a - o).collect();
            dpsi.push(self.solve_transpose(&rhs)?);
            du.push(duj);
        }
        Ok(Sensitivities { du, dpsi })
    }
}

pub fn solve_sensitivities(
    problem: &AffineProblem,
    theta: &[f64],
    u: &[f64],
    psi: &[f64],
) -> Result<Sensitivities> {
    Operator::new(problem, theta)?.sensitivities(u, psi)
}
