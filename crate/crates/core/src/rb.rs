//! Reduced-basis surrogate: V-orthonormal state and adjoint spaces, affine reduced
//! blocks, and the online reduced solves (state, adjoint, incrementals, DWR).

use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvrbError};
use crate::fem::problem::{AffineProblem, CoefficientValues};
use crate::fem::sparse::dot;

pub const DEFAULT_DEFLATION_TOL: f64 = 1e-10;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    State,
    Adjoint,
}

/// Basis sizes and the snapshot parameter after one enrichment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub n_u: usize,
    pub n_psi: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedModel {
    version: u32,
    n_h: usize,
    state_basis: Vec<Vec<f64>>,
    adjoint_basis: Vec<Vec<f64>>,
    a_u: Vec<DMatrix<f64>>,
    a_psi: Vec<DMatrix<f64>>,
    /// `N_psi x N_u`, entry (m, n) = A_j(φu_n, φψ_m)
    a_upsi: Vec<DMatrix<f64>>,
    f_u: Vec<DVector<f64>>,
    f_psi: Vec<DVector<f64>>,
    /// `N_u x s`
    o_u: DMatrix<f64>,
    /// `N_psi x s`
    o_psi: DMatrix<f64>,
    stages: Vec<Stage>,
    deflation_tol: f64,
}

/// Which snapshots were kept by an enrichment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnrichOutcome {
    pub state_added: bool,
    pub adjoint_added: bool,
}

impl ReducedModel {
    /// Empty model with blocks sized for `problem`.
    pub fn empty(problem: &AffineProblem) -> Self {
        let ja = problem.diffusion_terms().len();
        let jf = problem.load_terms().len();
        let s = problem.observations().num_obs();
        Self {
            version: FORMAT_VERSION,
            n_h: problem.num_dofs(),
            state_basis: Vec::new(),
            adjoint_basis: Vec::new(),
            a_u: vec![DMatrix::zeros(0, 0); ja],
            a_psi: vec![DMatrix::zeros(0, 0); ja],
            a_upsi: vec![DMatrix::zeros(0, 0); ja],
            f_u: vec![DVector::zeros(0); jf],
            f_psi: vec![DVector::zeros(0); jf],
            o_u: DMatrix::zeros(0, s),
            o_psi: DMatrix::zeros(0, s),
            stages: Vec::new(),
            deflation_tol: DEFAULT_DEFLATION_TOL,
        }
    }

    pub fn with_deflation_tol(mut self, tol: f64) -> Self {
        self.deflation_tol = tol;
        self
    }

    pub fn n_u(&self) -> usize {
        self.state_basis.len()
    }

    pub fn n_psi(&self) -> usize {
        self.adjoint_basis.len()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn provenance(&self) -> impl Iterator<Item = &[f64]> {
        self.stages.iter().map(|s| s.theta.as_slice())
    }

    pub fn contains_snapshot(&self, theta: &[f64]) -> bool {
        self.provenance().any(|p| p == theta)
    }

    pub fn basis(&self, space: Space) -> &[Vec<f64>] {
        match space {
            Space::State => &self.state_basis,
            Space::Adjoint => &self.adjoint_basis,
        }
    }

    /// Orthonormalizes `u` and `psi` against their bases and appends what survives deflation.
    pub fn enrich(&mut self, problem: &AffineProblem, u: &[f64], psi: &[f64], theta: &[f64]) -> EnrichOutcome {
        let state_added = self.add_vector(problem, Space::State, u);
        let adjoint_added = self.add_vector(problem, Space::Adjoint, psi);
        self.stages.push(Stage {
            n_u: self.n_u(),
            n_psi: self.n_psi(),
            theta: theta.to_vec(),
        });
        EnrichOutcome {
            state_added,
            adjoint_added,
        }
    }

    fn add_vector(&mut self, problem: &AffineProblem, space: Space, snapshot: &[f64]) -> bool {
        let snap_norm = problem.v_norm(snapshot);
        if !(snap_norm > 0.0) || !snap_norm.is_finite() {
            debug!("{space:?} snapshot has zero norm, skipped");
            return false;
        }
        let mut v = snapshot.to_vec();
        let basis = self.basis(space);
        // modified Gram-Schmidt, two passes
        for _ in 0..2 {
            for phi in basis {
                let xv = problem.gram().matvec(phi);
                let c = dot(&xv, &v);
                v.iter_mut().zip(phi).for_each(|(vi, pi)| *vi -= c * pi);
            }
        }
        let rem = problem.v_norm(&v);
        if rem <= self.deflation_tol * snap_norm {
            debug!("{space:?} snapshot deflated (remainder {rem:.2e} of {snap_norm:.2e})");
            return false;
        }
        v.iter_mut().for_each(|x| *x /= rem);
        self.append(problem, space, v);
        true
    }

    fn append(&mut self, problem: &AffineProblem, space: Space, v: Vec<f64>) {
        let obs = problem.observations().apply(&v);
        for (k, term) in problem.diffusion_terms().iter().enumerate() {
            let av = term.matrix.matvec(&v);
            let with_u: Vec<f64> = self.state_basis.iter().map(|p| dot(&av, p)).collect();
            let with_psi: Vec<f64> = self.adjoint_basis.iter().map(|p| dot(&av, p)).collect();
            let diag = dot(&av, &v);
            match space {
                Space::State => {
                    self.a_u[k] = grow_symmetric(&self.a_u[k], &with_u, diag);
                    let n = self.a_upsi[k].ncols();
                    let mut m = self.a_upsi[k].clone().insert_column(n, 0.0);
                    m.set_column(n, &DVector::from_vec(with_psi));
                    self.a_upsi[k] = m;
                }
                Space::Adjoint => {
                    self.a_psi[k] = grow_symmetric(&self.a_psi[k], &with_psi, diag);
                    let n = self.a_upsi[k].nrows();
                    let mut m = self.a_upsi[k].clone().insert_row(n, 0.0);
                    m.set_row(n, &DVector::from_vec(with_u).transpose());
                    self.a_upsi[k] = m;
                }
            }
        }
        for (k, term) in problem.load_terms().iter().enumerate() {
            let fv = dot(&term.vector, &v);
            let target = match space {
                Space::State => &mut self.f_u[k],
                Space::Adjoint => &mut self.f_psi[k],
            };
            let n = target.len();
            *target = target.clone().insert_row(n, fv);
        }
        let o = match space {
            Space::State => &mut self.o_u,
            Space::Adjoint => &mut self.o_psi,
        };
        let n = o.nrows();
        *o = o.clone().insert_row(n, 0.0);
        o.set_row(n, &DVector::from_vec(obs).transpose());
        match space {
            Space::State => self.state_basis.push(v),
            Space::Adjoint => self.adjoint_basis.push(v),
        }
    }

    /// The model restricted to the leading `n_u` state and `n_psi` adjoint vectors.
    pub fn truncated(&self, n_u: usize, n_psi: usize) -> Self {
        let n_u = n_u.min(self.n_u());
        let n_psi = n_psi.min(self.n_psi());
        Self {
            version: self.version,
            n_h: self.n_h,
            state_basis: self.state_basis[..n_u].to_vec(),
            adjoint_basis: self.adjoint_basis[..n_psi].to_vec(),
            a_u: self.a_u.iter().map(|m| m.view((0, 0), (n_u, n_u)).into_owned()).collect(),
            a_psi: self.a_psi.iter().map(|m| m.view((0, 0), (n_psi, n_psi)).into_owned()).collect(),
            a_upsi: self.a_upsi.iter().map(|m| m.view((0, 0), (n_psi, n_u)).into_owned()).collect(),
            f_u: self.f_u.iter().map(|v| v.rows(0, n_u).into_owned()).collect(),
            f_psi: self.f_psi.iter().map(|v| v.rows(0, n_psi).into_owned()).collect(),
            o_u: self.o_u.rows(0, n_u).into_owned(),
            o_psi: self.o_psi.rows(0, n_psi).into_owned(),
            stages: self
                .stages
                .iter()
                .filter(|s| s.n_u <= n_u && s.n_psi <= n_psi)
                .cloned()
                .collect(),
            deflation_tol: self.deflation_tol,
        }
    }

    /// Model as it stood after the first `count` enrichments.
    pub fn at_stage(&self, count: usize) -> Self {
        match count {
            0 => self.truncated(0, 0),
            c => {
                let s = &self.stages[c.min(self.stages.len()) - 1];
                let mut m = self.truncated(s.n_u, s.n_psi);
                m.stages.truncate(c);
                m
            }
        }
    }

    pub fn reconstruct(&self, coeffs: &[f64], space: Space) -> Vec<f64> {
        let mut out = vec![0.0; self.n_h];
        for (c, phi) in coeffs.iter().zip(self.basis(space)) {
            out.iter_mut().zip(phi).for_each(|(o, p)| *o += c * p);
        }
        out
    }

    /// Coefficients of the X-orthogonal projection of `v` onto a space.
    pub fn project(&self, problem: &AffineProblem, v: &[f64], space: Space) -> Vec<f64> {
        let xv = problem.gram().matvec(v);
        self.basis(space).iter().map(|phi| dot(phi, &xv)).collect()
    }

    /// Largest entry of `Bᵀ X B − I` over both bases.
    pub fn orthonormality_defect(&self, problem: &AffineProblem) -> f64 {
        let mut worst: f64 = 0.0;
        for basis in [&self.state_basis, &self.adjoint_basis] {
            for (i, a) in basis.iter().enumerate() {
                let xa = problem.gram().matvec(a);
                for (j, b) in basis.iter().enumerate() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((dot(&xa, b) - target).abs());
                }
            }
        }
        worst
    }

    /// Largest deviation of any stored block from a direct projection of the full operators.
    pub fn block_defect(&self, problem: &AffineProblem) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, t) in problem.diffusion_terms().iter().enumerate() {
            for (m, pm) in self.state_basis.iter().enumerate() {
                for (n, pn) in self.state_basis.iter().enumerate() {
                    worst = worst.max((self.a_u[k][(m, n)] - t.matrix.bilinear(pm, pn)).abs());
                }
            }
            for (m, pm) in self.adjoint_basis.iter().enumerate() {
                for (n, pn) in self.adjoint_basis.iter().enumerate() {
                    worst = worst.max((self.a_psi[k][(m, n)] - t.matrix.bilinear(pm, pn)).abs());
                }
                for (n, pn) in self.state_basis.iter().enumerate() {
                    worst = worst.max((self.a_upsi[k][(m, n)] - t.matrix.bilinear(pm, pn)).abs());
                }
            }
        }
        for (k, t) in problem.load_terms().iter().enumerate() {
            for (m, p) in self.state_basis.iter().enumerate() {
                worst = worst.max((self.f_u[k][m] - dot(&t.vector, p)).abs());
            }
            for (m, p) in self.adjoint_basis.iter().enumerate() {
                worst = worst.max((self.f_psi[k][m] - dot(&t.vector, p)).abs());
            }
        }
        for (m, p) in self.state_basis.iter().enumerate() {
            let o = problem.observations().apply(p);
            for (i, oi) in o.iter().enumerate() {
                worst = worst.max((self.o_u[(m, i)] - oi).abs());
            }
        }
        worst
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// Loads a model and checks it was built for a problem of the same shape.
    pub fn load_json(path: &Path, problem: &AffineProblem) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let rm: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        let ok = rm.version == FORMAT_VERSION
            && rm.n_h == problem.num_dofs()
            && rm.a_u.len() == problem.diffusion_terms().len()
            && rm.f_u.len() == problem.load_terms().len()
            && rm.o_u.ncols() == problem.observations().num_obs();
        if !ok {
            return Err(SvrbError::Config(format!(
                "reduced model in {} does not match the configured problem",
                path.display()
            )));
        }
        Ok(rm)
    }

    /// Observations `Oᵀ v` of the reduced function with coefficients `coeffs`.
    pub fn observe(&self, coeffs: &DVector<f64>, space: Space) -> DVector<f64> {
        match space {
            Space::State => self.o_u.tr_mul(coeffs),
            Space::Adjoint => self.o_psi.tr_mul(coeffs),
        }
    }

    /// Assembles all reduced operators at θ.
    pub fn online(&self, problem: &AffineProblem, theta: &[f64]) -> Result<Online<'_>> {
        problem.check_theta(theta)?;
        if self.n_u() == 0 {
            return Err(SvrbError::RbSolveFailed("empty state basis".into()));
        }
        let c = problem.eval_coefficients(theta);
        let a_u = combine(&self.a_u, &c.a);
        let a_psi = combine(&self.a_psi, &c.a);
        let a_upsi = combine(&self.a_upsi, &c.a);
        let f_u = combine_vec(&self.f_u, &c.f);
        let f_psi = combine_vec(&self.f_psi, &c.f);
        let lu_u = Lu::new(a_u.clone(), "state")?;
        let lu_psi = Lu::new(a_psi.clone(), "adjoint")?;
        Ok(Online {
            rm: self,
            coeffs: c,
            a_u,
            a_psi,
            a_upsi,
            f_u,
            f_psi,
            lu_u,
            lu_psi,
            data: DVector::from_column_slice(problem.data()),
            precision: DVector::from_column_slice(problem.noise_precision()),
        })
    }
}

fn grow_symmetric(m: &DMatrix<f64>, cross: &[f64], diag: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n + 1, n + 1);
    out.view_mut((0, 0), (n, n)).copy_from(m);
    for (i, &c) in cross.iter().enumerate() {
        out[(i, n)] = c;
        out[(n, i)] = c;
    }
    out[(n, n)] = diag;
    out
}

fn combine(blocks: &[DMatrix<f64>], w: &[f64]) -> DMatrix<f64> {
    let (r, c) = blocks[0].shape();
    let mut out = DMatrix::zeros(r, c);
    for (b, &wk) in blocks.iter().zip(w) {
        if wk != 0.0 {
            out += b * wk;
        }
    }
    out
}

fn combine_vec(blocks: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(blocks.first().map_or(0, |b| b.len()));
    for (b, &wk) in blocks.iter().zip(w) {
        if wk != 0.0 {
            out += b * wk;
        }
    }
    out
}

struct Lu {
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    which: &'static str,
}

impl Lu {
    fn new(m: DMatrix<f64>, which: &'static str) -> Result<Self> {
        if m.nrows() == 0 {
            return Ok(Self { lu: None, which });
        }
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(SvrbError::RbSolveFailed(format!("singular reduced {which} matrix")));
        }
        Ok(Self { lu: Some(lu), which })
    }

    fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let Some(lu) = &self.lu else {
            return Ok(DVector::zeros(0));
        };
        match lu.solve(b) {
            Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
            _ => Err(SvrbError::RbSolveFailed(format!("reduced {} solve failed", self.which))),
        }
    }
}

/// Reduced operators assembled at one θ, with factorizations.
pub struct Online<'m> {
    rm: &'m ReducedModel,
    coeffs: CoefficientValues,
    a_u: DMatrix<f64>,
    a_psi: DMatrix<f64>,
    a_upsi: DMatrix<f64>,
    f_u: DVector<f64>,
    f_psi: DVector<f64>,
    lu_u: Lu,
    lu_psi: Lu,
    data: DVector<f64>,
    precision: DVector<f64>,
}

/// Reduced solutions and derived quantities at one θ.
#[derive(Debug, Clone)]
pub struct RbEvaluation {
    pub theta: Vec<f64>,
    pub u_r: DVector<f64>,
    pub psi_r: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub psi_hat: DVector<f64>,
    pub eta_r: f64,
    pub delta: f64,
    pub eta_delta: f64,
    pub grad_eta_r: Vec<f64>,
    pub grad_eta_delta: Vec<f64>,
}

impl Online<'_> {
    pub fn state(&self) -> Result<DVector<f64>> {
        self.lu_u.solve(&self.f_u)
    }

    /// `Γ⁻¹ (y − O_uᵀ u_r)`
    pub fn weighted_misfit(&self, u_r: &DVector<f64>) -> DVector<f64> {
        let r = &self.data - self.rm.o_u.tr_mul(u_r);
        r.component_mul(&self.precision)
    }

    pub fn eta(&self, u_r: &DVector<f64>) -> f64 {
        let r = &self.data - self.rm.o_u.tr_mul(u_r);
        0.5 * r.component_mul(&self.precision).dot(&r)
    }

    pub fn adjoint(&self, u_r: &DVector<f64>) -> Result<DVector<f64>> {
        // A_r^ψ is symmetric, so its factorization also serves the transposed system
        self.lu_psi.solve(&(&self.rm.o_psi * self.weighted_misfit(u_r)))
    }

    /// `Δ = ψ_rᵀ A^{uψ} u_r − ψ_rᵀ f^ψ`
    pub fn dwr(&self, u_r: &DVector<f64>, psi_r: &DVector<f64>) -> f64 {
        if psi_r.is_empty() {
            return 0.0;
        }
        psi_r.dot(&(&self.a_upsi * u_r - &self.f_psi))
    }

    /// Incremental adjoint and state `(ψ̂, û)`.
    pub fn incrementals(&self, u_r: &DVector<f64>, psi_r: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let psi_hat = self.lu_psi.solve(&(&self.f_psi - &self.a_upsi * u_r))?;
        let w = self.weighted_misfit(u_r);
        let mut rhs = &self.rm.o_u * w;
        if !psi_r.is_empty() {
            rhs -= self.a_upsi.tr_mul(psi_r);
            let o_psi_hat = self.rm.o_psi.tr_mul(&psi_hat).component_mul(&self.precision);
            rhs -= &self.rm.o_u * o_psi_hat;
        }
        let u_hat = self.lu_u.solve(&rhs)?;
        Ok((psi_hat, u_hat))
    }

    /// `Σ_k ∂θ_j cA_k lᵀ B_k r − Σ_k ∂θ_j cF_k lᵀ g_k` for every j.
    fn param_gradient(
        &self,
        blocks: &[DMatrix<f64>],
        left: &DVector<f64>,
        right: &DVector<f64>,
        loads: Option<&[DVector<f64>]>,
    ) -> Vec<f64> {
        let d = self.coeffs.da.ncols();
        let mut g = vec![0.0; d];
        if left.is_empty() || right.is_empty() {
            return g;
        }
        for (k, b) in blocks.iter().enumerate() {
            let row = self.coeffs.da.row(k);
            if row.iter().all(|&x| x == 0.0) {
                continue;
            }
            let v = left.dot(&(b * right));
            for j in 0..d {
                g[j] += row[j] * v;
            }
        }
        if let Some(loads) = loads {
            for (k, f) in loads.iter().enumerate() {
                let row = self.coeffs.df.row(k);
                if row.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let v = left.dot(f);
                for j in 0..d {
                    g[j] -= row[j] * v;
                }
            }
        }
        g
    }

    pub fn grad_eta_r(&self, u_r: &DVector<f64>, psi_r: &DVector<f64>) -> Vec<f64> {
        self.param_gradient(&self.rm.a_upsi, psi_r, u_r, Some(&self.rm.f_psi))
    }

    pub fn grad_eta_delta(
        &self,
        u_r: &DVector<f64>,
        psi_r: &DVector<f64>,
        u_hat: &DVector<f64>,
        psi_hat: &DVector<f64>,
    ) -> Vec<f64> {
        let mut g = self.grad_eta_r(u_r, psi_r);
        let g2 = self.param_gradient(&self.rm.a_u, u_hat, u_r, Some(&self.rm.f_u));
        let g3 = self.param_gradient(&self.rm.a_psi, psi_r, psi_hat, None);
        for j in 0..g.len() {
            g[j] += g2[j] + g3[j];
        }
        g
    }

    /// Reduced parameter sensitivities `(∂u_r, ∂ψ_r)` for every j.
    pub fn sensitivities(&self, u_r: &DVector<f64>, psi_r: &DVector<f64>) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let d = self.coeffs.da.ncols();
        let mut du = Vec::with_capacity(d);
        let mut dpsi = Vec::with_capacity(d);
        for j in 0..d {
            let mut rhs_u = DVector::zeros(u_r.len());
            let mut rhs_psi = DVector::zeros(psi_r.len());
            for (k, c) in self.coeffs.da.column(j).iter().enumerate() {
                if *c != 0.0 {
                    rhs_u -= &self.rm.a_u[k] * u_r * *c;
                    if !psi_r.is_empty() {
                        rhs_psi -= &self.rm.a_psi[k] * psi_r * *c;
                    }
                }
            }
            for (k, c) in self.coeffs.df.column(j).iter().enumerate() {
                if *c != 0.0 {
                    rhs_u += &self.rm.f_u[k] * *c;
                }
            }
            let duj = self.lu_u.solve(&rhs_u)?;
            if !psi_r.is_empty() {
                let w = self.rm.o_u.tr_mul(&duj).component_mul(&self.precision);
                rhs_psi -= &self.rm.o_psi * w;
            }
            dpsi.push(self.lu_psi.solve(&rhs_psi)?);
            du.push(duj);
        }
        Ok((du, dpsi))
    }

    pub fn reduced_state_matrix(&self) -> &DMatrix<f64> {
        &self.a_u
    }

    pub fn reduced_adjoint_matrix(&self) -> &DMatrix<f64> {
        &self.a_psi
    }

    /// Potential, DWR, and both gradients.
    pub fn evaluate(&self, theta: &[f64]) -> Result<RbEvaluation> {
        let u_r = self.state()?;
        let psi_r = self.adjoint(&u_r)?;
        let eta_r = self.eta(&u_r);
        let delta = self.dwr(&u_r, &psi_r);
        let (psi_hat, u_hat) = self.incrementals(&u_r, &psi_r)?;
        let grad_eta_r = self.grad_eta_r(&u_r, &psi_r);
        let grad_eta_delta = self.grad_eta_delta(&u_r, &psi_r, &u_hat, &psi_hat);
        Ok(RbEvaluation {
            theta: theta.to_vec(),
            u_r,
            psi_r,
            u_hat,
            psi_hat,
            eta_r,
            delta,
            eta_delta: eta_r + delta,
            grad_eta_r,
            grad_eta_delta,
        })
    }
}

/// Reduced potential values only: `(η_r, η_Δ, Δ)`.
#[derive(Debug, Clone, Copy)]
pub struct RbPotential {
    pub eta_r: f64,
    pub eta_delta: f64,
    pub delta: f64,
}

pub fn rb_state(rm: &ReducedModel, problem: &AffineProblem, theta: &[f64]) -> Result<DVector<f64>> {
    rm.online(problem, theta)?.state()
}

pub fn rb_adjoint(rm: &ReducedModel, problem: &AffineProblem, theta: &[f64], u_r: &DVector<f64>) -> Result<DVector<f64>> {
    rm.online(problem, theta)?.adjoint(u_r)
}

pub fn dwr(rm: &ReducedModel, problem: &AffineProblem, theta: &[f64], u_r: &DVector<f64>, psi_r: &DVector<f64>) -> Result<f64> {
    Ok(rm.online(problem, theta)?.dwr(u_r, psi_r))
}

pub fn rb_potential(rm: &ReducedModel, problem: &AffineProblem, theta: &[f64]) -> Result<RbPotential> {
    let on = rm.online(problem, theta)?;
    let u_r = on.state()?;
    let psi_r = on.adjoint(&u_r)?;
    let eta_r = on.eta(&u_r);
    let delta = on.dwr(&u_r, &psi_r);
    Ok(RbPotential {
        eta_r,
        eta_delta: eta_r + delta,
        delta,
    })
}

pub fn rb_grad_potential(rm: &ReducedModel, problem: &AffineProblem, theta: &[f64]) -> Result<RbEvaluation> {
    rm.online(problem, theta)?.evaluate(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::case::CaseConfig;
    use crate::hifi;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn built(cfg: CaseConfig, count: usize, seed: u64) -> (AffineProblem, ReducedModel, Vec<Vec<f64>>) {
        let p = AffineProblem::assemble(&cfg).unwrap();
        let mut rm = ReducedModel::empty(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut thetas = Vec::new();
        while thetas.len() < count {
            let th: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-1.2..1.2)).collect();
            let Ok(ev) = hifi::grad_potential(&p, &th) else { continue };
            rm.enrich(&p, &ev.u, &ev.psi, &th);
            thetas.push(th);
        }
        (p, rm, thetas)
    }

    fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    #[test]
    fn deflation_keeps_basis_unchanged() {
        let (p, mut rm, thetas) = built(CaseConfig::uniform4(8), 1, 1);
        let ev = hifi::grad_potential(&p, &thetas[0]).unwrap();
        assert_eq!((rm.n_u(), rm.n_psi()), (1, 1));
        let out = rm.enrich(&p, &ev.u, &ev.psi, &thetas[0]);
        assert!(!out.state_added && !out.adjoint_added);
        assert_eq!((rm.n_u(), rm.n_psi()), (1, 1));
    }

    #[test]
    fn snapshots_are_reproduced() {
        let (p, rm, thetas) = built(CaseConfig::uniform4(9), 4, 2);
        assert!(rm.orthonormality_defect(&p) < 1e-10);
        assert!(rm.block_defect(&p) < 1e-10);
        for th in &thetas {
            let ev = hifi::grad_potential(&p, th).unwrap();
            let on = rm.online(&p, th).unwrap();
            let u_r = on.state().unwrap();
            let psi_r = on.adjoint(&u_r).unwrap();
            let eu = sub(&ev.u, &rm.reconstruct(u_r.as_slice(), Space::State));
            assert!(p.v_norm(&eu) < 1e-9 * p.v_norm(&ev.u));
            let epsi = sub(&ev.psi, &rm.reconstruct(psi_r.as_slice(), Space::Adjoint));
            assert!(p.v_norm(&epsi) < 1e-9 * p.v_norm(&ev.psi).max(1e-300));
            let pot = rb_potential(&rm, &p, th).unwrap();
            assert!(pot.delta.abs() < 1e-9 * ev.eta.max(1.0));
            assert!((pot.eta_r - ev.eta).abs() < 1e-9 * ev.eta.max(1.0));
            assert!((pot.eta_delta - ev.eta).abs() < 1e-9 * ev.eta.max(1.0));
            let (psi_hat, _) = on.incrementals(&u_r, &psi_r).unwrap();
            assert!(psi_hat.norm() < 1e-8);
        }
    }

    #[test]
    fn full_basis_equals_hifi() {
        let p = AffineProblem::assemble(&CaseConfig::uniform4(3)).unwrap();
        let mut rm = ReducedModel::empty(&p);
        let n = p.num_dofs();
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            rm.add_vector(&p, Space::State, &e);
            rm.add_vector(&p, Space::Adjoint, &e);
        }
        assert_eq!(rm.n_u(), n);
        let th = [0.4, -0.3, 0.2, 0.9];
        let ev = hifi::grad_potential(&p, &th).unwrap();
        let r = rb_grad_potential(&rm, &p, &th).unwrap();
        let eu = sub(&ev.u, &rm.reconstruct(r.u_r.as_slice(), Space::State));
        assert!(p.v_norm(&eu) < 1e-10 * p.v_norm(&ev.u));
        assert!((r.eta_r - ev.eta).abs() < 1e-9 * ev.eta);
        assert!(r.delta.abs() < 1e-9 * ev.eta);
        for j in 0..4 {
            assert!((r.grad_eta_r[j] - ev.grad_eta[j]).abs() < 1e-8 * ev.grad_eta[j].abs().max(1.0));
        }
    }

    #[test]
    fn dwr_identity_and_galerkin_orthogonality() {
        let (p, rm, _) = built(CaseConfig::uniform4(10), 3, 3);
        let th = [0.7, -0.6, 0.1, 0.5];
        let ev = hifi::grad_potential(&p, &th).unwrap();
        let on = rm.online(&p, &th).unwrap();
        let u_r = on.state().unwrap();
        let psi_r = on.adjoint(&u_r).unwrap();
        let ur = rm.reconstruct(u_r.as_slice(), Space::State);
        let psir = rm.reconstruct(psi_r.as_slice(), Space::Adjoint);
        let eu = sub(&ev.u, &ur);
        let full = -p.a_form(&th, &eu, &psir);
        let delta = on.dwr(&u_r, &psi_r);
        assert!((delta - full).abs() <= 1e-10 * delta.abs().max(1e-14));

        let (a, f) = p.assemble_operator(&th).unwrap();
        let res = sub(&a.matvec(&ur), &f);
        for phi in rm.basis(Space::State) {
            assert!(dot(phi, &res).abs() < 1e-9 * crate::fem::norm2(&f));
        }
    }

    fn fd_check(cfg: CaseConfig, seed: u64) {
        let (p, rm, _) = built(cfg, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let th: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rb_grad_potential(&rm, &p, &th).unwrap();
        let h = 1e-5;
        for j in 0..p.dim() {
            let mut tp = th.clone();
            let mut tm = th.clone();
            tp[j] += h;
            tm[j] -= h;
            let (pp, pm) = (rb_potential(&rm, &p, &tp).unwrap(), rb_potential(&rm, &p, &tm).unwrap());
            let fd_delta = (pp.eta_delta - pm.eta_delta) / (2.0 * h);
            let s = r.eta_delta.abs().max(1.0) * 1e-9;
            assert!(
                (fd_delta - r.grad_eta_delta[j]).abs() <= 1e-5 * r.grad_eta_delta[j].abs().max(s),
                "corrected j={j}: fd {fd_delta} vs {}",
                r.grad_eta_delta[j]
            );
        }
    }

    #[test]
    fn plain_gradient_is_exact_when_spaces_coincide() {
        let p = AffineProblem::assemble(&CaseConfig::uniform4(10)).unwrap();
        let mut rm = ReducedModel::empty(&p);
        for th in [[0.5, 0.1, -0.3, 0.2], [-0.4, 0.8, 0.3, -0.9], [1.0, -1.0, 0.6, 0.0]] {
            let u = hifi::solve_state(&p, &th).unwrap();
            rm.add_vector(&p, Space::State, &u);
            rm.add_vector(&p, Space::Adjoint, &u);
        }
        let th = [0.2, 0.3, -0.7, 0.4];
        let r = rb_grad_potential(&rm, &p, &th).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut tp = th;
            let mut tm = th;
            tp[j] += h;
            tm[j] -= h;
            let fd = (rb_potential(&rm, &p, &tp).unwrap().eta_r - rb_potential(&rm, &p, &tm).unwrap().eta_r) / (2.0 * h);
            assert!((fd - r.grad_eta_r[j]).abs() <= 1e-5 * r.grad_eta_r[j].abs());
        }
    }

    #[test]
    fn corrected_gradient_matches_fd_uniform() {
        fd_check(CaseConfig::uniform4(12), 4);
    }

    #[test]
    fn corrected_gradient_matches_fd_gaussian() {
        fd_check(CaseConfig::gaussian9(9), 5);
    }

    #[test]
    fn truncation_replays_stages() {
        let (p, rm, thetas) = built(CaseConfig::uniform4(8), 4, 6);
        let first = rm.at_stage(1);
        assert_eq!(first.n_u(), 1);
        assert_eq!(first.stages().len(), 1);
        let (_, rm1, _) = {
            let mut m = ReducedModel::empty(&p);
            let ev = hifi::grad_potential(&p, &thetas[0]).unwrap();
            m.enrich(&p, &ev.u, &ev.psi, &thetas[0]);
            (0, m, 0)
        };
        let a = rb_potential(&first, &p, &thetas[2]).unwrap();
        let b = rb_potential(&rm1, &p, &thetas[2]).unwrap();
        assert!((a.eta_delta - b.eta_delta).abs() < 1e-12 * a.eta_delta.abs().max(1.0));
    }

    #[test]
    fn json_roundtrip() {
        let (p, rm, thetas) = built(CaseConfig::uniform4(6), 2, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rb.json");
        rm.save_json(&path).unwrap();
        let back = ReducedModel::load_json(&path, &p).unwrap();
        let a = rb_potential(&rm, &p, &thetas[1]).unwrap();
        let b = rb_potential(&back, &p, &thetas[1]).unwrap();
        assert_eq!(a.eta_delta, b.eta_delta);
        let other = AffineProblem::assemble(&CaseConfig::uniform4(7)).unwrap();
        assert!(ReducedModel::load_json(&path, &other).is_err());
    }

    #[test]
    fn reconstruct_basics() {
        let (p, rm, _) = built(CaseConfig::uniform4(6), 3, 8);
        assert!(rm.reconstruct(&[0.0; 3], Space::State).iter().all(|&x| x == 0.0));
        let e1 = rm.reconstruct(&[0.0, 1.0, 0.0], Space::State);
        assert_eq!(e1, rm.basis(Space::State)[1]);
        let c = rm.project(&p, &rm.basis(Space::State)[2], Space::State);
        assert!((c[2] - 1.0).abs() < 1e-10 && c[0].abs() < 1e-10 && c[1].abs() < 1e-10);
    }

    #[test]
    fn empty_basis_is_an_error() {
        let p = AffineProblem::assemble(&CaseConfig::uniform4(4)).unwrap();
        let rm = ReducedModel::empty(&p);
        assert!(matches!(rb_state(&rm, &p, &[0.0; 4]), Err(SvrbError::RbSolveFailed(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn enrichment_is_monotone_and_orthonormal(seeds in proptest::collection::vec(0u64..1000, 1..5)) {
            let p = AffineProblem::assemble(&CaseConfig::uniform4(5)).unwrap();
            let mut rm = ReducedModel::empty(&p);
            let mut last = (0, 0);
            for s in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let th: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ev = hifi::grad_potential(&p, &th).unwrap();
                rm.enrich(&p, &ev.u, &ev.psi, &th);
                prop_assert!(rm.n_u() >= last.0 && rm.n_psi() >= last.1);
                last = (rm.n_u(), rm.n_psi());
                prop_assert!(rm.orthonormality_defect(&p) < 1e-10);
            }
        }
    }
}
