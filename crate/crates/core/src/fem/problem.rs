use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use faer::sparse::linalg::solvers::Llt;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::case::{validate_terms, CaseConfig, Coefficient, FieldSpec, LinearSolver, PriorSpec};
use super::mesh::{Edge, MeshGrid};
use super::sparse::{dot, llt_solve, SparsityPattern, SymSparse};
use crate::error::{Result, SvrbError};

/// Numbering of the unconstrained nodes (everything off the bottom and top edges).
#[derive(Debug, Clone)]
pub struct DofMap {
    free_of_node: Vec<Option<usize>>,
    node_of_free: Vec<usize>,
}

impl DofMap {
    fn new(mesh: &MeshGrid) -> Self {
        let mut free_of_node = vec![None; mesh.num_nodes()];
        let mut node_of_free = Vec::new();
        for (node, slot) in free_of_node.iter_mut().enumerate() {
            if !(mesh.on_edge(node, Edge::Bottom) || mesh.on_edge(node, Edge::Top)) {
                *slot = Some(node_of_free.len());
                node_of_free.push(node);
            }
        }
        Self {
            free_of_node,
            node_of_free,
        }
    }

    pub fn num_free(&self) -> usize {
        self.node_of_free.len()
    }

    pub fn free(&self, node: usize) -> Option<usize> {
        self.free_of_node[node]
    }

    pub fn node(&self, dof: usize) -> usize {
        self.node_of_free[dof]
    }

    /// Dirichlet-constrained nodes.
    pub fn constrained_nodes(&self) -> Vec<usize> {
        (0..self.free_of_node.len())
            .filter(|&n| self.free_of_node[n].is_none())
            .collect()
    }

    /// Scatters a free-DOF vector onto all nodes (zeros on the Dirichlet edges).
    pub fn expand(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.free_of_node.len()];
        for (k, &node) in self.node_of_free.iter().enumerate() {
            out[node] = v[k];
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTerm {
    pub coefficient: Coefficient,
    pub field: FieldSpec,
    pub matrix: SymSparse,
    /// Field values at every quadrature point of the mesh.
    qp_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LoadTerm {
    pub coefficient: Coefficient,
    pub field: FieldSpec,
    pub vector: Vec<f64>,
}

/// Point evaluations `o_i(v) = v(x_i)` as sparse columns of barycentric weights.
#[derive(Debug, Clone)]
pub struct ObservationOperator {
    points: Vec<[f64; 2]>,
    columns: Vec<Vec<(usize, f64)>>,
    n: usize,
}

impl ObservationOperator {
    pub fn num_obs(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// `O_h^T v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|col| col.iter().map(|&(k, w)| w * v[k]).sum())
            .collect()
    }

    /// `O_h w`, the functional `v -> w · O(v)` as a DOF vector.
    pub fn transpose_apply(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (col, &wi) in self.columns.iter().zip(w) {
            for &(k, c) in col {
                out[k] += wi * c;
            }
        }
        out
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(k, c) in &self.columns[i] {
            out[k] += c;
        }
        out
    }
}

/// Values and exact θ-gradients of the affine coefficients.
#[derive(Debug, Clone)]
pub struct CoefficientValues {
    pub a: Vec<f64>,
    pub f: Vec<f64>,
    /// `J_A x d`
    pub da: DMatrix<f64>,
    /// `J_F x d`
    pub df: DMatrix<f64>,
}

/// All θ-independent finite-element objects of an affine-parametric diffusion problem.
#[derive(Debug)]
pub struct AffineProblem {
    config: CaseConfig,
    mesh: MeshGrid,
    dofs: DofMap,
    pattern: Arc<SparsityPattern>,
    diffusion: Vec<DiffusionTerm>,
    loads: Vec<LoadTerm>,
    obs: ObservationOperator,
    gram: SymSparse,
    gram_factor: Llt<usize, f64>,
    mass: SymSparse,
    qp_weights: Vec<f64>,
    data: Vec<f64>,
    noise_precision: Vec<f64>,
    sigma: f64,
    prior: PriorSpec,
    theta_data: Vec<f64>,
    factorizations: AtomicUsize,
}

// Strang-Fix 3-point rule, degree 2.
const QP3: [[f64; 2]; 3] = [[1.0 / 6.0, 1.0 / 6.0], [2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0]];

impl AffineProblem {
    /// Builds the mesh, assembles every affine block and synthesizes the data.
    pub fn assemble(config: &CaseConfig) -> Result<Self> {
        let case = config.resolve()?;
        validate_terms(&case)?;
        let dim = case.prior.dim();
        let mesh = MeshGrid::new(config.mesh)?;
        if config.mesh < 2 {
            return Err(SvrbError::Config("mesh must have at least 2 cells per side".into()));
        }
        let dofs = DofMap::new(&mesh);
        let n = dofs.num_free();

        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for tri in mesh.triangles() {
            for &a in tri {
                for &b in tri {
                    if let (Some(i), Some(j)) = (dofs.free(a), dofs.free(b)) {
                        rows[i].push(j);
                    }
                }
            }
        }
        let pattern = Arc::new(SparsityPattern::from_rows(rows)?);

        let centroid_rule = case.diffusion.iter().all(|t| t.field.is_piecewise_constant());
        let local_points: Vec<[f64; 2]> = if centroid_rule {
            vec![[1.0 / 3.0, 1.0 / 3.0]]
        } else {
            QP3.to_vec()
        };
        let nq = local_points.len();

        // geometric data per triangle
        let ntri = mesh.num_triangles();
        let mut grads = Vec::with_capacity(ntri);
        let mut areas = Vec::with_capacity(ntri);
        let mut qps = Vec::with_capacity(ntri * nq);
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let p: Vec<[f64; 2]> = tri.iter().map(|&v| mesh.coords()[v]).collect();
            let det = mesh.signed_area2(t);
            areas.push(0.5 * det);
            let g = [
                [(p[1][1] - p[2][1]) / det, (p[2][0] - p[1][0]) / det],
                [(p[2][1] - p[0][1]) / det, (p[0][0] - p[2][0]) / det],
                [(p[0][1] - p[1][1]) / det, (p[1][0] - p[0][0]) / det],
            ];
            grads.push(g);
            for lp in &local_points {
                let (s, r) = (lp[0], lp[1]);
                qps.push([
                    p[0][0] + s * (p[1][0] - p[0][0]) + r * (p[2][0] - p[0][0]),
                    p[0][1] + s * (p[1][1] - p[0][1]) + r * (p[2][1] - p[0][1]),
                ]);
            }
        }
        let qp_weights: Vec<f64> = areas
            .iter()
            .flat_map(|&a| std::iter::repeat_n(a / nq as f64, nq))
            .collect();

        let stiffness = |qp_values: &[f64]| {
            let mut m = SymSparse::zeros(pattern.clone());
            for (t, tri) in mesh.triangles().iter().enumerate() {
                let mean: f64 = qp_values[t * nq..(t + 1) * nq].iter().sum::<f64>() / nq as f64;
                if mean == 0.0 {
                    continue;
                }
                let g = &grads[t];
                for a in 0..3 {
                    let Some(i) = dofs.free(tri[a]) else { continue };
                    for b in 0..3 {
                        let Some(j) = dofs.free(tri[b]) else { continue };
                        let k = areas[t] * mean * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                        m.add_at(i, j, k);
                    }
                }
            }
            m
        };

        let diffusion: Vec<DiffusionTerm> = case
            .diffusion
            .iter()
            .map(|term| {
                let qp_values: Vec<f64> = qps.iter().map(|&x| term.field.eval(x)).collect();
                DiffusionTerm {
                    coefficient: term.coefficient.clone(),
                    field: term.field.clone(),
                    matrix: stiffness(&qp_values),
                    qp_values,
                }
            })
            .collect();

        // load vectors: ∫ f φ_a with the 3-point rule (exact for constant f)
        let loads: Vec<LoadTerm> = case
            .load
            .iter()
            .map(|term| {
                let mut v = vec![0.0; n];
                for (t, tri) in mesh.triangles().iter().enumerate() {
                    let p: Vec<[f64; 2]> = tri.iter().map(|&x| mesh.coords()[x]).collect();
                    for lp in &QP3 {
                        let (s, r) = (lp[0], lp[1]);
                        let x = [
                            p[0][0] + s * (p[1][0] - p[0][0]) + r * (p[2][0] - p[0][0]),
                            p[0][1] + s * (p[1][1] - p[0][1]) + r * (p[2][1] - p[0][1]),
                        ];
                        let fx = term.field.eval(x) * areas[t] / 3.0;
                        let phi = [1.0 - s - r, s, r];
                        for a in 0..3 {
                            if let Some(i) = dofs.free(tri[a]) {
                                v[i] += fx * phi[a];
                            }
                        }
                    }
                }
                LoadTerm {
                    coefficient: term.coefficient.clone(),
                    field: term.field.clone(),
                    vector: v,
                }
            })
            .collect();

        let unit = stiffness(&vec![1.0; qps.len()]);
        let mut mass = SymSparse::zeros(pattern.clone());
        for (t, tri) in mesh.triangles().iter().enumerate() {
            for a in 0..3 {
                let Some(i) = dofs.free(tri[a]) else { continue };
                for b in 0..3 {
                    let Some(j) = dofs.free(tri[b]) else { continue };
                    let w = if a == b { 2.0 } else { 1.0 };
                    mass.add_at(i, j, areas[t] * w / 12.0);
                }
            }
        }
        let gram = SymSparse::combine(&[&unit, &mass], &[1.0, 1.0]);
        let gram_factor = gram.cholesky().map_err(|e| {
            SvrbError::Factorization(format!("Gram matrix is not positive definite: {e}"))
        })?;

        let points = match &case.observations {
            Some(p) => p.clone(),
            None => interior_grid(config.observation_grid),
        };
        let mut columns = Vec::with_capacity(points.len());
        for &p in &points {
            let (t, w) = mesh.locate(p).ok_or_else(|| {
                SvrbError::Config(format!("observation point ({}, {}) outside the domain", p[0], p[1]))
            })?;
            let tri = mesh.triangles()[t];
            let col: Vec<(usize, f64)> = (0..3)
                .filter_map(|k| dofs.free(tri[k]).map(|i| (i, w[k])))
                .filter(|&(_, c)| c != 0.0)
                .collect();
            columns.push(col);
        }
        let obs = ObservationOperator { points, columns, n };

        let theta_ref = config.theta_ref.clone().unwrap_or_else(|| vec![1.0; dim]);
        let theta_data = config.theta_data.clone().unwrap_or_else(|| theta_ref.clone());
        for th in [&theta_ref, &theta_data] {
            if th.len() != dim {
                return Err(SvrbError::Dimension {
                    expected: dim,
                    got: th.len(),
                });
            }
        }

        let mut problem = Self {
            config: config.clone(),
            mesh,
            dofs,
            pattern,
            diffusion,
            loads,
            noise_precision: vec![1.0; obs.num_obs()],
            data: vec![0.0; obs.num_obs()],
            obs,
            gram,
            gram_factor,
            mass,
            qp_weights,
            sigma: 1.0,
            prior: case.prior,
            theta_data: theta_data.clone(),
            factorizations: AtomicUsize::new(0),
        };

        let u_ref = crate::hifi::solve_state(&problem, &theta_ref)?;
        let o_ref = problem.obs.apply(&u_ref);
        let max_obs = o_ref.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sigma = config.noise_level * max_obs;
        if !(sigma > 0.0) {
            return Err(SvrbError::Config(format!(
                "noise standard deviation must be positive (got {sigma:e})"
            )));
        }
        let u_data = crate::hifi::solve_state(&problem, &theta_data)?;
        let mut y = problem.obs.apply(&u_data);
        if config.add_noise {
            let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed);
            for yi in &mut y {
                let xi: f64 = StandardNormal.sample(&mut rng);
                *yi += sigma * xi;
            }
        }
        problem.sigma = sigma;
        problem.noise_precision = vec![1.0 / (sigma * sigma); y.len()];
        problem.data = y;
        problem.factorizations.store(0, Ordering::Relaxed);
        Ok(problem)
    }

    pub fn config(&self) -> &CaseConfig {
        &self.config
    }

    pub fn mesh(&self) -> &MeshGrid {
        &self.mesh
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    /// Constrained (solved-for) DOF count.
    pub fn num_dofs(&self) -> usize {
        self.dofs.num_free()
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn diffusion_terms(&self) -> &[DiffusionTerm] {
        &self.diffusion
    }

    pub fn load_terms(&self) -> &[LoadTerm] {
        &self.loads
    }

    pub fn observations(&self) -> &ObservationOperator {
        &self.obs
    }

    pub fn gram(&self) -> &SymSparse {
        &self.gram
    }

    pub fn mass(&self) -> &SymSparse {
        &self.mass
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Diagonal of Γ⁻¹.
    pub fn noise_precision(&self) -> &[f64] {
        &self.noise_precision
    }

    pub fn noise_sigma(&self) -> f64 {
        self.sigma
    }

    pub fn theta_data(&self) -> &[f64] {
        &self.theta_data
    }

    pub fn solver(&self) -> LinearSolver {
        self.config.solver
    }

    pub fn coercivity_floor(&self) -> f64 {
        self.config.coercivity_floor
    }

    /// Replaces the observed data.
    pub fn set_data(&mut self, y: Vec<f64>) -> Result<()> {
        if y.len() != self.obs.num_obs() {
            return Err(SvrbError::Dimension {
                expected: self.obs.num_obs(),
                got: y.len(),
            });
        }
        self.data = y;
        Ok(())
    }

    /// Replaces the diagonal noise precision Γ⁻¹.
    pub fn set_noise_precision(&mut self, p: Vec<f64>) -> Result<()> {
        if p.len() != self.obs.num_obs() || p.iter().any(|&x| !(x > 0.0)) {
            return Err(SvrbError::Config("noise precision must be positive per observation".into()));
        }
        self.noise_precision = p;
        Ok(())
    }

    pub fn count_factorization(&self) {
        self.factorizations.fetch_add(1, Ordering::Relaxed);
    }

    /// Number of operator factorizations performed so far.
    pub fn factorization_count(&self) -> usize {
        self.factorizations.load(Ordering::Relaxed)
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(SvrbError::Dimension {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(SvrbError::Config("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn eval_coefficients(&self, theta: &[f64]) -> CoefficientValues {
        let d = self.dim();
        let mut da = DMatrix::zeros(self.diffusion.len(), d);
        let mut df = DMatrix::zeros(self.loads.len(), d);
        let a = self.diffusion.iter().map(|t| t.coefficient.value(theta)).collect();
        let f = self.loads.iter().map(|t| t.coefficient.value(theta)).collect();
        for (k, t) in self.diffusion.iter().enumerate() {
            if let Some((j, v)) = t.coefficient.derivative(theta) {
                da[(k, j)] = v;
            }
        }
        for (k, t) in self.loads.iter().enumerate() {
            if let Some((j, v)) = t.coefficient.derivative(theta) {
                df[(k, j)] = v;
            }
        }
        CoefficientValues { a, f, da, df }
    }

    /// Values of `a(θ, ·)` at all quadrature points.
    pub fn field_at_quadrature(&self, theta: &[f64]) -> Vec<f64> {
        let c = self.eval_coefficients(theta);
        combine_qp(&self.diffusion, &c.a)
    }

    /// Values of `∂θ_j a(θ, ·)` at all quadrature points.
    pub fn field_derivative_at_quadrature(&self, theta: &[f64], j: usize) -> Vec<f64> {
        let c = self.eval_coefficients(theta);
        let w: Vec<f64> = (0..self.diffusion.len()).map(|k| c.da[(k, j)]).collect();
        combine_qp(&self.diffusion, &w)
    }

    /// Quadrature weights matching [`field_at_quadrature`](Self::field_at_quadrature).
    pub fn quadrature_weights(&self) -> &[f64] {
        &self.qp_weights
    }

    /// Fails with `CoercivityLost` when `min a(θ,·)` is at or below the floor.
    pub fn check_coercivity(&self, theta: &[f64]) -> Result<f64> {
        let min = self
            .field_at_quadrature(theta)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min <= self.config.coercivity_floor {
            Err(SvrbError::CoercivityLost {
                min_value: min,
                floor: self.config.coercivity_floor,
            })
        } else {
            Ok(min)
        }
    }

    /// `A_h(θ)` and `f_h(θ)`.
    pub fn assemble_operator(&self, theta: &[f64]) -> Result<(SymSparse, Vec<f64>)> {
        self.check_theta(theta)?;
        self.check_coercivity(theta)?;
        let c = self.eval_coefficients(theta);
        Ok((self.combine_matrices(&c.a), self.combine_loads(&c.f)))
    }

    pub fn combine_matrices(&self, weights: &[f64]) -> SymSparse {
        let mats: Vec<&SymSparse> = self.diffusion.iter().map(|t| &t.matrix).collect();
        SymSparse::combine(&mats, weights)
    }

    pub fn combine_loads(&self, weights: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.num_dofs()];
        for (t, &w) in self.loads.iter().zip(weights) {
            for (acc, v) in f.iter_mut().zip(&t.vector) {
                *acc += w * v;
            }
        }
        f
    }

    /// `A(w, v; θ) = Σ_j c_j(θ) wᵀ A_j v`.
    pub fn a_form(&self, theta: &[f64], w: &[f64], v: &[f64]) -> f64 {
        let c = self.eval_coefficients(theta);
        self.diffusion
            .iter()
            .zip(&c.a)
            .filter(|(_, &ck)| ck != 0.0)
            .map(|(t, &ck)| ck * t.matrix.bilinear(w, v))
            .sum()
    }

    /// `F(v; θ)`.
    pub fn f_form(&self, theta: &[f64], v: &[f64]) -> f64 {
        let c = self.eval_coefficients(theta);
        self.loads.iter().zip(&c.f).map(|(t, &ck)| ck * dot(&t.vector, v)).sum()
    }

    /// Misfit `y - O_h^T u`.
    pub fn misfit(&self, u: &[f64]) -> Vec<f64> {
        self.obs
            .apply(u)
            .iter()
            .zip(&self.data)
            .map(|(o, y)| y - o)
            .collect()
    }

    /// `½ rᵀ Γ⁻¹ r` for a misfit vector `r`.
    pub fn weighted_half_norm(&self, r: &[f64]) -> f64 {
        0.5 * r.iter().zip(&self.noise_precision).map(|(x, p)| p * x * x).sum::<f64>()
    }

    pub fn v_inner(&self, v: &[f64], w: &[f64]) -> f64 {
        self.gram.bilinear(v, w)
    }

    pub fn v_norm(&self, v: &[f64]) -> f64 {
        self.v_inner(v, v).max(0.0).sqrt()
    }

    /// `sqrt(gᵀ X_h⁻¹ g)`: the V'-norm of a functional via its Riesz representative.
    pub fn dual_norm(&self, g: &[f64]) -> f64 {
        let z = self.riesz(g);
        dot(g, &z).max(0.0).sqrt()
    }

    /// Riesz representative `X_h⁻¹ g`.
    pub fn riesz(&self, g: &[f64]) -> Vec<f64> {
        llt_solve(&self.gram_factor, g)
    }

    /// Writes every assembled matrix and vector into `dir` in MatrixMarket format.
    pub fn dump_matrices(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let write = |name: &str, m: &SymSparse| -> Result<()> {
            let f = std::fs::File::create(dir.join(name))?;
            m.write_matrix_market(std::io::BufWriter::new(f))?;
            Ok(())
        };
        for (j, t) in self.diffusion.iter().enumerate() {
            write(&format!("A_{j}.mtx"), &t.matrix)?;
        }
        write("gram.mtx", &self.gram)?;
        write("mass.mtx", &self.mass)?;
        for (j, t) in self.loads.iter().enumerate() {
            let mut s = format!("%%MatrixMarket matrix array real general\n{} 1\n", t.vector.len());
            for v in &t.vector {
                s.push_str(&format!("{v:e}\n"));
            }
            std::fs::write(dir.join(format!("f_{j}.mtx")), s)?;
        }
        Ok(())
    }
}

fn combine_qp(terms: &[DiffusionTerm], weights: &[f64]) -> Vec<f64> {
    let nq = terms[0].qp_values.len();
    let mut out = vec![0.0; nq];
    for (t, &w) in terms.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (acc, v) in out.iter_mut().zip(&t.qp_values) {
            *acc += w * v;
        }
    }
    out
}

/// Interior `g x g` grid at `(i/(g+1), j/(g+1))`, row-major from the bottom.
pub fn interior_grid(g: usize) -> Vec<[f64; 2]> {
    let h = 1.0 / (g + 1) as f64;
    let mut pts = Vec::with_capacity(g * g);
    for j in 1..=g {
        for i in 1..=g {
            pts.push([i as f64 * h, j as f64 * h]);
        }
    }
    pts
}
