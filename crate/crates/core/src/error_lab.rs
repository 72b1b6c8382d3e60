//! True errors against the full model, residual dual norms, stability constants and bound checks.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fem::AffineProblem;
use crate::hifi::Operator;
use crate::par;
use crate::rb::{ReducedModel, Space};
use crate::svgd::Snapshot;

/// Poincaré constant for the unit square with Dirichlet data on two opposite sides.
pub const POINCARE: f64 = 1.0 / std::f64::consts::PI;

/// Relative slack allowed when comparing the two sides of a bound.
pub const BOUND_SLACK: f64 = 1e-8;

/// Absolute floor for error quantities, in units of the magnitude being differenced.
pub const ROUNDOFF: f64 = 100.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsBundle {
    pub alpha: f64,
    pub gamma: f64,
    pub rho: Vec<f64>,
    /// `‖F(θ)‖_{V'}`
    pub load_dual: f64,
    /// `‖∂θ_j F(θ)‖_{V'}`
    pub d_load_dual: Vec<f64>,
    pub c_u: f64,
    pub c_psi: f64,
    pub c_y: f64,
    pub c_o: f64,
    pub c_alpha_u: f64,
    pub c_alpha_gamma: f64,
    pub c_alpha_gamma_o: f64,
}

impl ConstantsBundle {
    /// Derived constants from the primary ones.
    pub fn derive(alpha: f64, gamma: f64, rho: Vec<f64>, load_dual: f64, d_load_dual: Vec<f64>, c_y: f64, c_o: f64) -> Self {
        let c_u = load_dual / alpha;
        let c_psi = c_y / alpha + c_o * c_u / alpha;
        Self {
            alpha,
            gamma,
            rho,
            load_dual,
            d_load_dual,
            c_u,
            c_psi,
            c_y,
            c_o,
            c_alpha_u: (c_y + c_o * c_u) / alpha,
            c_alpha_gamma: gamma / (alpha * alpha),
            c_alpha_gamma_o: (2.0 * gamma * c_o + alpha * c_o) / (2.0 * alpha.powi(3)),
        }
    }

    /// Same bundle with `alpha` replaced and everything downstream recomputed.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self::derive(
            alpha,
            self.gamma,
            self.rho.clone(),
            self.load_dual,
            self.d_load_dual.clone(),
            self.c_y,
            self.c_o,
        )
    }

    pub fn rho_sum(&self) -> f64 {
        self.rho.iter().sum()
    }

    pub fn d_load_sum(&self) -> f64 {
        self.d_load_dual.iter().sum()
    }
}

/// Errors of the reduced model at one θ, with the residual norms that control them.
///
/// Gradient norms over `V^d` are sums over the parameter components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub theta: Vec<f64>,
    pub n_u: usize,
    pub n_psi: usize,
    pub eta_h: f64,
    pub grad_eta_h_l1: f64,
    pub eta_r: f64,
    pub delta: f64,
    pub e_u: f64,
    pub e_psi: f64,
    pub e_eta: f64,
    pub e_delta: f64,
    pub grad_e_eta_l1: f64,
    pub grad_e_delta_l1: f64,
    pub grad_e_u: f64,
    pub grad_e_psi: f64,
    pub r_u: f64,
    pub r_psi: f64,
    pub r_u_j: Vec<f64>,
    pub r_psi_j: Vec<f64>,
    pub u_h: f64,
    pub u_r: f64,
    pub psi_h: f64,
    pub psi_r: f64,
    pub grad_u_h: f64,
    pub grad_u_r: f64,
    pub grad_psi_h: f64,
    pub grad_psi_r: f64,
    /// `−A(e_u, ψ_r; θ)`
    pub dwr_identity: f64,
    /// `−A(e_u, e_ψ; θ) − ½ O(e_u)ᵀ Γ⁻¹ O(e_u)`
    pub e_delta_identity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theta: Vec<f64>,
    pub checks: Vec<BoundCheck>,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BoundCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Residual dual norms `‖R_u‖, ‖R_ψ‖, ‖R_u^j‖, ‖R_ψ^j‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNorms {
    pub r_u: f64,
    pub r_psi: f64,
    pub r_u_j: Vec<f64>,
    pub r_psi_j: Vec<f64>,
}

/// Full-model reference at one θ.
#[derive(Debug, Clone)]
pub struct HiFiReference {
    pub theta: Vec<f64>,
    pub eta: f64,
    pub u: Vec<f64>,
    pub psi: Vec<f64>,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Reduced solutions lifted back to the full space.
struct Lifted {
    u_r: Vec<f64>,
    psi_r: Vec<f64>,
    du_r: Vec<Vec<f64>>,
    dpsi_r: Vec<Vec<f64>>,
    eta_r: f64,
    delta: f64,
    grad_eta_r_exact: Vec<f64>,
    grad_eta_delta: Vec<f64>,
}

/// Error analysis tied to one problem, with `‖O‖_{V'}` cached.
pub struct ErrorLab<'p> {
    problem: &'p AffineProblem,
    obs_dual: f64,
}

impl<'p> ErrorLab<'p> {
    pub fn new(problem: &'p AffineProblem) -> Self {
        let obs = problem.observations();
        let obs_dual = (0..obs.num_obs())
            .map(|i| problem.dual_norm(&obs.column(i)).powi(2))
            .sum::<f64>()
            .sqrt();
        Self { problem, obs_dual }
    }

    pub fn problem(&self) -> &'p AffineProblem {
        self.problem
    }

    /// `‖O‖_{V'} = (Σ_i ‖o_i‖²_{V'})^{1/2}`
    pub fn observation_dual_norm(&self) -> f64 {
        self.obs_dual
    }

    fn precision_norm(&self) -> f64 {
        self.problem.noise_precision().iter().copied().fold(0.0, f64::max)
    }

    pub fn bound_constants(&self, theta: &[f64]) -> Result<ConstantsBundle> {
        let p = self.problem;
        p.check_theta(theta)?;
        let field = p.field_at_quadrature(theta);
        let min = field.iter().copied().fold(f64::INFINITY, f64::min);
        let gamma = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let alpha = min / (1.0 + POINCARE * POINCARE);
        let rho = (0..p.dim())
            .map(|j| {
                p.field_derivative_at_quadrature(theta, j)
                    .into_iter()
                    .fold(0.0_f64, |m, x| m.max(x.abs()))
            })
            .collect();
        let c = p.eval_coefficients(theta);
        let load_dual = p.dual_norm(&p.combine_loads(&c.f));
        let d_load_dual = (0..p.dim())
            .map(|j| {
                let w: Vec<f64> = (0..c.f.len()).map(|k| c.df[(k, j)]).collect();
                p.dual_norm(&p.combine_loads(&w))
            })
            .collect();
        let g = self.precision_norm();
        let y = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let c_y = g * self.obs_dual * y;
        let c_o = g * self.obs_dual * self.obs_dual;
        Ok(ConstantsBundle::derive(alpha, gamma, rho, load_dual, d_load_dual, c_y, c_o))
    }

    fn lift(&self, rm: &ReducedModel, theta: &[f64]) -> Result<Lifted> {
        let p = self.problem;
        let on = rm.online(p, theta)?;
        let u_c = on.state()?;
        let psi_c = on.adjoint(&u_c)?;
        let (du_c, dpsi_c) = on.sensitivities(&u_c, &psi_c)?;
        let (psi_hat, u_hat) = on.incrementals(&u_c, &psi_c)?;
        let eta_r = on.eta(&u_c);
        let delta = on.dwr(&u_c, &psi_c);
        let w = on.weighted_misfit(&u_c);
        let grad_eta_r_exact = du_c
            .iter()
            .map(|d| -rm.observe(d, Space::State).dot(&w))
            .collect();
        let grad_eta_delta = on.grad_eta_delta(&u_c, &psi_c, &u_hat, &psi_hat);
        Ok(Lifted {
            u_r: rm.reconstruct(u_c.as_slice(), Space::State),
            psi_r: rm.reconstruct(psi_c.as_slice(), Space::Adjoint),
            du_r: du_c.iter().map(|d| rm.reconstruct(d.as_slice(), Space::State)).collect(),
            dpsi_r: dpsi_c.iter().map(|d| rm.reconstruct(d.as_slice(), Space::Adjoint)).collect(),
            eta_r,
            delta,
            grad_eta_r_exact,
            grad_eta_delta,
        })
    }

    /// `O Γ⁻¹ Oᵀ v`
    fn obs_gram(&self, v: &[f64]) -> Vec<f64> {
        let o = self.problem.observations();
        let w: Vec<f64> = o
            .apply(v)
            .iter()
            .zip(self.problem.noise_precision())
            .map(|(a, g)| a * g)
            .collect();
        o.transpose_apply(&w)
    }

    fn residuals(&self, op: &Operator<'_>, l: &Lifted) -> ResidualNorms {
        let p = self.problem;
        let a = op.matrix();
        let r_u = sub(&a.matvec(&l.u_r), op.load());
        let r_psi = sub(&a.matvec(&l.psi_r), &crate::hifi::adjoint_rhs(p, &l.u_r));
        let dau = op.d_matrix_apply(&l.u_r);
        let dapsi = op.d_matrix_apply(&l.psi_r);
        let df = op.d_load();
        let mut r_u_j = Vec::with_capacity(p.dim());
        let mut r_psi_j = Vec::with_capacity(p.dim());
        for j in 0..p.dim() {
            let mut ru = a.matvec(&l.du_r[j]);
            axpy(&mut ru, 1.0, &dau[j]);
            axpy(&mut ru, -1.0, &df[j]);
            r_u_j.push(p.dual_norm(&ru));
            let mut rp = a.matvec(&l.dpsi_r[j]);
            axpy(&mut rp, 1.0, &dapsi[j]);
            axpy(&mut rp, 1.0, &self.obs_gram(&l.du_r[j]));
            r_psi_j.push(p.dual_norm(&rp));
        }
        ResidualNorms {
            r_u: p.dual_norm(&r_u),
            r_psi: p.dual_norm(&r_psi),
            r_u_j,
            r_psi_j,
        }
    }

    pub fn residual_dual_norms(&self, rm: &ReducedModel, theta: &[f64]) -> Result<ResidualNorms> {
        let op = Operator::new(self.problem, theta)?;
        let l = self.lift(rm, theta)?;
        Ok(self.residuals(&op, &l))
    }

    /// Full and reduced solves at θ and every error quantity between them.
    pub fn true_errors(&self, rm: &ReducedModel, theta: &[f64]) -> Result<ErrorReport> {
        let p = self.problem;
        let op = Operator::new(p, theta)?;
        let u_h = op.state()?;
        let psi_h = op.adjoint(&u_h)?;
        let sens = op.sensitivities(&u_h, &psi_h)?;
        let eta_h = p.weighted_half_norm(&p.misfit(&u_h));
        let grad_h = op.lagrangian_gradient(&psi_h, &u_h);
        let l = self.lift(rm, theta)?;
        let res = self.residuals(&op, &l);

        let e_u = sub(&u_h, &l.u_r);
        let e_psi = sub(&psi_h, &l.psi_r);
        let v = |x: &[f64]| p.v_norm(x);
        let sum_v = |xs: &[Vec<f64>]| xs.iter().map(|x| p.v_norm(x)).sum::<f64>();
        let grad_e_u: f64 = sens.du.iter().zip(&l.du_r).map(|(a, b)| v(&sub(a, b))).sum();
        let grad_e_psi: f64 = sens.dpsi.iter().zip(&l.dpsi_r).map(|(a, b)| v(&sub(a, b))).sum();
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let a = op.matrix();
        let oe = p.observations().apply(&e_u);
        let quad = 0.5
            * oe.iter()
                .zip(p.noise_precision())
                .map(|(x, g)| g * x * x)
                .sum::<f64>();
        Ok(ErrorReport {
            theta: theta.to_vec(),
            n_u: rm.n_u(),
            n_psi: rm.n_psi(),
            eta_h,
            grad_eta_h_l1: grad_h.iter().map(|g| g.abs()).sum(),
            eta_r: l.eta_r,
            delta: l.delta,
            e_u: v(&e_u),
            e_psi: v(&e_psi),
            e_eta: eta_h - l.eta_r,
            e_delta: eta_h - l.eta_r - l.delta,
            grad_e_eta_l1: l1(&grad_h, &l.grad_eta_r_exact),
            grad_e_delta_l1: l1(&grad_h, &l.grad_eta_delta),
            grad_e_u,
            grad_e_psi,
            r_u: res.r_u,
            r_psi: res.r_psi,
            r_u_j: res.r_u_j,
            r_psi_j: res.r_psi_j,
            u_h: v(&u_h),
            u_r: v(&l.u_r),
            psi_h: v(&psi_h),
            psi_r: v(&l.psi_r),
            grad_u_h: sum_v(&sens.du),
            grad_u_r: sum_v(&l.du_r),
            grad_psi_h: sum_v(&sens.dpsi),
            grad_psi_r: sum_v(&l.dpsi_r),
            dwr_identity: -a.bilinear(&e_u, &l.psi_r),
            e_delta_identity: -a.bilinear(&e_u, &e_psi) - quad,
        })
    }

    pub fn verify_bounds(&self, rm: &ReducedModel, theta: &[f64]) -> Result<BoundReport> {
        let e = self.true_errors(rm, theta)?;
        let c = self.bound_constants(theta)?;
        Ok(check_bounds(&e, &c))
    }

    /// Full-model solutions at each sample.
    pub fn references(&self, samples: &[Vec<f64>]) -> Result<Vec<HiFiReference>> {
        let p = self.problem;
        par::map_indexed(samples.len(), |i| {
            let op = Operator::new(p, &samples[i])?;
            let u = op.state()?;
            let psi = op.adjoint(&u)?;
            Ok(HiFiReference {
                theta: samples[i].clone(),
                eta: p.weighted_half_norm(&p.misfit(&u)),
                u,
                psi,
            })
        })
        .into_iter()
        .collect()
    }

    /// Sample-mean errors after each enrichment stage of `rm`.
    pub fn decay_curve(&self, rm: &ReducedModel, refs: &[HiFiReference]) -> Result<Vec<CurveRow>> {
        let p = self.problem;
        let consts: Vec<ConstantsBundle> = refs
            .iter()
            .map(|r| self.bound_constants(&r.theta))
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(rm.stages().len());
        for stage in 1..=rm.stages().len() {
            let sub_rm = rm.at_stage(stage);
            let per: Vec<Result<[f64; 7]>> = par::map_indexed(refs.len(), |i| {
                let r = &refs[i];
                let on = sub_rm.online(p, &r.theta)?;
                let u_c = on.state()?;
                let psi_c = on.adjoint(&u_c)?;
                let eta_r = on.eta(&u_c);
                let delta = on.dwr(&u_c, &psi_c);
                let e_u = p.v_norm(&sub(&r.u, &sub_rm.reconstruct(u_c.as_slice(), Space::State)));
                let e_psi = p.v_norm(&sub(&r.psi, &sub_rm.reconstruct(psi_c.as_slice(), Space::Adjoint)));
                let c = &consts[i];
                Ok([
                    (r.eta - eta_r).abs(),
                    (r.eta - eta_r - delta).abs(),
                    delta.abs(),
                    (c.c_y + c.c_o * c.c_u) * e_u,
                    c.gamma * e_u * e_psi + 0.5 * c.c_o * e_u * e_u,
                    e_u,
                    e_u * e_psi,
                ])
            });
            let mut acc = [0.0; 7];
            for v in per {
                let v = v?;
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            }
            let m = refs.len().max(1) as f64;
            acc.iter_mut().for_each(|a| *a /= m);
            let s = &rm.stages()[stage - 1];
            rows.push(CurveRow {
                stage,
                n_u: s.n_u,
                n_psi: s.n_psi,
                mean_abs_e_eta: acc[0],
                mean_abs_e_delta: acc[1],
                mean_abs_delta: acc[2],
                mean_eta_bound: acc[3],
                mean_delta_bound: acc[4],
                mean_e_u: acc[5],
                mean_e_u_e_psi: acc[6],
            });
        }
        Ok(rows)
    }

    /// Right-hand sides of the KL estimate for `η_r` and for `η_r + Δ`.
    pub fn kl_bound_estimate(&self, rm: &ReducedModel, refs: &[HiFiReference]) -> Result<(f64, f64)> {
        let p = self.problem;
        let errs: Vec<Result<(f64, f64)>> = par::map_indexed(refs.len(), |i| {
            let pot = crate::rb::rb_potential(rm, p, &refs[i].theta)?;
            Ok((refs[i].eta - pot.eta_r, refs[i].eta - pot.eta_delta))
        });
        let errs: Vec<(f64, f64)> = errs.into_iter().collect::<Result<_>>()?;
        let (er, ed): (Vec<f64>, Vec<f64>) = errs.into_iter().unzip();
        Ok((kl_rhs(&er), kl_rhs(&ed)))
    }
}

/// One row of an error-decay table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: usize,
    pub n_u: usize,
    pub n_psi: usize,
    pub mean_abs_e_eta: f64,
    pub mean_abs_e_delta: f64,
    pub mean_abs_delta: f64,
    /// `(C_y + C_O C_u) ‖e_u‖`
    pub mean_eta_bound: f64,
    /// `γ ‖e_u‖ ‖e_ψ‖ + ½ C_O ‖e_u‖²`
    pub mean_delta_bound: f64,
    pub mean_e_u: f64,
    pub mean_e_u_e_psi: f64,
}

/// `E|e| + E|exp(e) − 1|`, infinite once any `e` exceeds 700.
pub fn kl_rhs(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    if errors.iter().any(|&e| e > 700.0 || e.is_nan()) {
        return f64::INFINITY;
    }
    let m = errors.len() as f64;
    errors.iter().map(|&e| e.abs() + e.exp_m1().abs()).sum::<f64>() / m
}

fn check(name: &str, lhs: f64, rhs: f64, scale: f64) -> BoundCheck {
    BoundCheck {
        name: name.to_string(),
        lhs,
        rhs,
        pass: lhs <= rhs * (1.0 + BOUND_SLACK) + ROUNDOFF * scale,
    }
}

/// Evaluates both sides of every stability and error estimate.
pub fn check_bounds(e: &ErrorReport, c: &ConstantsBundle) -> BoundReport {
    let a = c.alpha;
    let d = c.rho.len() as f64;
    let rs = c.rho_sum();
    let sens_u = (c.c_u / a) * rs + c.d_load_sum() / a;
    let sens_psi = |grad_u: f64| (c.c_psi / a) * rs + d * c.c_y / a + (c.c_o / a) * grad_u;
    let r_u_j: f64 = e.r_u_j.iter().sum();
    let r_psi_j: f64 = e.r_psi_j.iter().sum();
    let kl = kl_rhs(&[e.e_eta]);
    let checks = vec![
        check("stability-u-h", e.u_h, c.c_u, 0.0),
        check("stability-u-r", e.u_r, c.c_u, 0.0),
        check("stability-psi-h", e.psi_h, c.c_psi, 0.0),
        check("stability-psi-r", e.psi_r, c.c_psi, 0.0),
        check("sensitivity-u-h", e.grad_u_h, sens_u, 0.0),
        check("sensitivity-u-r", e.grad_u_r, sens_u, 0.0),
        check("sensitivity-psi-h", e.grad_psi_h, sens_psi(e.grad_u_h), 0.0),
        check("sensitivity-psi-r", e.grad_psi_r, sens_psi(e.grad_u_r), 0.0),
        check("error-eta", e.e_eta.abs(), (c.c_y + c.c_o * c.c_u) * e.e_u, e.eta_h),
        check(
            "error-eta-delta",
            e.e_delta.abs(),
            c.gamma * e.e_u * e.e_psi + 0.5 * c.c_o * e.e_u * e.e_u,
            e.eta_h,
        ),
        check(
            "gradient-error-eta",
            e.grad_e_eta_l1,
            (c.c_y + c.c_o * c.c_u) * e.grad_e_u + c.c_o * e.grad_u_r * e.e_u,
            e.grad_eta_h_l1,
        ),
        check(
            "gradient-error-eta-delta",
            e.grad_e_delta_l1,
            c.gamma * e.grad_e_u * e.e_psi
                + c.gamma * e.grad_e_psi * e.e_u
                + rs * e.e_u * e.e_psi
                + c.c_o * e.e_u * e.grad_e_u,
            e.grad_eta_h_l1,
        ),
        check("residual-state", e.e_u, e.r_u / a, e.u_h),
        check("residual-adjoint", e.e_psi, e.r_psi / a + c.c_o * e.e_u / a, e.psi_h),
        check("residual-state-sensitivity", e.grad_e_u, r_u_j / a + rs * e.e_u / a, e.grad_u_h),
        check(
            "residual-adjoint-sensitivity",
            e.grad_e_psi,
            r_psi_j / a + rs * e.e_psi / a + c.c_o * e.grad_e_u / a,
            e.grad_psi_h,
        ),
        check("corollary-eta", e.e_eta.abs(), c.c_alpha_u * e.r_u, e.eta_h),
        check(
            "corollary-eta-delta",
            e.e_delta.abs(),
            c.c_alpha_gamma * e.r_u * e.r_psi + c.c_alpha_gamma_o * e.r_u * e.r_u,
            e.eta_h,
        ),
        check("kl-rhs-nonnegative", -kl, 0.0, 0.0),
    ];
    BoundReport {
        theta: e.theta.clone(),
        checks,
    }
}

/// Per-iteration particle distances between two trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRow {
    pub l: usize,
    pub max_l1: f64,
    pub mean_l1: f64,
}

pub fn sample_discrepancy(traj_h: &[Snapshot], traj_r: &[Snapshot]) -> Vec<DiscrepancyRow> {
    traj_h
        .iter()
        .zip(traj_r)
        .map(|(a, b)| {
            let dists: Vec<f64> = a
                .particles
                .iter()
                .zip(&b.particles)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum())
                .collect();
            let n = dists.len().max(1) as f64;
            DiscrepancyRow {
                l: a.l,
                max_l1: dists.iter().copied().fold(0.0, f64::max),
                mean_l1: dists.iter().sum::<f64>() / n,
            }
        })
        .collect()
}

/// `Σ_i ‖o_i‖²` computed with explicit Riesz representatives, for cross-checks.
pub fn observation_dual_norm_via_riesz(problem: &AffineProblem) -> f64 {
    let o = problem.observations();
    (0..o.num_obs())
        .map(|i| {
            let c = o.column(i);
            let z = problem.riesz(&c);
            problem.v_inner(&z, &z)
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive::{build_on_particles, initialize};
    use crate::fem::{CaseConfig, CaseKind};
    use crate::svgd::initial_particles;

    fn u4(n: usize) -> AffineProblem {
        AffineProblem::assemble(&CaseConfig::uniform4(n)).unwrap()
    }

    #[test]
    fn constants_for_constant_field() {
        let p = AffineProblem::assemble(&CaseConfig::gaussian9(8)).unwrap();
        let lab = ErrorLab::new(&p);
        let c = lab.bound_constants(&[0.0; 9]).unwrap();
        assert!((c.gamma - 1.0).abs() < 1e-14);
        assert!((c.alpha - 1.0 / (1.0 + POINCARE * POINCARE)).abs() < 1e-14);
        assert!((c.c_u - c.load_dual / c.alpha).abs() < 1e-14);
        assert!(c.d_load_dual.iter().all(|&x| x == 0.0));
        for (j, r) in c.rho.iter().enumerate() {
            assert!((r - 0.5).abs() < 1e-14, "rho_{j} = {r}");
        }
    }

    #[test]
    fn c_y_scales_with_data() {
        let mut p = u4(8);
        let c1 = ErrorLab::new(&p).bound_constants(&[0.0; 4]).unwrap();
        let y2: Vec<f64> = p.data().iter().map(|v| 2.0 * v).collect();
        p.set_data(y2).unwrap();
        let c2 = ErrorLab::new(&p).bound_constants(&[0.0; 4]).unwrap();
        assert!((c2.c_y - 2.0 * c1.c_y).abs() < 1e-12 * c1.c_y);
        assert_eq!(c1.c_o, c2.c_o);
    }

    #[test]
    fn observation_norm_two_routes() {
        let p = u4(6);
        let lab = ErrorLab::new(&p);
        let via = observation_dual_norm_via_riesz(&p);
        assert!((lab.observation_dual_norm() - via).abs() < 1e-10 * via);
    }

    #[test]
    fn snapshot_is_exact() {
        let p = u4(10);
        let th = vec![0.4, -0.3, 0.2, 0.6];
        let rm = initialize(&p, &th).unwrap();
        let lab = ErrorLab::new(&p);
        let e = lab.true_errors(&rm, &th).unwrap();
        assert!(e.e_u < 1e-9 * e.u_h);
        assert!(e.e_eta.abs() < 1e-9 && e.e_delta.abs() < 1e-9 && e.delta.abs() < 1e-9);
        assert!(e.r_u < 1e-9 * e.u_h);
        let b = lab.verify_bounds(&rm, &th).unwrap();
        assert!(b.all_pass(), "{:?}", b.failures().collect::<Vec<_>>());
    }

    #[test]
    fn full_basis_has_solver_level_errors() {
        let cfg = CaseConfig::uniform4(3);
        let p = AffineProblem::assemble(&cfg).unwrap();
        let parts = initial_particles(p.prior(), 40, 1);
        let (rm, _) = build_on_particles(&p, &parts, 0.0, p.num_dofs()).unwrap();
        let lab = ErrorLab::new(&p);
        let th = vec![0.1, 0.2, -0.3, 0.05];
        let e = lab.true_errors(&rm, &th).unwrap();
        if rm.n_u() == p.num_dofs() && rm.n_psi() == p.num_dofs() {
            assert!(e.e_u < 1e-8 * e.u_h);
            assert!(e.e_eta.abs() < 1e-8 * e.eta_h.max(1.0));
        }
        assert!(rm.n_u() <= p.num_dofs());
    }

    #[test]
    fn identities_and_bounds_hold() {
        for case in [CaseKind::Uniform4, CaseKind::Gaussian9] {
            let p = AffineProblem::assemble(&CaseConfig::new(case.clone(), 10)).unwrap();
            let parts = initial_particles(p.prior(), 6, 3);
            let mut rm = initialize(&p, &parts[0]).unwrap();
            let h = crate::hifi::grad_potential(&p, &parts[1]).unwrap();
            rm.enrich(&p, &h.u, &h.psi, &parts[1]);
            let lab = ErrorLab::new(&p);
            for th in &parts[2..] {
                let e = lab.true_errors(&rm, th).unwrap();
                assert!((e.delta - e.dwr_identity).abs() <= 1e-9 * e.delta.abs().max(1e-12));
                assert!((e.e_delta - e.e_delta_identity).abs() <= 1e-9 * e.e_delta.abs().max(1e-6));
                let c = lab.bound_constants(th).unwrap();
                let b = check_bounds(&e, &c);
                assert!(b.all_pass(), "{case:?}: {:?}", b.failures().collect::<Vec<_>>());
                let bad = check_bounds(&e, &c.with_alpha(c.alpha * 1e3));
                assert!(!bad.get("stability-u-h").unwrap().pass);
            }
        }
    }

    #[test]
    fn residual_controls_error() {
        let p = u4(10);
        let parts = initial_particles(p.prior(), 5, 8);
        let rm = initialize(&p, &parts[0]).unwrap();
        let lab = ErrorLab::new(&p);
        let th = &parts[3];
        let r = lab.residual_dual_norms(&rm, th).unwrap();
        let e = lab.true_errors(&rm, th).unwrap();
        let c = lab.bound_constants(th).unwrap();
        assert_eq!(r.r_u, e.r_u);
        assert!(r.r_u >= c.alpha * e.e_u);
    }

    #[test]
    fn zero_adjoint_basis_residual_is_misfit() {
        let p = u4(8);
        let th = vec![0.2, 0.0, -0.1, 0.3];
        let h = crate::hifi::grad_potential(&p, &th).unwrap();
        let mut rm = ReducedModel::empty(&p);
        rm.enrich(&p, &h.u, &vec![0.0; h.u.len()], &th);
        assert_eq!(rm.n_psi(), 0);
        let lab = ErrorLab::new(&p);
        let other = vec![-0.3, 0.2, 0.1, -0.4];
        let r = lab.residual_dual_norms(&rm, &other).unwrap();
        let on = rm.online(&p, &other).unwrap();
        let u_r = rm.reconstruct(on.state().unwrap().as_slice(), Space::State);
        let misfit = crate::hifi::adjoint_rhs(&p, &u_r);
        assert!((r.r_psi - p.dual_norm(&misfit)).abs() < 1e-12 * r.r_psi);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_rhs(&[0.0, 0.0]), 0.0);
        assert!((kl_rhs(&[2f64.ln()]) - (2f64.ln() + 1.0)).abs() < 1e-15);
        assert_eq!(kl_rhs(&[701.0]), f64::INFINITY);
        assert!(kl_rhs(&[-3.0, 0.5]) > 0.0);
    }

    #[test]
    fn exact_model_gives_zero_kl() {
        let p = u4(8);
        let th = vec![0.1, 0.1, 0.1, 0.1];
        let rm = initialize(&p, &th).unwrap();
        let lab = ErrorLab::new(&p);
        let refs = lab.references(&[th]).unwrap();
        let (a, b) = lab.kl_bound_estimate(&rm, &refs).unwrap();
        assert!(a < 1e-9 && b < 1e-9);
    }

    #[test]
    fn discrepancy_examples() {
        let s = |l, ps: Vec<Vec<f64>>| Snapshot {
            l,
            eta: vec![0.0; ps.len()],
            particles: ps,
        };
        let a = vec![s(0, vec![vec![0.0, 0.0], vec![1.0, 1.0]]), s(1, vec![vec![0.5, 0.0], vec![1.0, 2.0]])];
        let d = sample_discrepancy(&a, &a);
        assert!(d.iter().all(|r| r.max_l1 == 0.0 && r.mean_l1 == 0.0));
        let b = vec![a[0].clone(), s(1, vec![vec![0.0, 0.0], vec![1.0, 1.0]])];
        let d = sample_discrepancy(&a, &b);
        assert_eq!(d[0].max_l1, 0.0);
        assert_eq!(d[1].max_l1, 1.0);
        assert_eq!(d[1].mean_l1, 0.75);
    }

    #[test]
    fn decay_curve_rows_per_stage() {
        let p = u4(10);
        let parts = initial_particles(p.prior(), 10, 6);
        let (rm, _) = build_on_particles(&p, &parts, 1e-6, 500).unwrap();
        let lab = ErrorLab::new(&p);
        let refs = lab.references(&parts[..4]).unwrap();
        let rows = lab.decay_curve(&rm, &refs).unwrap();
        assert_eq!(rows.len(), rm.stages().len());
        let last = rows.last().unwrap();
        assert!(last.mean_abs_e_eta <= last.mean_eta_bound * (1.0 + BOUND_SLACK));
    }
}
