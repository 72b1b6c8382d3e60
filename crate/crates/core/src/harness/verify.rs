//! Finite-difference, identity and bound checks with a pass/fail matrix.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptive::{build_on_particles, indicators};
use crate::error::{Result, SvrbError};
use crate::error_lab::{check_bounds, ErrorLab};
use crate::fem::{AffineProblem, CaseConfig, CaseKind};
use crate::hifi;
use crate::rb::{self, ReducedModel};
use crate::svgd::initial_particles;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub quick: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { quick: false, seed: 2024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub check: String,
    pub case: String,
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl VerifyRow {
    fn below(check: &str, case: &str, worst: f64, threshold: f64, detail: String) -> Self {
        Self {
            check: check.into(),
            case: case.into(),
            worst,
            threshold,
            passed: worst < threshold,
            detail,
        }
    }
}

pub fn case_name(kind: &CaseKind) -> &'static str {
    match kind {
        CaseKind::Uniform4 => "uniform4",
        CaseKind::Gaussian9 => "gaussian9",
        CaseKind::Custom(_) => "custom",
    }
}

/// Prior draws whose coefficient field stays at least `margin` above zero.
pub fn coercive_samples(problem: &AffineProblem, count: usize, seed: u64, margin: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 1000 * count.max(1) {
        tries += 1;
        let th = problem.prior().sample(&mut rng);
        if matches!(problem.check_coercivity(&th), Ok(min) if min >= margin) {
            out.push(th);
        }
    }
    out
}

/// Largest per-component relative error between `grad` and central differences of `f`.
///
/// Components are compared relative to `max(|g_j|, 1e-8 ‖g‖_∞)`.
pub fn fd_relative_error(f: impl Fn(&[f64]) -> Result<f64>, grad: &[f64], theta: &[f64], h: f64) -> Result<f64> {
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    for j in 0..theta.len() {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += h;
        tm[j] -= h;
        let fd = (f(&tp)? - f(&tm)?) / (2.0 * h);
        let denom = grad[j].abs().max(1e-8 * scale).max(f64::MIN_POSITIVE);
        worst = worst.max((fd - grad[j]).abs() / denom);
    }
    Ok(worst)
}

pub fn hifi_gradient_error(problem: &AffineProblem, thetas: &[Vec<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for th in thetas {
        let e = hifi::grad_potential(problem, th)?;
        let f = |t: &[f64]| hifi::potential(problem, t).map(|(eta, _)| eta);
        worst = worst.max(fd_relative_error(f, &e.grad_eta, th, FD_STEP)?);
    }
    Ok(worst)
}

pub fn rb_gradient_error(problem: &AffineProblem, rm: &ReducedModel, thetas: &[Vec<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for th in thetas {
        let e = rb::rb_grad_potential(rm, problem, th)?;
        let f = |t: &[f64]| rb::rb_potential(rm, problem, t).map(|p| p.eta_delta);
        worst = worst.max(fd_relative_error(f, &e.grad_eta_delta, th, FD_STEP)?);
    }
    Ok(worst)
}

/// Snapshots at the given parameters, one stage each.
pub fn model_from(problem: &AffineProblem, thetas: &[Vec<f64>]) -> Result<ReducedModel> {
    let mut rm = ReducedModel::empty(problem);
    for th in thetas {
        let h = hifi::grad_potential(problem, th)?;
        rm.enrich(problem, &h.u, &h.psi, th);
    }
    Ok(rm)
}

/// Worst relative gaps of `Δ = −A(e_u, ψ_r)` and of the `e_Δ` identity.
pub fn dwr_identity_gaps(problem: &AffineProblem, rm: &ReducedModel, thetas: &[Vec<f64>]) -> Result<(f64, f64)> {
    let lab = ErrorLab::new(problem);
    let mut worst = (0.0f64, 0.0f64);
    for th in thetas {
        let e = lab.true_errors(rm, th)?;
        let g1 = (e.delta - e.dwr_identity).abs() / e.delta.abs().max(f64::MIN_POSITIVE);
        let g2 = (e.e_delta - e.e_delta_identity).abs() / e.e_delta.abs().max(f64::MIN_POSITIVE);
        worst = (worst.0.max(g1), worst.1.max(g2));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Default)]
pub struct BoundSuiteResult {
    pub evaluated: usize,
    pub checks: usize,
    pub failures: Vec<String>,
}

/// Every bound at every θ for each listed basis stage of `rm`.
pub fn bound_suite(problem: &AffineProblem, rm: &ReducedModel, thetas: &[Vec<f64>], stages: &[usize]) -> Result<BoundSuiteResult> {
    let lab = ErrorLab::new(problem);
    let mut res = BoundSuiteResult::default();
    for &s in stages {
        let sub = rm.at_stage(s);
        for th in thetas {
            let e = lab.true_errors(&sub, th)?;
            let c = lab.bound_constants(th)?;
            let b = check_bounds(&e, &c);
            res.evaluated += 1;
            res.checks += b.checks.len();
            for f in b.failures() {
                res.failures.push(format!(
                    "N_r={} {}: lhs {:.3e} > rhs {:.3e}",
                    sub.n_u(),
                    f.name,
                    f.lhs,
                    f.rhs
                ));
            }
        }
    }
    Ok(res)
}

/// Whether inflating α by 10³ makes the stability check fail.
pub fn corrupted_constant_detected(problem: &AffineProblem, rm: &ReducedModel, theta: &[f64]) -> Result<bool> {
    let lab = ErrorLab::new(problem);
    let e = lab.true_errors(rm, theta)?;
    let c = lab.bound_constants(theta)?;
    let bad = check_bounds(&e, &c.with_alpha(c.alpha * 1e3));
    Ok(bad.get("stability-u-h").is_some_and(|ch| !ch.pass))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SnapshotResult {
    pub selections: usize,
    pub worst_delta: f64,
    pub worst_rel_e_u: f64,
    /// Largest `ε γ ‖ψ_r‖ ‖u_h‖`, the roundoff scale of `A(e_u, ψ_r)`.
    pub roundoff_scale: f64,
}

/// `|Δ|` and relative `‖e_u‖` at every greedy-selected parameter right after its enrichment.
pub fn snapshot_exactness(problem: &AffineProblem, particles: &[Vec<f64>], tol: f64) -> Result<SnapshotResult> {
    let (rm, _) = build_on_particles(problem, particles, tol, 500)?;
    let lab = ErrorLab::new(problem);
    let mut out = SnapshotResult {
        selections: rm.stages().len(),
        ..Default::default()
    };
    for count in 1..=rm.stages().len() {
        let sub = rm.at_stage(count);
        let th = &rm.stages()[count - 1].theta;
        let d = indicators(&sub, problem, std::slice::from_ref(th))[0];
        let e = lab.true_errors(&sub, th)?;
        let gamma = lab.bound_constants(th)?.gamma;
        out.worst_delta = out.worst_delta.max(d);
        out.worst_rel_e_u = out.worst_rel_e_u.max(e.e_u / e.u_h);
        out.roundoff_scale = out.roundoff_scale.max(f64::EPSILON * gamma * e.psi_r * e.u_h);
    }
    Ok(out)
}

fn case_rows(kind: CaseKind, opts: VerifyOptions) -> Result<Vec<VerifyRow>> {
    let name = case_name(&kind);
    let mesh = if opts.quick { 12 } else { 16 };
    let (n_fd, n_bounds) = if opts.quick { (4, 8) } else { (10, 32) };
    let p = AffineProblem::assemble(&CaseConfig::new(kind, mesh))?;
    let train = coercive_samples(&p, 10, opts.seed, 0.05);
    let test = coercive_samples(&p, n_bounds.max(n_fd), opts.seed + 1, 0.05);
    if train.len() < 10 || test.len() < n_bounds.max(n_fd) {
        return Err(SvrbError::Config(format!("{name}: too few coercive prior samples")));
    }
    let rm = model_from(&p, &train)?;
    let small = rm.at_stage(3);
    let mut rows = Vec::new();

    let w = hifi_gradient_error(&p, &test[..n_fd])?;
    rows.push(VerifyRow::below("fd-gradient-hifi", name, w, 1e-5, format!("{n_fd} θ, n={mesh}")));
    let w = rb_gradient_error(&p, &small, &test[..n_fd])?;
    rows.push(VerifyRow::below("fd-gradient-rb-corrected", name, w, 1e-5, format!("{n_fd} θ, N_r=3")));
    let (g1, g2) = dwr_identity_gaps(&p, &small, &test[..n_fd])?;
    rows.push(VerifyRow::below("dwr-identity", name, g1, 1e-9, format!("{n_fd} θ")));
    rows.push(VerifyRow::below("corrected-error-identity", name, g2, 1e-9, format!("{n_fd} θ")));
    let suite = bound_suite(&p, &rm, &test[..n_bounds], &[1, 5, 10])?;
    rows.push(VerifyRow {
        check: "bound-suite".into(),
        case: name.into(),
        worst: suite.failures.len() as f64,
        threshold: 0.0,
        passed: suite.failures.is_empty(),
        detail: format!(
            "{} checks over {} (θ, N_r) pairs{}",
            suite.checks,
            suite.evaluated,
            suite.failures.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    });
    let detected = corrupted_constant_detected(&p, &small, &test[0])?;
    rows.push(VerifyRow {
        check: "corrupted-constant-probe".into(),
        case: name.into(),
        worst: if detected { 0.0 } else { 1.0 },
        threshold: 0.0,
        passed: detected,
        detail: "alpha x 1e3 must break the state stability bound".into(),
    });
    let parts = initial_particles(p.prior(), if opts.quick { 16 } else { 32 }, opts.seed + 2);
    let snap = snapshot_exactness(&p, &parts, 1e-6)?;
    rows.push(VerifyRow::below(
        "snapshot-indicator",
        name,
        snap.worst_delta,
        1e-9,
        format!("{} greedy selections, roundoff scale {:.1e}", snap.selections, snap.roundoff_scale),
    ));
    rows.push(VerifyRow::below(
        "snapshot-state-error",
        name,
        snap.worst_rel_e_u,
        1e-9,
        format!("{} greedy selections", snap.selections),
    ));
    Ok(rows)
}

pub fn run_suite(opts: VerifyOptions) -> Result<Vec<VerifyRow>> {
    let mut rows = case_rows(CaseKind::Uniform4, opts)?;
    rows.extend(case_rows(CaseKind::Gaussian9, opts)?);
    Ok(rows)
}

pub fn format_matrix(rows: &[VerifyRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{:<4} {:<28} {:<10} worst {:>10.3e}  limit {:>8.1e}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.check,
            r.case,
            r.worst,
            r.threshold,
            r.detail
        );
    }
    s
}

pub fn cmd_verify(opts: VerifyOptions) -> Result<Vec<VerifyRow>> {
    run_suite(opts)
}
