//! Greedy enrichment interleaved with SVGD on the current particles.

use std::collections::HashMap;
use std::sync::RwLock;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backend::{prior_ensemble, rb_evaluate, rb_value, RbPotentialKind};
use crate::error::{Result, SvrbError};
use crate::fem::AffineProblem;
use crate::hifi;
use crate::par;
use crate::rb::{self, ReducedModel};
use crate::svgd::{
    svgd_run_from, CostKind, Evaluation, HookContext, HookReport, PosteriorBackend, RunLog,
    SvgdConfig, Timings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToleranceRule {
    /// `ε_r^0 · t_l`
    Absolute,
    /// `ε_r^0 · t_l / t_0`
    #[default]
    Normalized,
}

fn default_eps_min() -> f64 {
    1e-12
}

fn default_max_basis() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub eps0: f64,
    /// Enrichment period K; `None` enriches only at the first iteration.
    pub period: Option<usize>,
    #[serde(default)]
    pub rule: ToleranceRule,
    #[serde(default = "default_eps_min")]
    pub eps_min: f64,
    #[serde(default = "default_max_basis")]
    pub max_basis: usize,
}

impl AdaptiveConfig {
    pub fn new(eps0: f64, period: Option<usize>) -> Self {
        Self {
            eps0,
            period,
            rule: ToleranceRule::default(),
            eps_min: default_eps_min(),
            max_basis: default_max_basis(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0) {
            return Err(SvrbError::Config(format!("eps0 must be > 0, got {}", self.eps0)));
        }
        if self.period == Some(0) {
            return Err(SvrbError::Config("update period K must be >= 1".into()));
        }
        if !(self.eps_min > 0.0) || self.eps_min > self.eps0 {
            return Err(SvrbError::Config("eps_min must lie in (0, eps0]".into()));
        }
        if self.max_basis == 0 {
            return Err(SvrbError::Config("max_basis must be >= 1".into()));
        }
        Ok(())
    }

    fn is_update_step(&self, l: usize) -> bool {
        match self.period {
            Some(k) => l % k == 0,
            None => l == 0,
        }
    }
}

/// Convergence-driven tolerance that never increases.
#[derive(Debug, Clone)]
pub struct ToleranceSchedule {
    eps0: f64,
    eps_min: f64,
    rule: ToleranceRule,
    current: f64,
}

impl ToleranceSchedule {
    pub fn new(cfg: &AdaptiveConfig) -> Self {
        Self {
            eps0: cfg.eps0,
            eps_min: cfg.eps_min,
            rule: cfg.rule,
            current: cfg.eps0,
        }
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    /// Updates from the latest indicator `t_l` and the first one `t_0`.
    pub fn update(&mut self, t_l: f64, t_0: f64) -> f64 {
        let raw = match self.rule {
            ToleranceRule::Absolute => self.eps0 * t_l,
            ToleranceRule::Normalized if t_0 > 0.0 => self.eps0 * t_l / t_0,
            ToleranceRule::Normalized => self.eps_min,
        };
        let raw = if raw.is_nan() { self.eps0 } else { raw };
        self.current = raw.clamp(self.eps_min, self.eps0).min(self.current);
        self.current
    }
}

/// Single tolerance evaluation, `ε_r^l` for a fresh schedule.
pub fn tolerance_update(cfg: &AdaptiveConfig, t_l: f64, t_0: f64) -> f64 {
    ToleranceSchedule::new(cfg).update(t_l, t_0)
}

/// Seeds both bases with the snapshots at `theta`.
pub fn initialize(problem: &AffineProblem, theta: &[f64]) -> Result<ReducedModel> {
    let h = hifi::grad_potential(problem, theta)?;
    let mut rm = ReducedModel::empty(problem);
    rm.enrich(problem, &h.u, &h.psi, theta);
    Ok(rm)
}

/// `|Δ_r^η(θ_m)|` at every particle; reduced solve failures count as +∞.
pub fn indicators(rm: &ReducedModel, problem: &AffineProblem, particles: &[Vec<f64>]) -> Vec<f64> {
    par::map_indexed(particles.len(), |m| match rb::rb_potential(rm, problem, &particles[m]) {
        Ok(p) if p.delta.is_finite() => p.delta.abs(),
        _ => f64::INFINITY,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub tolerance: f64,
    pub enriched: usize,
    /// Maximum indicator before each pass and after the last one.
    pub history: Vec<f64>,
    pub selected: Vec<usize>,
    pub skipped: Vec<usize>,
    pub cap_reached: bool,
    pub stagnated: bool,
    pub certified: bool,
    pub timings: Timings,
}

impl SweepReport {
    pub fn final_max(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }
}

fn argmax_lowest(values: &[f64], skip: &[usize]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Enriches at the worst particle until every indicator is at most `tol`.
pub fn greedy_sweep(
    rm: &mut ReducedModel,
    problem: &AffineProblem,
    particles: &[Vec<f64>],
    tol: f64,
    max_basis: usize,
) -> Result<SweepReport> {
    let mut report = SweepReport {
        tolerance: tol,
        ..Default::default()
    };
    let mut last_at: HashMap<usize, f64> = HashMap::new();
    loop {
        let t = Instant::now();
        let ind = indicators(rm, problem, particles);
        report.timings.rb_offline += t.elapsed().as_secs_f64();
        let overall = ind.iter().copied().fold(0.0, f64::max);
        report.history.push(overall);
        if overall <= tol {
            report.certified = true;
            break;
        }
        let Some((idx, worst)) = argmax_lowest(&ind, &report.skipped) else {
            warn!("greedy sweep: every particle above tolerance was skipped");
            break;
        };
        if worst <= tol {
            warn!("greedy sweep: remaining violations are at skipped particles");
            break;
        }
        if rm.n_u() >= max_basis || rm.n_psi() >= max_basis {
            warn!("greedy sweep: basis cap {max_basis} reached with max indicator {overall:.3e} > {tol:.3e}");
            report.cap_reached = true;
            break;
        }
        let theta = &particles[idx];
        if rm.contains_snapshot(theta) && last_at.get(&idx).is_none_or(|&prev| worst > 0.9 * prev) {
            warn!("greedy sweep: stagnation at particle {idx} (indicator {worst:.3e})");
            report.stagnated = true;
            break;
        }
        let t = Instant::now();
        let snap = match hifi::grad_potential(problem, theta) {
            Ok(s) => s,
            Err(e @ SvrbError::CoercivityLost { .. }) => {
                warn!("greedy sweep: skipping particle {idx}: {e}");
                report.skipped.push(idx);
                report.timings.hifi_solve += t.elapsed().as_secs_f64();
                continue;
            }
            Err(e) => return Err(e),
        };
        report.timings.hifi_solve += t.elapsed().as_secs_f64();
        let t = Instant::now();
        rm.enrich(problem, &snap.u, &snap.psi, theta);
        report.timings.rb_offline += t.elapsed().as_secs_f64();
        last_at.insert(idx, worst);
        report.selected.push(idx);
        report.enriched += 1;
    }
    info!(
        "greedy sweep: tol {tol:.3e}, {} enrichments, N_u={} N_psi={}, max indicator {:.3e}",
        report.enriched,
        rm.n_u(),
        rm.n_psi(),
        report.final_max()
    );
    Ok(report)
}

/// Initializes at the first particle, then sweeps the whole set to `tol`.
pub fn build_on_particles(
    problem: &AffineProblem,
    particles: &[Vec<f64>],
    tol: f64,
    max_basis: usize,
) -> Result<(ReducedModel, SweepReport)> {
    let first = particles
        .first()
        .ok_or_else(|| SvrbError::Config("no particles to build a reduced basis on".into()))?;
    let t = Instant::now();
    let mut rm = initialize(problem, first)?;
    let init_secs = t.elapsed().as_secs_f64();
    let mut report = greedy_sweep(&mut rm, problem, particles, tol, max_basis)?;
    report.timings.hifi_solve += init_secs;
    Ok((rm, report))
}

/// Corrected reduced potential over a model that the driver may enrich between iterations.
pub struct AdaptiveRbBackend<'p> {
    problem: &'p AffineProblem,
    model: RwLock<ReducedModel>,
}

impl<'p> AdaptiveRbBackend<'p> {
    pub fn new(problem: &'p AffineProblem, model: ReducedModel) -> Self {
        Self {
            problem,
            model: RwLock::new(model),
        }
    }

    pub fn into_model(self) -> ReducedModel {
        self.model.into_inner().unwrap_or_else(|e| e.into_inner())
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, ReducedModel> {
        self.model.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, ReducedModel> {
        self.model.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn sizes(&self) -> (usize, usize) {
        let rm = self.read();
        (rm.n_u(), rm.n_psi())
    }
}

impl PosteriorBackend for AdaptiveRbBackend<'_> {
    fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        rb_evaluate(&self.read(), self.problem, RbPotentialKind::Corrected, theta)
    }

    fn potential(&self, theta: &[f64]) -> Result<f64> {
        rb_value(&self.read(), self.problem, RbPotentialKind::Corrected, theta)
    }

    fn descriptor(&self) -> &'static str {
        "rb-adaptive"
    }

    fn cost_kind(&self) -> CostKind {
        CostKind::ReducedOnline
    }

    fn admissible(&self, theta: &[f64]) -> bool {
        self.problem.check_coercivity(theta).is_ok()
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub log: RunLog,
    pub model: ReducedModel,
    pub sweeps: Vec<SweepReport>,
}

impl AdaptiveOutcome {
    /// `ε_r^l` at the update steps.
    pub fn tolerances(&self) -> Vec<f64> {
        self.sweeps.iter().map(|s| s.tolerance).collect()
    }
}

/// SVGD with the adaptive reduced backend, enriching every K steps.
pub fn run_svrb(
    problem: &AffineProblem,
    svgd: &SvgdConfig,
    cfg: &AdaptiveConfig,
) -> Result<AdaptiveOutcome> {
    run_svrb_from(problem, svgd, cfg, None)
}

/// As [`run_svrb`], optionally starting from an existing model instead of the first particle.
pub fn run_svrb_from(
    problem: &AffineProblem,
    svgd: &SvgdConfig,
    cfg: &AdaptiveConfig,
    start: Option<ReducedModel>,
) -> Result<AdaptiveOutcome> {
    cfg.validate()?;
    svgd.validate()?;
    let particles = prior_ensemble(problem, svgd.particles, svgd.seed)?;
    let t = Instant::now();
    let rm = match start {
        Some(rm) if rm.n_u() > 0 => rm,
        _ => initialize(problem, &particles[0])?,
    };
    let mut init_secs = Some(t.elapsed().as_secs_f64());
    let backend = AdaptiveRbBackend::new(problem, rm);
    let mut schedule = ToleranceSchedule::new(cfg);
    let mut sweeps = Vec::new();
    let mut hook = |ctx: &HookContext<'_>| -> Result<Option<HookReport>> {
        if !cfg.is_update_step(ctx.l) {
            return Ok(None);
        }
        let tol = match (ctx.t_latest, ctx.t_first) {
            (Some(tl), Some(t0)) => schedule.update(tl, t0),
            _ => schedule.current(),
        };
        let sweep = {
            let mut rm = backend.write();
            greedy_sweep(&mut rm, problem, ctx.particles, tol, cfg.max_basis)?
        };
        let (n_u, n_psi) = backend.sizes();
        let mut flags = Vec::new();
        if sweep.cap_reached {
            flags.push("basis-cap".to_string());
        }
        if sweep.stagnated {
            flags.push("stagnation".to_string());
        }
        if !sweep.skipped.is_empty() {
            flags.push(format!("skipped:{}", sweep.skipped.len()));
        }
        let mut timings = sweep.timings;
        if let Some(s) = init_secs.take() {
            timings.hifi_solve += s;
        }
        let report = HookReport {
            eps_r: Some(tol),
            n_u: Some(n_u),
            n_psi: Some(n_psi),
            enriched: sweep.enriched,
            max_indicator: Some(sweep.final_max()),
            certified: Some(sweep.certified),
            flags,
            timings,
        };
        sweeps.push(sweep);
        Ok(Some(report))
    };
    let log = svgd_run_from(&backend, problem.prior(), svgd, particles, Some(&mut hook))?;
    Ok(AdaptiveOutcome {
        log,
        model: backend.into_model(),
        sweeps,
    })
}
