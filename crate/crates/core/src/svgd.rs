//! Stein variational gradient descent over a pluggable posterior backend.

use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvrbError};
use crate::fem::PriorSpec;
use crate::par;

/// Potential value and gradient at one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub eta: f64,
    pub grad: Vec<f64>,
}

/// Where backend wall time is accounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    HiFi,
    ReducedOnline,
    Analytic,
}

/// Supplies `η` and `∇θη`; the sampler adds the prior score itself.
pub trait PosteriorBackend: Sync {
    fn evaluate(&self, theta: &[f64]) -> Result<Evaluation>;

    /// Potential only, used by the line search.
    fn potential(&self, theta: &[f64]) -> Result<f64> {
        self.evaluate(theta).map(|e| e.eta)
    }

    fn descriptor(&self) -> &'static str;

    fn cost_kind(&self) -> CostKind;

    /// Whether θ lies where the forward model is well posed.
    fn admissible(&self, _theta: &[f64]) -> bool {
        true
    }
}

/// `η(θ) = ½ Σ_i (θ_i − μ_i)² / σ_i²`, an analytic Gaussian target.
#[derive(Debug, Clone)]
pub struct GaussianBackend {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianBackend {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }
}

impl PosteriorBackend for GaussianBackend {
    fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        if theta.len() != self.mean.len() {
            return Err(SvrbError::Dimension {
                expected: self.mean.len(),
                got: theta.len(),
            });
        }
        let grad: Vec<f64> = theta
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((t, m), v)| (t - m) / v)
            .collect();
        let eta = 0.5 * grad.iter().zip(theta.iter().zip(&self.mean)).map(|(g, (t, m))| g * (t - m)).sum::<f64>();
        Ok(Evaluation { eta, grad })
    }

    fn descriptor(&self) -> &'static str {
        "analytic-gaussian"
    }

    fn cost_kind(&self) -> CostKind {
        CostKind::Analytic
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `∇ log p0(θ)`.
pub fn prior_score(prior: &PriorSpec, theta: &[f64]) -> Vec<f64> {
    prior.score(theta)
}

/// `h = med² / ln M` from pairwise distances, falling back to 1.
pub fn median_bandwidth(particles: &[Vec<f64>]) -> f64 {
    let m = particles.len();
    if m < 2 {
        return 1.0;
    }
    let mut d: Vec<f64> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(&particles[i], &particles[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    let ln_m = (m as f64).ln();
    let h = med * med / ln_m;
    if med == 0.0 || ln_m == 0.0 || !h.is_finite() {
        1.0
    } else {
        h
    }
}

/// `k(θ, θ') = exp(−‖θ − θ'‖²/h)` and its gradient in the first argument.
pub fn kernel_and_grad(theta: &[f64], other: &[f64], h: f64) -> (f64, Vec<f64>) {
    let k = (-sq_dist(theta, other) / h).exp();
    let g = theta.iter().zip(other).map(|(a, b)| -2.0 / h * (a - b) * k).collect();
    (k, g)
}

/// Sample-average Stein direction at every particle.
pub fn svgd_direction(particles: &[Vec<f64>], scores: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let m = particles.len();
    let inv = 1.0 / m as f64;
    particles
        .iter()
        .map(|tn| {
            let mut q = vec![0.0; tn.len()];
            for (tm, sm) in particles.iter().zip(scores) {
                let (k, gk) = kernel_and_grad(tm, tn, h);
                for ((qi, si), gi) in q.iter_mut().zip(sm).zip(&gk) {
                    *qi += si * k + gi;
                }
            }
            q.iter_mut().for_each(|x| *x *= inv);
            q
        })
        .collect()
}

/// `max_m ‖Q_m‖₂`
pub fn stopping_indicator(q: &[Vec<f64>]) -> f64 {
    q.iter()
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    pub alpha_init: f64,
    pub max_backtracks: u32,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            alpha_init: 1.0,
            max_backtracks: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub merit0: f64,
    pub merit: f64,
    pub backtracks: u32,
    pub exhausted: bool,
}

fn moved(prior: &PriorSpec, theta: &[f64], q: &[f64], alpha: f64) -> (Vec<f64>, usize) {
    let mut t: Vec<f64> = theta.iter().zip(q).map(|(a, b)| a + alpha * b).collect();
    let c = prior.clamp(&mut t);
    (t, c)
}

/// Mean of `η − log p0` over particles; failures count as +∞.
pub fn merit(backend: &dyn PosteriorBackend, prior: &PriorSpec, particles: &[Vec<f64>]) -> f64 {
    let vals = par::map_indexed(particles.len(), |i| match backend.potential(&particles[i]) {
        Ok(eta) => eta - prior.log_density(&particles[i]),
        Err(_) => f64::INFINITY,
    });
    vals.iter().sum::<f64>() / particles.len() as f64
}

/// Backtracking on the merit `(1/M) Σ [η − log p0]` at the clamped trial points.
pub fn line_search(
    particles: &[Vec<f64>],
    q: &[Vec<f64>],
    merit0: f64,
    backend: &dyn PosteriorBackend,
    prior: &PriorSpec,
    cfg: LineSearchConfig,
) -> LineSearchOutcome {
    if q.iter().all(|row| row.iter().all(|&x| x == 0.0)) {
        return LineSearchOutcome {
            alpha: cfg.alpha_init,
            merit0,
            merit: merit0,
            backtracks: 0,
            exhausted: false,
        };
    }
    let mut alpha = cfg.alpha_init;
    let mut last = f64::INFINITY;
    for b in 0..=cfg.max_backtracks {
        let trial: Vec<Vec<f64>> = particles
            .iter()
            .zip(q)
            .map(|(t, qr)| moved(prior, t, qr, alpha).0)
            .collect();
        last = merit(backend, prior, &trial);
        if last < merit0 {
            return LineSearchOutcome {
                alpha,
                merit0,
                merit: last,
                backtracks: b,
                exhausted: false,
            };
        }
        if b < cfg.max_backtracks {
            alpha *= 0.5;
        }
    }
    LineSearchOutcome {
        alpha,
        merit0,
        merit: last,
        backtracks: cfg.max_backtracks,
        exhausted: true,
    }
}

fn default_tolerance() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvgdConfig {
    pub particles: usize,
    /// Maximum number of particle updates.
    pub max_steps: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub line_search: LineSearchConfig,
    /// Step sizes to use instead of the line search, by iteration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_steps: Option<Vec<f64>>,
}

impl SvgdConfig {
    pub fn new(particles: usize, max_steps: usize, seed: u64) -> Self {
        Self {
            particles,
            max_steps,
            tolerance: default_tolerance(),
            seed,
            line_search: LineSearchConfig::default(),
            replay_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(SvrbError::Config("particle count must be >= 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(SvrbError::Config("svgd tolerance must be >= 0".into()));
        }
        if !(self.line_search.alpha_init > 0.0) {
            return Err(SvrbError::Config("alpha_init must be > 0".into()));
        }
        Ok(())
    }
}

/// Wall-clock split of one iteration in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub hifi_solve: f64,
    pub rb_online: f64,
    pub rb_offline: f64,
    pub svgd_overhead: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.hifi_solve + self.rb_online + self.rb_offline + self.svgd_overhead
    }

    pub fn add(&mut self, other: &Timings) {
        self.hifi_solve += other.hifi_solve;
        self.rb_online += other.rb_online;
        self.rb_offline += other.rb_offline;
        self.svgd_overhead += other.svgd_overhead;
    }

    fn charge(&mut self, kind: CostKind, secs: f64) {
        match kind {
            CostKind::HiFi => self.hifi_solve += secs,
            CostKind::ReducedOnline => self.rb_online += secs,
            CostKind::Analytic => self.svgd_overhead += secs,
        }
    }
}

/// What a per-iteration hook did (adaptive enrichment, typically).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HookReport {
    pub eps_r: Option<f64>,
    pub n_u: Option<usize>,
    pub n_psi: Option<usize>,
    pub enriched: usize,
    pub max_indicator: Option<f64>,
    pub certified: Option<bool>,
    pub flags: Vec<String>,
    pub timings: Timings,
}

/// State handed to the hook before iteration `l` evaluates the backend.
pub struct HookContext<'a> {
    pub l: usize,
    pub particles: &'a [Vec<f64>],
    /// Stopping indicator of the previous iteration.
    pub t_latest: Option<f64>,
    /// Stopping indicator of iteration 0.
    pub t_first: Option<f64>,
}

pub type Hook<'h> = dyn FnMut(&HookContext<'_>) -> Result<Option<HookReport>> + 'h;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub l: usize,
    pub backend: String,
    pub t: f64,
    /// Step taken after this iteration (0 when the loop stopped here).
    pub alpha: f64,
    pub bandwidth: f64,
    pub merit0: f64,
    pub merit: f64,
    pub backtracks: u32,
    pub line_search_exhausted: bool,
    pub replayed_step: bool,
    pub clamped: usize,
    pub mean_eta: f64,
    pub stopped: bool,
    pub hook: Option<HookReport>,
    pub timings: Timings,
    /// Seconds since the start of the run, taken when the record is written.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub l: usize,
    pub particles: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IterationRecord>,
    pub trajectory: Vec<Snapshot>,
}

impl RunLog {
    /// Step sizes actually taken, in order.
    pub fn steps(&self) -> Vec<f64> {
        self.records.iter().filter(|r| !r.stopped).map(|r| r.alpha).collect()
    }

    pub fn final_particles(&self) -> &[Vec<f64>] {
        self.trajectory.last().map_or(&[], |s| &s.particles)
    }

    pub fn total_timings(&self) -> Timings {
        let mut t = Timings::default();
        for r in &self.records {
            t.add(&r.timings);
        }
        t
    }
}

/// Seeded i.i.d. prior draws.
pub fn initial_particles(prior: &PriorSpec, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| prior.sample(&mut rng)).collect()
}

/// Prior draws from the same stream as [`initial_particles`], rejecting those outside `admissible`.
pub fn initial_particles_where(
    prior: &PriorSpec,
    count: usize,
    seed: u64,
    admissible: impl Fn(&[f64]) -> bool,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let max_draws = 1000 * (count + 1);
    for _ in 0..max_draws {
        if out.len() == count {
            break;
        }
        let theta = prior.sample(&mut rng);
        if admissible(&theta) {
            out.push(theta);
        }
    }
    if out.len() < count {
        return Err(SvrbError::Config(format!(
            "only {} of {count} prior draws are admissible after {max_draws} attempts",
            out.len()
        )));
    }
    Ok(out)
}

/// Runs SVGD from seeded prior samples.
pub fn svgd_run(
    backend: &dyn PosteriorBackend,
    prior: &PriorSpec,
    cfg: &SvgdConfig,
    hook: Option<&mut Hook<'_>>,
) -> Result<RunLog> {
    cfg.validate()?;
    let particles = initial_particles_where(prior, cfg.particles, cfg.seed, |t| backend.admissible(t))?;
    svgd_run_from(backend, prior, cfg, particles, hook)
}

/// Runs SVGD from given initial particles.
pub fn svgd_run_from(
    backend: &dyn PosteriorBackend,
    prior: &PriorSpec,
    cfg: &SvgdConfig,
    mut particles: Vec<Vec<f64>>,
    mut hook: Option<&mut Hook<'_>>,
) -> Result<RunLog> {
    cfg.validate()?;
    let kind = backend.cost_kind();
    let run_start = Instant::now();
    let mut log = RunLog::default();
    let mut t_latest = None;
    let mut t_first = None;
    for l in 0..=cfg.max_steps {
        let iter_start = Instant::now();
        let hook_report = match hook.as_mut() {
            Some(h) => h(&HookContext {
                l,
                particles: &particles,
                t_latest,
                t_first,
            })?,
            None => None,
        };
        let hook_secs = iter_start.elapsed().as_secs_f64();

        let eval_start = Instant::now();
        let evals = par::map_indexed(particles.len(), |m| backend.evaluate(&particles[m]));
        let mut eval_secs = eval_start.elapsed().as_secs_f64();
        let mut etas = Vec::with_capacity(evals.len());
        let mut scores = Vec::with_capacity(evals.len());
        for (m, ev) in evals.into_iter().enumerate() {
            let ev = ev.map_err(|e| SvrbError::Backend {
                index: m,
                source: Box::new(e),
            })?;
            let mut s = prior.score(&particles[m]);
            s.iter_mut().zip(&ev.grad).for_each(|(si, g)| *si -= g);
            etas.push(ev.eta);
            scores.push(s);
        }
        log.trajectory.push(Snapshot {
            l,
            particles: particles.clone(),
            eta: etas.clone(),
        });

        let h = median_bandwidth(&particles);
        let q = svgd_direction(&particles, &scores, h);
        let t = stopping_indicator(&q);
        t_first.get_or_insert(t);
        t_latest = Some(t);
        let merit0 = etas
            .iter()
            .zip(&particles)
            .map(|(e, th)| e - prior.log_density(th))
            .sum::<f64>()
            / particles.len() as f64;
        let mean_eta = etas.iter().sum::<f64>() / etas.len() as f64;
        let stop = l == cfg.max_steps || t <= cfg.tolerance;

        let mut record = IterationRecord {
            l,
            backend: backend.descriptor().to_string(),
            t,
            alpha: 0.0,
            bandwidth: h,
            merit0,
            merit: merit0,
            backtracks: 0,
            line_search_exhausted: false,
            replayed_step: false,
            clamped: 0,
            mean_eta,
            stopped: stop,
            hook: hook_report.clone(),
            timings: Timings::default(),
            elapsed: 0.0,
        };
        if !stop {
            let replay = cfg.replay_steps.as_ref().and_then(|s| s.get(l).copied());
            let ls_start = Instant::now();
            let outcome = match replay {
                Some(alpha) => LineSearchOutcome {
                    alpha,
                    merit0,
                    merit: f64::NAN,
                    backtracks: 0,
                    exhausted: false,
                },
                None => line_search(&particles, &q, merit0, backend, prior, cfg.line_search),
            };
            eval_secs += ls_start.elapsed().as_secs_f64();
            if outcome.exhausted {
                warn!("iteration {l}: line search exhausted, taking floor step {:.3e}", outcome.alpha);
            }
            let mut clamped = 0;
            for (th, qr) in particles.iter_mut().zip(&q) {
                let (next, c) = moved(prior, th, qr, outcome.alpha);
                *th = next;
                clamped += c;
            }
            record.alpha = outcome.alpha;
            record.merit = outcome.merit;
            record.backtracks = outcome.backtracks;
            record.line_search_exhausted = outcome.exhausted;
            record.replayed_step = replay.is_some();
            record.clamped = clamped;
        }
        let mut timings = hook_report.map(|r| r.timings).unwrap_or_default();
        timings.charge(kind, eval_secs);
        let total = iter_start.elapsed().as_secs_f64();
        timings.svgd_overhead += (total - hook_secs - eval_secs).max(0.0);
        record.timings = timings;
        record.elapsed = run_start.elapsed().as_secs_f64();
        info!(
            "l={l} t={t:.4e} alpha={:.3e} mean_eta={mean_eta:.4e} backend={}",
            record.alpha,
            backend.descriptor()
        );
        log.records.push(record);
        if stop {
            break;
        }
    }
    Ok(log)
}
