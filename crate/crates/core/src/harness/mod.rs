//! Experiment orchestration: configured runs, analysis of run directories, benchmarks and the verification suite.

pub mod analyze;
pub mod bench;
pub mod config;
pub mod output;
pub mod verify;

use std::path::Path;

use log::info;
use serde::Serialize;

use crate::adaptive::{build_on_particles, run_svrb_from, SweepReport};
use crate::backend::{prior_ensemble, HiFiBackend, RbFixedBackend};
use crate::error::Result;
use crate::fem::AffineProblem;
use crate::par;
use crate::rb::ReducedModel;
use crate::svgd::{svgd_run, HookContext, HookReport, RunLog};

pub use analyze::cmd_analyze;
pub use bench::{cmd_bench, speedup, BenchRow};
pub use config::{parse_case, BackendConfig, DumpFlags, ExperimentConfig};
pub use verify::{cmd_verify, VerifyOptions, VerifyRow};

/// Everything a run produced, before it is written out.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub model: Option<ReducedModel>,
    pub sweeps: Vec<SweepReport>,
    pub dofs: usize,
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    schema_version: u32,
    crate_version: &'a str,
    backend: &'a str,
    seed: u64,
    threads: usize,
    parallel_feature: bool,
    dofs: usize,
    dim: usize,
    observations: usize,
    noise_sigma: f64,
    iterations: usize,
    n_u: Option<usize>,
    n_psi: Option<usize>,
}

/// Runs the configured pipeline on an assembled problem.
pub fn execute(cfg: &ExperimentConfig, problem: &AffineProblem) -> Result<RunOutcome> {
    let prior = problem.prior();
    let loaded = cfg
        .load_rb
        .as_deref()
        .map(|p| ReducedModel::load_json(p, problem))
        .transpose()?;
    match &cfg.backend {
        BackendConfig::Hifi => {
            let log = svgd_run(&HiFiBackend::new(problem), prior, &cfg.svgd, None)?;
            Ok(RunOutcome {
                log,
                model: None,
                sweeps: Vec::new(),
                dofs: problem.num_dofs(),
            })
        }
        BackendConfig::RbFixed { tol, max_basis } => {
            let (rm, sweep) = match loaded {
                Some(rm) => (rm, None),
                None => {
                    let particles = prior_ensemble(problem, cfg.svgd.particles, cfg.svgd.seed)?;
                    let (rm, s) = build_on_particles(problem, &particles, *tol, *max_basis)?;
                    (rm, Some(s))
                }
            };
            let (n_u, n_psi) = (rm.n_u(), rm.n_psi());
            let build = sweep.clone();
            let mut hook = move |ctx: &HookContext<'_>| -> Result<Option<HookReport>> {
                if ctx.l != 0 {
                    return Ok(None);
                }
                Ok(Some(HookReport {
                    eps_r: Some(*tol),
                    n_u: Some(n_u),
                    n_psi: Some(n_psi),
                    enriched: build.as_ref().map_or(0, |s| s.enriched + 1),
                    max_indicator: build.as_ref().map(SweepReport::final_max),
                    certified: build.as_ref().map(|s| s.certified),
                    flags: Vec::new(),
                    timings: build.as_ref().map(|s| s.timings).unwrap_or_default(),
                }))
            };
            let backend = RbFixedBackend::new(problem, rm);
            let log = svgd_run(&backend, prior, &cfg.svgd, Some(&mut hook))?;
            Ok(RunOutcome {
                log,
                model: Some(backend.into_model()),
                sweeps: sweep.into_iter().collect(),
                dofs: problem.num_dofs(),
            })
        }
        BackendConfig::RbAdaptive(a) => {
            let out = run_svrb_from(problem, &cfg.svgd, a, loaded)?;
            Ok(RunOutcome {
                log: out.log,
                model: Some(out.model),
                sweeps: out.sweeps,
                dofs: problem.num_dofs(),
            })
        }
    }
}

/// Writes a run's artifacts into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, problem: &AffineProblem, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    output::write_json(&dir.join("config.json"), cfg)?;
    let meta = Meta {
        schema_version: config::SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
        backend: cfg.backend.descriptor(),
        seed: cfg.svgd.seed,
        threads: cfg.threads,
        parallel_feature: cfg!(feature = "parallel"),
        dofs: out.dofs,
        dim: problem.dim(),
        observations: problem.observations().num_obs(),
        noise_sigma: problem.noise_sigma(),
        iterations: out.log.records.len(),
        n_u: out.model.as_ref().map(ReducedModel::n_u),
        n_psi: out.model.as_ref().map(ReducedModel::n_psi),
    };
    output::write_json(&dir.join("meta.json"), &meta)?;
    output::write_jsonl(&dir.join("runlog.jsonl"), &out.log.records)?;
    let snaps = if cfg.dump.final_only {
        &out.log.trajectory[out.log.trajectory.len().saturating_sub(1)..]
    } else {
        &out.log.trajectory[..]
    };
    output::write_particles(&dir.join("particles.csv"), snaps)?;
    output::write_history(&dir.join("history.csv"), &out.log)?;
    if let Some(rm) = &out.model {
        output::write_schedule(&dir.join("schedule.csv"), &out.log)?;
        output::write_jsonl(&dir.join("sweeps.jsonl"), &out.sweeps)?;
        rm.save_json(&dir.join("rb.json"))?;
        if let Some(p) = &cfg.save_rb {
            rm.save_json(p)?;
        }
    }
    if cfg.dump.matrices {
        problem.dump_matrices(&dir.join("matrices"))?;
    }
    Ok(())
}

/// Assembles, runs and writes one configured experiment.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    par::with_threads(cfg.threads, || {
        let problem = AffineProblem::assemble(&cfg.problem)?;
        info!(
            "{} run: {} dofs, d={}, M={}, L={}",
            cfg.backend.descriptor(),
            problem.num_dofs(),
            problem.dim(),
            cfg.svgd.particles,
            cfg.svgd.max_steps
        );
        let out = execute(cfg, &problem)?;
        write_outputs(&cfg.output_dir, cfg, &problem, &out)?;
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svgd::initial_particles;
    use crate::adaptive::AdaptiveConfig;
    use crate::fem::CaseConfig;
    use crate::svgd::SvgdConfig;

    fn cfg(dir: &Path, backend: BackendConfig) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(CaseConfig::uniform4(8), SvgdConfig::new(4, 3, 7), backend);
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn zero_steps_emit_prior_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), BackendConfig::Hifi);
        c.svgd.max_steps = 0;
        let out = cmd_run(&c).unwrap();
        assert_eq!(out.log.records.len(), 1);
        let parts = output::read_final_particles(&dir.path().join("particles.csv")).unwrap();
        let p = AffineProblem::assemble(&c.problem).unwrap();
        assert_eq!(parts, initial_particles(p.prior(), 4, 7));
    }

    #[test]
    fn every_backend_writes_artifacts() {
        for backend in [
            BackendConfig::Hifi,
            BackendConfig::RbFixed { tol: 1e-5, max_basis: 50 },
            BackendConfig::RbAdaptive(AdaptiveConfig::new(0.1, Some(2))),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let c = cfg(dir.path(), backend.clone());
            let out = cmd_run(&c).unwrap();
            for f in ["config.json", "meta.json", "runlog.jsonl", "particles.csv", "history.csv"] {
                assert!(dir.path().join(f).exists(), "{f} missing for {}", backend.descriptor());
            }
            assert_eq!(dir.path().join("rb.json").exists(), backend.is_reduced());
            let lines = std::fs::read_to_string(dir.path().join("runlog.jsonl")).unwrap();
            assert_eq!(lines.lines().count(), out.log.records.len());
            let stamps: Vec<f64> = out.log.records.iter().map(|r| r.elapsed).collect();
            assert!(stamps.windows(2).all(|w| w[1] >= w[0]));
            assert!(out.log.records.iter().all(|r| r.backend == backend.descriptor()));
        }
    }

    #[test]
    fn saved_model_can_be_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), BackendConfig::RbFixed { tol: 1e-4, max_basis: 50 });
        let rb = dir.path().join("saved.json");
        c.save_rb = Some(rb.clone());
        let first = cmd_run(&c).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut c2 = c.clone();
        c2.output_dir = dir2.path().to_path_buf();
        c2.save_rb = None;
        c2.load_rb = Some(rb);
        let second = cmd_run(&c2).unwrap();
        assert_eq!(first.log.trajectory, second.log.trajectory);
    }
}
