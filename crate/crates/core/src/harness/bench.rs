use std::fmt::Write as _;

use log::info;
use serde::Serialize;

use super::config::{BackendConfig, ExperimentConfig};
use super::{execute, output};
use crate::error::Result;
use crate::fem::AffineProblem;
use crate::hifi;
use crate::par;
use crate::svgd::initial_particles;

/// HiFi evaluation time over reduced construction plus evaluation time.
pub fn speedup(hifi_eval: f64, rb_build: f64, rb_eval: f64) -> f64 {
    hifi_eval / (rb_build + rb_eval)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub backend: String,
    pub dofs: usize,
    pub n_u: Option<usize>,
    pub n_psi: Option<usize>,
    pub iterations: usize,
    pub build_seconds: f64,
    pub eval_seconds: f64,
    pub speedup: f64,
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>6} {:>6} {:>6} {:>12} {:>12} {:>9}",
        "backend", "dofs", "N_u", "N_psi", "iters", "build [s]", "eval [s]", "speedup"
    );
    for r in rows {
        let n = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>6} {:>6} {:>6} {:>12.4} {:>12.4} {:>9.2}",
            r.backend,
            r.dofs,
            n(r.n_u),
            n(r.n_psi),
            r.iterations,
            r.build_seconds,
            r.eval_seconds,
            r.speedup
        );
    }
    s
}

/// Runs the HiFi pipeline and the configured reduced one with identical seeds.
pub fn bench_on(cfg: &ExperimentConfig, problem: &AffineProblem) -> Result<Vec<BenchRow>> {
    let warm = initial_particles(problem.prior(), 1, cfg.svgd.seed);
    hifi::grad_potential(problem, &warm[0])?;

    let mut hifi_cfg = cfg.clone();
    hifi_cfg.backend = BackendConfig::Hifi;
    hifi_cfg.load_rb = None;
    let h = execute(&hifi_cfg, problem)?;
    let hifi_eval = h.log.total_timings().hifi_solve;
    let mut rows = vec![BenchRow {
        backend: "hifi".into(),
        dofs: h.dofs,
        n_u: None,
        n_psi: None,
        iterations: h.log.records.len(),
        build_seconds: 0.0,
        eval_seconds: hifi_eval,
        speedup: speedup(hifi_eval, 0.0, hifi_eval),
    }];
    info!("hifi evaluation time {hifi_eval:.3} s");
    if cfg.backend.is_reduced() {
        let r = execute(cfg, problem)?;
        let t = r.log.total_timings();
        let build = t.hifi_solve + t.rb_offline;
        let model = r.model.as_ref();
        rows.push(BenchRow {
            backend: cfg.backend.descriptor().into(),
            dofs: r.dofs,
            n_u: model.map(|m| m.n_u()),
            n_psi: model.map(|m| m.n_psi()),
            iterations: r.log.records.len(),
            build_seconds: build,
            eval_seconds: t.rb_online,
            speedup: speedup(hifi_eval, build, t.rb_online),
        });
    }
    Ok(rows)
}

/// Benchmark table written to `bench.csv` in the output directory.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    par::with_threads(cfg.threads, || {
        let problem = AffineProblem::assemble(&cfg.problem)?;
        let rows = bench_on(cfg, &problem)?;
        std::fs::create_dir_all(&cfg.output_dir)?;
        let lines: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    r.backend,
                    r.dofs,
                    r.n_u.map(|x| x.to_string()).unwrap_or_default(),
                    r.n_psi.map(|x| x.to_string()).unwrap_or_default(),
                    r.iterations,
                    output::fmt_f64(r.build_seconds),
                    output::fmt_f64(r.eval_seconds),
                    output::fmt_f64(r.speedup)
                )
            })
            .collect();
        let mut text = String::from("backend,dofs,n_u,n_psi,iterations,build_seconds,eval_seconds,speedup\n");
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        std::fs::write(cfg.output_dir.join("bench.csv"), text)?;
        Ok(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive::AdaptiveConfig;
    use crate::fem::CaseConfig;
    use crate::svgd::SvgdConfig;

    #[test]
    fn ratio_definition() {
        assert!((speedup(1800.0, 4.4, 4.4) - 204.545).abs() < 1e-3);
        assert_eq!(speedup(3.0, 0.0, 3.0), 1.0);
    }

    #[test]
    fn bench_produces_both_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(
            CaseConfig::uniform4(8),
            SvgdConfig::new(4, 3, 1),
            BackendConfig::RbAdaptive(AdaptiveConfig::new(1.0, Some(20))),
        );
        c.output_dir = dir.path().to_path_buf();
        let rows = cmd_bench(&c).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].speedup, 1.0);
        assert!(rows[1].speedup.is_finite() && rows[1].speedup > 0.0);
        assert!(format_table(&rows).contains("rb-adaptive"));
        let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
