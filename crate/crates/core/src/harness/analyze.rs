use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::output;
use crate::error::{Result, SvrbError};
use crate::error_lab::ErrorLab;
use crate::fem::AffineProblem;
use crate::par;
use crate::rb::ReducedModel;
use crate::svgd::{IterationRecord, RunLog};

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub dir: PathBuf,
    pub particles: usize,
    pub stages: usize,
    /// Right-hand side of the KL estimate (not the divergence itself) for `η_r`.
    pub kl_rhs_plain: Option<f64>,
    /// Same for the corrected potential.
    pub kl_rhs_corrected: Option<f64>,
}

fn read_records(path: &Path) -> Result<Vec<IterationRecord>> {
    let f = File::open(path).map_err(|e| SvrbError::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Regenerates curves, schedules and scatter data for one run directory.
pub fn analyze_dir(dir: &Path) -> Result<AnalyzeSummary> {
    let cfg_path = dir.join("config.json");
    if !cfg_path.exists() {
        return Err(SvrbError::Config(format!("{} is not a run directory (no config.json)", dir.display())));
    }
    let cfg = ExperimentConfig::from_path(&cfg_path)?;
    let particles = output::read_final_particles(&dir.join("particles.csv"))?;
    output::write_scatter(&dir.join("scatter.csv"), &particles)?;
    let log = RunLog {
        records: read_records(&dir.join("runlog.jsonl"))?,
        trajectory: Vec::new(),
    };
    output::write_history(&dir.join("history.csv"), &log)?;
    output::write_schedule(&dir.join("schedule.csv"), &log)?;

    let rb_path = dir.join("rb.json");
    if !rb_path.exists() {
        return Ok(AnalyzeSummary {
            dir: dir.to_path_buf(),
            particles: particles.len(),
            stages: 0,
            kl_rhs_plain: None,
            kl_rhs_corrected: None,
        });
    }
    par::with_threads(cfg.threads, || {
        let problem = AffineProblem::assemble(&cfg.problem)?;
        let rm = ReducedModel::load_json(&rb_path, &problem)?;
        let lab = ErrorLab::new(&problem);
        let refs = lab.references(&particles)?;
        let rows = lab.decay_curve(&rm, &refs)?;
        output::write_curves(&dir.join("curves.csv"), &rows)?;
        let (kl_r, kl_d) = lab.kl_bound_estimate(&rm, &refs)?;
        let summary = AnalyzeSummary {
            dir: dir.to_path_buf(),
            particles: particles.len(),
            stages: rows.len(),
            kl_rhs_plain: Some(kl_r),
            kl_rhs_corrected: Some(kl_d),
        };
        output::write_json(&dir.join("analysis.json"), &summary)?;
        info!("{}: {} stages, KL rhs {kl_r:.3e} / {kl_d:.3e}", dir.display(), rows.len());
        Ok(summary)
    })
}

pub fn cmd_analyze(dirs: &[PathBuf]) -> Result<Vec<AnalyzeSummary>> {
    if dirs.is_empty() {
        return Err(SvrbError::Config("no run directories given".into()));
    }
    dirs.iter().map(|d| analyze_dir(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive::AdaptiveConfig;
    use crate::fem::CaseConfig;
    use crate::harness::{cmd_run, BackendConfig};
    use crate::svgd::SvgdConfig;

    #[test]
    fn empty_dir_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(cmd_analyze(&[dir.path().to_path_buf()]).unwrap_err().is_config());
        assert!(cmd_analyze(&[]).unwrap_err().is_config());
    }

    #[test]
    fn one_curve_row_per_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(
            CaseConfig::uniform4(8),
            SvgdConfig::new(6, 4, 3),
            BackendConfig::RbAdaptive(AdaptiveConfig::new(0.01, Some(2))),
        );
        c.output_dir = dir.path().to_path_buf();
        let out = cmd_run(&c).unwrap();
        let s = cmd_analyze(&[dir.path().to_path_buf()]).unwrap();
        let stages = out.model.unwrap().stages().len();
        assert_eq!(s[0].stages, stages);
        let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), stages + 1);
        assert!(dir.path().join("scatter.csv").exists());
    }

    #[test]
    fn snapshot_only_model_has_zero_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(
            CaseConfig::uniform4(8),
            SvgdConfig::new(1, 0, 5),
            BackendConfig::RbFixed { tol: 1e-6, max_basis: 10 },
        );
        c.output_dir = dir.path().to_path_buf();
        cmd_run(&c).unwrap();
        cmd_analyze(&[dir.path().to_path_buf()]).unwrap();
        let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        for row in curves.lines().skip(1) {
            let f: Vec<f64> = row.split(',').skip(3).map(|x| x.parse().unwrap()).collect();
            assert!(f[0] < 1e-9 && f[1] < 1e-9, "{row}");
        }
    }
}
