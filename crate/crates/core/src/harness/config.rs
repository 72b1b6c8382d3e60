use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveConfig;
use crate::error::{Result, SvrbError};
use crate::fem::{CaseConfig, CaseKind, CustomCase};
use crate::svgd::SvgdConfig;

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_output() -> PathBuf {
    PathBuf::from("svrb-out")
}

fn one() -> usize {
    1
}

fn default_fixed_tol() -> f64 {
    1e-5
}

fn default_max_basis() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Hifi,
    /// Built greedily on the prior particles to `tol`, then frozen.
    RbFixed {
        #[serde(default = "default_fixed_tol")]
        tol: f64,
        #[serde(default = "default_max_basis")]
        max_basis: usize,
    },
    RbAdaptive(AdaptiveConfig),
}

impl BackendConfig {
    pub fn descriptor(&self) -> &'static str {
        match self {
            BackendConfig::Hifi => "hifi",
            BackendConfig::RbFixed { .. } => "rb-fixed",
            BackendConfig::RbAdaptive(_) => "rb-adaptive",
        }
    }

    pub fn is_reduced(&self) -> bool {
        !matches!(self, BackendConfig::Hifi)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpFlags {
    /// MatrixMarket files of every assembled block.
    #[serde(default)]
    pub matrices: bool,
    /// Only the final ensemble in `particles.csv` instead of every iteration.
    #[serde(default)]
    pub final_only: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub version: u32,
    pub problem: CaseConfig,
    pub svgd: SvgdConfig,
    pub backend: BackendConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dump: DumpFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_rb: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_rb: Option<PathBuf>,
    /// Worker threads for per-particle batches.
    #[serde(default = "one")]
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn new(problem: CaseConfig, svgd: SvgdConfig, backend: BackendConfig) -> Self {
        Self {
            version: SCHEMA_VERSION,
            problem,
            svgd,
            backend,
            output_dir: default_output(),
            dump: DumpFlags::default(),
            save_rb: None,
            load_rb: None,
            threads: 1,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| SvrbError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    /// Checks everything that can be checked without assembling the problem.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(SvrbError::Config(format!(
                "unsupported config version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.problem.mesh < 1 {
            return Err(SvrbError::Config("mesh must be >= 1".into()));
        }
        if !(self.problem.noise_level > 0.0) {
            return Err(SvrbError::Config("noise_level must be > 0".into()));
        }
        self.svgd.validate()?;
        match &self.backend {
            BackendConfig::Hifi => {}
            BackendConfig::RbFixed { tol, max_basis } => {
                if !(*tol >= 0.0) {
                    return Err(SvrbError::Config("rb-fixed tol must be >= 0".into()));
                }
                if *max_basis == 0 {
                    return Err(SvrbError::Config("max_basis must be >= 1".into()));
                }
            }
            BackendConfig::RbAdaptive(a) => a.validate()?,
        }
        if self.threads == 0 {
            return Err(SvrbError::Config("threads must be >= 1".into()));
        }
        if self.load_rb.is_some() && !self.backend.is_reduced() {
            return Err(SvrbError::Config("load_rb requires a reduced backend".into()));
        }
        Ok(())
    }
}

/// Case names accepted on the command line; anything else is read as a custom case file.
pub fn parse_case(name: &str) -> Result<CaseKind> {
    match name {
        "uniform4" => Ok(CaseKind::Uniform4),
        "gaussian9" => Ok(CaseKind::Gaussian9),
        path => {
            let s = std::fs::read_to_string(path)
                .map_err(|e| SvrbError::Config(format!("unknown case '{path}' and not a readable file: {e}")))?;
            let custom: CustomCase = serde_json::from_str(&s)?;
            Ok(CaseKind::Custom(custom))
        }
    }
}
