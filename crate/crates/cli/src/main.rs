use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use svrb::adaptive::{AdaptiveConfig, ToleranceRule};
use svrb::fem::CaseConfig;
use svrb::harness::{self, bench, parse_case, verify, BackendConfig, ExperimentConfig, VerifyOptions};
use svrb::svgd::SvgdConfig;
use svrb::{Result, SvrbError};

#[derive(Parser)]
#[command(name = "svrb", version, about = "SVGD with adaptive reduced-basis surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(ExperimentArgs),
    /// Regenerate curves and tables from run directories.
    Analyze {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Matched HiFi and reduced runs with the speedup table.
    Bench(ExperimentArgs),
    /// Gradient, identity and bound checks.
    Verify {
        /// Coarser meshes and fewer samples.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Hifi,
    RbFixed,
    RbAdaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Absolute,
    Normalized,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment file; other flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// uniform4, gaussian9 or a path to a custom case JSON.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    mesh: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// SVGD stopping tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    eps0: Option<f64>,
    /// Enrichment period; 0 enriches only at the first step.
    #[arg(long = "K", alias = "period")]
    period: Option<usize>,
    #[arg(long, value_enum)]
    rule: Option<Rule>,
    /// Greedy tolerance of the fixed reduced basis.
    #[arg(long)]
    rb_tol: Option<f64>,
    #[arg(long, env = "SVRB_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    save_rb: Option<PathBuf>,
    #[arg(long)]
    load_rb: Option<PathBuf>,
    #[arg(long, env = "SVRB_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    dump_matrices: bool,
    /// Write only the final ensemble to particles.csv.
    #[arg(long)]
    final_only: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::new(
                CaseConfig::uniform4(32),
                SvgdConfig::new(64, 100, 0),
                BackendConfig::RbAdaptive(AdaptiveConfig::new(1.0, Some(20))),
            ),
        };
        if let Some(c) = &self.case {
            cfg.problem.case = parse_case(c)?;
        }
        if let Some(n) = self.mesh {
            cfg.problem.mesh = n;
        }
        if let Some(m) = self.particles {
            cfg.svgd.particles = m;
        }
        if let Some(l) = self.max_steps {
            cfg.svgd.max_steps = l;
        }
        if let Some(t) = self.tol {
            cfg.svgd.tolerance = t;
        }
        if let Some(s) = self.seed {
            cfg.svgd.seed = s;
        }
        match self.backend {
            Some(BackendKind::Hifi) => cfg.backend = BackendConfig::Hifi,
            Some(BackendKind::RbFixed) if !matches!(cfg.backend, BackendConfig::RbFixed { .. }) => {
                cfg.backend = BackendConfig::RbFixed { tol: 1e-5, max_basis: 500 };
            }
            Some(BackendKind::RbAdaptive) if !matches!(cfg.backend, BackendConfig::RbAdaptive(_)) => {
                cfg.backend = BackendConfig::RbAdaptive(AdaptiveConfig::new(1.0, Some(20)));
            }
            _ => {}
        }
        match &mut cfg.backend {
            BackendConfig::RbAdaptive(a) => {
                if let Some(e) = self.eps0 {
                    a.eps0 = e;
                    a.eps_min = a.eps_min.min(e);
                }
                if let Some(k) = self.period {
                    a.period = (k > 0).then_some(k);
                }
                if let Some(r) = self.rule {
                    a.rule = match r {
                        Rule::Absolute => ToleranceRule::Absolute,
                        Rule::Normalized => ToleranceRule::Normalized,
                    };
                }
            }
            BackendConfig::RbFixed { tol, .. } => {
                if let Some(t) = self.rb_tol {
                    *tol = t;
                }
            }
            BackendConfig::Hifi => {}
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if self.save_rb.is_some() {
            cfg.save_rb = self.save_rb.clone();
        }
        if self.load_rb.is_some() {
            cfg.load_rb = self.load_rb.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.dump.matrices |= self.dump_matrices;
        cfg.dump.final_only |= self.final_only;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = harness::cmd_run(&cfg)?;
            let last = out.log.records.last().ok_or_else(|| SvrbError::Config("empty run".into()))?;
            println!(
                "{}: {} iterations, final t = {:.3e}, artifacts in {}",
                cfg.backend.descriptor(),
                out.log.records.len(),
                last.t,
                cfg.output_dir.display()
            );
            if let Some(m) = &out.model {
                println!("reduced basis: N_u = {}, N_psi = {}", m.n_u(), m.n_psi());
            }
            Ok(true)
        }
        Command::Analyze { dirs } => {
            for s in harness::cmd_analyze(&dirs)? {
                println!("{}", serde_json::to_string(&s)?);
            }
            Ok(true)
        }
        Command::Bench(args) => {
            let cfg = args.resolve()?;
            let rows = harness::cmd_bench(&cfg)?;
            print!("{}", bench::format_table(&rows));
            Ok(true)
        }
        Command::Verify { quick, seed } => {
            let rows = harness::cmd_verify(VerifyOptions { quick, seed })?;
            print!("{}", verify::format_matrix(&rows));
            let passed = rows.iter().all(|r| r.passed);
            println!("{}", if passed { "all checks passed" } else { "some checks FAILED" });
            Ok(passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
