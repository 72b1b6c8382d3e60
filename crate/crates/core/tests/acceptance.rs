//! One test per acceptance criterion; each prints a single PASS/FAIL line.

use std::time::Instant;

use svrb::adaptive::{run_svrb, AdaptiveConfig};
use svrb::backend::HiFiBackend;
use svrb::error_lab::{sample_discrepancy, ErrorLab};
use svrb::fem::{AffineProblem, CaseConfig, CaseKind, PriorSpec};
use svrb::harness::bench::bench_on;
use svrb::harness::verify::{
    bound_suite, coercive_samples, dwr_identity_gaps, hifi_gradient_error, model_from, rb_gradient_error,
    snapshot_exactness,
};
use svrb::harness::{cmd_run, BackendConfig, ExperimentConfig};
use svrb::svgd::{initial_particles, svgd_run, GaussianBackend, SvgdConfig};

const SEED: u64 = 2024;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} {name:<30} {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn cases() -> [CaseKind; 2] {
    [CaseKind::Uniform4, CaseKind::Gaussian9]
}

fn problem(kind: CaseKind, mesh: usize) -> AffineProblem {
    AffineProblem::assemble(&CaseConfig::new(kind, mesh)).unwrap()
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for kind in cases() {
        let p = problem(kind, 16);
        let thetas = coercive_samples(&p, 10, SEED, 0.05);
        assert_eq!(thetas.len(), 10);
        let rm = model_from(&p, &coercive_samples(&p, 3, SEED + 100, 0.05)).unwrap();
        worst.0 = worst.0.max(hifi_gradient_error(&p, &thetas).unwrap());
        worst.1 = worst.1.max(rb_gradient_error(&p, &rm, &thetas).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-5 && worst.1 < 1e-5 && secs < 60.0;
    report(
        1,
        "gradient-correctness",
        pass,
        &format!("hifi {:.2e}, rb-corrected {:.2e} (< 1e-5), {secs:.1} s", worst.0, worst.1),
    );
    assert!(pass);
}

#[test]
fn c02_dwr_identities() {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for kind in cases() {
        for mesh in [9, 16] {
            let p = problem(kind.clone(), mesh);
            let thetas = coercive_samples(&p, 10, SEED, 0.05);
            let rm = model_from(&p, &coercive_samples(&p, 3, SEED + 100, 0.05)).unwrap();
            let (a, b) = dwr_identity_gaps(&p, &rm, &thetas).unwrap();
            worst = (worst.0.max(a), worst.1.max(b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-9 && worst.1 < 1e-9 && secs < 60.0;
    report(
        2,
        "dwr-identities",
        pass,
        &format!("delta {:.2e}, corrected error {:.2e} (< 1e-9 rel), {secs:.1} s", worst.0, worst.1),
    );
    assert!(pass);
}

#[test]
fn c03_bound_suite() {
    let start = Instant::now();
    let mut checks = 0;
    let mut failures = Vec::new();
    for kind in cases() {
        let p = problem(kind, 16);
        let rm = model_from(&p, &coercive_samples(&p, 10, SEED + 100, 0.05)).unwrap();
        let thetas = coercive_samples(&p, 32, SEED, 0.0);
        assert_eq!(thetas.len(), 32);
        let r = bound_suite(&p, &rm, &thetas, &[1, 5, 10]).unwrap();
        checks += r.checks;
        failures.extend(r.failures);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 300.0;
    report(
        3,
        "bound-suite",
        pass,
        &format!("{checks} checks, {} failures, {secs:.1} s", failures.len()),
    );
    assert!(pass, "{failures:#?}");
}

#[test]
fn c04_snapshot_exactness() {
    let mut pass = true;
    let mut detail = Vec::new();
    for kind in cases() {
        let name = format!("{kind:?}");
        let p = problem(kind, 16);
        let parts = initial_particles(p.prior(), 32, SEED + 2);
        let s = snapshot_exactness(&p, &parts, 1e-6).unwrap();
        pass &= s.worst_delta < 1e-9 && s.worst_rel_e_u < 1e-9;
        detail.push(format!(
            "{name}: |delta| {:.2e} (roundoff scale {:.1e}), e_u/u_h {:.2e} over {} selections",
            s.worst_delta, s.roundoff_scale, s.worst_rel_e_u, s.selections
        ));
    }
    report(4, "snapshot-exactness", pass, &detail.join("; "));
    assert!(pass);
}

#[test]
fn c05_corrected_potential_superiority() {
    let start = Instant::now();
    let p = problem(CaseKind::Uniform4, 32);
    let out = run_svrb(&p, &SvgdConfig::new(64, 99, SEED), &AdaptiveConfig::new(0.01, Some(20))).unwrap();
    let lab = ErrorLab::new(&p);
    let refs = lab.references(out.log.final_particles()).unwrap();
    let rows = lab.decay_curve(&out.model, &refs).unwrap();
    let first = &rows[0];
    let last = rows.last().unwrap();
    let ordered = rows
        .iter()
        .filter(|r| r.n_u >= 10)
        .all(|r| r.mean_abs_e_delta < r.mean_abs_e_eta);
    let decay_eta = first.mean_abs_e_eta / last.mean_abs_e_eta;
    let decay_delta = first.mean_abs_e_delta / last.mean_abs_e_delta;
    for r in &rows {
        println!(
            "  N_r={:>3} mean|e_eta|={:.3e} mean|e_delta|={:.3e}",
            r.n_u, r.mean_abs_e_eta, r.mean_abs_e_delta
        );
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ordered && decay_eta >= 1e4 && decay_delta >= 1e4 && secs < 600.0;
    report(
        5,
        "corrected-superiority",
        pass,
        &format!(
            "ordered for N_r>=10: {ordered}, decay eta {decay_eta:.1e}, delta {decay_delta:.1e} (>= 1e4), final N_r {}, {secs:.1} s",
            last.n_u
        ),
    );
    assert!(pass);
}

#[test]
fn c06_svgd_gaussian_sanity() {
    let start = Instant::now();
    let prior = PriorSpec::uniform_symmetric(2, 3.0);
    let cfg = SvgdConfig::new(128, 500, SEED);
    let log = svgd_run(&GaussianBackend::standard(2), &prior, &cfg, None).unwrap();
    let parts = log.final_particles();
    let m = parts.len() as f64;
    let mean: Vec<f64> = (0..2).map(|j| parts.iter().map(|p| p[j]).sum::<f64>() / m).collect();
    let mut frob = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let c = parts.iter().map(|p| (p[a] - mean[a]) * (p[b] - mean[b])).sum::<f64>() / m;
            let target = if a == b { 1.0 } else { 0.0 };
            frob += (c - target).powi(2);
        }
    }
    let frob = frob.sqrt();
    let mean_err = mean.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = mean_err < 0.1 && frob < 0.15 && secs < 120.0;
    report(
        6,
        "svgd-gaussian-sanity",
        pass,
        &format!("mean error {mean_err:.3e} (< 0.1), covariance Frobenius {frob:.3e} (< 0.15), {secs:.1} s"),
    );
    assert!(pass);
}

#[test]
fn c07_adaptive_schedule_structure() {
    let p = problem(CaseKind::Gaussian9, 33);
    let svgd = SvgdConfig::new(64, 100, SEED);
    let mut pass = true;
    let mut detail = Vec::new();
    for eps0 in [1.0, 0.1, 0.01] {
        let out = run_svrb(&p, &svgd, &AdaptiveConfig::new(eps0, Some(20))).unwrap();
        let hooks: Vec<_> = out.log.records.iter().filter_map(|r| r.hook.as_ref()).collect();
        let eps: Vec<f64> = hooks.iter().map(|h| h.eps_r.unwrap()).collect();
        let n: Vec<usize> = hooks.iter().map(|h| h.n_u.unwrap()).collect();
        let monotone = eps.windows(2).all(|w| w[1] <= w[0]) && n.windows(2).all(|w| w[1] >= w[0]);
        let certified = hooks.iter().all(|h| h.certified == Some(true) && h.max_indicator.unwrap() <= h.eps_r.unwrap());
        let final_n = out.model.n_u();
        let ok = monotone && certified && (5..=200).contains(&final_n);
        pass &= ok;
        detail.push(format!(
            "eps0={eps0}: {} updates, eps_r {:.1e}->{:.1e}, N_r {}->{final_n}, certified {certified}",
            hooks.len(),
            eps[0],
            eps[eps.len() - 1],
            n[0]
        ));
    }
    report(7, "adaptive-schedule", pass, &detail.join("; "));
    assert!(pass);
}

#[test]
fn c08_speedup() {
    let mut cfg = ExperimentConfig::new(
        CaseConfig::uniform4(128),
        SvgdConfig::new(64, 10, SEED),
        BackendConfig::RbAdaptive(AdaptiveConfig::new(1.0, Some(20))),
    );
    cfg.threads = 1;
    let p = AffineProblem::assemble(&cfg.problem).unwrap();
    let rows = bench_on(&cfg, &p).unwrap();
    let rb = &rows[1];
    let pass = rb.speedup > 10.0;
    report(
        8,
        "speedup",
        pass,
        &format!(
            "{} dofs, hifi eval {:.2} s, rb build {:.2} s + eval {:.2} s, N_r {:?}, speedup {:.1} (> 10)",
            rb.dofs, rows[0].eval_seconds, rb.build_seconds, rb.eval_seconds, rb.n_u, rb.speedup
        ),
    );
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn c09_trajectory_fidelity() {
    let p = problem(CaseKind::Uniform4, 32);
    let eps0s = [1.0, 0.1, 0.01];
    let mut per_eps = vec![Vec::new(); eps0s.len()];
    for seed in [1, 2, 3] {
        let cfg = SvgdConfig::new(32, 40, seed);
        let hifi = svgd_run(&HiFiBackend::new(&p), p.prior(), &cfg, None).unwrap();
        let mut replay = cfg.clone();
        replay.replay_steps = Some(hifi.records.iter().map(|r| r.alpha).collect());
        for (i, &eps0) in eps0s.iter().enumerate() {
            let rb = run_svrb(&p, &replay, &AdaptiveConfig::new(eps0, Some(10))).unwrap();
            let rows = sample_discrepancy(&hifi.trajectory, &rb.log.trajectory);
            per_eps[i].push(rows.last().unwrap().max_l1);
        }
    }
    let medians: Vec<f64> = per_eps.iter().map(|v| median(v.clone())).collect();
    let finite = per_eps.iter().flatten().all(|x| x.is_finite());
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let pass = finite && monotone;
    report(
        9,
        "trajectory-fidelity",
        pass,
        &format!(
            "median final max l1 at eps0 1/0.1/0.01: {:.2e} / {:.2e} / {:.2e}",
            medians[0], medians[1], medians[2]
        ),
    );
    assert!(pass, "{per_eps:?}");
}

#[test]
fn c10_determinism() {
    let mut pass = true;
    for backend in [BackendConfig::Hifi, BackendConfig::RbAdaptive(AdaptiveConfig::new(0.1, Some(5)))] {
        let files: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let mut cfg = ExperimentConfig::new(CaseConfig::gaussian9(12), SvgdConfig::new(16, 15, SEED), backend.clone());
                cfg.output_dir = dir.path().to_path_buf();
                cfg.threads = 1;
                cmd_run(&cfg).unwrap();
                std::fs::read(dir.path().join("particles.csv")).unwrap()
            })
            .collect();
        pass &= !files[0].is_empty() && files[0] == files[1];
    }
    report(10, "determinism", pass, "hifi and rb-adaptive particle CSVs byte-identical across two runs");
    assert!(pass);
}
