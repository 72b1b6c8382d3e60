//! CSV and JSON-lines writers. Floats use shortest round-trip exponent form.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SvrbError};
use crate::error_lab::{CurveRow, DiscrepancyRow};
use crate::svgd::{RunLog, Snapshot};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

/// `l,m,theta_1..theta_d,eta` for the given snapshots.
pub fn write_particles(path: &Path, snapshots: &[Snapshot]) -> Result<()> {
    let d = snapshots
        .first()
        .and_then(|s| s.particles.first())
        .map_or(0, Vec::len);
    let mut header = String::from("l,m");
    for j in 1..=d {
        let _ = write!(header, ",theta_{j}");
    }
    header.push_str(",eta");
    let rows = snapshots.iter().flat_map(|s| {
        s.particles.iter().zip(&s.eta).enumerate().map(move |(m, (p, e))| {
            let mut row = format!("{},{m}", s.l);
            for x in p {
                row.push(',');
                row.push_str(&fmt_f64(*x));
            }
            row.push(',');
            row.push_str(&fmt_f64(*e));
            row
        })
    });
    write_lines(path, &header, rows)
}

/// Reads the snapshot with the largest `l` back from `particles.csv`.
pub fn read_final_particles(path: &Path) -> Result<Vec<Vec<f64>>> {
    let f = File::open(path).map_err(|e| SvrbError::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut best_l = None;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(SvrbError::Config(format!("malformed particle row {}", i + 1)));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| SvrbError::Config(format!("bad number '{s}' in row {}: {e}", i + 1)))
        };
        let l: usize = fields[0]
            .parse()
            .map_err(|e| SvrbError::Config(format!("bad iteration index in row {}: {e}", i + 1)))?;
        let theta = fields[2..fields.len() - 1]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<f64>>>()?;
        match best_l {
            Some(b) if l < b => {}
            Some(b) if l == b => out.push(theta),
            _ => {
                best_l = Some(l);
                out = vec![theta];
            }
        }
    }
    if out.is_empty() {
        return Err(SvrbError::Config(format!("no particles in {}", path.display())));
    }
    Ok(out)
}

pub fn write_history(path: &Path, log: &RunLog) -> Result<()> {
    let header = "l,t,alpha,backtracks,line_search_exhausted,clamped,mean_eta,eps_r,n_u,n_psi,enriched,max_indicator,certified,hifi_solve,rb_online,rb_offline,svgd_overhead";
    let rows = log.records.iter().map(|r| {
        let h = r.hook.as_ref();
        [
            r.l.to_string(),
            fmt_f64(r.t),
            fmt_f64(r.alpha),
            r.backtracks.to_string(),
            r.line_search_exhausted.to_string(),
            r.clamped.to_string(),
            fmt_f64(r.mean_eta),
            opt_f(h.and_then(|h| h.eps_r)),
            opt(h.and_then(|h| h.n_u)),
            opt(h.and_then(|h| h.n_psi)),
            opt(h.map(|h| h.enriched)),
            opt_f(h.and_then(|h| h.max_indicator)),
            opt(h.and_then(|h| h.certified)),
            fmt_f64(r.timings.hifi_solve),
            fmt_f64(r.timings.rb_online),
            fmt_f64(r.timings.rb_offline),
            fmt_f64(r.timings.svgd_overhead),
        ]
        .join(",")
    });
    write_lines(path, header, rows)
}

/// Tolerance and basis size at the enrichment steps only.
pub fn write_schedule(path: &Path, log: &RunLog) -> Result<()> {
    let rows = log.records.iter().filter_map(|r| {
        let h = r.hook.as_ref()?;
        Some(format!(
            "{},{},{},{},{},{}",
            r.l,
            opt_f(h.eps_r),
            opt(h.n_u),
            opt(h.n_psi),
            h.enriched,
            opt_f(h.max_indicator)
        ))
    });
    write_lines(path, "l,eps_r,n_u,n_psi,enriched,max_indicator", rows)
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let header = "stage,n_u,n_psi,mean_abs_e_eta,mean_abs_e_delta,mean_abs_delta,mean_eta_bound,mean_delta_bound,mean_e_u,mean_e_u_e_psi";
    let lines = rows.iter().map(|r| {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.n_u,
            r.n_psi,
            fmt_f64(r.mean_abs_e_eta),
            fmt_f64(r.mean_abs_e_delta),
            fmt_f64(r.mean_abs_delta),
            fmt_f64(r.mean_eta_bound),
            fmt_f64(r.mean_delta_bound),
            fmt_f64(r.mean_e_u),
            fmt_f64(r.mean_e_u_e_psi)
        )
    });
    write_lines(path, header, lines)
}

/// First two parameter components of every particle.
pub fn write_scatter(path: &Path, particles: &[Vec<f64>]) -> Result<()> {
    let rows = particles.iter().enumerate().map(|(m, p)| {
        format!(
            "{m},{},{}",
            p.first().copied().map(fmt_f64).unwrap_or_default(),
            p.get(1).copied().map(fmt_f64).unwrap_or_default()
        )
    });
    write_lines(path, "m,theta_1,theta_2", rows)
}

pub fn write_discrepancy(path: &Path, rows: &[DiscrepancyRow]) -> Result<()> {
    let lines = rows
        .iter()
        .map(|r| format!("{},{},{}", r.l, fmt_f64(r.max_l1), fmt_f64(r.mean_l1)));
    write_lines(path, "l,max_l1,mean_l1", lines)
}
