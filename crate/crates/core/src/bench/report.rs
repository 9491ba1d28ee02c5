use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{AblationRow, BenchError, MetricReport, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    Csv,
    Markdown,
    PlotData,
}

fn sorted(reports: &[MetricReport]) -> Vec<&MetricReport> {
    let mut v: Vec<_> = reports.iter().collect();
    v.sort_by(|a, b| (&a.scenario, &a.controller).cmp(&(&b.scenario, &b.controller)));
    v
}

pub fn write_metrics_csv(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in sorted(reports) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricReport>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

pub fn metrics_markdown(reports: &[MetricReport]) -> String {
    let mut s = String::from(
        "| scenario | controller | SSE (V) | THD u (%) | THD i (%) | overshoot (%) | unbalance (%) | settle (ms) |\n\
         |---|---|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in sorted(reports) {
        if r.diverged {
            let _ = writeln!(s, "| {} | {} | diverged | | | | | |", r.scenario, r.controller);
            continue;
        }
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {} | {} | {:.2} | {} | {} |",
            r.scenario,
            r.controller,
            r.sse,
            opt(r.thd_voltage, 3),
            opt(r.thd_current, 3),
            r.relative_overshoot,
            opt(r.unbalance, 3),
            opt(r.settle_time.map(|t| t * 1e3), 1),
        );
    }
    s
}

/// Plot data: `t, u_bus_d, u_bus_q, |u_bus|, i_ld, i_lq` per sample.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &Trace) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "u_bus_d", "u_bus_q", "u_bus_mag", "i_ld", "i_lq"])?;
    for s in &trace.samples {
        w.write_record(
            [s.t, s.u_bus_d, s.u_bus_q, s.bus_magnitude(), s.i_ld, s.i_lq].map(|v| v.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| network | params | FLOPs | est. time (us) | compression |\n|---|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.3} | {:.2} |",
            r.name, r.params, r.flops, r.est_time_us, r.compression_ratio
        );
    }
    s
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes the requested formats under `dir` and returns the created paths
/// in sorted order.
pub fn emit_report(
    dir: impl AsRef<Path>,
    reports: &[MetricReport],
    traces: &[Trace],
    ablation: Option<&[AblationRow]>,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>, BenchError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut formats = formats.to_vec();
    formats.sort();
    formats.dedup();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                if !reports.is_empty() {
                    let p = dir.join("metrics.csv");
                    write_metrics_csv(&p, reports)?;
                    out.push(p);
                }
                if let Some(rows) = ablation {
                    let p = dir.join("ablation.csv");
                    write_ablation_csv(&p, rows)?;
                    out.push(p);
                }
            }
            ReportFormat::Markdown => {
                if !reports.is_empty() {
                    let p = dir.join("metrics.md");
                    std::fs::write(&p, metrics_markdown(reports))?;
                    out.push(p);
                }
                if let Some(rows) = ablation {
                    let p = dir.join("ablation.md");
                    std::fs::write(&p, ablation_markdown(rows))?;
                    out.push(p);
                }
            }
            ReportFormat::PlotData => {
                let tdir = dir.join("traces");
                std::fs::create_dir_all(&tdir)?;
                for t in traces {
                    let p = tdir.join(format!("{}__{}.csv", file_stem(&t.scenario), file_stem(&t.controller)));
                    write_trace_csv(&p, t)?;
                    out.push(p);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}
