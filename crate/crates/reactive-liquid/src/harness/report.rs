//! CSV and summary emission. Output is deterministic byte-for-byte for a given
//! run: fixed column orders, fixed float formatting, no wall-clock timestamps.

use std::io::Write;
use std::path::Path;

use super::compare::{ComparisonReport, Verdict};
use super::RunOutput;
use crate::sim::RunEvent;
use crate::time::secs_f64;

pub fn emit_reports(out_dir: &Path, run: &RunOutput) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let m = &run.metrics;

    let mut throughput = String::from("t_sec,count\n");
    let mut cumulative = String::from("t_sec,total\n");
    for (i, (tp, cum)) in m.throughput.iter().zip(m.cumulative.iter()).enumerate() {
        let t = i + 1;
        throughput.push_str(&format!("{t},{tp}\n"));
        cumulative.push_str(&format!("{t},{cum}\n"));
    }
    std::fs::write(out_dir.join("throughput.csv"), throughput)?;
    std::fs::write(out_dir.join("cumulative.csv"), cumulative)?;

    let mut completion = String::from("msg_id,consume_us,complete_us\n");
    for c in &m.completions {
        completion.push_str(&format!(
            "{},{},{}\n",
            c.msg_id, c.consume_us, c.complete_us
        ));
    }
    std::fs::write(out_dir.join("completion.csv"), completion)?;

    let mut summary = String::new();
    summary.push_str(&format!("run: {}\n", run.label));
    summary.push_str(&format!("duration_s: {}\n", m.duration_s));
    summary.push_str(&format!("processed_unique: {}\n", m.total_processed()));
    summary.push_str(&format!(
        "completions_recorded: {} (duplicates: {})\n",
        m.completions.len(),
        m.duplicate_count
    ));
    if let Some(median) = m.median_completion_time() {
        summary.push_str(&format!(
            "median_completion_ms: {:.3}\n",
            median as f64 / 1000.0
        ));
    }
    summary.push_str(&format!(
        "clusters: {} holding {} points\n",
        m.clusters.count, m.clusters.total_points
    ));
    for (id, n, lon, lat) in m.clusters.top.iter().take(5) {
        summary.push_str(&format!(
            "  cluster {id}: n={n} center=({lon:.6},{lat:.6})\n"
        ));
    }
    let respawns: Vec<&RunEvent> = run
        .events
        .iter()
        .filter(|e| matches!(e, RunEvent::Respawned { .. }))
        .collect();
    summary.push_str(&format!("respawns: {}\n", respawns.len()));
    for event in &run.events {
        match event {
            RunEvent::NodeKilled { node, at } => {
                summary.push_str(&format!("  t={:.3}s node{} killed\n", secs_f64(*at), node));
            }
            RunEvent::NodeRestored { node, at } => {
                summary.push_str(&format!(
                    "  t={:.3}s node{} restored\n",
                    secs_f64(*at),
                    node
                ));
            }
            RunEvent::Respawned {
                name,
                node,
                at,
                backoff,
                ..
            } => {
                summary.push_str(&format!(
                    "  t={:.3}s {} respawned on node{} (backoff {:.1}ms)\n",
                    secs_f64(*at),
                    name,
                    node,
                    *backoff as f64 / 1000.0
                ));
            }
            _ => {}
        }
    }
    std::fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(())
}

pub fn emit_comparison(
    out_dir: &Path,
    report: &ComparisonReport,
    a_label: &str,
    b_label: &str,
) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("t_sec,a_total,b_total\n");
    for (i, (a, b)) in report.points.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", i + 1, a, b));
    }
    std::fs::write(out_dir.join("comparison.csv"), csv)?;

    let verdict = match report.verdict {
        Verdict::BFaster => {
            format!("{b_label} processes more than {a_label} (trendline above y=x)")
        }
        Verdict::AFaster => {
            format!("{a_label} processes more than {b_label} (trendline below y=x)")
        }
        Verdict::Comparable => {
            format!("{a_label} and {b_label} are comparable (trendline near y=x)")
        }
    };
    let mut text = String::new();
    text.push_str(&format!("a: {a_label}\n"));
    text.push_str(&format!("b: {b_label}\n"));
    text.push_str(&format!("points: {}\n", report.points.len()));
    text.push_str(&format!("slope: {:.6}\n", report.slope));
    text.push_str(&format!("intercept: {:.6}\n", report.intercept));
    text.push_str(&format!("r_squared: {:.6}\n", report.r_squared));
    text.push_str(&format!("verdict: {verdict}\n"));
    let mut f = std::fs::File::create(out_dir.join("report.txt"))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads a cumulative.csv back into a series (for the compare subcommand).
pub fn read_cumulative(path: &Path) -> std::io::Result<Vec<u64>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let total = line
            .rsplit(',')
            .next()
            .and_then(|v| v.trim().parse::<u64>().ok())
            .ok_or_else(|| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("bad cumulative row: {line:?}"),
                )
            })?;
        out.push(total);
    }
    Ok(out)
}
