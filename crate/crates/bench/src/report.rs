//! Aggregates metrics files into per-configuration tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::metrics::RunMetrics;

/// One CSV row; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub partitions: u32,
    pub attributes: usize,
    pub mean_tps: f64,
    pub std_tps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub warmup_s: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "partitions",
    "attributes",
    "mean_tps",
    "std_tps",
    "p50_ms",
    "p95_ms",
    "p99_ms",
    "warmup_s",
];

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<RunMetrics>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: not a metrics record", path.display(), i + 1))?;
        out.push(m);
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One row per `(partitions, attributes)`, in ascending order.
pub fn summarize(runs: &[RunMetrics]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u32, usize), Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.partitions, r.attributes)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((partitions, attributes), rs)| {
            let of = |f: &dyn Fn(&RunMetrics) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let tps = of(&|r| r.mean_tps);
            let warmups: Vec<f64> = rs.iter().filter_map(|r| r.warmup_s).collect();
            SummaryRow {
                partitions,
                attributes,
                mean_tps: mean(&tps),
                std_tps: std_dev(&tps),
                p50_ms: mean(&of(&|r| r.latency.p50_ms as f64)),
                p95_ms: mean(&of(&|r| r.latency.p95_ms as f64)),
                p99_ms: mean(&of(&|r| r.latency.p99_ms as f64)),
                warmup_s: (!warmups.is_empty()).then(|| mean(&warmups)),
            }
        })
        .collect()
}

pub fn to_csv(rows: &[SummaryRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn text_summary(rows: &[SummaryRow], runs: &[RunMetrics]) -> String {
    let mut s = String::new();
    let count = |n: u32, k: usize| runs.iter().filter(|r| r.partitions == n && r.attributes == k).count();
    let _ = writeln!(s, "throughput (records/s)");
    let _ = writeln!(s, "{:>5} {:>5} {:>5} {:>12} {:>10}", "N", "K", "runs", "mean", "stddev");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>5} {:>12.1} {:>10.1}",
            r.partitions,
            r.attributes,
            count(r.partitions, r.attributes),
            r.mean_tps,
            r.std_tps
        );
    }
    let _ = writeln!(s, "\nlatency (ms)");
    let _ = writeln!(s, "{:>5} {:>5} {:>8} {:>8} {:>8}", "N", "K", "p50", "p95", "p99");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>8.1} {:>8.1} {:>8.1}",
            r.partitions, r.attributes, r.p50_ms, r.p95_ms, r.p99_ms
        );
    }
    let _ = writeln!(s, "\nwarm-up (s)");
    for r in rows {
        let w = r.warmup_s.map_or("never".to_owned(), |w| format!("{w:.1}"));
        let _ = writeln!(s, "{:>5} {:>5} {:>8}", r.partitions, r.attributes, w);
    }
    s
}

/// Bar chart of mean throughput per configuration with stddev whiskers.
pub fn svg(rows: &[SummaryRow]) -> String {
    let (w, h, pad) = (640.0, 360.0, 50.0);
    let top = rows
        .iter()
        .map(|r| r.mean_tps + r.std_tps)
        .fold(1.0_f64, f64::max);
    let slot = (w - 2.0 * pad) / rows.len().max(1) as f64;
    let y = |v: f64| h - pad - v / top * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - pad, w - pad);
    let _ = writeln!(s, r#"<text x="{pad}" y="20">mean records/s (max {top:.0})</text>"#);
    for (i, r) in rows.iter().enumerate() {
        let x = pad + i as f64 * slot + slot * 0.15;
        let bw = slot * 0.7;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{bw:.1}" height="{:.1}" fill="#4a7ab5"/>"##,
            y(r.mean_tps),
            h - pad - y(r.mean_tps)
        );
        let cx = x + bw / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(r.mean_tps - r.std_tps),
            y(r.mean_tps + r.std_tps)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">N={} K={}</text>"#,
            h - pad + 16.0,
            r.partitions,
            r.attributes
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Collector, RunMeta};

    fn run(n: u32, k: usize, tps: f64) -> RunMetrics {
        let mut m = Collector::new(0, k).finish(
            RunMeta {
                partitions: n,
                ..RunMeta::default()
            },
            1_000,
            0.01,
        );
        m.mean_tps = tps;
        m
    }

    #[test]
    fn single_run_has_zero_stddev() {
        let rows = summarize(&[run(1, 1, 100.0)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].std_tps, 0.0);
        assert_eq!(rows[0].mean_tps, 100.0);
    }

    #[test]
    fn mean_and_sample_stddev_of_three_runs() {
        let rows = summarize(&[run(2, 1, 90.0), run(2, 1, 100.0), run(2, 1, 110.0), run(1, 1, 5.0)]);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].partitions, rows[1].partitions), (1, 2));
        assert_eq!(rows[1].mean_tps, 100.0);
        assert_eq!(rows[1].std_tps, 10.0);
    }

    #[test]
    fn csv_header_is_fixed() {
        let csv = to_csv(&summarize(&[run(4, 2, 1.0)])).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(to_csv(&[]).unwrap().trim(), CSV_COLUMNS.join(","));
    }

    #[test]
    fn metrics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let runs = [run(1, 1, 3.0), run(1, 2, 4.0)];
        let text: String = runs.iter().map(|r| r.to_json_line() + "\n").collect();
        std::fs::write(&path, text).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), runs);
        std::fs::write(&path, "{oops\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn svg_has_one_bar_per_row() {
        let s = svg(&summarize(&[run(1, 1, 3.0), run(2, 1, 6.0)]));
        assert_eq!(s.matches("<rect").count(), 2);
    }
}
