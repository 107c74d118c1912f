//! Run files (JSON lines) and metric reports.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use fsir_core::{MetricReport, RankedRun};

use crate::error::{Error, Result};

pub fn write_runs<W: Write>(mut w: W, runs: &[RankedRun]) -> std::io::Result<()> {
    for run in runs {
        serde_json::to_writer(&mut w, run)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn runs_to_string(runs: &[RankedRun]) -> String {
    let mut buf = Vec::new();
    write_runs(&mut buf, runs).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn parse_runs<R: BufRead>(r: R) -> Result<Vec<RankedRun>> {
    let mut runs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        runs.push(serde_json::from_str(&line).map_err(|e| Error::Line {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(runs)
}

pub fn read_runs(path: &Path) -> Result<Vec<RankedRun>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_runs(BufReader::new(f))
}

pub fn report_json(report: &MetricReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Plain-text table: one row per query, per sub-dataset and overall.
pub fn report_table(report: &MetricReport) -> String {
    let k = report.k;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:<22} {:>9} {:>9}",
        "query",
        "sub_dataset",
        format!("AP@{k}"),
        format!("R@{k}")
    );
    for m in &report.per_query {
        let _ = writeln!(
            s,
            "{:<28} {:<22} {:>9.4} {:>9.4}",
            m.query_id,
            m.sub_dataset.as_str(),
            m.average_precision,
            m.recall
        );
    }
    for (sub, m) in &report.per_sub_dataset {
        let _ = writeln!(
            s,
            "{:<28} {:<22} {:>9.4} {:>9.4}",
            format!("mean ({} queries)", m.queries),
            sub.as_str(),
            m.map,
            m.mean_recall
        );
    }
    let o = &report.overall;
    let _ = writeln!(
        s,
        "{:<28} {:<22} {:>9.4} {:>9.4}",
        format!("mean ({} queries)", o.queries),
        "overall",
        o.map,
        o.mean_recall
    );
    if !report.skipped.is_empty() {
        let _ = writeln!(s, "skipped (no test positives): {}", report.skipped.join(", "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_round_trip() {
        let runs = vec![
            RankedRun {
                query_id: "q1".into(),
                ranking: vec!["a".into(), "b".into()],
                scores: vec![0.9, 0.1],
            },
            RankedRun {
                query_id: "q2".into(),
                ranking: vec![],
                scores: vec![],
            },
        ];
        let text = runs_to_string(&runs);
        assert_eq!(parse_runs(text.as_bytes()).unwrap(), runs);
    }

    #[test]
    fn bad_line_reports_number() {
        let text = "{\"query_id\":\"q\",\"ranking\":[],\"scores\":[]}\n{oops}\n";
        match parse_runs(text.as_bytes()) {
            Err(Error::Line { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
