//! CSV and Markdown rendering.
//!
//! CSV: `id,metric,score` rows with six decimals, then one
//! `#aggregate,<metric>,XX.XX` line per metric. Markdown: run metadata,
//! one table per metric with one row per report and one column per item
//! plus the aggregate, and the context rankings when there are any. With
//! two or more rows the best cell of each column is bolded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{EvalError, Result};
use crate::run::{format_score, MetricReport};

pub const AGGREGATE_TAG: &str = "#aggregate";

pub fn render_csv(report: &MetricReport) -> String {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let mut put = |rec: [&str; 3]| w.write_record(rec).expect("writing to memory");
    put(["id", "metric", "score"]);
    for row in &report.rows {
        for (m, s) in report.metrics.iter().zip(&row.scores) {
            put([&row.id, m.name(), &format_score(*s)]);
        }
    }
    for (i, m) in report.metrics.iter().enumerate() {
        put([AGGREGATE_TAG, m.name(), &report.aggregate_cell(i)]);
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}

/// Rows and aggregates read back from [`render_csv`] output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedCsv {
    /// metric → (id, score) in file order.
    pub rows: BTreeMap<String, Vec<(String, f64)>>,
    pub aggregates: BTreeMap<String, String>,
}

pub fn parse_csv(text: &str) -> Result<ParsedCsv> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = ParsedCsv::default();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| EvalError::Record {
            line: line + 2,
            message: e.to_string(),
        })?;
        let [id, metric, value] = [&rec[0], &rec[1], &rec[2]];
        if id == AGGREGATE_TAG {
            out.aggregates.insert(metric.to_owned(), value.to_owned());
        } else {
            let v: f64 = value.parse().map_err(|_| EvalError::Record {
                line: line + 2,
                message: format!("bad score {value:?}"),
            })?;
            out.rows.entry(metric.to_owned()).or_default().push((id.to_owned(), v));
        }
    }
    Ok(out)
}

fn best(values: &[f64], higher: bool) -> f64 {
    let pick = if higher { f64::max } else { f64::min };
    values.iter().copied().reduce(pick).unwrap_or(f64::NAN)
}

fn cell(text: String, bold: bool) -> String {
    if bold {
        format!("**{text}**")
    } else {
        text
    }
}

/// Reports must share metrics and item ids; each becomes a table row.
pub fn render_markdown(reports: &[&MetricReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(EvalError::Config("nothing to render".into()));
    };
    let ids: Vec<&str> = first.rows.iter().map(|r| r.id.as_str()).collect();
    for r in reports {
        let other: Vec<&str> = r.rows.iter().map(|r| r.id.as_str()).collect();
        if r.metrics != first.metrics || other != ids {
            return Err(EvalError::Config(format!(
                "report {:?} does not have the same metrics and items as {:?}",
                r.label, first.label
            )));
        }
    }
    let compare = reports.len() > 1;
    let mut s = String::new();
    s.push_str("# Evaluation report\n\n");
    s.push_str("| run | setting | seed | config |\n|---|---|---:|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {} | {} | `{}` |",
            r.label, r.meta.setting, r.meta.seed, r.meta.config_hash
        );
    }
    let versions: Vec<String> = first.metrics.iter().map(|m| format!("{m} v{}", m.version())).collect();
    let _ = writeln!(s, "\nMetric versions: {}.", versions.join(", "));
    for (mi, &m) in first.metrics.iter().enumerate() {
        let _ = writeln!(s, "\n## {m}\n");
        let direction = if m.higher_is_better() { "Higher" } else { "Lower" };
        let _ = writeln!(s, "Per-item scores; aggregate is the mean ×100. {direction} is better.\n");
        let mut header = String::from("| run |");
        let mut rule = String::from("|---|");
        for id in &ids {
            let _ = write!(header, " {id} |");
            rule.push_str("---:|");
        }
        header.push_str(" aggregate |");
        rule.push_str("---:|");
        let _ = writeln!(s, "{header}\n{rule}");
        let columns: Vec<Vec<f64>> = (0..ids.len())
            .map(|i| reports.iter().map(|r| format_score(r.rows[i].scores[mi]).parse().unwrap()).collect())
            .collect();
        let aggregates: Vec<f64> = reports.iter().map(|r| r.aggregate(mi)).collect();
        let column_best: Vec<f64> = columns.iter().map(|c| best(c, m.higher_is_better())).collect();
        let aggregate_best = best(&aggregates, m.higher_is_better());
        for (ri, r) in reports.iter().enumerate() {
            let mut line = format!("| {} |", r.label);
            for (ci, col) in columns.iter().enumerate() {
                let _ = write!(line, " {} |", cell(format_score(col[ri]), compare && col[ri] == column_best[ci]));
            }
            let _ = write!(
                line,
                " {} |",
                cell(r.aggregate_cell(mi), compare && aggregates[ri] == aggregate_best)
            );
            let _ = writeln!(s, "{line}");
        }
    }
    for r in reports.iter().filter(|r| !r.rankings.is_empty()) {
        let _ = writeln!(s, "\n## Context ranking ({})\n\n| id | order |\n|---|---|", r.label);
        for (id, order) in &r.rankings {
            let order: Vec<String> = order.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "| {id} | {} |", order.join(", "));
        }
    }
    Ok(s)
}

pub fn write_output(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })
}
