use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EvalReport, GroupRow};
use crate::error::{bail, Result};

/// One JSONL line of a saved report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub model: String,
    pub judge: String,
    pub caveat: String,
    #[serde(flatten)]
    pub row: GroupRow,
}

impl EvalReport {
    pub fn to_lines(&self) -> Vec<ReportLine> {
        self.rows
            .iter()
            .map(|r| ReportLine {
                model: self.model.clone(),
                judge: self.judge.clone(),
                caveat: self.caveat.clone(),
                row: r.clone(),
            })
            .collect()
    }

    pub fn from_lines(lines: Vec<ReportLine>) -> Result<Self> {
        let Some(first) = lines.first() else {
            bail!(Report, "report file has no rows");
        };
        let (model, judge, caveat) = (first.model.clone(), first.judge.clone(), first.caveat.clone());
        if lines.iter().any(|l| l.model != model) {
            bail!(Report, "report file mixes several models");
        }
        Ok(EvalReport {
            model,
            judge,
            caveat,
            rows: lines.into_iter().map(|l| l.row).collect(),
        })
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("model: {}\njudge: {}\nnote: {}\n", self.model, self.judge, self.caveat);
        let header = ["group", "prompts", "samples", "EMT", "EMT std", "TP", "PPL", "distinct"];
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.group.clone(),
                    r.prompts.to_string(),
                    r.samples.to_string(),
                    format!("{:.4}", r.emt_mean),
                    format!("{:.4}", r.emt_std),
                    format!("{:.4}", r.toxicity_probability),
                    format!("{:.2}", r.perplexity),
                    format!("{:.3}", r.distinct),
                ]
            })
            .collect();
        out.push_str(&align(&header, &body));
        out
    }
}

fn align(header: &[&str], body: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for row in body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// One metric of one group across models; deltas are against the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub group: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub models: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

type Column = fn(&GroupRow) -> f64;

const METRICS: [(&str, Column); 5] = [
    ("emt", |r| r.emt_mean),
    ("emt_std", |r| r.emt_std),
    ("tp", |r| r.toxicity_probability),
    ("ppl", |r| r.perplexity),
    ("distinct", |r| r.distinct),
];

/// Side-by-side metrics. Every report must cover the same groups.
pub fn compare_models(reports: &[EvalReport]) -> Result<Comparison> {
    let Some(base) = reports.first() else {
        bail!(Report, "nothing to compare");
    };
    let mut groups: Vec<&str> = base.rows.iter().map(|r| r.group.as_str()).collect();
    groups.sort_unstable();
    for r in &reports[1..] {
        let mut g: Vec<&str> = r.rows.iter().map(|r| r.group.as_str()).collect();
        g.sort_unstable();
        if g != groups {
            bail!(Report, "report {} has groups {g:?}, report {} has {groups:?}", r.model, base.model);
        }
    }
    let mut rows = Vec::new();
    for row in &base.rows {
        for (metric, get) in METRICS {
            let values: Vec<f64> = reports.iter().map(|r| get(r.row(&row.group).expect("groups checked"))).collect();
            let deltas = values.iter().map(|v| v - values[0]).collect();
            rows.push(ComparisonRow {
                group: row.group.clone(),
                metric: metric.to_owned(),
                values,
                deltas,
            });
        }
    }
    Ok(Comparison {
        models: reports.iter().map(|r| r.model.clone()).collect(),
        rows,
    })
}

impl Comparison {
    /// Rows are group and metric, columns are models, then deltas against
    /// the first model.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = vec!["group".into(), "metric".into()];
        header.extend(self.models.iter().cloned());
        header.extend(self.models.iter().skip(1).map(|m| format!("d({m})")));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.group.clone(), r.metric.clone()];
                cells.extend(r.values.iter().map(|v| format!("{v:.4}")));
                cells.extend(r.deltas.iter().skip(1).map(|d| format!("{d:+.4}")));
                cells
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        align(&header, &body)
    }
}
