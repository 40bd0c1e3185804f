//! CSV and Markdown table rendering with the fixed metric column order:
//! BLEU (add-1), Rouge-L, rep-2, rep-3, rep-w, rep-r, div (uniq-1 appended in
//! screening mode).

use crate::metrics::MetricsReport;

/// Machine-readable CSV column names, in report order.
pub const METRIC_CSV_HEADERS: [&str; 7] =
    ["bleu_add1", "rouge_l", "rep2", "rep3", "rep_w", "rep_r", "div"];

/// Human-readable Markdown column names, in report order.
pub const METRIC_MD_HEADERS: [&str; 7] = [
    "BLEU (add-1)↑",
    "Rouge-L↑",
    "rep-2↓",
    "rep-3↓",
    "rep-w↓",
    "rep-r↓",
    "div↑",
];

#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: Vec<String>) -> Table {
        Table { headers, rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.headers.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.headers.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n", self.headers.join(" | "));
        out.push_str(&format!(
            "|{}\n",
            " --- |".repeat(self.headers.len())
        ));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }
}

/// Metric cells at full precision (CSV use).
pub fn metric_cells_csv(r: &MetricsReport) -> Vec<String> {
    vec![
        format!("{:.6}", r.bleu),
        format!("{:.6}", r.rouge_l),
        format!("{:.6}", r.rep2),
        format!("{:.6}", r.rep3),
        format!("{:.6}", r.rep_w),
        format!("{:.6}", r.rep_r),
        format!("{:.6}", r.div),
    ]
}

/// Metric cells at display precision (Markdown use).
pub fn metric_cells_md(r: &MetricsReport) -> Vec<String> {
    vec![
        format!("{:.2}", r.bleu),
        format!("{:.3}", r.rouge_l),
        format!("{:.2}", r.rep2),
        format!("{:.2}", r.rep3),
        format!("{:.2}", r.rep_w),
        format!("{:.2}", r.rep_r),
        format!("{:.2}", r.div),
    ]
}

/// Comparison table: one labeled row per run.
pub fn comparison_table(rows: &[(String, MetricsReport)], markdown: bool, include_uniq1: bool) -> Table {
    let mut headers: Vec<String> = vec!["Method".to_string()];
    let metric_headers: &[&str] = if markdown { &METRIC_MD_HEADERS } else { &METRIC_CSV_HEADERS };
    headers.extend(metric_headers.iter().map(|h| h.to_string()));
    if include_uniq1 {
        headers.push(if markdown { "uniq-1↑".to_string() } else { "uniq1".to_string() });
    }
    let mut table = Table::new(headers);
    for (label, report) in rows {
        let mut cells = vec![label.clone()];
        cells.extend(if markdown { metric_cells_md(report) } else { metric_cells_csv(report) });
        if include_uniq1 {
            cells.push(report.uniq1.to_string());
        }
        table.push_row(cells);
    }
    table
}
