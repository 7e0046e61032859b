//! Accuracy tables: `accuracy ± half CI width`, best entry per dataset in
//! bold, and a star on bold entries significantly better than Direct.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const RESULTS_FILE: &str = "results.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub dataset: String,
    /// Fraction in [0, 1].
    pub accuracy: f64,
    /// Half the bootstrap CI width, as a fraction.
    pub ci_half_width: f64,
    /// One-sided Wilcoxon p-value against Direct; absent for Direct itself.
    #[serde(default)]
    pub p_value: Option<f64>,
    /// Reference rows (e.g. externally fine-tuned models) are shown but
    /// never compete for bold.
    #[serde(default)]
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub results: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub method: String,
    pub dataset: String,
    pub accuracy: String,
    pub half_width: String,
    pub p_value: Option<f64>,
    pub bold: bool,
    pub star: bool,
}

impl ReportCell {
    /// `*47.24 ± 0.8` style plain text.
    pub fn plain(&self) -> String {
        let star = if self.star { "*" } else { "" };
        format!("{star}{} ± {}", self.accuracy, self.half_width)
    }

    /// Markdown with the number (and star) in bold.
    pub fn markdown(&self) -> String {
        let star = if self.star { "\\*" } else { "" };
        if self.bold {
            format!("**{star}{}** ± {}", self.accuracy, self.half_width)
        } else {
            format!("{star}{} ± {}", self.accuracy, self.half_width)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    /// Row order: first appearance, reference rows last.
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub cells: Vec<ReportCell>,
}

/// Builds the table. Entries tied for the best displayed accuracy are all
/// bold; a star needs bold and `p < 0.05`.
pub fn report_table(results: &[MethodResult]) -> Result<ReportTable> {
    if results.is_empty() {
        return Err(Error::Input("report needs at least one result".into()));
    }
    let mut methods: Vec<String> = Vec::new();
    let mut references: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    for r in results {
        let list = if r.reference { &mut references } else { &mut methods };
        if !list.contains(&r.method) {
            list.push(r.method.clone());
        }
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
    }
    methods.extend(references);

    let shown = |r: &MethodResult| format!("{:.2}", r.accuracy * 100.0);
    let mut cells = Vec::with_capacity(results.len());
    for dataset in &datasets {
        let rows: Vec<&MethodResult> = results.iter().filter(|r| &r.dataset == dataset).collect();
        let best = rows
            .iter()
            .filter(|r| !r.reference)
            .map(|r| shown(r).parse::<f64>().unwrap_or(f64::NEG_INFINITY))
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rows {
            let bold = !r.reference && shown(r).parse::<f64>().is_ok_and(|v| v == best);
            let star = bold && r.p_value.is_some_and(|p| p < SIGNIFICANCE_LEVEL);
            cells.push(ReportCell {
                method: r.method.clone(),
                dataset: r.dataset.clone(),
                accuracy: shown(r),
                half_width: format!("{:.1}", r.ci_half_width * 100.0),
                p_value: r.p_value,
                bold,
                star,
            });
        }
    }
    Ok(ReportTable {
        methods,
        datasets,
        cells,
    })
}

impl ReportTable {
    pub fn cell(&self, method: &str, dataset: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.method == method && c.dataset == dataset)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "dataset", "accuracy", "ci_half_width", "p_value", "bold", "star", "cell"])?;
        for m in &self.methods {
            for d in &self.datasets {
                let Some(c) = self.cell(m, d) else { continue };
                w.write_record([
                    c.method.clone(),
                    c.dataset.clone(),
                    c.accuracy.clone(),
                    c.half_width.clone(),
                    c.p_value.map(|p| format!("{p:.6e}")).unwrap_or_default(),
                    c.bold.to_string(),
                    c.star.to_string(),
                    c.plain(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Methods as rows, datasets as columns, padded to align.
    pub fn to_markdown(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("Method".to_string())
            .chain(self.datasets.iter().cloned())
            .collect()];
        for m in &self.methods {
            let mut row = vec![m.clone()];
            for d in &self.datasets {
                row.push(self.cell(m, d).map_or_else(|| "-".to_string(), ReportCell::markdown));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0).max(3))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            out.push('|');
            for (c, w) in cells.iter().zip(&widths) {
                let pad = w - c.chars().count();
                let _ = write!(out, " {c}{} |", " ".repeat(pad));
            }
            out.push('\n');
        };
        line(&mut out, &rows[0]);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule);
        for r in &rows[1..] {
            line(&mut out, r);
        }
        out
    }
}

/// Results from `dir/results.json` and every `dir/*/results.json`, in
/// sorted path order.
pub fn load_results_dir(dir: impl AsRef<Path>) -> Result<Vec<MethodResult>> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    let top = dir.join(RESULTS_FILE);
    if top.is_file() {
        files.push(top);
    }
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    files.extend(subdirs.into_iter().map(|p| p.join(RESULTS_FILE)).filter(|p| p.is_file()));
    if files.is_empty() {
        return Err(Error::Input(format!("no {RESULTS_FILE} under {}", dir.display())));
    }
    let mut all = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let parsed: ResultsFile = serde_json::from_str(&text)?;
        all.extend(parsed.results);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(method: &str, acc: f64, p: Option<f64>) -> MethodResult {
        MethodResult {
            method: method.into(),
            dataset: "D".into(),
            accuracy: acc,
            ci_half_width: 0.01,
            p_value: p,
            reference: false,
        }
    }

    #[test]
    fn single_method_is_bold_without_star() {
        let t = report_table(&[r("Direct", 0.5, None)]).unwrap();
        let c = t.cell("Direct", "D").unwrap();
        assert!(c.bold && !c.star);
        assert_eq!(c.markdown(), "**50.00** ± 1.0");
    }

    #[test]
    fn ties_are_all_bold() {
        let t = report_table(&[r("A", 0.61234, Some(0.01)), r("B", 0.6123, Some(0.2)), r("C", 0.5, None)]).unwrap();
        assert!(t.cell("A", "D").unwrap().bold);
        assert!(t.cell("B", "D").unwrap().bold);
        assert!(t.cell("A", "D").unwrap().star);
        assert!(!t.cell("B", "D").unwrap().star);
        assert!(!t.cell("C", "D").unwrap().bold);
    }

    #[test]
    fn stars_need_bold() {
        let t = report_table(&[r("A", 0.7, Some(0.2)), r("B", 0.6, Some(0.001))]).unwrap();
        assert!(!t.cell("B", "D").unwrap().star);
    }

    #[test]
    fn empty_is_error() {
        assert!(report_table(&[]).is_err());
    }
}
