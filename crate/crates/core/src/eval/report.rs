//! Relative-error-reduction table (one block per selection method) and the
//! mean ± std table over seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{relative_error_reduction, Metrics};
use crate::error::{Error, Result};
use crate::selection::SelectionMethod;
use crate::ssl::Method;

/// One finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub domain: String,
    pub method: Method,
    /// `None` for runs that use no unlabeled data.
    pub selection: Option<SelectionMethod>,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColumnCell {
    pub ic: Option<f64>,
    pub ner: Option<f64>,
    /// Best SSL method within the block.
    pub ic_bold: bool,
    pub ner_bold: bool,
    /// Best over every block.
    pub ic_best: bool,
    pub ner_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// One cell per domain.
    pub cells: Vec<ColumnCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub selection: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub domains: Vec<String>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        let n = xs.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std, n }
    }
}

/// IC accuracy and NER F1 per method, mean ± std over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AppendixTable {
    pub domain: String,
    pub selection: String,
    pub methods: Vec<String>,
    pub ic_accuracy: Vec<MeanStd>,
    pub ner_f1: Vec<MeanStd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: ReportTable,
    pub appendix: Vec<AppendixTable>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

const NO_SELECTION: &str = "-";

/// Builds the report. Every domain needs at least one baseline run.
pub fn experiment_report(runs: &[RunRecord]) -> Result<Report> {
    let mut domains: Vec<String> = Vec::new();
    for r in runs {
        if !domains.contains(&r.domain) {
            domains.push(r.domain.clone());
        }
    }
    if domains.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let mut base = Vec::with_capacity(domains.len());
    for d in &domains {
        let b = runs.iter().filter(|r| &r.domain == d && r.method == Method::Baseline);
        let ic = mean(b.clone().map(|r| r.metrics.ic_error));
        let ner = mean(b.map(|r| r.metrics.ner_f1_error));
        match (ic, ner) {
            (Some(ic), Some(ner)) => base.push((ic, ner)),
            _ => return Err(Error::Report(format!("no baseline run for domain {d}"))),
        }
    }
    let mut selections: Vec<Option<SelectionMethod>> = SelectionMethod::ALL
        .iter()
        .copied()
        .filter(|s| runs.iter().any(|r| r.method != Method::Baseline && r.selection == Some(*s)))
        .map(Some)
        .collect();
    if runs.iter().any(|r| r.method != Method::Baseline && r.selection.is_none()) || selections.is_empty() {
        selections.insert(0, None);
    }

    let mut blocks = Vec::new();
    for sel in &selections {
        let zero = ColumnCell {
            ic: Some(0.0),
            ner: Some(0.0),
            ..ColumnCell::default()
        };
        let mut rows = vec![ReportRow {
            method: Method::Baseline.title().to_string(),
            cells: vec![zero; domains.len()],
        }];
        for m in Method::SSL {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.method == m && r.selection == *sel).collect();
            if mine.is_empty() {
                continue;
            }
            let cells = domains
                .iter()
                .zip(&base)
                .map(|(d, &(bic, bner))| {
                    let of_domain = || mine.iter().filter(|r| &r.domain == d);
                    let ic = mean(of_domain().map(|r| r.metrics.ic_error));
                    let ner = mean(of_domain().map(|r| r.metrics.ner_f1_error));
                    ColumnCell {
                        ic: ic.and_then(|e| relative_error_reduction(bic, e).ok()),
                        ner: ner.and_then(|e| relative_error_reduction(bner, e).ok()),
                        ..ColumnCell::default()
                    }
                })
                .collect();
            rows.push(ReportRow {
                method: m.title().to_string(),
                cells,
            });
        }
        blocks.push(Block {
            selection: sel.map_or(NO_SELECTION, |s| s.title()).to_string(),
            rows,
        });
    }
    mark_best(&mut blocks, domains.len());

    let mut appendix = Vec::new();
    for d in &domains {
        for sel in &selections {
            let mut methods = Vec::new();
            let mut ic = Vec::new();
            let mut ner = Vec::new();
            for m in Method::ALL {
                let mine: Vec<&RunRecord> = runs
                    .iter()
                    .filter(|r| &r.domain == d && r.method == m && (m == Method::Baseline || r.selection == *sel))
                    .collect();
                if mine.is_empty() {
                    continue;
                }
                methods.push(m.title().to_string());
                ic.push(MeanStd::of(&mine.iter().map(|r| r.metrics.ic_accuracy).collect::<Vec<_>>()));
                ner.push(MeanStd::of(&mine.iter().map(|r| r.metrics.ner_f1).collect::<Vec<_>>()));
            }
            appendix.push(AppendixTable {
                domain: d.clone(),
                selection: sel.map_or(NO_SELECTION, |s| s.title()).to_string(),
                methods,
                ic_accuracy: ic,
                ner_f1: ner,
            });
        }
    }
    Ok(Report {
        table: ReportTable { domains, blocks },
        appendix,
    })
}

/// Bold marks the per-block column minimum over SSL rows; best marks the
/// minimum over all blocks.
fn mark_best(blocks: &mut [Block], n_domains: usize) {
    type Pick = fn(&mut ColumnCell) -> (&mut Option<f64>, &mut bool, &mut bool);
    let picks: [Pick; 2] = [
        |c| (&mut c.ic, &mut c.ic_bold, &mut c.ic_best),
        |c| (&mut c.ner, &mut c.ner_bold, &mut c.ner_best),
    ];
    for col in 0..n_domains {
        for pick in picks {
            let mut global = f64::INFINITY;
            for b in blocks.iter_mut() {
                let local = b
                    .rows
                    .iter_mut()
                    .skip(1)
                    .filter_map(|r| *pick(&mut r.cells[col]).0)
                    .fold(f64::INFINITY, f64::min);
                global = global.min(local);
                for r in b.rows.iter_mut().skip(1) {
                    let (v, bold, _) = pick(&mut r.cells[col]);
                    *bold = *v == Some(local);
                }
            }
            for b in blocks.iter_mut() {
                for r in b.rows.iter_mut().skip(1) {
                    let (v, _, best) = pick(&mut r.cells[col]);
                    *best = *v == Some(global);
                }
            }
        }
    }
}

fn pct(v: Option<f64>, baseline: bool, bold: bool, best: bool) -> String {
    let mut s = match v {
        None => "n/a".to_string(),
        Some(_) if baseline => "0".to_string(),
        Some(x) => format!("{:.2}%", 100.0 * x),
    };
    if bold {
        s = format!("**{s}**");
    }
    if best {
        s.push('†');
    }
    s
}

fn render_grid(out: &mut String, grid: &[Vec<String>]) {
    let cols = grid.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    for row in grid {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            let pad = widths[c] - cell.chars().count();
            if c < 2 {
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            } else {
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            }
            if c + 1 < row.len() {
                line.push_str("  ");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
}

impl ReportTable {
    pub fn render_text(&self) -> String {
        let mut grid = vec![{
            let mut h = vec!["SSL".to_string(), "Selection".to_string()];
            for d in &self.domains {
                h.push(format!("{d} IC"));
                h.push(format!("{d} NER"));
            }
            h
        }];
        for b in &self.blocks {
            for (i, r) in b.rows.iter().enumerate() {
                let mut line = vec![r.method.clone(), b.selection.clone()];
                for c in &r.cells {
                    line.push(pct(c.ic, i == 0, c.ic_bold, c.ic_best));
                    line.push(pct(c.ner, i == 0, c.ner_bold, c.ner_best));
                }
                grid.push(line);
            }
        }
        let mut out = String::new();
        render_grid(&mut out, &grid);
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["selection", "method", "domain", "ic_rer", "ner_rer", "ic_bold", "ner_bold", "ic_best", "ner_best"])?;
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.blocks {
            for r in &b.rows {
                for (d, c) in self.domains.iter().zip(&r.cells) {
                    w.write_record([
                        b.selection.clone(),
                        r.method.clone(),
                        d.clone(),
                        num(c.ic),
                        num(c.ner),
                        c.ic_bold.to_string(),
                        c.ner_bold.to_string(),
                        c.ic_best.to_string(),
                        c.ner_best.to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<ReportTable> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut domains: Vec<String> = Vec::new();
        let mut blocks: Vec<Block> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 9 {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("expected 9 fields, found {}", rec.len()),
                });
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse().map(Some).map_err(|_| Error::Parse {
                    line: i + 2,
                    message: format!("bad number {s:?}"),
                })
            };
            let flag = |s: &str| s == "true";
            if !domains.iter().any(|d| d == &rec[2]) {
                domains.push(rec[2].to_string());
            }
            let cell = ColumnCell {
                ic: num(&rec[3])?,
                ner: num(&rec[4])?,
                ic_bold: flag(&rec[5]),
                ner_bold: flag(&rec[6]),
                ic_best: flag(&rec[7]),
                ner_best: flag(&rec[8]),
            };
            if blocks.last().map(|b| b.selection.as_str()) != Some(&rec[0]) {
                blocks.push(Block {
                    selection: rec[0].to_string(),
                    rows: Vec::new(),
                });
            }
            let block = blocks.last_mut().expect("block exists");
            let first_domain = &rec[2] == domains[0].as_str();
            if first_domain || block.rows.last().map(|r| r.method.as_str()) != Some(&rec[1]) {
                block.rows.push(ReportRow {
                    method: rec[1].to_string(),
                    cells: Vec::new(),
                });
            }
            block.rows.last_mut().expect("row exists").cells.push(cell);
        }
        Ok(ReportTable { domains, blocks })
    }
}

impl AppendixTable {
    pub fn render_text(&self) -> String {
        let mut out = format!("{} / {}\n", self.domain, self.selection);
        let mut grid = vec![{
            let mut h = vec!["Task".to_string(), String::new()];
            h.extend(self.methods.iter().cloned());
            h
        }];
        for (task, vals) in [("IC", &self.ic_accuracy), ("NER", &self.ner_f1)] {
            let best = vals.iter().map(|v| v.mean).fold(f64::NEG_INFINITY, f64::max);
            let mut line = vec![task.to_string(), String::new()];
            for v in vals {
                let s = format!("{:.4} ± {:.4}", v.mean, v.std);
                line.push(if v.mean == best { format!("**{s}**") } else { s });
            }
            grid.push(line);
        }
        render_grid(&mut out, &grid);
        out
    }
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut out = String::from("Relative error reduction versus the supervised baseline (negative is better)\n\n");
        out.push_str(&self.table.render_text());
        out.push_str("\nIC accuracy and NER F1, mean ± std over seeds\n");
        for a in &self.appendix {
            out.push('\n');
            out.push_str(&a.render_text());
        }
        let _ = writeln!(out);
        out
    }
}
