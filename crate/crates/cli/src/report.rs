//! Comparison table and convergence CSV over a directory of runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::commands::{create_run_dir, ReportRecord, REPORT_FILE, TRACE_FILE};
use crate::error::{CliError, CliResult};

/// Display order of scheme labels; unknown labels sort last.
const LABEL_ORDER: [&str; 5] = ["fixed", "uniform", "manual", "searched", "custom"];

fn label_rank(label: &str) -> usize {
    LABEL_ORDER
        .iter()
        .position(|l| *l == label)
        .unwrap_or(LABEL_ORDER.len())
}

fn title(label: &str) -> String {
    let mut c = label.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::io(format!("reading {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ConvergenceSeries {
    pub name: String,
    pub dataset_hash: String,
    pub best_per_generation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub reports: Vec<ReportRecord>,
    pub series: Vec<ConvergenceSeries>,
    pub table: String,
    pub csv: String,
}

fn read_reports(dir: &Path) -> CliResult<Vec<ReportRecord>> {
    let mut files = Vec::new();
    find_files(dir, REPORT_FILE, &mut files)?;
    let mut reports = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f)
            .map_err(|e| CliError::io(format!("reading {}", f.display()), e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: ReportRecord = serde_json::from_str(line)
                .map_err(|e| CliError::Runtime(format!("bad report in {}: {e}", f.display())))?;
            reports.push(r);
        }
    }
    Ok(reports)
}

fn read_series(dir: &Path) -> CliResult<Vec<ConvergenceSeries>> {
    let mut files = Vec::new();
    find_files(dir, TRACE_FILE, &mut files)?;
    let mut series = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f)
            .map_err(|e| CliError::io(format!("reading {}", f.display()), e))?;
        let mut dataset_hash = String::new();
        let mut best = Vec::new();
        for line in text.lines() {
            let Ok(v) = serde_json::from_str::<Value>(line) else {
                continue;
            };
            match v["kind"].as_str() {
                Some("header") => {
                    dataset_hash = v["provenance"]["dataset_hash"]
                        .as_str()
                        .unwrap_or("")
                        .to_string()
                }
                Some("generation") => best.extend(v["record"]["best_fitness"].as_f64()),
                _ => {}
            }
        }
        let name = f
            .parent()
            .and_then(|p| p.strip_prefix(dir).ok())
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        series.push(ConvergenceSeries {
            name: if name.is_empty() { ".".into() } else { name },
            dataset_hash,
            best_per_generation: best,
        });
    }
    Ok(series)
}

/// Head name, label rank, label.
type RowKey = (String, usize, String);

/// One row per (head, scheme label), one column per episode setting. Rows
/// run Fixed, Uniform, Manual, Searched, Custom within each head.
pub fn render_table(reports: &[ReportRecord]) -> String {
    let mut columns: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut cells: BTreeMap<RowKey, BTreeMap<(usize, usize), String>> = BTreeMap::new();
    for r in reports {
        let key = (r.report.shape.way, r.report.shape.shot);
        columns.insert(key);
        cells
            .entry((
                r.report.head.to_string(),
                label_rank(&r.label),
                r.label.clone(),
            ))
            .or_default()
            .entry(key)
            .or_insert_with(|| r.formatted.clone());
    }
    let headers: Vec<String> = columns
        .iter()
        .map(|(w, k)| format!("{w}-way {k}-shot"))
        .collect();
    let mut rows = vec![{
        let mut h = vec!["head".to_string(), "scheme".to_string()];
        h.extend(headers);
        h
    }];
    for ((head, _, label), by_col) in &cells {
        let mut row = vec![head.clone(), title(label)];
        row.extend(
            columns
                .iter()
                .map(|c| by_col.get(c).cloned().unwrap_or_else(|| "-".into())),
        );
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Best fitness per generation, one row per search run.
pub fn render_csv(series: &[ConvergenceSeries]) -> String {
    let generations = series
        .iter()
        .map(|s| s.best_per_generation.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("run");
    for g in 0..generations {
        out.push_str(&format!(",gen{g}"));
    }
    out.push('\n');
    for s in series {
        out.push_str(&s.name.replace(',', "_"));
        for g in 0..generations {
            out.push(',');
            if let Some(v) = s.best_per_generation.get(g) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Collects every report and trace under `dir`. Refuses to mix datasets.
pub fn summarize(dir: &Path) -> CliResult<Summary> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let reports = read_reports(dir)?;
    if reports.is_empty() {
        return Err(CliError::Runtime(format!(
            "no evaluation reports under {}",
            dir.display()
        )));
    }
    let series = read_series(dir)?;
    let hashes: BTreeSet<&str> = reports
        .iter()
        .map(|r| r.provenance.dataset_hash.as_str())
        .chain(series.iter().map(|s| s.dataset_hash.as_str()))
        .collect();
    if hashes.len() > 1 {
        return Err(CliError::Runtime(format!(
            "refusing to compare runs over different datasets: {}",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let table = render_table(&reports);
    let csv = render_csv(&series);
    Ok(Summary {
        reports,
        series,
        table,
        csv,
    })
}

pub const TABLE_FILE: &str = "table.txt";
pub const CSV_FILE: &str = "convergence.csv";

/// Summarizes `dir` and writes the table and CSV into a new run directory
/// under `out`.
pub fn cmd_report(dir: &Path, out: &Path) -> CliResult<(PathBuf, Summary)> {
    let summary = summarize(dir)?;
    let run = create_run_dir(out, "report")?;
    let write = |name: &str, text: &str| {
        let p = run.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(format!("writing {}", p.display()), e))
    };
    write(TABLE_FILE, &summary.table)?;
    write(CSV_FILE, &summary.csv)?;
    let sources: Vec<Value> = summary
        .reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "label": r.label,
                "formatted": r.formatted,
                "provenance": r.provenance,
            })
        })
        .collect();
    let mut text = serde_json::to_vec_pretty(&sources).expect("sources serialize");
    text.push(b'\n');
    fs::write(run.join("sources.json"), text)
        .map_err(|e| CliError::io("writing sources.json", e))?;
    Ok((run, summary))
}
