//! Plain-text dataset export.
//!
//! ```text
//! ptransfer-dataset 1
//! params {"seed":..,"n_base":..,...}      generation parameters as JSON
//! shift none | shift {"matrix":[..],...}  the realized shift, if any
//! class <id> <B|V|N>                      one line per class
//! x <class id> <v1> <v2> ...              one line per example
//! ```
//!
//! Reals use the shortest decimal form that parses back to the same `f64`,
//! so export followed by import is bit-exact.

use std::fmt::Write;

use super::{DatasetParams, DomainShift, LabeledDataset, Split};
use crate::error::{Error, Result};

const HEADER: &str = "ptransfer-dataset 1";

pub fn export_dataset(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(
        out,
        "params {}",
        serde_json::to_string(ds.params()).expect("params serialize")
    )
    .unwrap();
    match ds.shift() {
        None => writeln!(out, "shift none").unwrap(),
        Some(s) => writeln!(
            out,
            "shift {}",
            serde_json::to_string(s).expect("shift serialize")
        )
        .unwrap(),
    }
    for (c, split) in ds.class_split().iter().enumerate() {
        writeln!(out, "class {c} {}", split.tag()).unwrap();
    }
    for i in 0..ds.len() {
        write!(out, "x {}", ds.labels()[i]).unwrap();
        for v in ds.point(i) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn import_dataset(text: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, first) = lines.next().ok_or_else(|| perr(1, "empty input"))?;
    if first != HEADER {
        return Err(perr(n, format!("expected header {HEADER:?}")));
    }
    let (n, params_line) = lines.next().ok_or_else(|| perr(2, "missing params line"))?;
    let params: DatasetParams = serde_json::from_str(
        params_line
            .strip_prefix("params ")
            .ok_or_else(|| perr(n, "expected params record"))?,
    )
    .map_err(|e| perr(n, e.to_string()))?;
    let (n, shift_line) = lines.next().ok_or_else(|| perr(3, "missing shift line"))?;
    let shift_json = shift_line
        .strip_prefix("shift ")
        .ok_or_else(|| perr(n, "expected shift record"))?;
    let shift: Option<DomainShift> = if shift_json == "none" {
        None
    } else {
        Some(serde_json::from_str(shift_json).map_err(|e| perr(n, e.to_string()))?)
    };
    let dim = params.dim;
    let mut class_split = Vec::new();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines {
        let mut fields = line.split(' ');
        match fields.next() {
            Some("class") => {
                let id: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| perr(n, "bad class id"))?;
                if id != class_split.len() {
                    return Err(perr(n, format!("class ids must be consecutive, got {id}")));
                }
                let tag = fields
                    .next()
                    .and_then(|f| f.chars().next())
                    .and_then(Split::from_tag)
                    .ok_or_else(|| perr(n, "bad split tag"))?;
                class_split.push(tag);
            }
            Some("x") => {
                let label: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| perr(n, "bad class id"))?;
                if label >= class_split.len() {
                    return Err(perr(n, format!("example refers to unknown class {label}")));
                }
                let values = fields
                    .map(|f| f.parse::<f64>().map_err(|e| perr(n, e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != dim {
                    return Err(perr(
                        n,
                        format!("expected {dim} values, got {}", values.len()),
                    ));
                }
                points.extend(values);
                labels.push(label);
            }
            _ => return Err(perr(n, "unknown record")),
        }
    }
    LabeledDataset::from_parts(params, shift, class_split, points, labels)
}
