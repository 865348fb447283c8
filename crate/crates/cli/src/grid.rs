//! Text rendering of a scheme, one row per parameterized layer:
//!
//! ```text
//! scheme [0,1,3] over zoo [0,0.01,0.1,1]
//!   0 dense 16->32       | ...... | frozen
//!   1 dense 32->32       | ##     | lr 0.01 [1]
//!   2 dense 32->16       | ###### | lr 1 [3]
//! ```
//!
//! Frozen rows show dots; tuned rows show a bar whose length grows with the
//! zoo index. [`parse_grid`] reads the rows back.

use ptransfer_core::nn::LayerSpec;
use ptransfer_core::transfer::{LrZoo, SchemeVector};

const FROZEN: &str = "frozen";

fn layer_label(spec: &LayerSpec) -> String {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => format!("dense {inputs}->{outputs}"),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            ..
        } => format!("conv {in_channels}->{out_channels} k{kernel} s{stride}"),
        other => other.name().to_string(),
    }
}

fn zoo_text(zoo: &LrZoo) -> String {
    let rates: Vec<String> = zoo.rates().iter().map(|r| r.to_string()).collect();
    format!("[{}]", rates.join(","))
}

/// Renders `scheme` against the parameterized layers of a backbone. Pass an
/// empty `layers` slice to label rows generically.
pub fn render_grid(layers: &[LayerSpec], scheme: &SchemeVector, zoo: &LrZoo) -> String {
    let params: Vec<&LayerSpec> = layers.iter().filter(|l| l.is_parameterized()).collect();
    let width = 2 * (zoo.len() - 1);
    let mut out = format!("scheme {scheme} over zoo {}\n", zoo_text(zoo));
    for (i, &idx) in scheme.entries().iter().enumerate() {
        let label = params
            .get(i)
            .map(|l| layer_label(l))
            .unwrap_or_else(|| "layer".into());
        let (bar, cell) = if idx == 0 {
            (".".repeat(width), FROZEN.to_string())
        } else {
            let rate = zoo
                .rate(idx)
                .map(|r| r.to_string())
                .unwrap_or_else(|| "?".into());
            (
                format!("{:<width$}", "#".repeat(2 * idx)),
                format!("lr {rate} [{idx}]"),
            )
        };
        out.push_str(&format!("{i:>3} {label:<18} | {bar} | {cell}\n"));
    }
    out
}

/// Recovers the scheme from rendered rows. Lines that are not rows are
/// ignored; each rate must match the zoo entry it names.
pub fn parse_grid(text: &str, zoo: &LrZoo) -> Result<SchemeVector, String> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut cols = line.split('|');
        let (Some(head), Some(_bar), Some(cell), None) =
            (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            continue;
        };
        let Some(Ok(row)) = head.split_whitespace().next().map(str::parse::<usize>) else {
            continue;
        };
        if row != entries.len() {
            return Err(format!(
                "line {}: expected row {}, found {row}",
                n + 1,
                entries.len()
            ));
        }
        let cell = cell.trim();
        let idx = if cell == FROZEN {
            0
        } else {
            let rest = cell
                .strip_prefix("lr ")
                .ok_or_else(|| format!("line {}: unreadable cell `{cell}`", n + 1))?;
            let (rate, idx) = rest
                .rsplit_once(" [")
                .and_then(|(r, i)| {
                    Some((
                        r.parse::<f64>().ok()?,
                        i.strip_suffix(']')?.parse::<usize>().ok()?,
                    ))
                })
                .ok_or_else(|| format!("line {}: unreadable cell `{cell}`", n + 1))?;
            if idx == 0 || zoo.rate(idx) != Some(rate) {
                return Err(format!(
                    "line {}: rate {rate} is not zoo entry {idx}",
                    n + 1
                ));
            }
            idx
        };
        entries.push(idx);
    }
    if entries.is_empty() {
        return Err("no scheme rows found".into());
    }
    Ok(SchemeVector::new(entries))
}
