//! Metrics CSV export and re-parsing.
//!
//! Columns are `iteration,loss,mean_R_all,mean_R_selected,selected_total,
//! lambda1,lambda2,gamma,val_acc` followed by `sel_g<k>` and `acc_g<k>` for
//! every group. Reals carry six fractional digits; absent values are `NA`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{MsrlError, Result};
use crate::metrics::MetricsSnapshot;

pub const BASE_COLUMNS: [&str; 9] =
    ["iteration", "loss", "mean_R_all", "mean_R_selected", "selected_total", "lambda1", "lambda2", "gamma", "val_acc"];

const MISSING: &str = "NA";

pub fn metrics_header(n_groups: usize) -> String {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|c| c.to_string()).collect();
    cols.extend((0..n_groups).map(|k| format!("sel_g{k}")));
    cols.extend((0..n_groups).map(|k| format!("acc_g{k}")));
    cols.join(",")
}

fn real(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| MISSING.to_string(), real)
}

pub fn metrics_row(s: &MetricsSnapshot) -> String {
    let mut cells = vec![
        s.iteration.to_string(),
        real(s.loss),
        opt(s.mean_r_all),
        opt(s.mean_r_selected),
        real(s.selected_total),
        real(s.lambda1),
        real(s.lambda2),
        real(s.gamma),
        real(s.val_acc),
    ];
    cells.extend(s.selected_per_group.iter().map(|&c| real(c)));
    cells.extend(s.acc_per_group.iter().map(|&a| opt(a)));
    cells.join(",")
}

/// Renders a snapshot stream. `n_groups` fixes the header for an empty stream.
pub fn metrics_to_csv(stream: &[MetricsSnapshot], n_groups: usize) -> Result<String> {
    let mut out = metrics_header(n_groups);
    out.push('\n');
    for s in stream {
        if s.n_groups() != n_groups || s.acc_per_group.len() != n_groups {
            return Err(MsrlError::Dimension { context: "metrics row groups", expected: n_groups, got: s.n_groups() });
        }
        let _ = writeln!(out, "{}", metrics_row(s));
    }
    Ok(out)
}

pub fn export_metrics(stream: &[MetricsSnapshot], n_groups: usize, path: &Path) -> Result<()> {
    fs::write(path, metrics_to_csv(stream, n_groups)?)?;
    Ok(())
}

fn parse_real(cell: &str, line: usize) -> Result<f64> {
    cell.parse().map_err(|_| MsrlError::Parse(format!("line {line}: bad number `{cell}`")))
}

fn parse_opt(cell: &str, line: usize) -> Result<Option<f64>> {
    if cell == MISSING {
        Ok(None)
    } else {
        parse_real(cell, line).map(Some)
    }
}

/// Parses a metrics CSV back into snapshots, returning the group count too.
pub fn parse_metrics_csv(text: &str) -> Result<(usize, Vec<MetricsSnapshot>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| MsrlError::Parse("empty metrics file".into()))?;
    let n_cols = header.split(',').count();
    if n_cols < BASE_COLUMNS.len() || !(n_cols - BASE_COLUMNS.len()).is_multiple_of(2) {
        return Err(MsrlError::Parse(format!("unexpected metrics header `{header}`")));
    }
    let n_groups = (n_cols - BASE_COLUMNS.len()) / 2;
    if header != metrics_header(n_groups) {
        return Err(MsrlError::Parse(format!("unexpected metrics header `{header}`")));
    }
    let mut stream = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(MsrlError::Parse(format!("line {line_no}: expected {n_cols} cells, found {}", cells.len())));
        }
        let b = BASE_COLUMNS.len();
        stream.push(MetricsSnapshot {
            iteration: cells[0].parse().map_err(|_| MsrlError::Parse(format!("line {line_no}: bad iteration")))?,
            loss: parse_real(cells[1], line_no)?,
            mean_r_all: parse_opt(cells[2], line_no)?,
            mean_r_selected: parse_opt(cells[3], line_no)?,
            selected_total: parse_real(cells[4], line_no)?,
            lambda1: parse_real(cells[5], line_no)?,
            lambda2: parse_real(cells[6], line_no)?,
            gamma: parse_real(cells[7], line_no)?,
            val_acc: parse_real(cells[8], line_no)?,
            selected_per_group: cells[b..b + n_groups].iter().map(|c| parse_real(c, line_no)).collect::<Result<_>>()?,
            acc_per_group: cells[b + n_groups..].iter().map(|c| parse_opt(c, line_no)).collect::<Result<_>>()?,
        });
    }
    Ok((n_groups, stream))
}

/// Rounds every real to the six digits the CSV keeps.
pub fn quantize(s: &MetricsSnapshot) -> MetricsSnapshot {
    let q = |x: f64| real(x).parse::<f64>().unwrap_or(x);
    MetricsSnapshot {
        iteration: s.iteration,
        loss: q(s.loss),
        mean_r_all: s.mean_r_all.map(q),
        mean_r_selected: s.mean_r_selected.map(q),
        selected_total: q(s.selected_total),
        lambda1: q(s.lambda1),
        lambda2: q(s.lambda2),
        gamma: q(s.gamma),
        val_acc: q(s.val_acc),
        selected_per_group: s.selected_per_group.iter().map(|&x| q(x)).collect(),
        acc_per_group: s.acc_per_group.iter().map(|a| a.map(q)).collect(),
    }
}
