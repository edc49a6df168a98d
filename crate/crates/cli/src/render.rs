//! Heatmap rendering: plain PGM images and an exact text form.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    /// Low values dark, high values bright.
    #[default]
    Gray,
    /// Low values bright, high values dark.
    Inverse,
}

impl FromStr for Palette {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(Self::Gray),
            "inverse" => Ok(Self::Inverse),
            other => Err(CliError::Usage(format!("unknown palette `{other}` (gray, inverse)"))),
        }
    }
}

fn check(grid: &[Vec<f64>]) -> Result<(usize, usize)> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(CliError::Usage("empty grid".into()));
    }
    if grid.iter().any(|r| r.len() != cols) {
        return Err(CliError::Usage("ragged grid".into()));
    }
    if grid.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CliError::Usage("grid values must be finite and non-negative".into()));
    }
    Ok((rows, cols))
}

/// Min-max normalized plain (P2) PGM with 255 grey levels. A constant
/// grid renders as a uniform image.
pub fn render_pgm(grid: &[Vec<f64>], palette: Palette) -> Result<String> {
    let (rows, cols) = check(grid)?;
    let lo = grid.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in grid {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                };
                match palette {
                    Palette::Gray => level,
                    Palette::Inverse => 255 - level,
                }
                .to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// One line per row, values separated by spaces in shortest round-trip
/// form, so [`parse_grid`] recovers the grid exactly.
pub fn grid_to_text(grid: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in grid {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    let grid = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| CliError::Usage(format!("row {}: `{tok}` is not a number", i + 1)))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    check(&grid)?;
    Ok(grid)
}
