//! Calibration score files and their text histogram.
//!
//! One score per line; anything after the first whitespace or comma is a
//! free-form provenance note. Blank lines and lines starting with `#` are
//! skipped.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use conplan_core::{Calibration, Threshold};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoresError {
    #[error("cannot read scores file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("scores file contains no scores")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub value: f64,
    pub note: Option<String>,
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>, ScoresError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let split = trimmed.find(|c: char| c.is_whitespace() || c == ',');
        let (number, note) = match split {
            Some(at) => (&trimmed[..at], Some(trimmed[at + 1..].trim().to_string())),
            None => (trimmed, None),
        };
        let value: f64 = number.parse().map_err(|_| ScoresError::Malformed {
            line: i + 1,
            reason: format!("not a number: {number:?}"),
        })?;
        if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
            return Err(ScoresError::Malformed {
                line: i + 1,
                reason: format!("score {value} outside [0, 1]"),
            });
        }
        out.push(ScoreLine {
            value,
            note: note.filter(|n| !n.is_empty()),
        });
    }
    if out.is_empty() {
        return Err(ScoresError::Empty);
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>, ScoresError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScoresError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scores(&text)
}

/// Equal-width bin counts over [0, 1]; a score of exactly 1 lands in the
/// last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

pub fn render_histogram(values: &[f64], bins: usize, threshold: &Threshold<f64>) -> String {
    let counts = histogram(values, bins);
    let bins = counts.len();
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let width = 40usize;
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let lo = i as f64 / bins as f64;
        let hi = (i + 1) as f64 / bins as f64;
        let bar = "#".repeat((c * width).div_ceil(peak));
        let close = if i + 1 == bins { ']' } else { ')' };
        let marker = match threshold.value() {
            Some(g) if g >= lo && (g < hi || (i + 1 == bins && g <= hi)) => "  <- threshold",
            _ => "",
        };
        let _ = writeln!(out, "[{lo:.2}, {hi:.2}{close} {c:>6} {bar}{marker}");
    }
    out
}

/// The report printed by `conplan calibrate`.
pub fn render_report(model: &Calibration, bins: usize) -> String {
    let mut out = String::new();
    let threshold = match model.threshold {
        Threshold::Finite(g) => format!("{g}"),
        Threshold::AlwaysAbstain => "ALWAYS_ABSTAIN".to_string(),
    };
    let _ = writeln!(out, "threshold: {threshold}");
    let _ = writeln!(out, "n: {}", model.n);
    let _ = writeln!(out, "kappa: {}", model.kappa);
    let _ = writeln!(out, "order statistic index m: {}", model.order_index);
    let _ = writeln!(out, "score distribution:");
    out.push_str(&render_histogram(&model.scores, bins, &model.threshold));
    out
}
