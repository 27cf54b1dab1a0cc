//! Report output: plain-text summaries, line-delimited JSON records, and
//! the ASCII sparkline used to sketch per-layer profiles in a terminal.

use std::fs;
use std::path::Path;

use deformer_core::{Error, Result};

/// Eight-level ASCII ramp, low to high.
const LEVELS: &[u8; 8] = b"_.:-=+*#";

/// Renders values as one character per entry, min-max scaled; a flat series
/// renders at the lowest level.
pub fn sparkline(values: &[f64]) -> String {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| {
            let t = if max > min { (v - min) / (max - min) } else { 0.0 };
            LEVELS[((t * 7.0).round() as usize).min(7)] as char
        })
        .collect()
}

/// Writes a text report, creating parent directories, and echoes it to
/// stdout — the file is for the run directory, the echo for the operator.
pub fn emit_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    print!("{text}");
    Ok(())
}

/// Writes one JSON object per line.
pub fn write_jsonl(path: &Path, records: &[serde_json::Value]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Format(format!("serializing report record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// `1234567890` → `"1.23 GFLOPs"`; keeps small counts exact.
pub fn flops_display(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.2} GFLOPs", n as f64 / 1e9)
    } else if n >= 1_000_000 {
        format!("{:.2} MFLOPs", n as f64 / 1e6)
    } else {
        format!("{n} FLOPs")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparkline_spans_the_ramp() {
        let s = sparkline(&[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(s.len(), 5);
        assert!(s.starts_with('_'));
        assert!(s.ends_with('#'));
        assert!(s.is_ascii());
    }

    #[test]
    fn flat_series_renders_low() {
        assert_eq!(sparkline(&[3.0, 3.0, 3.0]), "___");
        assert_eq!(sparkline(&[]), "");
    }

    #[test]
    fn flops_display_scales() {
        assert_eq!(flops_display(500), "500 FLOPs");
        assert_eq!(flops_display(58_400_000_000), "58.40 GFLOPs");
    }
}
