//! Aggregation and CSV/table writers.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! CSV value parses back to the exact `f64` it came from.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crl_core::Result;

/// Sample mean and standard deviation (`n − 1` denominator). The deviation
/// is `None` for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// In-memory CSV: header plus rows, each already split into cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next()?.split(',').map(String::from).collect();
        let rows: Vec<Vec<String>> = lines
            .map(|l| l.split(',').map(String::from).collect())
            .collect();
        rows.iter()
            .all(|r| r.len() == header.len())
            .then_some(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// Fixed-width text table for terminal output.
pub fn text_table(csv: &Csv) -> String {
    let mut widths: Vec<usize> = csv.header.iter().map(String::len).collect();
    for r in &csv.rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&csv.header, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule, &mut out);
    for r in &csv.rows {
        line(r, &mut out);
    }
    out
}

/// Percent with two decimals, `mean ± std`, for summary tables.
pub fn pct(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * s),
        None => format!("{:.2}", 100.0 * mean),
    }
}

/// Appends a timestamped line to `run.log`. Timestamps never go anywhere
/// else, so result files stay reproducible.
pub fn log(dir: &Path, msg: &str) {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    if let Ok(mut f) = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))
    {
        let _ = writeln!(f, "[{secs:.3}] {msg}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_matches_hand_computation() {
        // 2, 4, 4, 4, 5, 5, 7, 9: mean 5, sum of squares 32, n-1 = 7
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s.unwrap() - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.25]), (0.25, None));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let vals = [0.1 + 0.2, 1.0 / 3.0, 2.5e-17, 123456.789];
        let mut c = Csv::new(&["a", "b"]);
        for v in vals {
            c.push(vec![v.to_string(), fmt_opt(None)]);
        }
        let back = Csv::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        for (r, v) in back.rows.iter().zip(vals) {
            assert_eq!(r[0].parse::<f64>().unwrap().to_bits(), f64::to_bits(v));
        }
    }

    #[test]
    fn table_aligns_columns() {
        let mut c = Csv::new(&["method", "top1"]);
        c.push(vec!["finetune".into(), "1".into()]);
        let t = text_table(&c);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(2).unwrap().starts_with("finetune  1"));
    }
}
