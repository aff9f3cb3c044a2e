//! Sensitivity sweeps over the neighborhood size, the margin coefficient or
//! the old-loss weight.

use std::fmt;
use std::fs;
use std::str::FromStr;

use crl_core::{CrlError, DistillConfig, Method, Result};

use crate::config::{ExperimentConfig, MethodSpec};
use crate::experiment::{display_label, partition, failures_csv, Cell, CellFailure, CellOutcome, Prepared};
use crate::output::{fmt_opt, log, mean_std, text_table, Csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Neighborhood size, on Basic+NS.
    K,
    /// Margin coefficient, on Basic+NS+CR with the configured K.
    Beta,
    /// Old-loss weight, on any method.
    Lambda,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Beta => "beta",
            SweepAxis::Lambda => "lambda",
        }
    }

    pub fn default_values(self) -> Vec<SweepValue> {
        match self {
            SweepAxis::K => vec![
                SweepValue::Count(0),
                SweepValue::Count(20),
                SweepValue::Count(200),
                SweepValue::All,
            ],
            SweepAxis::Beta => [0.0, 0.002, 0.005, 0.01, 0.05].map(SweepValue::Real).to_vec(),
            SweepAxis::Lambda => [0.01, 0.1, 1.0, 10.0].map(SweepValue::Real).to_vec(),
        }
    }

    fn default_method(self) -> Method {
        match self {
            SweepAxis::K => Method::FkdNs,
            SweepAxis::Beta | SweepAxis::Lambda => Method::FkdNsCr,
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepAxis::K),
            "beta" => Ok(SweepAxis::Beta),
            "lambda" => Ok(SweepAxis::Lambda),
            _ => Err(CrlError::Config(format!("unknown sweep axis {s:?} (k, beta, lambda)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Count(usize),
    /// Every old class.
    All,
    Real(f64),
}

impl SweepValue {
    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        let bad = || CrlError::Config(format!("invalid {axis} value {s:?}"));
        match axis {
            SweepAxis::K if s.eq_ignore_ascii_case("all") => Ok(SweepValue::All),
            SweepAxis::K => s.parse().map(SweepValue::Count).map_err(|_| bad()),
            _ => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map(SweepValue::Real)
                .ok_or_else(bad),
        }
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Count(k) => write!(f, "{k}"),
            SweepValue::All => f.write_str("all"),
            SweepValue::Real(v) => write!(f, "{v}"),
        }
    }
}

fn apply(base: &DistillConfig, axis: SweepAxis, v: SweepValue) -> DistillConfig {
    let mut c = base.clone();
    match (axis, v) {
        (SweepAxis::K, SweepValue::Count(k)) => c.neighborhood_size = k,
        (SweepAxis::K, _) => c.neighborhood_size = 0,
        (SweepAxis::Beta, SweepValue::Real(b)) => c.margin_beta = b,
        (SweepAxis::Lambda, SweepValue::Real(l)) => c.lambda_old = l,
        _ => unreachable!("values are parsed per axis"),
    }
    c
}

pub struct SweepResult {
    pub raw: Csv,
    pub table: Csv,
    pub text: String,
    pub outcomes: Vec<CellOutcome>,
    pub failures: Vec<CellFailure>,
    /// Index into the value list of the flagged cell.
    pub best: Option<usize>,
}

/// Runs the method under every value of the axis and every seed.
///
/// The base settings come from the first `[[methods]]` entry using the
/// swept method, or from `[distill]` when there is none. The best value is
/// the one with the highest mean validation top-1 (test top-1 when the
/// benchmark has no validation split); ties go to the earlier value.
pub fn cmd_sweep(
    config: ExperimentConfig,
    axis: SweepAxis,
    values: Option<Vec<SweepValue>>,
    method: Option<Method>,
    steps: Option<usize>,
) -> Result<SweepResult> {
    let values = values.unwrap_or_else(|| axis.default_values());
    if values.is_empty() {
        return Err(CrlError::Config("sweep needs at least one value".into()));
    }
    let method = match (axis, method) {
        (SweepAxis::Lambda, Some(m)) => m,
        (_, Some(m)) if m != axis.default_method() => {
            return Err(CrlError::Config(format!(
                "{axis} sweeps run {}, not {m}",
                axis.default_method()
            )))
        }
        _ => axis.default_method(),
    };
    if axis == SweepAxis::Lambda && matches!(method, Method::Scratch | Method::Finetune) {
        return Err(CrlError::Config(format!("{method} has no old-model loss to weight")));
    }
    let prep = Prepared::new(config, steps, false)?;
    let base = prep
        .config
        .methods
        .iter()
        .find(|m| m.method == method)
        .cloned()
        .unwrap_or_else(|| MethodSpec::new(method))
        .resolve(&prep.config.distill);
    let out = prep.out_dir()?;
    log(out, &format!("sweep {axis} on {method}: digest {}", prep.digest));
    let mut cells = Vec::new();
    for v in &values {
        let cfg = apply(&base, axis, *v);
        cfg.validate()?;
        for &seed in &prep.config.seeds {
            cells.push(Cell {
                label: format!("{axis}={v}"),
                config: Some(cfg.clone()),
                seed,
            });
        }
    }
    let results = prep.runner(false).run(&cells)?;
    let (outcomes, failures) = partition(&cells, results);
    let final_step = prep.final_step();
    let old_classes = prep.bench.steps[final_step].class_range.0;

    let mut raw = Csv::new(&[
        "axis", "value", "seed", "top1", "map", "verification", "val_top1", "val_map",
    ]);
    for o in &outcomes {
        let r = o.reports.iter().find(|r| r.step == final_step).expect("final report");
        raw.push(vec![
            axis.to_string(),
            o.label[axis.as_str().len() + 1..].to_string(),
            o.seed.to_string(),
            r.top1.to_string(),
            r.map.to_string(),
            r.verification_accuracy.to_string(),
            fmt_opt(o.validation.map(|v| v.top1)),
            fmt_opt(o.validation.map(|v| v.map)),
        ]);
    }

    let has_val = outcomes.iter().all(|o| o.validation.is_some()) && !outcomes.is_empty();
    let mut table = Csv::new(&[
        "value",
        "effective",
        "seeds",
        "val_top1_mean",
        "top1_mean",
        "top1_std",
        "map_mean",
        "map_std",
        "verification_mean",
        "best",
        "note",
    ]);
    let mut scores = Vec::new();
    for v in &values {
        let label = format!("{axis}={v}");
        let mine: Vec<&CellOutcome> = outcomes.iter().filter(|o| o.label == label).collect();
        let at = |f: &dyn Fn(&CellOutcome) -> f64| -> Vec<f64> { mine.iter().map(|o| f(o)).collect() };
        let fin = |o: &CellOutcome| o.reports.iter().find(|r| r.step == final_step).cloned().expect("final report");
        let top1 = mean_std(&at(&|o| fin(o).top1));
        let map = mean_std(&at(&|o| fin(o).map));
        let ver = mean_std(&at(&|o| fin(o).verification_accuracy));
        let val = mean_std(&at(&|o| o.validation.map_or(f64::NAN, |s| s.top1)));
        let (effective, note) = match (axis, v) {
            (SweepAxis::K, SweepValue::All) | (SweepAxis::K, SweepValue::Count(0)) => {
                ("all".to_string(), String::new())
            }
            (SweepAxis::K, SweepValue::Count(k)) if *k >= old_classes => (
                "all".to_string(),
                format!("clamped: only {old_classes} old classes at the last step"),
            ),
            _ => (v.to_string(), String::new()),
        };
        scores.push(if mine.is_empty() {
            f64::NEG_INFINITY
        } else if has_val {
            val.0
        } else {
            top1.0
        });
        table.push(vec![
            v.to_string(),
            effective,
            mine.len().to_string(),
            if has_val { val.0.to_string() } else { String::new() },
            top1.0.to_string(),
            fmt_opt(top1.1),
            map.0.to_string(),
            fmt_opt(map.1),
            ver.0.to_string(),
            String::new(),
            note,
        ]);
    }
    let mut best = None;
    for (i, s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b: usize| *s > scores[b]) {
            best = Some(i);
        }
    }
    if let Some(b) = best {
        table.rows[b][9] = "*".into();
    }

    let mut pretty = Csv::new(&[axis.as_str(), "top-1 (%)", "mAP (%)", "best", "note"]);
    for r in &table.rows {
        let p = |i: usize| {
            let m: f64 = r[i].parse().unwrap_or(f64::NAN);
            match r[i + 1].parse::<f64>() {
                Ok(s) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
                Err(_) => format!("{:.2}", 100.0 * m),
            }
        };
        pretty.push(vec![r[0].clone(), p(4), p(6), r[9].clone(), r[10].clone()]);
    }
    let text = format!(
        "{} sweep over {}, best by {} top-1\n{}",
        display_label(method.as_str()),
        axis,
        if has_val { "validation" } else { "test" },
        text_table(&pretty)
    );
    raw.write(&out.join(format!("sweep_{axis}_raw.csv")))?;
    table.write(&out.join(format!("sweep_{axis}.csv")))?;
    fs::write(out.join(format!("sweep_{axis}.txt")), &text)?;
    if !failures.is_empty() {
        failures_csv(&failures).write(&out.join("failures.csv"))?;
    }
    log(out, &format!("sweep {axis}: done"));
    Ok(SweepResult {
        raw,
        table,
        text,
        outcomes,
        failures,
        best,
    })
}
