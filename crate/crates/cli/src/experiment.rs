//! Runs (method, seed) cells and writes the result files.

use std::fs;
use std::path::{Path, PathBuf};

use crl_core::benchgen::Benchmark;
use crl_core::eval::{retrieval_scores, RetrievalScores};
use crl_core::trainer::{
    old_class_probe, run_continual, write_checkpoint, CheckpointMeta, RunMode, RunSpec,
};
use crl_core::{Architecture, CrlError, DistillConfig, EvalReport, Method, ModelState, Result, TrainSchedule};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, MethodSpec};
use crate::output::{fmt_opt, log, mean_std, pct, text_table, Csv};
use crate::UPPER_BOUND;

/// One training run: a method (or the joint upper bound) under one seed.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    /// `None` trains jointly on all steps.
    pub config: Option<DistillConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub label: String,
    pub seed: u64,
    /// One report per step, or a single one for the joint run.
    pub reports: Vec<EvalReport>,
    /// Final model on the validation split; `None` when it is empty.
    pub validation: Option<RetrievalScores>,
    /// Per-step models, kept only when asked for.
    pub models: Vec<ModelState>,
}

#[derive(Debug)]
pub struct CellFailure {
    pub label: String,
    pub seed: u64,
    pub error: CrlError,
}

/// Shared inputs for a batch of cells.
pub struct Runner<'a> {
    pub bench: &'a Benchmark,
    pub arch: Architecture,
    pub schedule: TrainSchedule,
    pub digest: String,
    pub effective_toml: String,
    pub workers: usize,
    pub keep_models: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Runner<'_> {
    fn run_cell(&self, cell: &Cell) -> Result<CellOutcome> {
        let steps = self.bench.steps.len();
        let (cfg, mode) = match &cell.config {
            Some(c) => (c.clone(), RunMode::Steps(steps)),
            None => (DistillConfig::new(Method::Finetune), RunMode::Joint),
        };
        let spec = RunSpec {
            arch: &self.arch,
            schedule: &self.schedule,
            mode,
            seed: cell.seed,
            config_digest: &self.digest,
        };
        let out = run_continual(self.bench, &self.bench.test, &cfg, &spec)?;
        let last = &out.last().expect("at least one step").0;
        let validation = if self.bench.validation.query.is_empty() {
            None
        } else {
            Some(retrieval_scores(
                last,
                &self.bench.validation.query,
                &self.bench.validation.gallery,
            )?)
        };
        if let Some(dir) = &self.checkpoint_dir {
            let d = dir.join(&cell.label).join(format!("seed{}", cell.seed));
            fs::create_dir_all(&d)?;
            for (m, r) in &out {
                let meta = CheckpointMeta {
                    step: r.step,
                    method: cell.label.clone(),
                    seed: cell.seed,
                    config: self.effective_toml.clone(),
                };
                write_checkpoint(m, &d.join(format!("step{}.crlm", r.step)), &meta)?;
            }
        }
        let (models, reports): (Vec<_>, Vec<_>) = out.into_iter().unzip();
        Ok(CellOutcome {
            label: cell.label.clone(),
            seed: cell.seed,
            reports,
            validation,
            models: if self.keep_models { models } else { Vec::new() },
        })
    }

    /// Runs every cell on the worker pool. Results come back in `cells`
    /// order regardless of scheduling.
    pub fn run(&self, cells: &[Cell]) -> Result<Vec<Result<CellOutcome>>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CrlError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(|| cells.par_iter().map(|c| self.run_cell(c)).collect()))
    }
}

/// Splits results into successes and failures, keeping order.
pub fn partition(cells: &[Cell], results: Vec<Result<CellOutcome>>) -> (Vec<CellOutcome>, Vec<CellFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (c, r) in cells.iter().zip(results) {
        match r {
            Ok(o) => ok.push(o),
            Err(error) => failed.push(CellFailure {
                label: c.label.clone(),
                seed: c.seed,
                error,
            }),
        }
    }
    (ok, failed)
}

pub fn failures_csv(failed: &[CellFailure]) -> Csv {
    let mut csv = Csv::new(&["method", "seed", "error"]);
    for f in failed {
        csv.push(vec![
            f.label.clone(),
            f.seed.to_string(),
            f.error.to_string().replace(',', ";"),
        ]);
    }
    csv
}

/// Per-(seed, step, method) rows.
pub fn raw_csv(outcomes: &[CellOutcome]) -> Csv {
    let mut csv = Csv::new(&["seed", "step", "method", "top1", "map", "verification"]);
    for o in outcomes {
        for r in &o.reports {
            csv.push(
                r.csv_row(&o.label)
                    .split(',')
                    .map(String::from)
                    .collect(),
            );
        }
    }
    csv
}

const METRICS: [&str; 3] = ["top1", "map", "verification"];

fn metric(r: &EvalReport, m: &str) -> f64 {
    match m {
        "top1" => r.top1,
        "map" => r.map,
        _ => r.verification_accuracy,
    }
}

/// Labels in first-appearance order.
fn labels(outcomes: &[CellOutcome]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for o in outcomes {
        if !out.contains(&o.label) {
            out.push(o.label.clone());
        }
    }
    out
}

/// Values of `metric` at `step` for one label, in seed order.
pub fn values_at(outcomes: &[CellOutcome], label: &str, step: usize, metric_name: &str) -> Vec<f64> {
    outcomes
        .iter()
        .filter(|o| o.label == label)
        .filter_map(|o| o.reports.iter().find(|r| r.step == step))
        .map(|r| metric(r, metric_name))
        .collect()
}

/// Mean ± std per (method, step, metric): the per-step series.
pub fn series_csv(outcomes: &[CellOutcome]) -> Csv {
    let mut csv = Csv::new(&["method", "step", "metric", "mean", "std"]);
    for label in labels(outcomes) {
        let mut steps: Vec<usize> = outcomes
            .iter()
            .filter(|o| o.label == label)
            .flat_map(|o| o.reports.iter().map(|r| r.step))
            .collect();
        steps.sort_unstable();
        steps.dedup();
        for step in steps {
            for m in METRICS {
                let (mean, std) = mean_std(&values_at(outcomes, &label, step, m));
                csv.push(vec![
                    label.clone(),
                    step.to_string(),
                    m.to_string(),
                    mean.to_string(),
                    fmt_opt(std),
                ]);
            }
        }
    }
    csv
}

/// Final-step mean ± std per method.
pub fn summary_csv(outcomes: &[CellOutcome], final_step: usize) -> Csv {
    let mut csv = Csv::new(&[
        "method",
        "seeds",
        "top1_mean",
        "top1_std",
        "map_mean",
        "map_std",
        "verification_mean",
        "verification_std",
    ]);
    for label in labels(outcomes) {
        let mut row = vec![label.clone()];
        let mut n = 0;
        let mut cells = Vec::new();
        for m in METRICS {
            let v = values_at(outcomes, &label, final_step, m);
            n = v.len();
            let (mean, std) = mean_std(&v);
            cells.push(mean.to_string());
            cells.push(fmt_opt(std));
        }
        row.push(n.to_string());
        row.extend(cells);
        csv.push(row);
    }
    csv
}

pub fn display_label(label: &str) -> String {
    if label == UPPER_BOUND {
        return "Upper-bound".into();
    }
    label
        .parse::<Method>()
        .map(|m| m.display_name().to_string())
        .unwrap_or_else(|_| label.to_string())
}

/// Human-readable final-step table in percent.
pub fn summary_text(summary: &Csv) -> String {
    let mut t = Csv::new(&["Method", "top-1 (%)", "mAP (%)", "verification (%)"]);
    for r in &summary.rows {
        let get = |i: usize| -> (f64, Option<f64>) {
            (r[i].parse().unwrap_or(f64::NAN), r[i + 1].parse().ok())
        };
        let (a, b, c) = (get(2), get(4), get(6));
        t.push(vec![
            display_label(&r[0]),
            pct(a.0, a.1),
            pct(b.0, b.1),
            pct(c.0, c.1),
        ]);
    }
    text_table(&t)
}

/// Validation scores of each final model.
pub fn validation_csv(outcomes: &[CellOutcome]) -> Csv {
    let mut csv = Csv::new(&["method", "seed", "top1", "map"]);
    for o in outcomes {
        if let Some(v) = &o.validation {
            csv.push(vec![
                o.label.clone(),
                o.seed.to_string(),
                v.top1.to_string(),
                v.map.to_string(),
            ]);
        }
    }
    csv
}

/// Everything a command needs before running cells.
pub struct Prepared {
    pub bench: Benchmark,
    pub config: ExperimentConfig,
    pub effective_toml: String,
    pub digest: String,
}

impl Prepared {
    pub fn new(mut config: ExperimentConfig, steps: Option<usize>, needs_methods: bool) -> Result<Self> {
        if let Some(s) = steps {
            config.set_steps(s);
        }
        config.validate(needs_methods)?;
        let bench = config.benchmark(steps)?;
        let effective = config.effective();
        Ok(Self {
            bench,
            effective_toml: effective.to_toml(),
            digest: effective.digest(),
            config,
        })
    }

    pub fn runner(&self, keep_models: bool) -> Runner<'_> {
        Runner {
            bench: &self.bench,
            arch: self.config.architecture(self.bench.input_dim()),
            schedule: self.config.schedule.clone(),
            digest: self.digest.clone(),
            effective_toml: self.effective_toml.clone(),
            workers: self.config.workers,
            keep_models,
            checkpoint_dir: self
                .config
                .checkpoints
                .then(|| self.config.out.join("checkpoints")),
        }
    }

    pub fn method_cells(&self, methods: &[MethodSpec], upper_bound: bool) -> Vec<Cell> {
        let mut cells = Vec::new();
        for m in methods {
            for &seed in &self.config.seeds {
                cells.push(Cell {
                    label: m.label(),
                    config: Some(m.resolve(&self.config.distill)),
                    seed,
                });
            }
        }
        if upper_bound {
            for &seed in &self.config.seeds {
                cells.push(Cell {
                    label: UPPER_BOUND.into(),
                    config: None,
                    seed,
                });
            }
        }
        cells
    }

    pub fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.config.out)?;
        fs::write(self.config.out.join("effective_config.toml"), &self.effective_toml)?;
        Ok(&self.config.out)
    }

    pub fn final_step(&self) -> usize {
        self.bench.steps.len() - 1
    }
}

/// Result of `run`: the outcomes plus every table that was written.
pub struct RunResult {
    pub outcomes: Vec<CellOutcome>,
    pub failures: Vec<CellFailure>,
    pub raw: Csv,
    pub series: Csv,
    pub summary: Csv,
    pub text: String,
}

/// Method comparison: every method and seed, tables per step and at the
/// final step.
pub fn cmd_run(config: ExperimentConfig, steps: Option<usize>) -> Result<RunResult> {
    let prep = Prepared::new(config, steps, true)?;
    let out = prep.out_dir()?;
    log(out, &format!("run: digest {}", prep.digest));
    let cells = prep.method_cells(&prep.config.methods, prep.config.upper_bound);
    let results = prep.runner(false).run(&cells)?;
    let (outcomes, failures) = partition(&cells, results);
    let raw = raw_csv(&outcomes);
    let series = series_csv(&outcomes);
    let summary = summary_csv(&outcomes, prep.final_step());
    let text = summary_text(&summary);
    raw.write(&out.join("raw.csv"))?;
    series.write(&out.join("series.csv"))?;
    summary.write(&out.join("summary.csv"))?;
    validation_csv(&outcomes).write(&out.join("validation.csv"))?;
    fs::write(out.join("summary.txt"), &text)?;
    if !failures.is_empty() {
        failures_csv(&failures).write(&out.join("failures.csv"))?;
    }
    for f in &failures {
        log(out, &format!("cell {} seed {} failed: {}", f.label, f.seed, f.error));
    }
    log(out, &format!("run: {} cells done, {} failed", outcomes.len(), failures.len()));
    Ok(RunResult {
        outcomes,
        failures,
        raw,
        series,
        summary,
        text,
    })
}

/// Result of `probe-old`.
pub struct ProbeResult {
    pub raw: Csv,
    pub table: Csv,
    pub text: String,
    pub failures: Vec<CellFailure>,
}

/// Accuracy on held-out images of the first step's classes after every
/// step, one row per method.
pub fn cmd_probe_old(config: ExperimentConfig, steps: Option<usize>) -> Result<ProbeResult> {
    let prep = Prepared::new(config, steps, true)?;
    if prep.config.methods.is_empty() {
        return Err(CrlError::Config("probe-old needs at least one continual method".into()));
    }
    if prep.bench.probe_old.is_empty() {
        return Err(CrlError::BenchmarkTooSmall("the benchmark has no probe images".into()));
    }
    let out = prep.out_dir()?;
    log(out, &format!("probe-old: digest {}", prep.digest));
    let cells = prep.method_cells(&prep.config.methods, false);
    let results = prep.runner(true).run(&cells)?;
    let (outcomes, mut failures) = partition(&cells, results);
    let classes = prep.bench.steps[0].class_range;
    let n_steps = prep.bench.steps.len();
    let mut raw = Csv::new(&["method", "seed", "step", "accuracy"]);
    let mut per_label: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for o in &outcomes {
        let acc = match old_class_probe(&o.models, &prep.bench.probe_old, classes) {
            Ok(a) => a,
            Err(error) => {
                failures.push(CellFailure {
                    label: o.label.clone(),
                    seed: o.seed,
                    error,
                });
                continue;
            }
        };
        for (t, a) in acc.iter().enumerate() {
            raw.push(vec![o.label.clone(), o.seed.to_string(), t.to_string(), a.to_string()]);
        }
        match per_label.iter_mut().find(|(l, _)| *l == o.label) {
            Some((_, v)) => v.push(acc),
            None => per_label.push((o.label.clone(), vec![acc])),
        }
    }
    let mut header = vec!["method".to_string()];
    header.extend((0..n_steps).map(|t| format!("step_{t}")));
    let mut table = Csv {
        header: header.clone(),
        rows: Vec::new(),
    };
    let mut pretty = Csv {
        header: {
            let mut h = vec!["Method".to_string()];
            h.extend((1..=n_steps).map(|t| format!("step {t} (%)")));
            h
        },
        rows: Vec::new(),
    };
    for (label, runs) in &per_label {
        let means: Vec<f64> = (0..n_steps)
            .map(|t| mean_std(&runs.iter().map(|r| r[t]).collect::<Vec<_>>()).0)
            .collect();
        let mut row = vec![label.clone()];
        row.extend(means.iter().map(f64::to_string));
        table.push(row);
        let mut prow = vec![display_label(label)];
        prow.extend(means.iter().map(|m| format!("{:.2}", 100.0 * m)));
        pretty.push(prow);
    }
    let text = text_table(&pretty);
    raw.write(&out.join("probe_old_raw.csv"))?;
    table.write(&out.join("probe_old.csv"))?;
    fs::write(out.join("probe_old.txt"), &text)?;
    if !failures.is_empty() {
        failures_csv(&failures).write(&out.join("failures.csv"))?;
    }
    log(out, "probe-old: done");
    Ok(ProbeResult {
        raw,
        table,
        text,
        failures,
    })
}
