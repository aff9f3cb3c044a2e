//! Experiment runner: benchmark generation, method comparisons, old-class
//! probes and sensitivity sweeps, written as plot-ready CSV.

pub mod config;
pub mod experiment;
pub mod output;
pub mod sweep;

use std::path::Path;

use crl_core::benchgen::{self, Benchmark};
use crl_core::{CrlError, Result};

pub use config::{ExperimentConfig, MethodSpec};
pub use experiment::{cmd_probe_old, cmd_run, ProbeResult, RunResult};
pub use sweep::{cmd_sweep, SweepAxis, SweepResult, SweepValue};

/// Label of the joint-training row.
pub const UPPER_BOUND: &str = "upper-bound";

/// Process exit code for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(e: &CrlError) -> i32 {
    if e.is_numerical() {
        4
    } else if e.is_data() {
        3
    } else {
        2
    }
}

/// Generates the configured benchmark into `out` and returns it with a
/// short summary.
pub fn cmd_generate(config: &ExperimentConfig, steps: Option<usize>, out: &Path) -> Result<(Benchmark, String)> {
    let mut config = config.clone();
    if config.benchmark.path.is_some() {
        return Err(CrlError::Config("generate takes benchmark params, not a path".into()));
    }
    if let Some(s) = steps {
        config.set_steps(s);
    }
    let bench = benchgen::generate(&config.bench_params(), config.benchmark.seed)?;
    benchgen::save(&bench, out)?;
    let m = &bench.manifest;
    let mut s = format!(
        "benchmark written to {}\nseed {}  steps {}  classes {}  input dim {}\n",
        out.display(),
        m.seed,
        m.steps.len(),
        bench.total_classes(),
        bench.input_dim()
    );
    for st in &m.steps {
        s.push_str(&format!(
            "  step {}: classes {}..{}, {} images\n",
            st.step, st.class_start, st.class_end, st.train_samples
        ));
    }
    s.push_str(&format!(
        "test: {} query, {} gallery, {} pairs; validation: {} query, {} gallery; probe: {}\n",
        bench.test.retrieval.query.len(),
        bench.test.retrieval.gallery.len(),
        bench.test.pairs.len(),
        bench.validation.query.len(),
        bench.validation.gallery.len(),
        bench.probe_old.len()
    ));
    s.push_str(&format!("checksum {}\n", m.checksum));
    Ok((bench, s))
}
