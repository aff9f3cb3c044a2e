//! Experiment configuration files.
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! out = "out/compare"
//! upper_bound = true
//!
//! [benchmark]
//! seed = 0
//! [benchmark.params]
//! steps = 10
//!
//! [distill]
//! neighborhood_size = 20
//!
//! [[methods]]
//! method = "finetune"
//!
//! [[methods]]
//! method = "fkd_ns_cr"
//! lambda_old = 10.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crl_core::benchgen::{self, BenchParams, Benchmark};
use crl_core::{Architecture, CrlError, DistillConfig, Method, Result, TrainSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the benchmark comes from: an existing directory or generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<BenchParams>,
}

/// Defaults shared by every method entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillDefaults {
    pub temperature: f64,
    pub neighborhood_size: usize,
    pub margin_beta: f64,
    pub lambda_old: f64,
    pub lfl_weight: f64,
}

impl Default for DistillDefaults {
    fn default() -> Self {
        let d = DistillConfig::new(Method::Finetune);
        Self {
            temperature: d.temperature,
            neighborhood_size: d.neighborhood_size,
            margin_beta: d.margin_beta,
            lambda_old: d.lambda_old,
            lfl_weight: d.lfl_weight,
        }
    }
}

/// One method entry; unset fields fall back to `[distill]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighborhood_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_old: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lfl_weight: Option<f64>,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            label: None,
            temperature: None,
            neighborhood_size: None,
            margin_beta: None,
            lambda_old: None,
            lfl_weight: None,
        }
    }

    pub fn resolve(&self, d: &DistillDefaults) -> DistillConfig {
        DistillConfig {
            method: self.method,
            temperature: self.temperature.unwrap_or(d.temperature),
            neighborhood_size: self.neighborhood_size.unwrap_or(d.neighborhood_size),
            margin_beta: self.margin_beta.unwrap_or(d.margin_beta),
            lambda_old: self.lambda_old.unwrap_or(d.lambda_old),
            lfl_weight: self.lfl_weight.unwrap_or(d.lfl_weight),
        }
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.method.as_str().to_string())
    }
}

/// Network shape; the input width always comes from the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureSpec {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            hidden: a.hidden,
            embed_dim: a.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Also train jointly on all steps, reported as "upper-bound".
    #[serde(default)]
    pub upper_bound: bool,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub workers: usize,
    /// Write a checkpoint per (method, seed, step).
    #[serde(default)]
    pub checkpoints: bool,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default)]
    pub distill: DistillDefaults,
    #[serde(default)]
    pub architecture: ArchitectureSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CrlError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CrlError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks everything that does not need the benchmark itself.
    pub fn validate(&self, needs_methods: bool) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CrlError::Config("seeds must not be empty".into()));
        }
        if needs_methods && self.methods.is_empty() && !self.upper_bound {
            return Err(CrlError::Config("no methods to run".into()));
        }
        if let Some(p) = &self.benchmark.path {
            if self.benchmark.params.is_some() {
                return Err(CrlError::Config(
                    "benchmark.path and benchmark.params are mutually exclusive".into(),
                ));
            }
            if !p.is_dir() {
                return Err(CrlError::Config(format!(
                    "benchmark directory {} does not exist",
                    p.display()
                )));
            }
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodSpec::label).collect();
        if self.upper_bound {
            labels.push(crate::UPPER_BOUND.to_string());
        }
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(CrlError::Config(
                "method labels must be unique; add `label` to repeated methods".into(),
            ));
        }
        for m in &self.methods {
            m.resolve(&self.distill).validate()?;
        }
        self.schedule.validate()?;
        Ok(())
    }

    /// Forces the step count, as `--steps` does.
    pub fn set_steps(&mut self, steps: usize) {
        if self.benchmark.path.is_none() {
            self.benchmark.params.get_or_insert_with(BenchParams::default).steps = steps;
        }
    }

    pub fn bench_params(&self) -> BenchParams {
        self.benchmark.params.clone().unwrap_or_default()
    }

    /// Loads or generates the benchmark. With `steps`, a loaded benchmark
    /// must already have that many steps.
    pub fn benchmark(&self, steps: Option<usize>) -> Result<Benchmark> {
        let bench = match &self.benchmark.path {
            Some(p) => benchgen::load(p)?,
            None => benchgen::generate(&self.bench_params(), self.benchmark.seed)?,
        };
        if let Some(s) = steps {
            if bench.steps.len() != s {
                return Err(CrlError::Config(format!(
                    "--steps {s} but the benchmark has {} steps",
                    bench.steps.len()
                )));
            }
        }
        Ok(bench)
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.architecture.hidden.clone(),
            embed_dim: self.architecture.embed_dim,
        }
    }

    /// Fully resolved configuration as written to `effective_config.toml`.
    pub fn effective(&self) -> EffectiveConfig {
        EffectiveConfig {
            seeds: self.seeds.clone(),
            upper_bound: self.upper_bound,
            benchmark_path: self.benchmark.path.clone(),
            benchmark_seed: self.benchmark.seed,
            benchmark_params: self
                .benchmark
                .path
                .is_none()
                .then(|| self.bench_params()),
            architecture: self.architecture.clone(),
            schedule: self.schedule.clone(),
            methods: self
                .methods
                .iter()
                .map(|m| EffectiveMethod {
                    label: m.label(),
                    config: m.resolve(&self.distill),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveMethod {
    pub label: String,
    pub config: DistillConfig,
}

/// Every value a run depends on, defaults filled in. The output directory
/// and worker count are left out since they do not affect results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveConfig {
    pub seeds: Vec<u64>,
    pub upper_bound: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark_path: Option<PathBuf>,
    pub benchmark_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark_params: Option<BenchParams>,
    pub architecture: ArchitectureSpec,
    pub schedule: TrainSchedule,
    pub methods: Vec<EffectiveMethod>,
}

impl EffectiveConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data")
    }

    /// Short hash of the effective config, recorded in every report.
    pub fn digest(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }
}
