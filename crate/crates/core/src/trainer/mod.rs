//! Multi-step continual training.
//!
//! Each step copies the previous model, grows the classifier by the new
//! classes, and optimizes `L_new + λ_o · L_old` over the step's data only,
//! where `L_old` is chosen by the method. The previous model stays frozen
//! as the distillation teacher.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchgen::{features_matrix, Benchmark, IdentitySample, StepDataset, TestSet};
use crate::distillation::{
    classification_loss, fkd_old_loss, lfl_loss, lwf_old_loss, DistillConfig, LossBundle, Method,
};
use crate::error::{CrlError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::numerics::{
    backward, forward, optimizer_update, Architecture, DenseTensor, GradientSet, ModelState, OptimizerConfig,
    OptimizerState,
};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Learning-rate change applied from `epoch` onward (multipliers compound).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub milestones: Vec<Milestone>,
    /// Sample `identities_per_batch × images_per_identity` batches instead
    /// of shuffling.
    pub identity_balanced: bool,
    pub identities_per_batch: usize,
    pub images_per_identity: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            milestones: vec![
                Milestone {
                    epoch: 15,
                    multiplier: 0.1,
                },
                Milestone {
                    epoch: 25,
                    multiplier: 0.1,
                },
            ],
            identity_balanced: true,
            identities_per_batch: 8,
            images_per_identity: 8,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CrlError::Config("batch_size must be >= 1".into()));
        }
        if self.identity_balanced
            && self.identities_per_batch * self.images_per_identity != self.batch_size
        {
            return Err(CrlError::Config(format!(
                "identity-balanced batches need batch_size == {} x {}",
                self.identities_per_batch, self.images_per_identity
            )));
        }
        if self
            .milestones
            .windows(2)
            .any(|w| w[0].epoch >= w[1].epoch)
        {
            return Err(CrlError::Config("milestones must be strictly increasing".into()));
        }
        if self
            .milestones
            .iter()
            .any(|m| !(m.multiplier > 0.0 && m.multiplier.is_finite()))
        {
            return Err(CrlError::Config("milestone multipliers must be positive".into()));
        }
        self.optimizer.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|m| m.epoch <= epoch)
            .fold(self.optimizer.learning_rate, |lr, m| lr * m.multiplier)
    }
}

/// SplitMix64 over the seed and tags, for independent per-purpose streams.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut x = seed;
    for &t in tags {
        x ^= t.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

const TAG_INIT: u64 = 1;
const TAG_BATCHES: u64 = 2;

/// Everything one learning step works with.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub step: usize,
    /// Frozen previous model; absent at step 0 and for scratch training.
    pub old: Option<ModelState>,
    pub model: ModelState,
    pub old_class_count: usize,
    pub new_class_count: usize,
    pub optimizer: OptimizerState,
    pub seed: u64,
}

/// Prepares step `step` whose classes are `class_range`.
///
/// The new model copies `prev` and appends fresh classifier columns; with
/// `fresh` (scratch training) or no `prev`, every parameter is newly
/// initialized from `(seed, step)` alone.
pub fn init_step(
    prev: Option<&ModelState>,
    step: usize,
    class_range: (usize, usize),
    arch: &Architecture,
    optimizer: &OptimizerConfig,
    fresh: bool,
    seed: u64,
) -> Result<StepContext> {
    let (old_classes, end) = class_range;
    if end <= old_classes {
        return Err(CrlError::Config(format!(
            "step {step} brings no new classes ({old_classes}..{end})"
        )));
    }
    let new_classes = end - old_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_INIT, step as u64]));
    let (old, model) = match prev {
        Some(p) if !fresh => {
            if p.class_count != old_classes {
                return Err(CrlError::Config(format!(
                    "previous model has {} classes, step {step} starts at {old_classes}",
                    p.class_count
                )));
            }
            let mut m = p.clone();
            m.expand_classifier(new_classes, &mut rng);
            (Some(p.clone()), m)
        }
        _ => {
            if prev.is_none() && !fresh && old_classes != 0 {
                return Err(CrlError::Config(format!(
                    "step {step} continues from {old_classes} classes but no previous model was given"
                )));
            }
            (None, ModelState::init(arch, end, &mut rng)?)
        }
    };
    let optimizer = OptimizerState::new(optimizer.clone(), &model)?;
    Ok(StepContext {
        step,
        old,
        model,
        old_class_count: old_classes,
        new_class_count: new_classes,
        optimizer,
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedStep {
    pub model: ModelState,
    pub old: Option<ModelState>,
    /// One entry per optimizer update.
    pub history: Vec<LossBundle>,
}

fn batches<R: Rng>(data: &StepDataset, sched: &TrainSchedule, rng: &mut R) -> Vec<Vec<usize>> {
    let n = data.samples.len();
    let count = n.div_ceil(sched.batch_size);
    if !sched.identity_balanced {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        return idx.chunks(sched.batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.identity - data.class_range.0].push(i);
    }
    let classes: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    let p = sched.identities_per_batch.min(classes.len());
    (0..count)
        .map(|_| {
            let mut batch = Vec::with_capacity(sched.batch_size);
            for &c in classes.choose_multiple(rng, p) {
                let imgs = &by_class[c];
                if imgs.len() >= sched.images_per_identity {
                    batch.extend(imgs.choose_multiple(rng, sched.images_per_identity));
                } else {
                    batch.extend((0..sched.images_per_identity).map(|_| imgs[rng.gen_range(0..imgs.len())]));
                }
            }
            batch
        })
        .collect()
}

/// One step of training over `data`. Returns the trained model, the
/// untouched old snapshot and the per-batch loss history.
pub fn train_one_step(
    ctx: StepContext,
    data: &StepDataset,
    cfg: &DistillConfig,
    sched: &TrainSchedule,
) -> Result<TrainedStep> {
    cfg.validate()?;
    sched.validate()?;
    let StepContext {
        step,
        old,
        mut model,
        old_class_count,
        new_class_count,
        mut optimizer,
        seed,
    } = ctx;
    let total_classes = old_class_count + new_class_count;
    for s in &data.samples {
        if s.identity < old_class_count || s.identity >= total_classes {
            return Err(CrlError::Index {
                what: "step labels",
                index: s.identity,
                bound: total_classes,
            });
        }
    }
    if data.samples.is_empty() {
        return Err(CrlError::Config(format!("step {step} has no training samples")));
    }
    let dim = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_BATCHES, step as u64]));
    let teacher = old.as_ref().filter(|_| !matches!(cfg.method, Method::Scratch | Method::Finetune));
    let mut history = Vec::new();
    let mut batch_no = 0usize;
    for epoch in 0..sched.epochs {
        optimizer.learning_rate = sched.learning_rate_at(epoch);
        for batch in batches(data, sched, &mut rng) {
            let samples: Vec<&IdentitySample> = batch.iter().map(|&i| &data.samples[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.identity).collect();
            let x = features_matrix(samples.iter().copied(), dim)?;
            let (bundle, grads) = batch_gradients(&model, teacher, &x, &labels, cfg)?;
            if !bundle.total.is_finite() {
                return Err(CrlError::NonFiniteLoss {
                    step,
                    batch: batch_no,
                    method: cfg.method.to_string(),
                });
            }
            optimizer_update(&mut model, &grads, &mut optimizer)?;
            history.push(bundle);
            batch_no += 1;
        }
    }
    Ok(TrainedStep {
        model,
        old,
        history,
    })
}

/// Loss and parameter gradients of `L_new + λ_o · L_old` on one batch.
/// `teacher` is the frozen old model; `None` trains on the new loss alone.
pub fn batch_gradients(
    model: &ModelState,
    teacher: Option<&ModelState>,
    x: &DenseTensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(LossBundle, GradientSet)> {
    let out = forward(model, x)?;
    let (new_loss, mut act_grads) = classification_loss(&out.activations, labels)?;
    let mut emb_grads = DenseTensor::zeros(out.embeddings.shape());
    let (old_loss, relaxed, margins) = match teacher {
        None => (0.0, Vec::new(), Vec::new()),
        Some(teacher) => old_loss(
            teacher,
            x,
            &out.embeddings,
            &out.activations,
            cfg,
            &mut act_grads,
            &mut emb_grads,
        )?,
    };
    let bundle = LossBundle::new(new_loss, old_loss, cfg.lambda_old, relaxed, margins);
    let grads = backward(&out.cache, &act_grads, &emb_grads)?;
    Ok((bundle, grads))
}

/// Adds `λ_o ·` the old-model loss gradient into the running gradients and
/// returns the unweighted loss with its per-sample details.
fn old_loss(
    teacher: &ModelState,
    x: &DenseTensor,
    embeddings: &DenseTensor,
    activations: &DenseTensor,
    cfg: &DistillConfig,
    act_grads: &mut DenseTensor,
    emb_grads: &mut DenseTensor,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let lambda = cfg.lambda_old;
    if cfg.method == Method::Lfl {
        let old_emb = teacher.embed(x)?;
        let (loss, g) = lfl_loss(&old_emb, embeddings, cfg.lfl_weight)?;
        if lambda != 0.0 {
            for (e, gv) in emb_grads.data_mut().iter_mut().zip(g.data()) {
                *e += lambda * gv;
            }
        }
        return Ok((loss, Vec::new(), Vec::new()));
    }
    let l_old = teacher.class_count;
    let old_acts = forward(teacher, x)?.activations;
    let new_old_cols = activations.column_slice(0, l_old)?;
    let (loss, g, relaxed, margins) = if cfg.method == Method::Lwf {
        let (loss, g) = lwf_old_loss(&old_acts, &new_old_cols, cfg.temperature)?;
        (loss, g, Vec::new(), Vec::new())
    } else {
        let out = fkd_old_loss(&old_acts, &new_old_cols, cfg)?;
        (out.loss, out.grads, out.relaxed_divergences, out.margins)
    };
    if lambda != 0.0 {
        for i in 0..act_grads.rows() {
            let row = act_grads.row_mut(i);
            for (a, gv) in row[..l_old].iter_mut().zip(g.row(i)) {
                *a += lambda * gv;
            }
        }
    }
    Ok((loss, relaxed, margins))
}

/// Read access to per-step training data.
pub trait StepSource {
    fn step_count(&self) -> usize;
    fn step(&self, t: usize) -> &StepDataset;
}

impl StepSource for Benchmark {
    fn step_count(&self) -> usize {
        self.steps.len()
    }

    fn step(&self, t: usize) -> &StepDataset {
        &self.steps[t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Continual training over exactly this many steps.
    Steps(usize),
    /// Upper bound: one run over the union of every step.
    Joint,
}

/// Fixed pieces of a run besides the method config.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub arch: &'a Architecture,
    pub schedule: &'a TrainSchedule,
    pub mode: RunMode,
    pub seed: u64,
    pub config_digest: &'a str,
}

/// Trains step by step and evaluates on `test` after every step. In joint
/// mode a single model is trained on all data and evaluated once.
pub fn run_continual<S: StepSource + ?Sized>(
    source: &S,
    test: &TestSet,
    cfg: &DistillConfig,
    spec: &RunSpec<'_>,
) -> Result<Vec<(ModelState, EvalReport)>> {
    let steps = source.step_count();
    if steps == 0 {
        return Err(CrlError::Config("benchmark has no steps".into()));
    }
    let mut out = Vec::with_capacity(steps);
    match spec.mode {
        RunMode::Joint => {
            let mut union = StepDataset {
                step: 0,
                samples: Vec::new(),
                class_range: (0, 0),
            };
            for t in 0..steps {
                let s = source.step(t);
                union.samples.extend(s.samples.iter().cloned());
                union.class_range.1 = union.class_range.1.max(s.class_range.1);
            }
            let ctx = init_step(None, 0, union.class_range, spec.arch, &spec.schedule.optimizer, true, spec.seed)?;
            let joint_cfg = DistillConfig {
                method: Method::Finetune,
                ..cfg.clone()
            };
            let trained = train_one_step(ctx, &union, &joint_cfg, spec.schedule)?;
            let report = evaluate(&trained.model, test, steps - 1, spec.seed, spec.config_digest)?;
            out.push((trained.model, report));
        }
        RunMode::Steps(n) => {
            if n != steps {
                return Err(CrlError::Config(format!(
                    "requested {n}-step run but the benchmark has {steps} steps"
                )));
            }
            let fresh = cfg.method == Method::Scratch;
            let mut prev: Option<ModelState> = None;
            for t in 0..steps {
                let data = source.step(t);
                let ctx = init_step(
                    prev.as_ref(),
                    t,
                    data.class_range,
                    spec.arch,
                    &spec.schedule.optimizer,
                    fresh,
                    spec.seed,
                )?;
                let trained = train_one_step(ctx, data, cfg, spec.schedule)?;
                let report = evaluate(&trained.model, test, t, spec.seed, spec.config_digest)?;
                prev = Some(trained.model.clone());
                out.push((trained.model, report));
            }
        }
    }
    Ok(out)
}

/// Accuracy on held-out images of the first step's classes, classifying by
/// argmax over those classes' columns only. One value per model.
pub fn old_class_probe(
    models: &[ModelState],
    probe: &[IdentitySample],
    classes: (usize, usize),
) -> Result<Vec<f64>> {
    if probe.is_empty() {
        return Err(CrlError::Config("probe set is empty".into()));
    }
    let mut out = Vec::with_capacity(models.len());
    for m in models {
        if m.class_count < classes.1 {
            return Err(CrlError::Index {
                what: "probe classes",
                index: classes.1,
                bound: m.class_count,
            });
        }
        let x = features_matrix(probe, m.input_dim())?;
        let acts = forward(m, &x)?.activations;
        let correct = probe
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                let row = &acts.row(*i)[classes.0..classes.1];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                classes.0 + best == s.identity
            })
            .count();
        out.push(correct as f64 / probe.len() as f64);
    }
    Ok(out)
}
