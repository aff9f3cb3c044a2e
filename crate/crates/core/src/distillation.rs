//! Loss functions for continual training.
//!
//! The classification loss trains the current step's classes. The old-model
//! losses keep the new model close to the frozen previous one:
//!
//! * LFL penalizes squared distance between old and new embeddings.
//! * LWF is cross-entropy between tempered softmaxes over every old class.
//! * Flexible distillation (FKD) restricts the tempered softmaxes to the `K`
//!   old classes the old model ranks highest for each sample (neighborhood
//!   selection), measures KL divergence over them, and subtracts an
//!   entropy-proportional margin before clamping at zero (consistency
//!   relaxation). Samples inside the margin contribute neither loss nor
//!   gradient.
//!
//! Every loss returns its exact gradient with respect to the new model's
//! outputs; the old model's outputs are constants.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};
use crate::numerics::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Fresh model every step, no old model.
    Scratch,
    Finetune,
    Lfl,
    Lwf,
    FkdBasic,
    FkdNs,
    FkdCr,
    FkdNsCr,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Scratch,
        Method::Finetune,
        Method::Lfl,
        Method::Lwf,
        Method::FkdBasic,
        Method::FkdNs,
        Method::FkdCr,
        Method::FkdNsCr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::Finetune => "finetune",
            Method::Lfl => "lfl",
            Method::Lwf => "lwf",
            Method::FkdBasic => "fkd_basic",
            Method::FkdNs => "fkd_ns",
            Method::FkdCr => "fkd_cr",
            Method::FkdNsCr => "fkd_ns_cr",
        }
    }

    /// Column label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Scratch => "Baseline",
            Method::Finetune => "Finetune",
            Method::Lfl => "LFL",
            Method::Lwf => "LWF",
            Method::FkdBasic => "Basic",
            Method::FkdNs => "Basic+NS",
            Method::FkdCr => "Basic+CR",
            Method::FkdNsCr => "Basic+NS+CR",
        }
    }

    pub fn is_fkd(self) -> bool {
        matches!(
            self,
            Method::FkdBasic | Method::FkdNs | Method::FkdCr | Method::FkdNsCr
        )
    }

    pub fn neighborhood_selection(self) -> bool {
        matches!(self, Method::FkdNs | Method::FkdNsCr)
    }

    pub fn consistency_relaxation(self) -> bool {
        matches!(self, Method::FkdCr | Method::FkdNsCr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CrlError::Config(format!("unknown method `{s}`")))
    }
}

/// Knobs of the old-model regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// `K`; zero selects every old class.
    #[serde(default = "default_neighborhood")]
    pub neighborhood_size: usize,
    /// `β`, scale of the entropy margin.
    #[serde(default = "default_beta")]
    pub margin_beta: f64,
    /// `λ_o`, weight of the old-model loss in the total objective.
    #[serde(default = "default_lambda")]
    pub lambda_old: f64,
    #[serde(default = "default_lfl_weight")]
    pub lfl_weight: f64,
}

fn default_temperature() -> f64 {
    2.0
}
fn default_neighborhood() -> usize {
    20
}
fn default_beta() -> f64 {
    0.01
}
fn default_lambda() -> f64 {
    1.0
}
fn default_lfl_weight() -> f64 {
    1.0
}

impl DistillConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            temperature: default_temperature(),
            neighborhood_size: default_neighborhood(),
            margin_beta: default_beta(),
            lambda_old: default_lambda(),
            lfl_weight: default_lfl_weight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CrlError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !finite_nonneg(self.margin_beta)
            || !finite_nonneg(self.lambda_old)
            || !finite_nonneg(self.lfl_weight)
        {
            return Err(CrlError::Config(format!(
                "margin_beta, lambda_old and lfl_weight must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Neighborhood size actually used by the method: every old class
    /// unless neighborhood selection is on.
    pub fn effective_k(&self) -> usize {
        if self.method.neighborhood_selection() {
            self.neighborhood_size
        } else {
            0
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.method.consistency_relaxation() {
            self.margin_beta
        } else {
            0.0
        }
    }
}

/// Old-class indices `S_i` kept for one sample, highest old activation first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub indices: Vec<usize>,
}

/// Per-batch loss breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub new_loss: f64,
    pub old_loss: f64,
    pub total: f64,
    pub relaxed_divergences: Vec<f64>,
    pub margins: Vec<f64>,
}

impl LossBundle {
    pub fn new(
        new_loss: f64,
        old_loss: f64,
        lambda_old: f64,
        relaxed_divergences: Vec<f64>,
        margins: Vec<f64>,
    ) -> Self {
        Self {
            new_loss,
            old_loss,
            total: total_loss(new_loss, old_loss, lambda_old),
            relaxed_divergences,
            margins,
        }
    }
}

/// Loss value plus its gradient with respect to the new model's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutput {
    pub loss: f64,
    pub grads: DenseTensor,
    pub relaxed_divergences: Vec<f64>,
    pub margins: Vec<f64>,
    /// Number of (sample, class) activation entries that entered the
    /// divergence computation, `Σ_i |S_i|`.
    pub columns_used: usize,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/n`.
pub fn classification_loss(activations: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let n = activations.rows();
    let c = activations.cols();
    if activations.shape().len() != 2 || labels.len() != n {
        return Err(CrlError::shape(
            "classification_loss",
            activations.shape(),
            &[labels.len()],
        ));
    }
    if n == 0 {
        return Err(CrlError::shape("classification_loss", activations.shape(), &[1, c]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(CrlError::Index {
            what: "class labels",
            index: bad,
            bound: c,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grads = DenseTensor::zeros(&[n, c]);
    for (i, &y) in labels.iter().enumerate() {
        let row = activations.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[y];
        let g = grads.row_mut(i);
        for (gj, &a) in g.iter_mut().zip(row) {
            *gj = (a - lse).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grads))
}

/// Descending ranking tie-broken by lower index.
fn rank_desc(row: &[f64], a: usize, b: usize) -> Ordering {
    row[b]
        .partial_cmp(&row[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest entries of one activation row.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let l = row.len();
    let take = if k == 0 || k >= l { l } else { k };
    let mut idx: Vec<usize> = (0..l).collect();
    if take < l {
        idx.select_nth_unstable_by(take - 1, |&a, &b| rank_desc(row, a, b));
        idx.truncate(take);
    }
    idx.sort_unstable_by(|&a, &b| rank_desc(row, a, b));
    idx
}

/// Per-sample neighborhoods ranked by the old model's activations.
pub fn select_neighborhood(old_activations: &DenseTensor, k: usize) -> Result<Vec<Neighborhood>> {
    if old_activations.shape().len() != 2 {
        return Err(CrlError::shape("select_neighborhood", old_activations.shape(), &[0, 0]));
    }
    Ok((0..old_activations.rows())
        .map(|i| Neighborhood {
            indices: top_k_indices(old_activations.row(i), k),
        })
        .collect())
}

/// `softmax(a / T)` with max subtraction.
pub fn tempered_softmax(activations: &[f64], temperature: f64) -> Result<Vec<f64>> {
    Ok(log_tempered_softmax(activations, temperature)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

fn log_tempered_softmax(activations: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CrlError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if activations.is_empty() {
        return Err(CrlError::shape("tempered_softmax", &[0], &[1]));
    }
    let scaled = activations.iter().map(|a| a / temperature);
    let lse = log_sum_exp(scaled.clone());
    Ok(scaled.map(|s| s - lse).collect())
}

const PROB_SUM_TOL: f64 = 1e-9;
const KL_NEG_TOL: f64 = 1e-12;

fn check_probability(p: &[f64], name: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CrlError::Config(format!(
            "{name} is not a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// `KL(p‖q)` with natural logs and `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CrlError::shape("kl_divergence", &[p.len()], &[q.len()]));
    }
    check_probability(p, "p")?;
    check_probability(q, "q")?;
    let mut d = 0.0;
    for (l, (&pl, &ql)) in p.iter().zip(q).enumerate() {
        if pl > 0.0 {
            if ql <= 0.0 {
                return Err(CrlError::DivergenceUndefined { index: l });
            }
            d += pl * (pl.ln() - ql.ln());
        }
    }
    Ok(clamp_small_negative(d))
}

fn clamp_small_negative(d: f64) -> f64 {
    if (-KL_NEG_TOL..0.0).contains(&d) {
        0.0
    } else {
        d
    }
}

/// Entropy of `p` scaled by `β`.
pub fn adaptive_margin(p: &[f64], beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    (beta * h).max(0.0)
}

/// Hinge `[d − δ]₊`; the flag says whether the sample still carries gradient.
pub fn relaxed_kl(d_kl: f64, margin: f64) -> (f64, bool) {
    if d_kl > margin {
        (d_kl - margin, true)
    } else {
        (0.0, false)
    }
}

fn check_pair(old: &DenseTensor, new: &DenseTensor, op: &'static str) -> Result<()> {
    if old.shape() != new.shape() || old.shape().len() != 2 {
        return Err(CrlError::shape(op, old.shape(), new.shape()));
    }
    Ok(())
}

/// Flexible knowledge distillation over the old-class columns.
///
/// `old_acts` come from the frozen previous model, `new_acts_old_cols` are
/// the current model's activations for the same old classes. The loss is
/// the mean of relaxed divergences; it is positive so that minimizing it
/// pulls the new distribution toward the old one.
pub fn fkd_old_loss(
    old_acts: &DenseTensor,
    new_acts_old_cols: &DenseTensor,
    cfg: &DistillConfig,
) -> Result<DistillOutput> {
    cfg.validate()?;
    check_pair(old_acts, new_acts_old_cols, "fkd_old_loss")?;
    let (n, l_old) = (old_acts.rows(), old_acts.cols());
    let mut grads = DenseTensor::zeros(&[n, l_old]);
    if l_old == 0 || n == 0 {
        return Ok(DistillOutput {
            loss: 0.0,
            grads,
            relaxed_divergences: vec![0.0; n],
            margins: vec![0.0; n],
            columns_used: 0,
        });
    }
    let t = cfg.temperature;
    let beta = cfg.effective_beta();
    let neighborhoods = select_neighborhood(old_acts, cfg.effective_k())?;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut relaxed = Vec::with_capacity(n);
    let mut margins = Vec::with_capacity(n);
    let mut columns_used = 0;
    let mut a_sel = Vec::new();
    let mut b_sel = Vec::new();
    for (i, s) in neighborhoods.iter().enumerate() {
        let (a_row, b_row) = (old_acts.row(i), new_acts_old_cols.row(i));
        a_sel.clear();
        b_sel.clear();
        a_sel.extend(s.indices.iter().map(|&j| a_row[j]));
        b_sel.extend(s.indices.iter().map(|&j| b_row[j]));
        columns_used += s.indices.len();

        let log_p = log_tempered_softmax(&a_sel, t)?;
        let log_q = log_tempered_softmax(&b_sel, t)?;
        let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
        let d = clamp_small_negative(
            p.iter()
                .zip(log_p.iter().zip(&log_q))
                .filter(|(&pl, _)| pl > 0.0)
                .map(|(&pl, (&lp, &lq))| pl * (lp - lq))
                .sum(),
        );
        let delta = adaptive_margin(&p, beta);
        let (value, active) = relaxed_kl(d, delta);
        total += value;
        relaxed.push(value);
        margins.push(delta);
        if active {
            let g = grads.row_mut(i);
            for ((&j, &pl), &lq) in s.indices.iter().zip(&p).zip(&log_q) {
                g[j] = (lq.exp() - pl) / t * inv_n;
            }
        }
    }
    Ok(DistillOutput {
        loss: total * inv_n,
        grads,
        relaxed_divergences: relaxed,
        margins,
        columns_used,
    })
}

/// Learning-without-forgetting: `−(1/n) Σ_i Σ_l p_il log q_il` over every
/// old class.
pub fn lwf_old_loss(
    old_acts: &DenseTensor,
    new_acts_old_cols: &DenseTensor,
    temperature: f64,
) -> Result<(f64, DenseTensor)> {
    check_pair(old_acts, new_acts_old_cols, "lwf_old_loss")?;
    let (n, l_old) = (old_acts.rows(), old_acts.cols());
    let mut grads = DenseTensor::zeros(&[n, l_old]);
    if l_old == 0 || n == 0 {
        return Ok((0.0, grads));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let log_p = log_tempered_softmax(old_acts.row(i), temperature)?;
        let log_q = log_tempered_softmax(new_acts_old_cols.row(i), temperature)?;
        let g = grads.row_mut(i);
        for ((gl, &lp), &lq) in g.iter_mut().zip(&log_p).zip(&log_q) {
            let p = lp.exp();
            loss -= p * lq;
            *gl = (lq.exp() - p) / temperature * inv_n;
        }
    }
    Ok((loss * inv_n, grads))
}

/// Less-forgetful learning: `weight · (1/n) Σ_i ‖φ_old − φ_new‖²`.
pub fn lfl_loss(
    old_embeddings: &DenseTensor,
    new_embeddings: &DenseTensor,
    weight: f64,
) -> Result<(f64, DenseTensor)> {
    check_pair(old_embeddings, new_embeddings, "lfl_loss")?;
    let n = old_embeddings.rows();
    let mut grads = DenseTensor::zeros(new_embeddings.shape());
    if n == 0 || weight == 0.0 {
        return Ok((0.0, grads));
    }
    let scale = weight / n as f64;
    let mut sq = 0.0;
    for ((g, &o), &e) in grads
        .data_mut()
        .iter_mut()
        .zip(old_embeddings.data())
        .zip(new_embeddings.data())
    {
        let d = e - o;
        sq += d * d;
        *g = 2.0 * scale * d;
    }
    Ok((scale * sq, grads))
}

/// `L = L_new + λ_o · L_old`.
pub fn total_loss(new_loss: f64, old_loss: f64, lambda_old: f64) -> f64 {
    new_loss + lambda_old * old_loss
}
