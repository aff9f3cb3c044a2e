//! Retrieval (top-1, mAP) and ten-fold verification metrics on raw
//! Euclidean embedding distances.

use serde::{Deserialize, Serialize};

use crate::benchgen::{features_matrix, IdentitySample, TestSet};
use crate::error::{CrlError, Result};
use crate::numerics::{euclidean, DenseTensor, ModelState};

pub const FOLDS: usize = 10;

/// Identity and camera of one embedded sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub identity: usize,
    pub camera: usize,
}

impl From<&IdentitySample> for SampleMeta {
    fn from(s: &IdentitySample) -> Self {
        Self {
            identity: s.identity,
            camera: s.camera,
        }
    }
}

/// Embeds samples in chunks of `batch_size`. Rows are independent, so the
/// result does not depend on the chunking.
pub fn embed_all(model: &ModelState, samples: &[IdentitySample], batch_size: usize) -> Result<DenseTensor> {
    let dim = model.input_dim();
    let mut data = Vec::with_capacity(samples.len() * model.embed_dim);
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = features_matrix(chunk, dim)?;
        data.extend(model.embed(&x)?.into_data());
    }
    DenseTensor::matrix(samples.len(), model.embed_dim, data)
}

/// Gallery entries for one query ordered by ascending distance, with the
/// same-identity same-camera entries removed.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: usize,
    pub gallery: Vec<usize>,
    pub relevant: Vec<bool>,
}

pub fn rank_gallery(
    query: usize,
    query_emb: &[f64],
    query_meta: SampleMeta,
    gallery: &DenseTensor,
    gallery_meta: &[SampleMeta],
) -> RankedList {
    let mut scored: Vec<(f64, usize)> = gallery_meta
        .iter()
        .enumerate()
        .filter(|(_, g)| !(g.identity == query_meta.identity && g.camera == query_meta.camera))
        .map(|(j, _)| (euclidean(query_emb, gallery.row(j)), j))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let relevant = scored
        .iter()
        .map(|&(_, j)| gallery_meta[j].identity == query_meta.identity)
        .collect();
    RankedList {
        query,
        gallery: scored.into_iter().map(|(_, j)| j).collect(),
        relevant,
    }
}

/// Mean over relevant positions of precision at that position; `None` if
/// nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalScores {
    pub top1: f64,
    pub map: f64,
    /// Queries with at least one relevant gallery entry.
    pub evaluated: usize,
}

pub fn retrieval_metrics(
    query: &DenseTensor,
    query_meta: &[SampleMeta],
    gallery: &DenseTensor,
    gallery_meta: &[SampleMeta],
) -> Result<RetrievalScores> {
    if query.rows() != query_meta.len() || gallery.rows() != gallery_meta.len() {
        return Err(CrlError::shape(
            "retrieval_metrics",
            &[query.rows(), gallery.rows()],
            &[query_meta.len(), gallery_meta.len()],
        ));
    }
    if query.rows() > 0 && gallery.rows() > 0 && query.cols() != gallery.cols() {
        return Err(CrlError::shape("retrieval_metrics", query.shape(), gallery.shape()));
    }
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    for (i, &meta) in query_meta.iter().enumerate() {
        let ranked = rank_gallery(i, query.row(i), meta, gallery, gallery_meta);
        if let Some(ap) = average_precision(&ranked.relevant) {
            evaluated += 1;
            ap_sum += ap;
            if ranked.relevant[0] {
                hits += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(CrlError::Protocol(
            "no query has a relevant gallery entry".into(),
        ));
    }
    Ok(RetrievalScores {
        top1: hits as f64 / evaluated as f64,
        map: ap_sum / evaluated as f64,
        evaluated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub thresholds: Vec<f64>,
}

fn accuracy_at(scored: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = scored
        .iter()
        .filter(|&&(d, genuine)| (d < threshold) == genuine)
        .count();
    correct as f64 / scored.len() as f64
}

/// Distance threshold maximizing accuracy on `scored`; candidates are the
/// midpoints between consecutive distinct distances plus one point below
/// and one above the range. Ties go to the smaller threshold.
pub fn best_threshold(scored: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(&(lo, _)) = sorted.first() else {
        return 0.0;
    };
    let hi = sorted.last().expect("non-empty").0;
    let impostors = sorted.iter().filter(|p| !p.1).count();
    // threshold below everything: all predicted impostor
    let mut best = (impostors, lo - 1.0);
    let mut correct = impostors;
    let mut k = 0;
    while k < sorted.len() {
        let d = sorted[k].0;
        while k < sorted.len() && sorted[k].0 == d {
            if sorted[k].1 {
                correct += 1;
            } else {
                correct -= 1;
            }
            k += 1;
        }
        let threshold = if k < sorted.len() {
            0.5 * (d + sorted[k].0)
        } else {
            hi + 1.0
        };
        if correct > best.0 {
            best = (correct, threshold);
        }
    }
    best.1
}

/// Ten contiguous folds; each fold is scored with the threshold chosen on
/// the other nine.
pub fn verification_tenfold(pairs: &[(&[f64], &[f64], bool)]) -> Result<VerificationResult> {
    if pairs.is_empty() || !pairs.len().is_multiple_of(FOLDS) {
        return Err(CrlError::Protocol(format!(
            "{} pairs cannot be split into {FOLDS} equal folds",
            pairs.len()
        )));
    }
    let scored: Vec<(f64, bool)> = pairs
        .iter()
        .map(|(a, b, g)| (euclidean(a, b), *g))
        .collect();
    let size = scored.len() / FOLDS;
    let folds: Vec<&[(f64, bool)]> = scored.chunks(size).collect();
    for (i, f) in folds.iter().enumerate() {
        if !(f.iter().any(|p| p.1) && f.iter().any(|p| !p.1)) {
            return Err(CrlError::Protocol(format!(
                "fold {i} lacks genuine or impostor pairs"
            )));
        }
    }
    let mut fold_accuracies = Vec::with_capacity(FOLDS);
    let mut thresholds = Vec::with_capacity(FOLDS);
    for i in 0..FOLDS {
        let train: Vec<(f64, bool)> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let t = best_threshold(&train);
        thresholds.push(t);
        fold_accuracies.push(accuracy_at(folds[i], t));
    }
    Ok(VerificationResult {
        accuracy: fold_accuracies.iter().sum::<f64>() / FOLDS as f64,
        fold_accuracies,
        thresholds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub step: usize,
    pub top1: f64,
    pub map: f64,
    pub verification_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "seed,step,method,top1,map,verification";

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is plain data")
    }

    pub fn csv_row(&self, method: &str) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.seed, self.step, method, self.top1, self.map, self.verification_accuracy
        )
    }
}

/// Retrieval and verification of `model` on a test set.
pub fn evaluate(
    model: &ModelState,
    test: &TestSet,
    step: usize,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport> {
    let scores = retrieval_scores(model, &test.retrieval.query, &test.retrieval.gallery)?;
    let pool = embed_all(model, &test.pool, 256)?;
    let pairs: Vec<(&[f64], &[f64], bool)> = test
        .pairs
        .iter()
        .map(|p| (pool.row(p.a), pool.row(p.b), p.genuine))
        .collect();
    let v = verification_tenfold(&pairs)?;
    Ok(EvalReport {
        step,
        top1: scores.top1,
        map: scores.map,
        verification_accuracy: v.accuracy,
        fold_accuracies: v.fold_accuracies,
        thresholds: v.thresholds,
        seed,
        config_digest: config_digest.to_string(),
    })
}

pub fn retrieval_scores(
    model: &ModelState,
    query: &[IdentitySample],
    gallery: &[IdentitySample],
) -> Result<RetrievalScores> {
    let q = embed_all(model, query, 256)?;
    let g = embed_all(model, gallery, 256)?;
    let qm: Vec<SampleMeta> = query.iter().map(SampleMeta::from).collect();
    let gm: Vec<SampleMeta> = gallery.iter().map(SampleMeta::from).collect();
    retrieval_metrics(&q, &qm, &g, &gm)
}
