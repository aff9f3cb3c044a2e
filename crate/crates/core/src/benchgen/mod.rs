//! Synthetic identity benchmarks.
//!
//! Every identity gets a prototype on the unit sphere. An image is the
//! prototype plus a per-camera offset shared by all identities plus
//! per-image noise, renormalized to unit length. Training identities are
//! shuffled and split equally across steps; test identities never appear in
//! training.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};
use crate::numerics::DenseTensor;

pub use io::{load, save, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    /// Identity pool split across steps (including validation identities).
    pub train_identities: usize,
    /// Test identities with both query and gallery images.
    pub test_identities: usize,
    /// Extra test identities that only appear in the gallery.
    pub distractor_identities: usize,
    pub images_per_identity: usize,
    pub cameras: usize,
    pub input_dim: usize,
    pub sigma_img: f64,
    pub sigma_cam: f64,
    pub steps: usize,
    /// Fraction of each step's identities withheld for validation.
    pub validation_fraction: f64,
    /// Held-out images per step-0 identity for the old-class probe.
    pub probe_images: usize,
    /// Fraction of a test identity's images that are queries.
    pub query_fraction: f64,
    pub verification_pairs: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            train_identities: 200,
            test_identities: 80,
            distractor_identities: 4,
            images_per_identity: 20,
            cameras: 4,
            input_dim: 32,
            sigma_img: 0.8,
            sigma_cam: 1.0,
            steps: 5,
            validation_fraction: 0.1,
            probe_images: 4,
            query_fraction: 0.25,
            verification_pairs: 3000,
        }
    }
}

impl BenchParams {
    pub fn per_step_identities(&self) -> usize {
        self.train_identities / self.steps.max(1)
    }

    pub fn validation_per_step(&self) -> usize {
        (self.per_step_identities() as f64 * self.validation_fraction).round() as usize
    }

    pub fn classes_per_step(&self) -> usize {
        self.per_step_identities() - self.validation_per_step()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CrlError::Config(m));
        if self.steps == 0 || self.steps > self.train_identities {
            return err(format!(
                "steps ({}) must be in 1..={}",
                self.steps, self.train_identities
            ));
        }
        if !self.train_identities.is_multiple_of(self.steps) {
            return err(format!(
                "{} training identities cannot be split equally into {} steps",
                self.train_identities, self.steps
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.classes_per_step() == 0 {
            return err(format!(
                "validation_fraction {} leaves no training classes per step",
                self.validation_fraction
            ));
        }
        if self.test_identities < 2 {
            return err("need at least 2 test identities".into());
        }
        if self.cameras == 0 || self.input_dim < 2 {
            return err("cameras must be >= 1 and input_dim >= 2".into());
        }
        if self.images_per_identity < 2 || self.images_per_identity <= self.probe_images {
            return err(format!(
                "images_per_identity ({}) must exceed probe_images ({}) and be >= 2",
                self.images_per_identity, self.probe_images
            ));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return err("query_fraction must be in (0, 1)".into());
        }
        if !(self.sigma_img >= 0.0 && self.sigma_cam >= 0.0)
            || !self.sigma_img.is_finite()
            || !self.sigma_cam.is_finite()
        {
            return err("noise scales must be finite and non-negative".into());
        }
        if self.verification_pairs < 20 || !self.verification_pairs.is_multiple_of(10) {
            return err(format!(
                "verification_pairs ({}) must be a multiple of 10 and at least 20",
                self.verification_pairs
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Query,
    Gallery,
    ProbeOld,
    ValQuery,
    ValGallery,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Query => "query",
            Role::Gallery => "gallery",
            Role::ProbeOld => "probe-old",
            Role::ValQuery => "val-query",
            Role::ValGallery => "val-gallery",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Role::Train,
            Role::Query,
            Role::Gallery,
            Role::ProbeOld,
            Role::ValQuery,
            Role::ValGallery,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| CrlError::Corruption(format!("unknown role `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySample {
    pub features: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
    pub role: Role,
}

/// Training data of one step. Identities double as global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDataset {
    pub step: usize,
    pub samples: Vec<IdentitySample>,
    /// Global class labels `[start, end)` owned by this step.
    pub class_range: (usize, usize),
}

impl StepDataset {
    pub fn class_count(&self) -> usize {
        self.class_range.1 - self.class_range.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalSet {
    pub query: Vec<IdentitySample>,
    pub gallery: Vec<IdentitySample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Fixed evaluation data: the reduced query/gallery split, the unreduced
/// pool it came from, and verification pairs indexing into the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub pool: Vec<IdentitySample>,
    pub retrieval: RetrievalSet,
    /// Pre-shuffled; ten contiguous folds, each with both classes.
    pub pairs: Vec<VerificationPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepManifest {
    pub step: usize,
    pub class_start: usize,
    pub class_end: usize,
    pub train_samples: usize,
    pub validation_identities: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub format_version: u32,
    pub seed: u64,
    /// SHA-256 over the feature, index and pair files.
    pub checksum: String,
    pub params: BenchParams,
    pub steps: Vec<StepManifest>,
    pub test_identities: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub manifest: BenchmarkManifest,
    pub steps: Vec<StepDataset>,
    pub test: TestSet,
    pub validation: RetrievalSet,
    /// Held-out images of step-0 classes.
    pub probe_old: Vec<IdentitySample>,
}

impl Benchmark {
    pub fn total_classes(&self) -> usize {
        self.steps.last().map_or(0, |s| s.class_range.1)
    }

    pub fn input_dim(&self) -> usize {
        self.manifest.params.input_dim
    }
}

/// Stacks feature vectors into an `[n × d]` matrix.
pub fn features_matrix<'a>(samples: impl IntoIterator<Item = &'a IdentitySample>, dim: usize) -> Result<DenseTensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        if s.features.len() != dim {
            return Err(CrlError::shape("features_matrix", &[s.features.len()], &[dim]));
        }
        data.extend_from_slice(&s.features);
        n += 1;
    }
    DenseTensor::matrix(n, dim, data)
}

fn gaussian_vec<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Uniform point on the unit sphere.
fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(dim, 1.0, rng);
        if v.iter().any(|&x| x != 0.0) {
            normalize(&mut v);
            return v;
        }
    }
}

struct ImageModel {
    cameras: Vec<Vec<f64>>,
    sigma_img: f64,
    dim: usize,
}

impl ImageModel {
    /// Offsets and noise are isotropic Gaussians scaled so that their
    /// expected squared norm is `sigma²`, comparable to the unit prototype.
    fn new<R: Rng>(p: &BenchParams, rng: &mut R) -> Self {
        let per_coord = 1.0 / (p.input_dim as f64).sqrt();
        Self {
            cameras: (0..p.cameras)
                .map(|_| gaussian_vec(p.input_dim, p.sigma_cam * per_coord, rng))
                .collect(),
            sigma_img: p.sigma_img * per_coord,
            dim: p.input_dim,
        }
    }

    fn images<R: Rng>(
        &self,
        prototype: &[f64],
        identity: usize,
        count: usize,
        rng: &mut R,
    ) -> Vec<IdentitySample> {
        (0..count)
            .map(|_| {
                let camera = rng.gen_range(0..self.cameras.len());
                let noise = gaussian_vec(self.dim, self.sigma_img, rng);
                let mut features: Vec<f64> = prototype
                    .iter()
                    .zip(&self.cameras[camera])
                    .zip(&noise)
                    .map(|((p, c), e)| p + c + e)
                    .collect();
                normalize(&mut features);
                IdentitySample {
                    features,
                    identity,
                    camera,
                    role: Role::Train,
                }
            })
            .collect()
    }
}

fn split_query_gallery(
    images: Vec<IdentitySample>,
    query_fraction: f64,
    query_role: Role,
    gallery_role: Role,
) -> (Vec<IdentitySample>, Vec<IdentitySample>) {
    let n_query = ((images.len() as f64 * query_fraction).ceil() as usize).clamp(1, images.len() - 1);
    let mut q = Vec::with_capacity(n_query);
    let mut g = Vec::with_capacity(images.len() - n_query);
    for (k, mut s) in images.into_iter().enumerate() {
        if k < n_query {
            s.role = query_role;
            q.push(s);
        } else {
            s.role = gallery_role;
            g.push(s);
        }
    }
    (q, g)
}

/// Builds a benchmark. `(params, seed)` determine every value.
pub fn generate(params: &BenchParams, seed: u64) -> Result<Benchmark> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ImageModel::new(params, &mut rng);
    let ipi = params.images_per_identity;

    let pool: Vec<Vec<f64>> = (0..params.train_identities)
        .map(|_| unit_vector(params.input_dim, &mut rng))
        .collect();
    let mut order: Vec<usize> = (0..params.train_identities).collect();
    order.shuffle(&mut rng);

    let per_step = params.per_step_identities();
    let n_val = params.validation_per_step();
    let n_cls = params.classes_per_step();
    let total_classes = n_cls * params.steps;
    let mut next_val_id = total_classes;

    let mut steps = Vec::with_capacity(params.steps);
    let mut step_manifests = Vec::with_capacity(params.steps);
    let mut probe_old = Vec::new();
    let mut validation = RetrievalSet::default();
    for (t, chunk) in order.chunks(per_step).enumerate() {
        let start = t * n_cls;
        let mut samples = Vec::with_capacity(n_cls * ipi);
        let mut val_ids = Vec::with_capacity(n_val);
        for &raw in &chunk[..n_val] {
            let id = next_val_id;
            next_val_id += 1;
            val_ids.push(id);
            let imgs = model.images(&pool[raw], id, ipi, &mut rng);
            let (q, g) = split_query_gallery(imgs, params.query_fraction, Role::ValQuery, Role::ValGallery);
            validation.query.extend(q);
            validation.gallery.extend(g);
        }
        for (k, &raw) in chunk[n_val..].iter().enumerate() {
            let id = start + k;
            let mut imgs = model.images(&pool[raw], id, ipi, &mut rng);
            if t == 0 && params.probe_images > 0 {
                let held = imgs.split_off(ipi - params.probe_images);
                probe_old.extend(held.into_iter().map(|mut s| {
                    s.role = Role::ProbeOld;
                    s
                }));
            }
            samples.extend(imgs);
        }
        step_manifests.push(StepManifest {
            step: t,
            class_start: start,
            class_end: start + n_cls,
            train_samples: samples.len(),
            validation_identities: val_ids,
        });
        steps.push(StepDataset {
            step: t,
            samples,
            class_range: (start, start + n_cls),
        });
    }

    let first_test = next_val_id;
    let mut test_query = Vec::new();
    let mut test_gallery = Vec::new();
    let mut test_ids = Vec::new();
    for k in 0..params.test_identities + params.distractor_identities {
        let id = first_test + k;
        test_ids.push(id);
        let proto = unit_vector(params.input_dim, &mut rng);
        let imgs = model.images(&proto, id, ipi, &mut rng);
        if k < params.test_identities {
            let (q, g) = split_query_gallery(imgs, params.query_fraction, Role::Query, Role::Gallery);
            test_query.extend(q);
            test_gallery.extend(g);
        } else {
            test_gallery.extend(imgs.into_iter().map(|mut s| {
                s.role = Role::Gallery;
                s
            }));
        }
    }
    let retrieval = reduce_test_set(&test_query, &test_gallery, rng.gen())?;
    let reduced_validation = if validation.query.is_empty() {
        validation
    } else {
        reduce_test_set(&validation.query, &validation.gallery, rng.gen())?
    };
    let mut test_pool = test_query;
    test_pool.extend(test_gallery);
    let pairs = verification_pairs(&test_pool, params.verification_pairs, &mut rng)?;

    let mut bench = Benchmark {
        manifest: BenchmarkManifest {
            format_version: FORMAT_VERSION,
            seed,
            checksum: String::new(),
            params: params.clone(),
            steps: step_manifests,
            test_identities: test_ids,
        },
        steps,
        test: TestSet {
            pool: test_pool,
            retrieval,
            pairs,
        },
        validation: reduced_validation,
        probe_old,
    };
    bench.manifest.checksum = io::checksum(&bench);
    Ok(bench)
}

/// Builds `count` pairs in ten folds; each fold is half genuine, half
/// impostor (genuine rounded up) and shuffled.
fn verification_pairs<R: Rng>(
    pool: &[IdentitySample],
    count: usize,
    rng: &mut R,
) -> Result<Vec<VerificationPair>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_id.entry(s.identity).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= 2).collect();
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    if multi.is_empty() || ids.len() < 2 {
        return Err(CrlError::BenchmarkTooSmall(
            "test pool cannot form genuine and impostor pairs".into(),
        ));
    }
    let fold = count / 10;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..10 {
        let genuine = fold.div_ceil(2);
        let mut chunk = Vec::with_capacity(fold);
        for k in 0..fold {
            if k < genuine {
                let imgs = multi[rng.gen_range(0..multi.len())];
                let a = rng.gen_range(0..imgs.len());
                let mut b = rng.gen_range(0..imgs.len() - 1);
                if b >= a {
                    b += 1;
                }
                chunk.push(VerificationPair {
                    a: imgs[a],
                    b: imgs[b],
                    genuine: true,
                });
            } else {
                let x = rng.gen_range(0..ids.len());
                let mut y = rng.gen_range(0..ids.len() - 1);
                if y >= x {
                    y += 1;
                }
                let (ix, iy) = (ids[x], ids[y]);
                chunk.push(VerificationPair {
                    a: ix[rng.gen_range(0..ix.len())],
                    b: iy[rng.gen_range(0..iy.len())],
                    genuine: false,
                });
            }
        }
        chunk.shuffle(rng);
        pairs.extend(chunk);
    }
    Ok(pairs)
}

fn keep_one_per_identity_camera<R: Rng>(samples: &[&IdentitySample], rng: &mut R) -> Vec<IdentitySample> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry((s.identity, s.camera)).or_default().push(i);
    }
    let mut keep = BTreeSet::new();
    for members in groups.values() {
        keep.insert(members[rng.gen_range(0..members.len())]);
    }
    keep.into_iter().map(|i| samples[i].clone()).collect()
}

/// Drops gallery-only identities, then keeps at most one image per
/// (identity, camera) in query and gallery independently. Input order is
/// preserved among survivors.
pub fn reduce_test_set(
    query: &[IdentitySample],
    gallery: &[IdentitySample],
    seed: u64,
) -> Result<RetrievalSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query_ids: BTreeSet<usize> = query.iter().map(|s| s.identity).collect();
    let q: Vec<&IdentitySample> = query.iter().collect();
    let g: Vec<&IdentitySample> = gallery
        .iter()
        .filter(|s| query_ids.contains(&s.identity))
        .collect();
    let reduced = RetrievalSet {
        query: keep_one_per_identity_camera(&q, &mut rng),
        gallery: keep_one_per_identity_camera(&g, &mut rng),
    };
    if reduced.query.is_empty() || reduced.gallery.is_empty() {
        return Err(CrlError::BenchmarkTooSmall(format!(
            "reduced test set has {} queries and {} gallery images",
            reduced.query.len(),
            reduced.gallery.len()
        )));
    }
    Ok(reduced)
}
