use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::DenseTensor;
use crate::error::{CrlError, Result};

/// Shape of the embedding network: an MLP with ReLU hidden layers and a
/// linear embedding layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64],
            embed_dim: 32,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(CrlError::Config(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[fan_in × fan_out]`
    pub weight: DenseTensor,
    pub bias: DenseTensor,
    pub relu: bool,
}

/// Embedding network parameters plus the classifier matrix for every class
/// seen so far (one column per class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub layers: Vec<Layer>,
    /// `[embed_dim × class_count]`
    pub classifier: DenseTensor,
    pub class_count: usize,
    pub embed_dim: usize,
}

/// Glorot-uniform limit for a `fan_in × fan_out` matrix.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> DenseTensor {
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    DenseTensor::matrix(rows, cols, data).expect("sized by construction")
}

impl ModelState {
    pub fn init<R: Rng>(arch: &Architecture, class_count: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.embed_dim);
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Layer {
                weight: uniform_matrix(w[0], w[1], glorot(w[0], w[1]), rng),
                bias: DenseTensor::zeros(&[w[1]]),
                relu: k + 1 < n_layers,
            })
            .collect();
        let classifier = if class_count == 0 {
            DenseTensor::zeros(&[arch.embed_dim, 0])
        } else {
            uniform_matrix(
                arch.embed_dim,
                class_count,
                glorot(arch.embed_dim, class_count),
                rng,
            )
        };
        let model = Self {
            layers,
            classifier,
            class_count,
            embed_dim: arch.embed_dim,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.embed_dim, |l| l.weight.rows())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.layers[..self.layers.len().saturating_sub(1)]
                .iter()
                .map(|l| l.weight.cols())
                .collect(),
            embed_dim: self.embed_dim,
        }
    }

    /// Checks the layer chain and classifier dimensions.
    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(CrlError::shape(
                    "layer chain",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.weight.cols() {
                return Err(CrlError::shape("layer bias", l.weight.shape(), l.bias.shape()));
            }
        }
        let out = self.layers.last().map_or(self.embed_dim, |l| l.weight.cols());
        if out != self.embed_dim {
            return Err(CrlError::shape("embedding dim", &[out], &[self.embed_dim]));
        }
        if self.classifier.shape() != [self.embed_dim, self.class_count] {
            return Err(CrlError::shape(
                "classifier",
                self.classifier.shape(),
                &[self.embed_dim, self.class_count],
            ));
        }
        Ok(())
    }

    /// Appends `extra` freshly initialized classifier columns. Existing
    /// columns are copied bit for bit.
    pub fn expand_classifier<R: Rng>(&mut self, extra: usize, rng: &mut R) {
        let old = self.class_count;
        let total = old + extra;
        let fresh = uniform_matrix(self.embed_dim, extra, glorot(self.embed_dim, total), rng);
        let mut data = Vec::with_capacity(self.embed_dim * total);
        for r in 0..self.embed_dim {
            data.extend_from_slice(&self.classifier.data()[r * old..(r + 1) * old]);
            data.extend_from_slice(fresh.row(r));
        }
        self.classifier = DenseTensor::matrix(self.embed_dim, total, data).expect("sized");
        self.class_count = total;
    }

    /// Parameter tensors in canonical order: each layer's weight then bias,
    /// then the classifier.
    pub fn params(&self) -> Vec<(String, &DenseTensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer[{k}].weight"), &l.weight));
            out.push((format!("layer[{k}].bias"), &l.bias));
        }
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier);
        out
    }

    /// Embeddings only, skipping the classifier product.
    pub fn embed(&self, batch: &DenseTensor) -> Result<DenseTensor> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(CrlError::shape(
                "forward",
                batch.shape(),
                &[batch.rows(), self.input_dim()],
            ));
        }
        let mut h = batch.clone();
        for l in &self.layers {
            h = apply_layer(l, &h)?;
        }
        h.check_finite("embeddings")?;
        Ok(h)
    }
}

fn apply_layer(layer: &Layer, input: &DenseTensor) -> Result<DenseTensor> {
    let mut z = input.matmul(&layer.weight)?;
    z.add_row_vector(&layer.bias)?;
    if layer.relu {
        for v in z.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(z)
}

/// Intermediates of one forward pass, borrowed against the model that
/// produced them.
#[derive(Debug)]
pub struct ForwardCache<'a> {
    model: &'a ModelState,
    /// Input to each layer, followed by the embeddings.
    inputs: Vec<DenseTensor>,
}

#[derive(Debug)]
pub struct ForwardOutput<'a> {
    pub embeddings: DenseTensor,
    pub activations: DenseTensor,
    pub cache: ForwardCache<'a>,
}

pub fn forward<'a>(model: &'a ModelState, batch: &DenseTensor) -> Result<ForwardOutput<'a>> {
    if batch.shape().len() != 2 || batch.cols() != model.input_dim() {
        return Err(CrlError::shape(
            "forward",
            batch.shape(),
            &[batch.rows(), model.input_dim()],
        ));
    }
    let mut inputs = Vec::with_capacity(model.layers.len() + 1);
    inputs.push(batch.clone());
    for l in &model.layers {
        let next = apply_layer(l, inputs.last().expect("non-empty"))?;
        inputs.push(next);
    }
    let embeddings = inputs.last().expect("non-empty").clone();
    embeddings.check_finite("embeddings")?;
    let activations = embeddings.matmul(&model.classifier)?;
    activations.check_finite("activations")?;
    Ok(ForwardOutput {
        embeddings,
        activations,
        cache: ForwardCache { model, inputs },
    })
}

/// Gradient per parameter tensor, in the same layout as [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<(DenseTensor, DenseTensor)>,
    pub classifier: DenseTensor,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        DenseTensor::zeros(l.weight.shape()),
                        DenseTensor::zeros(l.bias.shape()),
                    )
                })
                .collect(),
            classifier: DenseTensor::zeros(model.classifier.shape()),
        }
    }

    /// Same canonical order as [`ModelState::params`].
    pub fn tensors(&self) -> Vec<&DenseTensor> {
        let mut out: Vec<&DenseTensor> = Vec::with_capacity(2 * self.layers.len() + 1);
        for (w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(&self.classifier);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out: Vec<&mut DenseTensor> = Vec::with_capacity(2 * self.layers.len() + 1);
        for (w, b) in &mut self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.classifier);
        out
    }

    pub fn is_congruent(&self, model: &ModelState) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .tensors()
                .iter()
                .zip(model.params())
                .all(|(g, (_, p))| g.shape() == p.shape())
    }
}

/// Exact gradients of a scalar loss given its partials with respect to the
/// activations and to the embeddings. Both paths are summed.
pub fn backward(
    cache: &ForwardCache<'_>,
    activation_grads: &DenseTensor,
    embedding_grads: &DenseTensor,
) -> Result<GradientSet> {
    let model = cache.model;
    let embeddings = cache.inputs.last().expect("non-empty");
    let n = embeddings.rows();
    if activation_grads.shape() != [n, model.class_count] {
        return Err(CrlError::shape(
            "backward activations",
            activation_grads.shape(),
            &[n, model.class_count],
        ));
    }
    if embedding_grads.shape() != embeddings.shape() {
        return Err(CrlError::shape(
            "backward embeddings",
            embedding_grads.shape(),
            embeddings.shape(),
        ));
    }
    let classifier = embeddings.t_matmul(activation_grads)?;
    let mut upstream = activation_grads.matmul_t(&model.classifier)?;
    upstream.add_assign(embedding_grads)?;

    let mut layers = Vec::with_capacity(model.layers.len());
    for (k, layer) in model.layers.iter().enumerate().rev() {
        let output = &cache.inputs[k + 1];
        if layer.relu {
            for (g, &h) in upstream.data_mut().iter_mut().zip(output.data()) {
                if h <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = &cache.inputs[k];
        let dw = input.t_matmul(&upstream)?;
        let db = upstream.sum_rows()?;
        if k > 0 {
            upstream = upstream.matmul_t(&layer.weight)?;
        }
        layers.push((dw, db));
    }
    layers.reverse();
    let grads = GradientSet { layers, classifier };
    for (t, (name, _)) in grads.tensors().iter().zip(model.params()) {
        t.check_finite(&format!("{name} gradient"))?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model() -> ModelState {
        ModelState {
            layers: vec![Layer {
                weight: DenseTensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                bias: DenseTensor::zeros(&[2]),
                relu: false,
            }],
            classifier: DenseTensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            class_count: 2,
            embed_dim: 2,
        }
    }

    #[test]
    fn identity_forward() {
        let m = identity_model();
        let x = DenseTensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = forward(&m, &x).unwrap();
        assert_eq!(out.embeddings.data(), &[1.0, 2.0]);
        assert_eq!(out.activations.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = identity_model();
        let x = DenseTensor::zeros(&[1, 3]);
        assert!(matches!(forward(&m, &x), Err(CrlError::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture {
            input_dim: 4,
            hidden: vec![5],
            embed_dim: 3,
        };
        let m = ModelState::init(&arch, 6, &mut rng).unwrap();
        let x = DenseTensor::matrix(2, 4, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let out = forward(&m, &x).unwrap();
        let g = backward(
            &out.cache,
            &DenseTensor::zeros(&[2, 6]),
            &DenseTensor::zeros(&[2, 3]),
        )
        .unwrap();
        assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sum_of_activations_classifier_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![4],
            embed_dim: 2,
        };
        let m = ModelState::init(&arch, 3, &mut rng).unwrap();
        let x = DenseTensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap();
        let out = forward(&m, &x).unwrap();
        let ones = DenseTensor::matrix(3, 3, vec![1.0; 9]).unwrap();
        let g = backward(&out.cache, &ones, &DenseTensor::zeros(&[3, 2])).unwrap();
        let colsum = out.embeddings.sum_rows().unwrap();
        for j in 0..3 {
            for r in 0..2 {
                assert!((g.classifier.get(r, j) - colsum.data()[r]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn init_bias_zero_and_within_glorot_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = Architecture::default();
        let m = ModelState::init(&arch, 10, &mut rng).unwrap();
        for l in &m.layers {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
            let lim = glorot(l.weight.rows(), l.weight.cols());
            assert!(l.weight.data().iter().all(|w| w.abs() <= lim));
        }
        assert!(m.layers.last().map(|l| !l.relu).unwrap());
        assert_eq!(m.architecture(), arch);
    }

    #[test]
    fn expand_copies_existing_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = ModelState::init(&Architecture::default(), 10, &mut rng).unwrap();
        let mut grown = m.clone();
        grown.expand_classifier(10, &mut rng);
        assert_eq!(grown.class_count, 20);
        grown.validate().unwrap();
        for r in 0..m.embed_dim {
            for c in 0..10 {
                assert_eq!(
                    grown.classifier.get(r, c).to_bits(),
                    m.classifier.get(r, c).to_bits()
                );
            }
        }
    }
}
