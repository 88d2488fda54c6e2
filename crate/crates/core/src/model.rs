//! Classifier network: feature extractor → embedding L1 → matching L2.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use crate::zerobias::{cosine_scores, zerobias_node, EmbeddingLayer, FingerprintMatrix, DEFAULT_TEMPERATURE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConvLayer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Layers preceding the embedding. Hidden layers are followed by ReLU and
/// convolution blocks additionally max-pool; the last dense layer is linear
/// so that no sample maps to an all-zero feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum Extractor<T> {
    Mlp(Vec<Dense<T>>),
    Cnn {
        input_shape: [usize; 3],
        convs: Vec<ConvLayer<T>>,
        dense: Dense<T>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum Head<T> {
    /// Cosine matching against fingerprints, no bias.
    ZeroBias(FingerprintMatrix<T>),
    /// Ordinary affine output layer.
    Regular { weight: Tensor<T>, bias: Tensor<T> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    ZeroBias,
    Regular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ExtractorKind {
    Mlp { hidden: usize, features: usize },
    Cnn { channels: [usize; 2], features: usize },
}

impl Default for ExtractorKind {
    fn default() -> Self {
        ExtractorKind::Mlp {
            hidden: 64,
            features: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    pub extractor: ExtractorKind,
    pub head: HeadKind,
    pub classes: usize,
    /// Embedding width N1; `None` means twice the class count.
    pub embedding_width: Option<usize>,
    /// Multiplier applied to cosine scores before the softmax.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 32, 32],
            extractor: ExtractorKind::default(),
            head: HeadKind::ZeroBias,
            classes: 2,
            embedding_width: None,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Batch of network inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs<T> {
    /// Raw samples in the layout the extractor expects.
    Raw(Tensor<T>),
    /// Extractor outputs, N0 × q.
    Features(Tensor<T>),
}

impl<T: Scalar> Inputs<T> {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Raw(t) if t.shape().len() == 4 => t.shape()[0],
            Inputs::Raw(t) | Inputs::Features(t) => t.cols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch by sample index.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(match self {
            Inputs::Raw(t) if t.shape().len() == 4 => {
                let per = t.len() / t.shape()[0];
                let mut data = Vec::with_capacity(per * idx.len());
                for &i in idx {
                    data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = idx.len();
                Inputs::Raw(Tensor::new(shape, data)?)
            }
            Inputs::Raw(t) => Inputs::Raw(t.select_cols(idx)?),
            Inputs::Features(t) => Inputs::Features(t.select_cols(idx)?),
        })
    }
}

/// Inputs paired with one class index per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSet<T> {
    pub inputs: Inputs<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabelledSet<T> {
    pub fn new(inputs: Inputs<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(shape_err(
                "labelled_set",
                format!("{} samples, {} labels", inputs.len(), labels.len()),
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Replaces raw inputs by extractor outputs of `model`.
    pub fn to_features(&self, model: &Model<T>) -> Result<Self> {
        Ok(Self {
            inputs: Inputs::Features(model.features(&self.inputs)?),
            labels: self.labels.clone(),
        })
    }
}

/// Node handles produced by [`Model::forward_graph`].
#[derive(Debug)]
pub struct ForwardNodes {
    /// One entry per model parameter, `None` when it was not placed in the graph.
    pub params: Vec<Option<NodeId>>,
    /// Matching-layer output (cosines, or raw logits for the regular head).
    pub scores: NodeId,
    /// Pre-softmax logits.
    pub logits: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T> {
    pub extractor: Extractor<T>,
    pub embedding: EmbeddingLayer<T>,
    pub head: Head<T>,
    pub temperature: f64,
}

fn uniform_init<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

fn dense_init<T: Scalar, R: Rng>(out: usize, inp: usize, rng: &mut R) -> Dense<T> {
    Dense {
        weight: uniform_init(&[out, inp], inp, rng),
        bias: Tensor::zeros(&[out, 1]),
    }
}

/// Random Gaussian rows of expected unit length.
pub fn random_rows<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let n = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive deviation");
    Tensor::from_fn(&[rows, cols], |_| T::lit(n.sample(rng)))
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.classes < 1 {
            return Err(invalid("model needs at least one class"));
        }
        if !(cfg.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        let [c, h, w] = cfg.input_shape;
        let (extractor, n0) = match cfg.extractor {
            ExtractorKind::Mlp { hidden, features } => (
                Extractor::Mlp(vec![
                    dense_init(hidden, c * h * w, rng),
                    dense_init(features, hidden, rng),
                ]),
                features,
            ),
            ExtractorKind::Cnn { channels, features } => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(invalid("CNN extractor needs spatial extents divisible by 4"));
                }
                let mut convs = Vec::new();
                let mut cin = c;
                for &cout in &channels {
                    convs.push(ConvLayer {
                        kernel: uniform_init(&[cout, cin, 3, 3], cin * 9, rng),
                        bias: Tensor::zeros(&[cout, 1]),
                    });
                    cin = cout;
                }
                let flat = cin * (h / 4) * (w / 4);
                (
                    Extractor::Cnn {
                        input_shape: cfg.input_shape,
                        convs,
                        dense: dense_init(features, flat, rng),
                    },
                    features,
                )
            }
        };
        let n1 = cfg.embedding_width.unwrap_or(2 * cfg.classes);
        let bound = (3.0 / n0 as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let embedding = EmbeddingLayer::new(
            Tensor::from_fn(&[n1, n0], |_| T::lit(dist.sample(rng))),
            Tensor::zeros(&[n1, 1]),
        )?;
        let head = match cfg.head {
            HeadKind::ZeroBias => Head::ZeroBias(FingerprintMatrix::new(random_rows(cfg.classes, n1, rng))?),
            HeadKind::Regular => Head::Regular {
                weight: uniform_init(&[cfg.classes, n1], n1, rng),
                bias: Tensor::zeros(&[cfg.classes, 1]),
            },
        };
        Ok(Self {
            extractor,
            embedding,
            head,
            temperature: cfg.temperature,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_weights().rows()
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            Head::ZeroBias(_) => HeadKind::ZeroBias,
            Head::Regular { .. } => HeadKind::Regular,
        }
    }

    /// Per-class weight rows of the matching layer (fingerprints, or the
    /// regular layer's weight matrix).
    pub fn class_weights(&self) -> &Tensor<T> {
        match &self.head {
            Head::ZeroBias(fp) => &fp.weights,
            Head::Regular { weight, .. } => weight,
        }
    }

    /// Number of parameter tensors belonging to the extractor.
    pub fn extractor_param_count(&self) -> usize {
        match &self.extractor {
            Extractor::Mlp(layers) => 2 * layers.len(),
            Extractor::Cnn { convs, .. } => 2 * convs.len() + 2,
        }
    }

    /// Index of the embedding weight in [`Model::params`]; the embedding bias
    /// and head parameters follow it.
    pub fn embedding_index(&self) -> usize {
        self.extractor_param_count()
    }

    pub fn fingerprint_index(&self) -> usize {
        self.extractor_param_count() + 2
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        match &self.extractor {
            Extractor::Mlp(layers) => {
                for l in layers {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
            }
            Extractor::Cnn { convs, dense, .. } => {
                for c in convs {
                    out.push(&c.kernel);
                    out.push(&c.bias);
                }
                out.push(&dense.weight);
                out.push(&dense.bias);
            }
        }
        out.push(&self.embedding.weight);
        out.push(&self.embedding.bias);
        match &self.head {
            Head::ZeroBias(fp) => out.push(&fp.weights),
            Head::Regular { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        match &mut self.extractor {
            Extractor::Mlp(layers) => {
                for l in layers {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
            }
            Extractor::Cnn { convs, dense, .. } => {
                for c in convs {
                    out.push(&mut c.kernel);
                    out.push(&mut c.bias);
                }
                out.push(&mut dense.weight);
                out.push(&mut dense.bias);
            }
        }
        out.push(&mut self.embedding.weight);
        out.push(&mut self.embedding.bias);
        match &mut self.head {
            Head::ZeroBias(fp) => out.push(&mut fp.weights),
            Head::Regular { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.extractor {
            Extractor::Mlp(layers) => {
                for i in 0..layers.len() {
                    out.push(format!("extractor.dense{i}.weight"));
                    out.push(format!("extractor.dense{i}.bias"));
                }
            }
            Extractor::Cnn { convs, .. } => {
                for i in 0..convs.len() {
                    out.push(format!("extractor.conv{i}.kernel"));
                    out.push(format!("extractor.conv{i}.bias"));
                }
                out.push("extractor.dense.weight".into());
                out.push("extractor.dense.bias".into());
            }
        }
        out.push("embedding.weight".into());
        out.push("embedding.bias".into());
        match &self.head {
            Head::ZeroBias(_) => out.push("head.fingerprints".into()),
            Head::Regular { .. } => {
                out.push("head.weight".into());
                out.push("head.bias".into());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Packs raw samples (each `c·h·w` values, channel-major) into the
    /// layout the extractor consumes.
    pub fn input_tensor(&self, samples: &[&[f32]]) -> Result<Tensor<T>> {
        pack_samples(&self.extractor, samples)
    }

    /// Extractor output (N0 × q) without recording a graph.
    pub fn extract(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.extractor {
            Extractor::Mlp(layers) => {
                let mut h = raw.clone();
                for (i, l) in layers.iter().enumerate() {
                    h = l.weight.matmul(&h)?.add_column(&l.bias)?;
                    if i + 1 < layers.len() {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
            Extractor::Cnn { convs, dense, .. } => {
                let mut h = raw.clone();
                for c in convs {
                    h = tensor::max_pool2(&tensor::conv2d(&h, &c.kernel, &c.bias)?.relu())?.0;
                }
                let f = tensor::flatten_samples(&h)?;
                dense.weight.matmul(&f)?.add_column(&dense.bias)
            }
        }
    }

    pub fn features(&self, inputs: &Inputs<T>) -> Result<Tensor<T>> {
        match inputs {
            Inputs::Raw(t) => self.extract(t),
            Inputs::Features(t) => Ok(t.clone()),
        }
    }

    /// Matching-layer output for extracted features: C × q.
    pub fn scores(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let y1 = self.embedding.forward(features)?;
        match &self.head {
            Head::ZeroBias(fp) => cosine_scores(&fp.weights, &y1),
            Head::Regular { weight, bias } => weight.matmul(&y1)?.add_column(bias),
        }
    }

    /// Scale applied to scores to form logits.
    pub fn logit_scale(&self) -> T {
        match self.head {
            Head::ZeroBias(_) => T::lit(self.temperature),
            Head::Regular { .. } => T::one(),
        }
    }

    pub fn probabilities(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.scores(features)?.scale(self.logit_scale()).softmax_cols()
    }

    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        self.scores(features)?.argmax_cols()
    }

    /// Records the forward pass. Extractor parameters enter the graph only
    /// for raw inputs; `trainable[i] == false` places parameter `i` as a
    /// constant.
    pub fn forward_graph(&self, g: &mut Graph<T>, inputs: &Inputs<T>, trainable: &[bool]) -> Result<ForwardNodes> {
        let params = self.params();
        if trainable.len() != params.len() {
            return Err(shape_err(
                "forward_graph",
                format!("{} trainability flags for {} parameters", trainable.len(), params.len()),
            ));
        }
        let mut ids: Vec<Option<NodeId>> = vec![None; params.len()];
        let place = |g: &mut Graph<T>, i: usize, ids: &mut Vec<Option<NodeId>>| {
            let id = if trainable[i] {
                g.param(params[i].clone())
            } else {
                g.constant(params[i].clone())
            };
            ids[i] = Some(id);
            id
        };
        let features = match inputs {
            Inputs::Features(f) => g.constant(f.clone()),
            Inputs::Raw(x) => {
                let mut h = g.constant(x.clone());
                let mut k = 0;
                match &self.extractor {
                    Extractor::Mlp(layers) => {
                        for i in 0..layers.len() {
                            let w = place(g, k, &mut ids);
                            let b = place(g, k + 1, &mut ids);
                            k += 2;
                            h = g.matmul(w, h)?;
                            h = g.add_column(h, b)?;
                            if i + 1 < layers.len() {
                                h = g.relu(h);
                            }
                        }
                    }
                    Extractor::Cnn { convs, .. } => {
                        for _ in convs {
                            let kern = place(g, k, &mut ids);
                            let b = place(g, k + 1, &mut ids);
                            k += 2;
                            h = g.conv2d(h, kern, b)?;
                            h = g.relu(h);
                            h = g.max_pool2(h)?;
                        }
                        h = g.flatten(h)?;
                        let w = place(g, k, &mut ids);
                        let b = place(g, k + 1, &mut ids);
                        h = g.matmul(w, h)?;
                        h = g.add_column(h, b)?;
                    }
                }
                h
            }
        };
        let e = self.embedding_index();
        let w0 = place(g, e, &mut ids);
        let b0 = place(g, e + 1, &mut ids);
        let (scores, logits) = match &self.head {
            Head::ZeroBias(_) => {
                let w1 = place(g, e + 2, &mut ids);
                let s = zerobias_node(g, features, w0, b0, w1)?;
                (s, g.scale(s, self.logit_scale()))
            }
            Head::Regular { .. } => {
                let w1 = place(g, e + 2, &mut ids);
                let b1 = place(g, e + 3, &mut ids);
                let y = g.matmul(w0, features)?;
                let y = g.add_column(y, b0)?;
                let s = g.matmul(w1, y)?;
                let s = g.add_column(s, b1)?;
                (s, s)
            }
        };
        Ok(ForwardNodes {
            params: ids,
            scores,
            logits,
        })
    }
}

/// Packs channel-major samples for the given extractor.
pub fn pack_samples<T: Scalar>(extractor: &Extractor<T>, samples: &[&[f32]]) -> Result<Tensor<T>> {
    let q = samples.len();
    let d = samples.first().map_or(0, |s| s.len());
    if q == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(invalid("samples must be non-empty and equally sized"));
    }
    match extractor {
        Extractor::Mlp(layers) => {
            let want = layers[0].weight.cols();
            if d != want {
                return Err(shape_err("input", format!("sample length {d}, extractor expects {want}")));
            }
            let mut data = vec![T::zero(); d * q];
            for (j, s) in samples.iter().enumerate() {
                for (i, &v) in s.iter().enumerate() {
                    data[i * q + j] = <T as Scalar>::from_f32(v);
                }
            }
            Tensor::new(vec![d, q], data)
        }
        Extractor::Cnn { input_shape, .. } => {
            let [c, h, w] = *input_shape;
            if d != c * h * w {
                return Err(shape_err("input", format!("sample length {d}, extractor expects {}", c * h * w)));
            }
            let data = samples
                .iter()
                .flat_map(|s| s.iter().map(|&v| <T as Scalar>::from_f32(v)))
                .collect();
            Tensor::new(vec![q, c, h, w], data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: ExtractorKind, head: HeadKind) -> Model<f64> {
        let cfg = ModelConfig {
            input_shape: [2, 4, 4],
            extractor: kind,
            head,
            classes: 3,
            embedding_width: None,
            temperature: 8.0,
        };
        Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn embedding_width_defaults_to_twice_classes() {
        let m = tiny(ExtractorKind::Mlp { hidden: 5, features: 4 }, HeadKind::ZeroBias);
        assert_eq!(m.embedding.width(), 6);
        assert_eq!(m.classes(), 3);
        assert_eq!(m.params().len(), m.param_names().len());
    }

    #[test]
    fn graph_forward_matches_direct() {
        for kind in [
            ExtractorKind::Mlp { hidden: 5, features: 4 },
            ExtractorKind::Cnn { channels: [2, 3], features: 4 },
        ] {
            for head in [HeadKind::ZeroBias, HeadKind::Regular] {
                let m = tiny(kind, head);
                let samples: Vec<Vec<f32>> = (0..3)
                    .map(|s| (0..32).map(|i| ((i * 7 + s * 3) % 11) as f32 / 5.0 - 1.0).collect())
                    .collect();
                let refs: Vec<&[f32]> = samples.iter().map(Vec::as_slice).collect();
                let x = m.input_tensor(&refs).unwrap();
                let feats = m.extract(&x).unwrap();
                let direct = m.scores(&feats).unwrap();
                let mut g = Graph::new();
                let n = m.params().len();
                let fw = m.forward_graph(&mut g, &Inputs::Raw(x), &vec![true; n]).unwrap();
                for (a, b) in g.value(fw.scores).data().iter().zip(direct.data()) {
                    assert!((a - b).abs() < 1e-12, "{kind:?} {head:?}");
                }
            }
        }
    }

    #[test]
    fn wrong_sample_length_rejected() {
        let m = tiny(ExtractorKind::Mlp { hidden: 5, features: 4 }, HeadKind::ZeroBias);
        let s = vec![0.0f32; 31];
        assert!(m.input_tensor(&[&s]).is_err());
    }
}
