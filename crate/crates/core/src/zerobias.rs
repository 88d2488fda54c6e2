//! Zero-bias classification head.
//!
//! The final dense layer is split into an affine embedding `Y1 = W0·X + b`
//! and a bias-free matching layer whose rows are class fingerprints. Scores
//! are the cosine between every fingerprint and every embedded column:
//! `RU(W1) · CU(Y1)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine feature embedding `W0` (N1×N0) and bias `b` (N1×1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EmbeddingLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> EmbeddingLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (n1, _) = weight.dims2()?;
        if bias.shape() != [n1, 1] {
            return Err(shape_err(
                "embedding",
                format!("bias {:?} for {n1} rows", bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    /// Embedding width N1.
    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    /// Input feature count N0.
    pub fn input_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.weight.matmul(x)?.add_column(&self.bias)
    }
}

/// Class fingerprints, one row per known class (C×N1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FingerprintMatrix<T> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> FingerprintMatrix<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        weights.dims2()?;
        Ok(Self { weights })
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn width(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.weights.row(i)
    }
}

/// Scales each row to unit L2 norm.
pub fn unit_normalize_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let norms = m.row_norms()?;
    if let Some(i) = norms.iter().position(|&n| n == T::zero()) {
        return Err(Error::ZeroRow(i));
    }
    let c = m.cols();
    let mut out = m.clone();
    for (row, &n) in out.data_mut().chunks_mut(c).zip(&norms) {
        for v in row {
            *v /= n;
        }
    }
    Ok(out)
}

/// Scales each column to unit L2 norm.
pub fn unit_normalize_cols<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let norms = m.col_norms()?;
    if let Some(j) = norms.iter().position(|&n| n == T::zero()) {
        return Err(Error::ZeroColumn(j));
    }
    let c = m.cols();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (v, &n) in row.iter_mut().zip(&norms) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Cosine similarity of every fingerprint with every embedded feature
/// column. Returns a C×q matrix with entries in [−1, 1].
pub fn zerobias_forward<T: Scalar>(
    x: &Tensor<T>,
    layer: &EmbeddingLayer<T>,
    fp: &FingerprintMatrix<T>,
) -> Result<Tensor<T>> {
    if fp.width() != layer.width() {
        return Err(shape_err(
            "zerobias_forward",
            format!("fingerprint width {} vs embedding width {}", fp.width(), layer.width()),
        ));
    }
    let y1 = layer.forward(x)?;
    cosine_scores(&fp.weights, &y1)
}

/// `RU(W1) · CU(Y1)`.
pub fn cosine_scores<T: Scalar>(fingerprints: &Tensor<T>, embedded: &Tensor<T>) -> Result<Tensor<T>> {
    let s = unit_normalize_rows(fingerprints)?.matmul(&unit_normalize_cols(embedded)?)?;
    // rounding can push |cos| a hair past one
    Ok(s.map(|v| v.max(-T::one()).min(T::one())))
}

/// Graph version of [`zerobias_forward`] for training.
pub fn zerobias_node<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
    fingerprints: NodeId,
) -> Result<NodeId> {
    let y = g.matmul(weight, x)?;
    let y = g.add_column(y, bias)?;
    let y = g.col_normalize(y)?;
    let f = g.row_normalize(fingerprints)?;
    g.matmul(f, y)
}

/// Default logit scale for cosine scores. At 4 a 10-class head settles
/// on the simplex layout within 50 epochs; 8 stalls short of it.
pub const DEFAULT_TEMPERATURE: f64 = 4.0;

/// Softmax of `temperature · scores` per column.
pub fn classify<T: Scalar>(scores: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    scores.scale(temperature).softmax_cols()
}

/// Ordinary affine output layer `W·Y1 + b` on top of the embedding.
pub fn regular_dense_forward<T: Scalar>(
    x: &Tensor<T>,
    layer: &EmbeddingLayer<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    weight.matmul(&layer.forward(x)?)?.add_column(bias)
}
