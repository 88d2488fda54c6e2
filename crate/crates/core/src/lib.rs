//! Zero-bias cosine classifiers, fingerprint conflict metrics and
//! channel-separated class-incremental learning for wireless device
//! identification.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the harness uses throughout.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod csil;
pub mod doc;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod signal;
pub mod tensor;
pub mod zerobias;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type Model = model::Model<f64>;
pub type LabelledSet = model::LabelledSet<f64>;
pub type Inputs = model::Inputs<f64>;
pub type FingerprintMatrix = zerobias::FingerprintMatrix<f64>;
pub type EmbeddingLayer = zerobias::EmbeddingLayer<f64>;
pub type StageContext = csil::StageContext<f64>;
pub type FisherMatrix = csil::FisherMatrix<f64>;
pub type Sgd = optim::Sgd<f64>;
