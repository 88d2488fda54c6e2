//! Stage-wise growth of the zero-bias head with channel separation,
//! gradient masks, and the cross-entropy + distillation + consolidation loss.
//!
//! At stage `k` the embedding gains `2 · new_classes` rows (its channels)
//! and the fingerprint matrix grows block-diagonally:
//!
//! ```text
//!            old channels   new channels
//! old rows [   W1_prev    |      0      ]
//! new rows [      0       |   W1_new    ]
//! ```
//!
//! The zero blocks never receive updates, so fingerprints of different
//! stages have disjoint supports and are orthogonal throughout.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doc::degree_of_conflict;
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Head, Inputs, LabelledSet, Model};
use crate::optim::{GradientMask, Sgd, SgdConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::zerobias::{EmbeddingLayer, FingerprintMatrix};

/// Coefficients of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub kd: f64,
    pub ewc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            kd: 1.0,
            ewc: 1.0,
        }
    }
}

/// How an incremental stage grows the head and which terms it trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecipe {
    /// Give each stage its own embedding channels and block-diagonal
    /// fingerprints; otherwise new fingerprints are full-width rows and the
    /// embedding stays frozen.
    pub channel_separation: bool,
    /// Let earlier fingerprints move (their own channels only under
    /// channel separation).
    pub train_old_fingerprints: bool,
    pub kd: bool,
    pub ewc: bool,
}

impl StageRecipe {
    pub const CSIL: StageRecipe = StageRecipe {
        channel_separation: true,
        train_old_fingerprints: true,
        kd: true,
        ewc: true,
    };
}

/// Classes and embedding channels introduced by one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub classes: Range<usize>,
    /// Embedding rows added by the stage; empty when it added none.
    pub channels: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub stages: Vec<StageSpan>,
}

impl ChannelMap {
    pub fn classes(&self) -> usize {
        self.stages.last().map_or(0, |s| s.classes.end)
    }

    pub fn channels(&self) -> usize {
        self.stages.iter().map(|s| s.channels.end).max().unwrap_or(0)
    }

    pub fn stage_of_class(&self, class: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.classes.contains(&class))
    }
}

/// Non-negative per-entry weights, one tensor per model parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FisherMatrix<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> FisherMatrix<T> {
    pub fn new(values: Vec<Tensor<T>>) -> Result<Self> {
        for (i, t) in values.iter().enumerate() {
            if let Some(v) = t.data().iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
                return Err(invalid(format!("Fisher entry {v} in parameter {i} is negative or not finite")));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    /// Embeds each tensor in the top-left corner of a zero tensor of the
    /// matching target shape.
    pub fn padded_to(&self, shapes: &[Vec<usize>]) -> Result<Self> {
        Ok(Self {
            values: pad_all(&self.values, shapes)?,
        })
    }
}

fn pad_top_left<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let (r, c) = t.dims2()?;
    if shape.len() != 2 || shape[0] < r || shape[1] < c {
        return Err(shape_err("pad", format!("cannot place {:?} inside {shape:?}", t.shape())));
    }
    let mut out = Tensor::zeros(shape);
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, t.at(i, j));
        }
    }
    Ok(out)
}

fn pad_all<T: Scalar>(ts: &[Tensor<T>], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    if ts.len() != shapes.len() {
        return Err(shape_err("pad", format!("{} tensors for {} shapes", ts.len(), shapes.len())));
    }
    ts.iter().zip(shapes).map(|(t, s)| pad_top_left(t, s)).collect()
}

/// Everything a stage needs besides the model and its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StageContext<T> {
    pub stage: usize,
    pub recipe: StageRecipe,
    pub channel_map: ChannelMap,
    pub masks: Vec<GradientMask>,
    /// Model at the end of the previous stage.
    pub snapshot: Option<Model<T>>,
    /// Previous parameters padded with zeros to the current shapes.
    pub anchor: Vec<Tensor<T>>,
    /// Previous-stage Fisher values padded with zeros to the current shapes.
    pub fisher: Option<FisherMatrix<T>>,
}

impl<T: Scalar> StageContext<T> {
    /// Stage 0: every parameter trainable, no previous model.
    pub fn initial(model: &Model<T>, recipe: StageRecipe) -> Self {
        Self {
            stage: 0,
            recipe,
            channel_map: ChannelMap {
                stages: vec![StageSpan {
                    classes: 0..model.classes(),
                    channels: 0..model.embedding.width(),
                }],
            },
            masks: model.params().iter().map(|p| GradientMask::ones(p.shape())).collect(),
            snapshot: None,
            anchor: Vec::new(),
            fisher: None,
        }
    }

    pub fn span(&self) -> &StageSpan {
        &self.channel_map.stages[self.stage]
    }

    /// Number of classes learned before this stage.
    pub fn old_classes(&self) -> usize {
        self.span().classes.start
    }
}

/// Appends `rows_new` freshly initialized rows to the embedding; the bias
/// grows by zeros.
pub fn expand_embedding<T: Scalar, R: Rng>(
    layer: &EmbeddingLayer<T>,
    rows_new: usize,
    rng: &mut R,
) -> Result<EmbeddingLayer<T>> {
    if rows_new == 0 {
        return Err(invalid("embedding expansion needs at least one new row"));
    }
    let n0 = layer.input_width();
    let bound = (3.0 / n0 as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let fresh = Tensor::from_fn(&[rows_new, n0], |_| T::lit(dist.sample(rng)));
    let weight = Tensor::vstack(&[&layer.weight, &fresh])?;
    let bias = Tensor::vstack(&[&layer.bias, &Tensor::zeros(&[rows_new, 1])])?;
    EmbeddingLayer::new(weight, bias)
}

/// Block-diagonal growth: `prev` keeps its place, `new_block` occupies the
/// new rows × new channels, everything else is exactly zero.
pub fn expand_similarity<T: Scalar>(
    prev: &FingerprintMatrix<T>,
    new_block: &Tensor<T>,
    rows_new: usize,
) -> Result<FingerprintMatrix<T>> {
    let (cn, nn) = new_block.dims2()?;
    if nn != rows_new {
        return Err(shape_err(
            "expand_similarity",
            format!("new fingerprints have {nn} channels, embedding grew by {rows_new}"),
        ));
    }
    let (cp, np) = (prev.classes(), prev.width());
    let mut w = Tensor::zeros(&[cp + cn, np + nn]);
    for i in 0..cp {
        for j in 0..np {
            w.set(i, j, prev.weights.at(i, j));
        }
    }
    for i in 0..cn {
        for j in 0..nn {
            w.set(cp + i, np + j, new_block.at(i, j));
        }
    }
    FingerprintMatrix::new(w)
}

/// Appends full-width fingerprint rows.
pub fn append_fingerprints<T: Scalar>(prev: &FingerprintMatrix<T>, rows: &Tensor<T>) -> Result<FingerprintMatrix<T>> {
    if rows.dims2()?.1 != prev.width() {
        return Err(shape_err(
            "append_fingerprints",
            format!("rows of width {} for fingerprints of width {}", rows.cols(), prev.width()),
        ));
    }
    FingerprintMatrix::new(Tensor::vstack(&[&prev.weights, rows])?)
}

/// One fingerprint per class in `classes`: the mean of that class's columns
/// of `embedded`. A mean that is numerically zero is replaced by a random
/// direction of typical column length.
pub fn init_new_fingerprints<T: Scalar, R: Rng>(
    embedded: &Tensor<T>,
    labels: &[usize],
    classes: Range<usize>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (n, q) = embedded.dims2()?;
    if labels.len() != q {
        return Err(shape_err("init_new_fingerprints", format!("{q} columns, {} labels", labels.len())));
    }
    let norms = embedded.col_norms()?;
    let mut rows = Vec::with_capacity(classes.len());
    for c in classes {
        let cols: Vec<usize> = (0..q).filter(|&j| labels[j] == c).collect();
        if cols.is_empty() {
            return Err(invalid(format!("class {c} has no samples to initialize its fingerprint")));
        }
        let k = T::lit(cols.len() as f64);
        let mean: Vec<T> = (0..n).map(|i| cols.iter().map(|&j| embedded.at(i, j)).sum::<T>() / k).collect();
        let typical = cols.iter().map(|&j| norms[j]).sum::<T>() / k;
        let len = mean.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if len > typical * T::lit(1e-6) && len > T::zero() {
            rows.push(mean);
        } else {
            let target = if typical > T::zero() { typical } else { T::one() };
            let r = crate::model::random_rows::<T, _>(1, n, rng);
            let rl = r.data().iter().map(|v| *v * *v).sum::<T>().sqrt();
            rows.push(r.data().iter().map(|&v| v / rl * target).collect());
        }
    }
    Tensor::from_rows(&rows)
}

/// Batch mean of the squared L2 distance between two response matrices
/// (classes × batch).
pub fn kd_loss<T: Scalar>(prev: &Tensor<T>, cur: &Tensor<T>) -> Result<T> {
    if prev.shape() != cur.shape() {
        return Err(shape_err("kd_loss", format!("{:?} vs {:?}", prev.shape(), cur.shape())));
    }
    let q = T::lit(prev.cols() as f64);
    Ok(prev.sub(cur)?.sq_norm() / q)
}

/// `½ Σ F (θ − θ_prev)²` over all parameter tensors.
pub fn ewc_loss<T: Scalar>(params: &[&Tensor<T>], prev: &[Tensor<T>], fisher: &FisherMatrix<T>) -> Result<T> {
    if params.len() != prev.len() || params.len() != fisher.values.len() {
        return Err(shape_err(
            "ewc_loss",
            format!("{} params, {} anchors, {} Fisher tensors", params.len(), prev.len(), fisher.values.len()),
        ));
    }
    let mut total = T::zero();
    for ((p, a), f) in params.iter().zip(prev).zip(&fisher.values) {
        if p.shape() != a.shape() || p.shape() != f.shape() {
            return Err(shape_err(
                "ewc_loss",
                format!("param {:?}, anchor {:?}, Fisher {:?}", p.shape(), a.shape(), f.shape()),
            ));
        }
        for ((&x, &y), &w) in p.data().iter().zip(a.data()).zip(f.data()) {
            let d = x - y;
            total += w * d * d;
        }
    }
    Ok(total * T::lit(0.5))
}

/// Graph form of [`kd_loss`] on the first `prev.rows()` rows of `scores`.
pub fn kd_node<T: Scalar>(g: &mut Graph<T>, scores: NodeId, prev: &Tensor<T>) -> Result<NodeId> {
    let old = g.slice_rows(scores, 0, prev.rows())?;
    let p = g.constant(prev.clone());
    let d = g.sub(old, p)?;
    let s = g.sq_norm(d);
    Ok(g.scale(s, T::one() / T::lit(prev.cols() as f64)))
}

/// Graph form of one parameter's contribution `Σ F (θ − θ_prev)²`, without
/// the ½.
pub fn ewc_node<T: Scalar>(g: &mut Graph<T>, param: NodeId, anchor: &Tensor<T>, fisher: &Tensor<T>) -> Result<NodeId> {
    let a = g.constant(anchor.clone());
    let f = g.constant(fisher.clone());
    let d = g.sub(param, a)?;
    let d2 = g.mul(d, d)?;
    let w = g.mul(f, d2)?;
    Ok(g.sum(w))
}

/// Squared gradient of the log-probability of the predicted class, averaged
/// over the samples of `inputs`. With extracted features as inputs the
/// extractor is not in the graph and its entries are zero.
pub fn estimate_fisher<T: Scalar>(model: &Model<T>, inputs: &Inputs<T>) -> Result<FisherMatrix<T>> {
    let q = inputs.len();
    if q == 0 {
        return Err(invalid("Fisher estimation needs at least one sample"));
    }
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let trainable = vec![true; shapes.len()];
    const CHUNK: usize = 16;
    let starts: Vec<usize> = (0..q).step_by(CHUNK).collect();
    let partial: Vec<Vec<Tensor<T>>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc: Vec<Tensor<T>> = shapes.iter().map(|sh| Tensor::zeros(sh)).collect();
            for i in s..(s + CHUNK).min(q) {
                let x = inputs.select(&[i])?;
                let mut g = Graph::new();
                let fw = model.forward_graph(&mut g, &x, &trainable)?;
                let pred = g.value(fw.logits).argmax_cols()?[0];
                let nll = g.softmax_cross_entropy(fw.logits, &[pred])?;
                let grads = g.backward(nll)?;
                for (a, id) in acc.iter_mut().zip(&fw.params) {
                    if let Some(gr) = id.and_then(|id| grads.get(id)) {
                        for (v, &d) in a.data_mut().iter_mut().zip(gr.data()) {
                            *v += d * d;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<Tensor<T>> = shapes.iter().map(|sh| Tensor::zeros(sh)).collect();
    for part in &partial {
        for (t, p) in total.iter_mut().zip(part) {
            t.add_assign(p)?;
        }
    }
    let inv = T::one() / T::lit(q as f64);
    FisherMatrix::new(total.into_iter().map(|t| t.scale(inv)).collect())
}

/// Masks for stage `stage` of `map` under `recipe`.
pub fn build_masks<T: Scalar>(
    model: &Model<T>,
    map: &ChannelMap,
    stage: usize,
    recipe: &StageRecipe,
) -> Result<Vec<GradientMask>> {
    let params = model.params();
    if stage == 0 {
        return Ok(params.iter().map(|p| GradientMask::ones(p.shape())).collect());
    }
    let span = map
        .stages
        .get(stage)
        .ok_or_else(|| invalid(format!("stage {stage} missing from channel map")))?;
    let mut masks: Vec<GradientMask> = params.iter().map(|p| GradientMask::zeros(p.shape())).collect();
    let e = model.embedding_index();
    let f = model.fingerprint_index();
    if !matches!(model.head, Head::ZeroBias(_)) {
        return Err(invalid("incremental stages need the zero-bias head"));
    }
    if recipe.channel_separation {
        masks[e].set_rows(span.channels.clone(), true);
        masks[e + 1].set_rows(span.channels.clone(), true);
        for (j, s) in map.stages.iter().enumerate().take(stage + 1) {
            if j == stage || recipe.train_old_fingerprints {
                masks[f].set_block(s.classes.clone(), s.channels.clone(), true);
            }
        }
    } else {
        let width = model.embedding.width();
        masks[f].set_block(span.classes.clone(), 0..width, true);
        if recipe.train_old_fingerprints {
            masks[f].set_block(0..span.classes.start, 0..width, true);
        }
    }
    Ok(masks)
}

fn check_labels(labels: &[usize], classes: &Range<usize>) -> Result<()> {
    match labels.iter().find(|l| !classes.contains(l)) {
        Some(l) => Err(invalid(format!("label {l} outside the stage classes {classes:?}"))),
        None => Ok(()),
    }
}

/// Grows `model` for `new_classes` classes whose training samples are
/// `new_train`, and builds the context for the new stage. `fisher_set` is
/// the previous stage's validation data.
pub fn prepare_stage<T: Scalar, R: Rng>(
    model: &Model<T>,
    prev: &StageContext<T>,
    new_classes: usize,
    new_train: &LabelledSet<T>,
    fisher_set: &Inputs<T>,
    recipe: StageRecipe,
    rng: &mut R,
) -> Result<(Model<T>, StageContext<T>)> {
    let fp = match &model.head {
        Head::ZeroBias(fp) => fp,
        Head::Regular { .. } => return Err(invalid("incremental stages need the zero-bias head")),
    };
    if new_classes == 0 {
        return Err(invalid("a stage must introduce at least one class"));
    }
    let c_prev = model.classes();
    let classes = c_prev..c_prev + new_classes;
    check_labels(&new_train.labels, &classes)?;
    let fisher = if recipe.ewc {
        Some(estimate_fisher(model, fisher_set)?)
    } else {
        None
    };

    let feats = model.features(&new_train.inputs)?;
    let mut next = model.clone();
    let channels = if recipe.channel_separation {
        let rows_new = 2 * new_classes;
        let n_prev = model.embedding.width();
        next.embedding = expand_embedding(&model.embedding, rows_new, rng)?;
        let y = next.embedding.forward(&feats)?.slice_rows(n_prev, n_prev + rows_new)?;
        let block = init_new_fingerprints(&y, &new_train.labels, classes.clone(), rng)?;
        next.head = Head::ZeroBias(expand_similarity(fp, &block, rows_new)?);
        n_prev..n_prev + rows_new
    } else {
        let y = next.embedding.forward(&feats)?;
        let rows = init_new_fingerprints(&y, &new_train.labels, classes.clone(), rng)?;
        next.head = Head::ZeroBias(append_fingerprints(fp, &rows)?);
        let w = model.embedding.width();
        w..w
    };

    let mut map = prev.channel_map.clone();
    map.stages.push(StageSpan { classes, channels });
    let stage = prev.stage + 1;
    let shapes: Vec<Vec<usize>> = next.params().iter().map(|p| p.shape().to_vec()).collect();
    let anchor: Vec<Tensor<T>> = model.params().into_iter().cloned().collect();
    let ctx = StageContext {
        stage,
        recipe,
        masks: build_masks(&next, &map, stage, &recipe)?,
        channel_map: map,
        snapshot: Some(model.clone()),
        anchor: pad_all(&anchor, &shapes)?,
        fisher: fisher.map(|f| f.padded_to(&shapes)).transpose()?,
    };
    Ok((next, ctx))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub weights: LossWeights,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            sgd: SgdConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

/// Loss terms of one optimizer step, unweighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub ewc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means of the step losses.
    pub loss: StepLoss,
    pub doc: Option<f64>,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLoss>,
    /// Largest `|total − (w_ce·ce + w_kd·kd + w_ewc·ewc)|` over all steps.
    pub max_decomposition_error: f64,
}

/// Top-1 accuracy in percent.
pub fn accuracy<T: Scalar>(model: &Model<T>, set: &LabelledSet<T>) -> Result<f64> {
    if set.is_empty() {
        return Err(invalid("accuracy of an empty set"));
    }
    let pred = model.predict(&model.features(&set.inputs)?)?;
    let hits = pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / set.len() as f64)
}

/// Trains one stage. Stage 0 uses cross-entropy only; later stages add the
/// distillation and consolidation terms the recipe enables. Parameters
/// closed by `ctx.masks` are never written.
pub fn train_stage<T: Scalar, R: Rng>(
    model: &Model<T>,
    ctx: &StageContext<T>,
    train: &LabelledSet<T>,
    val: Option<&LabelledSet<T>>,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<(Model<T>, StageLog)> {
    if train.is_empty() {
        return Err(invalid("stage has no training data"));
    }
    if opts.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    check_labels(&train.labels, &ctx.span().classes)?;
    let params = model.params();
    if ctx.masks.len() != params.len() || ctx.masks.iter().zip(&params).any(|(m, p)| m.shape() != p.shape()) {
        return Err(shape_err("train_stage", "masks do not match the model parameters".to_string()));
    }
    let mut log = StageLog {
        stage: ctx.stage,
        ..StageLog::default()
    };
    let mut model = model.clone();
    if opts.epochs == 0 {
        return Ok((model, log));
    }
    let trainable: Vec<bool> = ctx.masks.iter().map(|m| !m.is_frozen()).collect();
    let extractor_frozen = !trainable[..model.extractor_param_count()].iter().any(|&t| t);

    // a frozen extractor maps each sample to fixed features
    let (train, val) = if extractor_frozen {
        (train.to_features(&model)?, val.map(|v| v.to_features(&model)).transpose()?)
    } else {
        (train.clone(), val.cloned())
    };

    let kd_prev = match (&ctx.snapshot, ctx.stage > 0 && ctx.recipe.kd) {
        (Some(prev), true) => {
            let s = prev.scores(&prev.features(&train.inputs)?)?;
            Some(s.slice_rows(0, ctx.old_classes())?)
        }
        _ => None,
    };
    let ewc = match (&ctx.fisher, ctx.stage > 0 && ctx.recipe.ewc) {
        (Some(f), true) => {
            if ctx.anchor.len() != params.len() {
                return Err(shape_err("train_stage", "anchor does not match the model".to_string()));
            }
            Some(f)
        }
        _ => None,
    };
    drop(params);

    let w = opts.weights;
    let mut sgd = Sgd::new(opts.sgd)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut sums = StepLoss {
            total: 0.0,
            ce: 0.0,
            kd: 0.0,
            ewc: 0.0,
        };
        let mut batches = 0usize;
        for idx in order.chunks(opts.batch_size) {
            let batch = train.select(idx)?;
            let mut g = Graph::new();
            let fw = model.forward_graph(&mut g, &batch.inputs, &trainable)?;
            let ce = g.softmax_cross_entropy(fw.logits, &batch.labels)?;
            let mut total = g.scale(ce, T::lit(w.ce));
            let kd = match &kd_prev {
                Some(prev) => {
                    let node = kd_node(&mut g, fw.scores, &prev.select_cols(idx)?)?;
                    let weighted = g.scale(node, T::lit(w.kd));
                    total = g.add(total, weighted)?;
                    Some(node)
                }
                None => None,
            };
            let ewc_term = match ewc {
                Some(f) => {
                    let mut acc: Option<NodeId> = None;
                    for (i, id) in fw.params.iter().enumerate() {
                        let Some(id) = *id else { continue };
                        if !trainable[i] {
                            continue;
                        }
                        let term = ewc_node(&mut g, id, &ctx.anchor[i], &f.values()[i])?;
                        acc = Some(match acc {
                            Some(a) => g.add(a, term)?,
                            None => term,
                        });
                    }
                    match acc {
                        Some(a) => {
                            let half = g.scale(a, T::lit(0.5));
                            let weighted = g.scale(half, T::lit(w.ewc));
                            total = g.add(total, weighted)?;
                            Some(half)
                        }
                        None => None,
                    }
                }
                None => None,
            };
            let val_of = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).item().to_f64_lossy());
            let step = StepLoss {
                total: val_of(Some(total)),
                ce: val_of(Some(ce)),
                kd: val_of(kd),
                ewc: val_of(ewc_term),
            };
            let recomposed = w.ce * step.ce + w.kd * step.kd + w.ewc * step.ewc;
            log.max_decomposition_error = log.max_decomposition_error.max((step.total - recomposed).abs());
            if !step.total.is_finite() {
                return Err(Error::InvalidData(format!("loss became {} at epoch {epoch}", step.total)));
            }
            let grads = g.backward(total)?;
            let grad_refs: Vec<Option<&Tensor<T>>> =
                fw.params.iter().map(|id| id.and_then(|id| grads.get(id))).collect();
            sgd.step_partial(&mut model.params_mut(), &grad_refs, &ctx.masks)?;
            sums.total += step.total;
            sums.ce += step.ce;
            sums.kd += step.kd;
            sums.ewc += step.ewc;
            batches += 1;
            log.steps.push(step);
        }
        let n = batches as f64;
        let doc = match &model.head {
            Head::ZeroBias(fp) if fp.classes() >= 2 => Some(degree_of_conflict(&fp.weights)?),
            Head::Regular { weight, .. } if weight.rows() >= 2 => Some(degree_of_conflict(weight)?),
            _ => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            loss: StepLoss {
                total: sums.total / n,
                ce: sums.ce / n,
                kd: sums.kd / n,
                ewc: sums.ewc / n,
            },
            doc,
            train_acc: accuracy(&model, &train)?,
            val_acc: val.as_ref().map(|v| accuracy(&model, v)).transpose()?,
        });
    }
    Ok((model, log))
}
