//! Differentiable next-token models and the token datasets they train on.
//!
//! The federated loop only sees the [`Model`] trait: a parameter shape,
//! an initializer, and a batched forward/backward pass over token
//! sequences. Two small built-ins stand in for a production language
//! model: a convex bigram softmax and a tanh RNN with tied embeddings.

mod bigram;
mod data;
mod rnn;

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paramvec::{ParamVector, Shape};

pub use bigram::BigramSoftmax;
pub use data::{
    split_sequences, synthesize_dataset, synthesize_users, user_preferences, MarkovSource, SynthesisConfig,
    TokenDataset, UserShard, DEFAULT_UNROLL,
};
pub use rnn::TinyRnn;

/// Totals from one pass over a batch of sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    /// Summed cross-entropy over all predictions.
    pub loss_sum: f64,
    /// Predictions whose argmax equals the next token.
    pub correct: usize,
    pub predictions: usize,
}

impl BatchStats {
    fn merge(&mut self, other: BatchStats) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.predictions += other.predictions;
    }
}

pub trait Model: Sync {
    fn name(&self) -> &str;

    fn vocab_size(&self) -> usize;

    fn shape(&self) -> Shape;

    /// Deterministic initial parameters for `seed`.
    fn init_params(&self, seed: u64) -> ParamVector;

    /// Runs every sequence in `seqs`, predicting token `t + 1` from tokens
    /// `..= t`. When `grad` is given, the gradient of the summed loss is
    /// added into it.
    fn forward_backward(&self, params: &ParamVector, seqs: &[&[u32]], grad: Option<&mut ParamVector>)
        -> Result<BatchStats>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy_top1: f64,
    pub predictions: usize,
}

pub(crate) fn check_params(model: &dyn Model, params: &ParamVector) -> Result<()> {
    let expected = model.shape();
    if params.shape() != expected {
        return Err(Error::shape(format!(
            "{} expects {:?}, got {:?}",
            model.name(),
            expected.0,
            params.shape().0
        )));
    }
    Ok(())
}

pub(crate) fn check_tokens(seq: &[u32], vocab: usize) -> Result<()> {
    match seq.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(Error::config(format!("token {t} outside vocabulary of size {vocab}"))),
        None => Ok(()),
    }
}

/// Numerically stable softmax in place; returns `log(sum(exp(logits)))`.
pub(crate) fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = libm::exp(*l - max);
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    max + libm::log(total)
}

/// First index of the largest value.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean loss over all predictions in `seqs`.
pub fn mean_loss<M: Model + ?Sized>(model: &M, params: &ParamVector, seqs: &[&[u32]]) -> Result<f64> {
    let stats = model.forward_backward(params, seqs, None)?;
    if stats.predictions == 0 {
        return Err(Error::config("batch contains no predictions"));
    }
    Ok(stats.loss_sum / stats.predictions as f64)
}

/// Mean loss and its gradient.
pub fn loss_and_grad<M: Model + ?Sized>(model: &M, params: &ParamVector, seqs: &[&[u32]]) -> Result<(f64, ParamVector)> {
    let mut grad = params.zeros_like();
    let stats = model.forward_backward(params, seqs, Some(&mut grad))?;
    if stats.predictions == 0 {
        return Err(Error::config("batch contains no predictions"));
    }
    let n = stats.predictions as f64;
    grad.scale_assign(1.0 / n);
    Ok((stats.loss_sum / n, grad))
}

/// Mean loss and top-1 accuracy over an evaluation set.
pub fn evaluate<M: Model + ?Sized>(model: &M, params: &ParamVector, seqs: &[&[u32]]) -> Result<Metrics> {
    let mut total = BatchStats::default();
    for chunk in seqs.chunks(256) {
        total.merge(model.forward_backward(params, chunk, None)?);
    }
    if total.predictions == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let n = total.predictions as f64;
    Ok(Metrics {
        loss: total.loss_sum / n,
        accuracy_top1: total.correct as f64 / n,
        predictions: total.predictions,
    })
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences of [`mean_loss`] with step `h`, measured as
/// `||g - g_fd|| / max(||g||, ||g_fd||)` over the whole parameter vector.
pub fn gradient_check<M: Model + ?Sized>(model: &M, params: &ParamVector, seqs: &[&[u32]], h: f64) -> Result<f64> {
    let (_, analytic) = loss_and_grad(model, params, seqs)?;
    let mut probe = params.clone();
    let mut diff_sq = 0.0;
    let mut fd_sq = 0.0;
    for li in 0..params.num_layers() {
        for i in 0..params.layers()[li].values.len() {
            let original = params.layers()[li].values[i];
            probe.layers_mut()[li].values[i] = original + h;
            let up = mean_loss(model, &probe, seqs)?;
            probe.layers_mut()[li].values[i] = original - h;
            let down = mean_loss(model, &probe, seqs)?;
            probe.layers_mut()[li].values[i] = original;
            let fd = (up - down) / (2.0 * h);
            let g = analytic.layers()[li].values[i];
            diff_sq += (g - fd) * (g - fd);
            fd_sq += fd * fd;
        }
    }
    let scale = libm::sqrt(fd_sq).max(analytic.flat_norm());
    Ok(if scale == 0.0 { 0.0 } else { libm::sqrt(diff_sq) / scale })
}

/// The models selectable by name from configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinModel {
    Bigram(BigramSoftmax),
    TinyRnn(TinyRnn),
}

impl BuiltinModel {
    pub fn by_name(name: &str, vocab: usize, hidden: usize) -> Result<Self> {
        match name {
            "bigram_softmax" | "bigram" => Ok(BuiltinModel::Bigram(BigramSoftmax::new(vocab)?)),
            "tiny_rnn" | "rnn" => Ok(BuiltinModel::TinyRnn(TinyRnn::new(vocab, hidden)?)),
            other => Err(Error::config(format!("unknown model {other:?} (expected bigram_softmax or tiny_rnn)"))),
        }
    }

    pub fn names() -> [&'static str; 2] {
        ["bigram_softmax", "tiny_rnn"]
    }

    fn inner(&self) -> &dyn Model {
        match self {
            BuiltinModel::Bigram(m) => m,
            BuiltinModel::TinyRnn(m) => m,
        }
    }
}

impl Model for BuiltinModel {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }

    fn shape(&self) -> Shape {
        self.inner().shape()
    }

    fn init_params(&self, seed: u64) -> ParamVector {
        self.inner().init_params(seed)
    }

    fn forward_backward(&self, params: &ParamVector, seqs: &[&[u32]], grad: Option<&mut ParamVector>) -> Result<BatchStats> {
        self.inner().forward_backward(params, seqs, grad)
    }
}
