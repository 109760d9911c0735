//! Mini-batch AdamW training with deterministic shuffling and dropout.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::Model;
use crate::optim::adamw_step;
use crate::params::ParamStore;
use crate::uffm::predict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches, weighted by batch size.
    pub train_loss: f64,
    /// Eval-mode metrics on the training set, when requested.
    pub train: Option<MetricsReport>,
    /// Eval-mode BCE on the validation set.
    pub val_loss: f64,
    pub val: MetricsReport,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    /// Also evaluate the training set after every epoch.
    pub eval_train: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { eval_train: false }
    }
}

/// Probabilities, predictions and metrics on a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub probs: Vec<f64>,
    pub preds: Vec<u8>,
    pub report: MetricsReport,
}

pub fn evaluate(model: &Model, store: &ParamStore, samples: &[SyntheticSample]) -> Result<Evaluation> {
    let probs = model.predict_probs(store, samples)?;
    let preds: Vec<u8> = probs.iter().map(|&p| predict(p)).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let report = compute_metrics(&preds, &probs, &labels)?;
    Ok(Evaluation { probs, preds, report })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Sample order of `epoch` for `n` samples.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, u64::MAX));
    idx.shuffle(&mut rng);
    idx
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    batch: &[SyntheticSample],
    graph_seed: u64,
) -> Result<f64> {
    let encoded = model.encode(batch)?;
    let mut g = Graph::new(Mode::Train, graph_seed);
    let out = model.forward(&mut g, store, &encoded)?;
    let loss = g.bce(out.probs, &encoded.labels)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss, store)?;
    adamw_step(store, &model.cfg.adamw);
    for (name, t) in g.take_buffer_updates() {
        store.set_value(&name, t)?;
    }
    Ok(value)
}

/// One pass over `train_set` in the order of `epoch`; returns the mean
/// train-mode loss weighted by batch size.
pub fn train_epoch(model: &Model, store: &mut ParamStore, train_set: &[SyntheticSample], epoch: usize) -> Result<f64> {
    if train_set.is_empty() {
        return Err(Error::Input("training set must be non-empty".into()));
    }
    let cfg = &model.cfg;
    let order = epoch_order(cfg.seed, epoch, train_set.len());
    let mut total = 0.0;
    for (b, idx) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        let batch: Vec<SyntheticSample> = idx.iter().map(|&i| train_set[i].clone()).collect();
        let loss = train_step(model, store, &batch, mix(cfg.seed, epoch as u64, b as u64))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b });
        }
        total += loss * batch.len() as f64;
    }
    Ok(total / train_set.len() as f64)
}

/// Trains for `model.cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train_set: &[SyntheticSample],
    val_set: &[SyntheticSample],
    opts: TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut history = Vec::with_capacity(model.cfg.epochs);
    for epoch in 0..model.cfg.epochs {
        let train_loss = train_epoch(model, store, train_set, epoch)?;
        let train = if opts.eval_train {
            Some(evaluate(model, store, train_set)?.report)
        } else {
            None
        };
        let val = evaluate(model, store, val_set)?.report;
        let rec = EpochRecord {
            epoch,
            train_loss,
            train,
            val_loss: val.log_loss,
            val,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}
