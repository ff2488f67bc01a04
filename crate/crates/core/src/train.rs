//! Epoch loop for the multi-view model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{Batch, Sample, Standardizer};
use crate::graph::Graph;
use crate::metrics::{evaluate, Metrics};
use crate::model::{bce_loss, ModelConfig, MvModel};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;

/// RNG streams derived from one seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Contract(
                "batch, patience and max_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_auc: Option<f64>,
    pub val_rmse: f64,
    pub secs: f64,
}

/// Hooks for wall-clock timing and progress reporting; the core crate has
/// no clock of its own.
pub trait Monitor {
    fn now(&mut self) -> f64 {
        0.0
    }

    fn epoch(&mut self, _record: &EpochRecord) {}
}

impl Monitor for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    /// Validation AUC of that epoch.
    pub best_val: Option<f64>,
}

/// A seeded permutation of `0..n` cut into batches.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Tracks the best validation score and the parameters that achieved it.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStopping {
    patience: usize,
    pub best: Option<(f64, usize, ParamStore)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Returns `true` when training should stop.
    pub fn observe(&mut self, score: f64, epoch: usize, store: &ParamStore) -> bool {
        let improved = match &self.best {
            None => true,
            Some((b, _, _)) => score > *b,
        };
        if improved {
            self.best = Some((score, epoch, store.clone()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

/// Validation score used for early stopping: AUC, or `-rmse` when the split
/// holds one class only.
pub(crate) fn selection_score(m: &Metrics) -> f64 {
    m.auc.unwrap_or(-m.rmse)
}

pub(crate) fn divergence(epoch: usize, batch: usize, loss: f64, store: &ParamStore) -> Error {
    let mut norms = String::new();
    for (_, p) in store.iter() {
        if !norms.is_empty() {
            norms.push_str(", ");
        }
        norms.push_str(&format!("{}={:.4e}", p.name, p.value.frobenius_norm()));
    }
    Error::Diverged(format!(
        "epoch {epoch}, batch {batch}: loss {loss}; parameter norms: {norms}"
    ))
}

pub(crate) fn labels_of(samples: &[Sample]) -> Vec<f64> {
    samples.iter().map(|s| s.label as f64).collect()
}

/// Trains `model` in place. On return the model holds the parameters of
/// the best validation epoch.
pub fn train_mv(
    model: &mut MvModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    monitor: &mut impl Monitor,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut rng = seeded(cfg.seed, STREAM_SHUFFLE);
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let mut stop = EarlyStopping::new(cfg.patience);
    let val_labels = labels_of(val);
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let started = monitor.now();
        let mut total = 0.0;
        for (b, idx) in shuffled_batches(train.len(), cfg.batch, &mut rng).into_iter().enumerate() {
            let rows: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::build(&rows, &model.stats, model.net.config.vocab)?;
            let mut g = Graph::new();
            let out = model.net.forward(&mut g, &model.store, &batch, None)?;
            let loss = bce_loss(&mut g, out.logits, &batch.labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(divergence(epoch, b, value, &model.store));
            }
            let grads = g.backward(loss)?;
            let norm = adam.step(&mut model.store, &grads)?;
            if !norm.is_finite() {
                return Err(divergence(epoch, b, norm, &model.store));
            }
            total += value * rows.len() as f64;
        }
        let metrics = evaluate(&model.predict(val)?, &val_labels)?;
        let record = EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            val_auc: metrics.auc,
            val_rmse: metrics.rmse,
            secs: monitor.now() - started,
        };
        monitor.epoch(&record);
        history.push(record);
        if stop.observe(selection_score(&metrics), epoch, &model.store) {
            break;
        }
    }
    let (_, best_epoch, store) = stop.best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        best_val: history[best_epoch - 1].val_auc,
        history,
        best_epoch,
    })
}

/// Builds a model with statistics fitted on `train` and trains it.
pub fn fit_mv(
    config: ModelConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    monitor: &mut impl Monitor,
) -> Result<(MvModel, TrainOutcome)> {
    let stats = Standardizer::fit(train);
    let mut model = MvModel::new(config, stats, &mut seeded(cfg.seed, STREAM_INIT))?;
    let outcome = train_mv(&mut model, train, val, cfg, monitor)?;
    Ok((model, outcome))
}

/// Test-split metrics of any scorer.
pub fn evaluate_split(
    samples: &[Sample],
    predict: impl FnOnce(&[Sample]) -> Result<Vec<f64>>,
) -> Result<Metrics> {
    let scores = predict(samples)?;
    evaluate(&scores, &labels_of(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_a_seeded_permutation() {
        let a = shuffled_batches(10, 3, &mut seeded(4, STREAM_SHUFFLE));
        let b = shuffled_batches(10, 3, &mut seeded(4, STREAM_SHUFFLE));
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 1]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let c = shuffled_batches(10, 3, &mut seeded(5, STREAM_SHUFFLE));
        assert_ne!(a, c);
    }

    #[test]
    fn early_stopping_keeps_best() {
        let mut store = ParamStore::new();
        let id = store.add("w", crate::Tensor::scalar(0.0));
        let mut stop = EarlyStopping::new(2);
        let scores = [0.6, 0.7, 0.65, 0.69];
        let mut stopped_at = 0;
        for (e, &s) in scores.iter().enumerate() {
            store.get_mut(id).data_mut()[0] = s;
            if stop.observe(s, e + 1, &store) {
                stopped_at = e + 1;
                break;
            }
        }
        assert_eq!(stopped_at, 4);
        let (best, epoch, kept) = stop.best.unwrap();
        assert_eq!((best, epoch), (0.7, 2));
        assert_eq!(kept.get(id).item(), 0.7);
    }

    #[test]
    fn invalid_config() {
        let cfg = TrainConfig {
            batch: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
