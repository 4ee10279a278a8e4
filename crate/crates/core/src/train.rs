// SPDX-License-Identifier: Apache-2.0

//! Class-balanced training with Adam and a plateau learning-rate schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::neuron::FiringStats;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::session::RunMode;
use crate::tensor::Tensor;

/// Inverse-frequency weights `w_c = N / (K * N_c)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f32>> {
    if counts.is_empty() {
        return Err(Error::Contract("class weights need at least one class".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Contract(format!("class {c} has no training samples")));
    }
    let n: usize = counts.iter().sum();
    let k = counts.len();
    Ok(counts.iter().map(|&c| (n as f64 / (k * c) as f64) as f32).collect())
}

/// Per-class sample counts of `labels` over `n_classes` classes.
pub fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &l in labels {
        if l < n_classes {
            counts[l] += 1;
        }
    }
    counts
}

/// Weighted-mean cross-entropy of `logits [B, K]` against `labels`.
pub fn balanced_ce<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize], weights: &[f32]) -> Result<Var> {
    let k = tape.shape(logits).get(1).copied().unwrap_or(0);
    if weights.len() != k {
        return Err(Error::Contract(format!("{} class weights for {k} logits", weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let w: Vec<S> = weights.iter().map(|&w| S::of(w as f64)).collect();
    tape.weighted_cross_entropy(logits, labels, &w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// One bias-corrected update of a single scalar at step `t >= 1`.
    pub fn update(&self, w: f64, g: f64, m: &mut f64, v: &mut f64, t: u64) -> f64 {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let mh = *m / (1.0 - self.beta1.powf(t as f64));
        let vh = *v / (1.0 - self.beta2.powf(t as f64));
        w - self.lr * mh / (vh.sqrt() + self.eps)
    }
}

/// Adam moments for every parameter of a store, kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one step. Every gradient is checked before any weight moves.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad(store.get(*id).name.clone()));
            }
            if g.shape() != store.value(*id).shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}",
                    store.get(*id).name,
                    g.shape()
                )));
            }
        }
        self.t += 1;
        for (id, g) in grads {
            let n = g.numel();
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let w = store.value_mut(*id).data_mut();
            for i in 0..n {
                w[i] = S::of(self.cfg.update(w[i].as_f64(), g.data()[i].as_f64(), &mut m[i], &mut v[i], self.t));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 10,
            min_delta: 1e-4,
            min_lr: 1e-6,
        }
    }
}

/// Reduces the learning rate once the monitored loss stops improving.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr: lr.max(cfg.min_lr),
            best: f64::INFINITY,
            since_improvement: 0,
        }
    }

    /// Feeds one validation metric (lower is better) and returns the new rate.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best - self.cfg.min_delta {
            self.best = metric;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        if self.since_improvement > self.cfg.patience {
            self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            self.since_improvement = 0;
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    /// Validation-pass firing rate over all spike sites.
    pub firing_rate: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Weights from the epoch with the best validation accuracy.
    pub best: Model<f32>,
}

/// Anything that maps windows `[B, C, T]` to logits `[B, K]`.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn classify(&self, windows: &Tensor<f32>) -> Result<(Tensor<f32>, BTreeMap<String, FiringStats>)>;
}

impl Classifier for Model<f32> {
    fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    fn classify(&self, windows: &Tensor<f32>) -> Result<(Tensor<f32>, BTreeMap<String, FiringStats>)> {
        self.predict(windows)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub firing: BTreeMap<String, FiringStats>,
    #[serde(skip)]
    pub logits: Vec<Vec<f32>>,
}

impl Evaluation {
    pub fn firing_rate(&self) -> f64 {
        let mut all = FiringStats::default();
        self.firing.values().for_each(|s| all.merge(*s));
        all.rate()
    }
}

/// Window-level metrics in batches of `batch_size`. `weights` default to 1.
pub fn evaluate(model: &dyn Classifier, set: &WindowSet, weights: Option<&[f32]>, batch_size: usize) -> Result<Evaluation> {
    let n = set.len();
    if n == 0 {
        return Err(Error::Contract("cannot evaluate on an empty set".into()));
    }
    let k = model.n_classes();
    let uniform = vec![1.0; k];
    let weights = weights.unwrap_or(&uniform);
    let mut confusion = vec![vec![0usize; k]; k];
    let mut firing = BTreeMap::<String, FiringStats>::new();
    let mut logits_all = Vec::with_capacity(n);
    let (mut loss_num, mut loss_den) = (0.0f64, 0.0f64);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = set.batch(chunk)?;
        let (logits, stats) = model.classify(&x)?;
        for (site, s) in stats {
            firing.entry(site).or_default().merge(s);
        }
        let mut tape = Tape::<f32>::inference();
        let lv = tape.leaf(logits.clone(), false);
        let loss = balanced_ce(&mut tape, lv, &labels, weights)?;
        let wsum: f64 = labels.iter().map(|&l| weights[l] as f64).sum();
        loss_num += tape.value(loss).data()[0] as f64 * wsum;
        loss_den += wsum;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            confusion[y][argmax(row)] += 1;
            logits_all.push(row.to_vec());
        }
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(Evaluation {
        loss: loss_num / loss_den,
        accuracy: correct as f64 / n as f64,
        per_class_accuracy,
        confusion,
        firing,
        logits: logits_all,
    })
}

/// Forward, backward and gradient harvest for one minibatch. Returns the
/// loss, gradients of every learnable parameter, and normalization moments.
pub fn batch_gradients<S: Scalar>(
    model: &Model<S>,
    x: Tensor<S>,
    labels: &[usize],
    weights: &[f32],
    mode: RunMode,
) -> Result<(f64, Vec<(ParamId, Tensor<S>)>, Vec<crate::session::NormUpdate>)> {
    let mut sess = model.session(mode);
    let xv = sess.input(x);
    let logits = model.forward(&mut sess, xv)?;
    let loss = balanced_ce(&mut sess.tape, logits, labels, weights)?;
    sess.tape.backward(loss)?;
    let value = sess.tape.value(loss).data()[0].as_f64();
    let grads = model
        .store
        .learnable()
        .map(|(id, e)| {
            let g = sess.grad(id).unwrap_or_else(|| Tensor::zeros(e.value.shape()));
            (id, g)
        })
        .collect();
    let updates = sess.take_norm_updates();
    Ok((value, grads, updates))
}

/// Callback invoked after every epoch with the record and current model.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &Model<f32>, bool) -> Result<()> + 'a;

pub fn train(
    model: &mut Model<f32>,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    if train_set.len() == 0 || val_set.len() == 0 {
        return Err(Error::Contract("training and validation sets must be nonempty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let k = model.cfg.n_classes;
    let weights = class_weights(&class_counts(&train_set.labels, k))?;
    let mut adam = Adam::new(cfg.adam);
    let mut sched = PlateauScheduler::new(cfg.plateau, cfg.adam.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, f64, Model<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        model.set_training(true);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = |reason: String| Error::Training {
                epoch,
                batch: bi,
                reason,
            };
            let (x, labels) = train_set.batch(chunk)?;
            let (loss, grads, updates) = batch_gradients(model, x, &labels, &weights, RunMode::TRAIN).map_err(|e| ctx(e.to_string()))?;
            if !loss.is_finite() {
                return Err(ctx(format!("loss became {loss}")));
            }
            adam.cfg.lr = sched.lr;
            adam.step(&mut model.store, &grads).map_err(|e| ctx(e.to_string()))?;
            model.apply_norm_updates(&updates);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        model.set_training(false);
        let ev = evaluate(model, val_set, Some(&weights), cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: ev.loss,
            val_accuracy: ev.accuracy,
            lr: sched.lr,
            firing_rate: ev.firing_rate(),
            steps: adam.t,
        };
        sched.step(ev.loss);
        let improved = match &best {
            None => true,
            Some((acc, loss, _)) => ev.accuracy > *acc || (ev.accuracy == *acc && ev.loss < *loss),
        };
        if improved {
            best = Some((ev.accuracy, ev.loss, model.clone()));
            report.best_epoch = Some(epoch);
        }
        log::info!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}, val acc {:.4}, lr {:.2e}, firing {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.lr,
            record.firing_rate
        );
        hook(&record, model, improved)?;
        report.epochs.push(record);
    }
    let best = best.map(|b| b.2).unwrap_or_else(|| model.clone());
    Ok(TrainOutcome { report, best })
}
