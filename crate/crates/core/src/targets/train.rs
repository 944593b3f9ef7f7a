//! Supervised training of target classifiers.

use hiconcept_tensor::{Adam, AdamConfig, Elem, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax_classes, make_batch, TargetKind, TargetModel};
use crate::datagen::Dataset;
use crate::rng::{derive_seed, derived_rng, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 3e-4,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn for_kind(kind: TargetKind) -> Self {
        match kind {
            TargetKind::ToyCnn => Self::default(),
            TargetKind::TextTransformer => Self {
                batch_size: 128,
                lr_decay: 0.95,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("bad learning rate {} or decay {}", self.lr, self.lr_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub test_accuracy: Option<f64>,
}

/// One-hot targets `[B, K, C]` for dataset rows `idx`.
pub(crate) fn one_hot<T: Elem>(ds: &Dataset, idx: &[usize]) -> Tensor<T> {
    let (k, c) = (ds.task.heads(), ds.task.classes());
    let mut t = Tensor::zeros(&[idx.len(), k, c]);
    for (r, &i) in idx.iter().enumerate() {
        for (h, &y) in ds.label(i).iter().enumerate() {
            t.data_mut()[(r * k + h) * c + y as usize] = T::one();
        }
    }
    t
}

/// Mean over samples and heads of `-sum_c y log q`.
pub(crate) fn cross_entropy<T: Elem>(g: &mut Graph<T>, probs: Var, target: Tensor<T>) -> Var {
    let s = g.shape(probs).to_vec();
    let lq = g.clamp_log(probs, T::lit(1e-12));
    let prod = g.mul_const(lq, target);
    let total = g.sum(prod);
    g.scale(total, T::lit(-1.0 / (s[0] * s[1]) as f64))
}

/// Fraction of (sample, head) pairs whose argmax class matches the label.
pub fn accuracy<T: Elem>(model: &TargetModel<T>, ds: &Dataset, idx: &[usize], batch_size: usize) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let p = model.predict_dataset(ds, idx, batch_size).cast::<f64>();
    let pred = argmax_classes(&p);
    let k = ds.task.heads();
    let mut hit = 0usize;
    for (r, &i) in idx.iter().enumerate() {
        for (h, &y) in ds.label(i).iter().enumerate() {
            hit += (pred[r * k + h] == y as usize) as usize;
        }
    }
    hit as f64 / (idx.len() * k) as f64
}

/// Train on the `train` split, reporting accuracy on `test` when it exists.
pub fn train_target<T: Elem>(model: &mut TargetModel<T>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.frozen {
        return Err(Error::Invalid("target model is frozen".into()));
    }
    if ds.task != model.task() {
        return Err(Error::Invalid(format!(
            "dataset task {:?} does not match model task {:?}",
            ds.task,
            model.task()
        )));
    }
    let train = ds.split("train")?.to_vec();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut derived_rng(model.seed, stream::TARGET_SHUFFLE * 1000 + epoch as u64));
        let mut drop = derived_rng(derive_seed(model.seed, stream::TARGET_DROPOUT), epoch as u64);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch::<T>(ds, chunk);
            let target = one_hot::<T>(ds, chunk);
            let mut g = Graph::new();
            let mut b = model.params.binder(true);
            let probs = model.forward_graph(&mut g, &mut b, &batch, Some(&mut drop));
            let loss = cross_entropy(&mut g, probs, target.clone());
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss in epoch {}", epoch + 1)));
            }
            let pred = argmax_classes(&g.value(probs).cast::<f64>());
            let truth = argmax_classes(&target.cast::<f64>());
            hits += pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
            seen += pred.len();
            loss_sum += lv * chunk.len() as f64;
            let grads = g.backward(loss);
            let bound = b.finish();
            opt.step(&mut model.params, &bound, &grads);
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / train.len().max(1) as f64,
            train_accuracy: hits as f64 / seen.max(1) as f64,
        };
        log::info!(
            "target epoch {} loss {:.4} train acc {:.4}",
            stats.epoch,
            stats.loss,
            stats.train_accuracy
        );
        epochs.push(stats);
        opt.set_lr(opt.config.lr * cfg.lr_decay);
    }
    let test_accuracy = ds.split("test").ok().map(|t| accuracy(model, ds, t, 256));
    Ok(TrainReport { epochs, test_accuracy })
}
