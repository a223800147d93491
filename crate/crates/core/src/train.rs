//! Mini-batch training and evaluation of a [`Network`] on labelled bags.
//!
//! Per-bag gradients are computed in parallel and summed in bag order, so a
//! run is bitwise reproducible for any worker count.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, derive_seed, rng_for, AugmentConfig};
use crate::dgconv::BackwardMode;
use crate::error::{arg_err, Error, Result};
use crate::metrics::{accuracy, label_names, AucReport, ScoredSet, DEFAULT_THRESHOLD};
use crate::mil::{multilabel_class_weights, ClassWeights};
use crate::model::Network;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

/// Seed streams split from the run seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_AUGMENT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`
    pub image: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub mode: BackwardMode,
    /// Scale each bag-label term by the inverse class frequency of the
    /// training split.
    pub class_weighted: bool,
    /// Apply `augmentation` to every training image each epoch.
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            mode: BackwardMode::Exact,
            class_weighted: true,
            augment: false,
            augmentation: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_auc";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.10}"));
        format!(
            "{},{:.10},{},{}",
            self.epoch,
            self.train_loss,
            opt(self.val_loss),
            opt(self.val_auc)
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in history {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameters of the epoch with the best validation AUC (validation loss
    /// breaks ties), or the final ones without a validation set.
    pub best: Network,
    pub best_epoch: usize,
    pub last: Network,
}

/// Per-label class weights of a split, or `None` when weighting is off.
pub fn split_weights(samples: &[Sample], weighted: bool) -> Result<Option<Vec<ClassWeights>>> {
    if !weighted {
        return Ok(None);
    }
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    multilabel_class_weights(&labels).map(Some)
}

/// Mean loss and mean gradients over a batch.
pub fn batch_gradients(
    net: &Network,
    batch: &[Sample],
    weights: Option<&[ClassWeights]>,
    mode: BackwardMode,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(arg_err!("empty batch"));
    }
    let per_bag: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .map(|s| net.loss_and_grads(&s.image, &s.labels, weights, mode))
        .collect();
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for r in per_bag {
        let (l, g) = r?;
        total += l;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.add_scaled(gi, 1.0)?;
                }
            }
        }
    }
    let k = 1.0 / batch.len() as f64;
    let grads = sum
        .expect("nonempty batch")
        .iter()
        .map(|g| g.scale(k))
        .collect();
    Ok((total * k, grads))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mean_loss: f64,
    /// Bag scores, `scores[c][i]`.
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
    pub report: AucReport,
    pub accuracy: Vec<f64>,
}

impl Evaluation {
    pub fn mean_auc(&self) -> Option<f64> {
        self.report.average()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }
}

pub fn evaluate(
    net: &Network,
    samples: &[Sample],
    weights: Option<&[ClassWeights]>,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(arg_err!("evaluation set is empty"));
    }
    let c = net.spec().labels;
    let outs: Vec<Result<(f64, Vec<f64>)>> = samples
        .par_iter()
        .map(|s| {
            let p = net.predict(&s.image)?;
            let loss = crate::mil::miml_loss(&[(p.clone(), s.labels.clone())], weights)?.value;
            Ok((loss, (0..c).map(|ci| p.max_patch(ci).1).collect()))
        })
        .collect();
    let mut scores = vec![Vec::with_capacity(samples.len()); c];
    let mut labels = vec![Vec::with_capacity(samples.len()); c];
    let mut loss = 0.0;
    for (o, s) in outs.into_iter().zip(samples) {
        let (l, sc) = o?;
        loss += l;
        for ci in 0..c {
            scores[ci].push(sc[ci]);
            labels[ci].push(s.labels[ci]);
        }
    }
    let sets = scores
        .iter()
        .zip(&labels)
        .map(|(s, y)| ScoredSet::new(s.clone(), y.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        mean_loss: loss / samples.len() as f64,
        report: AucReport::from_sets(&label_names(c), &sets),
        accuracy: sets
            .iter()
            .map(|s| accuracy(s, DEFAULT_THRESHOLD))
            .collect(),
        scores,
        labels,
    })
}

/// Runs `cfg.epochs` epochs. `on_epoch` sees every record and the current
/// parameters after it.
pub fn train(
    mut net: Network,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &OptimizerConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(arg_err!("training set is empty"));
    }
    let mut opt = Optimizer::new(cfg.clone())?;
    let weights = split_weights(train_set, opts.class_weighted)?;
    let w = weights.as_deref();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (net.clone(), 0usize, f64::NEG_INFINITY, f64::INFINITY);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_for(
            derive_seed(cfg.seed, STREAM_SHUFFLE),
            epoch as u64,
        ));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    if !opts.augment {
                        return Ok(s.clone());
                    }
                    let seed = derive_seed(
                        derive_seed(cfg.seed, STREAM_AUGMENT),
                        (epoch * train_set.len() + i) as u64,
                    );
                    Ok(Sample {
                        image: augment(&s.image, &opts.augmentation, seed)?,
                        labels: s.labels.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = batch_gradients(&net, &batch, w, opts.mode)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            epoch_loss += loss * batch.len() as f64;
            opt.step(&mut net.params_mut(), &grads)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_auc) = if val_set.is_empty() {
            (None, None)
        } else {
            let e = evaluate(&net, val_set, w)?;
            (Some(e.mean_loss), e.mean_auc())
        };
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
        }
        opt.end_epoch(epoch, val_loss);
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        };
        let (auc, vl) = (
            val_auc.unwrap_or(f64::NEG_INFINITY),
            val_loss.unwrap_or(f64::INFINITY),
        );
        if val_set.is_empty() || auc > best.2 || (auc == best.2 && vl < best.3) {
            best = (net.clone(), epoch, auc, vl);
        }
        on_epoch(&rec, &net)?;
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        best: best.0,
        best_epoch: best.1,
        last: net,
    })
}
