//! Mini-batch SGD with momentum.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bce_loss, images_to_tensor, ForwardCtx, MiniVgg, NnError, Precision, Scalar, Tensor};
use crate::render::ScanpathImage;

/// One labelled training image.
pub type Example<'a> = (&'a ScanpathImage, bool);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            momentum: 0.9,
            learning_rate: 0.01,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochMetrics>,
}

/// Trains `model` in place.
///
/// Each epoch reshuffles the training set with a generator derived from the
/// seed. Loss and accuracy of the training set are accumulated over the
/// epoch's mini-batches (dropout active); validation runs in eval mode.
pub fn train<S: Scalar>(
    model: &mut MiniVgg<S>,
    train_set: &[Example<'_>],
    val_set: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<TrainReport, NnError> {
    cfg.validate()?;
    if S::PRECISION != cfg.precision {
        return Err(NnError::InvalidConfig(format!(
            "model precision {} differs from configured {}",
            S::PRECISION.as_str(),
            cfg.precision.as_str()
        )));
    }
    if train_set.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if train_set.iter().all(|e| e.1) || train_set.iter().all(|e| !e.1) {
        return Err(NnError::SingleClass);
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut velocity: Vec<Tensor<S>> = model.net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mu = S::from_f64(cfg.momentum);
    let lr = S::from_f64(cfg.learning_rate);
    let logit_end = model.logit_layer_end();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut last_loss = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&ScanpathImage> = idx.iter().map(|&i| train_set[i].0).collect();
            let y: Vec<f64> = idx.iter().map(|&i| f64::from(u8::from(train_set[i].1))).collect();
            let x = images_to_tensor::<S>(&images)?;
            model.check_input(&x)?;

            let mut ctx = ForwardCtx::train(dropout_rng.clone());
            let forward = model.net.forward_range(0..logit_end, &x, &mut ctx);
            dropout_rng = ctx.rng.take().expect("train context keeps its generator");
            let nan = |detail: Option<String>| NnError::NanLoss {
                epoch,
                batch,
                learning_rate: cfg.learning_rate,
                last_loss,
                detail,
            };
            let (logits, caches) = match forward {
                Err(NnError::NonFiniteActivation { layer, kind }) => {
                    return Err(nan(Some(format!("layer {layer} ({kind})"))));
                }
                other => other?,
            };
            let p: Vec<f64> = logits.data().iter().map(|z| super::layers::sigmoid(z.to_f64())).collect();
            let (loss, _) = bce_loss(&p, &y);
            if !loss.is_finite() {
                return Err(nan(None));
            }
            last_loss = Some(loss);
            loss_sum += loss * idx.len() as f64;
            correct += p.iter().zip(&y).filter(|(p, y)| (**p >= 0.5) == (**y == 1.0)).count();

            // Sigmoid and cross-entropy fused: dL/dz = (p - y) / n.
            let n = idx.len() as f64;
            let dz = Tensor::from_vec(
                &[idx.len(), 1],
                p.iter().zip(&y).map(|(p, y)| S::from_f64((p - y) / n)).collect(),
            )?;
            let (_, grads) = model.net.backward_range(0, &caches, &dz, false)?;
            for ((param, v), g) in model.net.params_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for ((w, vi), gi) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = mu * *vi - lr * *gi;
                    *w += *vi;
                }
            }
        }
        model.epochs_trained += 1;
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, val_set)?;
            (Some(l), Some(a))
        };
        report.log.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
        });
    }
    Ok(report)
}

const EVAL_BATCH: usize = 32;

/// Eval-mode probabilities for each image.
pub fn predict<S: Scalar>(model: &MiniVgg<S>, images: &[&ScanpathImage]) -> Result<Vec<f64>, NnError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = images_to_tensor::<S>(chunk)?;
        out.extend(model.probabilities(&x)?);
    }
    Ok(out)
}

/// Mean loss and accuracy in eval mode.
pub fn evaluate<S: Scalar>(model: &MiniVgg<S>, set: &[Example<'_>]) -> Result<(f64, f64), NnError> {
    let images: Vec<&ScanpathImage> = set.iter().map(|e| e.0).collect();
    let p = predict(model, &images)?;
    let y: Vec<f64> = set.iter().map(|e| f64::from(u8::from(e.1))).collect();
    let (loss, _) = bce_loss(&p, &y);
    let correct = p.iter().zip(&y).filter(|(p, y)| (**p >= 0.5) == (**y == 1.0)).count();
    Ok((loss, correct as f64 / set.len() as f64))
}

/// CSV with columns `epoch,train_loss,train_acc,val_loss,val_acc`.
pub fn write_training_log<W: Write>(mut w: W, log: &[EpochMetrics]) -> io::Result<()> {
    writeln!(w, "epoch,train_loss,train_acc,val_loss,val_acc")?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for m in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            opt(m.val_loss),
            opt(m.val_acc)
        )?;
    }
    Ok(())
}
