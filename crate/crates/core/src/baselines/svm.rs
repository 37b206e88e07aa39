//! Linear SVM trained by stochastic subgradient descent on the regularized
//! hinge loss (Pegasos step size `1 / (lambda * t)`).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_inputs, BaselineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Per-feature z-scoring fitted on training data. Constant columns map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut sd = vec![0.0; d];
        for row in x {
            for ((s, v), m) in sd.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        Self { mean, sd }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.sd)
            .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

/// Weights apply to standardized features plus a trailing constant-1 input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub scaler: Standardizer,
    /// Regularized hinge objective of the averaged weights after each epoch.
    pub epoch_objective: Vec<f64>,
}

impl SvmModel {
    /// Signed margin of a raw (unstandardized) feature row.
    pub fn margin(&self, x: &[f64]) -> f64 {
        let z = self.scaler.transform(x);
        dot_augmented(&self.weights, &z)
    }

    pub fn predict(&self, x: &[f64]) -> (f64, bool) {
        let m = self.margin(x);
        (m, m >= 0.0)
    }
}

fn dot_augmented(w: &[f64], z: &[f64]) -> f64 {
    w[..z.len()].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[z.len()]
}

/// `lambda/2 |w|^2 + mean hinge` over standardized rows.
pub fn objective(w: &[f64], z: &[Vec<f64>], y: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let hinge = z
        .iter()
        .zip(y)
        .map(|(zi, yi)| (1.0 - yi * dot_augmented(w, zi)).max(0.0))
        .sum::<f64>()
        / z.len() as f64;
    reg + hinge
}

pub fn train_svm(x: &[Vec<f64>], y: &[bool], cfg: &SvmConfig) -> Result<SvmModel, BaselineError> {
    if !(cfg.lambda > 0.0) {
        return Err(BaselineError::InvalidConfig("lambda must be > 0".into()));
    }
    if cfg.epochs == 0 {
        return Err(BaselineError::InvalidConfig("epochs must be >= 1".into()));
    }
    let d = check_inputs(x, y)?;
    let scaler = Standardizer::fit(x);
    let z: Vec<Vec<f64>> = x.iter().map(|r| scaler.transform(r)).collect();
    let ys: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut w = vec![0.0; d + 1];
    let mut t = 0u64;
    // Mean of every iterate after the first epoch, whose huge early steps
    // would otherwise dominate the average.
    let mut sum = vec![0.0; d + 1];
    let mut counted = 0u64;
    let mut averaged = vec![0.0; d + 1];
    let mut epoch_objective = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.lambda * t as f64);
            let margin = ys[i] * dot_augmented(&w, &z[i]);
            let shrink = 1.0 - eta * cfg.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wk, zk) in w.iter_mut().zip(&z[i]) {
                    *wk += eta * ys[i] * zk;
                }
                w[d] += eta * ys[i];
            }
            if epoch > 0 || cfg.epochs == 1 {
                counted += 1;
                for (s, v) in sum.iter_mut().zip(&w) {
                    *s += v;
                }
            }
        }
        averaged = if counted == 0 {
            w.clone()
        } else {
            sum.iter().map(|s| s / counted as f64).collect()
        };
        epoch_objective.push(objective(&averaged, &z, &ys, cfg.lambda));
    }
    Ok(SvmModel {
        weights: averaged,
        scaler,
        epoch_objective,
    })
}
