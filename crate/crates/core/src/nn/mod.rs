//! A small convolutional network with hand-written backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod scalar;
pub mod tensor;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Conv2d, Dense, Dropout, Flatten, ForwardCtx, Layer, LayerCache, LayerSpec, MaxPool2, Relu, Sigmoid};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
pub use train::{predict, train, write_training_log, EpochMetrics, TrainConfig, TrainReport};

use crate::render::ScanpathImage;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite activation after layer {layer} ({kind})")]
    NonFiniteActivation { layer: usize, kind: String },
    #[error("{0} backward called without a matching forward cache")]
    MissingCache(&'static str),
    #[error("dropout in training mode needs a random generator")]
    MissingRng,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr {learning_rate}); last finite loss {last_loss:?}; {detail:?}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
        last_loss: Option<f64>,
        detail: Option<String>,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training data contains a single class")]
    SingleClass,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint header mismatch: {0}")]
    HeaderMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of the VGG-style trunk and its dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniVggSpec {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of the two convolutions in each block.
    pub blocks: Vec<(usize, usize)>,
    pub hidden: usize,
    pub dropout: f64,
}

impl MiniVggSpec {
    pub fn new(input_h: usize, input_w: usize) -> Self {
        Self {
            input_h,
            input_w,
            blocks: vec![(16, 16), (32, 32), (64, 64)],
            hidden: 256,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let div = 1usize << self.blocks.len();
        if self.blocks.is_empty() || self.input_h == 0 || self.input_w == 0 {
            return Err(NnError::InvalidConfig("need at least one block and a non-empty input".into()));
        }
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(NnError::InvalidConfig(format!(
                "input {}x{} is not divisible by {div}",
                self.input_h, self.input_w
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if self.hidden == 0 || self.blocks.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(NnError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Narrow variant for tests and quick experiments.
    pub fn with_small_blocks(mut self) -> Self {
        self.blocks = vec![(2, 2), (3, 3)];
        self.hidden = 4;
        self
    }

    /// `(channels, h, w)` at the output of the last block.
    pub fn trunk_output(&self) -> (usize, usize, usize) {
        let div = 1usize << self.blocks.len();
        (self.blocks.last().map_or(3, |b| b.1), self.input_h / div, self.input_w / div)
    }
}

/// Sequential stack of layers.
pub struct Network<S> {
    pub layers: Vec<Box<dyn Layer<S>>>,
}

impl<S: Scalar> Network<S> {
    /// Runs layers `range` and returns the output with one cache per layer.
    pub fn forward_range(
        &self,
        range: std::ops::Range<usize>,
        x: &Tensor<S>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor<S>, Vec<LayerCache<S>>), NnError> {
        let mut caches = Vec::with_capacity(range.len());
        let mut cur: Option<Tensor<S>> = None;
        for i in range {
            let input = cur.as_ref().unwrap_or(x);
            let (out, cache) = self.layers[i].forward(input, ctx)?;
            if !out.all_finite() {
                return Err(NnError::NonFiniteActivation {
                    layer: i,
                    kind: format!("{:?}", self.layers[i].spec()),
                });
            }
            caches.push(cache);
            cur = Some(out);
        }
        Ok((cur.unwrap_or_else(|| x.clone()), caches))
    }

    /// Backpropagates through layers `start..start + caches.len()`.
    ///
    /// Returns the gradient wrt the range input (when requested) and the
    /// parameter gradients in [`Network::params`] order for that range.
    pub fn backward_range(
        &self,
        start: usize,
        caches: &[LayerCache<S>],
        grad_out: &Tensor<S>,
        input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let mut per_layer: Vec<Vec<Tensor<S>>> = Vec::with_capacity(caches.len());
        let mut grad = grad_out.clone();
        let mut dx = None;
        for (offset, cache) in caches.iter().enumerate().rev() {
            let need = offset > 0 || input_grad;
            let (g, pg) = self.layers[start + offset].backward(cache, &grad, need)?;
            per_layer.push(pg);
            match g {
                Some(g) if offset > 0 => grad = g,
                g => dx = g,
            }
        }
        per_layer.reverse();
        Ok((dx, per_layer.into_iter().flatten().collect()))
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }
}

/// The classifier: conv blocks, then dense 256, dropout, dense 1, sigmoid.
pub struct MiniVgg<S> {
    pub spec: MiniVggSpec,
    pub net: Network<S>,
    /// Index of the pooling layer closing each block.
    pub block_ends: Vec<usize>,
    pub epochs_trained: usize,
}

impl<S: Scalar> MiniVgg<S> {
    /// He-initialized model; the same seed always yields the same weights.
    pub fn new(spec: MiniVggSpec, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |kind| match kind {
            Build::Conv(i, o) => Box::new(Conv2d::<S>::new(i, o, 3, &mut rng)),
            Build::Dense(i, o) => Box::new(Dense::<S>::new(i, o, &mut rng)),
        })
    }

    /// All weights and biases zero.
    pub fn zeroed(spec: MiniVggSpec) -> Result<Self, NnError> {
        Self::build(spec, |kind| match kind {
            Build::Conv(i, o) => Box::new(Conv2d::<S>::zeroed(i, o, 3)),
            Build::Dense(i, o) => Box::new(Dense::<S>::zeroed(i, o)),
        })
    }

    fn build(spec: MiniVggSpec, mut make: impl FnMut(Build) -> Box<dyn Layer<S>>) -> Result<Self, NnError> {
        spec.validate()?;
        let mut layers: Vec<Box<dyn Layer<S>>> = Vec::new();
        let mut block_ends = Vec::new();
        let mut ch = 3;
        for &(a, b) in &spec.blocks {
            layers.push(make(Build::Conv(ch, a)));
            layers.push(Box::new(Relu));
            layers.push(make(Build::Conv(a, b)));
            layers.push(Box::new(Relu));
            layers.push(Box::new(MaxPool2));
            block_ends.push(layers.len() - 1);
            ch = b;
        }
        let (c, h, w) = spec.trunk_output();
        layers.push(Box::new(Flatten));
        layers.push(make(Build::Dense(c * h * w, spec.hidden)));
        layers.push(Box::new(Relu));
        layers.push(Box::new(Dropout { p: spec.dropout }));
        layers.push(make(Build::Dense(spec.hidden, 1)));
        layers.push(Box::new(Sigmoid));
        Ok(Self {
            spec,
            net: Network { layers },
            block_ends,
            epochs_trained: 0,
        })
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 3, self.spec.input_h, self.spec.input_w]
    }

    pub(crate) fn check_input(&self, x: &Tensor<S>) -> Result<(), NnError> {
        let n = x.shape().first().copied().unwrap_or(0);
        if x.shape() != self.input_shape(n) || n == 0 {
            return Err(NnError::ShapeMismatch {
                expected: self.input_shape(n.max(1)).to_vec(),
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Probabilities of shape `(batch, 1)` plus the caches for backward.
    pub fn forward(&self, x: &Tensor<S>, ctx: &mut ForwardCtx) -> Result<(Tensor<S>, Vec<LayerCache<S>>), NnError> {
        self.check_input(x)?;
        self.net.forward_range(0..self.net.layers.len(), x, ctx)
    }

    /// Parameter gradients given the loss gradient wrt the output probabilities.
    pub fn backward(&self, caches: &[LayerCache<S>], grad_out: &Tensor<S>) -> Result<Vec<Tensor<S>>, NnError> {
        if caches.len() != self.net.layers.len() {
            return Err(NnError::MissingCache("network"));
        }
        Ok(self.net.backward_range(0, caches, grad_out, false)?.1)
    }

    /// Index of the sigmoid; layers before it produce the logit.
    pub fn logit_layer_end(&self) -> usize {
        self.net.layers.len() - 1
    }

    pub fn probabilities(&self, x: &Tensor<S>) -> Result<Vec<f64>, NnError> {
        let (p, _) = self.forward(x, &mut ForwardCtx::eval())?;
        Ok(p.data().iter().map(|v| v.to_f64()).collect())
    }
}

impl<S: Scalar> std::fmt::Debug for MiniVgg<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MiniVgg")
            .field("spec", &self.spec)
            .field("precision", &S::PRECISION)
            .field("epochs_trained", &self.epochs_trained)
            .finish_non_exhaustive()
    }
}

enum Build {
    Conv(usize, usize),
    Dense(usize, usize),
}

/// Converts images to a `(n, 3, h, w)` tensor scaled to [0, 1].
pub fn images_to_tensor<S: Scalar>(images: &[&ScanpathImage]) -> Result<Tensor<S>, NnError> {
    let first = images.first().ok_or(NnError::EmptyDataset)?;
    let (w, h) = (first.w, first.h);
    let plane = w * h;
    let mut data = vec![S::ZERO; images.len() * 3 * plane];
    let scale = 1.0 / 255.0;
    for (i, img) in images.iter().enumerate() {
        if (img.w, img.h) != (w, h) {
            return Err(NnError::ShapeMismatch {
                expected: vec![3, h, w],
                found: vec![3, img.h, img.w],
            });
        }
        let out = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for (p, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = S::from_f64(px[c] as f64 * scale);
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Lower clip for probabilities inside the log.
pub const PROB_CLIP: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient wrt each probability.
///
/// Probabilities are clipped to `[1e-7, 1 - 1e-7]`; where clipping is active
/// the loss is flat, so the gradient there is zero.
pub fn bce_loss(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), y.len());
    let n = p.len() as f64;
    let mut loss = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let c = pi.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            loss -= yi * c.ln() + (1.0 - yi) * (1.0 - c).ln();
            if c != pi {
                0.0
            } else {
                (-yi / c + (1.0 - yi) / (1.0 - c)) / n
            }
        })
        .collect();
    (loss / n, grad)
}
