//! Layer implementations with explicit backward passes.
//!
//! Every layer is a pure function of its parameters: `forward` returns the
//! output together with whatever `backward` later needs, so one network can
//! serve several forward passes at once.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

/// Per-pass state: train mode enables dropout, which draws from `rng`.
pub struct ForwardCtx {
    pub train: bool,
    pub rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
        }
    }
}

/// What a layer keeps from its forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<S> {
    Input(Tensor<S>),
    Output(Tensor<S>),
    PoolArgmax { argmax: Vec<u32>, input_shape: Vec<usize> },
    InputShape(Vec<usize>),
    DropoutMask(Option<Vec<S>>),
}

/// Serializable description of a layer, used in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    MaxPool2,
    Flatten,
    Dense { inputs: usize, outputs: usize },
    Dropout { p: f64 },
    Sigmoid,
}

pub trait Layer<S: Scalar>: Send + Sync {
    fn spec(&self) -> LayerSpec;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError>;

    fn forward(&self, x: &Tensor<S>, ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError>;

    /// Returns the input gradient (when `input_grad`) and one gradient per parameter.
    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError>;

    fn params(&self) -> Vec<&Tensor<S>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        Vec::new()
    }
}

fn missing(layer: &'static str) -> NnError {
    NnError::MissingCache(layer)
}

fn he_normal<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| S::from_f64(normal.sample(rng)))
}

// ---------------------------------------------------------------------------

/// Square-kernel convolution, stride 1, "same" zero padding.
pub struct Conv2d<S> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (h*w)` matrix.
fn im2col<S: Scalar>(img: &[S], c: usize, h: usize, w: usize, k: usize, cols: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(S::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(S::ZERO);
                    out[x_hi..].fill(S::ZERO);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize, img: &mut [S]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    img.fill(S::ZERO);
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + x_lo..y * w + x_hi];
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `out[i * m + j] += dot(a_i, b_j)` for the `n`-long rows of `a` and `b`,
/// where `m` is the number of rows in `b`.
///
/// Used for the weight gradient, whose inner dimension (pixels) is far longer
/// than either outer one; a GEMM library spends most of its time packing for
/// that shape.
fn accumulate_row_products<S: Scalar>(a: &[S], b: &[S], n: usize, out: &mut [S]) {
    let m = b.len() / n;
    // `a` (the output gradient) is the smaller operand and stays in cache
    // while each row of `b` streams past once.
    for (j, rb) in b.chunks_exact(n).enumerate() {
        for (i, ra) in a.chunks_exact(n).enumerate() {
            out[i * m + j] += dot(ra, rb);
        }
    }
}

/// Dot product with a fixed 16-lane accumulation order.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 16;
    let mut acc = [S::ZERO; LANES];
    let split = a.len() - a.len() % LANES;
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for k in 0..LANES {
            acc[k] += ca[k] * cb[k];
        }
    }
    for (k, (x, y)) in a[split..].iter().zip(&b[split..]).enumerate() {
        acc[k] += *x * *y;
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for k in 0..width {
            acc[k] = acc[k] + acc[k + width];
        }
    }
    acc[0]
}

impl<S: Scalar> Layer<S> for Conv2d<S> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *input {
            [n, c, h, w] if c == self.in_channels => Ok(vec![n, self.out_channels, h, w]),
            _ => Err(NnError::ShapeMismatch {
                expected: vec![0, self.in_channels, 0, 0],
                found: input.to_vec(),
            }),
        }
    }

    fn forward(&self, x: &Tensor<S>, _ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError> {
        let out_shape = self.output_shape(x.shape())?;
        let (_, c, h, w) = x.dims4()?;
        let hw = h * w;
        let (oc, pk) = (self.out_channels, self.patch_len());
        let mut out = Tensor::zeros(&out_shape);
        out.data_mut()
            .par_chunks_mut(oc * hw)
            .zip(x.data().par_chunks(c * hw))
            .for_each_init(
                || vec![S::ZERO; pk * hw],
                |cols, (y, img)| {
                    im2col(img, c, h, w, self.kernel, cols);
                    for (o, plane) in y.chunks_mut(hw).enumerate() {
                        plane.fill(self.bias.data()[o]);
                    }
                    S::gemm(oc, pk, hw, S::ONE, self.weight.data(), (pk as isize, 1), cols, (hw as isize, 1), S::ONE, y, (hw as isize, 1));
                },
            );
        Ok((out, LayerCache::Input(x.clone())))
    }

    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let LayerCache::Input(x) = cache else {
            return Err(missing("conv2d"));
        };
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let (oc, pk) = (self.out_channels, self.patch_len());
        if grad_out.shape() != [n, oc, h, w] {
            return Err(NnError::ShapeMismatch {
                expected: vec![n, oc, h, w],
                found: grad_out.shape().to_vec(),
            });
        }
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        let mut cols = vec![S::ZERO; pk * hw];
        // Fixed image order keeps the reduction deterministic.
        for i in 0..n {
            let img = &x.data()[i * c * hw..(i + 1) * c * hw];
            let g = &grad_out.data()[i * oc * hw..(i + 1) * oc * hw];
            im2col(img, c, h, w, self.kernel, &mut cols);
            accumulate_row_products(g, &cols, hw, dw.data_mut());
            for (o, plane) in g.chunks(hw).enumerate() {
                db.data_mut()[o] += plane.iter().copied().sum::<S>();
            }
        }
        let dx = if input_grad {
            let mut dx = Tensor::zeros(x.shape());
            dx.data_mut()
                .par_chunks_mut(c * hw)
                .zip(grad_out.data().par_chunks(oc * hw))
                .for_each_init(
                    || vec![S::ZERO; pk * hw],
                    |dcols, (dimg, g)| {
                        S::gemm(pk, oc, hw, S::ONE, self.weight.data(), (1, pk as isize), g, (hw as isize, 1), S::ZERO, dcols, (hw as isize, 1));
                        col2im(dcols, c, h, w, self.kernel, dimg);
                    },
                );
            Some(dx)
        } else {
            None
        };
        Ok((dx, vec![dw, db]))
    }

    fn params(&self) -> Vec<&Tensor<S>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------

pub struct Relu;

impl<S: Scalar> Layer<S> for Relu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        Ok(input.to_vec())
    }

    fn forward(&self, x: &Tensor<S>, _ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| {
            if !(*v > S::ZERO) {
                *v = S::ZERO;
            }
        });
        Ok((y.clone(), LayerCache::Output(y)))
    }

    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        _input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let LayerCache::Output(y) = cache else {
            return Err(missing("relu"));
        };
        let mut g = grad_out.clone();
        for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
            if !(*yv > S::ZERO) {
                *gv = S::ZERO;
            }
        }
        Ok((Some(g), Vec::new()))
    }
}

// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Ties go to the first element in scan order.
pub struct MaxPool2;

impl<S: Scalar> Layer<S> for MaxPool2 {
    fn spec(&self) -> LayerSpec {
        LayerSpec::MaxPool2
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *input {
            [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![n, c, h / 2, w / 2]),
            _ => Err(NnError::ShapeMismatch {
                expected: vec![0, 0, 2, 2],
                found: input.to_vec(),
            }),
        }
    }

    fn forward(&self, x: &Tensor<S>, _ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError> {
        let out_shape = <Self as Layer<S>>::output_shape(self, x.shape())?;
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![0u32; out.len()];
        let src = x.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[at] > src[best] {
                            best = at;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    dst[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        Ok((
            out,
            LayerCache::PoolArgmax {
                argmax,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        _input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let LayerCache::PoolArgmax { argmax, input_shape } = cache else {
            return Err(missing("maxpool2"));
        };
        let mut dx = Tensor::zeros(input_shape);
        let d = dx.data_mut();
        for (g, &at) in grad_out.data().iter().zip(argmax) {
            d[at as usize] += *g;
        }
        Ok((Some(dx), Vec::new()))
    }
}

// ---------------------------------------------------------------------------

pub struct Flatten;

impl<S: Scalar> Layer<S> for Flatten {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        Ok(vec![input[0], input[1..].iter().product()])
    }

    fn forward(&self, x: &Tensor<S>, _ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError> {
        let shape = <Self as Layer<S>>::output_shape(self, x.shape())?;
        Ok((x.clone().reshaped(&shape)?, LayerCache::InputShape(x.shape().to_vec())))
    }

    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        _input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let LayerCache::InputShape(shape) = cache else {
            return Err(missing("flatten"));
        };
        Ok((Some(grad_out.clone().reshaped(shape)?), Vec::new()))
    }
}

// ---------------------------------------------------------------------------

/// Fully connected layer, `y = x W^T + b` with `W` of shape `outputs x inputs`.
pub struct Dense<S> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: he_normal(&[outputs, inputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }
}

impl<S: Scalar> Layer<S> for Dense<S> {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *input {
            [n, d] if d == self.inputs => Ok(vec![n, self.outputs]),
            _ => Err(NnError::ShapeMismatch {
                expected: vec![0, self.inputs],
                found: input.to_vec(),
            }),
        }
    }

    fn forward(&self, x: &Tensor<S>, _ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError> {
        let shape = self.output_shape(x.shape())?;
        let n = shape[0];
        let (i, o) = (self.inputs, self.outputs);
        let mut y = Tensor::zeros(&shape);
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        S::gemm(n, i, o, S::ONE, x.data(), (i as isize, 1), self.weight.data(), (1, i as isize), S::ONE, y.data_mut(), (o as isize, 1));
        Ok((y, LayerCache::Input(x.clone())))
    }

    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let LayerCache::Input(x) = cache else {
            return Err(missing("dense"));
        };
        let n = x.shape()[0];
        let (i, o) = (self.inputs, self.outputs);
        if grad_out.shape() != [n, o] {
            return Err(NnError::ShapeMismatch {
                expected: vec![n, o],
                found: grad_out.shape().to_vec(),
            });
        }
        let mut dw = Tensor::zeros(self.weight.shape());
        S::gemm(o, n, i, S::ONE, grad_out.data(), (1, o as isize), x.data(), (i as isize, 1), S::ZERO, dw.data_mut(), (i as isize, 1));
        let mut db = Tensor::zeros(self.bias.shape());
        for row in grad_out.data().chunks(o) {
            for (b, g) in db.data_mut().iter_mut().zip(row) {
                *b += *g;
            }
        }
        let dx = if input_grad {
            let mut dx = Tensor::zeros(x.shape());
            S::gemm(n, o, i, S::ONE, grad_out.data(), (o as isize, 1), self.weight.data(), (i as isize, 1), S::ZERO, dx.data_mut(), (i as isize, 1));
            Some(dx)
        } else {
            None
        };
        Ok((dx, vec![dw, db]))
    }

    fn params(&self) -> Vec<&Tensor<S>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)` during
/// training; evaluation is the identity.
pub struct Dropout {
    pub p: f64,
}

impl<S: Scalar> Layer<S> for Dropout {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dropout { p: self.p }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        Ok(input.to_vec())
    }

    fn forward(&self, x: &Tensor<S>, ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError> {
        if !ctx.train || self.p <= 0.0 {
            return Ok((x.clone(), LayerCache::DropoutMask(None)));
        }
        let rng = ctx.rng.as_mut().ok_or(NnError::MissingRng)?;
        let scale = S::from_f64(1.0 / (1.0 - self.p));
        let mask: Vec<S> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.p { S::ZERO } else { scale })
            .collect();
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= *m;
        }
        Ok((y, LayerCache::DropoutMask(Some(mask))))
    }

    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        _input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let LayerCache::DropoutMask(mask) = cache else {
            return Err(missing("dropout"));
        };
        let mut g = grad_out.clone();
        if let Some(mask) = mask {
            for (v, m) in g.data_mut().iter_mut().zip(mask) {
                *v *= *m;
            }
        }
        Ok((Some(g), Vec::new()))
    }
}

// ---------------------------------------------------------------------------

pub struct Sigmoid;

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::ZERO {
        S::ONE / (S::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::ONE + e)
    }
}

impl<S: Scalar> Layer<S> for Sigmoid {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Sigmoid
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        Ok(input.to_vec())
    }

    fn forward(&self, x: &Tensor<S>, _ctx: &mut ForwardCtx) -> Result<(Tensor<S>, LayerCache<S>), NnError> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok((y.clone(), LayerCache::Output(y)))
    }

    fn backward(
        &self,
        cache: &LayerCache<S>,
        grad_out: &Tensor<S>,
        _input_grad: bool,
    ) -> Result<(Option<Tensor<S>>, Vec<Tensor<S>>), NnError> {
        let LayerCache::Output(y) = cache else {
            return Err(missing("sigmoid"));
        };
        let mut g = grad_out.clone();
        for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
            *gv *= *yv * (S::ONE - *yv);
        }
        Ok((Some(g), Vec::new()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut conv = Conv2d::<f64>::zeroed(1, 1, 3);
        conv.weight.data_mut()[4] = 1.0;
        let x = Tensor::from_fn(&[2, 1, 5, 6], |i| (i as f64 * 0.37).sin());
        let (y, _) = conv.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng();
        let conv = Conv2d::<f64>::new(2, 3, 3, &mut r);
        let x = Tensor::from_fn(&[1, 2, 4, 5], |i| ((i * 7 % 11) as f64) - 5.0);
        let (y, _) = conv.forward(&x, &mut ForwardCtx::eval()).unwrap();
        for o in 0..3 {
            for yy in 0..4i64 {
                for xx in 0..5i64 {
                    let mut s = conv.bias.data()[o];
                    for c in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    let wv = conv.weight.data()[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize];
                                    s += wv * x.data()[(c * 4 + sy as usize) * 5 + sx as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 4 + yy as usize) * 5 + xx as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_picks_max() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = Layer::<f64>::forward(&MaxPool2, &x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let (dx, _) = Layer::<f64>::backward(&MaxPool2, &cache, &g, true).unwrap();
        assert_eq!(dx.unwrap().data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn relu_blocks_negative_gradient() {
        let x = Tensor::<f64>::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (_, cache) = Layer::<f64>::forward(&Relu, &x, &mut ForwardCtx::eval()).unwrap();
        let g = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let (dx, _) = Layer::<f64>::backward(&Relu, &cache, &g, true).unwrap();
        assert_eq!(dx.unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_preserves_expectation_and_is_identity_in_eval() {
        let d = Dropout { p: 0.2 };
        let x = Tensor::<f64>::from_fn(&[1, 200_000], |_| 1.0);
        let (y, _) = d.forward(&x, &mut ForwardCtx::train(rng())).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
        assert!((zeros - 0.2).abs() < 0.01);
        let (e, _) = d.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(e, x);
    }

    #[test]
    fn train_dropout_without_rng_errors() {
        let d = Dropout { p: 0.5 };
        let x = Tensor::<f64>::zeros(&[1, 4]);
        let mut ctx = ForwardCtx {
            train: true,
            rng: None,
        };
        assert!(matches!(d.forward(&x, &mut ctx), Err(NnError::MissingRng)));
    }

    #[test]
    fn mismatched_cache_is_reported() {
        let dense = Dense::<f64>::zeroed(2, 1);
        let g = Tensor::zeros(&[1, 1]);
        assert!(matches!(
            dense.backward(&LayerCache::InputShape(vec![1, 2]), &g, true),
            Err(NnError::MissingCache("dense"))
        ));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let (c, h, w, k) = (2, 5, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.13).cos()).collect();
        let cols_in: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.71).sin()).collect();
        let mut cols = vec![0.0; cols_in.len()];
        im2col(&x, c, h, w, k, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_in).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&cols_in, c, h, w, k, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
