//! Convolutional, max-pooling and dense layers with forward and backward passes.
//!
//! Conventions shared by every layer:
//! - a layer's `forward` returns both the pre-activation and the activation
//!   (backward needs the pre-activation for the activation derivative);
//! - `backward` takes the upstream gradient with respect to this layer's
//!   *activation output* and returns gradients for the parameters plus the
//!   gradient with respect to this layer's input, so layers chain directly;
//! - convolution is "valid" (no padding), stride 1;
//! - max pooling is 2x1 over the height axis; an odd trailing row is dropped.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tensor};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("{context}: expected shape {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("max pooling needs at least 2 input rows, got {rows}")]
    PoolInputTooShort { rows: usize },
    #[error("max pooling backward called before any forward pass")]
    PoolBackwardBeforeForward,
}

fn shape_mismatch(
    context: &'static str,
    expected: impl std::fmt::Debug,
    actual: impl std::fmt::Debug,
) -> LayerError {
    LayerError::ShapeMismatch {
        context,
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}

/// Elementwise activation attached to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => tensor::relu_scalar(x),
            Activation::Sigmoid => tensor::sigmoid_scalar(x),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => tensor::relu_grad_scalar(x),
            Activation::Sigmoid => tensor::sigmoid_grad_scalar(x),
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub d_weights: Tensor,
    pub d_bias: Tensor,
    pub d_input: Tensor,
}

/// Samples uniformly from [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))].
fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// 2D valid convolution with per-filter bias and ReLU activation.
///
/// Weights have shape `[out_channels, in_channels, filter_h, filter_w]`,
/// bias `[out_channels]`. The filter height covers days, the width covers
/// feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub weights: Tensor,
    pub bias: Tensor,
    pub use_bias: bool,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        filter_h: usize,
        filter_w: usize,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * filter_h * filter_w;
        let fan_out = out_channels * filter_h * filter_w;
        let n = out_channels * in_channels * filter_h * filter_w;
        Self {
            in_channels,
            out_channels,
            filter_h,
            filter_w,
            weights: Tensor::new(
                vec![out_channels, in_channels, filter_h, filter_w],
                glorot_uniform(rng, fan_in, fan_out, n),
            ),
            bias: Tensor::zeros(vec![out_channels]),
            use_bias,
        }
    }

    /// Builds a layer from explicit weights; shapes are asserted.
    pub fn from_weights(weights: Tensor, bias: Tensor, use_bias: bool) -> Self {
        let s = weights.shape().to_vec();
        assert_eq!(s.len(), 4, "conv weights must be 4-D, got {s:?}");
        assert_eq!(bias.shape(), &[s[0]], "conv bias must be [out_channels]");
        Self {
            in_channels: s[1],
            out_channels: s[0],
            filter_h: s[2],
            filter_w: s[3],
            weights,
            bias,
            use_bias,
        }
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>, LayerError> {
        if input_shape.len() != 3 || input_shape[0] != self.in_channels {
            return Err(shape_mismatch(
                "conv input",
                [self.in_channels, self.filter_h, self.filter_w],
                input_shape,
            ));
        }
        let (h, w) = (input_shape[1], input_shape[2]);
        if h < self.filter_h || w < self.filter_w {
            return Err(shape_mismatch(
                "conv input smaller than filter",
                [self.filter_h, self.filter_w],
                [h, w],
            ));
        }
        Ok(vec![
            self.out_channels,
            h - self.filter_h + 1,
            w - self.filter_w + 1,
        ])
    }

    /// Valid convolution plus ReLU. Returns `(pre_activation, activation)`.
    ///
    /// Summation order is fixed (channel outer, filter row middle, filter
    /// column inner) so results are bit-reproducible.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tensor), LayerError> {
        let out_shape = self.output_shape(input.shape())?;
        let (in_h, in_w) = (input.shape()[1], input.shape()[2]);
        let (out_h, out_w) = (out_shape[1], out_shape[2]);
        let x = input.data();
        let w = self.weights.data();
        let b = self.bias.data();

        let mut pre = vec![0.0; self.out_channels * out_h * out_w];
        for o in 0..self.out_channels {
            for i in 0..out_h {
                for j in 0..out_w {
                    let mut sum = 0.0;
                    for c in 0..self.in_channels {
                        for k in 0..self.filter_h {
                            for m in 0..self.filter_w {
                                let wv = w[((o * self.in_channels + c) * self.filter_h + k)
                                    * self.filter_w
                                    + m];
                                let xv = x[(c * in_h + (i + k)) * in_w + (j + m)];
                                sum += wv * xv;
                            }
                        }
                    }
                    if self.use_bias {
                        sum += b[o];
                    }
                    pre[(o * out_h + i) * out_w + j] = sum;
                }
            }
        }
        let pre = Tensor::new(out_shape, pre);
        let act = tensor::relu(&pre);
        Ok((pre, act))
    }

    /// Backward pass. `d_output` is the gradient w.r.t. the ReLU activation;
    /// the ReLU mask from `pre_act` is applied first, then the weight
    /// gradient is the correlation of the input with the masked error and the
    /// input gradient is the full (transposed) convolution of the masked
    /// error with the weights.
    pub fn backward(
        &self,
        input: &Tensor,
        pre_act: &Tensor,
        d_output: &Tensor,
    ) -> Result<LayerGradients, LayerError> {
        let out_shape = self.output_shape(input.shape())?;
        if d_output.shape() != out_shape.as_slice() {
            return Err(shape_mismatch("conv d_output", &out_shape, d_output.shape()));
        }
        if pre_act.shape() != out_shape.as_slice() {
            return Err(shape_mismatch("conv pre_act", &out_shape, pre_act.shape()));
        }
        let (in_h, in_w) = (input.shape()[1], input.shape()[2]);
        let (out_h, out_w) = (out_shape[1], out_shape[2]);
        let x = input.data();
        let w = self.weights.data();

        // d_pre = relu'(pre) ⊙ d_output
        let mut d_pre = vec![0.0; d_output.len()];
        for (dp, (&p, &d)) in d_pre
            .iter_mut()
            .zip(pre_act.data().iter().zip(d_output.data()))
        {
            *dp = tensor::relu_grad_scalar(p) * d;
        }

        let mut d_weights = vec![0.0; self.weights.len()];
        let mut d_bias = vec![0.0; self.out_channels];
        let mut d_input = vec![0.0; input.len()];

        for o in 0..self.out_channels {
            for i in 0..out_h {
                for j in 0..out_w {
                    let g = d_pre[(o * out_h + i) * out_w + j];
                    if g == 0.0 {
                        continue;
                    }
                    if self.use_bias {
                        d_bias[o] += g;
                    }
                    for c in 0..self.in_channels {
                        for k in 0..self.filter_h {
                            for m in 0..self.filter_w {
                                let widx = ((o * self.in_channels + c) * self.filter_h + k)
                                    * self.filter_w
                                    + m;
                                let xidx = (c * in_h + (i + k)) * in_w + (j + m);
                                d_weights[widx] += g * x[xidx];
                                d_input[xidx] += g * w[widx];
                            }
                        }
                    }
                }
            }
        }

        Ok(LayerGradients {
            d_weights: Tensor::new(self.weights.shape().to_vec(), d_weights),
            d_bias: Tensor::new(vec![self.out_channels], d_bias),
            d_input: Tensor::new(input.shape().to_vec(), d_input),
        })
    }
}

/// Cached argmax positions from a pooling forward pass, used to route
/// gradients back to the winning inputs.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Vec<usize>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

/// 2x1 max pooling over the height axis.
///
/// Ties go to the smaller index; when the height is odd the final row is
/// dropped. The layer caches the argmax of its last forward pass for the
/// backward routing, which is why training forwards take `&mut self`; pure
/// inference should use [`maxpool_compute`] instead.
#[derive(Debug, Clone)]
pub struct MaxPoolLayer {
    pub pool_h: usize,
    pub pool_w: usize,
    cache: Option<PoolCache>,
}

impl Default for MaxPoolLayer {
    fn default() -> Self {
        Self::new()
    }
}

impl MaxPoolLayer {
    pub fn new() -> Self {
        Self {
            pool_h: 2,
            pool_w: 1,
            cache: None,
        }
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>, LayerError> {
        if input_shape.len() != 3 {
            return Err(shape_mismatch("pool input", "3-D [ch, H, W]", input_shape));
        }
        if input_shape[1] < self.pool_h {
            return Err(LayerError::PoolInputTooShort {
                rows: input_shape[1],
            });
        }
        Ok(vec![
            input_shape[0],
            input_shape[1] / self.pool_h,
            input_shape[2] / self.pool_w,
        ])
    }

    /// Forward pass that stores the argmax cache on the layer.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, LayerError> {
        let (out, cache) = maxpool_compute(input, self.pool_h, self.pool_w)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Routes `d_output` back to the argmax positions of the last forward.
    /// Dropped odd rows receive zero.
    pub fn backward(&self, d_output: &Tensor) -> Result<Tensor, LayerError> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(LayerError::PoolBackwardBeforeForward)?;
        maxpool_route(cache, d_output)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Pure max-pooling forward: returns the pooled tensor and the argmax cache.
pub fn maxpool_compute(
    input: &Tensor,
    pool_h: usize,
    pool_w: usize,
) -> Result<(Tensor, PoolCache), LayerError> {
    if input.shape().len() != 3 {
        return Err(shape_mismatch("pool input", "3-D [ch, H, W]", input.shape()));
    }
    let (ch, in_h, in_w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if in_h < pool_h {
        return Err(LayerError::PoolInputTooShort { rows: in_h });
    }
    let (out_h, out_w) = (in_h / pool_h, in_w / pool_w);
    let x = input.data();

    let mut out = vec![0.0; ch * out_h * out_w];
    let mut argmax = vec![0usize; ch * out_h * out_w];
    for c in 0..ch {
        for i in 0..out_h {
            for j in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for k in 0..pool_h {
                    for m in 0..pool_w {
                        let idx = (c * in_h + (i * pool_h + k)) * in_w + (j * pool_w + m);
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * out_h + i) * out_w + j;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    let out_shape = vec![ch, out_h, out_w];
    Ok((
        Tensor::new(out_shape.clone(), out),
        PoolCache {
            argmax,
            in_shape: input.shape().to_vec(),
            out_shape,
        },
    ))
}

/// Scatter of `d_output` onto the cached argmax positions.
pub fn maxpool_route(cache: &PoolCache, d_output: &Tensor) -> Result<Tensor, LayerError> {
    if d_output.shape() != cache.out_shape.as_slice() {
        return Err(shape_mismatch(
            "pool d_output",
            &cache.out_shape,
            d_output.shape(),
        ));
    }
    let mut d_input = Tensor::zeros(cache.in_shape.clone());
    let di = d_input.data_mut();
    for (o, &src) in cache.argmax.iter().enumerate() {
        di[src] += d_output.data()[o];
    }
    Ok(d_input)
}

/// Fully connected layer. Weights have shape `[in_size, out_size]` so that
/// `pre[i] = sum_k input[k] * weights[k, i] + bias[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_size: usize,
    pub out_size: usize,
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    pub use_bias: bool,
}

impl DenseLayer {
    pub fn new(
        in_size: usize,
        out_size: usize,
        activation: Activation,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            in_size,
            out_size,
            weights: Tensor::new(
                vec![in_size, out_size],
                glorot_uniform(rng, in_size, out_size, in_size * out_size),
            ),
            bias: Tensor::zeros(vec![out_size]),
            activation,
            use_bias,
        }
    }

    pub fn from_weights(
        weights: Tensor,
        bias: Tensor,
        activation: Activation,
        use_bias: bool,
    ) -> Self {
        let s = weights.shape().to_vec();
        assert_eq!(s.len(), 2, "dense weights must be 2-D, got {s:?}");
        assert_eq!(bias.shape(), &[s[1]], "dense bias must be [out_size]");
        Self {
            in_size: s[0],
            out_size: s[1],
            weights,
            bias,
            activation,
            use_bias,
        }
    }

    /// Affine transform plus activation. Returns `(pre_activation, activation)`.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tensor), LayerError> {
        if input.len() != self.in_size {
            return Err(shape_mismatch(
                "dense input",
                [self.in_size],
                input.shape(),
            ));
        }
        let x = input.data();
        let w = self.weights.data();
        let mut pre = vec![0.0; self.out_size];
        for (i, p) in pre.iter_mut().enumerate() {
            let mut sum = 0.0;
            for (k, &xv) in x.iter().enumerate() {
                sum += xv * w[k * self.out_size + i];
            }
            if self.use_bias {
                sum += self.bias.data()[i];
            }
            *p = sum;
        }
        let pre = Tensor::from_slice(&pre);
        let act = pre.map(|v| self.activation.apply(v));
        Ok((pre, act))
    }

    /// Backward pass from the gradient w.r.t. the activation output; applies
    /// the activation derivative at `pre_act` first.
    pub fn backward(
        &self,
        input: &Tensor,
        pre_act: &Tensor,
        d_output: &Tensor,
    ) -> Result<LayerGradients, LayerError> {
        if pre_act.len() != self.out_size {
            return Err(shape_mismatch("dense pre_act", [self.out_size], pre_act.shape()));
        }
        if d_output.len() != self.out_size {
            return Err(shape_mismatch(
                "dense d_output",
                [self.out_size],
                d_output.shape(),
            ));
        }
        let d_pre: Vec<f64> = pre_act
            .data()
            .iter()
            .zip(d_output.data())
            .map(|(&p, &d)| self.activation.grad(p) * d)
            .collect();
        self.backward_from_preact(input, &Tensor::from_slice(&d_pre))
    }

    /// Backward pass seeded directly with the gradient w.r.t. the
    /// pre-activation, used when the loss already folds in the activation
    /// derivative (sigmoid output with cross-entropy).
    pub fn backward_from_preact(
        &self,
        input: &Tensor,
        d_pre: &Tensor,
    ) -> Result<LayerGradients, LayerError> {
        if input.len() != self.in_size {
            return Err(shape_mismatch("dense input", [self.in_size], input.shape()));
        }
        if d_pre.len() != self.out_size {
            return Err(shape_mismatch("dense d_pre", [self.out_size], d_pre.shape()));
        }
        let x = input.data();
        let w = self.weights.data();
        let g = d_pre.data();

        let mut d_weights = vec![0.0; self.in_size * self.out_size];
        let mut d_input = vec![0.0; self.in_size];
        for k in 0..self.in_size {
            let mut acc = 0.0;
            for i in 0..self.out_size {
                d_weights[k * self.out_size + i] = x[k] * g[i];
                acc += w[k * self.out_size + i] * g[i];
            }
            d_input[k] = acc;
        }

        let d_bias = if self.use_bias {
            Tensor::from_slice(g)
        } else {
            Tensor::zeros(vec![self.out_size])
        };
        Ok(LayerGradients {
            d_weights: Tensor::new(vec![self.in_size, self.out_size], d_weights),
            d_bias,
            d_input: Tensor::from_slice(&d_input),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    /// Brute-force valid convolution, the independent oracle for the forward
    /// pass: plain 6-nested loops in the same c, k, m summation order.
    fn conv_oracle(layer: &ConvLayer, input: &Tensor) -> Tensor {
        let (in_h, in_w) = (input.shape()[1], input.shape()[2]);
        let out_h = in_h - layer.filter_h + 1;
        let out_w = in_w - layer.filter_w + 1;
        let mut out = Tensor::zeros(vec![layer.out_channels, out_h, out_w]);
        for o in 0..layer.out_channels {
            for i in 0..out_h {
                for j in 0..out_w {
                    let mut sum = 0.0;
                    for c in 0..layer.in_channels {
                        for k in 0..layer.filter_h {
                            for m in 0..layer.filter_w {
                                let wv = layer.weights.data()[((o * layer.in_channels + c)
                                    * layer.filter_h
                                    + k)
                                    * layer.filter_w
                                    + m];
                                let xv = input.data()[(c * in_h + (i + k)) * in_w + (j + m)];
                                sum += wv * xv;
                            }
                        }
                    }
                    if layer.use_bias {
                        sum += layer.bias.data()[o];
                    }
                    out.data_mut()[(o * out_h + i) * out_w + j] = sum;
                }
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / f64::max(a.abs().max(b.abs()), 1e-4)
    }

    #[test]
    fn conv_forward_hand_case() {
        // 1 channel, input [[1,2,3]], one 1x2 filter [[1,1]], bias 0.
        let layer = ConvLayer::from_weights(
            Tensor::new(vec![1, 1, 1, 2], vec![1.0, 1.0]),
            Tensor::zeros(vec![1]),
            true,
        );
        let input = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]);
        let (pre, act) = layer.forward(&input).unwrap();
        assert_eq!(pre.data(), &[3.0, 5.0]);
        assert_eq!(act.data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv_forward_identity_kernel() {
        let layer = ConvLayer::from_weights(
            Tensor::new(vec![1, 1, 1, 1], vec![1.0]),
            Tensor::zeros(vec![1]),
            true,
        );
        let input = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let (pre, _) = layer.forward(&input).unwrap();
        assert_eq!(pre.data(), input.data());
    }

    #[test]
    fn conv_forward_zero_weights() {
        let layer = ConvLayer::from_weights(
            Tensor::zeros(vec![2, 1, 2, 2]),
            Tensor::zeros(vec![2]),
            true,
        );
        let input = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64).collect());
        let (pre, _) = layer.forward(&input).unwrap();
        assert!(pre.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_forward_shape_mismatch_names_dims() {
        let layer = ConvLayer::from_weights(
            Tensor::zeros(vec![1, 2, 1, 1]),
            Tensor::zeros(vec![1]),
            true,
        );
        let input = Tensor::new(vec![1, 2, 2], vec![0.0; 4]);
        let err = layer.forward(&input).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = StdRng::seed_from_u64(1);
        let layer = ConvLayer::new(1, 2, 2, 2, true, &mut rng);
        let input = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f64 * 0.1).collect());
        let (pre, _) = layer.forward(&input).unwrap();
        let grads = layer
            .backward(&input, &pre, &Tensor::zeros(pre.shape().to_vec()))
            .unwrap();
        assert!(grads.d_weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.d_bias.data().iter().all(|&v| v == 0.0));
        assert!(grads.d_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_case() {
        // input [[2]], filter [[3]], positive pre_act, d_output [[1]].
        let layer = ConvLayer::from_weights(
            Tensor::new(vec![1, 1, 1, 1], vec![3.0]),
            Tensor::zeros(vec![1]),
            true,
        );
        let input = Tensor::new(vec![1, 1, 1], vec![2.0]);
        let (pre, _) = layer.forward(&input).unwrap();
        assert_eq!(pre.data(), &[6.0]);
        let grads = layer
            .backward(&input, &pre, &Tensor::new(vec![1, 1, 1], vec![1.0]))
            .unwrap();
        assert_eq!(grads.d_weights.data(), &[2.0]);
        assert_eq!(grads.d_input.data(), &[3.0]);
        assert_eq!(grads.d_bias.data(), &[1.0]);
    }

    /// Central finite differences of the scalar loss sum(act) w.r.t. each
    /// weight, the independent oracle for conv_backward.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut layer = ConvLayer::new(1, 2, 2, 2, true, &mut rng);
        // Keep pre-activations away from the ReLU kink.
        let input = Tensor::new(
            vec![1, 4, 5],
            (0..20).map(|i| 0.3 + 0.07 * (i as f64)).collect(),
        );
        let (pre, act) = layer.forward(&input).unwrap();
        assert!(pre.data().iter().all(|&p| p.abs() > 1e-3));
        let d_out = Tensor::new(act.shape().to_vec(), vec![1.0; act.len()]);
        let grads = layer.backward(&input, &pre, &d_out).unwrap();

        let h = 1e-6;
        for idx in 0..layer.weights.len() {
            let orig = layer.weights.data()[idx];
            layer.weights.data_mut()[idx] = orig + h;
            let plus: f64 = layer.forward(&input).unwrap().1.data().iter().sum();
            layer.weights.data_mut()[idx] = orig - h;
            let minus: f64 = layer.forward(&input).unwrap().1.data().iter().sum();
            layer.weights.data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                rel_err(fd, grads.d_weights.data()[idx]) < 1e-6,
                "weight {idx}: fd={fd} analytic={}",
                grads.d_weights.data()[idx]
            );
        }
    }

    #[test]
    fn maxpool_forward_column() {
        let mut pool = MaxPoolLayer::new();
        let input = Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 2.0, 0.0]);
        let out = pool.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 1]);
        assert_eq!(out.data(), &[3.0, 2.0]);
    }

    #[test]
    fn maxpool_forward_odd_length_drops_tail() {
        let mut pool = MaxPoolLayer::new();
        let input = Tensor::new(vec![1, 5, 1], vec![5.0, 1.0, 4.0, 4.0, 9.0]);
        let out = pool.forward(&input).unwrap();
        assert_eq!(out.data(), &[5.0, 4.0]);
    }

    #[test]
    fn maxpool_tie_takes_first_index() {
        let mut pool = MaxPoolLayer::new();
        let input = Tensor::new(vec![1, 2, 1], vec![2.0, 2.0]);
        let out = pool.forward(&input).unwrap();
        assert_eq!(out.data(), &[2.0]);
        let d_in = pool.backward(&Tensor::new(vec![1, 1, 1], vec![1.0])).unwrap();
        assert_eq!(d_in.data(), &[1.0, 0.0]);
    }

    #[test]
    fn maxpool_too_short_errors() {
        let mut pool = MaxPoolLayer::new();
        let input = Tensor::new(vec![1, 1, 1], vec![1.0]);
        assert!(matches!(
            pool.forward(&input),
            Err(LayerError::PoolInputTooShort { rows: 1 })
        ));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let mut pool = MaxPoolLayer::new();
        let input = Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 2.0, 0.0]);
        pool.forward(&input).unwrap();
        let d_in = pool
            .backward(&Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(d_in.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_zeros() {
        let mut pool = MaxPoolLayer::new();
        let input = Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 2.0, 0.0]);
        pool.forward(&input).unwrap();
        let d_in = pool.backward(&Tensor::zeros(vec![1, 2, 1])).unwrap();
        assert!(d_in.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_backward_before_forward_errors() {
        let pool = MaxPoolLayer::new();
        assert!(matches!(
            pool.backward(&Tensor::zeros(vec![1, 2, 1])),
            Err(LayerError::PoolBackwardBeforeForward)
        ));
    }

    #[test]
    fn maxpool_routing_matches_finite_differences() {
        // Distinct values so the max is differentiable at the sample point.
        let input = Tensor::new(vec![1, 4, 1], vec![0.9, 3.1, 2.2, 0.4]);
        let (_, cache) = maxpool_compute(&input, 2, 1).unwrap();
        let d_in = maxpool_route(&cache, &Tensor::new(vec![1, 2, 1], vec![1.0, 1.0])).unwrap();
        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let sp: f64 = maxpool_compute(&plus, 2, 1).unwrap().0.data().iter().sum();
            let sm: f64 = maxpool_compute(&minus, 2, 1).unwrap().0.data().iter().sum();
            let fd = (sp - sm) / (2.0 * h);
            assert!(
                (fd - d_in.data()[idx]).abs() < 1e-9,
                "idx {idx}: fd={fd} routed={}",
                d_in.data()[idx]
            );
        }
    }

    #[test]
    fn dense_forward_identity_weights() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let layer = DenseLayer::from_weights(eye, Tensor::zeros(vec![2]), Activation::Relu, true);
        let input = Tensor::from_slice(&[0.7, -0.2]);
        let (pre, _) = layer.forward(&input).unwrap();
        assert_eq!(pre.data(), input.data());
    }

    #[test]
    fn dense_forward_hand_sum() {
        let layer = DenseLayer::from_weights(
            Tensor::new(vec![2, 1], vec![1.0, 1.0]),
            Tensor::zeros(vec![1]),
            Activation::Relu,
            true,
        );
        let (pre, _) = layer.forward(&Tensor::from_slice(&[1.0, 2.0])).unwrap();
        assert_eq!(pre.data(), &[3.0]);
    }

    #[test]
    fn dense_forward_zero_input_yields_bias() {
        let layer = DenseLayer::from_weights(
            Tensor::new(vec![2, 2], vec![0.3, -0.4, 0.5, 0.6]),
            Tensor::from_slice(&[1.5, -2.5]),
            Activation::Relu,
            true,
        );
        let (pre, _) = layer.forward(&Tensor::from_slice(&[0.0, 0.0])).unwrap();
        assert_eq!(pre.data(), &[1.5, -2.5]);
    }

    #[test]
    fn dense_forward_length_mismatch() {
        let mut rng = StdRng::seed_from_u64(2);
        let layer = DenseLayer::new(3, 2, Activation::Relu, true, &mut rng);
        assert!(layer.forward(&Tensor::from_slice(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn dense_backward_zero_upstream() {
        let mut rng = StdRng::seed_from_u64(3);
        let layer = DenseLayer::new(3, 2, Activation::Relu, true, &mut rng);
        let input = Tensor::from_slice(&[1.0, -1.0, 2.0]);
        let (pre, _) = layer.forward(&input).unwrap();
        let grads = layer
            .backward(&input, &pre, &Tensor::zeros(vec![2]))
            .unwrap();
        assert!(grads.d_weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.d_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_backward_scalar_chain() {
        // input [2], weight [[3]], ReLU active, d_output [1].
        let layer = DenseLayer::from_weights(
            Tensor::new(vec![1, 1], vec![3.0]),
            Tensor::zeros(vec![1]),
            Activation::Relu,
            true,
        );
        let input = Tensor::from_slice(&[2.0]);
        let (pre, _) = layer.forward(&input).unwrap();
        assert!(pre.data()[0] > 0.0);
        let grads = layer
            .backward(&input, &pre, &Tensor::from_slice(&[1.0]))
            .unwrap();
        assert_eq!(grads.d_weights.data(), &[2.0]);
        assert_eq!(grads.d_input.data(), &[3.0]);
        assert_eq!(grads.d_bias.data(), &[1.0]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut layer = DenseLayer::new(5, 3, Activation::Relu, true, &mut rng);
        // Bias the pre-activations away from zero.
        for b in layer.bias.data_mut() {
            *b = 0.5;
        }
        let input = Tensor::from_slice(&[0.4, -0.3, 0.8, 0.1, -0.6]);
        let (pre, act) = layer.forward(&input).unwrap();
        assert!(pre.data().iter().all(|&p| p.abs() > 1e-3));
        let d_out = Tensor::new(vec![3], vec![1.0; 3]);
        let grads = layer.backward(&input, &pre, &d_out).unwrap();

        let h = 1e-6;
        for idx in 0..layer.weights.len() {
            let orig = layer.weights.data()[idx];
            layer.weights.data_mut()[idx] = orig + h;
            let plus: f64 = layer.forward(&input).unwrap().1.data().iter().sum();
            layer.weights.data_mut()[idx] = orig - h;
            let minus: f64 = layer.forward(&input).unwrap().1.data().iter().sum();
            layer.weights.data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                rel_err(fd, grads.d_weights.data()[idx]) < 1e-6,
                "weight {idx}: fd={fd} analytic={}",
                grads.d_weights.data()[idx]
            );
        }
        let _ = act;
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Valid-convolution shape law: output dims = input dims - filter + 1.
        #[test]
        fn conv_shape_law(
            fh in 1usize..4, fw in 1usize..4,
            extra_h in 0usize..5, extra_w in 0usize..5,
            in_ch in 1usize..3, out_ch in 1usize..3,
        ) {
            let mut rng = StdRng::seed_from_u64(0);
            let layer = ConvLayer::new(in_ch, out_ch, fh, fw, true, &mut rng);
            let (h, w) = (fh + extra_h, fw + extra_w);
            let input = Tensor::zeros(vec![in_ch, h, w]);
            let (pre, act) = layer.forward(&input).unwrap();
            prop_assert_eq!(pre.shape(), &[out_ch, h - fh + 1, w - fw + 1]);
            prop_assert_eq!(act.shape(), pre.shape());
        }

        /// The production forward equals the naive 6-loop oracle bit-exactly.
        #[test]
        fn conv_forward_equals_oracle(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let layer = ConvLayer::new(2, 3, 2, 3, true, &mut rng);
            let input = Tensor::new(
                vec![2, 5, 6],
                (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let (pre, _) = layer.forward(&input).unwrap();
            let oracle = conv_oracle(&layer, &input);
            prop_assert_eq!(pre.data(), oracle.data());
        }

        /// Pool backward puts exactly one nonzero per window (absent ties).
        #[test]
        fn maxpool_one_nonzero_per_window(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let input = Tensor::new(vec![2, 3, 2], data);
            let (_, cache) = maxpool_compute(&input, 2, 1).unwrap();
            let ones = Tensor::new(cache.out_shape.clone(), vec![1.0; 2 * 1 * 2]);
            let d_in = maxpool_route(&cache, &ones).unwrap();
            let nonzeros = d_in.data().iter().filter(|&&v| v != 0.0).count();
            prop_assert_eq!(nonzeros, 4); // 2 channels x 1 window x 2 cols
        }
    }
}
