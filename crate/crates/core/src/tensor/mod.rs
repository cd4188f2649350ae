//! Dense double-precision tensors and the forward/backward primitives the
//! rest of the crate composes.
//!
//! Every primitive comes as a forward function and a matching analytic
//! adjoint. There is no tape: callers hold on to whatever the backward pass
//! needs (inputs, argmax indices) and call the adjoint explicitly.

mod gradcheck;

pub use gradcheck::{gradient_check, relative_error, FnCheck, GradCheck, GradCheckReport};

use crate::error::{Error, Result};

/// Rank-1 to rank-3 dense array, row-major with the channel axis outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::invalid(format!(
                "tensor rank must be 1..=3, got {}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 3, "tensor rank must be 1..=3");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn3(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(k, i, j));
                }
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    /// Channel `c` of a rank-3 tensor as a contiguous `h*w` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// A value together with the cotangent of a scalar loss with respect to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, grad: Tensor) -> Result<Self> {
        if value.shape() != grad.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match value shape {:?}",
                grad.shape(),
                value.shape()
            )));
        }
        Ok(GradPair { value, grad })
    }
}

fn check_conv1x1(features: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = features.dims3()?;
    let (k, wc) = match weights.shape()[..] {
        [k, wc] => (k, wc),
        _ => return Err(Error::invalid("conv1x1 weights must be rank-2 (K x C)")),
    };
    if wc != c {
        return Err(Error::invalid(format!(
            "conv1x1 weights expect {wc} input channels, features have {c}"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::invalid(format!(
            "conv1x1 bias must have shape [{k}], got {:?}",
            bias.shape()
        )));
    }
    Ok((k, c, h, w))
}

/// `out[k,i,j] = bias[k] + sum_c weights[k,c] * features[c,i,j]`.
pub fn conv1x1_forward(features: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k_out, c_in, h, w) = check_conv1x1(features, weights, bias)?;
    let plane = h * w;
    let mut out = vec![0.0; k_out * plane];
    for k in 0..k_out {
        let dst = &mut out[k * plane..(k + 1) * plane];
        dst.fill(bias.data[k]);
        for c in 0..c_in {
            let wkc = weights.data[k * c_in + c];
            let src = features.channel(c);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wkc * s;
            }
        }
    }
    Ok(Tensor {
        shape: vec![k_out, h, w],
        data: out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1Grads {
    pub features: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv1x1_backward(
    features: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<Conv1x1Grads> {
    let (c_in, h, w) = features.dims3()?;
    let (k_out, go_h, go_w) = grad_out.dims3()?;
    if weights.shape() != [k_out, c_in] || (go_h, go_w) != (h, w) {
        return Err(Error::invalid(format!(
            "conv1x1 backward shapes inconsistent: features {:?}, weights {:?}, grad {:?}",
            features.shape(),
            weights.shape(),
            grad_out.shape()
        )));
    }
    let plane = h * w;
    let mut g_bias = vec![0.0; k_out];
    let mut g_weights = vec![0.0; k_out * c_in];
    let mut g_features = vec![0.0; c_in * plane];
    for k in 0..k_out {
        let go = grad_out.channel(k);
        g_bias[k] = go.iter().sum();
        for c in 0..c_in {
            let f = features.channel(c);
            g_weights[k * c_in + c] = go.iter().zip(f).map(|(a, b)| a * b).sum();
            let wkc = weights.data[k * c_in + c];
            let gf = &mut g_features[c * plane..(c + 1) * plane];
            for (d, g) in gf.iter_mut().zip(go) {
                *d += wkc * g;
            }
        }
    }
    Ok(Conv1x1Grads {
        features: Tensor {
            shape: vec![c_in, h, w],
            data: g_features,
        },
        weights: Tensor {
            shape: vec![k_out, c_in],
            data: g_weights,
        },
        bias: Tensor {
            shape: vec![k_out],
            data: g_bias,
        },
    })
}

/// Numerically stable softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Softmax over the channel axis, independently at every spatial location.
pub fn softmax_channel(logits: &Tensor) -> Result<Tensor> {
    let (k_out, h, w) = logits.dims3()?;
    let plane = h * w;
    let mut out = vec![0.0; k_out * plane];
    let mut column = vec![0.0; k_out];
    for p in 0..plane {
        for (k, slot) in column.iter_mut().enumerate() {
            *slot = logits.data[k * plane + p];
        }
        for (k, prob) in softmax(&column).into_iter().enumerate() {
            out[k * plane + p] = prob;
        }
    }
    Ok(Tensor {
        shape: vec![k_out, h, w],
        data: out,
    })
}

/// Adjoint of [`softmax_channel`], expressed through its output:
/// `dz_k = p_k * (g_k - sum_j p_j g_j)`.
pub fn softmax_channel_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    let (k_out, h, w) = probs.dims3()?;
    if grad_probs.shape() != probs.shape() {
        return Err(Error::invalid("softmax backward: gradient shape mismatch"));
    }
    let plane = h * w;
    let mut out = vec![0.0; k_out * plane];
    for p in 0..plane {
        let mut dot = 0.0;
        for k in 0..k_out {
            dot += probs.data[k * plane + p] * grad_probs.data[k * plane + p];
        }
        for k in 0..k_out {
            let idx = k * plane + p;
            out[idx] = probs.data[idx] * (grad_probs.data[idx] - dot);
        }
    }
    Ok(Tensor {
        shape: vec![k_out, h, w],
        data: out,
    })
}

/// Result of a spatial max pool: one value per channel plus the flat spatial
/// index (`i * w + j`) that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub values: Tensor,
    pub argmax: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl MaxPool {
    /// Routes `grad_out[c]` to the recorded argmax cell of channel `c`.
    pub fn backward(&self, grad_out: &[f64]) -> Result<Tensor> {
        let c_out = self.argmax.len();
        if grad_out.len() != c_out {
            return Err(Error::invalid(format!(
                "max-pool backward expects {c_out} gradients, got {}",
                grad_out.len()
            )));
        }
        let plane = self.height * self.width;
        let mut out = vec![0.0; c_out * plane];
        for (c, (&g, &idx)) in grad_out.iter().zip(&self.argmax).enumerate() {
            out[c * plane + idx] = g;
        }
        Ok(Tensor {
            shape: vec![c_out, self.height, self.width],
            data: out,
        })
    }
}

/// Per-channel spatial maximum. Ties resolve to the first cell in row-major order.
pub fn spatial_max_pool(features: &Tensor) -> Result<MaxPool> {
    let (c_in, h, w) = features.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("max pool over an empty spatial extent"));
    }
    let mut values = Vec::with_capacity(c_in);
    let mut argmax = Vec::with_capacity(c_in);
    for c in 0..c_in {
        let (mut best_idx, mut best) = (0, f64::NEG_INFINITY);
        for (idx, &v) in features.channel(c).iter().enumerate() {
            if v > best {
                best = v;
                best_idx = idx;
            }
        }
        values.push(best);
        argmax.push(best_idx);
    }
    Ok(MaxPool {
        values: Tensor::from_vec(values),
        argmax,
        height: h,
        width: w,
    })
}

pub fn spatial_avg_pool(volume: &Tensor) -> Result<Tensor> {
    let (k_out, h, w) = volume.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("average pool over an empty spatial extent"));
    }
    let scale = 1.0 / (h * w) as f64;
    Ok(Tensor::from_vec(
        (0..k_out)
            .map(|k| volume.channel(k).iter().sum::<f64>() * scale)
            .collect(),
    ))
}

pub fn spatial_avg_pool_backward(grad_out: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("average pool over an empty spatial extent"));
    }
    let scale = 1.0 / (h * w) as f64;
    Ok(Tensor::from_fn3(grad_out.len(), h, w, |k, _, _| grad_out[k] * scale))
}
