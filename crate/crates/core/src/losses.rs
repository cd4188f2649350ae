//! Softmax losses at the local (per-cell) and object level, with analytic
//! gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AggregatedVolume, Mask};
use crate::error::{Error, Result};
use crate::tensor::{softmax, spatial_max_pool, MaxPool, Tensor};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// d(-log max(p, floor))/dp
fn neg_log_grad(p: f64) -> f64 {
    if p > PROB_FLOOR {
        -1.0 / p
    } else {
        0.0
    }
}

/// Linear classifier over pooled object features, `L` classes, no background.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectClassifier {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ObjectClassifier {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        match weights.shape()[..] {
            [l, c] if bias.shape() == [l] && l >= 1 && c >= 1 => Ok(ObjectClassifier { weights, bias }),
            _ => Err(Error::invalid(format!(
                "object classifier needs L x C weights and L biases, got {:?} / {:?}",
                weights.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn zeros(categories: usize, channels: usize) -> Self {
        ObjectClassifier {
            weights: Tensor::zeros(&[categories, channels]),
            bias: Tensor::zeros(&[categories]),
        }
    }

    pub fn init(categories: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (channels as f64).sqrt();
        ObjectClassifier {
            weights: Tensor::new(
                vec![categories, channels],
                (0..categories * channels).map(|_| rng.random_range(-bound..bound)).collect(),
            )
            .expect("shape"),
            bias: Tensor::zeros(&[categories]),
        }
    }

    pub fn categories(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (l, c) = (self.categories(), self.channels());
        if features.len() != c {
            return Err(Error::invalid(format!(
                "object classifier expects {c} features, got {}",
                features.len()
            )));
        }
        Ok((0..l)
            .map(|k| {
                let row = &self.weights.data()[k * c..(k + 1) * c];
                self.bias.data()[k] + row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(features)?))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.weights.data(), self.bias.data()]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.data_mut(), self.bias.data_mut()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub loc: f64,
    pub obj: f64,
    pub total: f64,
    pub l0: f64,
    pub l1: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLoss {
    pub loss: f64,
    pub l0: f64,
    pub l1: f64,
    pub w: f64,
    /// Gradient with respect to the aggregated probability volume.
    pub grad: Tensor,
}

/// `loc = ((1 - w) * l1 + w * l0) / (W*H)` where `l1` sums `-log p_t` over
/// mask cells and `l0` sums `-log p_background` over the rest.
pub fn local_loss(agg: &AggregatedVolume, mask: &Mask, w: f64, label: usize) -> Result<LocalLoss> {
    let (k_all, h, wd) = agg.probs.dims3()?;
    let categories = k_all - 1;
    if label >= categories {
        return Err(Error::invalid(format!("label {label} out of range for {categories} categories")));
    }
    if (mask.height(), mask.width()) != (h, wd) {
        return Err(Error::invalid("mask extent does not match the activation volume"));
    }
    let plane = h * wd;
    let inv_area = 1.0 / plane as f64;
    let (mut l0, mut l1) = (0.0, 0.0);
    let mut grad = Tensor::zeros(agg.probs.shape());
    let probs = agg.probs.data();
    for (cell, &m) in mask.data().iter().enumerate() {
        let (channel, coeff) = if m == 1 {
            (label, (1.0 - w) * inv_area)
        } else {
            (categories, w * inv_area)
        };
        let p = probs[channel * plane + cell];
        if m == 1 {
            l1 += neg_log(p);
        } else {
            l0 += neg_log(p);
        }
        grad.data_mut()[channel * plane + cell] = coeff * neg_log_grad(p);
    }
    Ok(LocalLoss {
        loss: inv_area * ((1.0 - w) * l1 + w * l0),
        l0,
        l1,
        w,
        grad,
    })
}

/// Mask-weighted features max-pooled to one vector. The mask is a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatures {
    pub values: Vec<f64>,
    pool: MaxPool,
    mask: Mask,
}

impl ObjectFeatures {
    pub fn backward(&self, grad: &[f64]) -> Result<Tensor> {
        let mut g = self.pool.backward(grad)?;
        let plane = self.mask.height() * self.mask.width();
        for (idx, v) in g.data_mut().iter_mut().enumerate() {
            if self.mask.data()[idx % plane] == 0 {
                *v = 0.0;
            }
        }
        Ok(g)
    }

    /// Smallest gap between a channel's max and its runner-up.
    pub fn min_pool_gap(&self, weighted: &Tensor) -> f64 {
        let (c, _, _) = weighted.dims3().expect("rank-3");
        (0..c)
            .map(|k| {
                let best = self.values[k];
                let second = weighted
                    .channel(k)
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != self.pool.argmax[k])
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                best - second
            })
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn masked_features(features: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (_, h, w) = features.dims3()?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match features {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let plane = h * w;
    let mut weighted = features.clone();
    for (idx, v) in weighted.data_mut().iter_mut().enumerate() {
        *v *= mask.data()[idx % plane] as f64;
    }
    Ok(weighted)
}

pub fn object_features(features: &Tensor, mask: &Mask) -> Result<ObjectFeatures> {
    let weighted = masked_features(features, mask)?;
    let pool = spatial_max_pool(&weighted)?;
    Ok(ObjectFeatures {
        values: pool.values.data().to_vec(),
        pool,
        mask: mask.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLoss {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
    pub grad_features: Vec<f64>,
}

/// `-log p_t` of the softmax over the object classifier's logits.
pub fn object_loss(obj_feat: &[f64], clf: &ObjectClassifier, label: usize) -> Result<ObjectLoss> {
    let (l, c) = (clf.categories(), clf.channels());
    if label >= l {
        return Err(Error::invalid(format!("label {label} out of range for {l} categories")));
    }
    let probs = clf.predict(obj_feat)?;
    let loss = neg_log(probs[label]);
    // d loss / d logit_k = p_k - [k == t], unless the floor clipped p_t.
    let clipped = probs[label] <= PROB_FLOOR;
    let dlogits: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| if clipped { 0.0 } else { p - f64::from(u8::from(k == label)) })
        .collect();
    let mut grad_weights = vec![0.0; l * c];
    let mut grad_features = vec![0.0; c];
    for k in 0..l {
        let row = &clf.weights.data()[k * c..(k + 1) * c];
        for j in 0..c {
            grad_weights[k * c + j] = dlogits[k] * obj_feat[j];
            grad_features[j] += dlogits[k] * row[j];
        }
    }
    Ok(ObjectLoss {
        loss,
        probs,
        grad_weights: Tensor::new(vec![l, c], grad_weights)?,
        grad_bias: Tensor::from_vec(dlogits),
        grad_features,
    })
}

/// `total = loc + obj`, with the local-loss terms echoed.
pub fn total_loss(local: &LocalLoss, obj: f64) -> LossBreakdown {
    LossBreakdown {
        loc: local.loss,
        obj,
        total: local.loss + obj,
        l0: local.l0,
        l1: local.l1,
        w: local.w,
    }
}
