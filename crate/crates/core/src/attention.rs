//! Attention from classifier activations.
//!
//! `n` linear local classifiers are applied at every feature cell, giving
//! `n` dense `(L+1) x H x W` activation volumes. They are max-pooled along the
//! classifier dimension into one aggregated volume, the attention map takes
//! the per-cell max over the `L` fine-grained channels (the last channel is
//! background), and Otsu's method turns that map into a binary object mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv1x1_backward, conv1x1_forward, softmax_channel, softmax_channel_backward, Tensor};

pub const DEFAULT_OTSU_BINS: usize = 256;
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.1;
const DEGENERATE_RANGE: f64 = 1e-12;

/// Which per-classifier quantity the classifier-dimension max runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregateOn {
    /// Softmax each classifier, then take the max of probabilities.
    #[default]
    Probs,
    /// Take the max of raw logits, then softmax the aggregated volume.
    Logits,
}

impl std::str::FromStr for AggregateOn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "probs" => Ok(AggregateOn::Probs),
            "logits" => Ok(AggregateOn::Logits),
            other => Err(format!("expected `probs` or `logits`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for AggregateOn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregateOn::Probs => "probs",
            AggregateOn::Logits => "logits",
        })
    }
}

/// One `(L+1) x C` linear classifier, applied as a 1x1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalClassifier {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalClassifierBank {
    categories: usize,
    channels: usize,
    pub classifiers: Vec<LocalClassifier>,
}

impl LocalClassifierBank {
    pub fn new(categories: usize, channels: usize, classifiers: Vec<LocalClassifier>) -> Result<Self> {
        if classifiers.is_empty() {
            return Err(Error::invalid("a classifier bank needs at least one classifier"));
        }
        if categories < 1 || channels < 1 {
            return Err(Error::invalid("classifier bank needs L >= 1 and C >= 1"));
        }
        for clf in &classifiers {
            if clf.weights.shape() != [categories + 1, channels] || clf.bias.shape() != [categories + 1] {
                return Err(Error::invalid(format!(
                    "local classifier must be {}x{} with {} biases",
                    categories + 1,
                    channels,
                    categories + 1
                )));
            }
        }
        Ok(LocalClassifierBank {
            categories,
            channels,
            classifiers,
        })
    }

    pub fn zeros(n: usize, categories: usize, channels: usize) -> Result<Self> {
        let clf = LocalClassifier {
            weights: Tensor::zeros(&[categories + 1, channels]),
            bias: Tensor::zeros(&[categories + 1]),
        };
        Self::new(categories, channels, vec![clf; n])
    }

    /// Uniform init in `±1/sqrt(C)` with zero bias; each classifier draws
    /// its own weights so the max over classifiers is not symmetric.
    pub fn init(n: usize, categories: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (channels as f64).sqrt();
        let classifiers = (0..n)
            .map(|_| LocalClassifier {
                weights: Tensor::new(
                    vec![categories + 1, channels],
                    (0..(categories + 1) * channels).map(|_| rng.random_range(-bound..bound)).collect(),
                )
                .expect("shape"),
                bias: Tensor::zeros(&[categories + 1]),
            })
            .collect();
        Self::new(categories, channels, classifiers)
    }

    pub fn len(&self) -> usize {
        self.classifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classifiers.is_empty()
    }

    /// Number of fine-grained categories `L` (the volume has `L+1` channels).
    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.classifiers
            .iter()
            .flat_map(|c| [c.weights.data(), c.bias.data()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.classifiers
            .iter_mut()
            .flat_map(|c| {
                let LocalClassifier { weights, bias } = c;
                [weights.data_mut(), bias.data_mut()]
            })
            .collect()
    }

    fn logits(&self, features: &Tensor) -> Result<Vec<Tensor>> {
        let (c, _, _) = features.dims3()?;
        if c != self.channels {
            return Err(Error::invalid(format!(
                "features have {c} channels, classifier bank expects {}",
                self.channels
            )));
        }
        self.classifiers
            .iter()
            .map(|clf| conv1x1_forward(features, &clf.weights, &clf.bias))
            .collect()
    }

    pub fn forward(&self, features: &Tensor, mode: AggregateOn) -> Result<BankForward> {
        let logits = self.logits(features)?;
        let (volumes, agg) = match mode {
            AggregateOn::Probs => {
                let probs = logits.iter().map(softmax_channel).collect::<Result<Vec<_>>>()?;
                let agg = aggregate(&probs)?;
                (probs, agg)
            }
            AggregateOn::Logits => {
                let mut agg = aggregate(&logits)?;
                agg.probs = softmax_channel(&agg.probs)?;
                (logits, agg)
            }
        };
        Ok(BankForward { mode, volumes, agg })
    }
}

/// Dense local activations: one `(L+1) x H x W` probability volume per classifier.
pub fn dense_local_activations(features: &Tensor, bank: &LocalClassifierBank) -> Result<Vec<Tensor>> {
    bank.logits(features)?.iter().map(softmax_channel).collect()
}

/// Classifier-dimension max of the dense activation volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedVolume {
    /// `(L+1) x H x W` aggregated probability volume.
    pub probs: Tensor,
    /// Flat, same layout as `probs`: index of the classifier that won each entry.
    pub winner: Vec<usize>,
}

impl AggregatedVolume {
    pub fn categories(&self) -> usize {
        self.probs.shape()[0] - 1
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.probs.shape()[1], self.probs.shape()[2])
    }

    /// Routes each entry's gradient to the classifier that won it.
    pub fn backward(&self, grad: &Tensor, n: usize) -> Result<Vec<Tensor>> {
        if grad.shape() != self.probs.shape() {
            return Err(Error::invalid("aggregate backward: gradient shape mismatch"));
        }
        let mut out = vec![Tensor::zeros(self.probs.shape()); n];
        for (idx, (&g, &win)) in grad.data().iter().zip(&self.winner).enumerate() {
            if win >= n {
                return Err(Error::invalid(format!("winner {win} out of range for {n} classifiers")));
            }
            out[win].data_mut()[idx] = g;
        }
        Ok(out)
    }
}

/// Elementwise max over classifiers; ties go to the lowest classifier index.
pub fn aggregate(volumes: &[Tensor]) -> Result<AggregatedVolume> {
    let first = volumes.first().ok_or_else(|| Error::invalid("aggregate needs at least one volume"))?;
    first.dims3()?;
    if volumes.iter().any(|v| v.shape() != first.shape()) {
        return Err(Error::invalid("aggregate: activation volumes differ in shape"));
    }
    let mut probs = first.clone();
    let mut winner = vec![0usize; first.len()];
    for (i, vol) in volumes.iter().enumerate().skip(1) {
        for ((best, win), &v) in probs.data_mut().iter_mut().zip(winner.iter_mut()).zip(vol.data()) {
            if v > *best {
                *best = v;
                *win = i;
            }
        }
    }
    Ok(AggregatedVolume { probs, winner })
}

/// Everything the backward pass through the classifier bank needs.
#[derive(Debug, Clone)]
pub struct BankForward {
    pub mode: AggregateOn,
    /// Per-classifier volumes that entered the max: probabilities in
    /// [`AggregateOn::Probs`] mode, logits in [`AggregateOn::Logits`] mode.
    pub volumes: Vec<Tensor>,
    pub agg: AggregatedVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankGrads {
    /// `(weights, bias)` gradient per classifier.
    pub classifiers: Vec<(Tensor, Tensor)>,
    pub features: Tensor,
}

impl BankForward {
    /// Backpropagates a gradient on the aggregated probability volume to the
    /// classifier parameters and the input features.
    pub fn backward(&self, bank: &LocalClassifierBank, features: &Tensor, grad_probs: &Tensor) -> Result<BankGrads> {
        let n = bank.len();
        let grad_logits: Vec<Tensor> = match self.mode {
            AggregateOn::Probs => {
                let routed = self.agg.backward(grad_probs, n)?;
                routed
                    .iter()
                    .zip(&self.volumes)
                    .map(|(g, p)| softmax_channel_backward(p, g))
                    .collect::<Result<_>>()?
            }
            AggregateOn::Logits => {
                let g = softmax_channel_backward(&self.agg.probs, grad_probs)?;
                self.agg.backward(&g, n)?
            }
        };
        let mut g_features = Tensor::zeros(features.shape());
        let mut classifiers = Vec::with_capacity(n);
        for (clf, g) in bank.classifiers.iter().zip(&grad_logits) {
            let grads = conv1x1_backward(features, &clf.weights, g)?;
            for (acc, v) in g_features.data_mut().iter_mut().zip(grads.features.data()) {
                *acc += v;
            }
            classifiers.push((grads.weights, grads.bias));
        }
        Ok(BankGrads {
            classifiers,
            features: g_features,
        })
    }
}

/// `M[i,j] = max_{k < L} A[k,i,j]`; the background channel is excluded.
pub fn attention_map(agg: &AggregatedVolume) -> Result<Tensor> {
    let (k_all, h, w) = agg.probs.dims3()?;
    if k_all < 2 {
        return Err(Error::invalid("attention map needs at least one fine-grained category"));
    }
    let plane = h * w;
    let mut map = vec![f64::NEG_INFINITY; plane];
    for k in 0..k_all - 1 {
        for (m, &v) in map.iter_mut().zip(agg.probs.channel(k)) {
            *m = m.max(v);
        }
    }
    Tensor::new(vec![1, h, w], map)
}

/// Binary `H x W` map, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("mask data length does not match its extent"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![u8::from(value); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// The sub-mask inside an inclusive box.
    pub fn crop(&self, bbox: &BBox) -> Mask {
        let mut data = Vec::with_capacity(bbox.height() * bbox.width());
        for i in bbox.top..=bbox.bottom {
            data.extend_from_slice(&self.data[i * self.width + bbox.left..=i * self.width + bbox.right]);
        }
        Mask {
            height: bbox.height(),
            width: bbox.width(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    pub mask: Mask,
    /// Chosen cut level: cells with quantized level above it are foreground.
    /// `None` for a constant map, whose mask is all foreground.
    pub threshold: Option<usize>,
}

/// Linear quantization of `v` in `[min, max]` into `bins` levels `0..bins`.
pub fn quantize(v: f64, min: f64, max: f64, bins: usize) -> usize {
    let level = ((v - min) / (max - min) * bins as f64).floor();
    (level.max(0.0) as usize).min(bins - 1)
}

/// Otsu binarization of a single-channel map.
///
/// Values are quantized into `bins` levels over the observed `[min, max]`
/// and the cut `t` in `0..bins-1` maximizing the between-class variance of
/// the level histogram is chosen (lowest `t` on ties). Foreground is
/// `level > t`. Ratios are compared exactly in integer arithmetic so the
/// choice does not depend on summation order.
pub fn otsu_binarize(map: &Tensor, bins: usize) -> Result<OtsuResult> {
    let (c, h, w) = map.dims3()?;
    if c != 1 || h * w == 0 {
        return Err(Error::invalid("otsu expects a non-empty 1 x H x W map"));
    }
    if bins < 2 {
        return Err(Error::invalid("otsu needs at least two bins"));
    }
    let (min, max) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max - min >= DEGENERATE_RANGE) {
        return Ok(OtsuResult {
            mask: Mask::filled(h, w, true),
            threshold: None,
        });
    }
    let levels: Vec<usize> = map.data().iter().map(|&v| quantize(v, min, max, bins)).collect();
    let mut hist = vec![0u128; bins];
    for &l in &levels {
        hist[l] += 1;
    }
    let total_n = levels.len() as u128;
    let total_s: u128 = levels.iter().map(|&l| l as u128).sum();

    // Between-class variance times N^2 is (N*S0 - N0*S)^2 / (N0*N1).
    let mut best: Option<(u128, u128, usize)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..bins - 1 {
        n0 += hist[t];
        s0 += hist[t] * t as u128;
        let n1 = total_n - n0;
        let (num, den) = if n0 == 0 || n1 == 0 {
            (0, 1)
        } else {
            let diff = (total_n * s0).abs_diff(n0 * total_s);
            (diff * diff, n0 * n1)
        };
        let better = match best {
            None => true,
            // Very large maps fall back to floating point.
            Some((bn, bd, _)) => match (num.checked_mul(bd), bn.checked_mul(den)) {
                (Some(a), Some(b)) => a > b,
                _ => num as f64 / den as f64 > bn as f64 / bd as f64,
            },
        };
        if better {
            best = Some((num, den, t));
        }
    }
    let t = best.map(|b| b.2).unwrap_or(0);
    let data = levels.iter().map(|&l| u8::from(l > t)).collect();
    Ok(OtsuResult {
        mask: Mask { height: h, width: w, data },
        threshold: Some(t),
    })
}

/// Fraction of foreground cells, clamped to `[1/(H*W), 1]`.
pub fn foreground_ratio(mask: &Mask) -> f64 {
    let cells = (mask.height * mask.width) as f64;
    (mask.count() as f64 / cells).clamp(1.0 / cells, 1.0)
}

/// Inclusive integer box. Rows are `top..=bottom`, columns `left..=right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Result<Self> {
        if bottom < top || right < left {
            return Err(Error::invalid(format!(
                "malformed box: rows {top}..={bottom}, cols {left}..={right}"
            )));
        }
        Ok(BBox { top, left, bottom, right })
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

/// Inclusive box with fractional bounds, used once a margin has been applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl From<BBox> for Region {
    fn from(b: BBox) -> Self {
        Region {
            top: b.top as f64,
            left: b.left as f64,
            bottom: b.bottom as f64,
            right: b.right as f64,
        }
    }
}

/// Tight inclusive box around the foreground cells, `None` for an empty mask.
pub fn tight_bbox(mask: &Mask) -> Option<BBox> {
    let mut found: Option<BBox> = None;
    for i in 0..mask.height {
        for j in 0..mask.width {
            if mask.get(i, j) {
                let b = found.get_or_insert(BBox {
                    top: i,
                    left: j,
                    bottom: i,
                    right: j,
                });
                b.top = b.top.min(i);
                b.left = b.left.min(j);
                b.bottom = b.bottom.max(i);
                b.right = b.right.max(j);
            }
        }
    }
    found
}

/// Tight box around the mask, grown by `margin_fraction` of its height and
/// width on every side and clipped to the map. An empty mask yields the
/// full extent.
pub fn mask_to_bbox(mask: &Mask, margin_fraction: f64) -> Region {
    let Some(b) = tight_bbox(mask) else {
        return Region {
            top: 0.0,
            left: 0.0,
            bottom: (mask.height - 1) as f64,
            right: (mask.width - 1) as f64,
        };
    };
    let dy = margin_fraction * b.height() as f64;
    let dx = margin_fraction * b.width() as f64;
    Region {
        top: (b.top as f64 - dy).max(0.0),
        left: (b.left as f64 - dx).max(0.0),
        bottom: (b.bottom as f64 + dy).min((mask.height - 1) as f64),
        right: (b.right as f64 + dx).min((mask.width - 1) as f64),
    }
}

/// Attention map, surrogate mask and derived quantities for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionArtifacts {
    pub map: Tensor,
    pub mask: Mask,
    pub threshold: Option<usize>,
    pub foreground_ratio: f64,
    /// Tight enclosure of the mask, in feature cells.
    pub bbox: BBox,
    /// `bbox` after margin expansion and clipping, in feature cells.
    pub region: Region,
}

pub fn attend(agg: &AggregatedVolume, bins: usize, margin_fraction: f64) -> Result<AttentionArtifacts> {
    let map = attention_map(agg)?;
    let OtsuResult { mask, threshold } = otsu_binarize(&map, bins)?;
    let bbox = tight_bbox(&mask).expect("otsu masks always contain a foreground cell");
    Ok(AttentionArtifacts {
        foreground_ratio: foreground_ratio(&mask),
        region: mask_to_bbox(&mask, margin_fraction),
        bbox,
        mask,
        threshold,
        map,
    })
}
