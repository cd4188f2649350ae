//! Small fully convolutional feature extractor: a stack of stride-2 3x3
//! convolutions with same padding and ReLU.

mod fmap;

pub use fmap::{decode_feature_maps, encode_feature_maps, read_feature_maps, write_feature_maps};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const DEFAULT_WIDTHS: [usize; 4] = [3, 16, 32, 64];

/// One `conv3x3(stride 2, same padding) -> ReLU` block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub c_in: usize,
    pub c_out: usize,
    /// `c_out x c_in x 3 x 3`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvBlock {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            c_in,
            c_out,
            weights: vec![0.0; c_out * c_in * KERNEL * KERNEL],
            bias: vec![0.0; c_out],
        }
    }

    /// He-style uniform init in `±sqrt(6 / fan_in)`, zero bias.
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
        let mut block = Self::zeros(c_in, c_out);
        for w in &mut block.weights {
            *w = rng.random_range(-bound..bound);
        }
        block
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Output extent and leading pad of a same-padded stride-2 3x3 convolution.
fn same_geometry(input: usize) -> (usize, usize) {
    let out = input.div_ceil(STRIDE);
    let pad_total = ((out - 1) * STRIDE + KERNEL).saturating_sub(input);
    (out, pad_total / 2)
}

/// Output positions `o` whose input tap `o*2 + k - pad` falls inside `0..input`.
fn valid_range(out: usize, input: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(STRIDE);
    let hi = if input + pad > k {
        ((input - 1 + pad - k) / STRIDE + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Patch matrix of a same-padded stride-2 3x3 convolution: row
/// `(ci*3 + ky)*3 + kx`, column `oy*ow + ox`, zeros where the tap falls in
/// the padding.
fn im2col(input: &Tensor) -> (Vec<f64>, usize, usize) {
    let (c_in, ih, iw) = input.dims3().expect("conv input must be rank-3");
    let (oh, pad_y) = same_geometry(ih);
    let (ow, pad_x) = same_geometry(iw);
    let plane = oh * ow;
    let src = input.data();
    let mut cols = vec![0.0; c_in * KERNEL * KERNEL * plane];
    for ci in 0..c_in {
        let chan = &src[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ci * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                let xs = valid_range(ow, iw, kx, pad_x);
                for oy in valid_range(oh, ih, ky, pad_y) {
                    let iy = oy * STRIDE + ky - pad_y;
                    let line = &chan[iy * iw..(iy + 1) * iw];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in xs.clone() {
                        dst[ox] = line[ox * STRIDE + kx - pad_x];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
fn col2im(cols: &[f64], c_in: usize, ih: usize, iw: usize) -> Vec<f64> {
    let (oh, pad_y) = same_geometry(ih);
    let (ow, pad_x) = same_geometry(iw);
    let plane = oh * ow;
    let mut out = vec![0.0; c_in * ih * iw];
    for ci in 0..c_in {
        let chan = &mut out[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ci * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                let xs = valid_range(ow, iw, kx, pad_x);
                for oy in valid_range(oh, ih, ky, pad_y) {
                    let iy = oy * STRIDE + ky - pad_y;
                    let line = &mut chan[iy * iw..(iy + 1) * iw];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in xs.clone() {
                        line[ox * STRIDE + kx - pad_x] += src[ox];
                    }
                }
            }
        }
    }
    out
}

/// Four-lane dot product; the fixed lane order keeps it deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_forward(block: &ConvBlock, input: &Tensor) -> Tensor {
    debug_assert_eq!(input.shape()[0], block.c_in);
    let (cols, oh, ow) = im2col(input);
    let plane = oh * ow;
    let taps = block.c_in * KERNEL * KERNEL;
    let mut out = vec![0.0; block.c_out * plane];
    for (co, dst) in out.chunks_exact_mut(plane).enumerate() {
        dst.fill(block.bias[co]);
        for (&wv, src) in block.weights[co * taps..(co + 1) * taps].iter().zip(cols.chunks_exact(plane)) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    }
    Tensor::new(vec![block.c_out, oh, ow], out).expect("conv output shape")
}

/// Returns `(grad_input, grad_block)` given the gradient w.r.t. the
/// pre-activation output.
fn conv_backward(
    block: &ConvBlock,
    input: &Tensor,
    grad_pre: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, ConvBlockGrad) {
    let (c_in, ih, iw) = input.dims3().expect("conv input must be rank-3");
    let (cols, oh, ow) = im2col(input);
    let plane = oh * ow;
    let taps = c_in * KERNEL * KERNEL;
    let gp = grad_pre.data();
    let mut g_w = vec![0.0; block.weights.len()];
    let mut g_b = vec![0.0; block.c_out];
    let mut g_cols = if want_input { vec![0.0; cols.len()] } else { Vec::new() };
    for (co, go) in gp.chunks_exact(plane).enumerate() {
        g_b[co] = go.iter().sum();
        let wrow = &block.weights[co * taps..(co + 1) * taps];
        for (k, src) in cols.chunks_exact(plane).enumerate() {
            g_w[co * taps + k] = dot(go, src);
        }
        if want_input {
            for (&wv, dst) in wrow.iter().zip(g_cols.chunks_exact_mut(plane)) {
                for (d, &g) in dst.iter_mut().zip(go) {
                    *d += wv * g;
                }
            }
        }
    }
    let g_in = want_input.then(|| Tensor::new(vec![c_in, ih, iw], col2im(&g_cols, c_in, ih, iw)).expect("grad input shape"));
    (
        g_in,
        ConvBlockGrad {
            weights: g_w,
            bias: g_b,
        },
    )
}

/// Desk-scale stand-in for a deep pretrained FCN.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub layers: Vec<ConvBlock>,
    /// Frozen backbones receive no parameter gradients.
    pub frozen: bool,
    version: u64,
}

/// Intermediate values from [`ToyBackbone::extract_features`] needed by the
/// backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    inputs: Vec<Tensor>,
    preacts: Vec<Tensor>,
    version: u64,
}

impl BackboneCache {
    /// Smallest `|pre-activation|` across all ReLUs; a finite-difference probe is
    /// only meaningful when this stays clear of the step size.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.preacts
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    /// One entry per layer, or empty when the backbone is frozen.
    pub layers: Vec<ConvBlockGrad>,
    pub input: Option<Tensor>,
}

impl ToyBackbone {
    pub fn new(layers: Vec<ConvBlock>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("backbone needs at least one block"));
        }
        for pair in layers.windows(2) {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::invalid(format!(
                    "block widths do not chain: {} -> {}",
                    pair[0].c_out, pair[1].c_in
                )));
            }
        }
        for layer in &layers {
            if layer.weights.len() != layer.c_out * layer.c_in * KERNEL * KERNEL || layer.bias.len() != layer.c_out {
                return Err(Error::invalid("block parameter length does not match its widths"));
            }
            if !layer.weights.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(Error::invalid("non-finite backbone weight"));
            }
        }
        Ok(ToyBackbone {
            layers,
            frozen: false,
            version: 0,
        })
    }

    /// Randomly initialised backbone with the given channel widths
    /// (`widths[0]` is the image channel count).
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("backbone needs at least two widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| ConvBlock::init(w[0], w[1], &mut rng))
            .collect();
        Self::new(layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Image pixels covered by one feature cell along each axis.
    pub fn cumulative_stride(&self) -> usize {
        STRIDE.pow(self.depth() as u32)
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.c_out)
    }

    /// Smallest accepted image extent.
    pub fn min_extent(&self) -> usize {
        self.cumulative_stride()
    }

    /// Feature-map `(h, w)` produced for an `h x w` image.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (0..self.depth()).fold((h, w), |(h, w), _| (same_geometry(h).0, same_geometry(w).0))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable parameter buffers in fixed order (weights then bias, per layer).
    /// Invalidates outstanding caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let (c, h, w) = image.dims3()?;
        if c != self.in_channels() {
            return Err(Error::invalid(format!(
                "backbone expects {} image channels, got {c}",
                self.in_channels()
            )));
        }
        if h < self.min_extent() || w < self.min_extent() {
            return Err(Error::invalid(format!(
                "image {h}x{w} is smaller than the minimum extent {}",
                self.min_extent()
            )));
        }
        let mut inputs = Vec::with_capacity(self.depth());
        let mut preacts = Vec::with_capacity(self.depth());
        let mut x = image.clone();
        for layer in &self.layers {
            let pre = conv_forward(layer, &x);
            let out = pre.map(|v| v.max(0.0));
            inputs.push(x);
            preacts.push(pre);
            x = out;
        }
        Ok((
            x,
            BackboneCache {
                inputs,
                preacts,
                version: self.version,
            },
        ))
    }

    /// Forward pass without keeping the cache.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        self.extract_features(image).map(|(f, _)| f)
    }

    pub fn backward(&self, cache: &BackboneCache, grad_features: &Tensor, want_input: bool) -> Result<BackboneGrads> {
        if cache.version != self.version || cache.preacts.len() != self.depth() {
            return Err(Error::invalid("stale backbone cache: weights changed since the forward pass"));
        }
        let last = cache.preacts.last().expect("non-empty cache");
        if grad_features.shape() != last.shape() {
            return Err(Error::invalid(format!(
                "feature gradient shape {:?} does not match features {:?}",
                grad_features.shape(),
                last.shape()
            )));
        }
        if self.frozen && !want_input {
            return Ok(BackboneGrads {
                layers: Vec::new(),
                input: None,
            });
        }
        let mut layer_grads = Vec::with_capacity(self.depth());
        let mut grad = grad_features.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.preacts[idx];
            let grad_pre = Tensor::new(
                pre.shape().to_vec(),
                grad.data().iter().zip(pre.data()).map(|(&g, &p)| if p > 0.0 { g } else { 0.0 }).collect(),
            )?;
            let need_input = idx > 0 || want_input;
            let (g_in, g_block) = conv_backward(layer, &cache.inputs[idx], &grad_pre, need_input);
            layer_grads.push(g_block);
            if let Some(g_in) = g_in {
                grad = g_in;
            }
        }
        layer_grads.reverse();
        Ok(BackboneGrads {
            layers: if self.frozen { Vec::new() } else { layer_grads },
            input: want_input.then_some(grad),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, FnCheck};

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn3(c, h, w, |_, _, _| rng.random::<f64>())
    }

    /// Direct zero-padded convolution used as an independent reference.
    fn naive_conv(block: &ConvBlock, x: &Tensor) -> Tensor {
        let (ci, ih, iw) = x.dims3().unwrap();
        let (oh, py) = same_geometry(ih);
        let (ow, px) = same_geometry(iw);
        Tensor::from_fn3(block.c_out, oh, ow, |co, oy, ox| {
            let mut acc = block.bias[co];
            for c in 0..ci {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - py as isize;
                        let ix = (ox * 2 + kx) as isize - px as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < ih && (ix as usize) < iw {
                            acc += block.weights[((co * ci + c) * 3 + ky) * 3 + kx] * x.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_on_odd_and_even_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let block = ConvBlock::init(2, 3, &mut rng);
        for (h, w) in [(8, 8), (7, 9), (5, 4), (2, 3)] {
            let x = random_image(h as u64 * 31 + w as u64, 2, h, w);
            let fast = conv_forward(&block, &x);
            let slow = naive_conv(&block, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_output_shape() {
        let bb = ToyBackbone::init(&DEFAULT_WIDTHS, 0).unwrap();
        let f = bb.features(&random_image(1, 3, 32, 32)).unwrap();
        assert_eq!(f.shape(), &[64, 4, 4]);
        assert_eq!(bb.output_extent(33, 17), (5, 3));
        let f = bb.features(&random_image(2, 3, 33, 17)).unwrap();
        assert_eq!(f.shape(), &[64, 5, 3]);
    }

    #[test]
    fn too_small_image_rejected() {
        let bb = ToyBackbone::init(&DEFAULT_WIDTHS, 0).unwrap();
        let err = bb.features(&random_image(1, 3, 7, 32)).unwrap_err();
        assert_eq!(err.category(), "invalid-input");
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let bb = ToyBackbone::init(&DEFAULT_WIDTHS, 5).unwrap();
        let f = bb.features(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_homogeneity() {
        let bb = ToyBackbone::init(&DEFAULT_WIDTHS, 6).unwrap();
        let x = random_image(3, 3, 16, 16);
        let f1 = bb.features(&x).unwrap();
        let f2 = bb.features(&x.map(|v| 2.0 * v)).unwrap();
        for (a, b) in f1.data().iter().zip(f2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn zero_gradient_gives_zero_param_grads() {
        let bb = ToyBackbone::init(&[3, 4, 5], 7).unwrap();
        let (f, cache) = bb.extract_features(&random_image(4, 3, 8, 8)).unwrap();
        let g = bb.backward(&cache, &Tensor::zeros(f.shape()), true).unwrap();
        for layer in &g.layers {
            assert!(layer.weights.iter().chain(&layer.bias).all(|&v| v == 0.0));
        }
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_backbone_has_no_param_grads() {
        let mut bb = ToyBackbone::init(&[3, 4, 5], 7).unwrap();
        bb.frozen = true;
        let (f, cache) = bb.extract_features(&random_image(4, 3, 8, 8)).unwrap();
        let g = bb.backward(&cache, &Tensor::filled(f.shape(), 1.0), false).unwrap();
        assert!(g.layers.is_empty());
        assert!(g.input.is_none());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut bb = ToyBackbone::init(&[3, 4], 8).unwrap();
        let (f, cache) = bb.extract_features(&random_image(4, 3, 4, 4)).unwrap();
        bb.param_slices_mut()[0][0] += 1.0;
        let err = bb.backward(&cache, &Tensor::zeros(f.shape()), false).unwrap_err();
        assert!(err.to_string().contains("stale"));
    }

    fn flatten(bb: &ToyBackbone) -> Vec<f64> {
        bb.param_slices().concat()
    }

    fn unflatten(bb: &mut ToyBackbone, p: &[f64]) {
        let mut off = 0;
        for s in bb.param_slices_mut() {
            s.copy_from_slice(&p[off..off + s.len()]);
            off += s.len();
        }
    }

    #[test]
    fn single_block_matches_finite_differences() {
        let mut checked = 0;
        let mut seed = 100;
        while checked < 5 {
            seed += 1;
            let bb = ToyBackbone::init(&[3, 4], seed).unwrap();
            let x = random_image(seed, 3, 6, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let (f, cache) = bb.extract_features(&x).unwrap();
            if cache.min_abs_preactivation() < 1e-3 {
                continue;
            }
            let r = Tensor::from_fn3(4, 3, 3, |_, _, _| rng.random_range(-1.0..1.0));
            assert_eq!(f.shape(), r.shape());
            let g = bb.backward(&cache, &r, true).unwrap();
            let analytic: Vec<f64> = g.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).copied().collect();
            let template = bb.clone();
            let r2 = r.clone();
            let check = FnCheck::new(
                flatten(&bb),
                move |p: &[f64]| {
                    let mut b = template.clone();
                    unflatten(&mut b, p);
                    b.features(&x).unwrap().data().iter().zip(r2.data()).map(|(a, b)| a * b).sum()
                },
                analytic,
            );
            let report = gradient_check(&check, 1e-6, 1e-6).unwrap();
            assert!(report.passed(), "{report:?}");
            checked += 1;
        }
    }
}
