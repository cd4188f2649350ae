//! Multi-scale recognition: one independent model per scale, each scale
//! looking at a zoomed crop of the region the previous scale attended to.

mod checkpoint;
mod crop;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use crop::{crop_and_zoom, region_to_window, resize, resize_window, CropOutcome, PixelWindow};
pub use train::{initial_scale_model, train_pipeline, train_scale, PipelineLog, TrainConfig, TrainLog};

use crate::attention::{attend, AggregateOn, AttentionArtifacts, LocalClassifierBank, Mask, Region};
use crate::backbone::{BackboneCache, ToyBackbone};
use crate::error::{Error, Result};
use crate::attention::foreground_ratio;
use crate::losses::{
    local_loss, masked_features, object_features, object_loss, total_loss, LossBreakdown, ObjectClassifier,
};
use crate::seed::derive_seed;
use crate::tensor::{spatial_avg_pool, Tensor};

/// Inference-time knobs shared by every scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub aggregate_on: AggregateOn,
    pub otsu_bins: usize,
    pub margin_fraction: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            aggregate_on: AggregateOn::Probs,
            otsu_bins: crate::attention::DEFAULT_OTSU_BINS,
            margin_fraction: crate::attention::DEFAULT_MARGIN_FRACTION,
        }
    }
}

/// Which loss terms contribute gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub local: bool,
    pub object: bool,
}

impl LossTerms {
    pub const BOTH: LossTerms = LossTerms {
        local: true,
        object: true,
    };
    pub const LOCAL_ONLY: LossTerms = LossTerms {
        local: true,
        object: false,
    };
    pub const OBJECT_ONLY: LossTerms = LossTerms {
        local: false,
        object: true,
    };
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::BOTH
    }
}

/// Architecture of one scale model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub n_classifiers: usize,
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModel {
    pub backbone: ToyBackbone,
    pub bank: LocalClassifierBank,
    pub object: ObjectClassifier,
    pub scale_index: usize,
}

/// Per-scale prediction and attention.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    /// Mean of the local and object predictions.
    pub prediction: Vec<f64>,
    /// Spatial mean of the aggregated volume over the `L` fine-grained channels.
    pub local_prediction: Vec<f64>,
    pub object_prediction: Vec<f64>,
    pub artifacts: AttentionArtifacts,
}

struct Trace {
    features: Tensor,
    cache: BackboneCache,
    bank: crate::attention::BankForward,
    artifacts: AttentionArtifacts,
    mask: Mask,
    w: f64,
}

impl ScaleModel {
    pub fn init(spec: &ModelSpec, scale_index: usize, seed: u64) -> Result<Self> {
        if spec.categories < 1 || spec.n_classifiers < 1 {
            return Err(Error::invalid("model needs at least one category and one classifier"));
        }
        let backbone = ToyBackbone::init(&spec.widths, derive_seed(seed, &[1]))?;
        let c = backbone.out_channels();
        let model = ScaleModel {
            bank: LocalClassifierBank::init(spec.n_classifiers, spec.categories, c, derive_seed(seed, &[2]))?,
            object: ObjectClassifier::init(spec.categories, c, derive_seed(seed, &[3])),
            backbone,
            scale_index,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.backbone.out_channels();
        if self.bank.channels() != c || self.object.channels() != c {
            return Err(Error::invalid(format!(
                "channel mismatch: backbone {c}, bank {}, object classifier {}",
                self.bank.channels(),
                self.object.channels()
            )));
        }
        if self.bank.categories() != self.object.categories() {
            return Err(Error::invalid("bank and object classifier disagree on the category count"));
        }
        Ok(())
    }

    pub fn categories(&self) -> usize {
        self.object.categories()
    }

    fn trace(&self, image: &Tensor, opts: &ForwardOptions, mask_override: Option<&Mask>) -> Result<Trace> {
        let (features, cache) = self.backbone.extract_features(image)?;
        let bank = self.bank.forward(&features, opts.aggregate_on)?;
        let artifacts = attend(&bank.agg, opts.otsu_bins, opts.margin_fraction)?;
        let mask = mask_override.cloned().unwrap_or_else(|| artifacts.mask.clone());
        let w = foreground_ratio(&mask);
        Ok(Trace {
            features,
            cache,
            bank,
            artifacts,
            mask,
            w,
        })
    }

    fn predictions(&self, trace: &Trace) -> Result<(Vec<f64>, Vec<f64>)> {
        let l = self.categories();
        let pooled = spatial_avg_pool(&trace.bank.agg.probs)?;
        let local = pooled.data()[..l].to_vec();
        let obj = object_features(&trace.features, &trace.mask)?;
        let object = self.object.predict(&obj.values)?;
        Ok((local, object))
    }

    pub fn forward(&self, image: &Tensor, opts: &ForwardOptions) -> Result<ScaleOutput> {
        let trace = self.trace(image, opts, None)?;
        let (local_prediction, object_prediction) = self.predictions(&trace)?;
        let prediction = local_prediction
            .iter()
            .zip(&object_prediction)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        Ok(ScaleOutput {
            prediction,
            local_prediction,
            object_prediction,
            artifacts: trace.artifacts,
        })
    }

    /// Loss breakdown for one labelled image. `mask_override` replaces the
    /// Otsu mask (and the foreground ratio derived from it).
    pub fn loss(&self, image: &Tensor, label: usize, opts: &ForwardOptions, mask_override: Option<&Mask>) -> Result<LossBreakdown> {
        let trace = self.trace(image, opts, mask_override)?;
        let local = local_loss(&trace.bank.agg, &trace.mask, trace.w, label)?;
        let obj = object_features(&trace.features, &trace.mask)?;
        let object = object_loss(&obj.values, &self.object, label)?;
        Ok(total_loss(&local, object.loss))
    }

    /// Loss breakdown and the flat gradient (in [`ScaleModel::param_slices`]
    /// order) of the enabled loss terms. The mask is a constant.
    pub fn loss_and_grad(
        &self,
        image: &Tensor,
        label: usize,
        opts: &ForwardOptions,
        terms: LossTerms,
        mask_override: Option<&Mask>,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let trace = self.trace(image, opts, mask_override)?;
        let local = local_loss(&trace.bank.agg, &trace.mask, trace.w, label)?;
        let obj = object_features(&trace.features, &trace.mask)?;
        let object = object_loss(&obj.values, &self.object, label)?;
        let breakdown = total_loss(&local, object.loss);

        let bb_len = self.backbone.num_params();
        let mut grad = vec![0.0; self.num_params()];
        let mut g_features = Tensor::zeros(trace.features.shape());
        let mut offset = bb_len;
        if terms.local {
            let g = trace.bank.backward(&self.bank, &trace.features, &local.grad)?;
            for (w, b) in &g.classifiers {
                grad[offset..offset + w.len()].copy_from_slice(w.data());
                offset += w.len();
                grad[offset..offset + b.len()].copy_from_slice(b.data());
                offset += b.len();
            }
            add_into(&mut g_features, &g.features);
        } else {
            offset += self.bank.param_slices().iter().map(|s| s.len()).sum::<usize>();
        }
        if terms.object {
            let gw = object.grad_weights.data();
            grad[offset..offset + gw.len()].copy_from_slice(gw);
            offset += gw.len();
            let gb = object.grad_bias.data();
            grad[offset..offset + gb.len()].copy_from_slice(gb);
            add_into(&mut g_features, &obj.backward(&object.grad_features)?);
        }
        if !self.backbone.frozen && (terms.local || terms.object) {
            let g = self.backbone.backward(&trace.cache, &g_features, false)?;
            let mut off = 0;
            for layer in &g.layers {
                grad[off..off + layer.weights.len()].copy_from_slice(&layer.weights);
                off += layer.weights.len();
                grad[off..off + layer.bias.len()].copy_from_slice(&layer.bias);
                off += layer.bias.len();
            }
        }
        Ok((breakdown, grad))
    }

    /// Smallest distance from a non-differentiable point among the ReLUs,
    /// the classifier-dimension max and the object max pool. Finite
    /// differences are only valid when this exceeds the probe step.
    pub fn smoothness_margin(&self, image: &Tensor, opts: &ForwardOptions, mask: &Mask) -> Result<f64> {
        let trace = self.trace(image, opts, Some(mask))?;
        let mut margin = trace.cache.min_abs_preactivation();
        let n = self.bank.len();
        let vols = &trace.bank.volumes;
        for (idx, &win) in trace.bank.agg.winner.iter().enumerate() {
            for (i, v) in vols.iter().enumerate().take(n) {
                if i != win {
                    margin = margin.min(vols[win].data()[idx] - v.data()[idx]);
                }
            }
        }
        let weighted = masked_features(&trace.features, mask)?;
        let obj = object_features(&trace.features, mask)?;
        Ok(margin.min(obj.min_pool_gap(&weighted)))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.backbone.param_slices();
        out.extend(self.bank.param_slices());
        out.extend(self.object.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.backbone.param_slices_mut();
        out.extend(self.bank.param_slices_mut());
        out.extend(self.object.param_slices_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid("flat parameter vector has the wrong length"));
        }
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&params[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Settings fixed for a trained multi-scale model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSettings {
    /// Square working resolution every scale's input is resampled to.
    pub image_size: usize,
    pub forward: ForwardOptions,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            image_size: 64,
            forward: ForwardOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleModel {
    pub scales: Vec<ScaleModel>,
    pub settings: InferenceSettings,
}

/// One crop step between consecutive scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRecord {
    /// Scale whose attention chose the crop.
    pub from_scale: usize,
    pub region: Region,
    /// Source window in the previous scale's input image.
    pub window: PixelWindow,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub per_scale: Vec<ScaleOutput>,
    /// The input image seen by each scale.
    pub inputs: Vec<Tensor>,
    pub crops: Vec<CropRecord>,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, k| if v[k] > v[best] { k } else { best })
}

/// Elementwise mean of equally long vectors, summed in order.
pub fn mean_vectors(vs: &[Vec<f64>]) -> Vec<f64> {
    let n = vs.len() as f64;
    let mut out = vec![0.0; vs.first().map_or(0, Vec::len)];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter().map(|v| v / n).collect()
}

/// Resamples an image to the working resolution unless it already matches.
pub fn prepare_input(image: &Tensor, image_size: usize) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if (h, w) == (image_size, image_size) {
        Ok(image.clone())
    } else {
        resize(image, image_size, image_size)
    }
}

impl MultiScaleModel {
    pub fn new(scales: Vec<ScaleModel>, settings: InferenceSettings) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("a multi-scale model needs at least one scale"));
        }
        for s in &scales {
            s.validate()?;
        }
        if scales.iter().any(|s| s.categories() != scales[0].categories()) {
            return Err(Error::invalid("scales disagree on the category count"));
        }
        Ok(MultiScaleModel { scales, settings })
    }

    pub fn categories(&self) -> usize {
        self.scales[0].categories()
    }

    /// Produces the input of the next scale from this scale's attention.
    pub fn zoom(&self, scale: usize, input: &Tensor, out: &ScaleOutput) -> Result<(Tensor, CropRecord)> {
        let size = self.settings.image_size;
        let crop = crop_and_zoom(input, &out.artifacts.region, &self.scales[scale].backbone, size, size)?;
        Ok((
            crop.image,
            CropRecord {
                from_scale: scale,
                region: out.artifacts.region,
                window: crop.window,
                fallback: crop.fallback,
            },
        ))
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let opts = self.settings.forward;
        let mut input = prepare_input(image, self.settings.image_size)?;
        let mut per_scale = Vec::with_capacity(self.scales.len());
        let mut inputs = Vec::with_capacity(self.scales.len());
        let mut crops = Vec::new();
        for (s, model) in self.scales.iter().enumerate() {
            let out = model.forward(&input, &opts)?;
            if s + 1 < self.scales.len() {
                let (next, record) = self.zoom(s, &input, &out)?;
                crops.push(record);
                inputs.push(std::mem::replace(&mut input, next));
            } else {
                inputs.push(input.clone());
            }
            per_scale.push(out);
        }
        let preds: Vec<Vec<f64>> = per_scale.iter().map(|o| o.prediction.clone()).collect();
        let probs = mean_vectors(&preds);
        Ok(Prediction {
            label: argmax(&probs),
            probs,
            per_scale,
            inputs,
            crops,
        })
    }
}
