//! Stage-wise SGD training: scale `s` is trained on crops chosen by the
//! already-trained scale `s - 1`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{prepare_input, CropRecord, ForwardOptions, InferenceSettings, LossTerms, ModelSpec, MultiScaleModel, ScaleModel};
use crate::attention::Mask;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub freeze_backbone: bool,
    pub forward: ForwardOptions,
    pub terms: LossTerms,
    /// Initial epochs trained with an all-foreground mask, so that only the
    /// object branch learns (a global max-pool classifier).
    pub warmup_epochs: usize,
    /// Leading training samples whose mean loss is tracked per epoch.
    pub monitor_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            spec: ModelSpec {
                widths: crate::backbone::DEFAULT_WIDTHS.to_vec(),
                n_classifiers: 4,
                categories: 4,
            },
            epochs: 15,
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 8,
            freeze_backbone: false,
            forward: ForwardOptions::default(),
            terms: LossTerms::BOTH,
            warmup_epochs: 0,
            monitor_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !self.terms.local && !self.terms.object {
            return Err(Error::invalid("at least one loss term must be enabled"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean loss over each epoch's batches, as seen during the epoch.
    pub epoch_losses: Vec<LossBreakdown>,
    /// Mean total loss on the monitor subset before training, then after
    /// every epoch.
    pub monitor: Vec<f64>,
}

fn mean_breakdown(acc: &[LossBreakdown]) -> LossBreakdown {
    let n = acc.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in acc {
        m.loc += b.loc / n;
        m.obj += b.obj / n;
        m.total += b.total / n;
        m.l0 += b.l0 / n;
        m.l1 += b.l1 / n;
        m.w += b.w / n;
    }
    m
}

fn monitor_loss(model: &ScaleModel, images: &[Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let k = cfg.monitor_size.min(images.len());
    let mut sum = 0.0;
    for i in 0..k {
        sum += model.loss(&images[i], labels[i], &cfg.forward, None)?.total;
    }
    Ok(if k == 0 { 0.0 } else { sum / k as f64 })
}

/// SGD with momentum (`v = mu*v + g; theta -= lr*v`) over seeded shuffles.
/// Batch gradients are means accumulated in sample order.
pub fn train_scale(
    model: &mut ScaleModel,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if images.len() != labels.len() {
        return Err(Error::invalid("images and labels differ in length"));
    }
    model.backbone.frozen = cfg.freeze_backbone;
    let mut log = TrainLog {
        monitor: vec![monitor_loss(model, images, labels, cfg)?],
        ..TrainLog::default()
    };
    let mut velocity = vec![0.0; model.num_params()];
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(images.len());
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = vec![0.0; velocity.len()];
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let full = (epoch < cfg.warmup_epochs).then(|| {
                    let (_, h, w) = images[i].dims3().expect("rank-3 image");
                    let (fh, fw) = model.backbone.output_extent(h, w);
                    Mask::filled(fh, fw, true)
                });
                let (b, g) = model.loss_and_grad(&images[i], labels[i], &cfg.forward, cfg.terms, full.as_ref())?;
                if !b.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch,
                        breakdown: b,
                    });
                }
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
                losses.push(b);
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut off = 0;
            for slice in model.param_slices_mut() {
                for p in slice.iter_mut() {
                    let v = &mut velocity[off];
                    *v = cfg.momentum * *v + grad[off] * scale;
                    *p -= cfg.lr * *v;
                    off += 1;
                }
            }
            seen.extend(losses);
        }
        let mean = mean_breakdown(&seen);
        log::debug!("scale {} epoch {epoch}: loss {:.6}", model.scale_index, mean.total);
        log.epoch_losses.push(mean);
        log.monitor.push(monitor_loss(model, images, labels, cfg)?);
    }
    Ok(log)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineLog {
    pub scales: Vec<TrainLog>,
    /// `crops[i]` holds the `S - 1` crop steps of training image `i`.
    pub crops: Vec<Vec<CropRecord>>,
}

/// The untrained model of scale `scale` in a pipeline seeded with `seed`.
pub fn initial_scale_model(spec: &ModelSpec, scale: usize, seed: u64) -> Result<ScaleModel> {
    ScaleModel::init(spec, scale, derive_seed(seed, &[0x6d6f_6465_6c, scale as u64]))
}

/// Trains `num_scales` models in sequence. Scale 0 sees the images resampled
/// to `image_size`; every later scale sees the zoomed attention crops of the
/// scale before it.
pub fn train_pipeline(
    images: &[Tensor],
    labels: &[usize],
    num_scales: usize,
    image_size: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MultiScaleModel, PipelineLog)> {
    cfg.validate()?;
    if num_scales == 0 {
        return Err(Error::invalid("need at least one scale"));
    }
    let settings = InferenceSettings {
        image_size,
        forward: cfg.forward,
    };
    let mut inputs = images
        .iter()
        .map(|im| prepare_input(im, image_size))
        .collect::<Result<Vec<_>>>()?;
    let mut log = PipelineLog {
        crops: vec![Vec::new(); images.len()],
        ..PipelineLog::default()
    };
    let mut scales = Vec::with_capacity(num_scales);
    for s in 0..num_scales {
        let mut model = initial_scale_model(&cfg.spec, s, seed)?;
        log::info!("training scale {}/{num_scales} on {} images", s + 1, inputs.len());
        let scale_log = train_scale(&mut model, &inputs, labels, cfg, derive_seed(seed, &[0x7368_7566, s as u64]))?;
        log.scales.push(scale_log);
        scales.push(model);
        if s + 1 < num_scales {
            let partial = MultiScaleModel::new(scales.clone(), settings)?;
            for (i, input) in inputs.iter_mut().enumerate() {
                let out = partial.scales[s].forward(input, &settings.forward)?;
                let (next, record) = partial.zoom(s, input, &out)?;
                log.crops[i].push(record);
                *input = next;
            }
        }
    }
    Ok((MultiScaleModel::new(scales, settings)?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sample, Split, SynthConfig};

    fn tiny() -> (Vec<Tensor>, Vec<usize>, TrainConfig) {
        let synth = SynthConfig {
            height: 16,
            width: 16,
            patch_size: 6,
            texture_period: 3.0,
            ..SynthConfig::default()
        };
        let (images, labels): (Vec<_>, Vec<_>) = (0..16)
            .map(|i| {
                let (im, l, _) = synth_sample(&synth, Split::Train, i);
                (im, l)
            })
            .unzip();
        let cfg = TrainConfig {
            spec: ModelSpec {
                widths: vec![3, 6, 8],
                n_classifiers: 2,
                categories: 4,
            },
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        (images, labels, cfg)
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (images, labels, cfg) = tiny();
        let cfg = TrainConfig { epochs: 0, ..cfg };
        let mut m = ScaleModel::init(&cfg.spec, 0, 3).unwrap();
        let before = m.clone();
        let log = train_scale(&mut m, &images, &labels, &cfg, 1).unwrap();
        assert_eq!(m, before);
        assert_eq!(log.monitor.len(), 1);
    }

    #[test]
    fn training_reduces_monitor_loss() {
        let (images, labels, cfg) = tiny();
        let cfg = TrainConfig { epochs: 6, ..cfg };
        let mut m = ScaleModel::init(&cfg.spec, 0, 3).unwrap();
        let log = train_scale(&mut m, &images, &labels, &cfg, 1).unwrap();
        assert!(log.monitor.last().unwrap() < &log.monitor[0], "{:?}", log.monitor);
    }

    #[test]
    fn training_is_deterministic() {
        let (images, labels, cfg) = tiny();
        let run = || {
            let mut m = ScaleModel::init(&cfg.spec, 0, 3).unwrap();
            train_scale(&mut m, &images, &labels, &cfg, 9).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_backbone_is_untouched() {
        let (images, labels, cfg) = tiny();
        let cfg = TrainConfig {
            freeze_backbone: true,
            ..cfg
        };
        let mut m = ScaleModel::init(&cfg.spec, 0, 3).unwrap();
        let before = m.backbone.layers.clone();
        train_scale(&mut m, &images, &labels, &cfg, 1).unwrap();
        assert_eq!(m.backbone.layers, before);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (images, labels, cfg) = tiny();
        let cfg = TrainConfig {
            lr: 1e300,
            epochs: 5,
            ..cfg
        };
        let mut m = ScaleModel::init(&cfg.spec, 0, 3).unwrap();
        match train_scale(&mut m, &images, &labels, &cfg, 1) {
            Err(e @ Error::NonFiniteLoss { .. }) => assert_eq!(e.category(), "training-diverged"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn pipeline_records_crop_provenance() {
        let (images, labels, cfg) = tiny();
        let cfg = TrainConfig { epochs: 1, ..cfg };
        let (model, log) = train_pipeline(&images, &labels, 3, 16, &cfg, 5).unwrap();
        assert_eq!(model.scales.len(), 3);
        assert_eq!(log.scales.len(), 3);
        for c in &log.crops {
            assert_eq!(c.len(), 2);
            assert_eq!(c[0].from_scale, 0);
            assert_eq!(c[1].from_scale, 1);
        }
    }
}
