//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and out-of-range
//! values are rejected with the offending line and key.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::AggregateOn;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::multiscale::{ForwardOptions, InferenceSettings, LossTerms, ModelSpec, TrainConfig};

/// Defaults are sized for the synthetic benchmark. [`RunConfig::paper`]
/// gives the full-size setting (16 classifiers, 40 epochs, lr 1e-4, 448 px).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scales: usize,
    pub n_classifiers: usize,
    pub categories: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub margin_fraction: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub otsu_bins: usize,
    pub aggregate_on: AggregateOn,
    pub backbone_widths: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub patch_size: usize,
    pub clutter_amplitude: f64,
    pub texture_period: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            scales: 3,
            n_classifiers: 4,
            categories: synth.categories,
            epochs: 15,
            warmup_epochs: 0,
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 8,
            image_size: synth.height,
            margin_fraction: crate::attention::DEFAULT_MARGIN_FRACTION,
            freeze_backbone: false,
            seed: synth.seed,
            otsu_bins: crate::attention::DEFAULT_OTSU_BINS,
            aggregate_on: AggregateOn::Probs,
            backbone_widths: crate::backbone::DEFAULT_WIDTHS.to_vec(),
            train_per_class: synth.train_per_class,
            test_per_class: synth.test_per_class,
            patch_size: synth.patch_size,
            clutter_amplitude: synth.clutter_amplitude,
            texture_period: synth.texture_period,
        }
    }
}

pub const KEYS: &[&str] = &[
    "scales",
    "n_classifiers",
    "categories",
    "epochs",
    "warmup_epochs",
    "lr",
    "momentum",
    "batch_size",
    "image_size",
    "margin_fraction",
    "freeze_backbone",
    "seed",
    "otsu_bins",
    "aggregate_on",
    "backbone_widths",
    "train_per_class",
    "test_per_class",
    "patch_size",
    "clutter_amplitude",
    "texture_period",
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn at_least(v: usize, min: usize) -> std::result::Result<usize, String> {
    if v < min {
        Err(format!("must be at least {min}, got {v}"))
    } else {
        Ok(v)
    }
}

fn in_range(v: f64, lo: f64, hi: f64, open_lo: bool) -> std::result::Result<f64, String> {
    let ok = v.is_finite() && v <= hi && if open_lo { v > lo } else { v >= lo };
    if ok {
        Ok(v)
    } else {
        let bracket = if open_lo { "(" } else { "[" };
        Err(format!("must lie in {bracket}{lo}, {hi}], got {v}"))
    }
}

impl RunConfig {
    /// Full-size training defaults.
    pub fn paper() -> Self {
        RunConfig {
            n_classifiers: 16,
            epochs: 40,
            lr: 1e-4,
            image_size: 448,
            ..RunConfig::default()
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "scales" => self.scales = at_least(parse(value)?, 1)?,
            "n_classifiers" => self.n_classifiers = at_least(parse(value)?, 1)?,
            "categories" => self.categories = at_least(parse(value)?, 2)?,
            "epochs" => self.epochs = parse(value)?,
            "warmup_epochs" => self.warmup_epochs = parse(value)?,
            "lr" => self.lr = in_range(parse(value)?, 0.0, 1e3, true)?,
            "momentum" => {
                let m = in_range(parse(value)?, 0.0, 1.0, false)?;
                if m >= 1.0 {
                    return Err("must be below 1".into());
                }
                self.momentum = m;
            }
            "batch_size" => self.batch_size = at_least(parse(value)?, 1)?,
            "image_size" => self.image_size = at_least(parse(value)?, 2)?,
            "margin_fraction" => self.margin_fraction = in_range(parse(value)?, 0.0, 1.0, false)?,
            "freeze_backbone" => self.freeze_backbone = parse(value)?,
            "seed" => self.seed = parse(value)?,
            "otsu_bins" => self.otsu_bins = at_least(parse(value)?, 2)?,
            "aggregate_on" => self.aggregate_on = value.parse()?,
            "backbone_widths" => {
                let widths = value
                    .split(',')
                    .map(|w| parse::<usize>(w.trim()).and_then(|w| at_least(w, 1)))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if widths.len() < 2 {
                    return Err("needs an input width and at least one block".into());
                }
                self.backbone_widths = widths;
            }
            "train_per_class" => self.train_per_class = at_least(parse(value)?, 1)?,
            "test_per_class" => self.test_per_class = at_least(parse(value)?, 1)?,
            "patch_size" => self.patch_size = at_least(parse(value)?, 1)?,
            "clutter_amplitude" => self.clutter_amplitude = in_range(parse(value)?, 0.0, 1.0, false)?,
            "texture_period" => self.texture_period = in_range(parse(value)?, 0.0, 1e6, true)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    key: content.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value).map_err(|message| Error::Config {
                line,
                key: key.to_string(),
                message,
            })?;
        }
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        RunConfig::default().apply(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let widths: Vec<String> = self.backbone_widths.iter().map(ToString::to_string).collect();
        vec![
            ("scales", self.scales.to_string()),
            ("n_classifiers", self.n_classifiers.to_string()),
            ("categories", self.categories.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("image_size", self.image_size.to_string()),
            ("margin_fraction", self.margin_fraction.to_string()),
            ("freeze_backbone", self.freeze_backbone.to_string()),
            ("seed", self.seed.to_string()),
            ("otsu_bins", self.otsu_bins.to_string()),
            ("aggregate_on", self.aggregate_on.to_string()),
            ("backbone_widths", widths.join(",")),
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("clutter_amplitude", self.clutter_amplitude.to_string()),
            ("texture_period", self.texture_period.to_string()),
        ]
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn forward(&self) -> ForwardOptions {
        ForwardOptions {
            aggregate_on: self.aggregate_on,
            otsu_bins: self.otsu_bins,
            margin_fraction: self.margin_fraction,
        }
    }

    pub fn settings(&self) -> InferenceSettings {
        InferenceSettings {
            image_size: self.image_size,
            forward: self.forward(),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            widths: self.backbone_widths.clone(),
            n_classifiers: self.n_classifiers,
            categories: self.categories,
        }
    }

    pub fn train_config(&self, terms: LossTerms) -> TrainConfig {
        TrainConfig {
            spec: self.spec(),
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            freeze_backbone: self.freeze_backbone,
            forward: self.forward(),
            terms,
            warmup_epochs: self.warmup_epochs,
            ..TrainConfig::default()
        }
    }

    /// Synthetic images are generated at the working resolution.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            categories: self.categories,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            height: self.image_size,
            width: self.image_size,
            patch_size: self.patch_size,
            clutter_amplitude: self.clutter_amplitude,
            texture_period: self.texture_period,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_and_paper_defaults() {
        let d = RunConfig::default();
        assert_eq!((d.scales, d.n_classifiers, d.epochs, d.otsu_bins), (3, 4, 15, 256));
        assert_eq!(d.margin_fraction, 0.1);
        assert_eq!(d.aggregate_on, AggregateOn::Probs);
        let p = RunConfig::paper();
        assert_eq!((p.n_classifiers, p.epochs, p.lr, p.image_size), (16, 40, 1e-4, 448));
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let c = RunConfig::parse("# run\n\nscales = 2\n  lr=0.5  # fast\naggregate_on = logits\nbackbone_widths = 3, 8,8\n").unwrap();
        assert_eq!(c.scales, 2);
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.aggregate_on, AggregateOn::Logits);
        assert_eq!(c.backbone_widths, vec![3, 8, 8]);
    }

    fn config_error(text: &str) -> (usize, String) {
        match RunConfig::parse(text).unwrap_err() {
            Error::Config { line, key, .. } => (line, key),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn errors_name_line_and_key() {
        assert_eq!(config_error("scales = 3\nbogus = 1\n"), (2, "bogus".into()));
        assert_eq!(config_error("\n\nmomentum = 1.0"), (3, "momentum".into()));
        assert_eq!(config_error("lr = 0"), (1, "lr".into()));
        assert_eq!(config_error("scales = 0"), (1, "scales".into()));
        assert_eq!(config_error("freeze_backbone = yes"), (1, "freeze_backbone".into()));
        assert_eq!(config_error("aggregate_on = mean"), (1, "aggregate_on".into()));
        assert_eq!(config_error("margin_fraction = nan"), (1, "margin_fraction".into()));
        assert_eq!(config_error("just words"), (1, "just words".into()));
        assert_eq!(RunConfig::parse("x = 1").unwrap_err().category(), "config");
    }

    #[test]
    fn keys_list_matches_entries() {
        let keys: Vec<_> = RunConfig::default().entries().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn shipped_paper_config_matches_paper_defaults() {
        let text = include_str!("../../../configs/paper.cfg");
        assert_eq!(RunConfig::parse(text).unwrap(), RunConfig::paper());
    }

    proptest! {
        #[test]
        fn text_round_trip(scales in 1usize..5, n in 1usize..20, lr in 1e-6f64..1.0, m in 0.0f64..0.99, seed: u64, logits: bool) {
            let c = RunConfig {
                scales,
                n_classifiers: n,
                lr,
                momentum: m,
                seed,
                aggregate_on: if logits { AggregateOn::Logits } else { AggregateOn::Probs },
                ..RunConfig::default()
            };
            let back = RunConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), c.to_text());
        }
    }
}
