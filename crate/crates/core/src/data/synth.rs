//! Synthetic fine-grained dataset with known discriminative regions.
//!
//! Every image is a mid-gray background with smooth seeded clutter plus one
//! square patch of an oriented sinusoidal grating. The grating orientation
//! `k * pi / L` identifies the category; the patch box is the ground truth.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode_image, write_manifest, Dataset, SampleRecord, TEST_MANIFEST, TRAIN_MANIFEST};
use crate::attention::BBox;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.5;
const TEXTURE_AMPLITUDE: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Test => 0x7465_7374,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub categories: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Peak deviation of the clutter from the background level.
    pub clutter_amplitude: f64,
    /// Grating period in pixels.
    pub texture_period: f64,
    /// Spacing of the clutter's coarse noise lattice in pixels.
    pub clutter_scale: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 4,
            train_per_class: 50,
            test_per_class: 50,
            height: 64,
            width: 64,
            patch_size: 20,
            clutter_amplitude: 0.3,
            texture_period: 5.0,
            clutter_scale: 8,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::invalid("synthetic data needs at least two categories"));
        }
        if self.patch_size == 0 || self.patch_size >= self.height || self.patch_size >= self.width {
            return Err(Error::invalid(format!(
                "patch size {} must be positive and smaller than the image {}x{}",
                self.patch_size, self.height, self.width
            )));
        }
        if !(self.clutter_amplitude >= 0.0 && self.clutter_amplitude.is_finite()) {
            return Err(Error::invalid("clutter amplitude must be finite and non-negative"));
        }
        if !(self.texture_period > 0.0) || self.clutter_scale == 0 {
            return Err(Error::invalid("texture period and clutter scale must be positive"));
        }
        Ok(())
    }
}

/// Smooth noise: a random lattice every `scale` pixels, bilinearly interpolated.
fn lattice_noise(rng: &mut impl Rng, h: usize, w: usize, scale: usize) -> Vec<f64> {
    let gh = h / scale + 2;
    let gw = w / scale + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = i as f64 / scale as f64;
        let (y0, fy) = (y.floor() as usize, y.fract());
        for j in 0..w {
            let x = j as f64 / scale as f64;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let g = |a: usize, b: usize| grid[a * gw + b];
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
            let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grating value of category `label` at patch-local pixel `(i, j)`.
fn texture(config: &SynthConfig, label: usize, i: usize, j: usize) -> f64 {
    let theta = label as f64 * PI / config.categories as f64;
    let phase = 2.0 * PI / config.texture_period * (j as f64 * theta.cos() + i as f64 * theta.sin());
    BACKGROUND + TEXTURE_AMPLITUDE * phase.sin()
}

/// Generates sample `index` of a split in memory: `(image, label, patch box)`.
/// Labels cycle through the categories.
pub fn synth_sample(config: &SynthConfig, split: Split, index: usize) -> (Tensor, usize, BBox) {
    let label = index % config.categories;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[split.tag(), index as u64]));
    let (h, w, p) = (config.height, config.width, config.patch_size);
    let top = rng.random_range(0..=h - p);
    let left = rng.random_range(0..=w - p);
    let coarse = lattice_noise(&mut rng, h, w, config.clutter_scale);
    let fine = lattice_noise(&mut rng, h, w, (config.clutter_scale / 2).max(1));

    let mut plane = vec![BACKGROUND; h * w];
    if config.clutter_amplitude > 0.0 {
        for (v, (c, f)) in plane.iter_mut().zip(coarse.iter().zip(&fine)) {
            *v = (BACKGROUND + config.clutter_amplitude * (0.7 * c + 0.3 * f)).clamp(0.0, 1.0);
        }
    }
    for i in 0..p {
        for j in 0..p {
            plane[(top + i) * w + left + j] = texture(config, label, i, j);
        }
    }
    let image = Tensor::from_fn3(3, h, w, |_, i, j| plane[i * w + j]);
    let bbox = BBox {
        top,
        left,
        bottom: top + p - 1,
        right: left + p - 1,
    };
    (image, label, bbox)
}

/// Writes `train/` and `test/` images plus their manifests under `out_dir`.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    config.validate()?;
    let mut dataset = Dataset {
        root: out_dir.to_path_buf(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, per_class) in [(Split::Train, config.train_per_class), (Split::Test, config.test_per_class)] {
        let dir = out_dir.join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::with_capacity(per_class * config.categories);
        for index in 0..per_class * config.categories {
            let (image, label, bbox) = synth_sample(config, split, index);
            let rel = Path::new(split.name()).join(format!("{index:06}.ppm"));
            let path = out_dir.join(&rel);
            std::fs::write(&path, encode_image(&image)?).map_err(|e| Error::io(&path, e))?;
            records.push(SampleRecord { path: rel, label, bbox });
        }
        let manifest = out_dir.join(match split {
            Split::Train => TRAIN_MANIFEST,
            Split::Test => TEST_MANIFEST,
        });
        write_manifest(&manifest, &records)?;
        match split {
            Split::Train => dataset.train = records,
            Split::Test => dataset.test = records,
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_image;

    fn small() -> SynthConfig {
        SynthConfig {
            train_per_class: 3,
            test_per_class: 2,
            height: 24,
            width: 32,
            patch_size: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_balance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_per_class: 50,
            test_per_class: 50,
            height: 16,
            width: 16,
            patch_size: 6,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, dir.path()).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 400);
        for k in 0..4 {
            assert_eq!(ds.train.iter().filter(|r| r.label == k).count(), 50);
            assert_eq!(ds.test.iter().filter(|r| r.label == k).count(), 50);
        }
        assert_eq!(Dataset::open(dir.path()).unwrap(), ds);
    }

    #[test]
    fn zero_clutter_is_flat_outside_patch() {
        let cfg = SynthConfig {
            clutter_amplitude: 0.0,
            ..small()
        };
        let (img, _, b) = synth_sample(&cfg, Split::Train, 5);
        for c in 0..3 {
            for i in 0..cfg.height {
                for j in 0..cfg.width {
                    let inside = (b.top..=b.bottom).contains(&i) && (b.left..=b.right).contains(&j);
                    if !inside {
                        assert_eq!(img.at3(c, i, j), BACKGROUND);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ds = synth_generate(&small(), a.path()).unwrap();
        synth_generate(&small(), b.path()).unwrap();
        for r in ds.train.iter().chain(&ds.test) {
            assert_eq!(
                std::fs::read(a.path().join(&r.path)).unwrap(),
                std::fs::read(b.path().join(&r.path)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(a.path().join(TRAIN_MANIFEST)).unwrap(),
            std::fs::read(b.path().join(TRAIN_MANIFEST)).unwrap()
        );
    }

    #[test]
    fn patches_inside_bounds_and_splits_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let ds = synth_generate(&cfg, dir.path()).unwrap();
        for r in ds.train.iter().chain(&ds.test) {
            assert!(r.bbox.bottom < cfg.height && r.bbox.right < cfg.width);
            assert_eq!(r.bbox.height(), cfg.patch_size);
        }
        for r in &ds.train {
            assert!(ds.test.iter().all(|t| t.path != r.path));
        }
        for i in 0..ds.test.len() {
            assert_ne!(synth_sample(&cfg, Split::Train, i).0, synth_sample(&cfg, Split::Test, i).0);
        }
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let e = synth_generate(&small(), &blocker.join("sub")).unwrap_err();
        assert_eq!(e.category(), "io");
    }

    #[test]
    fn linear_probe_separates_clean_patches() {
        // Nearest class mean is a linear classifier in pixel space.
        let cfg = SynthConfig {
            clutter_amplitude: 0.0,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&cfg, dir.path()).unwrap();
        let patch = |r: &SampleRecord| -> Vec<f64> {
            let img = read_image(&dir.path().join(&r.path)).unwrap();
            let mut v = Vec::new();
            for i in r.bbox.top..=r.bbox.bottom {
                for j in r.bbox.left..=r.bbox.right {
                    v.push(img.at3(0, i, j));
                }
            }
            v
        };
        let dim = cfg.patch_size * cfg.patch_size;
        let mut means = vec![vec![0.0; dim]; cfg.categories];
        for r in &ds.train {
            for (m, v) in means[r.label].iter_mut().zip(patch(r)) {
                *m += v / cfg.train_per_class as f64;
            }
        }
        for r in &ds.test {
            let x = patch(r);
            let scores: Vec<f64> = means
                .iter()
                .map(|m| m.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() - 0.5 * m.iter().map(|a| a * a).sum::<f64>())
                .collect();
            let best = (0..scores.len()).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
            assert_eq!(best, r.label);
        }
    }
}
