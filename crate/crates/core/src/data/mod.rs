//! Datasets: synthetic generation, Netpbm images and CSV manifests.

mod manifest;
mod pnm;
mod synth;

pub use manifest::{decode_manifest, encode_manifest, read_manifest, write_manifest, SampleRecord};
pub use pnm::{decode_image, encode_image, read_image, to_byte, write_image};
pub use synth::{synth_generate, synth_sample, Split, SynthConfig};

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::tensor::Tensor;

pub const TRAIN_MANIFEST: &str = "train.csv";
pub const TEST_MANIFEST: &str = "test.csv";

/// A dataset root with its train and test manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// An image held in memory alongside its record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub record: SampleRecord,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Dataset {
            root: root.to_path_buf(),
            train: read_manifest(&root.join(TRAIN_MANIFEST))?,
            test: read_manifest(&root.join(TEST_MANIFEST))?,
        })
    }

    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        let records = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        records
            .iter()
            .map(|r| {
                Ok(Sample {
                    image: read_image(&self.root.join(&r.path))?,
                    record: r.clone(),
                })
            })
            .collect()
    }
}
