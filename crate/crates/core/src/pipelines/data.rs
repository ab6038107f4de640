//! Dataset preparation for a run: scan, split, optional augmentation, pixel cache.

use crate::datasets::{
    load_pixels, parse_split, scan_dataset, split_classes, AugmentOp, DatasetManifest, Image, SplitSection,
};
use crate::error::{Error, Result};
use crate::models::{embed_backbone, BackboneSpec, NetworkWeights};
use crate::tensor::Tensor;

use super::config::RunConfig;

/// A manifest with every record decoded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pixels: Vec<Image>,
}

/// Records embedded per forward pass during inference.
pub const EMBED_CHUNK: usize = 64;

impl Dataset {
    pub fn new(manifest: DatasetManifest, pixels: Vec<Image>) -> Result<Self> {
        if pixels.len() != manifest.len() {
            return Err(Error::Data(format!("{} images for {} records", pixels.len(), manifest.len())));
        }
        Ok(Self { manifest, pixels })
    }

    /// `[B, 3, S, S]` batch of the given records.
    pub fn batch(&self, records: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Image> = records.iter().map(|&r| &self.pixels[r]).collect();
        Tensor::stack(&items)
    }

    /// `[records.len(), D]` inference embeddings from the backbone under `prefix`.
    pub fn embed(&self, spec: &BackboneSpec, weights: &NetworkWeights, prefix: &str, records: &[usize]) -> Result<Tensor<f32>> {
        let mut rows: Vec<f32> = Vec::with_capacity(records.len() * spec.embedding_dim);
        for chunk in records.chunks(EMBED_CHUNK) {
            let e = embed_backbone(spec, weights, prefix, &self.batch(chunk)?)?;
            rows.extend_from_slice(e.data());
        }
        Tensor::new(&[records.len(), spec.embedding_dim], rows)
    }
}

/// Apply the configured class split: a split file if given, explicit counts,
/// or the automatic `max(n_way, 2C/5)` test share.
pub fn apply_split(manifest: &DatasetManifest, config: &RunConfig) -> Result<DatasetManifest> {
    if let Some(path) = &config.split_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read split file {}: {e}", path.display())))?;
        let split = parse_split(&text, manifest)?;
        return manifest.clone().with_split(split);
    }
    let c = manifest.num_classes();
    let (base, val, test) = match (config.split_base, config.split_validation, config.split_test) {
        (0, 0, 0) => {
            let test = config.n_way.max(2 * c / 5).min(c);
            (c - test, 0, test)
        }
        counts => counts,
    };
    split_classes(manifest, base, val, test, config.seed)
}

/// Scan `config.data_root`, split it, and decode every record. With
/// augmentation on, base classes gain `augment_multiplier - 1` variants.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    if !config.data_root.exists() {
        return Err(Error::Data(format!("dataset root {} does not exist", config.data_root.display())));
    }
    let manifest = scan_dataset(&config.data_root, config.image_size)?;
    prepare_dataset(manifest, config)
}

pub fn prepare_dataset(manifest: DatasetManifest, config: &RunConfig) -> Result<Dataset> {
    let mut manifest = apply_split(&manifest, config)?;
    let ops = if config.augment {
        manifest = manifest.with_augmented_copies(config.augment_multiplier)?;
        AugmentOp::defaults()
    } else {
        Vec::new()
    };
    let pixels = load_pixels(&manifest, &ops, config.seed)?;
    Dataset::new(manifest, pixels)
}

/// The held-out section for pair statistics and evaluation: test if it has
/// classes, else validation, else base.
pub fn held_out_section(manifest: &DatasetManifest) -> SplitSection {
    if manifest.split.test.len() >= 2 {
        SplitSection::Test
    } else if manifest.split.validation.len() >= 2 {
        SplitSection::Validation
    } else {
        SplitSection::Base
    }
}
