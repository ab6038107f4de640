//! Image ingestion, augmentation and class splits.

mod augment;
mod manifest;
mod ppm;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, mirror, rotate, zoom, AugmentOp};
pub use manifest::{
    format_split, parse_split, scan_dataset, split_classes, ClassSplit, DatasetManifest, ImageRecord, SkippedFile,
    SplitSection,
};
pub use ppm::{decode_ppm, encode_ppm, load_image, read_ppm, resize_bilinear, write_ppm, Image};
pub use synth::{synth_dataset, synth_images};

use crate::error::Result;

/// Decode every record at the manifest's image size. Augmented variants are
/// derived from their original with an rng stream keyed by record index.
pub fn load_pixels(manifest: &DatasetManifest, ops: &[AugmentOp], seed: u64) -> Result<Vec<Image>> {
    let mut originals: std::collections::HashMap<&std::path::Path, Image> = Default::default();
    let mut out = Vec::with_capacity(manifest.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let img = match originals.get(r.path.as_path()) {
            Some(img) => img.clone(),
            None => {
                let img = load_image(&r.path, manifest.image_size)?;
                originals.insert(&r.path, img.clone());
                img
            }
        };
        if r.variant == 0 {
            out.push(img);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            out.push(augment(&img, ops, &mut rng));
        }
    }
    Ok(out)
}
