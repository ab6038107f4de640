//! Frozen Siamese extractor feeding the matching head.

use super::backbone::{embed_backbone, BackboneSpec};
use super::matching::SIAMESE_PREFIX;
use super::weights::NetworkWeights;
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Embeddings from a frozen Siamese encoder, plus a warning when the weights
/// do not carry the trained marker.
#[derive(Debug, Clone)]
pub struct FrozenEmbeddings<T> {
    pub embeddings: Tensor<T>,
    pub warning: Option<String>,
}

/// Siamese backbone forward with no gradient path to its weights.
pub fn ssm_embed<T: Element>(
    spec: &BackboneSpec,
    siamese_weights: &NetworkWeights,
    images: &Tensor<T>,
) -> Result<FrozenEmbeddings<T>> {
    let warning = (!siamese_weights.is_siamese_trained())
        .then(|| "siamese weights are not flagged as trained".to_string());
    let embeddings = embed_backbone(spec, siamese_weights, SIAMESE_PREFIX, images)?;
    Ok(FrozenEmbeddings { embeddings, warning })
}
