//! Siamese encoder, Matching Network with full-context embeddings, their
//! stacked composition, and weight storage.

mod backbone;
mod fce;
mod matching;
mod siamese;
mod ssm;
mod ssmw;
mod weights;

pub use backbone::{embed_backbone, BackboneSpec, Readout, CONV_BLOCKS, INPUT_CHANNELS};
pub use fce::{fce_param_names, fce_query, fce_support, init_fce, MatchingConfig, DEFAULT_READ_STEPS};
pub use matching::{
    matching_predict, EmbeddingSource, FewShotNet, ADAPTER_BIAS, ADAPTER_WEIGHT, BACKBONE_PREFIX, SIAMESE_PREFIX,
};
pub use siamese::{contrastive_loss, pair_distance, siamese_forward_pair, PairForward, DEFAULT_MARGIN};
pub use ssm::{ssm_embed, FrozenEmbeddings};
pub use ssmw::{decode, encode, load_weights, save_weights, MAGIC};
pub use weights::{Bound, NetworkWeights, Role, WeightEntry, FORMAT_VERSION, SIAMESE_TRAINED_MARKER};
