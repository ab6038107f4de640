//! Clustering quality and classification scores.

mod classification;
mod clustering;

pub use classification::{confusion, f1_scores, ConfusionMatrix, F1Scores};
pub use clustering::{kmeans, silhouette, ClusterAssignment, KMeansConfig};
