//! Weight-shared pair encoder with a contrastive objective.

use super::backbone::BackboneSpec;
use super::weights::{Bound, NetworkWeights};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_MARGIN: f64 = 1.0;

/// Mean of `y·d² + (1−y)·max(0, margin−d)²`, where `y = 1` marks a same-class pair.
pub fn contrastive_loss<T: Element>(graph: &mut Graph<T>, distance: Var, same_label: &Tensor<T>, margin: f64) -> Result<Var> {
    if margin <= 0.0 || !margin.is_finite() {
        return Err(Error::invalid("contrastive_loss", format!("margin must be positive, got {margin}")));
    }
    if graph.shape(distance) != same_label.shape() || same_label.rank() != 1 {
        return Err(Error::shape("contrastive_loss", graph.shape(distance), same_label.shape()));
    }
    if let Some(d) = graph.value(distance).data().iter().find(|&&d| !(d >= T::zero())) {
        return Err(Error::invalid("contrastive_loss", format!("negative or NaN distance {d:?}")));
    }
    if same_label.data().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::invalid("contrastive_loss", "labels must be 0 or 1"));
    }
    let y = graph.constant(same_label.clone());
    let not_y = graph.constant(same_label.map(|v| T::one() - v));
    let d2 = graph.mul(distance, distance)?;
    let pos = graph.mul(y, d2)?;
    let neg_d = graph.scale(distance, -1.0);
    let shortfall = graph.add_scalar(neg_d, margin);
    let hinge = graph.relu(shortfall);
    let hinge2 = graph.mul(hinge, hinge)?;
    let neg = graph.mul(not_y, hinge2)?;
    let per_pair = graph.add(pos, neg)?;
    Ok(graph.mean(per_pair))
}

/// Output of one pass through both branches.
#[derive(Debug, Clone, Copy)]
pub struct PairForward {
    pub distance: Var,
    pub embedding_a: Var,
    pub embedding_b: Var,
}

/// Run both images through the same bound backbone parameters.
pub fn siamese_forward_pair<T: Element>(
    graph: &mut Graph<T>,
    spec: &BackboneSpec,
    params: &Bound,
    prefix: &str,
    images_a: Var,
    images_b: Var,
) -> Result<PairForward> {
    if graph.shape(images_a) != graph.shape(images_b) {
        return Err(Error::shape("siamese_forward_pair", graph.shape(images_a), graph.shape(images_b)));
    }
    let embedding_a = spec.forward(graph, params, prefix, images_a)?;
    let embedding_b = spec.forward(graph, params, prefix, images_b)?;
    let distance = graph.euclidean_distance(embedding_a, embedding_b)?;
    Ok(PairForward {
        distance,
        embedding_a,
        embedding_b,
    })
}

/// Inference-only pair distances for `[B,3,S,S]` batches.
pub fn pair_distance<T: Element>(
    spec: &BackboneSpec,
    weights: &NetworkWeights,
    prefix: &str,
    images_a: &Tensor<T>,
    images_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.check_weights(weights, prefix)?;
    let mut g = Graph::new();
    let params = weights.bind(&mut g, &spec.param_names(prefix), false)?;
    let a = g.constant(images_a.clone());
    let b = g.constant(images_b.clone());
    let out = siamese_forward_pair(&mut g, spec, &params, prefix, a, b)?;
    Ok(g.value(out.distance).clone())
}
