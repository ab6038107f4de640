//! Cosine-attention classifier and the composed few-shot network.

use rand::Rng;

use super::backbone::BackboneSpec;
use super::fce::{fce_param_names, fce_query, fce_support, init_fce, MatchingConfig};
use super::weights::{Bound, NetworkWeights, Role};
use crate::autodiff::{one_hot_targets, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Label distribution `ŷ = Σᵢ softmaxᵢ(cos(q, gᵢ)) · yᵢ` for each query row.
///
/// `queries: [Q, D]`, `support: [M, D]`, `labels: [M, N]` one-hot. Returns `[Q, N]`.
pub fn matching_predict<T: Element>(graph: &mut Graph<T>, queries: Var, support: Var, labels: &Tensor<T>) -> Result<Var> {
    let (qs, ss) = (graph.shape(queries).to_vec(), graph.shape(support).to_vec());
    if qs.len() != 2 || ss.len() != 2 || qs[1] != ss[1] {
        return Err(Error::shape("matching_predict", &qs, &ss));
    }
    if labels.rank() != 2 || labels.shape()[0] != ss[0] {
        return Err(Error::shape("matching_predict", &ss, labels.shape()));
    }
    one_hot_targets(labels)?;
    let qn = graph.normalize_rows(queries)?;
    let sn = graph.normalize_rows(support)?;
    let cos = graph.matmul_nt(qn, sn)?;
    let attention = graph.softmax_rows(cos)?;
    let y = graph.constant(labels.clone());
    graph.matmul(attention, y)
}

/// Where episode embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// The network's own trainable backbone (`backbone.*`).
    Backbone,
    /// A trained Siamese extractor (`siamese.*`), frozen.
    FrozenSiamese,
}

pub const BACKBONE_PREFIX: &str = "backbone";
pub const SIAMESE_PREFIX: &str = "siamese";
pub const ADAPTER_WEIGHT: &str = "adapter.weight";
pub const ADAPTER_BIAS: &str = "adapter.bias";

/// Matching Network over a convolutional encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FewShotNet {
    pub backbone: BackboneSpec,
    pub matching: MatchingConfig,
    pub source: EmbeddingSource,
    /// Width of the vectors fed to FCE and the classifier.
    pub head_dim: usize,
}

impl FewShotNet {
    pub fn matching(backbone: BackboneSpec, matching: MatchingConfig) -> Self {
        Self {
            backbone,
            matching,
            source: EmbeddingSource::Backbone,
            head_dim: backbone.embedding_dim,
        }
    }

    pub fn stacked(siamese: BackboneSpec, matching: MatchingConfig, head_dim: usize) -> Self {
        Self {
            backbone: siamese,
            matching,
            source: EmbeddingSource::FrozenSiamese,
            head_dim,
        }
    }

    pub fn prefix(&self) -> &'static str {
        match self.source {
            EmbeddingSource::Backbone => BACKBONE_PREFIX,
            EmbeddingSource::FrozenSiamese => SIAMESE_PREFIX,
        }
    }

    /// An adapter layer is inserted only when the encoder width differs from the head width.
    pub fn has_adapter(&self) -> bool {
        self.backbone.embedding_dim != self.head_dim
    }

    pub fn encoder_names(&self) -> Vec<String> {
        self.backbone.param_names(self.prefix())
    }

    pub fn head_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.has_adapter() {
            names.push(ADAPTER_WEIGHT.to_string());
            names.push(ADAPTER_BIAS.to_string());
        }
        if self.matching.fce_enabled {
            names.extend(fce_param_names());
        }
        names
    }

    /// Tensors updated by training.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = match self.source {
            EmbeddingSource::Backbone => self.encoder_names(),
            EmbeddingSource::FrozenSiamese => Vec::new(),
        };
        names.extend(self.head_names());
        names
    }

    /// Fresh weights for everything this network owns. A frozen Siamese
    /// encoder is not included; it comes from Siamese training.
    pub fn init<T: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<NetworkWeights> {
        self.matching.validate()?;
        let mut w = match self.source {
            EmbeddingSource::Backbone => self.backbone.init::<T, _>(BACKBONE_PREFIX, Role::Backbone, rng)?,
            EmbeddingSource::FrozenSiamese => NetworkWeights::new(),
        };
        if self.has_adapter() {
            let fan_in = self.backbone.embedding_dim;
            let bound = (1.0 / fan_in as f64).sqrt();
            w.insert(ADAPTER_WEIGHT, Role::None, Tensor::<T>::uniform(&[self.head_dim, fan_in], bound, rng))?;
            w.insert(ADAPTER_BIAS, Role::None, Tensor::<T>::uniform(&[self.head_dim], bound, rng))?;
        }
        if self.matching.fce_enabled {
            w.extend(&init_fce::<T, _>(self.head_dim, rng)?)?;
        }
        Ok(w)
    }

    pub fn check_weights(&self, weights: &NetworkWeights) -> Result<()> {
        self.backbone.check_weights(weights, self.prefix())?;
        for name in self.head_names() {
            weights.entry(&name)?;
        }
        if self.matching.fce_enabled {
            let ih = weights.entry("fce_f.w_ih")?;
            if ih.tensor.shape() != [4 * self.head_dim, self.head_dim] {
                return Err(Error::shape("fce weights", ih.tensor.shape(), &[4 * self.head_dim, self.head_dim]));
            }
        }
        Ok(())
    }

    /// Bind encoder and head tensors; the encoder is trainable only for [`EmbeddingSource::Backbone`].
    pub fn bind<T: Element>(&self, graph: &mut Graph<T>, weights: &NetworkWeights, train: bool) -> Result<Bound> {
        let encoder_trainable = train && self.source == EmbeddingSource::Backbone;
        let mut bound = weights.bind(graph, &self.encoder_names(), encoder_trainable)?;
        bound.merge(weights.bind(graph, &self.head_names(), train)?);
        Ok(bound)
    }

    /// Encoder forward for `images: [B,3,S,S]`, followed by the adapter if present.
    pub fn encode<T: Element>(&self, graph: &mut Graph<T>, params: &Bound, images: Var) -> Result<Var> {
        let e = self.backbone.forward(graph, params, self.prefix(), images)?;
        self.adapt(graph, params, e)
    }

    pub fn adapt<T: Element>(&self, graph: &mut Graph<T>, params: &Bound, embeddings: Var) -> Result<Var> {
        if self.has_adapter() {
            let w = params.var(ADAPTER_WEIGHT)?;
            let b = params.var(ADAPTER_BIAS)?;
            graph.linear(embeddings, w, Some(b))
        } else {
            Ok(embeddings)
        }
    }

    /// Class distributions `[Q, N]` for embedded queries given an embedded support set.
    pub fn classify<T: Element>(
        &self,
        graph: &mut Graph<T>,
        params: &Bound,
        support: Var,
        queries: Var,
        support_labels: &Tensor<T>,
    ) -> Result<Var> {
        let (support_ctx, query_ctx) = if self.matching.fce_enabled {
            let s = fce_support(graph, params, support)?;
            let q = fce_query(graph, params, queries, s, self.matching.fce_steps)?;
            (s, q)
        } else {
            (support, queries)
        };
        matching_predict(graph, query_ctx, support_ctx, support_labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn predict(q: &Tensor<f64>, s: &Tensor<f64>, y: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let sv = g.constant(s.clone());
        let out = matching_predict(&mut g, qv, sv, y).unwrap();
        g.value(out).clone()
    }

    fn one_hot(labels: &[usize], n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[labels.len(), n]);
        for (i, &l) in labels.iter().enumerate() {
            t.set(&[i, l], 1.0);
        }
        t
    }

    #[test]
    fn exact_match_wins() {
        let mut s = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            s.set(&[i, i], 2.0);
        }
        let q = Tensor::new(&[1, 3], vec![0.0, 5.0, 0.0]).unwrap();
        let p = predict(&q, &s, &one_hot(&[2, 0, 1], 3));
        let argmax = (0..3).max_by(|&a, &b| p.data()[a].total_cmp(&p.data()[b])).unwrap();
        assert_eq!(argmax, 0);
    }

    #[test]
    fn identical_supports_give_uniform() {
        let s = Tensor::<f64>::full(&[5, 4], 0.3);
        let q = Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let p = predict(&q, &s, &one_hot(&[0, 1, 2, 3, 4], 5));
        for &v in p.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_support_is_finite() {
        let s = Tensor::<f64>::zeros(&[2, 3]);
        let q = Tensor::<f64>::zeros(&[1, 3]);
        let p = predict(&q, &s, &one_hot(&[0, 1], 2));
        assert!(p.is_finite());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_labels_rejected() {
        let s = Tensor::<f64>::zeros(&[2, 3]);
        let q = Tensor::<f64>::zeros(&[1, 3]);
        let mut g = Graph::new();
        let qv = g.constant(q);
        let sv = g.constant(s);
        let bad = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matching_predict(&mut g, qv, sv, &bad).is_err());
        let short = one_hot(&[0], 2);
        assert!(matching_predict(&mut g, qv, sv, &short).is_err());
    }

    #[test]
    fn stacked_net_owns_only_head() {
        let spec = BackboneSpec::small();
        let net = FewShotNet::stacked(spec, MatchingConfig::default(), 64);
        assert!(!net.has_adapter());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = net.init::<f32, _>(&mut rng).unwrap();
        assert!(w.entries().iter().all(|e| !e.name.starts_with("siamese")));
        assert!(net.trainable_names().iter().all(|n| n.starts_with("fce_")));

        let adapted = FewShotNet::stacked(spec, MatchingConfig::default(), 32);
        assert!(adapted.has_adapter());
        let w = adapted.init::<f32, _>(&mut rng).unwrap();
        assert_eq!(w.entry(ADAPTER_WEIGHT).unwrap().tensor.shape(), &[32, 64]);
    }
}
