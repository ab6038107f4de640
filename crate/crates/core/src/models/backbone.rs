//! Four-block convolutional embedding network.

use rand::Rng;

use super::weights::{Bound, NetworkWeights, Role};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CONV_BLOCKS: usize = 4;
pub const INPUT_CHANNELS: usize = 3;

/// How the last feature map is reduced before the embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Flatten,
    GlobalAvgPool,
}

/// Shape of the conv backbone: `CONV_BLOCKS` × (conv 3×3 pad 1 → relu → maxpool 2×2),
/// then a linear layer to `embedding_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub input_size: usize,
    pub filters: usize,
    pub embedding_dim: usize,
    pub readout: Readout,
}

impl BackboneSpec {
    /// 32×32 inputs, 64 filters, flattened 2×2 map into a 64-d embedding.
    pub fn small() -> Self {
        Self::for_input(32)
    }

    /// 224×224 inputs; global average pooling keeps the parameter count fixed.
    pub fn large() -> Self {
        Self::for_input(224)
    }

    pub fn for_input(input_size: usize) -> Self {
        Self {
            input_size,
            filters: 64,
            embedding_dim: 64,
            readout: if input_size >= 64 {
                Readout::GlobalAvgPool
            } else {
                Readout::Flatten
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 1 << CONV_BLOCKS {
            return Err(Error::invalid(
                "backbone",
                format!("input size {} cannot pass {} 2x2 pools", self.input_size, CONV_BLOCKS),
            ));
        }
        if self.filters == 0 || self.embedding_dim == 0 {
            return Err(Error::invalid("backbone", "filters and embedding_dim must be positive"));
        }
        Ok(())
    }

    /// Side length of the map after each block, starting with the input.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.input_size];
        let mut s = self.input_size;
        for _ in 0..CONV_BLOCKS {
            s /= 2;
            trace.push(s);
        }
        trace
    }

    /// Width of the vector entering the embedding layer.
    pub fn feature_width(&self) -> usize {
        let s = *self.spatial_trace().last().unwrap();
        match self.readout {
            Readout::Flatten => self.filters * s * s,
            Readout::GlobalAvgPool => self.filters,
        }
    }

    pub fn conv_weight(prefix: &str, block: usize) -> String {
        format!("{prefix}.conv{}.weight", block + 1)
    }

    pub fn conv_bias(prefix: &str, block: usize) -> String {
        format!("{prefix}.conv{}.bias", block + 1)
    }

    pub fn fc_weight(prefix: &str) -> String {
        format!("{prefix}.fc.weight")
    }

    pub fn fc_bias(prefix: &str) -> String {
        format!("{prefix}.fc.bias")
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * CONV_BLOCKS + 2);
        for b in 0..CONV_BLOCKS {
            names.push(Self::conv_weight(prefix, b));
            names.push(Self::conv_bias(prefix, b));
        }
        names.push(Self::fc_weight(prefix));
        names.push(Self::fc_bias(prefix));
        names
    }

    /// Seeded uniform(±sqrt(1/fan_in)) initialisation.
    pub fn init<T: Element, R: Rng + ?Sized>(&self, prefix: &str, role: Role, rng: &mut R) -> Result<NetworkWeights> {
        self.validate()?;
        let mut w = NetworkWeights::new();
        let mut cin = INPUT_CHANNELS;
        for b in 0..CONV_BLOCKS {
            let bound = (1.0 / (cin * 9) as f64).sqrt();
            w.insert(
                Self::conv_weight(prefix, b),
                role,
                Tensor::<T>::uniform(&[self.filters, cin, 3, 3], bound, rng),
            )?;
            w.insert(Self::conv_bias(prefix, b), role, Tensor::<T>::uniform(&[self.filters], bound, rng))?;
            cin = self.filters;
        }
        let fan_in = self.feature_width();
        let bound = (1.0 / fan_in as f64).sqrt();
        w.insert(
            Self::fc_weight(prefix),
            role,
            Tensor::<T>::uniform(&[self.embedding_dim, fan_in], bound, rng),
        )?;
        w.insert(Self::fc_bias(prefix), role, Tensor::<T>::uniform(&[self.embedding_dim], bound, rng))?;
        Ok(w)
    }

    /// Check that `weights` hold every tensor this spec needs, with matching shapes.
    pub fn check_weights(&self, weights: &NetworkWeights, prefix: &str) -> Result<()> {
        let mut cin = INPUT_CHANNELS;
        for b in 0..CONV_BLOCKS {
            expect_shape(weights, &Self::conv_weight(prefix, b), &[self.filters, cin, 3, 3])?;
            expect_shape(weights, &Self::conv_bias(prefix, b), &[self.filters])?;
            cin = self.filters;
        }
        expect_shape(weights, &Self::fc_weight(prefix), &[self.embedding_dim, self.feature_width()])?;
        expect_shape(weights, &Self::fc_bias(prefix), &[self.embedding_dim])
    }

    /// Record the forward pass of `images: [B,3,S,S]` using bound parameters.
    pub fn forward<T: Element>(&self, graph: &mut Graph<T>, params: &Bound, prefix: &str, images: Var) -> Result<Var> {
        let shape = graph.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS || shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(Error::shape(
                "embed_backbone",
                &shape,
                &[0, INPUT_CHANNELS, self.input_size, self.input_size],
            ));
        }
        let mut x = images;
        for b in 0..CONV_BLOCKS {
            let k = params.var(&Self::conv_weight(prefix, b))?;
            let bias = params.var(&Self::conv_bias(prefix, b))?;
            x = graph.conv2d(x, k, bias, 1, 1)?;
            x = graph.relu(x);
            x = graph.maxpool2d(x, 2, 2)?;
        }
        let batch = shape[0];
        let features = match self.readout {
            Readout::Flatten => graph.reshape(x, &[batch, self.feature_width()])?,
            Readout::GlobalAvgPool => graph.global_avg_pool(x)?,
        };
        let w = params.var(&Self::fc_weight(prefix))?;
        let b = params.var(&Self::fc_bias(prefix))?;
        graph.linear(features, w, Some(b))
    }
}

fn expect_shape(weights: &NetworkWeights, name: &str, shape: &[usize]) -> Result<()> {
    let e = weights.entry(name)?;
    if e.tensor.shape() != shape {
        return Err(Error::shape("weights", e.tensor.shape(), shape));
    }
    Ok(())
}

/// Inference-only embedding of `images: [B,3,S,S]` into `[B, embedding_dim]`.
pub fn embed_backbone<T: Element>(
    spec: &BackboneSpec,
    weights: &NetworkWeights,
    prefix: &str,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.check_weights(weights, prefix)?;
    let mut graph = Graph::new();
    let params = weights.bind(&mut graph, &spec.param_names(prefix), false)?;
    let x = graph.constant(images.clone());
    let out = spec.forward(&mut graph, &params, prefix, x)?;
    Ok(graph.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_spec_shape_trace() {
        let spec = BackboneSpec::small();
        assert_eq!(spec.spatial_trace(), vec![32, 16, 8, 4, 2]);
        assert_eq!(spec.feature_width(), 256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = spec.init::<f32, _>("backbone", Role::Backbone, &mut rng).unwrap();
        assert_eq!(w.entry("backbone.fc.weight").unwrap().tensor.shape(), &[64, 256]);
        let imgs = Tensor::<f32>::uniform(&[2, 3, 32, 32], 1.0, &mut rng);
        let e = embed_backbone(&spec, &w, "backbone", &imgs).unwrap();
        assert_eq!(e.shape(), &[2, 64]);
    }

    #[test]
    fn large_spec_uses_global_pool() {
        let spec = BackboneSpec::large();
        assert_eq!(spec.readout, Readout::GlobalAvgPool);
        assert_eq!(spec.spatial_trace(), vec![224, 112, 56, 28, 14]);
        assert_eq!(spec.feature_width(), 64);
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let spec = BackboneSpec {
            input_size: 16,
            filters: 4,
            embedding_dim: 5,
            readout: Readout::Flatten,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = spec.init::<f64, _>("b", Role::Backbone, &mut rng).unwrap();
        let mut w = NetworkWeights::new();
        for e in init.entries() {
            w.insert(&e.name, e.role, Tensor::<f64>::zeros(e.tensor.shape())).unwrap();
        }
        let imgs = Tensor::<f64>::uniform(&[3, 3, 16, 16], 1.0, &mut rng);
        let out = embed_backbone(&spec, &w, "b", &imgs).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_entry_is_reported_by_name() {
        let spec = BackboneSpec::small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = spec.init::<f32, _>("backbone", Role::Backbone, &mut rng).unwrap();
        let partial = w.filtered(|e| e.name != "backbone.conv3.bias");
        let imgs = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let err = embed_backbone(&spec, &partial, "backbone", &imgs).unwrap_err();
        assert!(err.to_string().contains("backbone.conv3.bias"), "{err}");
    }

    #[test]
    fn wrong_input_size_rejected() {
        let spec = BackboneSpec::small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = spec.init::<f32, _>("backbone", Role::Backbone, &mut rng).unwrap();
        let imgs = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
        assert!(embed_backbone(&spec, &w, "backbone", &imgs).is_err());
        assert!(BackboneSpec::for_input(8).validate().is_err());
    }
}
