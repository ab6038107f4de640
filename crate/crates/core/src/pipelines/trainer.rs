//! One optimizer step over a named subset of network weights.

use crate::autodiff::{AdamConfig, Graph, OptimizerState, Var};
use crate::error::{Error, Result};
use crate::models::{Bound, NetworkWeights};
use crate::tensor::Tensor;

pub(crate) struct Trainer {
    pub weights: NetworkWeights,
    trainable: Vec<String>,
    frozen: Vec<String>,
    optimizer: OptimizerState<f32>,
}

impl Trainer {
    pub fn new(weights: NetworkWeights, trainable: Vec<String>, frozen: Vec<String>, lr: f64) -> Result<Self> {
        let tensors: Vec<Tensor<f32>> = trainable.iter().map(|n| weights.typed::<f32>(n)).collect::<Result<_>>()?;
        for n in &frozen {
            weights.typed::<f32>(n)?;
        }
        let optimizer = OptimizerState::adam(AdamConfig { lr, ..AdamConfig::default() }, tensors.iter());
        Ok(Self {
            weights,
            trainable,
            frozen,
            optimizer,
        })
    }

    /// Build the loss with `build`, backpropagate, and update the trainable
    /// tensors. Non-finite losses or gradients abort with the offending name.
    pub fn step(
        &mut self,
        epoch: usize,
        batch: usize,
        build: impl FnOnce(&mut Graph<f32>, &Bound) -> Result<Var>,
    ) -> Result<f64> {
        let mut graph = Graph::new();
        let mut params = self.weights.bind(&mut graph, &self.trainable, true)?;
        params.merge(self.weights.bind(&mut graph, &self.frozen, false)?);
        let numeric = |tensor: &str| Error::Numeric {
            epoch,
            batch,
            tensor: tensor.to_string(),
        };
        let loss = build(&mut graph, &params).map_err(|e| match e {
            Error::NonFinite(what) => numeric(&what),
            other => other,
        })?;
        let value = graph.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(numeric("loss"));
        }
        let grads = graph.backward(loss)?;
        let mut grad_list = Vec::with_capacity(self.trainable.len());
        for name in &self.trainable {
            let g = grads.get(params.var(name)?).expect("trainable gradient");
            if !g.is_finite() {
                return Err(numeric(&format!("grad({name})")));
            }
            grad_list.push(g);
        }
        let mut updated: Vec<Tensor<f32>> = self.trainable.iter().map(|n| self.weights.typed::<f32>(n)).collect::<Result<_>>()?;
        {
            let mut refs: Vec<&mut Tensor<f32>> = updated.iter_mut().collect();
            self.optimizer.update(&mut refs, &grad_list)?;
        }
        for (name, t) in self.trainable.iter().zip(updated) {
            if !t.is_finite() {
                return Err(numeric(name));
            }
            *self.weights.typed_mut::<f32>(name)? = t;
        }
        Ok(value)
    }
}

/// Early-stopping bookkeeping on the epoch loss.
pub(crate) struct Patience {
    limit: usize,
    best: f64,
    stale: usize,
}

impl Patience {
    pub fn new(limit: usize) -> Self {
        Self {
            limit,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Record an epoch loss; true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.limit > 0 && self.stale >= self.limit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Role;

    fn one_weight() -> NetworkWeights {
        let mut w = NetworkWeights::new();
        w.insert("w", Role::Backbone, Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        w
    }

    #[test]
    fn nan_loss_aborts_with_location() {
        let mut t = Trainer::new(one_weight(), vec!["w".into()], Vec::new(), 1e-3).unwrap();
        let err = t
            .step(3, 7, |g, p| {
                let w = p.var("w")?;
                let nan = g.constant(Tensor::new(&[2], vec![f32::NAN, 0.0])?);
                let prod = g.mul(w, nan)?;
                Ok(g.sum(prod))
            })
            .unwrap_err();
        match err {
            Error::Numeric { epoch, batch, tensor } => assert_eq!((epoch, batch, tensor.as_str()), (3, 7, "loss")),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(t.weights, one_weight());
    }

    #[test]
    fn infinite_gradient_names_tensor() {
        let mut t = Trainer::new(one_weight(), vec!["w".into()], Vec::new(), 1e-3).unwrap();
        let err = t
            .step(0, 0, |g, p| {
                let w = p.var("w")?;
                // Each branch sums to 0 but the gradient of w[0] is 2·MAX.
                let big = Tensor::new(&[2], vec![f32::MAX, f32::MAX / 2.0])?;
                let (a, b) = (g.constant(big.clone()), g.constant(big));
                let (pa, pb) = (g.mul(w, a)?, g.mul(w, b)?);
                let (sa, sb) = (g.sum(pa), g.sum(pb));
                g.add(sa, sb)
            })
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { ref tensor, .. } if tensor == "grad(w)"), "{err}");
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut t = Trainer::new(one_weight(), vec!["w".into()], Vec::new(), 0.0).unwrap();
        for i in 0..5 {
            t.step(0, i, |g, p| {
                let w = p.var("w")?;
                let sq = g.mul(w, w)?;
                Ok(g.sum(sq))
            })
            .unwrap();
        }
        assert_eq!(t.weights, one_weight());
    }

    #[test]
    fn patience_counts_stale_epochs() {
        let mut p = Patience::new(2);
        assert!(!p.observe(1.0));
        assert!(!p.observe(0.5));
        assert!(!p.observe(0.6));
        assert!(p.observe(0.5));
        let mut never = Patience::new(0);
        assert!((0..10).all(|_| !never.observe(1.0)));
    }
}
