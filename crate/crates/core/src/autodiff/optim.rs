//! First-order optimizers operating on plain tensors.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Sgd(SgdConfig),
}

/// Moment buffers for every parameter, in parameter order.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new<'a>(kind: OptimizerKind, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
        let zeros = |s: &Vec<usize>| vec![T::zero(); s.iter().product()];
        let first = shapes.iter().map(zeros).collect();
        let second = match kind {
            OptimizerKind::Adam(_) => shapes.iter().map(zeros).collect(),
            OptimizerKind::Sgd(_) => Vec::new(),
        };
        Self {
            kind,
            step: 0,
            first,
            second,
            shapes,
        }
    }

    pub fn adam<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self::new(OptimizerKind::Adam(config), params)
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.second[index]
    }

    /// Apply one update in place. `grads[i]` pairs with `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::invalid(
                "optimizer",
                format!(
                    "expected {} parameters, got {} params and {} grads",
                    self.shapes.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.shapes[i].as_slice() {
                return Err(Error::shape("optimizer", &self.shapes[i], p.shape()));
            }
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam(cfg) => {
                let b1 = T::from_f64(cfg.beta1);
                let b2 = T::from_f64(cfg.beta2);
                let one = T::one();
                let bc1 = T::from_f64(1.0 - cfg.beta1.powi(self.step as i32));
                let bc2 = T::from_f64(1.0 - cfg.beta2.powi(self.step as i32));
                let lr = T::from_f64(cfg.lr);
                let eps = T::from_f64(cfg.eps);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd(cfg) => {
                let lr = T::from_f64(cfg.lr);
                let mu = T::from_f64(cfg.momentum);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    for ((pv, &gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(self.first[i].iter_mut()) {
                        *vel = mu * *vel + gv;
                        *pv = *pv - lr * *vel;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let zero = Tensor::zeros(&[2]);
        let mut p = Tensor::<f64>::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut st = OptimizerState::adam(AdamConfig::default(), [&p]);
        st.update(&mut [&mut p], &[&zero]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);

        let g = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
        st.update(&mut [&mut p], &[&g]).unwrap();
        let (m, v) = (st.first_moment(0).to_vec(), st.second_moment(0).to_vec());
        st.update(&mut [&mut p], &[&zero]).unwrap();
        for i in 0..2 {
            assert!((st.first_moment(0)[i] - 0.9 * m[i]).abs() < 1e-15);
            assert!((st.second_moment(0)[i] - 0.999 * v[i]).abs() < 1e-15);
        }
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = Tensor::<f64>::new(&[3], vec![0.0; 3]).unwrap();
        let cfg = AdamConfig::default();
        let mut st = OptimizerState::adam(cfg, [&p]);
        let g = Tensor::new(&[3], vec![2.0, -0.5, 1e-3]).unwrap();
        st.update(&mut [&mut p], &[&g]).unwrap();
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            assert!(pv * gv < 0.0);
            assert!((pv.abs() - cfg.lr).abs() < 1e-5 * cfg.lr.max(1.0));
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut st = OptimizerState::adam(AdamConfig::default(), [&p]);
        let g = Tensor::zeros(&[3]);
        assert!(st.update(&mut [&mut p], &[&g]).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn sgd_momentum() {
        let mut p = Tensor::<f64>::new(&[1], vec![1.0]).unwrap();
        let mut st = OptimizerState::new(OptimizerKind::Sgd(SgdConfig { lr: 0.1, momentum: 0.5 }), [&p]);
        let g = Tensor::new(&[1], vec![1.0]).unwrap();
        st.update(&mut [&mut p], &[&g]).unwrap();
        st.update(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 - 0.15)).abs() < 1e-12);
    }
}
