use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmspropConfig {
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        RmspropConfig {
            lr: 1e-4,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

/// RMSprop with one squared-gradient accumulator per parameter tensor:
///
/// ```text
/// acc <- rho * acc + (1 - rho) * g^2
/// p   <- p - lr * g / sqrt(acc + eps)
/// ```
#[derive(Debug, Clone)]
pub struct Rmsprop<T> {
    pub config: RmspropConfig,
    accumulators: Vec<Tensor<T>>,
}

impl<T: Element> Rmsprop<T> {
    pub fn new(config: RmspropConfig) -> Self {
        Rmsprop {
            config,
            accumulators: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.accumulators
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|p| Tensor::zeros(p.dims())).collect::<Result<_>>()?;
        }
        let rho = T::lit(self.config.rho);
        let one_minus_rho = T::lit(1.0 - self.config.rho);
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.epsilon);
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            p.expect_same_shape(g)?;
            acc.expect_same_shape(g)?;
            for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                *av = rho * *av + one_minus_rho * gv * gv;
                *pv = *pv - lr * gv / (*av + eps).sqrt();
            }
        }
        Ok(())
    }
}
