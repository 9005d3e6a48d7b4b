//! Dense, ReLU and dropout layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{axpy, dot, matmul_into, Element, Tensor};

/// Fully connected layer, `y = x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[in, out]`
    pub weights: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        Ok(Dense {
            weights: Tensor::glorot_uniform(&[inputs, outputs], inputs, outputs, seed)?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        match *x.dims() {
            [b, n] if n == self.inputs() => Ok(b),
            _ => Err(Error::shape(format!(
                "dense expects [B, {}], got {:?}",
                self.inputs(),
                x.shape()
            ))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check(x)?;
        let (k, n) = (self.inputs(), self.outputs());
        let mut out = vec![T::zero(); batch * n];
        matmul_into(x.data(), self.weights.data(), &mut out, batch, k, n);
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o = *o + b;
            }
        }
        Tensor::from_vec(&[batch, n], out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
        let batch = self.check(x)?;
        let (k, n) = (self.inputs(), self.outputs());
        if grad_out.dims() != [batch, n] {
            return Err(Error::shape(format!(
                "dense grad_out {:?} != [{batch}, {n}]",
                grad_out.shape()
            )));
        }
        let w = self.weights.data();
        let g = grad_out.data();
        let xd = x.data();

        let mut grad_w = vec![T::zero(); k * n];
        grad_w.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for b in 0..batch {
                let xv = xd[b * k + i];
                if xv != T::zero() {
                    axpy(xv, &g[b * n..(b + 1) * n], row);
                }
            }
        });

        let mut grad_b = vec![T::zero(); n];
        for row in g.chunks_exact(n) {
            for (gb, &v) in grad_b.iter_mut().zip(row) {
                *gb = *gb + v;
            }
        }

        let mut grad_x = vec![T::zero(); batch * k];
        grad_x.par_chunks_mut(k).enumerate().for_each(|(b, row)| {
            let gb = &g[b * n..(b + 1) * n];
            for (i, gx) in row.iter_mut().enumerate() {
                *gx = dot(&w[i * n..(i + 1) * n], gb);
            }
        });

        Ok(DenseGrads {
            input: Tensor::from_vec(&[batch, k], grad_x)?,
            weights: Tensor::from_vec(&[k, n], grad_w)?,
            bias: Tensor::from_vec(&[n], grad_b)?,
        })
    }
}

pub fn relu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Pass the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Inverted dropout. Returns the output and the multiplicative mask (empty in
/// infer mode or at rate zero, meaning identity).
pub fn dropout_forward<T: Element>(x: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} must be in [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), Vec::new()));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(x.dims(), out)?, mask))
}

pub fn dropout_backward<T: Element>(mask: &[T], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.is_empty() {
        return Ok(grad_out.clone());
    }
    if mask.len() != grad_out.len() {
        return Err(Error::shape("dropout mask does not match gradient"));
    }
    let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(grad_out.dims(), data)
}

/// Collapse every axis after the batch axis.
pub fn flatten<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = x.batch_len();
    x.clone().reshape(&[batch, x.item_len()])
}
