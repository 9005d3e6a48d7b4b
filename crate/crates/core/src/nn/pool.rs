use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Max pooling with stride equal to the window. Trailing cells that do not
/// fill a whole window are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool3d {
    pub pool: [usize; 3],
}

/// Forward output plus, for every output element, the flat index of the
/// chosen input element within its batch item.
#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

impl MaxPool3d {
    pub fn new(pool: [usize; 3]) -> Result<Self> {
        if pool.contains(&0) {
            return Err(Error::invalid("pool extents must be positive"));
        }
        Ok(MaxPool3d { pool })
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let out = [0, 1, 2].map(|i| input[i] / self.pool[i]);
        if out.contains(&0) {
            return Err(Error::shape(format!(
                "pool {:?} is larger than input {input:?}",
                self.pool
            )));
        }
        Ok(out)
    }

    pub fn forward<T: Element>(&self, x: &Tensor<T>) -> Result<PoolOutput<T>> {
        let [batch, d, h, w, c] = match *x.dims() {
            [b, d, h, w, c] => [b, d, h, w, c],
            _ => {
                return Err(Error::shape(format!(
                    "maxpool expects [B, D, H, W, C], got {:?}",
                    x.shape()
                )))
            }
        };
        let [od, oh, ow] = self.output_extent([d, h, w])?;
        let [pd, ph, pw] = self.pool;
        let out_item = od * oh * ow * c;
        let mut out = vec![T::zero(); batch * out_item];
        let mut argmax = vec![0u32; batch * out_item];
        out.par_chunks_mut(out_item)
            .zip(argmax.par_chunks_mut(out_item))
            .enumerate()
            .for_each(|(s, (o, am))| {
                let src = x.item(s);
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            for ch in 0..c {
                                let mut best = T::neg_infinity();
                                let mut best_ix = 0usize;
                                let mut first = true;
                                for a in 0..pd {
                                    for b in 0..ph {
                                        for cc in 0..pw {
                                            let ix = (((z * pd + a) * h + y * ph + b) * w + xo * pw + cc) * c + ch;
                                            let v = src[ix];
                                            // strict comparison keeps the first maximum in scan order
                                            if first || v > best {
                                                best = v;
                                                best_ix = ix;
                                                first = false;
                                            }
                                        }
                                    }
                                }
                                let oi = ((z * oh + y) * ow + xo) * c + ch;
                                o[oi] = best;
                                am[oi] = best_ix as u32;
                            }
                        }
                    }
                }
            });
        Ok(PoolOutput {
            output: Tensor::from_vec(&[batch, od, oh, ow, c], out)?,
            argmax,
        })
    }

    /// Route each output gradient to its recorded argmax.
    pub fn backward<T: Element>(
        &self,
        input_dims: &[usize],
        argmax: &[u32],
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if argmax.len() != grad_out.len() {
            return Err(Error::shape("maxpool argmax does not match grad_out"));
        }
        let mut grad = Tensor::zeros(input_dims)?;
        let item_in = grad.item_len();
        let item_out = grad_out.item_len();
        grad.data_mut().par_chunks_mut(item_in).enumerate().for_each(|(s, gi)| {
            let go = grad_out.item(s);
            let am = &argmax[s * item_out..(s + 1) * item_out];
            for (&ix, &g) in am.iter().zip(go) {
                gi[ix as usize] = gi[ix as usize] + g;
            }
        });
        Ok(grad)
    }
}
