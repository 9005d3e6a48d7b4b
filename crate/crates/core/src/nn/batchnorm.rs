use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Element, Tensor};

/// Per-channel batch normalization over every axis but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Values saved by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
    /// Batch mean and (biased) variance per channel; train mode only.
    pub batch_moments: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        Ok(BatchNorm {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            moving_mean: Tensor::zeros(&[channels])?,
            moving_var: Tensor::full(&[channels], T::one())?,
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn trainable_count(&self) -> usize {
        2 * self.channels()
    }

    pub fn non_trainable_count(&self) -> usize {
        2 * self.channels()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.dims().last().unwrap();
        if c != self.channels() || x.dims().len() < 2 {
            return Err(Error::shape(format!(
                "batchnorm over {} channels got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(c)
    }

    /// In train mode, normalizes by batch statistics (fold them into the
    /// moving averages with [`BatchNorm::update_moving`]); in infer mode,
    /// normalizes by the moving averages.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let c = self.check(x)?;
        let n = x.len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::invalid(
                        "batchnorm in train mode needs at least two values per channel",
                    ));
                }
                channel_moments(x.data(), c)
            }
            Mode::Infer => (
                self.moving_mean.data().iter().map(|v| v.to_f64().unwrap()).collect(),
                self.moving_var.data().iter().map(|v| v.to_f64().unwrap()).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let shift: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let scale: Vec<T> = inv_std.iter().map(|&s| T::lit(s)).collect();
        let mut normalized = x.clone();
        let mut out = x.clone();
        for (xn, o) in normalized
            .data_mut()
            .chunks_exact_mut(c)
            .zip(out.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                let v = (xn[ch] - shift[ch]) * scale[ch];
                xn[ch] = v;
                o[ch] = self.gamma.data()[ch] * v + self.beta.data()[ch];
            }
        }
        let batch_moments = (mode == Mode::Train).then_some((mean, var));
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                mode,
                batch_moments,
            },
        ))
    }

    /// `moving <- momentum * moving + (1 - momentum) * batch` for mean and variance.
    pub fn update_moving(&mut self, cache: &BatchNormCache<T>) {
        let Some((mean, var)) = &cache.batch_moments else {
            return;
        };
        let m = self.momentum;
        for ch in 0..self.channels() {
            let mm = self.moving_mean.data()[ch].to_f64().unwrap();
            let mv = self.moving_var.data()[ch].to_f64().unwrap();
            self.moving_mean.data_mut()[ch] = T::lit(m * mm + (1.0 - m) * mean[ch]);
            self.moving_var.data_mut()[ch] = T::lit(m * mv + (1.0 - m) * var[ch]);
        }
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<BatchNormGrads<T>> {
        let c = self.check(grad_out)?;
        cache.normalized.expect_same_shape(grad_out)?;
        let n = grad_out.len() / c;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for (g, xh) in grad_out
            .data()
            .chunks_exact(c)
            .zip(cache.normalized.data().chunks_exact(c))
        {
            for ch in 0..c {
                let gv = g[ch].to_f64().unwrap();
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xh[ch].to_f64().unwrap();
            }
        }
        let gamma: Vec<f64> = self.gamma.data().iter().map(|v| v.to_f64().unwrap()).collect();
        let mut grad_in = grad_out.clone();
        match cache.mode {
            Mode::Train => {
                let inv_n = 1.0 / n as f64;
                for (gi, xh) in grad_in
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(cache.normalized.data().chunks_exact(c))
                {
                    for ch in 0..c {
                        let g = gi[ch].to_f64().unwrap();
                        let x = xh[ch].to_f64().unwrap();
                        let v = gamma[ch] * cache.inv_std[ch] * (g - inv_n * sum_g[ch] - x * inv_n * sum_gx[ch]);
                        gi[ch] = T::lit(v);
                    }
                }
            }
            Mode::Infer => {
                let factor: Vec<T> = (0..c).map(|ch| T::lit(gamma[ch] * cache.inv_std[ch])).collect();
                for gi in grad_in.data_mut().chunks_exact_mut(c) {
                    for ch in 0..c {
                        gi[ch] = gi[ch] * factor[ch];
                    }
                }
            }
        }
        Ok(BatchNormGrads {
            input: grad_in,
            gamma: Tensor::from_vec(&[c], sum_gx.into_iter().map(T::lit).collect())?,
            beta: Tensor::from_vec(&[c], sum_g.into_iter().map(T::lit).collect())?,
        })
    }
}

fn channel_moments<T: Element>(data: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (data.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for row in data.chunks_exact(c) {
        for ch in 0..c {
            mean[ch] += row[ch].to_f64().unwrap();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for row in data.chunks_exact(c) {
        for ch in 0..c {
            let d = row[ch].to_f64().unwrap() - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts_follow_channels() {
        let bn = BatchNorm::<f32>::new(32, 0.99, 1e-3).unwrap();
        assert_eq!(bn.trainable_count() + bn.non_trainable_count(), 128);
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let bn = BatchNorm::<f64>::new(3, 0.99, 1e-3).unwrap();
        let x = Tensor::uniform(&[4, 3, 3, 3, 3], -5.0, 9.0, 2).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        let (mean, var) = channel_moments(y.data(), 3);
        for ch in 0..3 {
            assert!(mean[ch].abs() < 1e-6);
            // epsilon shrinks the variance slightly below one
            assert!((var[ch] - 1.0).abs() < 1e-3, "var {}", var[ch]);
        }
    }

    #[test]
    fn train_mode_with_tiny_epsilon_hits_unit_variance() {
        let bn = BatchNorm::<f64>::new(2, 0.99, 1e-12).unwrap();
        let x = Tensor::uniform(&[2, 4, 4, 4, 2], -3.0, 1.0, 8).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        let (_, var) = channel_moments(y.data(), 2);
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn infer_mode_with_default_stats_is_near_identity() {
        let bn = BatchNorm::<f64>::new(2, 0.99, 1e-3).unwrap();
        let x = Tensor::uniform(&[1, 2, 2, 2, 2], -1.0, 1.0, 3).unwrap();
        let (y, _) = bn.forward(&x, Mode::Infer).unwrap();
        let k = 1.0 / (1.0f64 + 1e-3).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-12);
        }
        assert_eq!(bn.moving_mean.data(), &[0.0, 0.0]);
    }

    #[test]
    fn moving_statistics_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new(1, 0.9, 1e-3).unwrap();
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        assert_eq!(bn.moving_mean.data(), &[0.0]);
        bn.update_moving(&cache);
        assert!((bn.moving_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.moving_var.data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_value_train_mode_errors() {
        let bn = BatchNorm::<f32>::new(2, 0.99, 1e-3).unwrap();
        let x = Tensor::zeros(&[1, 1, 1, 1, 2]).unwrap();
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Infer).is_ok());
    }
}
