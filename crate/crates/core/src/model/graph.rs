use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::model::arch::{layer_shapes, ArchConfig, LayerKind, LayerSpec, LayerSummary};
use crate::nn::{
    dropout_backward, dropout_forward, relu_backward, relu_forward, BatchNorm, BatchNormCache, Conv3d, Dense,
    MaxPool3d, Mode,
};
use crate::tensor::{Element, Tensor};

/// splitmix64 finalizer, used to derive independent per-layer seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv { conv: Conv3d<T>, relu: bool },
    BatchNorm(BatchNorm<T>),
    Pool(MaxPool3d),
    Dropout { rate: f64 },
    Flatten,
    Dense { dense: Dense<T>, relu: bool },
}

#[derive(Debug, Clone)]
enum Cache<T> {
    /// Forward input, and the post-ReLU output when the layer has a ReLU.
    Affine {
        input: Tensor<T>,
        output: Option<Tensor<T>>,
    },
    BatchNorm(BatchNormCache<T>),
    Pool {
        input_dims: Vec<usize>,
        argmax: Vec<u32>,
    },
    Dropout {
        mask: Vec<T>,
    },
    Flatten {
        dims: Vec<usize>,
    },
}

/// Everything a train-mode forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

impl<T: Element> Tape<T> {
    /// Hash of every ReLU on/off decision and max-pool choice. Two passes with
    /// equal signatures lie in the same piecewise-smooth region.
    pub fn activation_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for cache in &self.caches {
            match cache {
                Cache::Affine { output: Some(y), .. } => {
                    for v in y.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Cache::Pool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

/// The network: layer specs plus their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    arch: ArchConfig,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
}

impl<T: Element> ModelGraph<T> {
    /// Glorot-initialized weights; layer `i` draws from `mix_seed(seed, i)`.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let summary = layer_shapes(&arch)?;
        let mut channels = arch.input_channels;
        let mut flat = 0;
        let mut layers = Vec::with_capacity(summary.len());
        for (i, row) in summary.iter().enumerate() {
            let layer_seed = mix_seed(seed, i as u64);
            let layer = match row.spec.kind {
                LayerKind::Conv3d {
                    kernel,
                    filters,
                    padding,
                    relu,
                } => {
                    let conv = Conv3d::new(kernel, channels, filters, padding, layer_seed)?;
                    channels = filters;
                    Layer::Conv { conv, relu }
                }
                LayerKind::BatchNorm => Layer::BatchNorm(BatchNorm::new(channels, arch.bn_momentum, arch.bn_epsilon)?),
                LayerKind::MaxPool3d { pool } => Layer::Pool(MaxPool3d::new(pool)?),
                LayerKind::Dropout { rate } => Layer::Dropout { rate },
                LayerKind::Flatten => {
                    flat = row.output.0[0];
                    Layer::Flatten
                }
                LayerKind::Dense { units, relu } => {
                    let dense = Dense::new(flat, units, layer_seed)?;
                    flat = units;
                    Layer::Dense { dense, relu }
                }
            };
            layers.push(layer);
        }
        Ok(ModelGraph {
            arch,
            specs: summary.into_iter().map(|r| r.spec).collect(),
            layers,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn summary(&self) -> Result<Vec<LayerSummary>> {
        layer_shapes(&self.arch)
    }

    /// `(total, trainable, non_trainable)`, counted from the live tensors.
    /// BN moving statistics are the only non-trainable parameters.
    pub fn count_params(&self) -> (usize, usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv { conv, .. } => trainable += conv.param_count(),
                Layer::Dense { dense, .. } => trainable += dense.param_count(),
                Layer::BatchNorm(bn) => {
                    trainable += bn.trainable_count();
                    frozen += bn.non_trainable_count();
                }
                _ => {}
            }
        }
        (trainable + frozen, trainable, frozen)
    }

    /// Expected input shape without the batch axis: `[D, H, W, C]`.
    pub fn input_dims(&self) -> [usize; 4] {
        let [d, h, w] = self.arch.input_extent;
        [d, h, w, self.arch.input_channels]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.dims().len() != 5 || x.dims()[1..] != self.input_dims() {
            return Err(Error::shape(format!(
                "model expects [B, {:?}] input, got {:?}",
                self.input_dims(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Logits `[B, classes]`. `dropout_seed` is ignored in infer mode.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>> {
        self.run(x, mode, mode, dropout_seed, false).map(|(y, _)| y)
    }

    /// Forward pass that keeps the caches needed by [`ModelGraph::backward`].
    pub fn forward_with_tape(&self, x: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<(Tensor<T>, Tape<T>)> {
        self.run(x, mode, mode, dropout_seed, true)
    }

    fn run(
        &self,
        x: &Tensor<T>,
        bn_mode: Mode,
        dropout_mode: Mode,
        dropout_seed: u64,
        keep: bool,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::new();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match layer {
                Layer::Conv { conv, relu } => {
                    let y = conv.forward(&h)?;
                    affine_out(h, y, *relu, keep)
                }
                Layer::Dense { dense, relu } => {
                    let y = dense.forward(&h)?;
                    affine_out(h, y, *relu, keep)
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = bn.forward(&h, bn_mode)?;
                    (y, Cache::BatchNorm(cache))
                }
                Layer::Pool(pool) => {
                    let out = pool.forward(&h)?;
                    (
                        out.output,
                        Cache::Pool {
                            input_dims: h.dims().to_vec(),
                            argmax: out.argmax,
                        },
                    )
                }
                Layer::Dropout { rate } => {
                    let (y, mask) = dropout_forward(&h, *rate, dropout_mode, mix_seed(dropout_seed, i as u64))?;
                    (y, Cache::Dropout { mask })
                }
                Layer::Flatten => {
                    let dims = h.dims().to_vec();
                    let batch = dims[0];
                    let n = h.item_len();
                    (h.reshape(&[batch, n])?, Cache::Flatten { dims })
                }
            };
            h = next;
            if keep || matches!(cache, Cache::BatchNorm(_)) {
                caches.push(cache);
            }
        }
        if !h.all_finite() {
            return Err(Error::NonFinite);
        }
        Ok((h, Tape { caches }))
    }

    /// Fold the batch statistics of a train-mode pass into the BN moving averages.
    pub fn update_batch_stats(&mut self, tape: &Tape<T>) {
        let mut caches = tape.caches.iter().filter_map(|c| match c {
            Cache::BatchNorm(c) => Some(c),
            _ => None,
        });
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                if let Some(cache) = caches.next() {
                    bn.update_moving(cache);
                }
            }
        }
    }

    /// Replace every BN moving mean and variance with statistics pooled over
    /// `batches`, computed with batch-mode normalization and dropout off.
    pub fn recalibrate_batchnorm<'a, I>(&mut self, batches: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a Tensor<T>>,
    {
        let n_bn = self.layers.iter().filter(|l| matches!(l, Layer::BatchNorm(_))).count();
        // per BN layer: (count, sum of means, sum of second moments), weighted by count
        let mut acc: Vec<(f64, Vec<f64>, Vec<f64>)> = vec![(0.0, Vec::new(), Vec::new()); n_bn];
        for x in batches {
            let (_, tape) = self.run(x, Mode::Train, Mode::Infer, 0, false)?;
            let moments = tape.caches.iter().filter_map(|c| match c {
                Cache::BatchNorm(c) => c.batch_moments.as_ref().map(|m| (c.normalized.len() / m.0.len(), m)),
                _ => None,
            });
            for ((count, s1, s2), (n, (mean, var))) in acc.iter_mut().zip(moments) {
                let n = n as f64;
                s1.resize(mean.len(), 0.0);
                s2.resize(mean.len(), 0.0);
                for ch in 0..mean.len() {
                    s1[ch] += n * mean[ch];
                    s2[ch] += n * (var[ch] + mean[ch] * mean[ch]);
                }
                *count += n;
            }
        }
        let mut acc = acc.into_iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                let (count, s1, s2) = acc.next().expect("one accumulator per BN layer");
                if count == 0.0 {
                    return Err(Error::invalid("recalibration needs at least one batch"));
                }
                for ch in 0..bn.channels() {
                    let mean = s1[ch] / count;
                    let var = (s2[ch] / count - mean * mean).max(0.0);
                    bn.moving_mean.data_mut()[ch] = T::lit(mean);
                    bn.moving_var.data_mut()[ch] = T::lit(var);
                }
            }
        }
        Ok(())
    }

    /// Gradients of the trainable parameters, in [`ModelGraph::params_mut`]
    /// order, and of the input.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::invalid("tape was recorded without caches"));
        }
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            g = match (layer, cache) {
                (Layer::Conv { conv, .. }, Cache::Affine { input, output }) => {
                    let g = match output {
                        Some(y) => relu_backward(y, &g)?,
                        None => g,
                    };
                    let grads = conv.backward(input, &g)?;
                    per_layer[i] = vec![grads.kernel, grads.bias];
                    grads.input
                }
                (Layer::Dense { dense, .. }, Cache::Affine { input, output }) => {
                    let g = match output {
                        Some(y) => relu_backward(y, &g)?,
                        None => g,
                    };
                    let grads = dense.backward(input, &g)?;
                    per_layer[i] = vec![grads.weights, grads.bias];
                    grads.input
                }
                (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => {
                    let grads = bn.backward(c, &g)?;
                    per_layer[i] = vec![grads.gamma, grads.beta];
                    grads.input
                }
                (Layer::Pool(pool), Cache::Pool { input_dims, argmax }) => pool.backward(input_dims, argmax, &g)?,
                (Layer::Dropout { .. }, Cache::Dropout { mask }) => dropout_backward(mask, &g)?,
                (Layer::Flatten, Cache::Flatten { dims }) => g.reshape(dims)?,
                _ => return Err(Error::invalid("tape does not match the model")),
            };
        }
        Ok((per_layer.into_iter().flatten().collect(), g))
    }

    /// Trainable tensors: conv kernel and bias, BN gamma and beta, dense
    /// weights and bias, in layer order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { conv, .. } => {
                    out.push(&mut conv.kernel);
                    out.push(&mut conv.bias);
                }
                Layer::Dense { dense, .. } => {
                    out.push(&mut dense.weights);
                    out.push(&mut dense.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| !name.ends_with("/moving_mean") && !name.ends_with("/moving_variance"))
            .map(|(_, t)| t)
            .collect()
    }

    /// Every stored tensor, trainable or not, named `layer/role`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (spec, layer) in self.specs.iter().zip(&self.layers) {
            let n = &spec.name;
            match layer {
                Layer::Conv { conv, .. } => {
                    out.push((format!("{n}/kernel"), &conv.kernel));
                    out.push((format!("{n}/bias"), &conv.bias));
                }
                Layer::Dense { dense, .. } => {
                    out.push((format!("{n}/kernel"), &dense.weights));
                    out.push((format!("{n}/bias"), &dense.bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{n}/gamma"), &bn.gamma));
                    out.push((format!("{n}/beta"), &bn.beta));
                    out.push((format!("{n}/moving_mean"), &bn.moving_mean));
                    out.push((format!("{n}/moving_variance"), &bn.moving_var));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable counterpart of [`ModelGraph::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (spec, layer) in self.specs.iter().zip(&mut self.layers) {
            let n = &spec.name;
            match layer {
                Layer::Conv { conv, .. } => {
                    out.push((format!("{n}/kernel"), &mut conv.kernel));
                    out.push((format!("{n}/bias"), &mut conv.bias));
                }
                Layer::Dense { dense, .. } => {
                    out.push((format!("{n}/kernel"), &mut dense.weights));
                    out.push((format!("{n}/bias"), &mut dense.bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("{n}/gamma"), &mut bn.gamma));
                    out.push((format!("{n}/beta"), &mut bn.beta));
                    out.push((format!("{n}/moving_mean"), &mut bn.moving_mean));
                    out.push((format!("{n}/moving_variance"), &mut bn.moving_var));
                }
                _ => {}
            }
        }
        out
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv { conv, relu } => Layer::Conv {
                    conv: Conv3d {
                        kernel: conv.kernel.cast(),
                        bias: conv.bias.cast(),
                        padding: conv.padding,
                    },
                    relu: *relu,
                },
                Layer::Dense { dense, relu } => Layer::Dense {
                    dense: Dense {
                        weights: dense.weights.cast(),
                        bias: dense.bias.cast(),
                    },
                    relu: *relu,
                },
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                    gamma: bn.gamma.cast(),
                    beta: bn.beta.cast(),
                    moving_mean: bn.moving_mean.cast(),
                    moving_var: bn.moving_var.cast(),
                    momentum: bn.momentum,
                    epsilon: bn.epsilon,
                }),
                Layer::Pool(p) => Layer::Pool(*p),
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        ModelGraph {
            arch: self.arch.clone(),
            specs: self.specs.clone(),
            layers,
        }
    }
}

fn affine_out<T: Element>(input: Tensor<T>, y: Tensor<T>, relu: bool, keep: bool) -> (Tensor<T>, Cache<T>) {
    let y = if relu { relu_forward(&y) } else { y };
    let cache = if keep {
        Cache::Affine {
            input,
            output: relu.then(|| y.clone()),
        }
    } else {
        Cache::Flatten { dims: Vec::new() }
    };
    (y, cache)
}
