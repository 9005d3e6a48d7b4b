use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{crop_spatial, dot, matmul_into, pad_spatial, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that keeps each spatial extent. Odd totals put the extra
    /// cell on the high side.
    Same,
    Valid,
}

/// Stride-1 3D convolution over channels-last volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    /// `[kd, kh, kw, C_in, C_out]`
    pub kernel: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub padding: Padding,
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Conv3d<T> {
    /// Glorot-uniform kernel, zero bias.
    pub fn new(
        kernel: [usize; 3],
        in_channels: usize,
        out_channels: usize,
        padding: Padding,
        seed: u64,
    ) -> Result<Self> {
        let receptive: usize = kernel.iter().product();
        let dims = [kernel[0], kernel[1], kernel[2], in_channels, out_channels];
        Ok(Conv3d {
            kernel: Tensor::glorot_uniform(&dims, receptive * in_channels, receptive * out_channels, seed)?,
            bias: Tensor::zeros(&[out_channels])?,
            padding,
        })
    }

    pub fn from_parts(kernel: Tensor<T>, bias: Tensor<T>, padding: Padding) -> Result<Self> {
        if kernel.dims().len() != 5 || bias.dims() != [kernel.dims()[4]] {
            return Err(Error::shape(format!(
                "conv kernel {:?} and bias {:?} are inconsistent",
                kernel.shape(),
                bias.shape()
            )));
        }
        Ok(Conv3d { kernel, bias, padding })
    }

    pub fn kernel_extent(&self) -> [usize; 3] {
        let d = self.kernel.dims();
        [d[0], d[1], d[2]]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[4]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    fn pads(&self) -> [(usize, usize); 3] {
        same_pads(self.kernel_extent(), self.padding)
    }

    /// Output `[D, H, W]` for a given input `[D, H, W]`.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        conv_output_extent(input, self.kernel_extent(), self.padding)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 5]> {
        match *x.dims() {
            [b, d, h, w, c] if c == self.in_channels() => Ok([b, d, h, w, c]),
            _ => Err(Error::shape(format!(
                "conv3d expects [B, D, H, W, {}], got {:?}",
                self.in_channels(),
                x.shape()
            ))),
        }
    }

    fn padded_items(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let pads = self.pads();
        (0..x.batch_len())
            .into_par_iter()
            .map(|i| pad_spatial(&x.item_tensor(i)?, pads))
            .collect()
    }

    fn geometry(&self, padded: &Tensor<T>, output: [usize; 3]) -> Geometry {
        let p = padded.dims();
        Geometry {
            input: [p[0], p[1], p[2]],
            output,
            kernel: self.kernel_extent(),
            cin: self.in_channels(),
            cout: self.out_channels(),
        }
    }

    /// Each output plane is `bias + Wᵀ · patches`, where `patches` holds the
    /// receptive-field values of the plane as `[kd·kh·kw·C_in, H'·W']`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [batch, d, h, w, _] = self.check_input(x)?;
        let [od, oh, ow] = self.output_extent([d, h, w])?;
        let padded = self.padded_items(x)?;
        let geom = self.geometry(&padded[0], [od, oh, ow]);
        let (k, p, cout) = (geom.patch_rows(), oh * ow, geom.cout);
        let kernel_t = transpose_raw(self.kernel.data(), k, cout);
        let bias = self.bias.data();
        let mut out = Tensor::zeros(&[batch, od, oh, ow, cout])?;
        out.data_mut()
            .par_chunks_mut(p * cout)
            .enumerate()
            .for_each(|(i, out_plane)| {
                let (b, z) = (i / od, i % od);
                let mut patches = vec![T::zero(); k * p];
                gather_patches(&geom, padded[b].data(), z, &mut patches);
                let mut acc = vec![T::zero(); cout * p];
                matmul_into(&kernel_t, &patches, &mut acc, cout, k, p);
                for (pos, o) in out_plane.chunks_exact_mut(cout).enumerate() {
                    for co in 0..cout {
                        o[co] = acc[co * p + pos] + bias[co];
                    }
                }
            });
        Ok(out)
    }

    /// Gradients of `sum(grad_out * forward(x))` with respect to input, kernel and bias.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Conv3dGrads<T>> {
        let [batch, d, h, w, _] = self.check_input(x)?;
        let [od, oh, ow] = self.output_extent([d, h, w])?;
        let cout = self.out_channels();
        if grad_out.dims() != [batch, od, oh, ow, cout] {
            return Err(Error::shape(format!(
                "conv3d grad_out {:?} does not match output [{batch}, {od}, {oh}, {ow}, {cout}]",
                grad_out.shape()
            )));
        }
        let padded = self.padded_items(x)?;
        let geom = self.geometry(&padded[0], [od, oh, ow]);
        let (k, p) = (geom.patch_rows(), oh * ow);

        // bias
        let mut grad_bias = vec![T::zero(); cout];
        for row in grad_out.data().chunks_exact(cout) {
            for (gb, &g) in grad_bias.iter_mut().zip(row) {
                *gb = *gb + g;
            }
        }

        // Per sample, walk output planes in order: the kernel gradient gains
        // gradᵀ · patchesᵀ and the patch gradient W · gradᵀ is scattered back
        // onto the padded input. Samples are summed in index order.
        let [pd, ph, pw] = geom.input;
        let item_len = pd * ph * pw * geom.cin;
        let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..batch)
            .into_par_iter()
            .map(|s| {
                let go_item = grad_out.item(s);
                let mut grad_kt = vec![T::zero(); cout * k];
                let mut grad_item = vec![T::zero(); item_len];
                let mut patches = vec![T::zero(); k * p];
                let mut grad_patches = vec![T::zero(); k * p];
                for z in 0..od {
                    let go_t = transpose_raw(&go_item[z * p * cout..(z + 1) * p * cout], p, cout);
                    gather_patches(&geom, padded[s].data(), z, &mut patches);
                    for co in 0..cout {
                        let g_row = &go_t[co * p..(co + 1) * p];
                        for (kk, gk) in grad_kt[co * k..(co + 1) * k].iter_mut().enumerate() {
                            *gk = *gk + dot(g_row, &patches[kk * p..(kk + 1) * p]);
                        }
                    }
                    matmul_into(self.kernel.data(), &go_t, &mut grad_patches, k, cout, p);
                    scatter_patches(&geom, &grad_patches, z, &mut grad_item);
                }
                (grad_kt, grad_item)
            })
            .collect();
        let mut grad_kt = vec![T::zero(); cout * k];
        let mut grad_padded = Vec::with_capacity(batch * item_len);
        for (gk, gi) in per_sample {
            for (a, b) in grad_kt.iter_mut().zip(&gk) {
                *a = *a + *b;
            }
            grad_padded.extend(gi);
        }

        let pads = self.pads();
        let grad_input = if pads == [(0, 0); 3] {
            Tensor::from_vec(x.dims(), grad_padded)?
        } else {
            let items = grad_padded
                .chunks_exact(item_len)
                .map(|chunk| crop_spatial(&Tensor::from_vec(&[pd, ph, pw, geom.cin], chunk.to_vec())?, pads))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&items.iter().collect::<Vec<_>>())?
        };

        Ok(Conv3dGrads {
            input: grad_input,
            kernel: Tensor::from_vec(self.kernel.dims(), transpose_raw(&grad_kt, cout, k))?,
            bias: Tensor::from_vec(&[cout], grad_bias)?,
        })
    }
}

pub(crate) fn same_pads(kernel: [usize; 3], padding: Padding) -> [(usize, usize); 3] {
    match padding {
        Padding::Valid => [(0, 0); 3],
        Padding::Same => kernel.map(|k| {
            let total = k - 1;
            (total / 2, total - total / 2)
        }),
    }
}

pub fn conv_output_extent(input: [usize; 3], kernel: [usize; 3], padding: Padding) -> Result<[usize; 3]> {
    match padding {
        Padding::Same => Ok(input),
        Padding::Valid => {
            let mut out = [0; 3];
            for i in 0..3 {
                if input[i] < kernel[i] {
                    return Err(Error::shape(format!(
                        "valid convolution needs extent >= kernel on every axis, got input {input:?} kernel {kernel:?}"
                    )));
                }
                out[i] = input[i] - kernel[i] + 1;
            }
            Ok(out)
        }
    }
}

struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    cin: usize,
    cout: usize,
}

impl Geometry {
    fn patch_rows(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }
}

/// Row-major `[rows, cols]` to `[cols, rows]`.
fn transpose_raw<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// Fill `patches[k, y·W' + x]` with the padded-input value that kernel tap
/// `k = ((a·kh + b)·kw + c)·C_in + ci` sees at output `(z, y, x)`.
fn gather_patches<T: Element>(g: &Geometry, x: &[T], z: usize, patches: &mut [T]) {
    let [_, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let cin = g.cin;
    let p = oh * ow;
    for a in 0..kd {
        for b in 0..kh {
            for c in 0..kw {
                for ci in 0..cin {
                    let k = ((a * kh + b) * kw + c) * cin + ci;
                    let row = &mut patches[k * p..(k + 1) * p];
                    for y in 0..oh {
                        let base = (((z + a) * h + y + b) * w + c) * cin + ci;
                        for (xo, r) in row[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                            *r = x[base + xo * cin];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_patches`]: add each patch entry back onto the input cell it came from.
fn scatter_patches<T: Element>(g: &Geometry, patches: &[T], z: usize, x: &mut [T]) {
    let [_, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let cin = g.cin;
    let p = oh * ow;
    for a in 0..kd {
        for b in 0..kh {
            for c in 0..kw {
                for ci in 0..cin {
                    let k = ((a * kh + b) * kw + c) * cin + ci;
                    let row = &patches[k * p..(k + 1) * p];
                    for y in 0..oh {
                        let base = (((z + a) * h + y + b) * w + c) * cin + ci;
                        for (xo, &r) in row[y * ow..(y + 1) * ow].iter().enumerate() {
                            x[base + xo * cin] = x[base + xo * cin] + r;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as an independent reference.
    #[allow(clippy::needless_range_loop)]
    fn naive_valid(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64]) -> Tensor<f64> {
        let [b, d, h, w, ci] = <[usize; 5]>::try_from(x.dims()).unwrap();
        let [kd, kh, kw, _, co] = <[usize; 5]>::try_from(k.dims()).unwrap();
        let (od, oh, ow) = (d - kd + 1, h - kh + 1, w - kw + 1);
        let mut out = Tensor::zeros(&[b, od, oh, ow, co]).unwrap();
        for s in 0..b {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        for o in 0..co {
                            let mut acc = bias[o];
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        for i in 0..ci {
                                            acc += x.get(&[s, z + a, y + bb, xx + c, i]) * k.get(&[a, bb, c, i, o]);
                                        }
                                    }
                                }
                            }
                            out.set(&[s, z, y, xx, o], acc);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn table_row_conv3d_2_shape() {
        let conv = Conv3d::<f32>::new([3, 3, 3], 32, 64, Padding::Valid, 1).unwrap();
        assert_eq!(conv.output_extent([80, 40, 40]).unwrap(), [78, 38, 38]);
        assert_eq!(conv.param_count(), 55_360);
    }

    #[test]
    fn delta_kernel_same_padding_is_identity() {
        let mut kernel = Tensor::<f64>::zeros(&[3, 3, 3, 1, 1]).unwrap();
        kernel.set(&[1, 1, 1, 0, 0], 1.0);
        let conv = Conv3d::from_parts(kernel, Tensor::zeros(&[1]).unwrap(), Padding::Same).unwrap();
        let x = Tensor::<f64>::uniform(&[2, 4, 5, 3, 1], -1.0, 1.0, 4).unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_gives_local_sums() {
        let x = Tensor::<f64>::from_vec(&[1, 3, 3, 3, 1], (0..27).map(|v| v as f64).collect()).unwrap();
        let kernel = Tensor::full(&[2, 2, 2, 1, 1], 1.0).unwrap();
        let conv = Conv3d::from_parts(kernel.clone(), Tensor::zeros(&[1]).unwrap(), Padding::Valid).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 2, 1]);
        assert_eq!(y, naive_valid(&x, &kernel, &[0.0]));
        // first window: 0+1+3+4+9+10+12+13
        assert_eq!(y.data()[0], 52.0);
    }

    #[test]
    fn matches_naive_on_random_multichannel_input() {
        let x = Tensor::<f64>::uniform(&[2, 5, 4, 6, 3], -1.0, 1.0, 10).unwrap();
        let conv = Conv3d::<f64>::new([3, 2, 3], 3, 4, Padding::Valid, 11).unwrap();
        let mut conv = conv;
        conv.bias = Tensor::uniform(&[4], -1.0, 1.0, 12).unwrap();
        let fast = conv.forward(&x).unwrap();
        let slow = naive_valid(&x, &conv.kernel, conv.bias.data());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_padding_with_even_kernel_pads_high_side() {
        assert_eq!(same_pads([2, 3, 4], Padding::Same), [(0, 1), (1, 1), (1, 2)]);
        let conv = Conv3d::<f32>::new([2, 2, 2], 1, 1, Padding::Same, 0).unwrap();
        assert_eq!(conv.output_extent([5, 6, 7]).unwrap(), [5, 6, 7]);
        let x = Tensor::<f32>::zeros(&[1, 5, 6, 7, 1]).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 5, 6, 7, 1]);
    }

    #[test]
    fn valid_rejects_too_small_input() {
        let conv = Conv3d::<f32>::new([3, 3, 3], 1, 1, Padding::Valid, 0).unwrap();
        assert!(conv.output_extent([2, 5, 5]).is_err());
        assert!(conv.forward(&Tensor::zeros(&[1, 4, 4, 4, 2]).unwrap()).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let conv = Conv3d::<f64>::new([3, 3, 3], 2, 3, Padding::Same, 3).unwrap();
        let x = Tensor::uniform(&[1, 3, 4, 3, 2], -1.0, 1.0, 5).unwrap();
        let g = conv.backward(&x, &Tensor::zeros(&[1, 3, 4, 3, 3]).unwrap()).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.kernel.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_counts_output_positions() {
        let conv = Conv3d::<f64>::new([2, 2, 2], 1, 1, Padding::Valid, 3).unwrap();
        let x = Tensor::uniform(&[1, 3, 3, 3, 1], -1.0, 1.0, 5).unwrap();
        let g = conv
            .backward(&x, &Tensor::full(&[1, 2, 2, 2, 1], 1.0).unwrap())
            .unwrap();
        assert_eq!(g.bias.data(), &[8.0]);
    }
}
