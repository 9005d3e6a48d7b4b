//! Dense row-major tensors.
//!
//! Tensors are stored channels-last with the last axis varying fastest, so a
//! batch of volumes has shape `[B, D, H, W, C]` and a convolution kernel has
//! shape `[kd, kh, kw, C_in, C_out]`. There is no general broadcasting; the
//! layers use the handful of patterns they need directly.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Storage type tag, used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable in a [`Tensor`].
pub trait Element: Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static {
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Ordered list of extents, each at least one.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank must be between 1 and {MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join(", "))
    }
}

impl TryFrom<&[usize]> for Shape {
    type Error = Error;

    fn try_from(dims: &[usize]) -> Result<Self> {
        Shape::new(dims)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &std::any::type_name::<T>())
            .finish_non_exhaustive()
    }
}

impl<T: Element> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.len()];
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.len() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Glorot (Xavier) uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform(dims: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::invalid("glorot_uniform needs fan_in and fan_out >= 1"));
        }
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(dims, -limit, limit, seed)
    }

    pub fn uniform(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| T::lit(rng.gen_range(lo..=hi))).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor {
            shape: Shape(vec![n]),
            data: self.data,
        }
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.rank(), "index rank");
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(self.shape.dims()).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of extent {d}");
            off = off * d + ix;
        }
        off
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for a in &mut self.data {
            *a = *a * factor;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Number of items along the leading (batch) axis.
    pub fn batch_len(&self) -> usize {
        self.shape.dims()[0]
    }

    /// Elements per leading-axis item.
    pub fn item_len(&self) -> usize {
        self.shape.dims()[1..].iter().product()
    }

    /// Borrow item `i` along the leading axis.
    pub fn item(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Copy item `i` along the leading axis out as its own tensor.
    pub fn item_tensor(&self, i: usize) -> Result<Self> {
        Self::from_vec(&self.shape.dims()[1..], self.item(i).to_vec())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(&dims, data)
    }
}

/// Matrix product of `a: [M, K]` and `b: [K, N]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a)?;
    let (k2, n) = as_matrix(b)?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// `out[M, N] = a[M, K] · b[K, N]` on raw row-major slices.
pub(crate) fn matmul_into<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [T])| {
        out_row.iter_mut().for_each(|x| *x = T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], out_row);
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Transpose of a rank-2 tensor.
pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = as_matrix(a)?;
    let src = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

fn as_matrix<T: Element>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.dims() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::shape(format!("expected a matrix, got {:?}", t.shape()))),
    }
}

#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Inner product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (xc, yc) = (x[..n].chunks_exact(8), y[..n].chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    let mut acc = [T::zero(); 8];
    for (a, b) in xc.zip(yc) {
        for i in 0..8 {
            acc[i] = acc[i] + a[i] * b[i];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail = tail + a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Zero-pad the three spatial axes of a `[D, H, W, C]` tensor.
pub fn pad_spatial<T: Element>(t: &Tensor<T>, pads: [(usize, usize); 3]) -> Result<Tensor<T>> {
    let [d, h, w, c] = spatial_dims(t)?;
    let out_dims = [
        d + pads[0].0 + pads[0].1,
        h + pads[1].0 + pads[1].1,
        w + pads[2].0 + pads[2].1,
        c,
    ];
    if pads == [(0, 0); 3] {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(&out_dims)?;
    let src = t.data();
    let dst = out.data_mut();
    let row = w * c;
    for z in 0..d {
        for y in 0..h {
            let s = (z * h + y) * row;
            let o = (((z + pads[0].0) * out_dims[1] + y + pads[1].0) * out_dims[2] + pads[2].0) * c;
            dst[o..o + row].copy_from_slice(&src[s..s + row]);
        }
    }
    Ok(out)
}

/// Inverse of [`pad_spatial`]: drop `pads` from each spatial border.
pub fn crop_spatial<T: Element>(t: &Tensor<T>, pads: [(usize, usize); 3]) -> Result<Tensor<T>> {
    let [d, h, w, c] = spatial_dims(t)?;
    let keep = |n: usize, (lo, hi): (usize, usize)| {
        n.checked_sub(lo + hi)
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::shape(format!("cannot crop {lo}+{hi} from extent {n}")))
    };
    let (od, oh, ow) = (keep(d, pads[0])?, keep(h, pads[1])?, keep(w, pads[2])?);
    let mut out = Tensor::zeros(&[od, oh, ow, c])?;
    let src = t.data();
    let dst = out.data_mut();
    let row = ow * c;
    for z in 0..od {
        for y in 0..oh {
            let s = (((z + pads[0].0) * h + y + pads[1].0) * w + pads[2].0) * c;
            let o = (z * oh + y) * row;
            dst[o..o + row].copy_from_slice(&src[s..s + row]);
        }
    }
    Ok(out)
}

fn spatial_dims<T: Element>(t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.dims() {
        [d, h, w, c] => Ok([d, h, w, c]),
        _ => Err(Error::shape(format!(
            "expected a [D, H, W, C] tensor, got {:?}",
            t.shape()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn zeros_has_product_of_dims_elements() {
        let t = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(t.data(), &[0.0; 6]);
        assert_eq!(Tensor::<f32>::zeros(&[80, 80, 80, 1]).unwrap().len(), 512_000);
        assert_eq!(Tensor::<f32>::zeros(&[1]).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shape_rejects_zero_extent_and_bad_rank() {
        assert!(Shape::new(&[3, 0]).is_err());
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 1, 1, 1, 1, 1]).is_err());
        assert_eq!(Shape::new(&[2, 3]).unwrap(), Shape::new(&[2, 3]).unwrap());
        assert_ne!(Shape::new(&[2, 3]).unwrap(), Shape::new(&[3, 2]).unwrap());
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let t = Tensor::<f64>::glorot_uniform(&[1000], 1, 1, 7).unwrap();
        let bound = 3f64.sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= bound));
        let again = Tensor::<f64>::glorot_uniform(&[1000], 1, 1, 7).unwrap();
        assert_eq!(t.data(), again.data());
        assert!(Tensor::<f32>::glorot_uniform(&[4], 0, 3, 1).is_err());
    }

    #[test]
    fn glorot_mean_is_near_zero() {
        let t = Tensor::<f64>::glorot_uniform(&[100_000], 100, 100, 2024).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn matmul_hand_cases() {
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::<f64>::uniform(&[3, 3], -1.0, 1.0, 3).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap().data(), x.data());

        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);

        assert!(matmul(&a, &Tensor::zeros(&[3, 1]).unwrap()).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::<f64>::uniform(&[7, 5], -2.0, 2.0, 11).unwrap();
        let b = Tensor::<f64>::uniform(&[5, 4], -2.0, 2.0, 12).unwrap();
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(a.data(), b.data(), 7, 5, 4);
        for (x, y) in fast.data().iter().zip(&slow) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_is_associative() {
        let a = Tensor::<f64>::uniform(&[4, 6], -1.0, 1.0, 1).unwrap();
        let b = Tensor::<f64>::uniform(&[6, 3], -1.0, 1.0, 2).unwrap();
        let c = Tensor::<f64>::uniform(&[3, 5], -1.0, 1.0, 3).unwrap();
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a = Tensor::<f32>::uniform(&[3, 7], -1.0, 1.0, 9).unwrap();
        let t = transpose(&a).unwrap();
        assert_eq!(t.dims(), &[7, 3]);
        assert_eq!(t.get(&[4, 1]), a.get(&[1, 4]));
        assert_eq!(transpose(&t).unwrap(), a);
    }

    #[test]
    fn pad_centers_original_values() {
        let t = Tensor::<f32>::from_vec(&[2, 2, 2, 1], (1..=8).map(|x| x as f32).collect()).unwrap();
        assert_eq!(pad_spatial(&t, [(0, 0); 3]).unwrap(), t);
        let p = pad_spatial(&t, [(1, 1); 3]).unwrap();
        assert_eq!(p.dims(), &[4, 4, 4, 1]);
        assert_eq!(p.get(&[1, 1, 1, 0]), 1.0);
        assert_eq!(p.get(&[2, 2, 2, 0]), 8.0);
        assert_eq!(p.get(&[0, 0, 0, 0]), 0.0);
        assert_eq!(p.get(&[3, 2, 2, 0]), 0.0);
        assert_eq!(p.sum(), t.sum());
    }

    #[test]
    fn stack_and_item_round_trip() {
        let a = Tensor::<f32>::full(&[2, 2], 1.0).unwrap();
        let b = Tensor::<f32>::full(&[2, 2], 2.0).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2]);
        assert_eq!(s.item_tensor(1).unwrap(), b);
    }

    proptest! {
        #[test]
        fn reshape_flatten_round_trips(d in 1usize..5, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let t = Tensor::<f32>::uniform(&[d, h, w], -1.0, 1.0, seed).unwrap();
            let back = t.clone().flatten().reshape(&[d, h, w]).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn pad_then_crop_is_identity(
            d in 1usize..4, h in 1usize..4, w in 1usize..4, c in 1usize..3,
            pads in proptest::array::uniform3((0usize..3, 0usize..3)),
            seed in 0u64..1000,
        ) {
            let t = Tensor::<f64>::uniform(&[d, h, w, c], -1.0, 1.0, seed).unwrap();
            let padded = pad_spatial(&t, pads).unwrap();
            prop_assert!((padded.sum() - t.sum()).abs() < 1e-12);
            prop_assert_eq!(crop_spatial(&padded, pads).unwrap(), t);
        }
    }
}
