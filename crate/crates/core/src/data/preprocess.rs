use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::cohort::Sequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axial, sagittal and coronal slices of one 80³ volume.
pub const SLICES_PER_VOLUME: usize = 3 * 80;

pub fn slice_count(n_volumes: usize) -> usize {
    n_volumes * SLICES_PER_VOLUME
}

/// A preprocessed network input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[D, H, W, C]`, values in `[0, 1]`.
    pub volume: Tensor<f32>,
    pub label: usize,
    /// Paths of the scans this input came from.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Scale to `[0, 1]`; constant volumes become zeros.
    MinMax,
    /// Zero mean, unit variance; constant volumes become zeros.
    ZScore,
}

fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Resample a `[D, H, W]` volume so the corner voxels of source and target coincide.
pub fn resample_volume(v: &Tensor<f32>, target: [usize; 3], method: Interpolation) -> Result<Tensor<f32>> {
    let &[sd, sh, sw] = v.dims() else {
        return Err(Error::shape(format!("resample expects [D, H, W], got {:?}", v.shape())));
    };
    let src = [sd, sh, sw];
    if method == Interpolation::Trilinear && src.contains(&1) {
        return Err(Error::invalid(format!(
            "trilinear resampling needs at least 2 voxels per axis, got {src:?}"
        )));
    }
    if target.contains(&0) {
        return Err(Error::invalid("target extents must be positive"));
    }
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..target[a])
            .map(|i| {
                let s = source_coord(i, src[a], target[a]);
                match method {
                    Interpolation::Nearest => {
                        let n = (s.round() as usize).min(src[a] - 1);
                        (n, n, 0.0)
                    }
                    Interpolation::Trilinear => {
                        let lo = (s.floor() as usize).min(src[a] - 2);
                        (lo, lo + 1, s - lo as f64)
                    }
                }
            })
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let data = v.data();
    let at = |z: usize, y: usize, x: usize| data[(z * sh + y) * sw + x] as f64;
    let mut out = Vec::with_capacity(target.iter().product());
    for &(z0, z1, tz) in &az {
        for &(y0, y1, ty) in &ay {
            for &(x0, x1, tx) in &ax {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
                out.push(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz) as f32);
            }
        }
    }
    Tensor::from_vec(&target, out)
}

pub fn normalize_volume(t: &Tensor<f32>, method: Normalization) -> Result<Tensor<f32>> {
    if !t.all_finite() {
        return Err(Error::NonFinite);
    }
    match method {
        Normalization::MinMax => {
            let (lo, hi) = (t.min(), t.max());
            if hi == lo {
                return Tensor::zeros(t.dims());
            }
            let span = hi - lo;
            Ok(t.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
        }
        Normalization::ZScore => {
            let n = t.len() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            if var == 0.0 {
                return Tensor::zeros(t.dims());
            }
            let sd = var.sqrt();
            Ok(t.map(|v| ((v as f64 - mean) / sd) as f32))
        }
    }
}

/// Mirror along the width (left-right) axis of a `[D, H, W, C]` volume.
pub fn flip_width(v: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [_, _, w, c] = volume_dims(v)?;
    let mut out = v.clone();
    for (src, dst) in v.data().chunks_exact(w * c).zip(out.data_mut().chunks_exact_mut(w * c)) {
        for x in 0..w {
            dst[x * c..(x + 1) * c].copy_from_slice(&src[(w - 1 - x) * c..(w - x) * c]);
        }
    }
    Ok(out)
}

/// Translate along width by `k` voxels (positive moves content to higher x); vacated voxels are zero.
pub fn shift_width(v: &Tensor<f32>, k: isize) -> Result<Tensor<f32>> {
    let [_, _, w, c] = volume_dims(v)?;
    if k.unsigned_abs() >= w {
        return Err(Error::invalid(format!("shift {k} must be smaller than width {w}")));
    }
    let mut out = Tensor::zeros(v.dims())?;
    for (src, dst) in v.data().chunks_exact(w * c).zip(out.data_mut().chunks_exact_mut(w * c)) {
        for x in 0..w {
            let from = x as isize - k;
            if (0..w as isize).contains(&from) {
                let from = from as usize;
                dst[x * c..(x + 1) * c].copy_from_slice(&src[from * c..(from + 1) * c]);
            }
        }
    }
    Ok(out)
}

fn volume_dims(v: &Tensor<f32>) -> Result<[usize; 4]> {
    match *v.dims() {
        [d, h, w, c] => Ok([d, h, w, c]),
        _ => Err(Error::shape(format!("expected [D, H, W, C], got {:?}", v.shape()))),
    }
}

/// `[identity, flip, shift +k, shift -k]`, all with the original label.
pub fn augment_expand(x: &ModelInput, shift: usize) -> Result<Vec<ModelInput>> {
    if shift == 0 {
        return Err(Error::invalid("shift must be at least one voxel"));
    }
    let k = shift as isize;
    let volumes = [
        x.volume.clone(),
        flip_width(&x.volume)?,
        shift_width(&x.volume, k)?,
        shift_width(&x.volume, -k)?,
    ];
    Ok(volumes
        .into_iter()
        .map(|volume| ModelInput {
            volume,
            label: x.label,
            sources: x.sources.clone(),
        })
        .collect())
}

pub fn augment_all(inputs: &[ModelInput], shift: usize) -> Result<Vec<ModelInput>> {
    let mut out = Vec::with_capacity(inputs.len() * 4);
    for x in inputs {
        out.extend(augment_expand(x, shift)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One single-channel input per sequence.
    Pooled,
    /// One input per visit with T1w, T2w, PDw as channels 0, 1, 2.
    ChannelStacked,
}

impl FusionMode {
    pub fn channels(self) -> usize {
        match self {
            FusionMode::Pooled => 1,
            FusionMode::ChannelStacked => 3,
        }
    }
}

/// Build inputs for one subject visit from its `[D, H, W]` volumes.
pub fn assemble_fusion(
    scans: &[(Sequence, Tensor<f32>, String)],
    label: usize,
    mode: FusionMode,
) -> Result<Vec<ModelInput>> {
    if scans.is_empty() {
        return Err(Error::invalid("a visit needs at least one sequence"));
    }
    let dims = scans[0].1.dims().to_vec();
    if dims.len() != 3 || scans.iter().any(|(_, v, _)| v.dims() != dims.as_slice()) {
        return Err(Error::shape("fused volumes must share one [D, H, W] shape"));
    }
    match mode {
        FusionMode::Pooled => scans
            .iter()
            .map(|(_, v, src)| {
                Ok(ModelInput {
                    volume: v.clone().reshape(&[dims[0], dims[1], dims[2], 1])?,
                    label,
                    sources: vec![src.clone()],
                })
            })
            .collect(),
        FusionMode::ChannelStacked => {
            let n: usize = dims.iter().product();
            let mut data = vec![0.0f32; n * 3];
            let mut sources = Vec::new();
            for (ch, seq) in Sequence::ALL.into_iter().enumerate() {
                match scans.iter().find(|(s, _, _)| *s == seq) {
                    Some((_, v, src)) => {
                        for (i, &val) in v.data().iter().enumerate() {
                            data[i * 3 + ch] = val;
                        }
                        sources.push(src.clone());
                    }
                    None => warn!("{seq} missing for {:?}; channel {ch} left at zero", scans[0].2),
                }
            }
            Ok(vec![ModelInput {
                volume: Tensor::from_vec(&[dims[0], dims[1], dims[2], 3], data)?,
                label,
                sources,
            }])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn input(d: usize, h: usize, w: usize, c: usize, seed: u64) -> ModelInput {
        ModelInput {
            volume: Tensor::uniform(&[d, h, w, c], 0.0, 1.0, seed).unwrap(),
            label: 3,
            sources: vec!["x".into()],
        }
    }

    #[test]
    fn slice_bookkeeping() {
        assert_eq!(slice_count(152), 36_480);
        assert_eq!(slice_count(608), 145_920);
        assert_eq!(slice_count(456), 109_440);
    }

    #[test]
    fn constant_volume_resamples_to_constant() {
        let v = Tensor::full(&[7, 5, 9], 7.0f32).unwrap();
        for m in [Interpolation::Trilinear, Interpolation::Nearest] {
            let r = resample_volume(&v, [80, 80, 80], m).unwrap();
            assert_eq!(r.dims(), &[80, 80, 80]);
            assert!(r.data().iter().all(|&x| x == 7.0));
        }
    }

    #[test]
    fn acquisition_grid_to_cube() {
        let v = Tensor::<f32>::uniform(&[60, 192, 256], 0.0, 1.0, 0).unwrap();
        assert_eq!(
            resample_volume(&v, [80, 80, 80], Interpolation::Trilinear)
                .unwrap()
                .dims(),
            &[80, 80, 80]
        );
    }

    #[test]
    fn ramp_matches_closed_form() {
        // f(z, y, x) = 1 + 2z + 3y + 5x + zyx on the unit cube corners
        let f = |z: f64, y: f64, x: f64| 1.0 + 2.0 * z + 3.0 * y + 5.0 * x + z * y * x;
        let mut data = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    data.push(f(z as f64, y as f64, x as f64) as f32);
                }
            }
        }
        let v = Tensor::from_vec(&[2, 2, 2], data).unwrap();
        let r = resample_volume(&v, [4, 4, 4], Interpolation::Trilinear).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = f(z as f64 / 3.0, y as f64 / 3.0, x as f64 / 3.0);
                    assert!((r.get(&[z, y, x]) as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn degenerate_source_rejected_for_trilinear() {
        let v = Tensor::full(&[1, 4, 4], 2.0f32).unwrap();
        assert!(resample_volume(&v, [8, 8, 8], Interpolation::Trilinear).is_err());
        assert!(resample_volume(&v, [8, 8, 8], Interpolation::Nearest).is_ok());
    }

    #[test]
    fn min_max_examples() {
        let t = Tensor::from_vec(&[3], vec![0.0f32, 5.0, 10.0]).unwrap();
        assert_eq!(
            normalize_volume(&t, Normalization::MinMax).unwrap().data(),
            &[0.0, 0.5, 1.0]
        );
        let c = Tensor::full(&[4], 42.0f32).unwrap();
        assert!(normalize_volume(&c, Normalization::MinMax)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let u = Tensor::from_vec(&[3], vec![0.0f32, 0.25, 1.0]).unwrap();
        assert_eq!(normalize_volume(&u, Normalization::MinMax).unwrap(), u);
        let bad = Tensor::from_vec(&[2], vec![0.0f32, f32::NAN]).unwrap();
        assert!(matches!(
            normalize_volume(&bad, Normalization::MinMax),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn z_score_standardizes() {
        let t = Tensor::<f32>::uniform(&[1000], -3.0, 7.0, 1).unwrap();
        let z = normalize_volume(&t, Normalization::ZScore).unwrap();
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 1e-5);
    }

    #[test]
    fn augmentation_quadruples() {
        let xs: Vec<ModelInput> = (0..190).map(|i| input(2, 2, 8, 1, i)).collect();
        let out = augment_all(&xs, 4).unwrap();
        assert_eq!(out.len(), 760);
        assert!(out.iter().all(|o| o.label == 3));
        assert_eq!(out[0], xs[0]);
    }

    #[test]
    fn shift_round_trip_on_interior_support() {
        let mut v = Tensor::zeros(&[2, 3, 12, 2]).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                for x in 4..8 {
                    for c in 0..2 {
                        v.set(&[z, y, x, c], (1 + z + y + x + c) as f32);
                    }
                }
            }
        }
        let there = shift_width(&v, 3).unwrap();
        assert_eq!(there.get(&[0, 0, 7, 0]), v.get(&[0, 0, 4, 0]));
        assert_eq!(there.get(&[0, 0, 4, 0]), 0.0);
        assert_eq!(shift_width(&there, -3).unwrap(), v);
        assert!(shift_width(&v, 12).is_err());
        assert!(augment_expand(
            &ModelInput {
                volume: v,
                label: 0,
                sources: vec![]
            },
            0
        )
        .is_err());
    }

    #[test]
    fn fusion_modes() {
        let v = || Tensor::full(&[2, 2, 2], 0.5f32).unwrap();
        let all: Vec<_> = Sequence::ALL.iter().map(|&s| (s, v(), s.to_string())).collect();
        let pooled = assemble_fusion(&all, 2, FusionMode::Pooled).unwrap();
        assert_eq!(pooled.len(), 3);
        assert!(pooled.iter().all(|p| p.volume.dims()[3] == 1));
        let stacked = assemble_fusion(&all, 2, FusionMode::ChannelStacked).unwrap();
        assert_eq!(stacked.len(), 1);
        assert_eq!(stacked[0].volume.dims(), &[2, 2, 2, 3]);

        let partial = assemble_fusion(&all[..2], 2, FusionMode::ChannelStacked).unwrap();
        let vol = &partial[0].volume;
        assert!(vol
            .data()
            .chunks(3)
            .all(|px| px[0] == 0.5 && px[1] == 0.5 && px[2] == 0.0));
        assert!(assemble_fusion(&[], 0, FusionMode::Pooled).is_err());
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(w in 1usize..9, c in 1usize..3, seed in any::<u64>()) {
            let x = input(2, 3, w, c, seed).volume;
            prop_assert_eq!(flip_width(&flip_width(&x).unwrap()).unwrap(), x);
        }

        #[test]
        fn trilinear_stays_within_bounds(d in 2usize..6, h in 2usize..6, w in 2usize..6, t in 1usize..9, seed in any::<u64>()) {
            let v = Tensor::<f32>::uniform(&[d, h, w], -2.0, 5.0, seed).unwrap();
            let r = resample_volume(&v, [t, t + 1, t + 2], Interpolation::Trilinear).unwrap();
            prop_assert!(r.min() >= v.min() - 1e-5 && r.max() <= v.max() + 1e-5);
        }

        #[test]
        fn min_max_output_in_unit_interval(vals in proptest::collection::vec(-1e6f32..1e6, 1..50)) {
            let t = Tensor::from_vec(&[vals.len()], vals).unwrap();
            let n = normalize_volume(&t, Normalization::MinMax).unwrap();
            prop_assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
