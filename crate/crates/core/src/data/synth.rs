//! Synthetic stand-in for the clinical scans: class-conditional ellipsoids.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::cohort::{Cohort, Sequence};
use crate::data::manifest::{Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::model::mix_seed;
use crate::nifti::{write_volume, NiftiVolume};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Volume extent `[nx, ny, nz]`.
    pub dims: [usize; 3],
    /// One file per sequence per visit.
    pub sequences: Vec<Sequence>,
    /// Half-width of the uniform voxel noise.
    pub noise: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            dims: [40, 36, 32],
            sequences: vec![Sequence::T1w],
            noise: 0.1,
        }
    }
}

/// Semi-axis of cohort `k` as a fraction of the half-extent.
pub fn radius_fraction(k: usize) -> f64 {
    (k + 1) as f64 / (Cohort::ALL.len() + 1) as f64
}

fn contrast(seq: Sequence) -> (f32, f32) {
    // (inside, outside)
    match seq {
        Sequence::T1w => (1.0, 0.0),
        Sequence::T2w => (0.2, 0.8),
        Sequence::PDw => (0.7, 0.3),
    }
}

/// One `[D, H, W]` volume for cohort `k`. Centre and radius get a small
/// seeded jitter; voxel noise is drawn per sequence.
fn ellipsoid(
    dims: [usize; 3],
    k: usize,
    seq: Sequence,
    noise: f32,
    visit_rng: &mut ChaCha8Rng,
    noise_seed: u64,
) -> Tensor<f32> {
    let [nx, ny, nz] = dims;
    let scale = radius_fraction(k) * (1.0 + visit_rng.gen_range(-0.03..0.03));
    let half = [nz as f64 / 2.0, ny as f64 / 2.0, nx as f64 / 2.0];
    let centre: Vec<f64> = half.iter().map(|&h| h - 0.5 + visit_rng.gen_range(-1.0..1.0)).collect();
    let radii: Vec<f64> = half.iter().map(|&h| h * scale).collect();
    let (inside, outside) = contrast(seq);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64, y as f64, x as f64];
                let r2: f64 = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum();
                let base = if r2 <= 1.0 { inside } else { outside };
                let jitter = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                data.push(base + jitter);
            }
        }
    }
    Tensor::from_vec(&[nz, ny, nx], data).expect("dims match data")
}

/// Write `per_cohort` visits per cohort under `dir` plus `dir/manifest.jsonl`.
/// The same seed always produces identical files.
pub fn synth_dataset(dir: &Path, seed: u64, per_cohort: usize, opts: &SynthOptions) -> Result<Manifest> {
    if per_cohort == 0 {
        return Err(Error::invalid("per_cohort must be at least 1"));
    }
    if opts.sequences.is_empty() || opts.dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid("need at least one sequence and extents of 2 or more"));
    }
    std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
    let mut records = Vec::new();
    for cohort in Cohort::ALL {
        let k = cohort.index();
        let (lo, hi) = cohort.window();
        for i in 0..per_cohort {
            let visit_seed = mix_seed(seed, (k * 1_000_000 + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(visit_seed);
            let age = rng.gen_range(lo..=hi);
            let subject = format!("sub-{}-{i:03}", cohort.name());
            let geometry = rng.clone();
            for (s, &seq) in opts.sequences.iter().enumerate() {
                let mut g = geometry.clone();
                let vol = ellipsoid(
                    opts.dims,
                    k,
                    seq,
                    opts.noise,
                    &mut g,
                    mix_seed(visit_seed, s as u64 + 1),
                );
                let name = format!("{subject}_{seq}.nii");
                let path = dir.join(&name);
                write_volume(&NiftiVolume::from_tensor(vol, [1.0, 1.0, 1.0])?, &path)?;
                records.push(SampleRecord::new(path, subject.clone(), seq, age)?);
            }
        }
    }
    let mut manifest = Manifest::new(records)?;
    manifest.provenance = Some(format!("synthetic seed={seed} per_cohort={per_cohort}"));
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nifti::read_volume;

    #[test]
    fn twelve_balanced_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 3, 2, &SynthOptions::default()).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m.cohort_counts(), [2; 6]);
        let back = Manifest::read(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.records, m.records);
        let nii = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "nii"))
            .count();
        assert_eq!(nii, 12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_dataset(a.path(), 9, 1, &SynthOptions::default()).unwrap();
        synth_dataset(b.path(), 9, 1, &SynthOptions::default()).unwrap();
        for r in &ma.records {
            let name = r.path.file_name().unwrap();
            assert_eq!(
                std::fs::read(&r.path).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn ellipsoid_grows_with_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 1, 1, &SynthOptions::default()).unwrap();
        let bright = |i: usize| {
            let v = read_volume(&m.records[i].path).unwrap();
            v.voxels.data().iter().filter(|&&x| x > 0.5).count()
        };
        let counts: Vec<usize> = (0..6).map(bright).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        // cohort 5 semi-axes are 6x cohort 0's, so roughly 216x the volume
        assert!(counts[5] > 100 * counts[0], "{counts:?}");
    }

    #[test]
    fn ages_fall_in_windows() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            sequences: Sequence::ALL.to_vec(),
            ..Default::default()
        };
        let m = synth_dataset(dir.path(), 5, 3, &opts).unwrap();
        assert_eq!(m.len(), 54);
        assert!(m.records.iter().all(|r| r.cohort.contains(r.age_days)));
    }
}
