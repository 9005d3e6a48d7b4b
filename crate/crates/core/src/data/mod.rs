//! Manifests, cohort labels, splitting, preprocessing and augmentation.

mod cohort;
mod manifest;
mod preprocess;
mod synth;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cohort::{class_names, cohort_from_age, Cohort, Sequence};
pub use manifest::{split_dataset, Manifest, SampleRecord, SplitLevel};
pub use preprocess::{
    assemble_fusion, augment_all, augment_expand, flip_width, normalize_volume, resample_volume, shift_width,
    slice_count, FusionMode, Interpolation, ModelInput, Normalization, SLICES_PER_VOLUME,
};
pub use synth::{radius_fraction, synth_dataset, SynthOptions};

use crate::error::Result;
use crate::nifti::read_volume;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Target `[D, H, W]`.
    pub extent: [usize; 3],
    pub interpolation: Interpolation,
    pub normalization: Normalization,
    pub fusion: FusionMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            extent: [80, 80, 80],
            interpolation: Interpolation::Trilinear,
            normalization: Normalization::MinMax,
            fusion: FusionMode::Pooled,
        }
    }
}

/// Read, resample and normalize one scan to `[D, H, W]`.
pub fn preprocess_scan(record: &SampleRecord, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    let vol = read_volume(&record.path)?;
    let resampled = resample_volume(&vol.voxels, cfg.extent, cfg.interpolation)?;
    normalize_volume(&resampled, cfg.normalization)
}

/// Turn a manifest into network inputs. Scans are processed in parallel;
/// output order follows the manifest (visits in order of first appearance
/// when channel-stacking).
pub fn load_inputs(manifest: &Manifest, cfg: &PreprocessConfig) -> Result<Vec<ModelInput>> {
    let volumes: Vec<Tensor<f32>> = manifest
        .records
        .par_iter()
        .map(|r| preprocess_scan(r, cfg))
        .collect::<Result<_>>()?;
    let mut visits: Vec<((&str, u32), Vec<usize>)> = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let key = (r.subject_id.as_str(), r.age_days);
        match (cfg.fusion, visits.iter_mut().find(|(k, _)| *k == key)) {
            (FusionMode::ChannelStacked, Some((_, members))) => members.push(i),
            _ => visits.push((key, vec![i])),
        }
    }
    let mut out = Vec::with_capacity(visits.len());
    for (_, members) in visits {
        let scans: Vec<_> = members
            .iter()
            .map(|&i| {
                let r = &manifest.records[i];
                (r.sequence, volumes[i].clone(), r.path.display().to_string())
            })
            .collect();
        let label = manifest.records[members[0]].cohort.index();
        out.extend(assemble_fusion(&scans, label, cfg.fusion)?);
    }
    Ok(out)
}
