//! Layer ledger of the age-cohort network and its downsized variants.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{conv_output_extent, Padding};

pub const NUM_COHORTS: usize = 6;

/// Kernel extents of the ten convolutions, in order. Two of the deep
/// convolutions use 2x2x2 kernels; the rest are 3x3x3.
pub const CONV_KERNELS: [usize; 10] = [3, 3, 3, 3, 3, 3, 3, 2, 2, 3];

/// Which convolutions zero-pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    /// First convolution "same", all later ones "valid". Needs an 80-voxel
    /// in-plane extent to survive the four poolings.
    FirstSame,
    /// Every convolution "same"; used by the small variants.
    AllSame,
}

/// Hyperparameters that fix the network's shape and regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Spatial input extent `[D, H, W]`.
    pub input_extent: [usize; 3],
    pub input_channels: usize,
    /// Filters of the four convolutional blocks.
    pub conv_widths: [usize; 4],
    /// Units of the two hidden dense layers.
    pub dense_units: [usize; 2],
    pub num_classes: usize,
    pub padding: PaddingPolicy,
    pub batchnorm: bool,
    pub dropout: bool,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ArchConfig {
    /// The full-size network: 80³ input, 32/64/128/256 filters, 1024/512 dense units.
    pub fn canonical(input_channels: usize) -> Self {
        ArchConfig {
            input_extent: [80, 80, 80],
            input_channels,
            conv_widths: [32, 64, 128, 256],
            dense_units: [1024, 512],
            num_classes: NUM_COHORTS,
            padding: PaddingPolicy::FirstSame,
            batchnorm: true,
            dropout: true,
            conv_dropout: 0.25,
            dense_dropout: 0.5,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }

    /// Same layer sequence on a small cube with every convolution padded.
    pub fn downsized(extent: usize, input_channels: usize, conv_widths: [usize; 4], dense_units: [usize; 2]) -> Self {
        ArchConfig {
            input_extent: [extent; 3],
            conv_widths,
            dense_units,
            padding: PaddingPolicy::AllSame,
            ..Self::canonical(input_channels)
        }
    }

    /// Desk-scale preset used for training on a laptop: 32³ input.
    pub fn desk(input_channels: usize) -> Self {
        Self::downsized(32, input_channels, [4, 8, 8, 16], [128, 64])
    }

    /// Smallest preset, for finite-difference checks of the whole network.
    pub fn tiny(input_channels: usize) -> Self {
        Self::downsized(16, input_channels, [2, 2, 2, 2], [8, 8])
    }

    pub fn with_regularization(mut self, batchnorm: bool, dropout: bool) -> Self {
        self.batchnorm = batchnorm;
        self.dropout = dropout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_classes < 2 {
            return Err(Error::invalid("need at least one input channel and two classes"));
        }
        if self.conv_widths.contains(&0) || self.dense_units.contains(&0) || self.input_extent.contains(&0) {
            return Err(Error::invalid("layer widths and extents must be positive"));
        }
        for rate in [self.conv_dropout, self.dense_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid(format!("dropout rate {rate} must be in [0, 1)")));
            }
        }
        layer_shapes(self).map(|_| ())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("arch config serializes"))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d {
        kernel: [usize; 3],
        filters: usize,
        padding: Padding,
        relu: bool,
    },
    BatchNorm,
    MaxPool3d {
        pool: [usize; 3],
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
        relu: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    /// Layer class as printed in a model summary.
    pub fn type_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv3d { .. } => "Conv3D",
            LayerKind::BatchNorm => "BatchNormalization",
            LayerKind::MaxPool3d { .. } => "MaxPooling3D",
            LayerKind::Dropout { .. } => "Dropout",
            LayerKind::Flatten => "Flatten",
            LayerKind::Dense { .. } => "Dense",
        }
    }
}

const POOL: [usize; 3] = [1, 2, 2];

/// Ordered layer list. Conv and dense layers carry their ReLU (the logits
/// layer does not); BN and dropout rows disappear when disabled.
pub fn layer_specs(arch: &ArchConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut conv_ix = 0;
    let mut bn_ix = 0;
    let mut drop_ix = 0;
    let mut conv = |specs: &mut Vec<LayerSpec>, filters: usize| {
        let k = CONV_KERNELS[conv_ix];
        let padding = match (arch.padding, conv_ix) {
            (PaddingPolicy::AllSame, _) | (PaddingPolicy::FirstSame, 0) => Padding::Same,
            (PaddingPolicy::FirstSame, _) => Padding::Valid,
        };
        conv_ix += 1;
        specs.push(LayerSpec::new(
            format!("conv3d_{conv_ix}"),
            LayerKind::Conv3d {
                kernel: [k; 3],
                filters,
                padding,
                relu: true,
            },
        ));
    };
    let mut bn = |specs: &mut Vec<LayerSpec>| {
        if arch.batchnorm {
            bn_ix += 1;
            specs.push(LayerSpec::new(
                format!("batch_normalization_{bn_ix}"),
                LayerKind::BatchNorm,
            ));
        }
    };
    let mut dropout = |specs: &mut Vec<LayerSpec>, rate: f64| {
        if arch.dropout {
            drop_ix += 1;
            specs.push(LayerSpec::new(
                format!("dropout_{drop_ix}"),
                LayerKind::Dropout { rate },
            ));
        }
    };
    let pool = |specs: &mut Vec<LayerSpec>, i: usize| {
        specs.push(LayerSpec::new(
            format!("max_pooling3d_{i}"),
            LayerKind::MaxPool3d { pool: POOL },
        ));
    };
    let [w1, w2, w3, w4] = arch.conv_widths;

    conv(&mut specs, w1);
    bn(&mut specs);
    pool(&mut specs, 1);

    for _ in 0..4 {
        conv(&mut specs, w2);
    }
    bn(&mut specs);
    pool(&mut specs, 2);
    dropout(&mut specs, arch.conv_dropout);

    for _ in 0..2 {
        conv(&mut specs, w3);
    }
    bn(&mut specs);
    pool(&mut specs, 3);
    dropout(&mut specs, arch.conv_dropout);

    for _ in 0..3 {
        conv(&mut specs, w4);
    }
    bn(&mut specs);
    pool(&mut specs, 4);
    dropout(&mut specs, arch.conv_dropout);

    specs.push(LayerSpec::new("flatten_1", LayerKind::Flatten));
    specs.push(LayerSpec::new(
        "dense_1",
        LayerKind::Dense {
            units: arch.dense_units[0],
            relu: true,
        },
    ));
    dropout(&mut specs, arch.dense_dropout);
    specs.push(LayerSpec::new(
        "dense_2",
        LayerKind::Dense {
            units: arch.dense_units[1],
            relu: true,
        },
    ));
    dropout(&mut specs, arch.dense_dropout);
    specs.push(LayerSpec::new(
        "dense_3",
        LayerKind::Dense {
            units: arch.num_classes,
            relu: false,
        },
    ));
    specs
}

/// Per-sample output shape of a layer (batch axis omitted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputShape(pub Vec<usize>);

impl fmt::Display for OutputShape {
    /// Summary style, e.g. `(None, 80, 40, 40, 32)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(None")?;
        for d in &self.0 {
            write!(f, ", {d}")?;
        }
        write!(f, ")")
    }
}

/// One row of a model summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub spec: LayerSpec,
    pub output: OutputShape,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl LayerSummary {
    pub fn params(&self) -> usize {
        self.trainable + self.non_trainable
    }
}

/// Propagate shapes and count parameters without allocating any weights.
pub fn layer_shapes(arch: &ArchConfig) -> Result<Vec<LayerSummary>> {
    let mut shape: Vec<usize> = arch.input_extent.to_vec();
    shape.push(arch.input_channels);
    let mut rows = Vec::new();
    for spec in layer_specs(arch) {
        let (trainable, non_trainable) = match &spec.kind {
            LayerKind::Conv3d {
                kernel,
                filters,
                padding,
                ..
            } => {
                let cin = channels_of(&shape, &spec.name)?;
                let extent = conv_output_extent(spatial_of(&shape, &spec.name)?, *kernel, *padding)
                    .map_err(|e| Error::shape(format!("{}: {e}", spec.name)))?;
                shape = vec![extent[0], extent[1], extent[2], *filters];
                (kernel.iter().product::<usize>() * cin * filters + filters, 0)
            }
            LayerKind::BatchNorm => {
                let c = channels_of(&shape, &spec.name)?;
                (2 * c, 2 * c)
            }
            LayerKind::MaxPool3d { pool } => {
                let s = spatial_of(&shape, &spec.name)?;
                let out = [0, 1, 2].map(|i| s[i] / pool[i]);
                if out.contains(&0) {
                    return Err(Error::shape(format!(
                        "{}: pooling {s:?} by {pool:?} leaves nothing",
                        spec.name
                    )));
                }
                shape = vec![out[0], out[1], out[2], shape[3]];
                (0, 0)
            }
            LayerKind::Dropout { .. } => (0, 0),
            LayerKind::Flatten => {
                shape = vec![shape.iter().product()];
                (0, 0)
            }
            LayerKind::Dense { units, .. } => {
                if shape.len() != 1 {
                    return Err(Error::shape(format!("{}: dense layer needs a flat input", spec.name)));
                }
                let n = shape[0] * units + units;
                shape = vec![*units];
                (n, 0)
            }
        };
        rows.push(LayerSummary {
            spec,
            output: OutputShape(shape.clone()),
            trainable,
            non_trainable,
        });
    }
    Ok(rows)
}

fn spatial_of(shape: &[usize], name: &str) -> Result<[usize; 3]> {
    match *shape {
        [d, h, w, _] => Ok([d, h, w]),
        _ => Err(Error::shape(format!("{name}: expected a volume, got {shape:?}"))),
    }
}

fn channels_of(shape: &[usize], name: &str) -> Result<usize> {
    spatial_of(shape, name).map(|_| shape[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_has_twenty_seven_rows() {
        let specs = layer_specs(&ArchConfig::canonical(1));
        assert_eq!(specs.len(), 27);
        assert_eq!(specs[0].name, "conv3d_1");
        assert_eq!(specs[26].name, "dense_3");
    }

    #[test]
    fn ablation_removes_rows() {
        let arch = ArchConfig::canonical(1).with_regularization(false, false);
        let specs = layer_specs(&arch);
        assert_eq!(specs.len(), 27 - 4 - 5);
        assert!(specs
            .iter()
            .all(|s| !matches!(s.kind, LayerKind::BatchNorm | LayerKind::Dropout { .. })));
    }

    #[test]
    fn presets_validate() {
        for arch in [
            ArchConfig::canonical(1),
            ArchConfig::canonical(3),
            ArchConfig::desk(1),
            ArchConfig::tiny(1),
        ] {
            arch.validate().unwrap();
        }
    }

    #[test]
    fn table_layout_needs_eighty_voxels() {
        let mut arch = ArchConfig::canonical(1);
        arch.input_extent = [80, 79, 79];
        assert!(arch.validate().is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ArchConfig::desk(1);
        assert_eq!(a.hash(), ArchConfig::desk(1).hash());
        assert_ne!(a.hash(), ArchConfig::desk(3).hash());
        assert_ne!(a.hash(), a.clone().with_regularization(false, true).hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn summary_shape_format() {
        assert_eq!(OutputShape(vec![80, 40, 40, 32]).to_string(), "(None, 80, 40, 40, 32)");
        assert_eq!(OutputShape(vec![6]).to_string(), "(None, 6)");
    }
}
