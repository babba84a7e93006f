//! Conditioning stack: one-hot tissue channels plus the tumor
//! concentration field, at latent resolution.
//!
//! Channel order is fixed as (CSF, GM, WM, tumor_concentration) and is
//! recorded in the serialization manifest; the denoiser contract depends
//! on this order. Background voxels carry all-zero tissue channels.
//! Zeroing the concentration channel switches the pipeline from tumor
//! synthesis to healthy-tissue inpainting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_volume, write_volume, Shape3, Volume3, VolumeFormat};

/// Number of conditioning channels.
pub const NUM_CHANNELS: usize = 4;

/// Channel names in serialization order.
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = ["csf", "gm", "wm", "tumor_concentration"];

/// Index of the tumor-concentration channel.
pub const CONCENTRATION_CHANNEL: usize = 3;

/// Integer tissue labels accepted by [`ConditioningField::build`].
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_CSF: u8 = 1;
pub const LABEL_GM: u8 = 2;
pub const LABEL_WM: u8 = 3;

/// 4-channel latent-resolution conditioning stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningField {
    channels: Vec<Volume3>,
}

impl ConditioningField {
    /// Builds a field from raw channels, checking the invariants: equal
    /// shapes, one-hot tissue channels (per-voxel values in {0,1} summing
    /// to at most 1), and concentration in [0, 1].
    pub fn from_channels(channels: Vec<Volume3>) -> Result<Self> {
        if channels.len() != NUM_CHANNELS {
            return Err(Error::InvalidInput(format!(
                "expected {NUM_CHANNELS} conditioning channels, got {}",
                channels.len()
            )));
        }
        let shape = channels[0].shape();
        for (c, ch) in channels.iter().enumerate() {
            if ch.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "channel {c} has shape {:?}, expected {shape:?}",
                    ch.shape()
                )));
            }
        }
        for v in 0..channels[0].num_voxels() {
            let mut sum = 0.0;
            for ch in channels.iter().take(3) {
                let x = ch.data()[v];
                if x != 0.0 && x != 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "tissue channel value {x} at voxel {v} is not one-hot"
                    )));
                }
                sum += x;
            }
            if sum > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "tissue channels at voxel {v} sum to {sum} > 1"
                )));
            }
            let conc = channels[CONCENTRATION_CHANNEL].data()[v];
            if !(0.0..=1.0).contains(&conc) {
                return Err(Error::InvalidInput(format!(
                    "tumor concentration {conc} at voxel {v} is outside [0, 1]"
                )));
            }
        }
        Ok(Self { channels })
    }

    /// One-hot encodes integer tissue labels (0 = background, 1 = CSF,
    /// 2 = GM, 3 = WM), stacks them with the concentration field, and
    /// downsamples all four channels to latent resolution by
    /// corner-anchored nearest neighbor.
    pub fn build(
        tissue_labels: &Volume3,
        tumor_concentration: &Volume3,
        latent_factor: usize,
    ) -> Result<Self> {
        if tissue_labels.shape() != tumor_concentration.shape() {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?} vs concentration {:?}",
                tissue_labels.shape(),
                tumor_concentration.shape()
            )));
        }
        for (v, &x) in tissue_labels.data().iter().enumerate() {
            if x != 0.0 && x != 1.0 && x != 2.0 && x != 3.0 {
                return Err(Error::InvalidInput(format!(
                    "unknown tissue label {x} at voxel {v}"
                )));
            }
        }
        for (v, &c) in tumor_concentration.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidInput(format!(
                    "tumor concentration {c} at voxel {v} is outside [0, 1]"
                )));
            }
        }
        let f = (latent_factor, latent_factor, latent_factor);
        let mut channels = Vec::with_capacity(NUM_CHANNELS);
        for label in [LABEL_CSF, LABEL_GM, LABEL_WM] {
            let shape = tissue_labels.shape();
            let mut onehot = Volume3::zeros(shape);
            for (dst, &src) in onehot
                .data_mut()
                .iter_mut()
                .zip(tissue_labels.data().iter())
            {
                *dst = if src == f64::from(label) { 1.0 } else { 0.0 };
            }
            channels.push(onehot.nn_downsample(f)?);
        }
        channels.push(tumor_concentration.nn_downsample(f)?);
        Ok(Self { channels })
    }

    /// Returns a copy with the tumor-concentration channel zeroed and the
    /// tissue channels untouched. Idempotent.
    pub fn zero_tumor(&self) -> ConditioningField {
        let mut channels = self.channels.clone();
        channels[CONCENTRATION_CHANNEL].data_mut().fill(0.0);
        ConditioningField { channels }
    }

    pub fn latent_shape(&self) -> Shape3 {
        self.channels[0].shape()
    }

    pub fn channel(&self, c: usize) -> &Volume3 {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Volume3] {
        &self.channels
    }

    /// Serializes as four f32-raw channel files plus a JSON manifest
    /// naming them in channel order. Files are written next to the
    /// manifest as `<stem>.<channel>.f32`.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let stem = manifest_stem(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut files = Vec::with_capacity(NUM_CHANNELS);
        for (name, ch) in CHANNEL_NAMES.iter().zip(&self.channels) {
            let file = format!("{stem}.{name}.f32");
            write_volume(ch, &dir.join(&file), VolumeFormat::F32Raw)?;
            files.push(file);
        }
        let shape = self.latent_shape();
        let manifest = ConditionManifest {
            kind: "conditioning-field".into(),
            latent_shape: [shape.0, shape.1, shape.2],
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            files,
        };
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        std::fs::write(manifest_path, json)?;
        Ok(())
    }

    /// Loads a field saved by [`ConditioningField::save`].
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(manifest_path)?;
        let manifest: ConditionManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("malformed condition manifest: {e}")))?;
        if manifest.channels != CHANNEL_NAMES {
            return Err(Error::Format(format!(
                "unexpected channel order {:?}; expected {CHANNEL_NAMES:?}",
                manifest.channels
            )));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut channels = Vec::with_capacity(NUM_CHANNELS);
        for file in &manifest.files {
            channels.push(read_volume(&dir.join(file), VolumeFormat::F32Raw)?);
        }
        let field = Self::from_channels(channels)?;
        let shape = field.latent_shape();
        if manifest.latent_shape != [shape.0, shape.1, shape.2] {
            return Err(Error::Format(format!(
                "manifest latent_shape {:?} does not match channel files {:?}",
                manifest.latent_shape, shape
            )));
        }
        Ok(field)
    }
}

#[derive(Serialize, Deserialize)]
struct ConditionManifest {
    kind: String,
    latent_shape: [usize; 3],
    channels: Vec<String>,
    files: Vec<String>,
}

fn manifest_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::InvalidInput(format!("invalid manifest path {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_and_conc() -> (Volume3, Volume3) {
        let labels = Volume3::from_fn((8, 8, 8), |i, j, k| f64::from(((i + j + k) % 4) as u8));
        let conc = Volume3::from_fn((8, 8, 8), |i, _, _| i as f64 / 16.0);
        (labels, conc)
    }

    #[test]
    fn one_hot_encoding_per_label() {
        let labels = Volume3::new((4, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let conc = Volume3::zeros((4, 1, 1));
        let field = ConditioningField::build(&labels, &conc, 1).unwrap();
        // label 2 -> (0,1,0) in the tissue channels
        assert_eq!(field.channel(0).data()[2], 0.0);
        assert_eq!(field.channel(1).data()[2], 1.0);
        assert_eq!(field.channel(2).data()[2], 0.0);
        // background voxel has all-zero tissue channels
        for c in 0..3 {
            assert_eq!(field.channel(c).data()[0], 0.0);
        }
    }

    #[test]
    fn build_downsamples_to_latent_resolution() {
        let (labels, conc) = labels_and_conc();
        let field = ConditioningField::build(&labels, &conc, 4).unwrap();
        assert_eq!(field.latent_shape(), (2, 2, 2));
    }

    #[test]
    fn constant_concentration_is_fixed_under_downsampling() {
        let labels = Volume3::zeros((8, 8, 8));
        let conc = Volume3::filled((8, 8, 8), 0.5);
        let field = ConditioningField::build(&labels, &conc, 4).unwrap();
        assert!(field
            .channel(CONCENTRATION_CHANNEL)
            .data()
            .iter()
            .all(|&v| v == 0.5));
    }

    #[test]
    fn unknown_label_rejected() {
        let labels = Volume3::filled((2, 2, 2), 4.0);
        let conc = Volume3::zeros((2, 2, 2));
        assert!(ConditioningField::build(&labels, &conc, 1).is_err());
    }

    #[test]
    fn out_of_range_concentration_rejected() {
        let labels = Volume3::zeros((2, 2, 2));
        let conc = Volume3::filled((2, 2, 2), 1.5);
        assert!(ConditioningField::build(&labels, &conc, 1).is_err());
    }

    #[test]
    fn zero_tumor_zeroes_only_concentration() {
        let (labels, conc) = labels_and_conc();
        let field = ConditioningField::build(&labels, &conc, 2).unwrap();
        let zeroed = field.zero_tumor();
        let sum: f64 = zeroed.channel(CONCENTRATION_CHANNEL).data().iter().sum();
        assert_eq!(sum, 0.0);
        for c in 0..3 {
            assert_eq!(zeroed.channel(c).data(), field.channel(c).data());
        }
    }

    #[test]
    fn zero_tumor_is_idempotent() {
        let (labels, conc) = labels_and_conc();
        let field = ConditioningField::build(&labels, &conc, 2).unwrap();
        let once = field.zero_tumor();
        assert_eq!(once.zero_tumor(), once);
    }

    #[test]
    fn build_commutes_with_zeroing_the_input() {
        let (labels, conc) = labels_and_conc();
        let zero_conc = Volume3::zeros(conc.shape());
        let a = ConditioningField::build(&labels, &conc, 2).unwrap().zero_tumor();
        let b = ConditioningField::build(&labels, &zero_conc, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("voxdiff-cond-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (labels, conc) = labels_and_conc();
        let field = ConditioningField::build(&labels, &conc, 4).unwrap();
        let manifest = dir.join("cond.json");
        field.save(&manifest).unwrap();
        let loaded = ConditioningField::load(&manifest).unwrap();
        for c in 0..NUM_CHANNELS {
            assert_eq!(loaded.channel(c).data(), field.channel(c).data());
        }
    }
}
