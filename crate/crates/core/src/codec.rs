//! Latent codec: the mapping between image space and the compressed
//! latent grid the diffusion process runs on.
//!
//! [`BlockMomentCodec`] is a linear orthonormal block transform with the
//! latent geometry the sampler depends on: 4 channels, 4× spatial
//! compression per axis. Each 4×4×4 block is projected onto four fixed
//! orthonormal basis vectors over its 64 values — the normalized constant
//! vector and the three normalized first-order linear ramps along x, y,
//! and z. Decoding is the transpose reconstruction, so encode∘decode is
//! the identity on latents and decode∘encode is the orthogonal projection
//! onto blockwise-affine volumes.
//!
//! [`IdentityCodec`] reshapes a volume into a single-channel latent of the
//! same voxel count; useful for latent-space tests without compression.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_volume, write_volume, Shape3, Volume3, VolumeFormat};

/// Spatial compression factor per axis of the block codec.
pub const BLOCK: usize = 4;

/// Channel count of the block codec's latent space.
pub const LATENT_CHANNELS: usize = 4;

/// A multi-channel scalar field on the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume {
    shape: Shape3,
    spacing: (f64, f64, f64),
    channels: Vec<Vec<f64>>,
}

impl LatentVolume {
    pub fn new(shape: Shape3, spacing: (f64, f64, f64), channels: Vec<Vec<f64>>) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if channels.is_empty() {
            return Err(Error::InvalidInput("latent needs at least 1 channel".into()));
        }
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "latent channel {c} has {} values, shape {shape:?} needs {n}",
                    ch.len()
                )));
            }
        }
        Ok(Self {
            shape,
            spacing,
            channels,
        })
    }

    pub fn zeros(num_channels: usize, shape: Shape3) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        Self {
            shape,
            spacing: (1.0, 1.0, 1.0),
            channels: vec![vec![0.0; n]; num_channels],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Voxels per channel.
    pub fn voxels_per_channel(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    /// Total number of scalars across all channels.
    pub fn total_len(&self) -> usize {
        self.num_channels() * self.voxels_per_channel()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    #[inline]
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape.0 * (j + self.shape.1 * k)
    }

    pub fn same_geometry(&self, other: &LatentVolume) -> bool {
        self.shape == other.shape && self.num_channels() == other.num_channels()
    }

    /// Elementwise map over all channels.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> LatentVolume {
        LatentVolume {
            shape: self.shape,
            spacing: self.spacing,
            channels: self
                .channels
                .iter()
                .map(|ch| ch.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }

    /// Elementwise combination of two latents of identical geometry.
    pub fn zip_map(
        &self,
        other: &LatentVolume,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<LatentVolume> {
        if !self.same_geometry(other) {
            return Err(Error::ShapeMismatch(format!(
                "latent geometry {:?}×{} vs {:?}×{}",
                self.shape,
                self.num_channels(),
                other.shape,
                other.num_channels()
            )));
        }
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        Ok(LatentVolume {
            shape: self.shape,
            spacing: self.spacing,
            channels,
        })
    }

    /// Sum of elementwise products with another latent.
    pub fn dot(&self, other: &LatentVolume) -> Result<f64> {
        if !self.same_geometry(other) {
            return Err(Error::ShapeMismatch("latent dot: geometry mismatch".into()));
        }
        let mut acc = 0.0;
        for (a, b) in self.channels.iter().zip(&other.channels) {
            for (&x, &y) in a.iter().zip(b) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    /// Euclidean norm over all scalars.
    pub fn norm(&self) -> f64 {
        self.dot(self).expect("same geometry").sqrt()
    }

    /// Serializes as one f32-raw file per channel plus a JSON manifest.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| {
                Error::InvalidInput(format!("invalid manifest path {}", manifest_path.display()))
            })?
            .to_string();
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut files = Vec::with_capacity(self.num_channels());
        for (c, ch) in self.channels.iter().enumerate() {
            let v = Volume3::new(self.shape, self.spacing, ch.clone())?;
            let file = format!("{stem}.ch{c}.f32");
            write_volume(&v, &dir.join(&file), VolumeFormat::F32Raw)?;
            files.push(file);
        }
        let manifest = LatentManifest {
            kind: "latent-volume".into(),
            shape: [self.shape.0, self.shape.1, self.shape.2],
            spacing: [self.spacing.0, self.spacing.1, self.spacing.2],
            files,
        };
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        std::fs::write(manifest_path, json)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(manifest_path)?;
        let manifest: LatentManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("malformed latent manifest: {e}")))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let shape = (
            manifest.shape[0],
            manifest.shape[1],
            manifest.shape[2],
        );
        let mut channels = Vec::with_capacity(manifest.files.len());
        for file in &manifest.files {
            let v = read_volume(&dir.join(file), VolumeFormat::F32Raw)?;
            if v.shape() != shape {
                return Err(Error::Format(format!(
                    "channel file {file} has shape {:?}, manifest says {shape:?}",
                    v.shape()
                )));
            }
            channels.push(v.data().to_vec());
        }
        LatentVolume::new(
            shape,
            (
                manifest.spacing[0],
                manifest.spacing[1],
                manifest.spacing[2],
            ),
            channels,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct LatentManifest {
    kind: String,
    shape: [usize; 3],
    spacing: [f64; 3],
    files: Vec<String>,
}

/// Mapping between image space and latent space.
pub trait LatentCodec {
    fn encode(&self, v: &Volume3) -> Result<LatentVolume>;
    fn decode(&self, z: &LatentVolume) -> Result<Volume3>;
    /// Spatial compression factor per axis.
    fn factor(&self) -> usize;
}

/// Orthonormal 4×4×4 block transform with 4 latent channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockMomentCodec;

/// Basis value of the normalized constant vector (1/√64).
const CONST_COEF: f64 = 0.125;

/// Normalized linear-ramp basis value at in-block offset `i`:
/// (i − 1.5) / √80, where 80 = Σ_block (i − 1.5)².
#[inline]
fn ramp(i: usize) -> f64 {
    (i as f64 - 1.5) / 80f64.sqrt()
}

impl LatentCodec for BlockMomentCodec {
    fn encode(&self, v: &Volume3) -> Result<LatentVolume> {
        let s = v.shape();
        if !(s.0.is_multiple_of(BLOCK) && s.1.is_multiple_of(BLOCK) && s.2.is_multiple_of(BLOCK)) {
            return Err(Error::InvalidInput(format!(
                "shape {s:?} is not divisible by the block size {BLOCK}"
            )));
        }
        let ls = (s.0 / BLOCK, s.1 / BLOCK, s.2 / BLOCK);
        let mut z = LatentVolume::zeros(LATENT_CHANNELS, ls);
        let sp = v.spacing();
        z.spacing = (
            sp.0 * BLOCK as f64,
            sp.1 * BLOCK as f64,
            sp.2 * BLOCK as f64,
        );
        for bk in 0..ls.2 {
            for bj in 0..ls.1 {
                for bi in 0..ls.0 {
                    let mut proj = [0.0f64; LATENT_CHANNELS];
                    for dk in 0..BLOCK {
                        for dj in 0..BLOCK {
                            for di in 0..BLOCK {
                                let x = v.get(bi * BLOCK + di, bj * BLOCK + dj, bk * BLOCK + dk);
                                proj[0] += x * CONST_COEF;
                                proj[1] += x * ramp(di);
                                proj[2] += x * ramp(dj);
                                proj[3] += x * ramp(dk);
                            }
                        }
                    }
                    let idx = z.voxel_index(bi, bj, bk);
                    for (c, p) in proj.iter().enumerate() {
                        z.channels[c][idx] = *p;
                    }
                }
            }
        }
        Ok(z)
    }

    fn decode(&self, z: &LatentVolume) -> Result<Volume3> {
        if z.num_channels() != LATENT_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "block codec expects {LATENT_CHANNELS} channels, got {}",
                z.num_channels()
            )));
        }
        let ls = z.shape();
        let shape = (ls.0 * BLOCK, ls.1 * BLOCK, ls.2 * BLOCK);
        let mut out = Volume3::zeros(shape);
        let sp = z.spacing();
        for bk in 0..ls.2 {
            for bj in 0..ls.1 {
                for bi in 0..ls.0 {
                    let idx = z.voxel_index(bi, bj, bk);
                    let coef: Vec<f64> = (0..LATENT_CHANNELS).map(|c| z.channels[c][idx]).collect();
                    for dk in 0..BLOCK {
                        for dj in 0..BLOCK {
                            for di in 0..BLOCK {
                                let val = coef[0] * CONST_COEF
                                    + coef[1] * ramp(di)
                                    + coef[2] * ramp(dj)
                                    + coef[3] * ramp(dk);
                                let o =
                                    out.index(bi * BLOCK + di, bj * BLOCK + dj, bk * BLOCK + dk);
                                out.data_mut()[o] = val;
                            }
                        }
                    }
                }
            }
        }
        out.with_spacing((
            sp.0 / BLOCK as f64,
            sp.1 / BLOCK as f64,
            sp.2 / BLOCK as f64,
        ))
    }

    fn factor(&self) -> usize {
        BLOCK
    }
}

/// Lossless single-channel reshape codec.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, v: &Volume3) -> Result<LatentVolume> {
        LatentVolume::new(v.shape(), v.spacing(), vec![v.data().to_vec()])
    }

    fn decode(&self, z: &LatentVolume) -> Result<Volume3> {
        if z.num_channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "identity codec expects 1 channel, got {}",
                z.num_channels()
            )));
        }
        Volume3::new(z.shape(), z.spacing(), z.channel(0).to_vec())
    }

    fn factor(&self) -> usize {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_vectors_are_orthonormal() {
        // Assemble the four basis vectors explicitly and check pairwise dots.
        let mut basis = vec![vec![0.0f64; BLOCK * BLOCK * BLOCK]; 4];
        let mut n = 0;
        for dk in 0..BLOCK {
            for dj in 0..BLOCK {
                for di in 0..BLOCK {
                    basis[0][n] = CONST_COEF;
                    basis[1][n] = ramp(di);
                    basis[2][n] = ramp(dj);
                    basis[3][n] = ramp(dk);
                    n += 1;
                }
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = basis[a].iter().zip(&basis[b]).map(|(x, y)| x * y).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - expected).abs() < 1e-12,
                    "basis[{a}]·basis[{b}] = {dot}"
                );
            }
        }
    }

    #[test]
    fn constant_block_projects_onto_channel_zero() {
        let v = Volume3::filled((4, 4, 4), 3.0);
        let z = BlockMomentCodec.encode(&v).unwrap();
        assert!((z.channel(0)[0] - 8.0 * 3.0).abs() < 1e-12);
        for c in 1..4 {
            assert!(z.channel(c)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn zero_volume_encodes_to_zero_latent() {
        let z = BlockMomentCodec.encode(&Volume3::zeros((8, 8, 8))).unwrap();
        assert!(z.channels().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn ramp_along_x_uses_channels_zero_and_one() {
        // value depends only on the in-block x offset
        let v = Volume3::from_fn((4, 4, 4), |i, _, _| 2.0 * i as f64 + 1.0);
        let z = BlockMomentCodec.encode(&v).unwrap();
        assert!(z.channel(0)[0].abs() > 0.0);
        assert!(z.channel(1)[0].abs() > 0.0);
        assert!(z.channel(2)[0].abs() < 1e-12);
        assert!(z.channel(3)[0].abs() < 1e-12);
    }

    #[test]
    fn blockwise_affine_volumes_reconstruct_exactly() {
        let v = Volume3::from_fn((8, 4, 8), |i, j, k| {
            1.5 + 0.25 * (i % 4) as f64 - 0.75 * (j % 4) as f64 + 0.1 * (k % 4) as f64
        });
        let codec = BlockMomentCodec;
        let rec = codec.decode(&codec.encode(&v).unwrap()).unwrap();
        for (a, b) in v.data().iter().zip(rec.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_then_encode_is_identity_on_latents() {
        let mut z = LatentVolume::zeros(4, (2, 3, 2));
        let mut seed = 1u64;
        for c in 0..4 {
            for v in z.channel_mut(c) {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
                *v = (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            }
        }
        let codec = BlockMomentCodec;
        let z2 = codec.encode(&codec.decode(&z).unwrap()).unwrap();
        for c in 0..4 {
            for (a, b) in z.channel(c).iter().zip(z2.channel(c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_rejects_non_divisible_shape() {
        assert!(BlockMomentCodec.encode(&Volume3::zeros((5, 4, 4))).is_err());
    }

    #[test]
    fn identity_codec_round_trips_bitwise() {
        let v = Volume3::from_fn((3, 5, 2), |i, j, k| (i * 100 + j * 10 + k) as f64 * 0.31);
        let codec = IdentityCodec;
        let z = codec.encode(&v).unwrap();
        assert_eq!(z.num_channels(), 1);
        let r = codec.decode(&z).unwrap();
        assert_eq!(r.data(), v.data());
    }

    #[test]
    fn latent_save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("voxdiff-latent-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let v = Volume3::from_fn((8, 8, 8), |i, j, k| {
            f64::from((i as f32) * 0.5 - (j as f32) + (k as f32) * 0.25)
        });
        let z = BlockMomentCodec.encode(&v).unwrap();
        let path = dir.join("latent.json");
        z.save(&path).unwrap();
        let r = LatentVolume::load(&path).unwrap();
        // payloads round-trip through f32; re-encode to compare bit-exactly
        let z32 = z.map(|x| f64::from(x as f32));
        assert_eq!(r, z32);
    }
}
