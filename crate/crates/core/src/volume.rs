//! Core 3D volume and binary mask types, file I/O, and voxel-grid operations.
//!
//! A [`Volume3`] is a dense scalar field stored row-major with x fastest
//! (the NIfTI on-disk order), carrying voxel spacing in millimeters and a
//! declared intensity range. Payloads are float32 on disk in both supported
//! formats; in memory all arithmetic is f64. Two formats are supported:
//!
//! * `nifti1-raw` — uncompressed single-file NIfTI-1, datatype float32 only.
//!   Anything else (compressed, other datatypes, extensions) is rejected.
//! * `f32-raw` — a bare little-endian float32 payload plus a JSON sidecar
//!   `<path>.meta.json` holding shape and spacing.
//!
//! All operations are pure: they return new volumes and never mutate their
//! inputs, so values are safe to share across threads.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along (x, y, z).
pub type Shape3 = (usize, usize, usize);

fn shape_len(shape: Shape3) -> usize {
    shape.0 * shape.1 * shape.2
}

/// A dense 3D scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    shape: Shape3,
    spacing: (f64, f64, f64),
    intensity_range: (f64, f64),
    data: Vec<f64>,
}

impl Volume3 {
    /// Builds a volume from raw data in x-fastest order.
    pub fn new(shape: Shape3, spacing: (f64, f64, f64), data: Vec<f64>) -> Result<Self> {
        if data.len() != shape_len(shape) {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                shape,
                shape_len(shape)
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            shape,
            spacing,
            intensity_range: (0.0, 1.0),
            data,
        })
    }

    /// All-zero volume with unit spacing.
    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Constant volume with unit spacing.
    pub fn filled(shape: Shape3, value: f64) -> Self {
        Self {
            shape,
            spacing: (1.0, 1.0, 1.0),
            intensity_range: (0.0, 1.0),
            data: vec![value; shape_len(shape)],
        }
    }

    /// Builds a volume by evaluating `f` at every voxel coordinate.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape_len(shape));
        for k in 0..shape.2 {
            for j in 0..shape.1 {
                for i in 0..shape.0 {
                    data.push(f(i, j, k));
                }
            }
        }
        Self {
            shape,
            spacing: (1.0, 1.0, 1.0),
            intensity_range: (0.0, 1.0),
            data,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    /// Returns the same volume with different spacing metadata.
    pub fn with_spacing(mut self, spacing: (f64, f64, f64)) -> Result<Self> {
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// The declared (lo, hi) intensity range. Defaults to (0, 1).
    pub fn intensity_range(&self) -> (f64, f64) {
        self.intensity_range
    }

    pub fn set_intensity_range(&mut self, lo: f64, hi: f64) -> Result<()> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::InvalidInput(format!(
                "intensity range must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
        self.intensity_range = (lo, hi);
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Linear index of voxel (i, j, k); x is the fastest-varying axis.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape.0 * (j + self.shape.1 * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    /// Affine rescale mapping the finite minimum to 0 and maximum to 1.
    ///
    /// Constant volumes map to all zeros (a constant image carries no
    /// contrast). Non-finite values pass through unchanged; a volume
    /// without any finite value is an error.
    pub fn normalize_intensity(&self) -> Result<Volume3> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            return Err(Error::Numeric(
                "normalize_intensity: volume contains no finite value".into(),
            ));
        }
        let span = hi - lo;
        let data = if span == 0.0 {
            self.data
                .iter()
                .map(|&v| if v.is_finite() { 0.0 } else { v })
                .collect()
        } else {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        };
        Ok(Volume3 {
            shape: self.shape,
            spacing: self.spacing,
            intensity_range: (0.0, 1.0),
            data,
        })
    }

    /// Grows the volume to `target` by appending zero voxels at the high
    /// end of each axis.
    pub fn pad_to(&self, target: Shape3) -> Result<Volume3> {
        let s = self.shape;
        if target.0 < s.0 || target.1 < s.1 || target.2 < s.2 {
            return Err(Error::InvalidInput(format!(
                "pad_to target {target:?} is smaller than shape {s:?}"
            )));
        }
        let mut out = Volume3 {
            shape: target,
            spacing: self.spacing,
            intensity_range: self.intensity_range,
            data: vec![0.0; shape_len(target)],
        };
        for k in 0..s.2 {
            for j in 0..s.1 {
                let src = self.index(0, j, k);
                let dst = out.index(0, j, k);
                out.data[dst..dst + s.0].copy_from_slice(&self.data[src..src + s.0]);
            }
        }
        Ok(out)
    }

    /// Shrinks the volume to `target` by removing voxels from the high end
    /// of each axis. Inverse of [`Volume3::pad_to`].
    pub fn crop_to(&self, target: Shape3) -> Result<Volume3> {
        let s = self.shape;
        if target.0 > s.0 || target.1 > s.1 || target.2 > s.2 {
            return Err(Error::InvalidInput(format!(
                "crop_to target {target:?} is larger than shape {s:?}"
            )));
        }
        let mut out = Volume3 {
            shape: target,
            spacing: self.spacing,
            intensity_range: self.intensity_range,
            data: vec![0.0; shape_len(target)],
        };
        for k in 0..target.2 {
            for j in 0..target.1 {
                let src = self.index(0, j, k);
                let dst = out.index(0, j, k);
                out.data[dst..dst + target.0].copy_from_slice(&self.data[src..src + target.0]);
            }
        }
        Ok(out)
    }

    /// Corner-anchored nearest-neighbor downsampling: output voxel (i, j, k)
    /// is input voxel (fx·i, fy·j, fz·k). Spacing grows by the factor.
    pub fn nn_downsample(&self, factor: (usize, usize, usize)) -> Result<Volume3> {
        let (fx, fy, fz) = factor;
        if fx == 0 || fy == 0 || fz == 0 {
            return Err(Error::InvalidInput("downsample factor must be >= 1".into()));
        }
        let s = self.shape;
        if !(s.0.is_multiple_of(fx) && s.1.is_multiple_of(fy) && s.2.is_multiple_of(fz)) {
            return Err(Error::InvalidInput(format!(
                "shape {s:?} is not divisible by factor {factor:?}"
            )));
        }
        let target = (s.0 / fx, s.1 / fy, s.2 / fz);
        let mut data = Vec::with_capacity(shape_len(target));
        for k in 0..target.2 {
            for j in 0..target.1 {
                for i in 0..target.0 {
                    data.push(self.get(i * fx, j * fy, k * fz));
                }
            }
        }
        Ok(Volume3 {
            shape: target,
            spacing: (
                self.spacing.0 * fx as f64,
                self.spacing.1 * fy as f64,
                self.spacing.2 * fz as f64,
            ),
            intensity_range: self.intensity_range,
            data,
        })
    }
}

/// A binary 3D field. Value 1 marks known voxels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    shape: Shape3,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape_len(shape) {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0; shape_len(shape)],
        }
    }

    pub fn ones(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![1; shape_len(shape)],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape_len(shape));
        for k in 0..shape.2 {
            for j in 0..shape.1 {
                for i in 0..shape.0 {
                    data.push(u8::from(f(i, j, k)));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape.0 * (j + self.shape.1 * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.index(i, j, k)] == 1
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Flips every voxel.
    pub fn complement(&self) -> MaskVolume {
        MaskVolume {
            shape: self.shape,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Binary dilation with the 6-connected (face-neighbor) structuring
    /// element, applied `iterations` times. Monotone and extensive.
    pub fn dilate(&self, iterations: usize) -> MaskVolume {
        let (nx, ny, nz) = self.shape;
        let mut cur = self.data.clone();
        for _ in 0..iterations {
            let prev = cur.clone();
            let at = |i: usize, j: usize, k: usize| prev[i + nx * (j + ny * k)];
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        if at(i, j, k) == 1 {
                            continue;
                        }
                        let hit = (i > 0 && at(i - 1, j, k) == 1)
                            || (i + 1 < nx && at(i + 1, j, k) == 1)
                            || (j > 0 && at(i, j - 1, k) == 1)
                            || (j + 1 < ny && at(i, j + 1, k) == 1)
                            || (k > 0 && at(i, j, k - 1) == 1)
                            || (k + 1 < nz && at(i, j, k + 1) == 1);
                        if hit {
                            cur[i + nx * (j + ny * k)] = 1;
                        }
                    }
                }
            }
        }
        MaskVolume {
            shape: self.shape,
            data: cur,
        }
    }

    /// Downsamples to a coarser grid where an output voxel is set only if
    /// every voxel in its fx×fy×fz footprint is set. Used to derive
    /// latent-resolution known masks without leaking unknown voxels.
    pub fn downsample_all_set(&self, factor: (usize, usize, usize)) -> Result<MaskVolume> {
        let (fx, fy, fz) = factor;
        if fx == 0 || fy == 0 || fz == 0 {
            return Err(Error::InvalidInput("downsample factor must be >= 1".into()));
        }
        let s = self.shape;
        if !(s.0.is_multiple_of(fx) && s.1.is_multiple_of(fy) && s.2.is_multiple_of(fz)) {
            return Err(Error::InvalidInput(format!(
                "shape {s:?} is not divisible by factor {:?}",
                factor
            )));
        }
        let target = (s.0 / fx, s.1 / fy, s.2 / fz);
        let out = MaskVolume::from_fn(target, |i, j, k| {
            for dk in 0..fz {
                for dj in 0..fy {
                    for di in 0..fx {
                        if !self.get(i * fx + di, j * fy + dj, k * fz + dk) {
                            return false;
                        }
                    }
                }
            }
            true
        });
        Ok(out)
    }

    /// Converts to a 0/1-valued volume (for file I/O).
    pub fn to_volume(&self) -> Volume3 {
        Volume3 {
            shape: self.shape,
            spacing: (1.0, 1.0, 1.0),
            intensity_range: (0.0, 1.0),
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Reinterprets a volume whose voxels are exactly 0.0 or 1.0.
    pub fn from_volume(v: &Volume3) -> Result<MaskVolume> {
        let mut data = Vec::with_capacity(v.num_voxels());
        for &x in v.data() {
            if x == 0.0 {
                data.push(0);
            } else if x == 1.0 {
                data.push(1);
            } else {
                return Err(Error::InvalidInput(format!(
                    "mask volume contains non-binary value {x}"
                )));
            }
        }
        Ok(MaskVolume {
            shape: v.shape(),
            data,
        })
    }
}

/// Supported on-disk volume formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeFormat {
    /// Uncompressed single-file NIfTI-1, float32 payload.
    Nifti1Raw,
    /// Bare little-endian float32 payload with a `<path>.meta.json` sidecar.
    F32Raw,
}

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intensity_range: Option<[f64; 2]>,
}

/// Reads a volume from `path` in the given format.
pub fn read_volume(path: &Path, format: VolumeFormat) -> Result<Volume3> {
    match format {
        VolumeFormat::Nifti1Raw => nifti::read(path),
        VolumeFormat::F32Raw => read_f32_raw(path),
    }
}

/// Writes a volume to `path`. The write is atomic: data goes to a sibling
/// temporary file that is renamed into place, so a crash never leaves a
/// partial volume behind.
pub fn write_volume(v: &Volume3, path: &Path, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Nifti1Raw => nifti::write(v, path),
        VolumeFormat::F32Raw => write_f32_raw(v, path),
    }
}

fn payload_to_bytes(data: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

fn payload_from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

/// Writes `bytes` to `path` via a temporary sibling file and rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("invalid output path {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".meta.json");
    std::path::PathBuf::from(name)
}

fn read_f32_raw(path: &Path) -> Result<Volume3> {
    let meta_path = sidecar_path(path);
    let meta_bytes = fs::read(&meta_path).map_err(|e| {
        Error::Format(format!(
            "missing or unreadable sidecar {}: {e}",
            meta_path.display()
        ))
    })?;
    let meta: RawSidecar = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("malformed sidecar {}: {e}", meta_path.display())))?;
    let shape = (meta.shape[0], meta.shape[1], meta.shape[2]);
    let bytes = fs::read(path)?;
    if bytes.len() != shape_len(shape) * 4 {
        return Err(Error::Format(format!(
            "payload size {} does not match sidecar shape {:?} ({} bytes expected)",
            bytes.len(),
            meta.shape,
            shape_len(shape) * 4
        )));
    }
    let mut v = Volume3::new(
        shape,
        (meta.spacing[0], meta.spacing[1], meta.spacing[2]),
        payload_from_bytes(&bytes),
    )?;
    if let Some([lo, hi]) = meta.intensity_range {
        v.set_intensity_range(lo, hi)?;
    }
    Ok(v)
}

fn write_f32_raw(v: &Volume3, path: &Path) -> Result<()> {
    write_atomic(path, &payload_to_bytes(&v.data))?;
    let meta = RawSidecar {
        shape: [v.shape.0, v.shape.1, v.shape.2],
        spacing: [v.spacing.0, v.spacing.1, v.spacing.2],
        intensity_range: Some([v.intensity_range.0, v.intensity_range.1]),
    };
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    write_atomic(&sidecar_path(path), &json)
}

/// Minimal NIfTI-1 reader/writer: single-file, uncompressed, float32 only.
mod nifti {
    use super::*;

    const HEADER_SIZE: usize = 348;
    const VOX_OFFSET: usize = 352;
    const DT_FLOAT32: i16 = 16;
    const MAGIC: &[u8; 4] = b"n+1\0";

    fn rd_i32(b: &[u8], off: usize) -> i32 {
        i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
    }
    fn rd_i16(b: &[u8], off: usize) -> i16 {
        i16::from_le_bytes([b[off], b[off + 1]])
    }
    fn rd_f32(b: &[u8], off: usize) -> f32 {
        f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
    }
    fn wr_i32(b: &mut [u8], off: usize, v: i32) {
        b[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }
    fn wr_i16(b: &mut [u8], off: usize, v: i16) {
        b[off..off + 2].copy_from_slice(&v.to_le_bytes());
    }
    fn wr_f32(b: &mut [u8], off: usize, v: f32) {
        b[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }

    pub fn read(path: &Path) -> Result<Volume3> {
        let bytes = fs::read(path)?;
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Format(format!(
                "file too small for a NIfTI-1 header ({} bytes)",
                bytes.len()
            )));
        }
        let sizeof_hdr = rd_i32(&bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            // 0x5C010000 is 348 with swapped byte order.
            if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
                return Err(Error::Format(
                    "big-endian NIfTI files are not supported".into(),
                ));
            }
            return Err(Error::Format(format!(
                "malformed header: sizeof_hdr = {sizeof_hdr}, expected 348"
            )));
        }
        if &bytes[344..348] != MAGIC {
            return Err(Error::Format(
                "magic is not \"n+1\"; only single-file NIfTI-1 is supported".into(),
            ));
        }
        let datatype = rd_i16(&bytes, 70);
        if datatype != DT_FLOAT32 {
            return Err(Error::Format(format!(
                "unsupported datatype code {datatype}; only float32 (16) is supported"
            )));
        }
        let ndim = rd_i16(&bytes, 40);
        if !(1..=3).contains(&ndim) {
            return Err(Error::Format(format!(
                "unsupported dimensionality {ndim}; expected a 3D volume"
            )));
        }
        let mut dims = [1usize; 3];
        for (axis, d) in dims.iter_mut().enumerate().take(ndim as usize) {
            let val = rd_i16(&bytes, 42 + 2 * axis);
            if val < 1 {
                return Err(Error::Format(format!(
                    "malformed header: dim[{}] = {val}",
                    axis + 1
                )));
            }
            *d = val as usize;
        }
        let mut spacing = [1.0f64; 3];
        for (axis, s) in spacing.iter_mut().enumerate().take(ndim as usize) {
            let val = rd_f32(&bytes, 76 + 4 * (axis + 1));
            if val.is_nan() || val <= 0.0 {
                return Err(Error::Format(format!(
                    "malformed header: pixdim[{}] = {val} (must be > 0)",
                    axis + 1
                )));
            }
            *s = f64::from(val);
        }
        let scl_slope = rd_f32(&bytes, 112);
        let scl_inter = rd_f32(&bytes, 116);
        if !(scl_slope == 0.0 || scl_slope == 1.0) || scl_inter != 0.0 {
            return Err(Error::Format(format!(
                "intensity-scaled payloads are not supported (scl_slope={scl_slope}, scl_inter={scl_inter})"
            )));
        }
        let vox_offset = rd_f32(&bytes, 108);
        if vox_offset < VOX_OFFSET as f32 || vox_offset.fract() != 0.0 {
            return Err(Error::Format(format!(
                "malformed header: vox_offset = {vox_offset}"
            )));
        }
        let offset = vox_offset as usize;
        let shape = (dims[0], dims[1], dims[2]);
        let expected = shape_len(shape) * 4;
        if bytes.len() < offset || bytes.len() - offset != expected {
            return Err(Error::Format(format!(
                "payload size {} does not match header shape {:?} ({} bytes expected)",
                bytes.len().saturating_sub(offset),
                shape,
                expected
            )));
        }
        let mut v = Volume3::new(
            shape,
            (spacing[0], spacing[1], spacing[2]),
            payload_from_bytes(&bytes[offset..]),
        )?;
        let cal_min = f64::from(rd_f32(&bytes, 128));
        let cal_max = f64::from(rd_f32(&bytes, 124));
        if cal_min < cal_max {
            v.set_intensity_range(cal_min, cal_max)?;
        }
        Ok(v)
    }

    pub fn write(v: &Volume3, path: &Path) -> Result<()> {
        let mut bytes = vec![0u8; VOX_OFFSET];
        wr_i32(&mut bytes, 0, HEADER_SIZE as i32);
        wr_i16(&mut bytes, 40, 3); // dim[0]
        wr_i16(&mut bytes, 42, v.shape.0 as i16);
        wr_i16(&mut bytes, 44, v.shape.1 as i16);
        wr_i16(&mut bytes, 46, v.shape.2 as i16);
        for axis in 4..8 {
            wr_i16(&mut bytes, 40 + 2 * axis, 1);
        }
        wr_i16(&mut bytes, 70, DT_FLOAT32);
        wr_i16(&mut bytes, 72, 32); // bitpix
        wr_f32(&mut bytes, 76, 1.0); // qfac
        wr_f32(&mut bytes, 80, v.spacing.0 as f32);
        wr_f32(&mut bytes, 84, v.spacing.1 as f32);
        wr_f32(&mut bytes, 88, v.spacing.2 as f32);
        wr_f32(&mut bytes, 108, VOX_OFFSET as f32);
        wr_f32(&mut bytes, 112, 1.0); // scl_slope
        wr_f32(&mut bytes, 124, v.intensity_range.1 as f32);
        wr_f32(&mut bytes, 128, v.intensity_range.0 as f32);
        bytes[344..348].copy_from_slice(MAGIC);
        bytes.extend_from_slice(&payload_to_bytes(&v.data));
        write_atomic(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("voxdiff-volume-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn normalize_affine_by_hand() {
        let v = Volume3::new((3, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 5.0, 10.0]).unwrap();
        let n = v.normalize_intensity().unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_already_unit_range_unchanged() {
        let v = Volume3::new((4, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 1.0, 0.25, 0.75]).unwrap();
        let n = v.normalize_intensity().unwrap();
        assert_eq!(n.data(), v.data());
    }

    #[test]
    fn normalize_constant_maps_to_zero() {
        let v = Volume3::filled((2, 2, 2), 7.0);
        let n = v.normalize_intensity().unwrap();
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_all_nan_is_an_error() {
        let v = Volume3::filled((2, 1, 1), f64::NAN);
        assert!(v.normalize_intensity().is_err());
    }

    #[test]
    fn pad_appends_zeros_high_end() {
        let v = Volume3::from_fn((2, 2, 2), |i, j, k| (i + 2 * j + 4 * k) as f64 + 1.0);
        let p = v.pad_to((3, 2, 4)).unwrap();
        assert_eq!(p.shape(), (3, 2, 4));
        // original block preserved
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    assert_eq!(p.get(i, j, k), v.get(i, j, k));
                }
            }
        }
        // appended voxels are zero
        assert_eq!(p.get(2, 0, 0), 0.0);
        assert_eq!(p.get(0, 0, 3), 0.0);
    }

    #[test]
    fn pad_to_own_shape_is_identity() {
        let v = Volume3::from_fn((3, 4, 2), |i, j, k| (i * j + k) as f64);
        assert_eq!(v.pad_to(v.shape()).unwrap(), v);
    }

    #[test]
    fn crop_inverts_pad() {
        let v = Volume3::from_fn((3, 2, 5), |i, j, k| (i + 31 * j + 7 * k) as f64 * 0.37);
        let padded = v.pad_to((6, 3, 5)).unwrap();
        assert_eq!(padded.crop_to(v.shape()).unwrap(), v);
    }

    #[test]
    fn invalid_pad_and_crop_targets_rejected() {
        let v = Volume3::zeros((4, 4, 4));
        assert!(v.pad_to((3, 4, 4)).is_err());
        assert!(v.crop_to((5, 4, 4)).is_err());
    }

    #[test]
    fn downsample_is_corner_anchored() {
        let v = Volume3::from_fn((4, 4, 4), |i, j, k| (i + 10 * j + 100 * k) as f64);
        let d = v.nn_downsample((2, 2, 2)).unwrap();
        assert_eq!(d.shape(), (2, 2, 2));
        assert_eq!(d.get(1, 1, 1), v.get(2, 2, 2));
        assert_eq!(d.spacing(), (2.0, 2.0, 2.0));
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let v = Volume3::from_fn((3, 2, 4), |i, j, k| (i ^ j ^ k) as f64);
        assert_eq!(v.nn_downsample((1, 1, 1)).unwrap(), v);
    }

    #[test]
    fn downsample_requires_divisible_shape() {
        let v = Volume3::zeros((5, 4, 4));
        assert!(v.nn_downsample((2, 2, 2)).is_err());
    }

    #[test]
    fn dilate_single_voxel_six_connectivity() {
        let mut m = MaskVolume::zeros((5, 5, 5));
        let idx = m.index(2, 2, 2);
        let mut data = m.data().to_vec();
        data[idx] = 1;
        m = MaskVolume::new((5, 5, 5), data).unwrap();
        let d = m.dilate(1);
        assert_eq!(d.count_set(), 7);
        assert!(d.get(2, 2, 2) && d.get(1, 2, 2) && d.get(3, 2, 2));
        assert!(d.get(2, 1, 2) && d.get(2, 3, 2) && d.get(2, 2, 1) && d.get(2, 2, 3));
        // diagonal neighbors are untouched
        assert!(!d.get(1, 1, 2));
    }

    #[test]
    fn dilate_fixed_points() {
        let z = MaskVolume::zeros((4, 4, 4));
        assert_eq!(z.dilate(3), z);
        let o = MaskVolume::ones((4, 4, 4));
        assert_eq!(o.dilate(1), o);
    }

    #[test]
    fn dilate_composes() {
        let m = MaskVolume::from_fn((8, 8, 8), |i, j, k| i == 4 && j == 4 && k == 4);
        assert_eq!(m.dilate(1).dilate(1), m.dilate(2));
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(MaskVolume::new((2, 1, 1), vec![0, 2]).is_err());
        let v = Volume3::new((2, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 0.5]).unwrap();
        assert!(MaskVolume::from_volume(&v).is_err());
    }

    #[test]
    fn downsample_all_set_requires_full_block() {
        let m = MaskVolume::from_fn((4, 4, 4), |i, j, k| !(i == 0 && j == 0 && k == 0));
        let d = m.downsample_all_set((2, 2, 2)).unwrap();
        assert!(!d.get(0, 0, 0));
        assert!(d.get(1, 0, 0) && d.get(1, 1, 1));
    }

    #[test]
    fn f32_raw_round_trip_is_bit_exact() {
        let dir = tmpdir("raw");
        let path = dir.join("vol.f32");
        let v = Volume3::from_fn((3, 4, 5), |i, j, k| {
            f64::from((i as f32) * 0.25 + (j as f32) * 8.5 - (k as f32) * 3.125)
        })
        .with_spacing((0.5, 0.5, 2.0))
        .unwrap();
        write_volume(&v, &path, VolumeFormat::F32Raw).unwrap();
        let r = read_volume(&path, VolumeFormat::F32Raw).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn nifti_round_trip_is_bit_exact() {
        let dir = tmpdir("nifti");
        let path = dir.join("vol.nii");
        let v = Volume3::from_fn((6, 5, 4), |i, j, k| {
            f64::from(((i * 31 + j * 7 + k) as f32).sin())
        });
        write_volume(&v, &path, VolumeFormat::Nifti1Raw).unwrap();
        let r = read_volume(&path, VolumeFormat::Nifti1Raw).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn zero_volume_round_trips_as_zeros() {
        let dir = tmpdir("zeros");
        for (name, format) in [("z.nii", VolumeFormat::Nifti1Raw), ("z.f32", VolumeFormat::F32Raw)]
        {
            let path = dir.join(name);
            let v = Volume3::zeros((3, 3, 2));
            write_volume(&v, &path, format).unwrap();
            let r = read_volume(&path, format).unwrap();
            assert!(r.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn nifti_single_voxel() {
        let dir = tmpdir("single");
        let path = dir.join("one.nii");
        let v = Volume3::new((1, 1, 1), (1.0, 1.0, 1.0), vec![0.5]).unwrap();
        write_volume(&v, &path, VolumeFormat::Nifti1Raw).unwrap();
        let r = read_volume(&path, VolumeFormat::Nifti1Raw).unwrap();
        assert_eq!(r.data(), &[0.5]);
    }

    #[test]
    fn nifti_rejects_malformed_input() {
        let dir = tmpdir("bad");
        let path = dir.join("bad.nii");
        let v = Volume3::zeros((2, 2, 2));
        write_volume(&v, &path, VolumeFormat::Nifti1Raw).unwrap();
        let good = fs::read(&path).unwrap();

        // wrong sizeof_hdr
        let mut b = good.clone();
        b[0] = 0;
        fs::write(&path, &b).unwrap();
        assert!(matches!(
            read_volume(&path, VolumeFormat::Nifti1Raw),
            Err(Error::Format(_))
        ));

        // unsupported datatype (float64 = 64)
        let mut b = good.clone();
        b[70] = 64;
        fs::write(&path, &b).unwrap();
        assert!(matches!(
            read_volume(&path, VolumeFormat::Nifti1Raw),
            Err(Error::Format(_))
        ));

        // truncated payload
        let mut b = good.clone();
        b.truncate(good.len() - 4);
        fs::write(&path, &b).unwrap();
        assert!(matches!(
            read_volume(&path, VolumeFormat::Nifti1Raw),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn f32_raw_requires_sidecar() {
        let dir = tmpdir("nosidecar");
        let path = dir.join("orphan.f32");
        fs::write(&path, [0u8; 16]).unwrap();
        assert!(matches!(
            read_volume(&path, VolumeFormat::F32Raw),
            Err(Error::Format(_))
        ));
    }
}
