//! Small shared helpers: atomic writes, path-tagged I/O errors, volume
//! and mask loading.

use std::io::Write;
use std::path::Path;

use voxdiff_core::error::{Error, Result};
use voxdiff_core::volume::{read_volume, MaskVolume, Volume3, VolumeFormat};

/// Writes via a temporary sibling file plus rename, so partial outputs
/// never appear under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("invalid output path {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Tags I/O errors with the offending path.
pub fn with_path<T>(result: Result<T>, path: &Path) -> Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume3> {
    with_path(read_volume(path, format), path)
}

/// Loads a 0/1-valued volume as a mask.
pub fn load_mask(path: &Path, format: VolumeFormat) -> Result<MaskVolume> {
    let v = load_volume(path, format)?;
    with_path(MaskVolume::from_volume(&v), path)
}

/// Stable 64-bit FNV-1a hash, used to derive per-subject RNG streams
/// from (seed, subject id).
pub fn fnv1a64(text: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in text.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Parses "a,b,c" into a numeric triple.
pub fn parse_triple<T: std::str::FromStr>(text: &str, what: &str) -> Result<(T, T, T)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "{what} must be three comma-separated values, got \"{text}\""
        )));
    }
    let parse = |s: &str| {
        s.trim()
            .parse::<T>()
            .map_err(|_| Error::InvalidInput(format!("{what}: cannot parse \"{s}\"")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}
