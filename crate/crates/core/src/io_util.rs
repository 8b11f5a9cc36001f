use std::io::Read;
use std::path::Path;

use crate::error::{FedMapError, Result};
use crate::scalar::Scalar;

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| FedMapError::Format("unexpected end of data reading u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_array<T: Scalar>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|_| {
        FedMapError::Format(format!("unexpected end of data reading {n} f64 values"))
    })?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect())
}

/// Writes to a sibling temp file then renames over `path`, so readers never
/// observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| FedMapError::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| FedMapError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FedMapError::io(path, e))
}
