//! File formats and dataset layout.
//!
//! Binary formats are little-endian. Every writer replaces its target
//! atomically: bytes go to a temporary file in the same directory, which is
//! then renamed over the destination.

mod checkpoint;
mod cloud;
mod dataset;
mod grid;
mod image;
mod render;
mod text;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use cloud::{decode_pointcloud, encode_pointcloud, read_pointcloud, write_pointcloud};
pub use dataset::{DatasetIndex, DatasetLayout};
pub use grid::{
    decode_grid, encode_grid, grid_to_pseudo, labels_to_grid, prediction_to_grid, pseudo_to_grid, read_grid,
    stored_labels, write_grid, GridKind, StoredGrid, GRID_MAGIC, GRID_VERSION,
};
pub use image::{
    decode_semantic_image, encode_pgm, encode_semf, read_semantic_image, write_pgm, write_semf, SEMF_MAGIC,
};
pub use render::{encode_labels_ppm, encode_scalar_ppm, write_ppm, Palette, Rgb};
pub use text::{
    decode_calib, decode_poses, encode_calib, encode_poses, parse_key_values, read_calib, read_key_values,
    read_poses, write_calib, write_poses, POSE_DRIFT_TOLERANCE,
};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::format(path, format!("not UTF-8 at byte offset {}", e.utf8_error().valid_up_to())))
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Cursor over a byte buffer whose errors carry the file path and offset.
pub(crate) struct ByteReader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(path: &'a Path, data: &'a [u8]) -> Self {
        ByteReader { path, data, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn error(&self, message: impl std::fmt::Display) -> Error {
        Error::format(self.path, format!("{message} (byte offset {})", self.pos))
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format_args!(
                "truncated {what}: expected {n} bytes, found {}",
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            self.pos -= 4;
            return Err(self.error(format_args!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Reads `count` values of `width` bytes after checking that they are
    /// all present, so corrupt headers cannot trigger huge allocations.
    pub(crate) fn array<T>(
        &mut self,
        count: usize,
        width: usize,
        what: &str,
        decode: impl Fn(&[u8]) -> T,
    ) -> Result<Vec<T>> {
        let bytes = count
            .checked_mul(width)
            .ok_or_else(|| self.error(format_args!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(width).map(decode).collect())
    }

    pub(crate) fn f32_array(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        self.array(count, 4, what, |b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64_array(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        self.array(count, 8, what, |b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format_args!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Widens an `f32` to the `f64` with the same shortest decimal form, so
/// that `0.2_f32` comes back as `0.2` rather than `0.20000000298…`.
pub(crate) fn widen_decimal(v: f32) -> f64 {
    if !v.is_finite() {
        return v as f64;
    }
    match v.to_string().parse::<f64>() {
        Ok(w) if w as f32 == v => w,
        _ => v as f64,
    }
}
