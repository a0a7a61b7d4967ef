use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};

/// On-disk dataset:
///
/// ```text
/// root/
///   lidar/000000.bin     point clouds
///   images/000000.semf   semantic images (or .pgm class IDs)
///   labels/000000.bevg   optional truth grids
///   poses.txt            world-from-ego, one line per frame
///   calib.txt            camera intrinsics and T_cam_ego
///   config.txt           optional key=value settings
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

/// Frames found by [`DatasetLayout::scan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    /// Number of LiDAR frames on disk; indices run `0..frame_count`.
    pub frame_count: usize,
    /// Frames with both a sweep and an image.
    pub frames: Vec<usize>,
    /// Frames without an image.
    pub skipped: Vec<usize>,
}

impl DatasetIndex {
    pub fn contains(&self, frame: usize) -> bool {
        self.frames.binary_search(&frame).is_ok()
    }
}

fn frame_name(frame: usize, ext: &str) -> String {
    format!("{frame:06}.{ext}")
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn lidar_dir(&self) -> PathBuf {
        self.root.join("lidar")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    pub fn calib_path(&self) -> PathBuf {
        self.root.join("calib.txt")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn lidar_path(&self, frame: usize) -> PathBuf {
        self.lidar_dir().join(frame_name(frame, "bin"))
    }

    pub fn semf_path(&self, frame: usize) -> PathBuf {
        self.images_dir().join(frame_name(frame, "semf"))
    }

    pub fn pgm_path(&self, frame: usize) -> PathBuf {
        self.images_dir().join(frame_name(frame, "pgm"))
    }

    /// The frame's image, preferring SEMF over PGM.
    pub fn image_path(&self, frame: usize) -> Option<PathBuf> {
        [self.semf_path(frame), self.pgm_path(frame)].into_iter().find(|p| p.is_file())
    }

    pub fn label_path(&self, frame: usize) -> PathBuf {
        self.labels_dir().join(frame_name(frame, "bevg"))
    }

    pub fn create_dirs(&self) -> Result<()> {
        for dir in [self.lidar_dir(), self.images_dir(), self.labels_dir()] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    /// Lists LiDAR frames, requiring indices `0..n` without gaps. Frames
    /// without an image are skipped with a warning.
    pub fn scan(&self) -> Result<DatasetIndex> {
        let dir = self.lidar_dir();
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut indices = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(stem) = name.strip_suffix(".bin") {
                if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                    indices.push(stem.parse::<usize>().expect("six digits"));
                }
            }
        }
        indices.sort_unstable();
        if let Some(gap) = indices.iter().enumerate().find(|(i, f)| *i != **f).map(|(i, _)| i) {
            return Err(Error::format(&dir, format!("frame indices are not contiguous: {} is missing", frame_name(gap, "bin"))));
        }
        let (mut frames, mut skipped) = (Vec::new(), Vec::new());
        for &f in &indices {
            if self.image_path(f).is_some() {
                frames.push(f);
            } else {
                warn!("frame {f:06} has no image; skipping it");
                skipped.push(f);
            }
        }
        Ok(DatasetIndex {
            frame_count: indices.len(),
            frames,
            skipped,
        })
    }
}

impl AsRef<Path> for DatasetLayout {
    fn as_ref(&self) -> &Path {
        &self.root
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(p: &Path) {
        std::fs::write(p, b"").unwrap();
    }

    #[test]
    fn scan_skips_frames_without_images() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DatasetLayout::new(dir.path());
        layout.create_dirs().unwrap();
        for f in 0..3 {
            touch(&layout.lidar_path(f));
        }
        touch(&layout.semf_path(0));
        touch(&layout.pgm_path(2));
        let idx = layout.scan().unwrap();
        assert_eq!(idx.frames, vec![0, 2]);
        assert_eq!(idx.skipped, vec![1]);
        assert_eq!(layout.image_path(2), Some(layout.pgm_path(2)));
    }

    #[test]
    fn gaps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DatasetLayout::new(dir.path());
        layout.create_dirs().unwrap();
        touch(&layout.lidar_path(0));
        touch(&layout.lidar_path(2));
        let err = layout.scan().unwrap_err().to_string();
        assert!(err.contains("000001"), "{err}");
    }
}
