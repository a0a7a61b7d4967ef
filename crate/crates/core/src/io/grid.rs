use std::path::Path;

use super::{read_bytes, widen_decimal, write_atomic, ByteReader};
use crate::bev_grid::{BevGrid, GridSpec};
use crate::error::{Error, Result};
use crate::fusion_model::Prediction;
use crate::pseudo_label::PseudoLabelGrid;
use crate::{normalized_entropy, VOID};

pub const GRID_MAGIC: &[u8; 4] = b"BEVG";
pub const GRID_VERSION: u32 = 1;

/// What the channels of a stored grid mean.
///
/// * `Labels`: one channel of class indices, void as 255.
/// * `PseudoLabel`: evidence (K), posterior (K), label, uncertainty, weight,
///   observed.
/// * `Prediction`: label, confidence, uncertainty, probabilities (K).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Generic = 0,
    Labels = 1,
    PseudoLabel = 2,
    Prediction = 3,
}

impl GridKind {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => GridKind::Generic,
            1 => GridKind::Labels,
            2 => GridKind::PseudoLabel,
            3 => GridKind::Prediction,
            _ => return None,
        })
    }

    /// Class count implied by a channel count, or `None` when the count is
    /// impossible for this kind.
    fn classes_for(self, channels: usize) -> Option<Option<usize>> {
        match self {
            GridKind::Generic => Some(None),
            GridKind::Labels => (channels == 1).then_some(None),
            GridKind::PseudoLabel => {
                (channels >= 8 && (channels - 4).is_multiple_of(2)).then_some(Some((channels - 4) / 2))
            }
            GridKind::Prediction => (channels >= 5).then_some(Some(channels - 3)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredGrid {
    pub kind: GridKind,
    pub grid: BevGrid,
}

impl StoredGrid {
    pub fn new(kind: GridKind, grid: BevGrid) -> Result<Self> {
        if kind.classes_for(grid.channels()).is_none() {
            return Err(Error::DimensionMismatch(format!(
                "{} channels cannot form a {kind:?} grid",
                grid.channels()
            )));
        }
        Ok(StoredGrid { kind, grid })
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.kind.classes_for(self.grid.channels()).flatten()
    }

    fn label_channel(&self) -> Option<usize> {
        match self.kind {
            GridKind::Generic => None,
            GridKind::Labels | GridKind::Prediction => Some(0),
            GridKind::PseudoLabel => Some(2 * self.num_classes()?),
        }
    }
}

pub fn encode_grid(stored: &StoredGrid) -> Vec<u8> {
    let g = &stored.grid;
    let s = g.spec();
    let mut out = Vec::with_capacity(33 + g.values().len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    for v in [s.resolution, s.origin_x, s.origin_y] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for v in [s.width, s.height, g.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(stored.kind as u8);
    for v in g.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(path: &Path, bytes: &[u8]) -> Result<StoredGrid> {
    let mut r = ByteReader::new(path, bytes);
    r.magic(GRID_MAGIC)?;
    let version = r.u32("version")?;
    if version != GRID_VERSION {
        return Err(Error::format(path, format!("unsupported grid version {version} (supported: {GRID_VERSION})")));
    }
    let resolution = widen_decimal(r.f32("resolution")?);
    let origin_x = widen_decimal(r.f32("origin_x")?);
    let origin_y = widen_decimal(r.f32("origin_y")?);
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    let channels = r.u32("channels")? as usize;
    let tag = r.u8("kind")?;
    let kind = GridKind::from_tag(tag).ok_or_else(|| r.error(format_args!("unknown grid kind {tag}")))?;
    let spec = GridSpec::new(resolution, origin_x, origin_y, width, height).map_err(|e| Error::format(path, e.to_string()))?;
    if kind.classes_for(channels).is_none() {
        return Err(Error::format(path, format!("{channels} channels cannot form a {kind:?} grid")));
    }
    let count = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| r.error("grid size overflows"))?;
    let values = r.f32_array(count, "planes")?;
    r.finish()?;
    let grid = BevGrid::from_values(spec, channels, values.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(StoredGrid { kind, grid })
}

pub fn read_grid(path: &Path) -> Result<StoredGrid> {
    decode_grid(path, &read_bytes(path)?)
}

pub fn write_grid(path: &Path, stored: &StoredGrid) -> Result<()> {
    write_atomic(path, &encode_grid(stored))
}

/// Class labels of a stored grid; every value must be a whole number in
/// `0..K` or the void label.
pub fn stored_labels(stored: &StoredGrid) -> Result<Vec<u8>> {
    let ch = stored
        .label_channel()
        .ok_or_else(|| Error::InvalidParameter(format!("{:?} grid has no label channel", stored.kind)))?;
    let k = stored.num_classes().unwrap_or(VOID as usize);
    stored
        .grid
        .plane(ch)
        .iter()
        .map(|v| {
            let ok = v.fract() == 0.0 && *v >= 0.0 && (*v < k as f64 || *v == VOID as f64);
            if ok {
                Ok(*v as u8)
            } else {
                Err(Error::InvalidParameter(format!("label value {v} is not a class index")))
            }
        })
        .collect()
}

pub fn labels_to_grid(spec: GridSpec, labels: &[u8]) -> Result<StoredGrid> {
    let grid = BevGrid::from_values(spec, 1, labels.iter().map(|l| *l as f64).collect())?;
    Ok(StoredGrid {
        kind: GridKind::Labels,
        grid,
    })
}

pub fn pseudo_to_grid(p: &PseudoLabelGrid) -> StoredGrid {
    let mut values = Vec::with_capacity((2 * p.num_classes + 4) * p.spec.num_cells());
    values.extend_from_slice(&p.evidence);
    values.extend_from_slice(&p.posterior);
    values.extend(p.label.iter().map(|l| *l as f64));
    values.extend_from_slice(&p.uncertainty);
    values.extend_from_slice(&p.weight);
    values.extend(p.observed.iter().map(|o| if *o { 1.0 } else { 0.0 }));
    StoredGrid {
        kind: GridKind::PseudoLabel,
        grid: BevGrid::from_values(p.spec, 2 * p.num_classes + 4, values).expect("channel stack matches spec"),
    }
}

pub fn grid_to_pseudo(stored: &StoredGrid) -> Result<PseudoLabelGrid> {
    if stored.kind != GridKind::PseudoLabel {
        return Err(Error::InvalidParameter(format!("expected a pseudo-label grid, found {:?}", stored.kind)));
    }
    let k = stored.num_classes().expect("pseudo-label grids carry a class count");
    let g = &stored.grid;
    let n = g.spec().num_cells();
    let planes = |from: usize, count: usize| g.values()[from * n..(from + count) * n].to_vec();
    let observed = g
        .plane(2 * k + 3)
        .iter()
        .map(|v| match *v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(Error::InvalidParameter(format!("observed flag {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelGrid {
        spec: *g.spec(),
        num_classes: k,
        evidence: planes(0, k),
        posterior: planes(k, k),
        label: stored_labels(stored)?,
        uncertainty: planes(2 * k + 1, 1),
        weight: planes(2 * k + 2, 1),
        observed,
    })
}

pub fn prediction_to_grid(pred: &Prediction) -> StoredGrid {
    let probs = &pred.probs;
    let spec = *probs.spec();
    let n = spec.num_cells();
    let k = probs.channels();
    let mut values = Vec::with_capacity((k + 3) * n);
    values.extend(pred.labels.iter().map(|l| *l as f64));
    values.extend_from_slice(&pred.confidence);
    let mut p = vec![0.0; k];
    for idx in 0..n {
        for (c, v) in p.iter_mut().enumerate() {
            *v = probs.values()[c * n + idx];
        }
        values.push(normalized_entropy(&p));
    }
    values.extend_from_slice(probs.values());
    StoredGrid {
        kind: GridKind::Prediction,
        grid: BevGrid::from_values(spec, k + 3, values).expect("channel stack matches spec"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new(0.2, 0.0, -0.4, 3, 4).unwrap()
    }

    #[test]
    fn header_decimals_survive() {
        let stored = labels_to_grid(spec(), &[0; 12]).unwrap();
        let back = decode_grid(Path::new("g"), &encode_grid(&stored)).unwrap();
        assert_eq!(back, stored);
        assert_eq!(back.grid.spec().resolution, 0.2);
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = encode_grid(&labels_to_grid(spec(), &[1; 12]).unwrap());
        bytes[4] = 2;
        let err = decode_grid(Path::new("g"), &bytes).unwrap_err().to_string();
        assert!(err.contains("unsupported grid version 2"), "{err}");
        bytes[0] = b'X';
        assert!(decode_grid(Path::new("g"), &bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn plane_size_mismatch() {
        let bytes = encode_grid(&labels_to_grid(spec(), &[1; 12]).unwrap());
        assert!(decode_grid(Path::new("g"), &bytes[..bytes.len() - 4]).is_err());
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(decode_grid(Path::new("g"), &long).is_err());
    }

    #[test]
    fn labels_are_checked() {
        let mut stored = labels_to_grid(spec(), &[VOID; 12]).unwrap();
        assert_eq!(stored_labels(&stored).unwrap(), vec![VOID; 12]);
        stored.grid.values_mut()[0] = 1.5;
        assert!(stored_labels(&stored).is_err());
    }
}
