use std::path::Path;

use super::{read_bytes, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::fusion_model::{Hyperparams, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BEVM";
const CHECKPOINT_VERSION: u32 = 1;
/// Marks the optional block after the parameter arrays.
const TRAILER_MAGIC: &[u8; 4] = b"HYPL";
const MAX_LEVELS: usize = 64;

/// Serialized model: magic, version, `D`, `K`, hidden width, then
/// `feature_mean`, `feature_std`, `W1`, `b1`, `W2`, `b2` as `f64`. A trailer
/// follows with the training hyperparameters and the pyramid levels the
/// features were built with.
pub fn encode_checkpoint(params: &ModelParams, levels: &[usize]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, params.dim as u32, params.num_classes as u32, params.hidden as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for arr in [&params.feature_mean, &params.feature_std, &params.w1, &params.b1, &params.w2, &params.b2] {
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(TRAILER_MAGIC);
    let h = &params.hyper;
    out.extend_from_slice(&h.lr.to_le_bytes());
    for v in [h.epochs as u64, h.seed, h.hidden as u64, h.batch_cells as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(levels.len() as u32).to_le_bytes());
    for l in levels {
        out.extend_from_slice(&(*l as u32).to_le_bytes());
    }
    out
}

/// Levels `1, 2, 4, …` matching the feature count, for checkpoints written
/// without a trailer.
fn infer_levels(dim: usize, num_classes: usize) -> Option<Vec<usize>> {
    let per_level = crate::features::fused_channels(1, num_classes);
    let n = dim / per_level;
    (dim.is_multiple_of(per_level) && (1..=MAX_LEVELS).contains(&n)).then(|| (0..n).map(|i| 1usize << i).collect())
}

/// Decodes a checkpoint and the levels stored with it. Without a trailer the
/// hyperparameters take their defaults and the levels are inferred from the
/// feature count.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(ModelParams, Vec<usize>)> {
    let mut r = ByteReader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let dim = r.u32("feature count")? as usize;
    let num_classes = r.u32("class count")? as usize;
    let hidden = r.u32("hidden width")? as usize;
    if dim == 0 || num_classes == 0 || hidden == 0 {
        return Err(r.error("model dimensions must be positive"));
    }
    let mut next = |count: Option<usize>, what: &str| -> Result<Vec<f64>> {
        let count = count.ok_or_else(|| r.error(format_args!("{what} size overflows")))?;
        r.f64_array(count, what)
    };
    let feature_mean = next(Some(dim), "feature means")?;
    let feature_std = next(Some(dim), "feature scales")?;
    let w1 = next(hidden.checked_mul(dim), "first-layer weights")?;
    let b1 = next(Some(hidden), "first-layer biases")?;
    let w2 = next(num_classes.checked_mul(hidden), "second-layer weights")?;
    let b2 = next(Some(num_classes), "second-layer biases")?;
    let (hyper, levels) = if r.remaining() == 0 {
        let levels = infer_levels(dim, num_classes)
            .ok_or_else(|| r.error(format_args!("no level trailer and {dim} features do not match {num_classes} classes")))?;
        (Hyperparams { hidden, ..Hyperparams::default() }, levels)
    } else {
        r.magic(TRAILER_MAGIC)?;
        let lr = r.f64("learning rate")?;
        let as_usize = |v: u64, r: &ByteReader| usize::try_from(v).map_err(|_| r.error("value does not fit in usize"));
        let epochs = r.u64("epochs")?;
        let epochs = as_usize(epochs, &r)?;
        let seed = r.u64("seed")?;
        let hyper_hidden = r.u64("hidden width")?;
        let hyper_hidden = as_usize(hyper_hidden, &r)?;
        let batch_cells = r.u64("batch size")?;
        let batch_cells = as_usize(batch_cells, &r)?;
        let n_levels = r.u32("level count")? as usize;
        if n_levels > MAX_LEVELS {
            return Err(r.error(format_args!("{n_levels} pyramid levels")));
        }
        let levels = r.array(n_levels, 4, "levels", |b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)?;
        let hyper = Hyperparams {
            lr,
            epochs,
            seed,
            hidden: hyper_hidden,
            batch_cells,
        };
        (hyper, levels)
    };
    r.finish()?;
    let params = ModelParams {
        dim,
        num_classes,
        hidden,
        w1,
        b1,
        w2,
        b2,
        feature_mean,
        feature_std,
        hyper,
    };
    params.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((params, levels))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Vec<usize>)> {
    decode_checkpoint(path, &read_bytes(path)?)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, levels: &[usize]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, levels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion_model::init;

    #[test]
    fn round_trip_and_truncation() {
        let p = init(6, 3, 4, 9).unwrap();
        let bytes = encode_checkpoint(&p, &[1, 2]);
        let (q, levels) = decode_checkpoint(Path::new("m"), &bytes).unwrap();
        assert_eq!((q, levels), (p, vec![1, 2]));
        for cut in [0, 3, 20, bytes.len() - 1] {
            assert!(decode_checkpoint(Path::new("m"), &bytes[..cut]).is_err());
        }
    }

    #[test]
    fn fixed_prefix_layout() {
        let p = init(24, 5, 4, 1).unwrap();
        let bytes = encode_checkpoint(&p, &[1, 2]);
        assert_eq!(&bytes[..4], b"BEVM");
        let header: Vec<u32> = bytes[4..20].chunks(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        assert_eq!(header, vec![1, 24, 5, 4]);
        let w1_at = 20 + 8 * 48;
        assert_eq!(&bytes[w1_at..w1_at + 8], &p.w1[0].to_le_bytes());
    }

    #[test]
    fn missing_trailer_infers_levels() {
        let p = init(24, 5, 4, 1).unwrap();
        let bytes = encode_checkpoint(&p, &[1, 2, 4]);
        let arrays_end = 20 + 8 * (24 + 24 + 4 * 24 + 4 + 5 * 4 + 5);
        let (q, levels) = decode_checkpoint(Path::new("m"), &bytes[..arrays_end]).unwrap();
        assert_eq!(levels, vec![1, 2]);
        assert_eq!(q.w2, p.w2);
        assert_eq!(q.hyper, Hyperparams { hidden: 4, ..Hyperparams::default() });
    }
}
