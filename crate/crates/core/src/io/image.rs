use std::path::Path;

use super::{read_bytes, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::pseudo_label::SemanticImage;

pub const SEMF_MAGIC: &[u8; 4] = b"SEMF";

/// Decodes a semantic image from either a binary PGM of class IDs or a SEMF
/// probability file. PGM needs `num_classes`; for SEMF it is optional and
/// checked against the header when given.
pub fn decode_semantic_image(path: &Path, bytes: &[u8], num_classes: Option<usize>) -> Result<SemanticImage> {
    if bytes.starts_with(b"P5") {
        let k = num_classes.ok_or_else(|| Error::format(path, "PGM class images need the number of classes"))?;
        decode_pgm(path, bytes, k)
    } else {
        let img = decode_semf(path, bytes)?;
        match num_classes {
            Some(k) if k != img.num_classes() => Err(Error::format(
                path,
                format!("image has {} classes, expected {k}", img.num_classes()),
            )),
            _ => Ok(img),
        }
    }
}

pub fn read_semantic_image(path: &Path, num_classes: Option<usize>) -> Result<SemanticImage> {
    decode_semantic_image(path, &read_bytes(path)?, num_classes)
}

fn decode_semf(path: &Path, bytes: &[u8]) -> Result<SemanticImage> {
    let mut r = ByteReader::new(path, bytes);
    r.magic(SEMF_MAGIC)?;
    let k = r.u32("class count")? as usize;
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let count = k
        .checked_mul(w)
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| r.error("image size overflows"))?;
    let probs = r.f32_array(count, "probability planes")?;
    r.finish()?;
    SemanticImage::new(w, h, k, probs).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_semf(img: &SemanticImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.probs().len() * 4);
    out.extend_from_slice(SEMF_MAGIC);
    for v in [img.num_classes(), img.width(), img.height()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for p in img.probs() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn write_semf(path: &Path, img: &SemanticImage) -> Result<()> {
    write_atomic(path, &encode_semf(img))
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_pgm_header(path: &Path, bytes: &[u8]) -> Result<PgmHeader> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        fields[i] = text
            .parse()
            .map_err(|_| Error::format(path, format!("bad PGM {name} at byte offset {start}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, format!("expected whitespace after PGM header at byte offset {pos}"))),
    }
    Ok(PgmHeader {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_offset: pos,
    })
}

fn decode_pgm(path: &Path, bytes: &[u8], num_classes: usize) -> Result<SemanticImage> {
    let h = parse_pgm_header(path, bytes)?;
    if h.maxval == 0 || h.maxval > 255 {
        return Err(Error::format(path, format!("PGM maxval {} is not an 8-bit range", h.maxval)));
    }
    let mut r = ByteReader::new(path, bytes);
    r.take(h.data_offset, "header")?;
    let n = h
        .width
        .checked_mul(h.height)
        .ok_or_else(|| r.error("image size overflows"))?;
    let labels = r.take(n, "class IDs")?;
    r.finish()?;
    if let Some(i) = labels.iter().position(|l| *l as usize >= num_classes) {
        return Err(Error::format(
            path,
            format!(
                "label {} at byte offset {} out of range for {num_classes} classes",
                labels[i],
                h.data_offset + i
            ),
        ));
    }
    SemanticImage::from_labels(h.width, h.height, num_classes, labels).map_err(|e| Error::format(path, e.to_string()))
}

/// Binary PGM of per-pixel class IDs.
pub fn encode_pgm(width: usize, height: usize, labels: &[u8]) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::LengthMismatch {
            what: "labels vs image size",
            left: labels.len(),
            right: width * height,
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    write_atomic(path, &encode_pgm(width, height, labels)?)
}
