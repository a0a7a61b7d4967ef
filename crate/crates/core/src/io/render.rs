use std::path::Path;

use super::write_atomic;
use crate::bev_grid::GridSpec;
use crate::error::{Error, Result};
use crate::VOID;

pub type Rgb = [u8; 3];

/// Class colors plus the color used for void cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub classes: Vec<Rgb>,
    pub void: Rgb,
}

impl Default for Palette {
    /// trail, grass, bush, obstacle, water, then three spare colors; void is
    /// black.
    fn default() -> Self {
        Palette {
            classes: vec![
                [170, 130, 80],
                [90, 180, 70],
                [30, 100, 40],
                [210, 50, 50],
                [50, 110, 210],
                [230, 200, 60],
                [150, 80, 190],
                [80, 200, 200],
            ],
            void: [0, 0, 0],
        }
    }
}

impl Palette {
    pub fn color(&self, label: u8) -> Option<Rgb> {
        if label == VOID {
            Some(self.void)
        } else {
            self.classes.get(label as usize).copied()
        }
    }
}

/// Image rows run along the grid's x axis (forward is up) and image columns
/// along y (left is left), so the image is `height` pixels wide.
fn render(spec: &GridSpec, mut pixel: impl FnMut(usize) -> Result<Rgb>) -> Result<Vec<u8>> {
    let (w, h) = (spec.width, spec.height);
    let mut out = format!("P6\n{h} {w}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for i in 0..w {
        let col = w - 1 - i;
        for j in 0..h {
            let row = h - 1 - j;
            out.extend_from_slice(&pixel(spec.index(row, col))?);
        }
    }
    Ok(out)
}

fn check_len(spec: &GridSpec, len: usize) -> Result<()> {
    if len != spec.num_cells() {
        return Err(Error::LengthMismatch {
            what: "values vs grid cells",
            left: len,
            right: spec.num_cells(),
        });
    }
    Ok(())
}

pub fn encode_labels_ppm(spec: &GridSpec, labels: &[u8], palette: &Palette) -> Result<Vec<u8>> {
    check_len(spec, labels.len())?;
    render(spec, |idx| {
        palette
            .color(labels[idx])
            .ok_or_else(|| Error::InvalidParameter(format!("palette has no color for class {}", labels[idx])))
    })
}

/// Grayscale rendering of values in `[0, 1]`; out-of-range values are
/// clamped and NaN renders black.
pub fn encode_scalar_ppm(spec: &GridSpec, values: &[f64]) -> Result<Vec<u8>> {
    check_len(spec, values.len())?;
    render(spec, |idx| {
        let v = values[idx];
        let g = if v.is_nan() { 0 } else { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
        Ok([g, g, g])
    })
}

pub fn write_ppm(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(bytes: &[u8]) -> &[u8] {
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        &bytes[header_end..]
    }

    #[test]
    fn single_class_pixel() {
        let spec = GridSpec::new(1.0, 0.0, 0.0, 1, 1).unwrap();
        let ppm = encode_labels_ppm(&spec, &[0], &Palette::default()).unwrap();
        assert!(ppm.starts_with(b"P6\n1 1\n255\n"));
        assert_eq!(body(&ppm), &Palette::default().classes[0]);
    }

    #[test]
    fn all_void_is_black() {
        let spec = GridSpec::new(1.0, 0.0, 0.0, 3, 2).unwrap();
        let ppm = encode_labels_ppm(&spec, &[VOID; 6], &Palette::default()).unwrap();
        assert!(body(&ppm).iter().all(|b| *b == 0));
        assert_eq!(body(&ppm).len(), 18);
    }

    #[test]
    fn forward_is_up_and_left_is_left() {
        // 2 columns (x) by 2 rows (y): the cell at the largest x and largest
        // y is drawn in the top-left corner.
        let spec = GridSpec::new(1.0, 0.0, 0.0, 2, 2).unwrap();
        let labels = [0, 1, 2, 3];
        let ppm = encode_labels_ppm(&spec, &labels, &Palette::default()).unwrap();
        let pal = Palette::default();
        let expect: Vec<u8> = [3, 1, 2, 0].iter().flat_map(|c| pal.classes[*c]).collect();
        assert_eq!(body(&ppm), expect.as_slice());
    }

    #[test]
    fn uncovered_class_is_an_error() {
        let spec = GridSpec::new(1.0, 0.0, 0.0, 1, 1).unwrap();
        assert!(encode_labels_ppm(&spec, &[9], &Palette::default()).is_err());
        let gray = encode_scalar_ppm(&spec, &[0.5]).unwrap();
        assert_eq!(body(&gray), &[128, 128, 128]);
    }
}
