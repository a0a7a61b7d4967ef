//! Metric bird's-eye-view grids.
//!
//! Rows index `y`, columns index `x`. Cell `(0, 0)` has its lower corner at
//! `(origin_x, origin_y)`. Values are stored channel-major: `C × H × W`.

use crate::error::{Error, Result};

/// Resolution pyramid used for multi-scale fusion.
pub const DEFAULT_LEVELS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for GridSpec {
    /// 51.2 m forward by 51.2 m lateral at 0.2 m, ego at the rear-center edge.
    fn default() -> Self {
        GridSpec {
            resolution: 0.2,
            origin_x: 0.0,
            origin_y: -25.6,
            width: 256,
            height: 256,
        }
    }
}

impl GridSpec {
    pub fn new(resolution: f64, origin_x: f64, origin_y: f64, width: usize, height: usize) -> Result<Self> {
        let spec = GridSpec {
            resolution,
            origin_x,
            origin_y,
            width,
            height,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::InvalidGridSpec(format!("resolution {} must be positive", self.resolution)));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::InvalidGridSpec("non-finite origin".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGridSpec(format!(
                "dimensions must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.origin_x) / self.resolution).floor();
        let row = ((y - self.origin_y) / self.resolution).floor();
        let in_bounds = col >= 0.0 && row >= 0.0 && col < self.width as f64 && row < self.height as f64;
        in_bounds.then_some((row as usize, col as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Result<(f64, f64)> {
        if row >= self.height || col >= self.width {
            return Err(Error::CellOutOfBounds {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok((
            self.origin_x + (col as f64 + 0.5) * self.resolution,
            self.origin_y + (row as f64 + 0.5) * self.resolution,
        ))
    }

    /// Spec of the grid obtained by pooling with `factor`.
    pub fn coarsen(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::NonDivisibleFactor {
                factor,
                width: self.width,
                height: self.height,
            });
        }
        Ok(GridSpec {
            resolution: self.resolution * factor as f64,
            width: self.width / factor,
            height: self.height / factor,
            ..*self
        })
    }
}

pub fn world_to_cell(spec: &GridSpec, x: f64, y: f64) -> Option<(usize, usize)> {
    spec.world_to_cell(x, y)
}

pub fn cell_center(spec: &GridSpec, row: usize, col: usize) -> Result<(f64, f64)> {
    spec.cell_center(row, col)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    spec: GridSpec,
    channels: usize,
    values: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        BevGrid {
            spec,
            channels,
            values: vec![0.0; channels * spec.num_cells()],
        }
    }

    pub fn from_values(spec: GridSpec, channels: usize, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = channels * spec.num_cells();
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {channels} channels of {}x{}",
                values.len(),
                spec.width,
                spec.height
            )));
        }
        Ok(BevGrid { spec, channels, values })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.spec.num_cells();
        &self.values[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f64] {
        let n = self.spec.num_cells();
        &mut self.values[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[channel * self.spec.num_cells() + self.spec.index(row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let i = channel * self.spec.num_cells() + self.spec.index(row, col);
        self.values[i] = value;
    }

    /// Channel values of one cell.
    pub fn cell(&self, row: usize, col: usize) -> Vec<f64> {
        let n = self.spec.num_cells();
        let idx = self.spec.index(row, col);
        (0..self.channels).map(|c| self.values[c * n + idx]).collect()
    }

    /// Concatenates channels of grids sharing one spec.
    pub fn concat(grids: &[&BevGrid]) -> Result<BevGrid> {
        let first = grids
            .first()
            .ok_or_else(|| Error::DimensionMismatch("nothing to concatenate".into()))?;
        let mut values = Vec::new();
        let mut channels = 0;
        for g in grids {
            if g.spec != first.spec {
                return Err(Error::DimensionMismatch("grids with different specs".into()));
            }
            values.extend_from_slice(&g.values);
            channels += g.channels;
        }
        Ok(BevGrid {
            spec: first.spec,
            channels,
            values,
        })
    }

    /// Block mean over `factor × factor` cells, per channel.
    pub fn avg_pool(&self, factor: usize) -> Result<BevGrid> {
        let coarse = self.spec.coarsen(factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, cw, ch) = (self.spec.width, coarse.width, coarse.height);
        let n = self.spec.num_cells();
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = BevGrid::zeros(coarse, self.channels);
        for c in 0..self.channels {
            let src = &self.values[c * n..(c + 1) * n];
            let dst = out.plane_mut(c);
            for r in 0..ch {
                for q in 0..cw {
                    let mut sum = 0.0;
                    for dr in 0..factor {
                        let row = &src[(r * factor + dr) * w + q * factor..][..factor];
                        sum += row.iter().sum::<f64>();
                    }
                    dst[r * cw + q] = sum * inv;
                }
            }
        }
        Ok(out)
    }

    /// Copies each coarse cell into its `factor × factor` children on `target`.
    pub fn nearest_upsample(&self, factor: usize, target: &GridSpec) -> Result<BevGrid> {
        if factor == 0 || target.width != self.spec.width * factor || target.height != self.spec.height * factor {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} grid upsampled by {factor} does not give {}x{}",
                self.spec.width, self.spec.height, target.width, target.height
            )));
        }
        let n = self.spec.num_cells();
        let mut out = BevGrid::zeros(*target, self.channels);
        for c in 0..self.channels {
            let src = &self.values[c * n..(c + 1) * n];
            let dst = out.plane_mut(c);
            for row in 0..target.height {
                let src_row = &src[(row / factor) * self.spec.width..][..self.spec.width];
                let dst_row = &mut dst[row * target.width..][..target.width];
                for (col, v) in dst_row.iter_mut().enumerate() {
                    *v = src_row[col / factor];
                }
            }
        }
        Ok(out)
    }
}

pub fn avg_pool(grid: &BevGrid, factor: usize) -> Result<BevGrid> {
    grid.avg_pool(factor)
}

pub fn nearest_upsample(grid: &BevGrid, factor: usize, target: &GridSpec) -> Result<BevGrid> {
    grid.nearest_upsample(factor, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_grid(rng: &mut impl Rng, spec: GridSpec, channels: usize) -> BevGrid {
        let values = (0..channels * spec.num_cells()).map(|_| rng.random_range(-5.0..5.0)).collect();
        BevGrid::from_values(spec, channels, values).unwrap()
    }

    #[test]
    fn world_to_cell_examples() {
        let spec = GridSpec::default();
        assert_eq!(spec.world_to_cell(0.0, -25.6), Some((0, 0)));
        assert_eq!(spec.world_to_cell(25.6, 0.0), Some((128, 128)));
        assert_eq!(spec.world_to_cell(-0.01, 0.0), None);
        assert_eq!(spec.world_to_cell(51.2, 0.0), None);
        assert_eq!(spec.world_to_cell(f64::NAN, 0.0), None);
    }

    #[test]
    fn cell_center_examples() {
        let spec = GridSpec::default();
        let (x, y) = spec.cell_center(0, 0).unwrap();
        assert!((x - 0.1).abs() < 1e-12 && (y + 25.5).abs() < 1e-12);
        let unit = GridSpec::new(1.0, 0.0, 0.0, 5, 5).unwrap();
        assert_eq!(unit.cell_center(2, 3).unwrap(), (3.5, 2.5));
        assert!(spec.cell_center(256, 0).is_err());
    }

    #[test]
    fn cell_center_round_trip_exhaustive() {
        let spec = GridSpec::default();
        for row in 0..spec.height {
            for col in 0..spec.width {
                let (x, y) = spec.cell_center(row, col).unwrap();
                assert_eq!(spec.world_to_cell(x, y), Some((row, col)));
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GridSpec::new(0.0, 0.0, 0.0, 1, 1).is_err());
        assert!(GridSpec::new(0.1, 0.0, 0.0, 0, 1).is_err());
        assert!(GridSpec::new(0.1, 0.0, 0.0, 1, 1).is_ok());
    }

    #[test]
    fn avg_pool_examples() {
        let spec = GridSpec::new(1.0, 0.0, 0.0, 2, 2).unwrap();
        let g = BevGrid::from_values(spec, 1, vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        assert_eq!(g.avg_pool(1).unwrap(), g);
        let p = g.avg_pool(2).unwrap();
        assert_eq!(p.values(), &[2.0]);
        assert_eq!(p.spec().resolution, 2.0);
        assert!(matches!(g.avg_pool(3), Err(Error::NonDivisibleFactor { .. })));
    }

    #[test]
    fn avg_pool_preserves_mean() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let spec = GridSpec::new(0.5, 0.0, 0.0, 8, 8).unwrap();
        for _ in 0..20 {
            let g = random_grid(&mut rng, spec, 2);
            let p = g.avg_pool(4).unwrap();
            for c in 0..2 {
                let global: f64 = g.plane(c).iter().sum::<f64>() / 64.0;
                let pooled: f64 = p.plane(c).iter().sum::<f64>() / 4.0;
                assert!((global - pooled).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let spec = GridSpec::new(2.0, 0.0, 0.0, 1, 1).unwrap();
        let g = BevGrid::from_values(spec, 1, vec![7.0]).unwrap();
        let fine = GridSpec::new(1.0, 0.0, 0.0, 2, 2).unwrap();
        assert_eq!(g.nearest_upsample(2, &fine).unwrap().values(), &[7.0; 4]);
        assert_eq!(g.nearest_upsample(1, &spec).unwrap(), g);
        assert!(g.nearest_upsample(3, &fine).is_err());
    }

    #[test]
    fn pool_upsample_is_a_projection() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
        let spec = GridSpec::new(0.2, -1.0, 3.0, 16, 8).unwrap();
        for factor in [1, 2, 4, 8] {
            let g = random_grid(&mut rng, spec, 3);
            let once = g.avg_pool(factor).unwrap().nearest_upsample(factor, &spec).unwrap();
            let twice = once.avg_pool(factor).unwrap().nearest_upsample(factor, &spec).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
