//! Raster containers, file I/O, differential geometry on height maps and
//! the evaluation metrics.
//!
//! All rasters are row-major with row 0 at the northern edge. Planimetric
//! coordinates follow the same convention as the GeoTIFF geotransform: the
//! `origin` is the upper-left corner of the upper-left pixel, `x` grows to
//! the east (columns) and `y` grows to the north (against rows).

mod geometry;
mod io;
mod metrics;

pub use geometry::{gradient, slope, slope_within, surface_normals, Gradient, NormalField};
pub use io::{load_raster, load_roof_map, save_raster, LoadedRaster, RasterRef, RawHeader};
pub use metrics::{mae, miou, rmse, ConfusionCounts, Metrics};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of roof-type categories.
pub const NUM_CLASSES: usize = 3;

/// Dense row-major 2D container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid { rows, cols, data: vec![value; rows * cols] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "buffer of {} cells does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

impl<T: Clone> Grid<T> {
    /// Copies the `rows x cols` window whose upper-left cell is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<Self> {
        if row + rows > self.rows || col + cols > self.cols {
            return Err(Error::invalid(format!(
                "crop {rows}x{cols} at ({row},{col}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            let start = r * self.cols + col;
            data.extend_from_slice(&self.data[start..start + cols]);
        }
        Ok(Grid { rows, cols, data })
    }
}

/// Boolean raster (building footprints, vegetation masks).
pub type Mask = Grid<bool>;

/// Single-band elevation raster in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightMap {
    grid: Grid<f64>,
    gsd: f64,
    origin: (f64, f64),
    nodata: Option<f64>,
}

impl HeightMap {
    pub fn new(rows: usize, cols: usize, gsd: f64, values: Vec<f64>) -> Result<Self> {
        Self::with_nodata(rows, cols, gsd, values, None)
    }

    pub fn with_nodata(
        rows: usize,
        cols: usize,
        gsd: f64,
        values: Vec<f64>,
        nodata: Option<f64>,
    ) -> Result<Self> {
        Self::from_grid(Grid::from_vec(rows, cols, values)?, gsd, nodata)
    }

    pub fn from_grid(grid: Grid<f64>, gsd: f64, nodata: Option<f64>) -> Result<Self> {
        if grid.rows == 0 || grid.cols == 0 {
            return Err(Error::Degenerate("height map needs at least one cell".into()));
        }
        if !(gsd.is_finite() && gsd > 0.0) {
            return Err(Error::invalid(format!("gsd must be positive, got {gsd}")));
        }
        if let Some(nd) = nodata {
            if nd.is_infinite() {
                return Err(Error::invalid("nodata sentinel must not be infinite"));
            }
        }
        let map = HeightMap { grid, gsd, origin: (0.0, 0.0), nodata };
        map.check_finite()?;
        Ok(map)
    }

    pub fn filled(rows: usize, cols: usize, gsd: f64, value: f64) -> Result<Self> {
        Self::new(rows, cols, gsd, vec![value; rows * cols])
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        gsd: f64,
        f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        Self::from_grid(Grid::from_fn(rows, cols, f), gsd, None)
    }

    /// Fails on the first non-finite cell that is not flagged as nodata.
    pub fn check_finite(&self) -> Result<()> {
        for (i, &v) in self.grid.data.iter().enumerate() {
            if !v.is_finite() && !self.is_nodata_value(v) {
                return Err(Error::NonFinite { row: i / self.grid.cols, col: i % self.grid.cols });
            }
        }
        Ok(())
    }

    pub fn with_origin(mut self, x: f64, y: f64) -> Self {
        self.origin = (x, y);
        self
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    #[inline]
    pub fn gsd(&self) -> f64 {
        self.gsd
    }

    /// Upper-left corner in the local planimetric frame.
    #[inline]
    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    #[inline]
    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        *self.grid.get(row, col)
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.grid.set(row, col, value);
    }

    #[inline]
    fn is_nodata_value(&self, v: f64) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => v.is_nan(),
            Some(nd) => v == nd,
            None => false,
        }
    }

    /// A cell is valid when it is finite and not the nodata sentinel.
    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        let v = self.get(row, col);
        v.is_finite() && !self.is_nodata_value(v)
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.is_valid(row, col).then(|| self.get(row, col))
    }

    pub fn values(&self) -> &[f64] {
        self.grid.as_slice()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.grid.as_mut_slice()
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.grid
    }

    /// Value written to cells that carry no height.
    pub fn nodata_fill(&self) -> f64 {
        self.nodata.unwrap_or(f64::NAN)
    }

    pub fn valid_mask(&self) -> Mask {
        Grid::from_fn(self.rows(), self.cols(), |r, c| self.is_valid(r, c))
    }

    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<HeightMap> {
        let grid = self.grid.crop(row, col, rows, cols)?;
        let origin = (
            self.origin.0 + col as f64 * self.gsd,
            self.origin.1 - row as f64 * self.gsd,
        );
        Ok(HeightMap { grid, gsd: self.gsd, origin, nodata: self.nodata })
    }

    /// Same geometry, new values. Used by filters that keep the frame.
    pub fn with_values(&self, values: Vec<f64>) -> Result<HeightMap> {
        let grid = Grid::from_vec(self.rows(), self.cols(), values)?;
        let map = HeightMap { grid, gsd: self.gsd, origin: self.origin, nodata: self.nodata };
        map.check_finite()?;
        Ok(map)
    }

    pub fn ensure_same_shape(&self, other: &HeightMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch { expected: self.shape(), found: other.shape() });
        }
        Ok(())
    }

    pub fn min_valid(&self) -> Option<f64> {
        self.valid_values().fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v))))
    }

    pub fn max_valid(&self) -> Option<f64> {
        self.valid_values().fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.grid.data.iter().copied().filter(move |v| v.is_finite() && !self.is_nodata_value(*v))
    }

    /// Planimetric coordinates of a pixel center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.gsd,
            self.origin.1 - (row as f64 + 0.5) * self.gsd,
        )
    }
}

/// Roof-type category of a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum RoofClass {
    NoBuilding = 0,
    Flat = 1,
    Sloped = 2,
}

impl RoofClass {
    pub fn from_label(label: u8) -> Option<RoofClass> {
        match label {
            0 => Some(RoofClass::NoBuilding),
            1 => Some(RoofClass::Flat),
            2 => Some(RoofClass::Sloped),
            _ => None,
        }
    }
}

/// Integer raster with labels in {0: no building, 1: flat roof, 2: sloped roof}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoofClassMap {
    grid: Grid<u8>,
}

impl RoofClassMap {
    pub fn new(rows: usize, cols: usize, labels: Vec<u8>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(rows, cols, labels)?)
    }

    pub fn from_grid(grid: Grid<u8>) -> Result<Self> {
        if grid.rows == 0 || grid.cols == 0 {
            return Err(Error::Degenerate("roof map needs at least one cell".into()));
        }
        for (i, &l) in grid.data.iter().enumerate() {
            if RoofClass::from_label(l).is_none() {
                return Err(Error::InvalidLabel { label: l, row: i / grid.cols, col: i % grid.cols });
            }
        }
        Ok(RoofClassMap { grid })
    }

    pub fn filled(rows: usize, cols: usize, class: RoofClass) -> Self {
        RoofClassMap { grid: Grid::filled(rows, cols, class as u8) }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        *self.grid.get(row, col)
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: RoofClass) {
        self.grid.set(row, col, class as u8);
    }

    pub fn labels(&self) -> &[u8] {
        self.grid.as_slice()
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.grid
    }

    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<RoofClassMap> {
        Ok(RoofClassMap { grid: self.grid.crop(row, col, rows, cols)? })
    }
}
