//! Hand-crafted vegetation filter: flag pixels whose surface normals scatter,
//! clean the flags morphologically and replace flagged heights by a local
//! minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{surface_normals, Grid, HeightMap, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    /// Side of the square window for normal scatter (odd).
    pub variance_window: usize,
    /// Spherical variance above which a pixel counts as vegetation.
    pub variance_threshold: f64,
    pub open_radius: usize,
    pub close_radius: usize,
    /// Side of the square window searched for fill heights (odd).
    pub fill_window: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams { variance_window: 7, variance_threshold: 0.15, open_radius: 1, close_radius: 2, fill_window: 15 }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("variance_window", self.variance_window), ("fill_window", self.fill_window)] {
            if w == 0 || w % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and at least 1, got {w}")));
            }
        }
        if !(self.variance_threshold.is_finite() && self.variance_threshold > 0.0) {
            return Err(Error::Config("variance_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// `1 - |mean unit normal|` over the window centered on each pixel, clipped
/// at the raster border. Nodata pixels and their normals are skipped; a
/// window without normals gives 0.
pub fn spherical_variance(dsm: &HeightMap, window: usize) -> Result<Grid<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    let (rows, cols) = dsm.shape();
    if rows < window || cols < window {
        return Err(Error::invalid(format!("raster {rows}x{cols} is smaller than the {window}px window")));
    }
    let normals = surface_normals(dsm)?;
    // summed-area tables over the three normal components and the count
    let (w1, h1) = (cols + 1, rows + 1);
    let mut sat = vec![[0.0f64; 4]; w1 * h1];
    for r in 0..rows {
        for c in 0..cols {
            let v = normals.get(r, c).map_or([0.0; 4], |n| [n[0], n[1], n[2], 1.0]);
            for k in 0..4 {
                sat[(r + 1) * w1 + c + 1][k] =
                    v[k] + sat[r * w1 + c + 1][k] + sat[(r + 1) * w1 + c][k] - sat[r * w1 + c][k];
            }
        }
    }
    let half = window / 2;
    Ok(Grid::from_fn(rows, cols, |r, c| {
        let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(rows));
        let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(cols));
        let s: [f64; 4] = std::array::from_fn(|k| sat[r1 * w1 + c1][k] - sat[r0 * w1 + c1][k] - sat[r1 * w1 + c0][k] + sat[r0 * w1 + c0][k]);
        if s[3] < 0.5 {
            return 0.0;
        }
        let m = [s[0] / s[3], s[1] / s[3], s[2] / s[3]];
        (1.0 - (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt()).max(0.0)
    }))
}

/// Pixels whose normal scatter exceeds the threshold.
pub fn vegetation_mask(dsm: &HeightMap, params: &BaselineParams) -> Result<Mask> {
    params.validate()?;
    let var = spherical_variance(dsm, params.variance_window)?;
    Ok(var.map(|&v| v > params.variance_threshold))
}

/// Square-window min (`erode`) or max filter on a mask; the window is
/// clipped at the border.
fn morph(mask: &Mask, radius: usize, erode: bool) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (rows, cols) = mask.shape();
    // separable: rows then columns
    let pass = |src: &Mask, horizontal: bool| {
        Grid::from_fn(rows, cols, |r, c| {
            let (lo, hi, fixed) = if horizontal {
                (c.saturating_sub(radius), (c + radius + 1).min(cols), r)
            } else {
                (r.saturating_sub(radius), (r + radius + 1).min(rows), c)
            };
            let at = |i: usize| if horizontal { *src.get(fixed, i) } else { *src.get(i, fixed) };
            if erode {
                (lo..hi).all(at)
            } else {
                (lo..hi).any(at)
            }
        })
    };
    pass(&pass(mask, true), false)
}

pub fn erode(mask: &Mask, radius: usize) -> Mask {
    morph(mask, radius, true)
}

pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    morph(mask, radius, false)
}

/// Opening with `open_radius`, then closing with `close_radius`, both with
/// square structuring elements.
pub fn morph_cleanup(mask: &Mask, open_radius: usize, close_radius: usize) -> Mask {
    let opened = dilate(&erode(mask, open_radius), open_radius);
    erode(&dilate(&opened, close_radius), close_radius)
}

/// Replaces masked pixels by the lowest unmasked valid height in the
/// surrounding window. Windows without candidates are enlarged to twice and
/// four times their half-size; pixels still without one become nodata.
pub fn fill_masked(dsm: &HeightMap, mask: &Mask, fill_window: usize) -> Result<HeightMap> {
    if fill_window == 0 || fill_window % 2 == 0 {
        return Err(Error::invalid(format!("fill window must be odd, got {fill_window}")));
    }
    if mask.shape() != dsm.shape() {
        return Err(Error::ShapeMismatch { expected: dsm.shape(), found: mask.shape() });
    }
    let (rows, cols) = dsm.shape();
    let source = |r: usize, c: usize| if *mask.get(r, c) { None } else { dsm.value(r, c) };
    let window_min = |r: usize, c: usize, half: usize| {
        let mut best: Option<f64> = None;
        for rr in r.saturating_sub(half)..(r + half + 1).min(rows) {
            for cc in c.saturating_sub(half)..(c + half + 1).min(cols) {
                if let Some(v) = source(rr, cc) {
                    best = Some(best.map_or(v, |b| b.min(v)));
                }
            }
        }
        best
    };
    let half = fill_window / 2;
    let mut unfilled = 0usize;
    let mut values = dsm.values().to_vec();
    for r in 0..rows {
        for c in 0..cols {
            if !*mask.get(r, c) {
                continue;
            }
            let filled = [half, 2 * half, 4 * half].iter().find_map(|&h| window_min(r, c, h));
            values[r * cols + c] = filled.unwrap_or_else(|| {
                unfilled += 1;
                dsm.nodata_fill()
            });
        }
    }
    if unfilled == 0 {
        return dsm.with_values(values);
    }
    log::warn!("{unfilled} masked pixels had no fill candidate and became nodata");
    let nodata = dsm.nodata().unwrap_or(f64::NAN);
    let (x, y) = dsm.origin();
    Ok(HeightMap::with_nodata(rows, cols, dsm.gsd(), values, Some(nodata))?.with_origin(x, y))
}

/// The whole filter: mask, clean, fill.
pub fn baseline_filter(dsm: &HeightMap, params: &BaselineParams) -> Result<HeightMap> {
    let mask = vegetation_mask(dsm, params)?;
    let cleaned = morph_cleanup(&mask, params.open_radius, params.close_radius);
    fill_masked(dsm, &cleaned, params.fill_window)
}

/// Candidate values searched by [`tune_baseline`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub variance_window: Vec<usize>,
    pub variance_threshold: Vec<f64>,
    pub open_radius: Vec<usize>,
    pub close_radius: Vec<usize>,
    pub fill_window: Vec<usize>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            variance_window: vec![5, 7, 9, 11],
            variance_threshold: vec![0.1, 0.15, 0.25, 0.35, 0.5],
            open_radius: vec![1, 2, 3],
            close_radius: vec![2],
            fill_window: vec![9, 15, 21],
        }
    }
}

/// Exhaustive search for the parameters with the lowest mean RMSE over
/// `(stereo, reference)` pairs. Ties keep the earlier candidate.
pub fn tune_baseline(pairs: &[(HeightMap, HeightMap)], grid: &TuningGrid) -> Result<(BaselineParams, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("tuning needs at least one raster pair"));
    }
    let mut best: Option<(BaselineParams, f64)> = None;
    for &variance_window in &grid.variance_window {
        for &variance_threshold in &grid.variance_threshold {
            for &open_radius in &grid.open_radius {
                for &close_radius in &grid.close_radius {
                    for &fill_window in &grid.fill_window {
                        let p = BaselineParams { variance_window, variance_threshold, open_radius, close_radius, fill_window };
                        let mut sum = 0.0;
                        for (stereo, reference) in pairs {
                            sum += crate::raster::rmse(&baseline_filter(stereo, &p)?, reference)?;
                        }
                        let score = sum / pairs.len() as f64;
                        if best.is_none_or(|(_, b)| score < b) {
                            best = Some((p, score));
                        }
                    }
                }
            }
        }
    }
    best.ok_or_else(|| Error::invalid("empty tuning grid"))
}
