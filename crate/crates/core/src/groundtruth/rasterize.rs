use serde::{Deserialize, Serialize};

use super::TriangleSet;
use crate::error::{Error, Result};
use crate::raster::{Grid, HeightMap, Mask};

/// Output raster geometry. `origin` is the upper-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub gsd: f64,
    pub origin: (f64, f64),
}

impl GridSpec {
    pub fn of(map: &HeightMap) -> Self {
        GridSpec { rows: map.rows(), cols: map.cols(), gsd: map.gsd(), origin: map.origin() }
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Grid("grid must have at least one row and column".into()));
        }
        if !(self.gsd.is_finite() && self.gsd > 0.0) {
            return Err(Error::Grid(format!("ground sampling distance must be positive, got {}", self.gsd)));
        }
        if !(self.origin.0.is_finite() && self.origin.1.is_finite()) {
            return Err(Error::Grid("origin must be finite".into()));
        }
        Ok(())
    }
}

/// Relative slack when checking that the DEM covers the grid.
const COVER_EPS: f64 = 1e-9;

/// Renders roof triangles onto `grid` and fills everything else from the DEM.
///
/// A pixel belongs to a triangle when its center lies inside it; centers on
/// a shared edge go to exactly one side. Where triangles overlap the highest
/// surface wins. DEM values are sampled at the DEM pixel containing each
/// output pixel center.
pub fn rasterize_target_dsm(tris: &TriangleSet, dem: &HeightMap, grid: GridSpec) -> Result<(HeightMap, Mask)> {
    grid.validate()?;
    let (dx0, dy0) = dem.origin();
    let (gx0, gy0) = grid.origin;
    let dem_w = dem.cols() as f64 * dem.gsd();
    let dem_h = dem.rows() as f64 * dem.gsd();
    let grid_w = grid.cols as f64 * grid.gsd;
    let grid_h = grid.rows as f64 * grid.gsd;
    let slack = COVER_EPS * (dem_w.max(dem_h) + dx0.abs().max(dy0.abs())).max(1.0);
    if gx0 < dx0 - slack || gy0 > dy0 + slack || gx0 + grid_w > dx0 + dem_w + slack || gy0 - grid_h < dy0 - dem_h - slack {
        return Err(Error::Grid("grid extends beyond the DEM".into()));
    }

    let same_geometry = GridSpec::of(dem) == grid;
    let mut heights = Grid::from_fn(grid.rows, grid.cols, |r, c| {
        if same_geometry {
            return dem.get(r, c);
        }
        let x = gx0 + (c as f64 + 0.5) * grid.gsd;
        let y = gy0 - (r as f64 + 0.5) * grid.gsd;
        let dc = (((x - dx0) / dem.gsd()).floor().max(0.0) as usize).min(dem.cols() - 1);
        let dr = (((dy0 - y) / dem.gsd()).floor().max(0.0) as usize).min(dem.rows() - 1);
        dem.get(dr, dc)
    });
    let mut footprint = Grid::filled(grid.rows, grid.cols, false);
    let mut roof: Grid<f64> = Grid::filled(grid.rows, grid.cols, f64::NEG_INFINITY);

    for tri in &tris.triangles {
        // pixel space: column axis east, row axis south, centers at +0.5
        let p = tri.vertices.map(|v| [(v[0] - gx0) / grid.gsd, (gy0 - v[1]) / grid.gsd, v[2]]);
        let doubled = edge(p[0], p[1], p[2]);
        if doubled == 0.0 || !doubled.is_finite() {
            continue;
        }
        let p = if doubled > 0.0 { p } else { [p[0], p[2], p[1]] };
        let (lo_x, hi_x) = (p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min), p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max));
        let (lo_y, hi_y) = (p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min), p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max));
        let c0 = (lo_x - 0.5).ceil().max(0.0) as usize;
        let r0 = (lo_y - 0.5).ceil().max(0.0) as usize;
        if hi_x < 0.5 || hi_y < 0.5 {
            continue;
        }
        let c1 = ((hi_x - 0.5).floor() as usize).min(grid.cols - 1);
        let r1 = ((hi_y - 0.5).floor() as usize).min(grid.rows - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let q = [c as f64 + 0.5, r as f64 + 0.5, 0.0];
                let w0 = owned_edge(p[1], p[2], q);
                let w1 = owned_edge(p[2], p[0], q);
                let w2 = owned_edge(p[0], p[1], q);
                let (Some(w0), Some(w1), Some(w2)) = (w0, w1, w2) else {
                    continue;
                };
                let sum = w0 + w1 + w2;
                let z = (w0 * p[0][2] + w1 * p[1][2] + w2 * p[2][2]) / sum;
                let cell = roof.get_mut(r, c);
                if z > *cell {
                    *cell = z;
                }
                footprint.set(r, c, true);
            }
        }
    }
    for ((h, &z), &f) in heights.as_mut_slice().iter_mut().zip(roof.as_slice()).zip(footprint.as_slice()) {
        if f {
            *h = z;
        }
    }
    let map = HeightMap::from_grid(heights, grid.gsd, dem.nodata())?.with_origin(gx0, gy0);
    Ok((map, footprint))
}

/// Twice the signed area of `abq`, positive when `q` is left of `a -> b` in
/// pixel space (clockwise on the ground).
#[inline]
fn edge(a: [f64; 3], b: [f64; 3], q: [f64; 3]) -> f64 {
    (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
}

/// Edge weight of `q` for directed edge `a -> b`, or `None` when `q` is
/// outside. Evaluated from a canonical endpoint order so the two triangles
/// sharing an edge see exactly negated values, and the half-open rule lets
/// exactly one of them claim centers on the edge.
#[inline]
fn owned_edge(a: [f64; 3], b: [f64; 3], q: [f64; 3]) -> Option<f64> {
    let forward = (a[0], a[1]) < (b[0], b[1]);
    let e = if forward { edge(a, b, q) } else { -edge(b, a, q) };
    if e > 0.0 {
        return Some(e);
    }
    if e < 0.0 {
        return None;
    }
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    (dy > 0.0 || (dy == 0.0 && dx < 0.0)).then_some(0.0)
}
