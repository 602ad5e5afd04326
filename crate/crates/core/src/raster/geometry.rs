//! Differential geometry on height maps.
//!
//! Gradients are taken in image axes: `dx` along columns (east) and `dy`
//! along rows (south), both in meters per meter. Interior pixels use central
//! differences, border pixels one-sided differences.

use super::{Grid, HeightMap, Mask};
use crate::error::{Error, Result};

/// Height derivatives of one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gradient {
    pub dx: f64,
    pub dy: f64,
}

impl Gradient {
    pub fn magnitude(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

fn require_2d(map: &HeightMap, what: &str) -> Result<()> {
    if map.rows() < 2 || map.cols() < 2 {
        return Err(Error::Degenerate(format!(
            "{what} needs at least 2x2 cells, got {}x{}",
            map.rows(),
            map.cols()
        )));
    }
    Ok(())
}

/// Finite difference along one axis at index `i` of `n`, or `None` when a
/// required sample is nodata.
#[inline]
fn axis_diff(i: usize, n: usize, sample: impl Fn(usize) -> Option<f64>) -> Option<f64> {
    if i == 0 {
        Some(sample(1)? - sample(0)?)
    } else if i == n - 1 {
        Some(sample(n - 1)? - sample(n - 2)?)
    } else {
        Some((sample(i + 1)? - sample(i - 1)?) * 0.5)
    }
}

/// Per-pixel height gradient; `None` where the stencil touches nodata.
pub fn gradient(map: &HeightMap) -> Result<Grid<Option<Gradient>>> {
    require_2d(map, "gradient")?;
    let (rows, cols) = map.shape();
    let inv = 1.0 / map.gsd();
    Ok(Grid::from_fn(rows, cols, |r, c| {
        map.value(r, c)?;
        let dx = axis_diff(c, cols, |k| map.value(r, k))?;
        let dy = axis_diff(r, rows, |k| map.value(k, c))?;
        Some(Gradient { dx: dx * inv, dy: dy * inv })
    }))
}

/// Per-pixel unit surface normals.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    normals: Grid<Option<[f64; 3]>>,
}

impl NormalField {
    pub fn from_grid(normals: Grid<Option<[f64; 3]>>) -> Self {
        NormalField { normals }
    }

    pub fn rows(&self) -> usize {
        self.normals.rows()
    }

    pub fn cols(&self) -> usize {
        self.normals.cols()
    }

    /// `None` marks nodata.
    pub fn get(&self, row: usize, col: usize) -> Option<[f64; 3]> {
        *self.normals.get(row, col)
    }

    pub fn grid(&self) -> &Grid<Option<[f64; 3]>> {
        &self.normals
    }
}

/// Unit normal of the surface `z = h(x, y)` for a given gradient.
#[inline]
pub(crate) fn normal_from_gradient(g: Gradient) -> [f64; 3] {
    let norm = (g.dx * g.dx + g.dy * g.dy + 1.0).sqrt();
    [-g.dx / norm, -g.dy / norm, 1.0 / norm]
}

/// Normals of `(-dh/dx, -dh/dy, 1)`, normalized.
pub fn surface_normals(map: &HeightMap) -> Result<NormalField> {
    let grad = gradient(map)?;
    Ok(NormalField { normals: grad.map(|g| g.map(normal_from_gradient)) })
}

const NEIGHBORS: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Slope in degrees: the arctangent of the maximum rate of height change
/// between a pixel and its valid 8-neighbors. `NaN` marks nodata.
pub fn slope(map: &HeightMap) -> Result<Grid<f64>> {
    slope_impl(map, None)
}

/// Like [`slope`], but only neighbors inside `mask` take part. Pixels outside
/// the mask get slope 0. Used to keep walls out of roof slopes.
pub fn slope_within(map: &HeightMap, mask: &Mask) -> Result<Grid<f64>> {
    if mask.shape() != map.shape() {
        return Err(Error::ShapeMismatch { expected: map.shape(), found: mask.shape() });
    }
    slope_impl(map, Some(mask))
}

fn slope_impl(map: &HeightMap, mask: Option<&Mask>) -> Result<Grid<f64>> {
    require_2d(map, "slope")?;
    let (rows, cols) = map.shape();
    let gsd = map.gsd();
    let inside = |r: usize, c: usize| mask.is_none_or(|m| *m.get(r, c));
    Ok(Grid::from_fn(rows, cols, |r, c| {
        let Some(h) = map.value(r, c) else {
            return f64::NAN;
        };
        if !inside(r, c) {
            return 0.0;
        }
        let mut rate: f64 = 0.0;
        for (dr, dc) in NEIGHBORS {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if !inside(nr, nc) {
                continue;
            }
            if let Some(hn) = map.value(nr, nc) {
                let dist = if dr != 0 && dc != 0 { gsd * std::f64::consts::SQRT_2 } else { gsd };
                rate = rate.max((hn - h).abs() / dist);
            }
        }
        rate.atan().to_degrees()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn constant_map_has_vertical_normals_and_zero_slope() {
        let m = HeightMap::filled(5, 4, 0.5, 12.0).unwrap();
        let n = surface_normals(&m).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                assert_eq!(n.get(r, c), Some([0.0, 0.0, 1.0]));
            }
        }
        assert!(slope(&m).unwrap().as_slice().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn ramp_in_x_tilts_normals_by_45_degrees() {
        let m = HeightMap::from_fn(6, 6, 1.0, |_, c| c as f64).unwrap();
        let n = surface_normals(&m).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for r in 0..6 {
            for c in 0..6 {
                let v = n.get(r, c).unwrap();
                assert!(approx(v[0], -s, 1e-12) && approx(v[1], 0.0, 1e-12) && approx(v[2], s, 1e-12));
            }
        }
    }

    #[test]
    fn slope_of_unit_gradient_planes_is_45() {
        let gsd = 0.5;
        let axis = HeightMap::from_fn(7, 7, gsd, |r, _| r as f64 * gsd).unwrap();
        let diag = HeightMap::from_fn(7, 7, gsd, |r, c| (r + c) as f64 * gsd / 2f64.sqrt()).unwrap();
        for m in [axis, diag] {
            let s = slope(&m).unwrap();
            for r in 1..6 {
                for c in 1..6 {
                    assert!(approx(*s.get(r, c), 45.0, 1e-9), "{}", s.get(r, c));
                }
            }
        }
    }

    #[test]
    fn nodata_propagates() {
        let mut v = vec![1.0; 9];
        v[4] = -1.0;
        let m = HeightMap::with_nodata(3, 3, 1.0, v, Some(-1.0)).unwrap();
        let n = surface_normals(&m).unwrap();
        assert_eq!(n.get(1, 1), None);
        // the one-sided row difference at the border reaches (1,1)
        assert_eq!(n.get(0, 1), None);
        assert!(slope(&m).unwrap().get(1, 1).is_nan());
        assert_eq!(*slope(&m).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn degenerate_input_is_rejected() {
        let m = HeightMap::filled(1, 5, 1.0, 0.0).unwrap();
        assert!(matches!(surface_normals(&m), Err(Error::Degenerate(_))));
        assert!(matches!(slope(&m), Err(Error::Degenerate(_))));
    }

    #[test]
    fn masked_slope_ignores_outside_neighbors() {
        // A flat 10 m box on 0 m ground.
        let m = HeightMap::from_fn(6, 6, 1.0, |r, c| if (1..5).contains(&r) && (1..5).contains(&c) { 10.0 } else { 0.0 })
            .unwrap();
        let mask = Grid::from_fn(6, 6, |r, c| (1..5).contains(&r) && (1..5).contains(&c));
        let s = slope_within(&m, &mask).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
        assert!(*slope(&m).unwrap().get(1, 1) > 80.0);
    }
}
