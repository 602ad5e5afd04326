//! Target DSM and roof-type labels from roof polygons over a terrain model.
//!
//! Roof faces are triangulated, rasterized onto the output grid by
//! barycentric interpolation, and composited over the DEM. Roof classes come
//! from the slope of the composite inside the building footprint.

mod rasterize;
mod triangulate;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Grid, HeightMap, Mask, RoofClass, RoofClassMap};

pub use rasterize::{rasterize_target_dsm, GridSpec};
pub use triangulate::triangulate_roofs;

/// Default slope separating flat from sloped roofs, in degrees.
pub const DEFAULT_SLOPE_THRESHOLD: f64 = 10.0;

/// Aspect value for pixels without a defined downslope direction.
pub const ASPECT_UNDEFINED: f64 = -1.0;

/// Gradient magnitude below which aspect is undefined.
const FLAT_GRADIENT: f64 = 1e-12;

/// Planar roof faces of one building, coordinates in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoofPolygon {
    pub building_id: String,
    pub rings: Vec<Vec<[f64; 3]>>,
}

/// The polygon soup read from and written to roof JSON files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoofPolygonSet {
    pub polygons: Vec<RoofPolygon>,
}

impl RoofPolygonSet {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Total horizontal area of all rings.
    pub fn footprint_area(&self) -> f64 {
        self.polygons
            .iter()
            .flat_map(|p| &p.rings)
            .map(|ring| shoelace_area(ring).abs())
            .sum()
    }
}

/// Signed horizontal area, positive for counter-clockwise rings.
pub fn shoelace_area(ring: &[[f64; 3]]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

/// One roof triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Triangle {
    pub building_id: String,
    pub vertices: [[f64; 3]; 3],
}

impl Triangle {
    /// Horizontal area.
    pub fn area(&self) -> f64 {
        let [a, b, c] = self.vertices;
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleSet {
    pub triangles: Vec<Triangle>,
}

impl TriangleSet {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(Triangle::area).sum()
    }
}

/// Label 0 off the footprint; on it, 1 below `slope_threshold` degrees and
/// 2 otherwise. Slope only looks at footprint neighbors, so walls do not
/// leak into roof edges.
pub fn classify_roofs(target: &HeightMap, footprint: &Mask, slope_threshold: f64) -> Result<RoofClassMap> {
    if footprint.shape() != target.shape() {
        return Err(Error::ShapeMismatch { expected: target.shape(), found: footprint.shape() });
    }
    if !slope_threshold.is_finite() {
        return Err(Error::invalid("slope threshold must be finite"));
    }
    let (rows, cols) = target.shape();
    if !footprint.as_slice().iter().any(|&f| f) {
        return Ok(RoofClassMap::filled(rows, cols, RoofClass::NoBuilding));
    }
    let slope = if rows >= 2 && cols >= 2 {
        raster::slope_within(target, footprint)?
    } else {
        Grid::filled(rows, cols, 0.0)
    };
    let labels = Grid::from_fn(rows, cols, |r, c| {
        let class = if !*footprint.get(r, c) {
            RoofClass::NoBuilding
        } else if *slope.get(r, c) >= slope_threshold {
            RoofClass::Sloped
        } else {
            RoofClass::Flat
        };
        class as u8
    });
    RoofClassMap::from_grid(labels)
}

/// Downslope direction in degrees clockwise from north. Flat pixels get
/// [`ASPECT_UNDEFINED`], nodata pixels `NaN`.
pub fn aspect(map: &HeightMap) -> Result<Grid<f64>> {
    let grad = raster::gradient(map)?;
    Ok(grad.map(|g| match g {
        None => f64::NAN,
        Some(g) if g.magnitude() <= FLAT_GRADIENT => ASPECT_UNDEFINED,
        Some(g) => {
            // rows grow southward, so the downslope north component is +dy
            let deg = (-g.dx).atan2(g.dy).to_degrees();
            if deg < 0.0 {
                deg + 360.0
            } else {
                deg
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aspect_of_cardinal_planes() {
        let east = HeightMap::from_fn(5, 5, 1.0, |_, c| -(c as f64)).unwrap();
        let north = HeightMap::from_fn(5, 5, 1.0, |r, _| r as f64).unwrap();
        let south = HeightMap::from_fn(5, 5, 1.0, |r, _| -(r as f64)).unwrap();
        let west = HeightMap::from_fn(5, 5, 1.0, |_, c| c as f64).unwrap();
        for (m, want) in [(east, 90.0), (north, 0.0), (south, 180.0), (west, 270.0)] {
            let a = aspect(&m).unwrap();
            for r in 1..4 {
                for c in 1..4 {
                    assert!((a.get(r, c) - want).abs() < 1e-6, "{} vs {want}", a.get(r, c));
                }
            }
        }
    }

    #[test]
    fn aspect_undefined_on_flat() {
        let m = HeightMap::filled(3, 3, 1.0, 4.0).unwrap();
        assert!(aspect(&m).unwrap().as_slice().iter().all(|&a| a == ASPECT_UNDEFINED));
        let thin = HeightMap::filled(1, 3, 1.0, 4.0).unwrap();
        assert!(matches!(aspect(&thin), Err(Error::Degenerate(_))));
    }

    #[test]
    fn classify_flat_box_and_empty_footprint() {
        let inside = |r: usize, c: usize| (2..8).contains(&r) && (3..9).contains(&c);
        let target = HeightMap::from_fn(10, 12, 0.5, |r, c| if inside(r, c) { 9.0 } else { 1.0 }).unwrap();
        let footprint = Grid::from_fn(10, 12, inside);
        let map = classify_roofs(&target, &footprint, DEFAULT_SLOPE_THRESHOLD).unwrap();
        for r in 0..10 {
            for c in 0..12 {
                assert_eq!(map.get(r, c), if inside(r, c) { 1 } else { 0 });
            }
        }
        let none = Grid::filled(10, 12, false);
        let map = classify_roofs(&target, &none, DEFAULT_SLOPE_THRESHOLD).unwrap();
        assert!(map.labels().iter().all(|&l| l == 0));
        let wrong = Grid::filled(3, 3, false);
        assert!(matches!(classify_roofs(&target, &wrong, 10.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn classify_gabled_roof() {
        let pitch = 30f64.to_radians().tan();
        let gsd = 0.5;
        // ridge along rows at column 10, eaves at columns 2 and 18
        let inside = |r: usize, c: usize| (2..14).contains(&r) && (2..19).contains(&c);
        let target = HeightMap::from_fn(16, 21, gsd, |r, c| {
            if inside(r, c) {
                10.0 - pitch * (c as f64 - 10.0).abs() * gsd
            } else {
                0.0
            }
        })
        .unwrap();
        let footprint = Grid::from_fn(16, 21, inside);
        let map = classify_roofs(&target, &footprint, 10.0).unwrap();
        for r in 2..14 {
            for c in 2..19 {
                assert_eq!(map.get(r, c), 2, "({r},{c})");
            }
        }
    }

    #[test]
    fn polygon_json_round_trip() {
        let text = r#"[{"building_id":"b1","rings":[[[0,0,5],[4,0,5],[4,3,5]]]}]"#;
        let set = RoofPolygonSet::from_json(text).unwrap();
        assert_eq!(set.polygons[0].building_id, "b1");
        assert_eq!(set.footprint_area(), 6.0);
        assert_eq!(RoofPolygonSet::from_json(&set.to_json().unwrap()).unwrap(), set);
    }
}
