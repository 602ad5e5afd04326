//! Procedural city scenes: a clean target DSM with rectangular buildings on
//! rolling terrain, and a degraded "stereo" version with noise, blur and
//! tree canopies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::{
    classify_roofs, rasterize_target_dsm, triangulate_roofs, GridSpec, RoofPolygon, RoofPolygonSet,
    DEFAULT_SLOPE_THRESHOLD,
};
use crate::raster::{Grid, HeightMap, Mask, RoofClass, RoofClassMap};

/// Placement attempts per requested building.
const PLACEMENT_RETRIES: usize = 64;
/// Minimum free pixels between two buildings and between a building and
/// the scene border.
const BUILDING_GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub gsd: f64,
    pub building_count: usize,
    pub flat_fraction: f64,
    /// Gabled roof pitch in degrees, `[lo, hi]`.
    pub roof_pitch_range: [f64; 2],
    /// Side lengths of building footprints in meters.
    pub building_size_range: [f64; 2],
    /// Eave height above terrain in meters.
    pub building_height_range: [f64; 2],
    pub tree_count: usize,
    pub tree_height_range: [f64; 2],
    pub tree_radius_range: [f64; 2],
    pub noise_sigma: f64,
    /// Standard deviation of the Gaussian blur, in pixels.
    pub blur_radius: f64,
    pub terrain_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            rows: 512,
            cols: 512,
            gsd: 0.5,
            building_count: 70,
            flat_fraction: 0.5,
            roof_pitch_range: [25.0, 45.0],
            building_size_range: [8.0, 22.0],
            building_height_range: [4.0, 16.0],
            tree_count: 160,
            tree_height_range: [3.0, 15.0],
            tree_radius_range: [2.0, 8.0],
            noise_sigma: 0.5,
            blur_radius: 1.5,
            terrain_amplitude: 4.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("scene: {msg}")));
        if self.rows == 0 || self.cols == 0 {
            return bad("extent must be at least 1x1");
        }
        if !(self.gsd.is_finite() && self.gsd > 0.0) {
            return bad("gsd must be positive");
        }
        if !(0.0..=1.0).contains(&self.flat_fraction) {
            return bad("flat_fraction must lie in [0, 1]");
        }
        for (name, [lo, hi]) in [
            ("roof_pitch_range", self.roof_pitch_range),
            ("building_size_range", self.building_size_range),
            ("building_height_range", self.building_height_range),
            ("tree_height_range", self.tree_height_range),
            ("tree_radius_range", self.tree_radius_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return bad(&format!("{name} must be a finite non-negative [lo, hi]"));
            }
        }
        if self.roof_pitch_range[1] >= 90.0 {
            return bad("roof pitch must stay below 90 degrees");
        }
        if self.building_size_range[0] <= 0.0 || self.tree_height_range[0] <= 0.0 || self.tree_radius_range[0] <= 0.0 {
            return bad("building sizes, tree heights and tree radii must be positive");
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("blur_radius", self.blur_radius),
            ("terrain_amplitude", self.terrain_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// One placed building, in pixel coordinates (end-exclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub id: String,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub roof: RoofClass,
    pub eave: f64,
    pub ridge: f64,
}

impl Building {
    /// Whether the ridge runs east-west (along columns).
    pub fn ridge_along_cols(&self) -> bool {
        self.cols.1 - self.cols.0 >= self.rows.1 - self.rows.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub stereo: HeightMap,
    pub target: HeightMap,
    pub roof: RoofClassMap,
    pub polygons: RoofPolygonSet,
    pub terrain: HeightMap,
    pub footprint: Mask,
    /// Cells raised by a tree canopy.
    pub canopy: Mask,
    pub buildings: Vec<Building>,
    /// Requested buildings that could not be placed.
    pub skipped_buildings: usize,
}

/// Builds one scene; identical specs give bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols, gsd) = (spec.rows, spec.cols, spec.gsd);
    let top = rows as f64 * gsd;

    let terrain = terrain(spec, &mut rng)?.with_origin(0.0, top);
    let buildings = place_buildings(spec, &terrain, &mut rng);
    let skipped_buildings = spec.building_count - buildings.len();
    if skipped_buildings > 0 {
        log::warn!("placed {} of {} buildings", buildings.len(), spec.building_count);
    }
    let polygons = RoofPolygonSet { polygons: buildings.iter().map(|b| roof_polygon(b, gsd, top)).collect() };
    let triangles = triangulate_roofs(&polygons)?;
    let (target, footprint) = rasterize_target_dsm(&triangles, &terrain, GridSpec::of(&terrain))?;
    let roof = classify_roofs(&target, &footprint, DEFAULT_SLOPE_THRESHOLD)?;

    let mut stereo = target.values().to_vec();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        stereo.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    if spec.blur_radius > 0.0 {
        stereo = gaussian_blur(&stereo, rows, cols, spec.blur_radius);
    }
    let canopy_heights = tree_canopies(spec, &footprint, &mut rng);
    for (v, t) in stereo.iter_mut().zip(canopy_heights.as_slice()) {
        *v += t;
    }
    let canopy = canopy_heights.map(|&t| t > 0.0);
    let stereo = target.with_values(stereo)?;

    Ok(Scene { stereo, target, roof, polygons, terrain, footprint, canopy, buildings, skipped_buildings })
}

fn terrain(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<HeightMap> {
    let extent = spec.rows.max(spec.cols) as f64 * spec.gsd;
    // a few long-wavelength waves, wavelengths between 1/2 and 2 scene extents
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let wavelength = extent * rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            (k * theta.cos(), k * theta.sin(), phase, rng.random_range(0.5..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let amp = spec.terrain_amplitude;
    HeightMap::from_fn(spec.rows, spec.cols, spec.gsd, |r, c| {
        let (x, y) = ((c as f64 + 0.5) * spec.gsd, (r as f64 + 0.5) * spec.gsd);
        let s: f64 = waves.iter().map(|&(kx, ky, p, a)| a * (kx * x + ky * y + p).sin()).sum();
        amp * s / norm
    })
}

fn place_buildings(spec: &SceneSpec, terrain: &HeightMap, rng: &mut ChaCha8Rng) -> Vec<Building> {
    let (rows, cols) = (spec.rows, spec.cols);
    let mut taken = Grid::filled(rows, cols, false);
    let mut out = Vec::new();
    let [smin, smax] = spec.building_size_range;
    let to_px = |m: f64| ((m / spec.gsd).round() as usize).max(2);
    for i in 0..spec.building_count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let h = to_px(rng.random_range(smin..=smax));
            let w = to_px(rng.random_range(smin..=smax));
            if h + 2 * BUILDING_GAP > rows || w + 2 * BUILDING_GAP > cols {
                continue;
            }
            let r0 = rng.random_range(BUILDING_GAP..=rows - BUILDING_GAP - h);
            let c0 = rng.random_range(BUILDING_GAP..=cols - BUILDING_GAP - w);
            let (ra, rb) = (r0 - BUILDING_GAP, r0 + h + BUILDING_GAP);
            let (ca, cb) = (c0 - BUILDING_GAP, c0 + w + BUILDING_GAP);
            let free = (ra..rb).all(|r| (ca..cb).all(|c| !*taken.get(r, c)));
            if free {
                placed = Some((r0, c0, h, w));
                break;
            }
        }
        let Some((r0, c0, h, w)) = placed else { continue };
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                taken.set(r, c, true);
            }
        }
        let ground = terrain.get(r0 + h / 2, c0 + w / 2);
        let eave = ground + rng.random_range(spec.building_height_range[0]..=spec.building_height_range[1]);
        let flat = rng.random_bool(spec.flat_fraction);
        let pitch = rng.random_range(spec.roof_pitch_range[0]..=spec.roof_pitch_range[1]);
        let (roof, ridge) = if flat {
            (RoofClass::Flat, eave)
        } else {
            let half_span = h.min(w) as f64 * spec.gsd / 2.0;
            (RoofClass::Sloped, eave + half_span * pitch.to_radians().tan())
        };
        out.push(Building { id: format!("b{i:04}"), rows: (r0, r0 + h), cols: (c0, c0 + w), roof, eave, ridge });
    }
    out
}

/// Roof faces of a building in scene coordinates (`top` is the northern
/// edge in meters).
fn roof_polygon(b: &Building, gsd: f64, top: f64) -> RoofPolygon {
    let x0 = b.cols.0 as f64 * gsd;
    let x1 = b.cols.1 as f64 * gsd;
    let y0 = top - b.rows.1 as f64 * gsd;
    let y1 = top - b.rows.0 as f64 * gsd;
    let rings = match b.roof {
        RoofClass::Sloped if b.ridge_along_cols() => {
            let ym = 0.5 * (y0 + y1);
            vec![
                vec![[x0, y0, b.eave], [x1, y0, b.eave], [x1, ym, b.ridge], [x0, ym, b.ridge]],
                vec![[x0, ym, b.ridge], [x1, ym, b.ridge], [x1, y1, b.eave], [x0, y1, b.eave]],
            ]
        }
        RoofClass::Sloped => {
            let xm = 0.5 * (x0 + x1);
            vec![
                vec![[x0, y0, b.eave], [xm, y0, b.ridge], [xm, y1, b.ridge], [x0, y1, b.eave]],
                vec![[xm, y0, b.ridge], [x1, y0, b.eave], [x1, y1, b.eave], [xm, y1, b.ridge]],
            ]
        }
        _ => vec![vec![[x0, y0, b.eave], [x1, y0, b.eave], [x1, y1, b.eave], [x0, y1, b.eave]]],
    };
    RoofPolygon { building_id: b.id.clone(), rings }
}

/// Canopy height added per cell; zero on building footprints. Overlapping
/// crowns keep the taller surface.
fn tree_canopies(spec: &SceneSpec, footprint: &Mask, rng: &mut ChaCha8Rng) -> Grid<f64> {
    let (rows, cols, gsd) = (spec.rows, spec.cols, spec.gsd);
    let mut canopy = Grid::filled(rows, cols, 0.0f64);
    for _ in 0..spec.tree_count {
        let cy = rng.random_range(0.0..rows as f64);
        let cx = rng.random_range(0.0..cols as f64);
        let height = rng.random_range(spec.tree_height_range[0]..=spec.tree_height_range[1]);
        let radius = rng.random_range(spec.tree_radius_range[0]..=spec.tree_radius_range[1]) / gsd;
        let r_lo = (cy - radius).floor().max(0.0) as usize;
        let r_hi = ((cy + radius).ceil() as usize).min(rows);
        let c_lo = (cx - radius).floor().max(0.0) as usize;
        let c_hi = ((cx + radius).ceil() as usize).min(cols);
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                if *footprint.get(r, c) {
                    continue;
                }
                let d2 = ((r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2)) / (radius * radius);
                if d2 < 1.0 {
                    let t = height * (1.0 - d2).powi(2);
                    let cell = canopy.get_mut(r, c);
                    *cell = cell.max(t);
                }
            }
        }
    }
    canopy
}

/// Separable Gaussian blur with edge clamping; the kernel is cut at three
/// standard deviations.
pub fn gaussian_blur(values: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            tmp[r * cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * values[r * cols + clamp(c as isize + j as isize - half, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[clamp(r as isize + j as isize - half, rows) * cols + c])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rmse;

    fn small() -> SceneSpec {
        SceneSpec { rows: 96, cols: 112, building_count: 8, tree_count: 10, ..SceneSpec::default() }
    }

    #[test]
    fn clean_spec_gives_stereo_equal_to_target() {
        let spec = SceneSpec { building_count: 0, tree_count: 0, noise_sigma: 0.0, blur_radius: 0.0, ..small() };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.stereo, s.target);
        assert_eq!(s.target, s.terrain);
    }

    #[test]
    fn trees_only_raise_the_surface() {
        let spec = SceneSpec { noise_sigma: 0.0, blur_radius: 0.0, ..small() };
        let s = generate_scene(&spec).unwrap();
        assert!(s.canopy.as_slice().iter().any(|&t| t));
        for i in 0..s.stereo.values().len() {
            let (a, b) = (s.stereo.values()[i], s.target.values()[i]);
            if s.canopy.as_slice()[i] {
                assert!(a > b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a.stereo.values(), b.stereo.values());
        assert_eq!(a.roof, b.roof);
        assert_eq!(a.polygons, b.polygons);
        let c = generate_scene(&SceneSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.stereo.values(), c.stereo.values());
    }

    #[test]
    fn roof_mask_matches_classifier_and_building_kinds() {
        let s = generate_scene(&SceneSpec { building_count: 12, ..small() }).unwrap();
        assert_eq!(s.roof, classify_roofs(&s.target, &s.footprint, DEFAULT_SLOPE_THRESHOLD).unwrap());
        for b in &s.buildings {
            for r in b.rows.0..b.rows.1 {
                for c in b.cols.0..b.cols.1 {
                    assert!(*s.footprint.get(r, c));
                    assert_eq!(s.roof.get(r, c), b.roof as u8, "{} at {r},{c}", b.id);
                }
            }
        }
        let inside: usize = s.buildings.iter().map(|b| (b.rows.1 - b.rows.0) * (b.cols.1 - b.cols.0)).sum();
        assert_eq!(s.footprint.as_slice().iter().filter(|&&f| f).count(), inside);
    }

    #[test]
    fn crowded_scenes_report_skipped_buildings() {
        let spec = SceneSpec { rows: 24, cols: 24, building_count: 30, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        assert!(s.skipped_buildings > 0);
        assert_eq!(s.buildings.len() + s.skipped_buildings, 30);
    }

    #[test]
    fn corruption_grows_with_noise() {
        let mut prev = 0.0;
        for sigma in [0.0, 0.5, 2.0] {
            let spec = SceneSpec { tree_count: 0, blur_radius: 0.0, noise_sigma: sigma, ..small() };
            let s = generate_scene(&spec).unwrap();
            let e = rmse(&s.stereo, &s.target).unwrap();
            assert!(e >= prev);
            prev = e;
        }
        assert!(prev > 1.0);
    }

    #[test]
    fn blur_preserves_constants() {
        let v = vec![3.5; 20 * 30];
        assert!(gaussian_blur(&v, 20, 30, 2.0).iter().all(|x| (x - 3.5).abs() < 1e-12));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SceneSpec { flat_fraction: 1.5, ..small() }.validate().is_err());
        assert!(SceneSpec { noise_sigma: -1.0, ..small() }.validate().is_err());
        assert!(SceneSpec { roof_pitch_range: [10.0, 5.0], ..small() }.validate().is_err());
    }
}
