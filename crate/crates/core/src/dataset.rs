//! Training patches: region splits, shifted-grid epoch sampling, per-patch
//! height normalization and batching.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{HeightMap, RoofClassMap};
use crate::synthcity::Scene;

/// Height range mapped onto one normalized unit.
pub const HEIGHT_RANGE: f64 = 75.0;
pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_MAX_SHIFT: usize = 256;

/// Aligned input, target and roof-class rasters of one area.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub input: HeightMap,
    pub target: HeightMap,
    pub roof: RoofClassMap,
}

impl SceneSample {
    pub fn new(input: HeightMap, target: HeightMap, roof: RoofClassMap) -> Result<Self> {
        input.ensure_same_shape(&target)?;
        if roof.shape() != input.shape() {
            return Err(Error::ShapeMismatch { expected: input.shape(), found: roof.shape() });
        }
        Ok(SceneSample { input, target, roof })
    }

    pub fn from_scene(scene: &Scene) -> Self {
        SceneSample { input: scene.stereo.clone(), target: scene.target.clone(), roof: scene.roof.clone() }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.input.shape()
    }

    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<SceneSample> {
        Ok(SceneSample {
            input: self.input.crop(row, col, rows, cols)?,
            target: self.target.crop(row, col, rows, cols)?,
            roof: self.roof.crop(row, col, rows, cols)?,
        })
    }

    pub fn crop_region(&self, region: Region) -> Result<SceneSample> {
        self.crop(region.row, region.col, region.rows, region.cols)
    }
}

/// Pixel rectangle `[row, row + rows) × [col, col + cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn new(row: usize, col: usize, rows: usize, cols: usize) -> Self {
        Region { row, col, rows, cols }
    }

    pub fn whole(shape: (usize, usize)) -> Self {
        Region::new(0, 0, shape.0, shape.1)
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.row < other.row + other.rows
            && other.row < self.row + self.rows
            && self.col < other.col + other.cols
            && other.col < self.col + self.cols
    }

    pub fn contains(&self, other: &Region) -> bool {
        other.row >= self.row
            && other.col >= self.col
            && other.row + other.rows <= self.row + self.rows
            && other.col + other.cols <= self.col + self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Region,
    pub val: Region,
    pub test: Region,
}

impl SplitSpec {
    /// Horizontal bands: the top `train` fraction of rows, then validation,
    /// then test.
    pub fn bands(shape: (usize, usize), train: f64, val: f64) -> Result<Self> {
        let (rows, cols) = shape;
        let a = (rows as f64 * train).round() as usize;
        let b = (rows as f64 * (train + val)).round() as usize;
        let split = SplitSpec {
            train: Region::new(0, 0, a, cols),
            val: Region::new(a, 0, b.saturating_sub(a), cols),
            test: Region::new(b, 0, rows.saturating_sub(b), cols),
        };
        split.validate(shape)?;
        Ok(split)
    }

    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        let whole = Region::whole(shape);
        let named = [("train", self.train), ("val", self.val), ("test", self.test)];
        for (name, r) in named {
            if r.rows == 0 || r.cols == 0 {
                return Err(Error::Config(format!("split region {name} is empty")));
            }
            if !whole.contains(&r) {
                return Err(Error::Config(format!("split region {name} leaves the {}x{} extent", shape.0, shape.1)));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if named[i].1.overlaps(&named[j].1) {
                    return Err(Error::Config(format!("split regions {} and {} overlap", named[i].0, named[j].0)));
                }
            }
        }
        Ok(())
    }
}

/// Patch origins for one epoch: a grid covering `region`, each origin
/// jittered by up to `max_shift` pixels and clamped into the region, in
/// shuffled order.
pub fn epoch_origins(
    region: Region,
    patch: usize,
    max_shift: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<(usize, usize)>> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if region.rows < patch || region.cols < patch {
        return Err(Error::invalid(format!(
            "region {}x{} is smaller than the {patch}px patch",
            region.rows, region.cols
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let (nr, nc) = (region.rows.div_ceil(patch), region.cols.div_ceil(patch));
    let shift = max_shift as i64;
    let mut jitter = |base: usize, len: usize| -> usize {
        let d = if shift > 0 { rng.random_range(-shift..=shift) } else { 0 };
        (base as i64 + d).clamp(0, (len - patch) as i64) as usize
    };
    let mut origins = Vec::with_capacity(nr * nc);
    for i in 0..nr {
        for j in 0..nc {
            let r = jitter(i * patch, region.rows);
            let c = jitter(j * patch, region.cols);
            origins.push((region.row + r, region.col + c));
        }
    }
    origins.shuffle(&mut rng);
    Ok(origins)
}

/// One randomized sweep over `region` of `area`.
pub fn epoch_sampler<'a>(
    area: &'a SceneSample,
    region: Region,
    patch: usize,
    max_shift: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl ExactSizeIterator<Item = SceneSample> + 'a> {
    if !Region::whole(area.shape()).contains(&region) {
        return Err(Error::invalid("sampling region leaves the area"));
    }
    let origins = epoch_origins(region, patch, max_shift, seed, epoch)?;
    Ok(origins.into_iter().map(move |(r, c)| area.crop(r, c, patch, patch).expect("origin inside area")))
}

/// `count` patches at uniformly random positions inside `region`.
pub fn random_patches(
    area: &SceneSample,
    region: Region,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<SceneSample>> {
    if region.rows < patch || region.cols < patch || !Region::whole(area.shape()).contains(&region) {
        return Err(Error::invalid("region cannot hold the requested patch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let r = region.row + rng.random_range(0..=region.rows - patch);
            let c = region.col + rng.random_range(0..=region.cols - patch);
            area.crop(r, c, patch, patch)
        })
        .collect()
}

/// Supplies the training samples of each epoch.
pub trait SampleSource {
    fn epoch(&self, epoch: u64) -> Result<Vec<SceneSample>>;
}

/// A fixed patch list visited in a seeded random order every epoch.
#[derive(Clone, Debug)]
pub struct FixedPatches {
    pub samples: Vec<SceneSample>,
    pub seed: u64,
}

impl SampleSource for FixedPatches {
    fn epoch(&self, epoch: u64) -> Result<Vec<SceneSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        Ok(order.into_iter().map(|i| self.samples[i].clone()).collect())
    }
}

/// Shifted-grid sampling of one region of a large area.
#[derive(Clone, Debug)]
pub struct ShiftedGrid {
    pub area: SceneSample,
    pub region: Region,
    pub patch: usize,
    pub max_shift: usize,
    pub seed: u64,
}

impl SampleSource for ShiftedGrid {
    fn epoch(&self, epoch: u64) -> Result<Vec<SceneSample>> {
        Ok(epoch_sampler(&self.area, self.region, self.patch, self.max_shift, self.seed, epoch)?.collect())
    }
}

/// Per-patch affine height transform: `(h - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    /// Offset at the patch minimum, scale [`HEIGHT_RANGE`].
    pub fn of(patch: &HeightMap) -> Result<Self> {
        let offset = patch.min_valid().ok_or(Error::NoValidCells)?;
        Ok(Normalization { offset, scale: HEIGHT_RANGE })
    }

    pub fn forward(&self, h: f64) -> f64 {
        (h - self.offset) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Normalized values of `patch`; nodata cells map to 0.
pub fn normalize(patch: &HeightMap) -> Result<(Vec<f64>, Normalization)> {
    let norm = Normalization::of(patch)?;
    let values = (0..patch.rows())
        .flat_map(|r| (0..patch.cols()).map(move |c| (r, c)))
        .map(|(r, c)| patch.value(r, c).map_or(0.0, |h| norm.forward(h)))
        .collect();
    Ok((values, norm))
}

/// Heights in meters from normalized values, in the frame of `like`.
pub fn denormalize(values: &[f64], norm: Normalization, like: &HeightMap) -> Result<HeightMap> {
    let mut out = HeightMap::new(like.rows(), like.cols(), like.gsd(), values.iter().map(|&v| norm.inverse(v)).collect())?;
    out = out.with_origin(like.origin().0, like.origin().1);
    Ok(out)
}

/// Network-ready stack of samples. Targets share their input's transform.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor,
    pub target: Tensor,
    pub labels: Vec<u8>,
    pub norms: Vec<Normalization>,
    pub gsd: f64,
}

impl Batch {
    pub fn new(samples: &[SceneSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w) = first.shape();
        let gsd = first.input.gsd();
        let n = samples.len();
        let mut input = Vec::with_capacity(n * h * w);
        let mut target = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n * h * w);
        let mut norms = Vec::with_capacity(n);
        for s in samples {
            if s.shape() != (h, w) {
                return Err(Error::ShapeMismatch { expected: (h, w), found: s.shape() });
            }
            if s.input.gsd() != gsd {
                return Err(Error::GsdMismatch(gsd, s.input.gsd()));
            }
            let (x, norm) = normalize(&s.input)?;
            input.extend(x.iter().map(|&v| v as f32));
            for r in 0..h {
                for c in 0..w {
                    let t = s.target.value(r, c).ok_or(Error::NonFinite { row: r, col: c })?;
                    target.push(norm.forward(t) as f32);
                }
            }
            labels.extend_from_slice(s.roof.labels());
            norms.push(norm);
        }
        Ok(Batch {
            input: Tensor::from_vec([n, 1, h, w], input)?,
            target: Tensor::from_vec([n, 1, h, w], target)?,
            labels,
            norms,
            gsd,
        })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(rows: usize, cols: usize) -> SceneSample {
        let input = HeightMap::from_fn(rows, cols, 0.5, |r, c| (r * cols + c) as f64).unwrap();
        let target = input.clone();
        let roof = RoofClassMap::new(rows, cols, vec![0; rows * cols]).unwrap();
        SceneSample::new(input, target, roof).unwrap()
    }

    #[test]
    fn exact_area_gives_one_sample() {
        let a = area(256, 256);
        let s: Vec<_> = epoch_sampler(&a, Region::whole((256, 256)), 256, 0, 1, 0).unwrap().collect();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0], a);
    }

    #[test]
    fn unshifted_grid_tiles_the_area() {
        let mut o = epoch_origins(Region::whole((512, 512)), 256, 0, 3, 2).unwrap();
        o.sort();
        assert_eq!(o, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);
    }

    #[test]
    fn sampling_is_deterministic_and_varies_by_epoch() {
        let r = Region::new(10, 20, 300, 200);
        let a = epoch_origins(r, 64, 64, 9, 4).unwrap();
        assert_eq!(a, epoch_origins(r, 64, 64, 9, 4).unwrap());
        assert_ne!(a, epoch_origins(r, 64, 64, 9, 5).unwrap());
        assert_eq!(a.len(), 5 * 4);
        for &(row, col) in &a {
            assert!(r.contains(&Region::new(row, col, 64, 64)));
        }
    }

    #[test]
    fn small_area_is_rejected() {
        assert!(epoch_origins(Region::whole((100, 300)), 128, 0, 0, 0).is_err());
    }

    #[test]
    fn normalization_examples() {
        let c = HeightMap::filled(4, 4, 0.5, 12.5).unwrap();
        let (v, n) = normalize(&c).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(denormalize(&v, n, &c).unwrap().values().iter().all(|&h| h == 12.5));
        let m = HeightMap::new(1, 2, 0.5, vec![10.0, 85.0]).unwrap();
        assert_eq!(normalize(&m).unwrap().0, vec![0.0, 1.0]);
        let empty = HeightMap::with_nodata(1, 2, 0.5, vec![-9999.0; 2], Some(-9999.0)).unwrap();
        assert!(matches!(normalize(&empty), Err(Error::NoValidCells)));
    }

    #[test]
    fn split_validation() {
        assert!(SplitSpec::bands((100, 50), 0.6, 0.2).is_ok());
        let bad = SplitSpec {
            train: Region::new(0, 0, 60, 50),
            val: Region::new(50, 0, 20, 50),
            test: Region::new(80, 0, 20, 50),
        };
        assert!(bad.validate((100, 50)).is_err());
        let outside = SplitSpec { test: Region::new(80, 0, 30, 50), ..SplitSpec::bands((100, 50), 0.6, 0.2).unwrap() };
        assert!(outside.validate((100, 50)).is_err());
    }

    #[test]
    fn batch_shares_input_transform() {
        let a = area(8, 8);
        let b = Batch::new(&[a.crop(0, 0, 4, 4).unwrap(), a.crop(4, 4, 4, 4).unwrap()]).unwrap();
        assert_eq!(b.input.shape(), [2, 1, 4, 4]);
        assert_eq!(b.norms[1].offset, 36.0);
        assert_eq!(b.input.data(), b.target.data());
    }
}
