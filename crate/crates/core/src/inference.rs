//! Whole-area prediction from overlapping tiles, and fusion of several
//! models' outputs.

use crate::dataset::{normalize, Normalization};
use crate::error::{Error, Result};
use crate::network::Generator;
use crate::nn::Tensor;
use crate::raster::{Grid, HeightMap, RoofClassMap, NUM_CLASSES};

pub const DEFAULT_TILE: usize = 256;
pub const DEFAULT_TILE_STRIDE: usize = 64;

/// Output of a model on one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPrediction {
    /// Heights in meters, same frame as the input patch.
    pub dsm: HeightMap,
    /// Class probabilities, `NUM_CLASSES` row-major planes.
    pub probs: Option<Vec<f64>>,
}

/// Anything that maps stereo patches to refined patches.
pub trait PatchModel {
    fn predict_patches(&self, inputs: &[HeightMap]) -> Result<Vec<PatchPrediction>>;
}

impl PatchModel for Generator {
    fn predict_patches(&self, inputs: &[HeightMap]) -> Result<Vec<PatchPrediction>> {
        let Some(first) = inputs.first() else { return Ok(Vec::new()) };
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(inputs.len() * h * w);
        let mut norms: Vec<Normalization> = Vec::with_capacity(inputs.len());
        for p in inputs {
            first.ensure_same_shape(p)?;
            let (v, n) = normalize(p)?;
            data.extend(v.iter().map(|&x| x as f32));
            norms.push(n);
        }
        let (dsm, seg) = self.predict(Tensor::from_vec([inputs.len(), 1, h, w], data)?)?;
        let mut out = Vec::with_capacity(inputs.len());
        for (i, (p, norm)) in inputs.iter().zip(&norms).enumerate() {
            let heights = dsm.sample(i).iter().map(|&v| norm.inverse(v as f64)).collect();
            let probs = seg.as_ref().map(|s| softmax_planes(s.sample(i), h * w));
            out.push(PatchPrediction { dsm: p.with_values(heights)?, probs });
        }
        Ok(out)
    }
}

/// Per-pixel softmax over `NUM_CLASSES` planes of `px` values each.
pub fn softmax_planes(logits: &[f32], px: usize) -> Vec<f64> {
    let mut out = vec![0.0; NUM_CLASSES * px];
    for i in 0..px {
        let m = (0..NUM_CLASSES).map(|c| logits[c * px + i] as f64).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..NUM_CLASSES).map(|c| (logits[c * px + i] as f64 - m).exp()).sum();
        for c in 0..NUM_CLASSES {
            out[c * px + i] = (logits[c * px + i] as f64 - m).exp() / z;
        }
    }
    out
}

/// Index of the largest of `NUM_CLASSES` planes per pixel; ties go to the
/// lower class.
pub fn argmax_planes(planes: &[f64], px: usize) -> Vec<u8> {
    (0..px)
        .map(|i| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if planes[c * px + i] > planes[best * px + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Tile starts along one axis: every `stride`, with the last tile moved
/// flush against the far edge.
pub fn tile_starts(len: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if tile == 0 || stride == 0 {
        return Err(Error::invalid("tile and stride must be positive"));
    }
    if stride > tile {
        return Err(Error::invalid(format!("stride {stride} exceeds tile {tile} and would leave gaps")));
    }
    if len < tile {
        return Err(Error::invalid(format!("extent {len} is smaller than the {tile}px tile")));
    }
    let mut starts: Vec<usize> = (0..=len - tile).step_by(stride).collect();
    if *starts.last().unwrap() != len - tile {
        starts.push(len - tile);
    }
    Ok(starts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiledPrediction {
    pub dsm: HeightMap,
    pub roof: Option<RoofClassMap>,
}

/// Predicts `dsm` tile by tile. Heights are averaged over all covering
/// tiles; class maps take the argmax of the averaged probabilities.
pub fn predict_tiled(
    model: &dyn PatchModel,
    dsm: &HeightMap,
    tile: usize,
    stride: usize,
    batch: usize,
) -> Result<TiledPrediction> {
    let (rows, cols) = dsm.shape();
    let rs = tile_starts(rows, tile, stride)?;
    let cs = tile_starts(cols, tile, stride)?;
    let origins: Vec<(usize, usize)> = rs.iter().flat_map(|&r| cs.iter().map(move |&c| (r, c))).collect();
    let px = rows * cols;
    let mut sum = vec![0.0; px];
    let mut count = vec![0u32; px];
    let mut prob_sum: Option<Vec<f64>> = None;
    for chunk in origins.chunks(batch.max(1)) {
        let patches = chunk.iter().map(|&(r, c)| dsm.crop(r, c, tile, tile)).collect::<Result<Vec<_>>>()?;
        let preds = model.predict_patches(&patches)?;
        if preds.len() != patches.len() {
            return Err(Error::invalid("model returned the wrong number of predictions"));
        }
        for (&(r0, c0), p) in chunk.iter().zip(&preds) {
            if p.dsm.shape() != (tile, tile) {
                return Err(Error::ShapeMismatch { expected: (tile, tile), found: p.dsm.shape() });
            }
            for r in 0..tile {
                for c in 0..tile {
                    let i = (r0 + r) * cols + c0 + c;
                    sum[i] += p.dsm.get(r, c);
                    count[i] += 1;
                }
            }
            if let Some(probs) = &p.probs {
                let acc = prob_sum.get_or_insert_with(|| vec![0.0; NUM_CLASSES * px]);
                for k in 0..NUM_CLASSES {
                    for r in 0..tile {
                        for c in 0..tile {
                            acc[k * px + (r0 + r) * cols + c0 + c] += probs[(k * tile + r) * tile + c];
                        }
                    }
                }
            }
        }
    }
    let heights = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let out = HeightMap::new(rows, cols, dsm.gsd(), heights)?.with_origin(dsm.origin().0, dsm.origin().1);
    // probabilities are normalized per tile, so the argmax of the sum equals
    // the argmax of the mean
    let roof = prob_sum.map(|p| RoofClassMap::new(rows, cols, argmax_planes(&p, px))).transpose()?;
    Ok(TiledPrediction { dsm: out, roof })
}

/// Per-pixel mean of equally weighted height maps.
pub fn ensemble_dsm(maps: &[HeightMap]) -> Result<HeightMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("ensemble needs at least one map"))?;
    for m in maps {
        first.ensure_same_shape(m)?;
    }
    let n = maps.len() as f64;
    let values = (0..first.values().len()).map(|i| maps.iter().map(|m| m.values()[i]).sum::<f64>() / n).collect();
    first.with_values(values)
}

/// Per-pixel majority vote; ties go to the lowest label.
pub fn ensemble_masks(masks: &[RoofClassMap]) -> Result<RoofClassMap> {
    let first = masks.first().ok_or_else(|| Error::invalid("ensemble needs at least one mask"))?;
    for m in masks {
        if m.shape() != first.shape() {
            return Err(Error::ShapeMismatch { expected: first.shape(), found: m.shape() });
        }
    }
    let (rows, cols) = first.shape();
    let labels = Grid::from_fn(rows, cols, |r, c| {
        let mut votes = [0usize; NUM_CLASSES];
        for m in masks {
            votes[m.get(r, c) as usize] += 1;
        }
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if votes[k] > votes[best] {
                best = k;
            }
        }
        best as u8
    });
    RoofClassMap::from_grid(labels)
}
