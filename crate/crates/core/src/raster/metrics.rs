//! Height and segmentation quality metrics.

use serde::{Deserialize, Serialize};

use super::{HeightMap, RoofClassMap, NUM_CLASSES};
use crate::error::{Error, Result};

/// Evaluation summary of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// meters
    pub rmse: f64,
    /// meters
    pub mae: f64,
    pub miou: Option<f64>,
}

fn check_pair(pred: &HeightMap, target: &HeightMap) -> Result<()> {
    pred.ensure_same_shape(target)?;
    if pred.gsd() != target.gsd() {
        return Err(Error::GsdMismatch(pred.gsd(), target.gsd()));
    }
    Ok(())
}

/// Differences over cells valid in both maps.
fn valid_diffs<'a>(pred: &'a HeightMap, target: &'a HeightMap) -> impl Iterator<Item = f64> + 'a {
    let cols = pred.cols();
    (0..pred.rows() * cols).filter_map(move |i| {
        let (r, c) = (i / cols, i % cols);
        Some(pred.value(r, c)? - target.value(r, c)?)
    })
}

/// Root of the mean squared difference over pairwise-valid cells.
pub fn rmse(pred: &HeightMap, target: &HeightMap) -> Result<f64> {
    check_pair(pred, target)?;
    let (sum, n) = valid_diffs(pred, target).fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    if n == 0 {
        return Err(Error::NoValidCells);
    }
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute difference over pairwise-valid cells.
pub fn mae(pred: &HeightMap, target: &HeightMap) -> Result<f64> {
    check_pair(pred, target)?;
    let (sum, n) = valid_diffs(pred, target).fold((0.0, 0usize), |(s, n), d| (s + d.abs(), n + 1));
    if n == 0 {
        return Err(Error::NoValidCells);
    }
    Ok(sum / n as f64)
}

/// Per-class intersection and union counts, accumulated over any number of
/// map pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub intersection: [u64; NUM_CLASSES],
    pub union: [u64; NUM_CLASSES],
}

impl ConfusionCounts {
    pub fn add_pair(&mut self, pred: &RoofClassMap, target: &RoofClassMap) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch { expected: target.shape(), found: pred.shape() });
        }
        for (&p, &t) in pred.labels().iter().zip(target.labels()) {
            self.add(p, t);
        }
        Ok(())
    }

    #[inline]
    pub fn add(&mut self, pred: u8, target: u8) {
        let (p, t) = (pred as usize, target as usize);
        if p == t {
            self.intersection[p] += 1;
            self.union[p] += 1;
        } else {
            self.union[p] += 1;
            self.union[t] += 1;
        }
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let (sum, n) = (0..NUM_CLASSES)
            .filter(|&k| self.union[k] > 0)
            .fold((0.0, 0usize), |(s, n), k| {
                (s + self.intersection[k] as f64 / self.union[k] as f64, n + 1)
            });
        if n == 0 {
            return Err(Error::EmptyUnion);
        }
        Ok(sum / n as f64)
    }
}

/// Mean intersection-over-union. Classes absent from both maps are left out
/// of the mean.
pub fn miou(pred: &RoofClassMap, target: &RoofClassMap) -> Result<f64> {
    let mut counts = ConfusionCounts::default();
    counts.add_pair(pred, target)?;
    counts.miou()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        let pred = HeightMap::new(2, 2, 1.0, vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        let zero = HeightMap::filled(2, 2, 1.0, 0.0).unwrap();
        assert_eq!(rmse(&pred, &zero).unwrap(), 1.0);
        assert_eq!(mae(&pred, &zero).unwrap(), 0.5);
        assert_eq!(rmse(&pred, &pred).unwrap(), 0.0);
        assert_eq!(mae(&pred, &pred).unwrap(), 0.0);
    }

    #[test]
    fn nodata_is_excluded_pairwise() {
        let pred = HeightMap::with_nodata(1, 3, 1.0, vec![1.0, 5.0, -1.0], Some(-1.0)).unwrap();
        let target = HeightMap::with_nodata(1, 3, 1.0, vec![-1.0, 2.0, 7.0], Some(-1.0)).unwrap();
        assert_eq!(rmse(&pred, &target).unwrap(), 3.0);
        let none = HeightMap::with_nodata(1, 3, 1.0, vec![-1.0; 3], Some(-1.0)).unwrap();
        assert!(matches!(rmse(&none, &target), Err(Error::NoValidCells)));
    }

    #[test]
    fn shape_and_gsd_mismatch() {
        let a = HeightMap::filled(2, 2, 1.0, 0.0).unwrap();
        let b = HeightMap::filled(2, 3, 1.0, 0.0).unwrap();
        let c = HeightMap::filled(2, 2, 0.5, 0.0).unwrap();
        assert!(matches!(rmse(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(mae(&a, &c), Err(Error::GsdMismatch(..))));
    }

    #[test]
    fn miou_examples() {
        let all = RoofClassMap::new(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(miou(&all, &all).unwrap(), 1.0);
        let zeros = RoofClassMap::new(2, 2, vec![0; 4]).unwrap();
        let ones = RoofClassMap::new(2, 2, vec![1; 4]).unwrap();
        assert_eq!(miou(&zeros, &ones).unwrap(), 0.0);
        assert!(matches!(ConfusionCounts::default().miou(), Err(Error::EmptyUnion)));
    }
}
