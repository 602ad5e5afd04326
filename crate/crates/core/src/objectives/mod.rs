//! Training objectives and their combination with learned task weights.
//!
//! Every loss is evaluated in f64 on flat buffers of `n` planes and returns
//! its value together with the gradient with respect to the predictions.

mod weighting;

use crate::error::{Error, Result};
use crate::raster::{NormalField, NUM_CLASSES};

pub use weighting::{
    combine_multitask, effective_weight, LossReport, LossTerm, Objective, ObjectiveSet, RawLosses, WeightKind,
    WeightState,
};

/// Guards the normal length against division by zero.
pub const NORMAL_EPS: f64 = 1e-8;

/// Height and width of each plane in a batch buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlaneShape {
    pub rows: usize,
    pub cols: usize,
}

impl PlaneShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        PlaneShape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn planes(&self, buffer_len: usize, channels: usize) -> Result<usize> {
        let per = self.len() * channels;
        if per == 0 || buffer_len % per != 0 || buffer_len == 0 {
            return Err(Error::invalid(format!(
                "buffer of {buffer_len} values does not hold whole {}x{}x{channels} planes",
                self.rows, self.cols
            )));
        }
        Ok(buffer_len / per)
    }
}

/// Loss value and its gradient with respect to the first argument.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    Ok(())
}

fn finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<Loss> {
    same_len(pred, target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            value += d.abs();
            // the subgradient at zero is taken as zero
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(Loss { value: value / n, grad })
}

/// Derivative stencil used for normals: central differences inside, one-sided
/// at the border. Returns `(i_lo, i_hi, 1/den)` so that
/// `d = (h[i_hi] - h[i_lo]) * inv`.
#[inline]
fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// One minus the mean cosine between per-pixel surface normals of two height
/// buffers with ground sampling distance `gsd`. Normals use the same
/// finite-difference scheme as [`crate::raster::surface_normals`].
pub fn normal_loss(pred: &[f64], target: &[f64], plane: PlaneShape, gsd: f64) -> Result<Loss> {
    same_len(pred, target)?;
    let planes = plane.planes(pred.len(), 1)?;
    if plane.rows < 2 || plane.cols < 2 {
        return Err(Error::Degenerate(format!("normal loss needs at least 2x2 cells, got {}x{}", plane.rows, plane.cols)));
    }
    if !(gsd.is_finite() && gsd > 0.0) {
        return Err(Error::invalid("gsd must be positive"));
    }
    let (rows, cols) = (plane.rows, plane.cols);
    let count = pred.len() as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut sum_cos = 0.0;
    for p in 0..planes {
        let off = p * plane.len();
        let hp = &pred[off..off + plane.len()];
        let ht = &target[off..off + plane.len()];
        let gp = &mut grad[off..off + plane.len()];
        for r in 0..rows {
            let (r_lo, r_hi, r_inv) = stencil(r, rows);
            for c in 0..cols {
                let (c_lo, c_hi, c_inv) = stencil(c, cols);
                let d = |h: &[f64]| {
                    (
                        (h[r * cols + c_hi] - h[r * cols + c_lo]) * c_inv / gsd,
                        (h[r_hi * cols + c] - h[r_lo * cols + c]) * r_inv / gsd,
                    )
                };
                let (pdx, pdy) = d(hp);
                let (tdx, tdy) = d(ht);
                let u = [-pdx, -pdy, 1.0];
                let v = [-tdx, -tdy, 1.0];
                let nu = (u[0] * u[0] + u[1] * u[1] + 1.0).sqrt().max(NORMAL_EPS);
                let nv = (v[0] * v[0] + v[1] * v[1] + 1.0).sqrt().max(NORMAL_EPS);
                let dot = u[0] * v[0] + u[1] * v[1] + 1.0;
                let cos = dot / (nu * nv);
                sum_cos += cos;
                // d cos / d u
                let gu = [v[0] / (nu * nv) - cos * u[0] / (nu * nu), v[1] / (nu * nv) - cos * u[1] / (nu * nu)];
                // loss = 1 - mean cos; u = (-dx, -dy, 1)
                let gdx = gu[0] / count;
                let gdy = gu[1] / count;
                let kx = gdx * c_inv / gsd;
                gp[r * cols + c_hi] += kx;
                gp[r * cols + c_lo] -= kx;
                let ky = gdy * r_inv / gsd;
                gp[r_hi * cols + c] += ky;
                gp[r_lo * cols + c] -= ky;
            }
        }
    }
    Ok(Loss { value: 1.0 - sum_cos / count, grad })
}

/// One minus the mean cosine between two normal fields; pixels that are
/// nodata in either field are skipped.
pub fn normal_loss_fields(a: &NormalField, b: &NormalField) -> Result<f64> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::ShapeMismatch { expected: (a.rows(), a.cols()), found: (b.rows(), b.cols()) });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            if let (Some(u), Some(v)) = (a.get(r, c), b.get(r, c)) {
                let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt().max(NORMAL_EPS);
                let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(NORMAL_EPS);
                sum += (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoValidCells);
    }
    Ok(1.0 - sum / n as f64)
}

/// Least-squares generator term: mean of `(score - 1)^2`.
pub fn gan_generator_loss(scores: &[f64]) -> Result<Loss> {
    if scores.is_empty() {
        return Err(Error::invalid("empty score grid"));
    }
    finite(scores, "scores")?;
    let n = scores.len() as f64;
    let value = scores.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / n;
    let grad = scores.iter().map(|s| 2.0 * (s - 1.0) / n).collect();
    Ok(Loss { value, grad })
}

/// Least-squares discriminator loss and gradients for both score grids.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

/// `0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2)`.
pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<DiscriminatorLoss> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid("empty score grid"));
    }
    finite(real, "real scores")?;
    finite(fake, "fake scores")?;
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let value = 0.5 * real.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / nr
        + 0.5 * fake.iter().map(|s| s * s).sum::<f64>() / nf;
    Ok(DiscriminatorLoss {
        value,
        grad_real: real.iter().map(|s| (s - 1.0) / nr).collect(),
        grad_fake: fake.iter().map(|s| s / nf).collect(),
    })
}

/// Mean softmax cross-entropy. `logits` holds `n` blocks of
/// `NUM_CLASSES` planes, `labels` `n` planes.
pub fn seg_loss(logits: &[f64], labels: &[u8], plane: PlaneShape) -> Result<Loss> {
    let k = NUM_CLASSES;
    let planes = plane.planes(logits.len(), k)?;
    if labels.len() != planes * plane.len() {
        return Err(Error::invalid(format!("{} labels for {} pixels", labels.len(), planes * plane.len())));
    }
    finite(logits, "logits")?;
    let px = plane.len();
    let count = labels.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut value = 0.0;
    for p in 0..planes {
        for i in 0..px {
            let label = labels[p * px + i] as usize;
            if label >= k {
                return Err(Error::invalid(format!("label {label} out of range")));
            }
            let at = |c: usize| (p * k + c) * px + i;
            let m = (0..k).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (logits[at(c)] - m).exp()).sum();
            let lse = m + z.ln();
            value += lse - logits[at(label)];
            for c in 0..k {
                let prob = (logits[at(c)] - lse).exp();
                grad[at(c)] = (prob - if c == label { 1.0 } else { 0.0 }) / count;
            }
        }
    }
    Ok(Loss { value: value / count, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let t = [1.0, -2.0, 3.5, 0.0];
        assert_eq!(l1_loss(&t, &t).unwrap().value, 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        assert_eq!(l1_loss(&p, &t).unwrap().value, 2.0);
        assert!(l1_loss(&p, &t[..3]).is_err());
    }

    #[test]
    fn gan_examples() {
        assert_eq!(gan_generator_loss(&[1.0; 4]).unwrap().value, 0.0);
        assert_eq!(gan_generator_loss(&[0.0; 4]).unwrap().value, 1.0);
        assert_eq!(gan_generator_loss(&[0.0, 0.5, 1.0, 1.0]).unwrap().value, 0.3125);
        assert_eq!(discriminator_loss(&[1.0; 3], &[0.0; 3]).unwrap().value, 0.0);
        assert_eq!(discriminator_loss(&[0.0; 3], &[1.0; 3]).unwrap().value, 1.0);
        assert_eq!(discriminator_loss(&[0.5; 3], &[0.5; 3]).unwrap().value, 0.25);
    }

    #[test]
    fn seg_examples() {
        let plane = PlaneShape::new(2, 2);
        let uniform = seg_loss(&[0.0; 12], &[0, 1, 2, 1], plane).unwrap();
        assert!((uniform.value - 3f64.ln()).abs() < 1e-12);
        let labels = [2u8, 0, 1, 2];
        let mut logits = vec![0.0; 12];
        for (i, &l) in labels.iter().enumerate() {
            logits[l as usize * 4 + i] = 20.0;
        }
        assert!(seg_loss(&logits, &labels, plane).unwrap().value < 1e-6);
        assert!(seg_loss(&logits, &[3, 0, 0, 0], plane).is_err());
    }

    #[test]
    fn normal_loss_limits() {
        let plane = PlaneShape::new(4, 4);
        let ramp = |k: f64| (0..16).map(|i| k * (i % 4) as f64).collect::<Vec<_>>();
        assert!(normal_loss(&ramp(0.3), &ramp(0.3), plane, 1.0).unwrap().value.abs() < 1e-15);
        let flat = ramp(0.0);
        assert!((normal_loss(&flat, &ramp(1e7), plane, 1.0).unwrap().value - 1.0).abs() < 1e-6);
        assert!((normal_loss(&ramp(1e4), &ramp(-1e4), plane, 1.0).unwrap().value - 2.0).abs() < 1e-6);
    }
}
