//! Brute-force reference implementations and random instance builders shared
//! by the integration tests. Each oracle follows the written definition
//! directly, with plain loops and no shared helpers from the library.

#![allow(dead_code)]

use std::collections::BTreeSet;

use mtdsm::raster::{Grid, HeightMap, Mask, RoofClassMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gsd: f64, amplitude: f64) -> HeightMap {
    let values = (0..rows * cols).map(|_| rng.random_range(-amplitude..amplitude)).collect();
    HeightMap::new(rows, cols, gsd, values).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RoofClassMap {
    RoofClassMap::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0..3u8)).collect()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Mask {
    Grid::from_fn(rows, cols, |_, _| rng.random_bool(p))
}

pub fn rmse(a: &HeightMap, b: &HeightMap) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let d = a.get(r, c) - b.get(r, c);
            sum += d * d;
            n += 1.0;
        }
    }
    (sum / n).sqrt()
}

pub fn mae(a: &HeightMap, b: &HeightMap) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            sum += (a.get(r, c) - b.get(r, c)).abs();
            n += 1.0;
        }
    }
    sum / n
}

/// Per-class sets of pixel indices; empty unions are left out.
pub fn miou(pred: &RoofClassMap, target: &RoofClassMap) -> Option<f64> {
    let mut ious = Vec::new();
    for k in 0..3u8 {
        let p: BTreeSet<usize> = (0..pred.labels().len()).filter(|&i| pred.labels()[i] == k).collect();
        let t: BTreeSet<usize> = (0..target.labels().len()).filter(|&i| target.labels()[i] == k).collect();
        let union = p.union(&t).count();
        if union > 0 {
            ious.push(p.intersection(&t).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// `(dh/dx, dh/dy)` in meters per meter; x along columns, y along rows.
pub fn gradient(h: &HeightMap, r: usize, c: usize) -> (f64, f64) {
    let g = h.gsd();
    let (rows, cols) = h.shape();
    let dx = if c == 0 {
        (h.get(r, 1) - h.get(r, 0)) / g
    } else if c == cols - 1 {
        (h.get(r, cols - 1) - h.get(r, cols - 2)) / g
    } else {
        (h.get(r, c + 1) - h.get(r, c - 1)) / (2.0 * g)
    };
    let dy = if r == 0 {
        (h.get(1, c) - h.get(0, c)) / g
    } else if r == rows - 1 {
        (h.get(rows - 1, c) - h.get(rows - 2, c)) / g
    } else {
        (h.get(r + 1, c) - h.get(r - 1, c)) / (2.0 * g)
    };
    (dx, dy)
}

pub fn normal(h: &HeightMap, r: usize, c: usize) -> [f64; 3] {
    let (dx, dy) = gradient(h, r, c);
    let len = (dx * dx + dy * dy + 1.0).sqrt();
    [-dx / len, -dy / len, 1.0 / len]
}

/// Steepest 8-neighbor rate, in degrees.
pub fn slope(h: &HeightMap, r: usize, c: usize) -> f64 {
    let mut best: f64 = 0.0;
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= h.rows() as i64 || nc >= h.cols() as i64 {
                continue;
            }
            let dist = h.gsd() * ((dr * dr + dc * dc) as f64).sqrt();
            best = best.max((h.get(nr as usize, nc as usize) - h.get(r, c)).abs() / dist);
        }
    }
    best.atan().to_degrees()
}

/// Compass bearing of steepest descent, or -1 on flat cells.
pub fn aspect(h: &HeightMap, r: usize, c: usize) -> f64 {
    let (dx, dy) = gradient(h, r, c);
    if (dx * dx + dy * dy).sqrt() <= 1e-12 {
        return -1.0;
    }
    // descent points along -grad; rows run south, so north = -row direction
    let east = -dx;
    let north = dy;
    east.atan2(north).to_degrees().rem_euclid(360.0)
}

/// Coefficients of `z = a x + b y + c` through three points, by Cramer's rule.
pub fn plane_through(p: [[f64; 3]; 3]) -> [f64; 3] {
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let a = [[p[0][0], p[0][1], 1.0], [p[1][0], p[1][1], 1.0], [p[2][0], p[2][1], 1.0]];
    let z = [p[0][2], p[1][2], p[2][2]];
    let d = det3(a);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = z[i];
        }
        *o = det3(m) / d;
    }
    out
}

/// Signed distance-like margin of `(x, y)` inside a triangle: positive
/// inside, negative outside.
pub fn inside_margin(p: [[f64; 3]; 3], x: f64, y: f64) -> f64 {
    let cross = |a: [f64; 3], b: [f64; 3]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    let orient = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    let s = orient.signum();
    let e = [cross(p[0], p[1]) * s, cross(p[1], p[2]) * s, cross(p[2], p[0]) * s];
    e.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn spherical_variance(h: &HeightMap, window: usize, r: usize, c: usize) -> f64 {
    let half = window as i64 / 2;
    let mut sum = [0.0; 3];
    let mut n = 0.0;
    for rr in r as i64 - half..=r as i64 + half {
        for cc in c as i64 - half..=c as i64 + half {
            if rr < 0 || cc < 0 || rr >= h.rows() as i64 || cc >= h.cols() as i64 {
                continue;
            }
            let v = normal(h, rr as usize, cc as usize);
            for k in 0..3 {
                sum[k] += v[k];
            }
            n += 1.0;
        }
    }
    let m = [sum[0] / n, sum[1] / n, sum[2] / n];
    1.0 - (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt()
}

/// Window members of `(r, c)` inside the raster.
fn neighborhood(rows: usize, cols: usize, r: usize, c: usize, half: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for rr in 0..rows {
        for cc in 0..cols {
            if rr.abs_diff(r) <= half && cc.abs_diff(c) <= half {
                out.push((rr, cc));
            }
        }
    }
    out
}

pub fn erode(m: &Mask, radius: usize) -> Mask {
    Grid::from_fn(m.rows(), m.cols(), |r, c| neighborhood(m.rows(), m.cols(), r, c, radius).iter().all(|&(a, b)| *m.get(a, b)))
}

pub fn dilate(m: &Mask, radius: usize) -> Mask {
    Grid::from_fn(m.rows(), m.cols(), |r, c| neighborhood(m.rows(), m.cols(), r, c, radius).iter().any(|&(a, b)| *m.get(a, b)))
}

pub fn cleanup(m: &Mask, open: usize, close: usize) -> Mask {
    let opened = dilate(&erode(m, open), open);
    erode(&dilate(&opened, close), close)
}

/// Filled value per pixel; `None` marks pixels left without a candidate.
pub fn fill(h: &HeightMap, m: &Mask, window: usize) -> Vec<Option<f64>> {
    let (rows, cols) = h.shape();
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !*m.get(r, c) {
                out.push(Some(h.get(r, c)));
                continue;
            }
            let mut found = None;
            for half in [window / 2, window / 2 * 2, window / 2 * 4] {
                let candidates: Vec<f64> = neighborhood(rows, cols, r, c, half)
                    .into_iter()
                    .filter(|&(a, b)| !*m.get(a, b))
                    .map(|(a, b)| h.get(a, b))
                    .collect();
                if !candidates.is_empty() {
                    found = Some(candidates.iter().cloned().fold(f64::INFINITY, f64::min));
                    break;
                }
            }
            out.push(found);
        }
    }
    out
}

pub fn mean(maps: &[HeightMap]) -> Vec<f64> {
    let n = maps[0].values().len();
    (0..n).map(|i| maps.iter().map(|m| m.values()[i]).sum::<f64>() / maps.len() as f64).collect()
}

/// Most frequent label; among equals the smallest.
pub fn vote(masks: &[RoofClassMap]) -> Vec<u8> {
    let n = masks[0].labels().len();
    (0..n)
        .map(|i| {
            let mut best = (0usize, 0u8);
            for label in (0..3u8).rev() {
                let count = masks.iter().filter(|m| m.labels()[i] == label).count();
                if count >= best.0 {
                    best = (count, label);
                }
            }
            best.1
        })
        .collect()
}

/// `|a - b|` relative to the larger magnitude, with a floor for values near
/// zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
