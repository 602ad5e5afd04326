//! Ear clipping followed by Delaunay edge flips, constrained to the ring.

use super::{shoelace_area, RoofPolygon, RoofPolygonSet, Triangle, TriangleSet};
use crate::error::{Error, Result};

/// Maximum distance of a vertex from the best-fit plane, in meters.
const PLANARITY_TOLERANCE: f64 = 1e-3;

/// Relative tolerance for colinearity tests.
const COLINEAR_EPS: f64 = 1e-12;

type P3 = [f64; 3];

/// Splits every roof ring into triangles. A simple n-gon yields n−2
/// triangles; colinear vertices are dropped first.
pub fn triangulate_roofs(polys: &RoofPolygonSet) -> Result<TriangleSet> {
    let mut triangles = Vec::new();
    for poly in &polys.polygons {
        for ring in &poly.rings {
            let ring = clean_ring(poly, ring)?;
            for [a, b, c] in triangulate_ring(&ring) {
                triangles.push(Triangle {
                    building_id: poly.building_id.clone(),
                    vertices: [ring[a], ring[b], ring[c]],
                });
            }
        }
    }
    Ok(TriangleSet { triangles })
}

fn bad(poly: &RoofPolygon, reason: impl Into<String>) -> Error {
    Error::InvalidPolygon { building: poly.building_id.clone(), reason: reason.into() }
}

#[inline]
fn cross(o: P3, a: P3, b: P3) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Validates a ring and returns it counter-clockwise without duplicate or
/// colinear vertices.
fn clean_ring(poly: &RoofPolygon, ring: &[P3]) -> Result<Vec<P3>> {
    if ring.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad(poly, "non-finite vertex"));
    }
    let mut pts: Vec<P3> = Vec::with_capacity(ring.len());
    for &v in ring {
        if pts.last() != Some(&v) {
            pts.push(v);
        }
    }
    while pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 3 {
        return Err(bad(poly, "ring has fewer than 3 distinct vertices"));
    }
    let scale = pts
        .iter()
        .flat_map(|p| [p[0], p[1]])
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);

    // drop vertices lying on the segment between their neighbors
    let mut changed = true;
    while changed && pts.len() >= 3 {
        changed = false;
        let n = pts.len();
        for i in 0..n {
            let (prev, cur, next) = (pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n]);
            if cross(prev, cur, next).abs() <= COLINEAR_EPS * scale * scale {
                pts.remove(i);
                changed = true;
                break;
            }
        }
    }
    let area = if pts.len() >= 3 { shoelace_area(&pts) } else { 0.0 };
    if area.abs() <= COLINEAR_EPS * scale * scale {
        return Err(bad(poly, "colinear ring"));
    }
    if area < 0.0 {
        pts.reverse();
    }
    check_planar(poly, &pts)?;
    check_simple(poly, &pts, scale)?;
    Ok(pts)
}

/// Fits a plane through the centroid using Newell's normal.
fn check_planar(poly: &RoofPolygon, pts: &[P3]) -> Result<()> {
    let n = pts.len();
    let mut normal = [0.0; 3];
    let mut centroid = [0.0; 3];
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        normal[0] += (a[1] - b[1]) * (a[2] + b[2]);
        normal[1] += (a[2] - b[2]) * (a[0] + b[0]);
        normal[2] += (a[0] - b[0]) * (a[1] + b[1]);
        for k in 0..3 {
            centroid[k] += a[k] / n as f64;
        }
    }
    let len = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
    for p in pts {
        let d = (0..3).map(|k| (p[k] - centroid[k]) * normal[k]).sum::<f64>() / len;
        if d.abs() > PLANARITY_TOLERANCE {
            return Err(bad(poly, format!("ring is not planar (vertex off plane by {:.3} m)", d.abs())));
        }
    }
    Ok(())
}

fn segments_touch(a: P3, b: P3, c: P3, d: P3, eps: f64) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    let proper = ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps))
        && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps));
    if proper {
        return true;
    }
    let on = |p: P3, q: P3, r: P3, side: f64| {
        side.abs() <= eps
            && r[0] >= p[0].min(q[0]) - 1e-12
            && r[0] <= p[0].max(q[0]) + 1e-12
            && r[1] >= p[1].min(q[1]) - 1e-12
            && r[1] <= p[1].max(q[1]) + 1e-12
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

fn check_simple(poly: &RoofPolygon, pts: &[P3], scale: f64) -> Result<()> {
    let n = pts.len();
    let eps = COLINEAR_EPS * scale * scale;
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_touch(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n], eps) {
                return Err(bad(poly, "self-intersecting ring"));
            }
        }
    }
    Ok(())
}

fn point_in_triangle(p: P3, a: P3, b: P3, c: P3) -> bool {
    cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
}

/// Ear clipping on a counter-clockwise simple ring, then Lawson flips.
fn triangulate_ring(pts: &[P3]) -> Vec<[usize; 3]> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let mut tris = Vec::with_capacity(pts.len() - 2);
    while idx.len() > 3 {
        let n = idx.len();
        let mut best: Option<(usize, f64)> = None;
        for k in 0..n {
            let (i0, i1, i2) = (idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]);
            let (a, b, c) = (pts[i0], pts[i1], pts[i2]);
            if cross(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx
                .iter()
                .filter(|&&j| j != i0 && j != i1 && j != i2)
                .any(|&j| pts[j] != a && pts[j] != b && pts[j] != c && point_in_triangle(pts[j], a, b, c));
            if blocked {
                continue;
            }
            // prefer well-shaped ears
            let q = ear_quality(a, b, c);
            if best.is_none_or(|(_, bq)| q > bq) {
                best = Some((k, q));
            }
        }
        // a simple ring always has an ear; fall back to the first vertex on
        // numerically hopeless input
        let k = best.map_or(0, |(k, _)| k);
        tris.push([idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]]);
        idx.remove(k);
    }
    tris.push([idx[0], idx[1], idx[2]]);
    delaunay_flips(pts, &mut tris);
    tris
}

fn ear_quality(a: P3, b: P3, c: P3) -> f64 {
    let area = cross(a, b, c);
    let l = |p: P3, q: P3| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    area / (l(a, b) + l(b, c) + l(c, a))
}

/// Positive when `d` lies inside the circumcircle of counter-clockwise `abc`.
fn in_circle(a: P3, b: P3, c: P3, d: P3) -> f64 {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

/// Flips interior edges until every one is locally Delaunay. Ring edges are
/// never touched since only one triangle borders them.
fn delaunay_flips(pts: &[P3], tris: &mut [[usize; 3]]) {
    let max_rounds = tris.len() * tris.len() + 1;
    for _ in 0..max_rounds {
        let mut flipped = false;
        for t in 0..tris.len() {
            for e in 0..3 {
                let (u, v) = (tris[t][e], tris[t][(e + 1) % 3]);
                let w = tris[t][(e + 2) % 3];
                // the neighbor traverses the shared edge as v -> u
                let Some((s, x)) = tris.iter().enumerate().find_map(|(s, tri)| {
                    if s == t {
                        return None;
                    }
                    (0..3).find_map(|f| {
                        (tri[f] == v && tri[(f + 1) % 3] == u).then_some((s, tri[(f + 2) % 3]))
                    })
                }) else {
                    continue;
                };
                let (pu, pv, pw, px) = (pts[u], pts[v], pts[w], pts[x]);
                // the quad u-x-v-w must be strictly convex for the flip to stay inside
                if cross(pw, px, pv) <= 0.0 || cross(px, pw, pu) <= 0.0 {
                    continue;
                }
                if in_circle(pu, pv, pw, px) > 1e-12 {
                    tris[t] = [w, u, x];
                    tris[s] = [x, v, w];
                    flipped = true;
                }
            }
        }
        if !flipped {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rings: Vec<Vec<P3>>) -> RoofPolygonSet {
        RoofPolygonSet { polygons: vec![RoofPolygon { building_id: "b".into(), rings }] }
    }

    #[test]
    fn single_triangle_is_identity() {
        let tri = vec![[0.0, 0.0, 1.0], [2.0, 0.0, 2.0], [0.0, 3.0, 3.0]];
        let out = triangulate_roofs(&set(vec![tri.clone()])).unwrap();
        assert_eq!(out.len(), 1);
        let mut got = out.triangles[0].vertices.to_vec();
        let mut want = tri;
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn quad_and_l_shape() {
        let quad = vec![[0.0, 0.0, 5.0], [4.0, 0.0, 5.0], [4.0, 2.0, 6.0], [0.0, 2.0, 6.0]];
        let out = triangulate_roofs(&set(vec![quad.clone()])).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.area() - 8.0).abs() < 1e-9);

        let l = vec![
            [0.0, 0.0, 3.0],
            [6.0, 0.0, 3.0],
            [6.0, 2.0, 3.0],
            [2.0, 2.0, 3.0],
            [2.0, 5.0, 3.0],
            [0.0, 5.0, 3.0],
        ];
        let out = triangulate_roofs(&set(vec![l.clone()])).unwrap();
        assert_eq!(out.len(), 4);
        assert!((out.area() - shoelace_area(&l).abs()).abs() < 1e-9);
    }

    #[test]
    fn clockwise_and_closed_rings_are_accepted() {
        let ring = vec![[0.0, 0.0, 1.0], [0.0, 2.0, 1.0], [3.0, 2.0, 1.0], [3.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let out = triangulate_roofs(&set(vec![ring])).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_rings() {
        let bowtie = vec![[0.0, 0.0, 0.0], [2.0, 2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let line = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 2.0, 0.0]];
        let warped = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 2.0, 1.0], [0.0, 2.0, 0.0]];
        for ring in [bowtie, line, warped, vec![[0.0; 3], [1.0, 0.0, 0.0]]] {
            assert!(matches!(triangulate_roofs(&set(vec![ring])), Err(Error::InvalidPolygon { .. })));
        }
    }

    #[test]
    fn flips_produce_delaunay_quad_diagonal() {
        // a thin rhombus: the short diagonal is Delaunay
        let ring = vec![[0.0, 0.0, 0.0], [5.0, -1.0, 0.0], [10.0, 0.0, 0.0], [5.0, 1.0, 0.0]];
        let out = triangulate_roofs(&set(vec![ring])).unwrap();
        for t in &out.triangles {
            let xs: Vec<f64> = t.vertices.iter().map(|v| v[0]).collect();
            assert!(xs.contains(&5.0) && xs.iter().filter(|&&x| x == 5.0).count() == 2);
        }
    }
}
