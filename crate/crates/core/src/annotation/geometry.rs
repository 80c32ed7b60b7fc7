//! Planar polygon primitives: shoelace area, half-plane clipping, simplicity
//! test and ear-clipping triangulation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    /// True when the two rectangles share positive area.
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn bounding(points: &[Point]) -> Self {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            r.x0 = r.x0.min(p.x);
            r.y0 = r.y0.min(p.y);
            r.x1 = r.x1.max(p.x);
            r.y1 = r.y1.max(p.y);
        }
        r
    }
}

#[inline]
pub fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Twice the signed area (positive for counter-clockwise in a y-up frame).
///
/// Coordinates are taken relative to the first vertex, so polygons lying on a
/// single axis-parallel line evaluate to exactly zero.
pub fn signed_area2(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let o = poly[0];
    let mut s = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        s += (a.x - o.x) * (b.y - o.y) - (b.x - o.x) * (a.y - o.y);
    }
    s
}

/// Absolute polygon area by the shoelace formula.
pub fn shoelace_area(poly: &[Point]) -> f64 {
    signed_area2(poly).abs() * 0.5
}

#[derive(Clone, Copy)]
enum Side {
    Left(f64),
    Right(f64),
    Bottom(f64),
    Top(f64),
}

impl Side {
    fn inside(self, p: Point) -> bool {
        match self {
            Side::Left(x) => p.x >= x,
            Side::Right(x) => p.x <= x,
            Side::Bottom(y) => p.y >= y,
            Side::Top(y) => p.y <= y,
        }
    }

    /// Crossing of segment `a → b` with the boundary line; the clipped
    /// coordinate is set exactly on the line.
    fn cross(self, a: Point, b: Point) -> Point {
        match self {
            Side::Left(x) | Side::Right(x) => {
                let t = (x - a.x) / (b.x - a.x);
                Point::new(x, a.y + t * (b.y - a.y))
            }
            Side::Bottom(y) | Side::Top(y) => {
                let t = (y - a.y) / (b.y - a.y);
                Point::new(a.x + t * (b.x - a.x), y)
            }
        }
    }
}

fn clip_side(input: &[Point], side: Side, out: &mut Vec<Point>) {
    out.clear();
    let n = input.len();
    if n == 0 {
        return;
    }
    let mut prev = input[n - 1];
    let mut prev_in = side.inside(prev);
    for &cur in input {
        let cur_in = side.inside(cur);
        if cur_in {
            if !prev_in {
                out.push(side.cross(prev, cur));
            }
            out.push(cur);
        } else if prev_in {
            out.push(side.cross(prev, cur));
        }
        prev = cur;
        prev_in = cur_in;
    }
}

/// Sutherland–Hodgman clip of an arbitrary simple polygon to a rectangle.
///
/// For non-convex input the result may contain zero-width bridges along the
/// rectangle boundary; they carry no area, so the shoelace area of the output
/// is exactly the area of the intersection.
pub fn clip_to_rect(poly: &[Point], r: &Rect) -> Vec<Point> {
    let mut a = poly.to_vec();
    let mut b = Vec::with_capacity(poly.len() + 4);
    for side in [Side::Left(r.x0), Side::Right(r.x1), Side::Bottom(r.y0), Side::Top(r.y1)] {
        clip_side(&a, side, &mut b);
        std::mem::swap(&mut a, &mut b);
        if a.is_empty() {
            break;
        }
    }
    a
}

/// Clips a polygon against a counter-clockwise convex polygon.
pub fn clip_to_convex(poly: &[Point], convex_ccw: &[Point]) -> Vec<Point> {
    let mut a = poly.to_vec();
    let mut b = Vec::with_capacity(poly.len() + convex_ccw.len());
    let m = convex_ccw.len();
    for i in 0..m {
        let e0 = convex_ccw[i];
        let e1 = convex_ccw[(i + 1) % m];
        b.clear();
        let n = a.len();
        if n == 0 {
            break;
        }
        let side = |p: Point| orient(e0, e1, p);
        let mut prev = a[n - 1];
        let mut sp = side(prev);
        for &cur in &a {
            let sc = side(cur);
            if sc >= 0.0 {
                if sp < 0.0 {
                    let t = sp / (sp - sc);
                    b.push(Point::new(prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)));
                }
                b.push(cur);
            } else if sp >= 0.0 {
                let t = sp / (sp - sc);
                b.push(Point::new(prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)));
            }
            prev = cur;
            sp = sc;
        }
        std::mem::swap(&mut a, &mut b);
    }
    a
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching and collinear overlap count).
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// O(n²) simplicity test over all edge pairs.
///
/// Adjacent edges may only share their common vertex; folding back onto the
/// previous edge counts as self-intersection.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        for j in (i + 1)..n {
            let c = poly[j];
            let d = poly[(j + 1) % n];
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared vertex is expected; collinear backtracking is not.
                let (shared, p, q) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                let o = orient(p, shared, q);
                if o == 0.0 {
                    let dot = (p.x - shared.x) * (q.x - shared.x) + (p.y - shared.y) * (q.y - shared.y);
                    if dot > 0.0 {
                        return false;
                    }
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn point_in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
}

/// Ear-clipping triangulation of a simple polygon; triangles are returned
/// counter-clockwise and their areas sum to the polygon area.
pub fn triangulate(poly: &[Point]) -> Vec<[Point; 3]> {
    let mut pts: Vec<Point> = poly.to_vec();
    if signed_area2(&pts) < 0.0 {
        pts.reverse();
    }
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let mut tris = Vec::with_capacity(pts.len().saturating_sub(2));
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let ia = idx[(k + m - 1) % m];
            let ib = idx[k];
            let ic = idx[(k + 1) % m];
            let (a, b, c) = (pts[ia], pts[ib], pts[ic]);
            if orient(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                j != ia
                    && j != ib
                    && j != ic
                    && pts[j] != a
                    && pts[j] != b
                    && pts[j] != c
                    && point_in_triangle(pts[j], a, b, c)
            });
            if blocked {
                continue;
            }
            tris.push([a, b, c]);
            idx.remove(k);
            clipped = true;
            break;
        }
        if clipped {
            continue;
        }
        // No strict ear: drop a collinear vertex, which carries no area.
        if let Some(k) = (0..m).find(|&k| {
            orient(pts[idx[(k + m - 1) % m]], pts[idx[k]], pts[idx[(k + 1) % m]]) == 0.0
        }) {
            idx.remove(k);
            continue;
        }
        // Numerically stuck; a fan over the remainder keeps the signed area.
        tracing::debug!(remaining = m, "ear clipping fell back to a fan");
        for k in 1..m - 1 {
            tris.push([pts[idx[0]], pts[idx[k]], pts[idx[k + 1]]]);
        }
        return tris;
    }
    if idx.len() == 3 {
        let (a, b, c) = (pts[idx[0]], pts[idx[1]], pts[idx[2]]);
        if orient(a, b, c) != 0.0 {
            tris.push([a, b, c]);
        }
    }
    tris
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    /// Supersampled point-in-polygon count over the bounding box.
    fn raster_area(p: &[Point], samples_per_unit: usize) -> f64 {
        let b = Rect::bounding(p);
        let step = 1.0 / samples_per_unit as f64;
        let nx = ((b.x1 - b.x0) / step).ceil() as usize;
        let ny = ((b.y1 - b.y0) / step).ceil() as usize;
        let mut inside = 0usize;
        for j in 0..ny {
            let y = b.y0 + (j as f64 + 0.5) * step;
            for i in 0..nx {
                let x = b.x0 + (i as f64 + 0.5) * step;
                let mut c = false;
                for k in 0..p.len() {
                    let (a, q) = (p[k], p[(k + 1) % p.len()]);
                    if (a.y > y) != (q.y > y) && x < a.x + (y - a.y) / (q.y - a.y) * (q.x - a.x) {
                        c = !c;
                    }
                }
                inside += c as usize;
            }
        }
        inside as f64 * step * step
    }

    #[test]
    fn unit_square() {
        assert_eq!(shoelace_area(&poly(&[(0., 0.), (1., 0.), (1., 1.), (0., 1.)])), 1.0);
    }

    #[test]
    fn right_triangle() {
        assert_eq!(shoelace_area(&poly(&[(0., 0.), (4., 0.), (0., 3.)])), 6.0);
    }

    #[test]
    fn l_shape_matches_raster_oracle() {
        let l = poly(&[(0., 0.), (2., 0.), (2., 1.), (1., 1.), (1., 2.), (0., 2.)]);
        let oracle = raster_area(&l, 256);
        assert!((oracle - 3.0).abs() < 1e-3, "oracle {oracle}");
        assert_eq!(shoelace_area(&l), 3.0);
    }

    #[test]
    fn area_is_orientation_independent() {
        let mut l = poly(&[(0., 0.), (2., 0.), (2., 1.), (1., 1.), (1., 2.), (0., 2.)]);
        let a = shoelace_area(&l);
        l.reverse();
        assert_eq!(shoelace_area(&l), a);
    }

    #[test]
    fn collinear_boundary_sliver_is_exactly_zero() {
        let p = poly(&[(5.0, 0.1), (5.0, 3.7), (5.0, 2.2)]);
        assert_eq!(signed_area2(&p), 0.0);
    }

    #[test]
    fn clip_rect_half() {
        let sq = poly(&[(-1., -1.), (1., -1.), (1., 1.), (-1., 1.)]);
        let c = clip_to_rect(&sq, &Rect::new(0., -5., 5., 5.));
        assert_eq!(shoelace_area(&c), 2.0);
        assert!(clip_to_rect(&sq, &Rect::new(3., 3., 4., 4.)).is_empty());
    }

    #[test]
    fn clip_non_convex_keeps_area() {
        // U shape whose arms both cross the clip window.
        let u = poly(&[(0., 0.), (3., 0.), (3., 3.), (2., 3.), (2., 1.), (1., 1.), (1., 3.), (0., 3.)]);
        let c = clip_to_rect(&u, &Rect::new(-1., 2., 4., 4.));
        assert!((shoelace_area(&c) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn simplicity() {
        assert!(is_simple(&poly(&[(0., 0.), (2., 0.), (2., 1.), (1., 1.), (1., 2.), (0., 2.)])));
        assert!(!is_simple(&poly(&[(0., 0.), (2., 2.), (2., 0.), (0., 2.)])));
        // Spike folding back on itself.
        assert!(!is_simple(&poly(&[(0., 0.), (2., 0.), (1., 0.), (1., 1.)])));
        // Vertex touching a non-adjacent edge.
        assert!(!is_simple(&poly(&[(0., 0.), (4., 0.), (4., 4.), (2., 0.), (0., 4.)])));
    }

    #[test]
    fn triangulation_preserves_area() {
        let shapes = [
            poly(&[(0., 0.), (2., 0.), (2., 1.), (1., 1.), (1., 2.), (0., 2.)]),
            poly(&[(0., 0.), (3., 0.), (3., 3.), (2., 3.), (2., 1.), (1., 1.), (1., 3.), (0., 3.)]),
            poly(&[(0., 0.), (1., 0.), (2., 0.), (2., 2.), (0., 2.)]),
        ];
        for s in &shapes {
            let tris = triangulate(s);
            let sum: f64 = tris.iter().map(|t| shoelace_area(t)).sum();
            assert!((sum - shoelace_area(s)).abs() < 1e-12);
            assert!(tris.iter().all(|t| orient(t[0], t[1], t[2]) > 0.0));
        }
    }

    #[test]
    fn convex_clip_matches_rect_clip() {
        let u = poly(&[(0., 0.), (3., 0.), (3., 3.), (2., 3.), (2., 1.), (1., 1.), (1., 3.), (0., 3.)]);
        let r = Rect::new(0.5, 0.5, 2.5, 2.5);
        let as_poly = poly(&[(0.5, 0.5), (2.5, 0.5), (2.5, 2.5), (0.5, 2.5)]);
        let a = shoelace_area(&clip_to_rect(&u, &r));
        let b = shoelace_area(&clip_to_convex(&u, &as_poly));
        assert!((a - b).abs() < 1e-12);
    }
}
