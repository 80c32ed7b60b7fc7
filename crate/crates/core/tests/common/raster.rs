//! Scanline supersampling oracle for polygon coverage of a rectangle.

/// Fraction of `[x0,x1)×[y0,y1)` inside the polygon (even-odd rule),
/// sampled on an `s × s` grid per unit square at sample centers.
pub fn raster_coverage(poly: &[(f64, f64)], rect: (f64, f64, f64, f64), s: usize) -> f64 {
    let (x0, y0, x1, y1) = rect;
    let cols = ((x1 - x0) * s as f64).round() as i64;
    let rows = ((y1 - y0) * s as f64).round() as i64;
    let step = 1.0 / s as f64;
    let mut inside: i64 = 0;
    let mut xs = Vec::new();
    for r in 0..rows {
        let y = y0 + (r as f64 + 0.5) * step;
        xs.clear();
        for i in 0..poly.len() {
            let (ax, ay) = poly[i];
            let (bx, by) = poly[(i + 1) % poly.len()];
            if (ay <= y) != (by <= y) {
                xs.push(ax + (y - ay) * (bx - ax) / (by - ay));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // Samples k with pair[0] <= x0 + (k + 0.5)·step < pair[1].
            let lo = ((pair[0] - x0) / step - 0.5).ceil().max(0.0) as i64;
            let hi = ((pair[1] - x0) / step - 0.5).ceil().min(cols as f64) as i64;
            inside += (hi - lo).max(0);
        }
    }
    inside as f64 / (cols * rows) as f64
}

/// Polygon star-shaped about `c`: jittered, evenly spaced angles keep every
/// angular gap below π, so `c` lies in the kernel.
pub fn star(rng: &mut impl rand::Rng, c: (f64, f64), r_min: f64, r_max: f64, n: usize) -> Vec<(f64, f64)> {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let a = phase + (i as f64 + rng.random_range(0.0..0.5)) / n as f64 * std::f64::consts::TAU;
            let r = rng.random_range(r_min..r_max);
            (c.0 + r * a.cos(), c.1 + r * a.sin())
        })
        .collect()
}
