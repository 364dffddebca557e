//! Integer rasterization primitives on a fixed square canvas.

/// Pixel coordinate; may lie outside the canvas before clipping.
pub type Px = (i32, i32);

/// Midpoint circle in closed form: in the first octant row `y` takes the
/// largest column `x` with `x(x - 1) <= r^2 - y^2` (the integer midpoint
/// decision), mirrored into all eight octants.
pub fn circle_outline(cx: i32, cy: i32, r: i32) -> Vec<Px> {
    let mut pts = Vec::new();
    if r <= 0 {
        pts.push((cx, cy));
        return pts;
    }
    let rr = (r as i64) * (r as i64);
    let mut y: i64 = 0;
    loop {
        let budget = rr - y * y;
        let mut x = r as i64;
        while x > 0 && x * (x - 1) > budget {
            x -= 1;
        }
        if x < y {
            break;
        }
        let (x, yy) = (x as i32, y as i32);
        for (dx, dy) in [
            (x, yy),
            (yy, x),
            (-yy, x),
            (-x, yy),
            (-x, -yy),
            (-yy, -x),
            (yy, -x),
            (x, -yy),
        ] {
            pts.push((cx + dx, cy + dy));
        }
        y += 1;
    }
    dedup(pts)
}

/// All-octant Bresenham segment including both endpoints.
pub fn line(a: Px, b: Px) -> Vec<Px> {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut pts = Vec::new();
    loop {
        pts.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    pts
}

pub fn rect_outline(x0: i32, y0: i32, x1: i32, y1: i32) -> Vec<Px> {
    let mut pts = Vec::new();
    for x in x0..=x1 {
        pts.push((x, y0));
        pts.push((x, y1));
    }
    for y in y0..=y1 {
        pts.push((x0, y));
        pts.push((x1, y));
    }
    dedup(pts)
}

pub fn polygon_outline(vertices: &[Px]) -> Vec<Px> {
    let mut pts = Vec::new();
    for i in 0..vertices.len() {
        pts.extend(line(vertices[i], vertices[(i + 1) % vertices.len()]));
    }
    dedup(pts)
}

fn dedup(mut pts: Vec<Px>) -> Vec<Px> {
    pts.sort_unstable();
    pts.dedup();
    pts
}

/// Filled region of a convex outline: every row spans its extreme outline pixels.
pub fn fill_convex(outline: &[Px], size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let mut spans: std::collections::BTreeMap<i32, (i32, i32)> = Default::default();
    for &(x, y) in outline {
        let e = spans.entry(y).or_insert((x, x));
        e.0 = e.0.min(x);
        e.1 = e.1.max(x);
    }
    for (y, (lo, hi)) in spans {
        if y < 0 || y >= size as i32 {
            continue;
        }
        for x in lo.max(0)..=hi.min(size as i32 - 1) {
            mask[y as usize * size + x as usize] = true;
        }
    }
    mask
}

pub fn plot(mask: &mut [bool], size: usize, pts: &[Px]) {
    for &(x, y) in pts {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            mask[y as usize * size + x as usize] = true;
        }
    }
}

/// Separable Gaussian blur with zero padding, kernel truncated at `3 sigma`.
pub fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= norm);
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let off = j as i64 - radius;
                    let (sx, sy) = if horizontal {
                        (x as i64 + off, y as i64)
                    } else {
                        (x as i64, y as i64 + off)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < size && (sy as usize) < size {
                        acc += w * input[sy as usize * size + sx as usize];
                    }
                }
                out[y * size + x] = acc;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Binary dilation with a `(2r+1)^2` square structuring element.
pub fn dilate(mask: &[bool], size: usize, r: i32) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for y in 0..size as i32 {
        for x in 0..size as i32 {
            if !mask[y as usize * size + x as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < size as i32 && ny < size as i32 {
                        out[ny as usize * size + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_endpoints_and_connectivity() {
        let pts = line((0, 0), (7, 3));
        assert_eq!(pts.first(), Some(&(0, 0)));
        assert_eq!(pts.last(), Some(&(7, 3)));
        for w in pts.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
    }

    #[test]
    fn blur_preserves_mass_away_from_border() {
        let mut src = vec![0.0; 16 * 16];
        src[8 * 16 + 8] = 1.0;
        let out = gaussian_blur(&src, 16, 1.0);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out[8 * 16 + 8] > out[8 * 16 + 9]);
    }
}
