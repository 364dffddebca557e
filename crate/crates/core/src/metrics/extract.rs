//! Analytic re-extraction of condition maps from rendered or generated images.

use crate::data::raster::{dilate, gaussian_blur};
use crate::data::{quantize_normal, Image, Modality, DEPTH_NEAR, DEPTH_STEP, RANK_BRIGHTNESS};
use crate::error::{Error, Result};

/// Per-pixel HSV value (max channel), 0-255.
pub fn value_channel(img: &Image) -> Vec<f64> {
    img.data
        .chunks(img.channels)
        .map(|px| *px.iter().max().expect("nonempty pixel") as f64)
        .collect()
}

fn at(v: &[f64], w: usize, h: usize, x: i64, y: i64) -> f64 {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        0.0
    } else {
        v[y as usize * w + x as usize]
    }
}

/// Sobel gradient magnitude with zero padding.
pub fn sobel_magnitude(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dx: i64, dy: i64| at(v, w, h, x + dx, y + dy);
            let gx = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
            let gy = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Otsu threshold of `values` over a 256-bin histogram spanning `[0, max]`.
/// Returns the upper edge of the last background bin.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let bins = 256;
    let mut hist = vec![0usize; bins];
    for &v in values {
        hist[((v / max * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    let total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0);
    for (t, &c) in hist.iter().enumerate().take(bins - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (total - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t + 1) as f64 / bins as f64 * max
}

/// Edge map: Sobel magnitude on the value channel above the Otsu threshold,
/// kept only on the brighter side of the step (the nearer shape owns its
/// outline, and nearer shapes are brighter).
pub fn edge_map(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let v = value_channel(img);
    let mag = sobel_magnitude(&v, w, h);
    let t = otsu_threshold(&mag);
    let mut mask = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = y as usize * w + x as usize;
            if mag[p] <= t || mag[p] == 0.0 {
                continue;
            }
            let mut local = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    local += at(&v, w, h, x + dx, y + dy);
                }
            }
            mask[p] = v[p] > local / 9.0;
        }
    }
    Image {
        width: w,
        height: h,
        channels: 1,
        data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    }
}

/// Depth from brightness rank: each fill brightness maps to its depth level.
pub fn depth_map(img: &Image) -> Image {
    let mut levels = vec![(0.0, 0u8)];
    for (rank, &b) in RANK_BRIGHTNESS.iter().enumerate() {
        levels.push((b * 255.0, DEPTH_NEAR - DEPTH_STEP * rank as u8));
    }
    let data = value_channel(img)
        .iter()
        .map(|&v| {
            levels
                .iter()
                .min_by(|a, b| (a.0 - v).abs().total_cmp(&(b.0 - v).abs()))
                .expect("levels")
                .1
        })
        .collect();
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// Re-extracts the condition of modality `m` from an RGB image.
///
/// Fills carry no shading, so normals are not recoverable; the normal proxy is
/// the camera-facing normal everywhere.
pub fn re_extract(img: &Image, m: Modality) -> Result<Image> {
    if img.channels != 3 || img.width != img.height {
        return Err(Error::invalid("re-extraction takes square RGB images"));
    }
    let n = img.width;
    let edges = || edge_map(img).data.iter().map(|&v| v == 255).collect::<Vec<bool>>();
    Ok(match m {
        Modality::Canny => edge_map(img),
        Modality::Sketch => Image::from_mask(n, &dilate(&edges(), n, 1)),
        Modality::Hed => {
            let f: Vec<f64> = edges().iter().map(|&e| if e { 255.0 } else { 0.0 }).collect();
            let blurred = gaussian_blur(&f, n, 1.0);
            Image::new(n, n, 1, blurred.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())?
        }
        Modality::Depth => depth_map(img),
        Modality::Normal => {
            let px = quantize_normal([0.0, 0.0, 1.0]);
            Image::new(n, n, 3, px.iter().copied().cycle().take(n * n * 3).collect())?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn otsu_splits_two_clusters() {
        let mut v = vec![1.0; 50];
        v.extend(vec![9.0; 50]);
        let t = otsu_threshold(&v);
        assert!(t > 1.0 && t < 9.0, "{t}");
    }

    #[test]
    fn blank_image_has_no_edges() {
        let img = Image::filled(8, 8, 3, 0);
        assert!(edge_map(&img).data.iter().all(|&v| v == 0));
    }
}
