//! Per-pair consistency scores on 8-bit maps.

use crate::data::Image;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    let (sa, sb) = ([a.height, a.width, a.channels], [b.height, b.width, b.channels]);
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// Pixel-exact F1 of binary maps (values 0 and 255). Two empty maps score 1.
pub fn f1_edge(pred: &Image, reference: &Image) -> Result<f64> {
    same_shape("f1", pred, reference)?;
    if pred.channels != 1 || !pred.is_binary() || !reference.is_binary() {
        return Err(Error::invalid("F1 needs single-channel binary maps (0 or 255)"));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.data.iter().zip(&reference.data) {
        match (p == 255, r == 255) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let (np, nr) = (tp + fp, tp + fne);
    Ok(match (np, nr) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * tp as f64 / (np + nr) as f64,
    })
}

/// Root mean squared difference over every pixel and channel, 0-255 scale.
pub fn rmse(pred: &Image, reference: &Image) -> Result<f64> {
    same_shape("rmse", pred, reference)?;
    if pred.data.is_empty() {
        return Err(Error::invalid("rmse of empty maps"));
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&reference.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok((sum / pred.data.len() as f64).sqrt())
}

/// Normalized 2-D Gaussian window, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Mean local SSIM over every fully contained 11x11 window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if a.channels != 1 {
        return Err(Error::invalid("SSIM takes single-channel maps"));
    }
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "{w}x{h} map is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let g = win[dy * SSIM_WINDOW + dx];
                    let p = (y + dy) * w + x + dx;
                    let (va, vb) = (a.data[p] as f64, b.data[p] as f64);
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_sums_to_one() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[0], w[120]);
    }

    #[test]
    fn one_empty_map_scores_zero() {
        let empty = Image::filled(4, 4, 1, 0);
        let mut one = empty.clone();
        one.data[5] = 255;
        assert_eq!(f1_edge(&empty, &empty).unwrap(), 1.0);
        assert_eq!(f1_edge(&one, &empty).unwrap(), 0.0);
        assert_eq!(f1_edge(&empty, &one).unwrap(), 0.0);
    }
}
