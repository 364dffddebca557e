//! Residual multi-scale quantization, evaluated in 64-bit.

use crate::error::Result;
use crate::numerics::ResizePlan;

use super::{ScaleSchedule, TokenMap};

/// `[H*W, h*w]` weights of bilinearly upsampling an `(h, w)` grid to `dst`.
pub fn upsample_matrix(src: (usize, usize), dst: (usize, usize)) -> Result<Vec<f64>> {
    let plan = ResizePlan::new(src, dst)?;
    let (n_src, n_dst) = (src.0 * src.1, dst.0 * dst.1);
    let mut m = vec![0.0; n_dst * n_src];
    let mut onehot = vec![0.0; n_src];
    for cell in 0..n_src {
        onehot.fill(0.0);
        onehot[cell] = 1.0;
        for (p, v) in plan.apply(&onehot, 1, 1).into_iter().enumerate() {
            m[p * n_src + cell] = v;
        }
    }
    Ok(m)
}

/// Index of the closest codebook row; ties go to the lowest index.
pub fn nearest_code(v: &[f64], codebook: &[f64], dim: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, row) in codebook.chunks(dim).enumerate() {
        let d: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Relative energy decrease a non-zero code must achieve to be kept.
const ACCEPT_MARGIN: f64 = 1e-9;

/// Quantizes one latent `[H,W,C]` scale by scale.
///
/// At each scale the residual is downsampled, every cell takes its nearest
/// code, and the upsampled lookup is subtracted. When `guard` is set a cell
/// whose code would raise the full-resolution residual energy falls back to
/// code 0 (the zero vector), so the prefix reconstruction error never grows.
pub fn quantize_residual(
    latent: &[f64],
    grid: (usize, usize),
    dim: usize,
    codebook: &[f64],
    schedule: &ScaleSchedule,
    guard: bool,
) -> Result<Vec<TokenMap>> {
    let n_full = grid.0 * grid.1;
    assert_eq!(latent.len(), n_full * dim);
    let mut res = latent.to_vec();
    let mut maps = Vec::with_capacity(schedule.len());
    for &(h, w) in schedule.scales() {
        let down = ResizePlan::new(grid, (h, w))?.apply(&res, 1, dim);
        let up = upsample_matrix((h, w), grid)?;
        let cells = h * w;
        let mut indices = vec![0; cells];
        let floor = ACCEPT_MARGIN * res.iter().map(|x| x * x).sum::<f64>();
        for cell in 0..cells {
            let q = nearest_code(&down[cell * dim..(cell + 1) * dim], codebook, dim);
            if q == 0 && guard {
                continue;
            }
            let code = &codebook[q * dim..(q + 1) * dim];
            if guard {
                let mut delta = 0.0;
                for p in 0..n_full {
                    let wgt = up[p * cells + cell];
                    if wgt == 0.0 {
                        continue;
                    }
                    for c in 0..dim {
                        let r = res[p * dim + c];
                        let n = r - wgt * code[c];
                        delta += n * n - r * r;
                    }
                }
                if delta >= -floor {
                    continue;
                }
            }
            indices[cell] = q;
            for p in 0..n_full {
                let wgt = up[p * cells + cell];
                if wgt != 0.0 {
                    for c in 0..dim {
                        res[p * dim + c] -= wgt * code[c];
                    }
                }
            }
        }
        maps.push(TokenMap { h, w, indices });
    }
    Ok(maps)
}

/// Sum of upsampled lookups of the first `upto` maps, `[H,W,C]`.
pub fn reconstruct(
    maps: &[TokenMap],
    upto: usize,
    grid: (usize, usize),
    dim: usize,
    codebook: &[f64],
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; grid.0 * grid.1 * dim];
    for m in &maps[..upto] {
        let looked: Vec<f64> = m
            .indices
            .iter()
            .flat_map(|&i| codebook[i * dim..(i + 1) * dim].iter().copied())
            .collect();
        let up = ResizePlan::new((m.h, m.w), grid)?.apply(&looked, 1, dim);
        acc.iter_mut().zip(up).for_each(|(a, u)| *a += u);
    }
    Ok(acc)
}

/// Downsampled residual vectors of an unquantized decomposition, used to
/// seed codebook rows.
pub fn residual_vectors(
    latent: &[f64],
    grid: (usize, usize),
    dim: usize,
    schedule: &ScaleSchedule,
) -> Result<Vec<Vec<f64>>> {
    let mut res = latent.to_vec();
    let mut out = Vec::new();
    for &(h, w) in schedule.scales() {
        let down = ResizePlan::new(grid, (h, w))?.apply(&res, 1, dim);
        let up = ResizePlan::new((h, w), grid)?.apply(&down, 1, dim);
        res.iter_mut().zip(up).for_each(|(r, u)| *r -= u);
        out.extend(down.chunks(dim).map(|c| c.to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_matrix_rows_sum_to_one() {
        let m = upsample_matrix((2, 3), (4, 4)).unwrap();
        for row in m.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_ties_lowest_index() {
        let cb = [0.0, 0.0, 1.0, 0.0, -1.0, 0.0];
        assert_eq!(nearest_code(&[0.0, 0.0], &cb, 2), 0);
        // equidistant from rows 1 and 2
        let cb = [5.0, 5.0, 1.0, 0.0, -1.0, 0.0];
        assert_eq!(nearest_code(&[0.0, 0.0], &cb, 2), 1);
    }
}
