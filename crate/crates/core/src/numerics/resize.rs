use crate::error::{Error, Result};

use super::{Array, Scalar};

/// Source taps for one output coordinate: `(i0, i1, w0, w1)`.
type Tap = (usize, usize, f64, f64);

/// Precomputed half-pixel-center bilinear sampling between two grid sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
            return Err(Error::invalid(format!(
                "bilinear resize needs nonzero extents, got {:?} -> {:?}",
                src, dst
            )));
        }
        Ok(ResizePlan {
            src,
            dst,
            rows: taps(src.0, dst.0),
            cols: taps(src.1, dst.1),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    /// Resamples `batch` stacked `[H,W,C]` grids.
    pub fn apply<T: Scalar>(&self, x: &[T], batch: usize, channels: usize) -> Vec<T> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        assert_eq!(x.len(), batch * sh * sw * channels, "resize input length");
        if self.is_identity() {
            return x.to_vec();
        }
        let mut out = vec![T::zero(); batch * dh * dw * channels];
        for b in 0..batch {
            for (oy, &(y0, y1, wy0, wy1)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.cols.iter().enumerate() {
                    let o = ((b * dh + oy) * dw + ox) * channels;
                    let corners = [
                        (y0, x0, wy0 * wx0),
                        (y0, x1, wy0 * wx1),
                        (y1, x0, wy1 * wx0),
                        (y1, x1, wy1 * wx1),
                    ];
                    for (sy, sx, w) in corners {
                        if w == 0.0 {
                            continue;
                        }
                        let w = T::lit(w);
                        let s = ((b * sh + sy) * sw + sx) * channels;
                        for c in 0..channels {
                            out[o + c] += w * x[s + c];
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatters output gradients back.
    pub fn apply_adjoint<T: Scalar>(&self, g: &[T], batch: usize, channels: usize) -> Vec<T> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        assert_eq!(g.len(), batch * dh * dw * channels, "resize gradient length");
        if self.is_identity() {
            return g.to_vec();
        }
        let mut out = vec![T::zero(); batch * sh * sw * channels];
        for b in 0..batch {
            for (oy, &(y0, y1, wy0, wy1)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.cols.iter().enumerate() {
                    let o = ((b * dh + oy) * dw + ox) * channels;
                    let corners = [
                        (y0, x0, wy0 * wx0),
                        (y0, x1, wy0 * wx1),
                        (y1, x0, wy1 * wx0),
                        (y1, x1, wy1 * wx1),
                    ];
                    for (sy, sx, w) in corners {
                        if w == 0.0 {
                            continue;
                        }
                        let w = T::lit(w);
                        let s = ((b * sh + sy) * sw + sx) * channels;
                        for c in 0..channels {
                            out[s + c] += w * g[o + c];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Bilinear resize of an `[H,W,C]` grid (or a `[B,H,W,C]` stack) to `(h, w)`.
pub fn bilinear_resize<T: Scalar>(grid: &Array<T>, target: (usize, usize)) -> Result<Array<T>> {
    let (batch, h, w, c) = match *grid.shape() {
        [h, w, c] => (None, h, w, c),
        [b, h, w, c] => (Some(b), h, w, c),
        _ => {
            return Err(Error::invalid(format!(
                "bilinear resize expects [H,W,C] or [B,H,W,C], got {:?}",
                grid.shape()
            )))
        }
    };
    let plan = ResizePlan::new((h, w), target)?;
    let data = plan.apply(grid.data(), batch.unwrap_or(1), c);
    match batch {
        Some(b) => Array::new([b, target.0, target.1, c], data),
        None => Array::new([target.0, target.1, c], data),
    }
}
