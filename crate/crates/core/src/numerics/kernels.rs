//! Eager kernels shared by the graph's forward pass and inference paths.

use crate::error::{Error, Result};

use super::{gemm, Array, MatView, Scalar};

fn mismatch<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return mismatch("matmul", a.shape(), b.shape());
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Array::zeros([m, n]);
    gemm(
        a.data(),
        MatView::dense(m, k, false),
        b.data(),
        MatView::dense(k, n, false),
        out.data_mut(),
        MatView::dense(m, n, false),
        false,
    );
    Ok(out)
}

pub fn add<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    if a.shape() != b.shape() {
        return mismatch("add", a.shape(), b.shape());
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Adds `bias` (length = trailing extent) to every row.
pub fn add_bias<T: Scalar>(a: &Array<T>, bias: &Array<T>) -> Result<Array<T>> {
    if bias.rank() != 1 || bias.len() != a.cols() {
        return mismatch("add_bias", a.shape(), bias.shape());
    }
    let mut out = a.clone();
    let c = a.cols();
    for row in out.data_mut().chunks_mut(c) {
        for (x, &b) in row.iter_mut().zip(bias.data()) {
            *x += b;
        }
    }
    Ok(out)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// `tanh(u)` via a single exponential; saturates cleanly at both ends.
#[inline]
fn tanh_exp<T: Scalar>(u: T) -> T {
    T::one() - (T::one() + T::one()) / ((u + u).exp() + T::one())
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    // 0.5 x (1 + tanh u) == x - x / (exp(2u) + 1)
    x - x / ((u + u).exp() + T::one())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = tanh_exp(k * (x + c * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(a: &Array<T>) -> Array<T> {
    a.map(gelu_scalar)
}

/// Row-wise softmax over the trailing dimension.
pub fn softmax<T: Scalar>(a: &Array<T>) -> Array<T> {
    let mut out = a.clone();
    let c = a.cols();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Per-row normalization statistics: `(xhat, rstd)`.
pub(crate) fn normalize_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(cols).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(x.len() / cols.max(1));
    for (row, out) in x.chunks(cols).zip(xhat.chunks_mut(cols)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (xhat, rstds)
}

/// Layer normalization over the trailing dimension with optional affine.
pub fn layer_norm<T: Scalar>(
    x: &Array<T>,
    gamma: Option<&Array<T>>,
    beta: Option<&Array<T>>,
    eps: f64,
) -> Result<Array<T>> {
    let c = x.cols();
    for p in [gamma, beta].into_iter().flatten() {
        if p.len() != c {
            return mismatch("layer_norm", x.shape(), p.shape());
        }
    }
    let (mut y, _) = normalize_rows(x.data(), c, T::lit(eps));
    if gamma.is_some() || beta.is_some() {
        for row in y.chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                if let Some(g) = gamma {
                    *v *= g.data()[j];
                }
                if let Some(b) = beta {
                    *v += b.data()[j];
                }
            }
        }
    }
    Array::new(x.shape().to_vec(), y)
}

/// Gathers rows of a `[rows, dim]` table.
pub fn embedding_lookup<T: Scalar>(table: &Array<T>, indices: &[usize]) -> Result<Array<T>> {
    if table.rank() != 2 {
        return Err(Error::invalid(format!(
            "embedding table must be rank 2, got {:?}",
            table.shape()
        )));
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= rows {
            return Err(Error::OutOfRange {
                what: "embedding",
                index: i,
                bound: rows,
            });
        }
        data.extend_from_slice(table.row(i));
    }
    Array::new([indices.len(), d], data)
}

/// Geometry of a multi-head attention call over `batch` independent groups.
#[derive(Clone, Debug)]
pub struct AttnGeom {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Masked multi-head attention. `mask[i * tk + j]` permits query `i` to see key `j`.
/// Returns the output and the attention probabilities `[batch, heads, tq, tk]`.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &[bool],
    geom: &AttnGeom,
) -> (Vec<T>, Vec<T>) {
    let AttnGeom {
        batch,
        tq,
        tk,
        heads,
        dim,
    } = *geom;
    let dh = geom.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); batch * tq * dim];
    let mut probs = vec![T::zero(); batch * heads * tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * tq * tk;
            let p = &mut probs[p_off..p_off + tq * tk];
            // scores = Q_h K_h^T
            gemm(
                q,
                MatView {
                    offset: b * tq * dim + h * dh,
                    rows: tq,
                    cols: dh,
                    rs: dim,
                    cs: 1,
                },
                k,
                MatView {
                    offset: b * tk * dim + h * dh,
                    rows: dh,
                    cols: tk,
                    rs: 1,
                    cs: dim,
                },
                p,
                MatView::dense(tq, tk, false),
                false,
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if mask[i * tk + j] {
                        *s * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                softmax_in_place(row);
            }
            gemm(
                p,
                MatView::dense(tq, tk, false),
                v,
                MatView {
                    offset: b * tk * dim + h * dh,
                    rows: tk,
                    cols: dh,
                    rs: dim,
                    cs: 1,
                },
                &mut out,
                MatView {
                    offset: b * tq * dim + h * dh,
                    rows: tq,
                    cols: dh,
                    rs: dim,
                    cs: 1,
                },
                false,
            );
        }
    }
    (out, probs)
}

/// Convolution patch geometry over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(dst, src)` for every in-bounds `(ky, kx)` slot: `dst` is the
    /// offset of a run of `channels` values in the column matrix and `src`
    /// the matching run in the input.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let c = self.channels;
        let patch = self.patch_len();
        let mut row = 0;
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            f(row * patch + (ky * self.kernel + kx) * c, src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let (ho, wo) = geom.out_hw();
    let c = geom.channels;
    let mut cols = vec![T::zero(); geom.batch * ho * wo * geom.patch_len()];
    geom.for_each_run(|dst, src| cols[dst..dst + c].copy_from_slice(&x[src..src + c]));
    cols
}

pub fn col2im<T: Scalar>(cols: &[T], geom: &ConvGeom) -> Vec<T> {
    let c = geom.channels;
    let mut x = vec![T::zero(); geom.batch * geom.height * geom.width * c];
    geom.for_each_run(|src, dst| {
        for (a, &b) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
            *a += b;
        }
    });
    x
}

/// Rearranges `[B,H,W,C*f*f]` into `[B,H*f,W*f,C]`; input channel
/// `(dy*f + dx)*C + c` lands at sub-pixel `(dy, dx)`. With `inverse` the
/// mapping runs the other way on flat buffers of the same length.
pub fn depth_to_space_into<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    dims: (usize, usize, usize, usize),
    factor: usize,
    inverse: bool,
) {
    let (b, h, w, c) = dims;
    let f = factor;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..f {
                    for dx in 0..f {
                        let packed = ((bi * h + y) * w + x) * c * f * f + (dy * f + dx) * c;
                        let spread = ((bi * h * f + y * f + dy) * w * f + x * f + dx) * c;
                        if inverse {
                            for ch in 0..c {
                                dst[packed + ch] += src[spread + ch];
                            }
                        } else {
                            dst[spread..spread + c].copy_from_slice(&src[packed..packed + c]);
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling of `[B,H,W,C]` by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Array<T>, factor: usize) -> Result<Array<T>> {
    if x.rank() != 4 || factor == 0 {
        return Err(Error::invalid(format!(
            "upsample expects [B,H,W,C] and factor >= 1, got {:?} x{}",
            x.shape(),
            factor
        )));
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((bi * h + y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&x.data()[s..s + c]);
            }
        }
    }
    Array::new([b, oh, ow, c], out)
}
