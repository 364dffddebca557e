use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, AttnGeom, ConvGeom};
use super::{gemm, Array, MatView, ParamId, ParamStore, ResizePlan, Scalar};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    GatherRows {
        src: Var,
        idx: Arc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<usize>>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Resize {
        x: Var,
        plan: Arc<ResizePlan>,
        batch: usize,
        channels: usize,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    DepthToSpace {
        x: Var,
        factor: usize,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations for one forward pass and differentiates them.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert!(
            value.all_finite() || !self.inputs_finite(&op),
            "non-finite output from finite inputs"
        );
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op<T>) -> bool {
        self.inputs(op)
            .iter()
            .all(|v| self.nodes[v.0].value.all_finite())
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().chain(beta.iter()).copied());
                v
            }
            Op::GatherRows { src, .. } => vec![*src],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Resize { x, .. }
            | Op::Im2Col { x, .. }
            | Op::Upsample { x, .. }
            | Op::DepthToSpace { x, .. } => vec![*x],
        }
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Untracked leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf that is not a stored parameter.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; tracked iff the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        if p.trainable {
            self.params.push((id, v));
        }
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return mismatch("sub", self.shape(a), self.shape(b));
        }
        let mut out = self.value(a).clone();
        for (x, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return mismatch("mul", self.shape(a), self.shape(b));
        }
        let mut out = self.value(a).clone();
        for (x, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), t))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_bias(self.value(a), self.value(bias))?;
        let t = self.tracked_any(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), t))
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|x| x * c);
        let t = self.tracked_any(&[a]);
        self.push(out, Op::Scale(a, c), t)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = kernels::gelu(self.value(a));
        let t = self.tracked_any(&[a]);
        self.push(out, Op::Gelu(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let t = self.tracked_any(&[a]);
        self.push(out, Op::Relu(a), t)
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).cols();
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).len() != c || self.value(p).rank() != 1 {
                return mismatch("layer_norm", self.shape(x), self.shape(p));
            }
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x).data(), c, T::lit(eps));
        let mut y = xhat.clone();
        for row in y.chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                if let Some(g) = gamma {
                    *v *= self.value(g).data()[j];
                }
                if let Some(b) = beta {
                    *v += self.value(b).data()[j];
                }
            }
        }
        let out = Array::new(self.shape(x).to_vec(), y)?;
        let mut deps = vec![x];
        deps.extend(gamma.iter().chain(beta.iter()));
        let t = self.tracked_any(&deps);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = kernels::softmax(self.value(a));
        let t = self.tracked_any(&[a]);
        self.push(out, Op::Softmax(a), t)
    }

    /// Rows of a rank-2 `src` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, idx: impl Into<Arc<Vec<usize>>>) -> Result<Var> {
        let idx = idx.into();
        let out = kernels::embedding_lookup(self.value(src), &idx)?;
        let t = self.tracked_any(&[src]);
        Ok(self.push(out, Op::GatherRows { src, idx }, t))
    }

    /// Stacks rank-2 operands with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return mismatch("concat_rows", self.shape(parts[0]), v.shape());
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Array::new([rows, cols], data)?;
        let t = self.tracked_any(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), t))
    }

    /// Joins rank-2 operands with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return mismatch("concat_cols", self.shape(parts[0]), v.shape());
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::new([rows, total], data)?;
        let t = self.tracked_any(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let t = self.tracked_any(&[a]);
        Ok(self.push(out, Op::Reshape(a), t))
    }

    /// Masked multi-head attention over `batch` groups laid out row-major:
    /// `q: [batch*tq, dim]`, `k, v: [batch*tk, dim]`, `mask: [tq*tk]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let dim = self.value(q).cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "model width {dim} not divisible by {heads} heads"
            )));
        }
        if self.shape(k) != self.shape(v) || self.value(k).cols() != dim {
            return mismatch("attention", self.shape(k), self.shape(v));
        }
        let (qr, kr) = (self.value(q).rows(), self.value(k).rows());
        if batch == 0 || qr % batch != 0 || kr % batch != 0 {
            return mismatch("attention", self.shape(q), self.shape(k));
        }
        let geom = AttnGeom {
            batch,
            tq: qr / batch,
            tk: kr / batch,
            heads,
            dim,
        };
        if mask.len() != geom.tq * geom.tk {
            return mismatch("attention mask", &[geom.tq, geom.tk], &[mask.len()]);
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            &geom,
        );
        let out = Array::new([qr, dim], out)?;
        let t = self.tracked_any(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            t,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmaxed logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: impl Into<Arc<Vec<usize>>>) -> Result<Var> {
        let targets = targets.into();
        let l = self.value(logits);
        let (n, vocab) = (l.rows(), l.cols());
        if targets.len() != n {
            return mismatch("cross_entropy", l.shape(), &[targets.len()]);
        }
        let probs = kernels::softmax(l).into_data();
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::OutOfRange {
                    what: "target token",
                    index: t,
                    bound: vocab,
                });
            }
            // log-softmax computed directly for accuracy
            let row = l.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = max
                + row
                    .iter()
                    .map(|&x| (x.as_f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[t].as_f64();
        }
        let out = Array::scalar(T::lit(loss / n.max(1) as f64));
        let t = self.tracked_any(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            t,
        ))
    }

    /// `mean((a - b)^2)` as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return mismatch("mse", self.shape(a), self.shape(b));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let out = Array::scalar(T::lit(s / va.len().max(1) as f64));
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        let t = self.tracked_any(&[a]);
        self.push(out, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let out = Array::scalar(self.value(a).sum() / n);
        let t = self.tracked_any(&[a]);
        self.push(out, Op::Mean(a), t)
    }

    /// Bilinear resize of a `[B,H,W,C]` operand.
    pub fn resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (b, h, w, c) = match *self.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::invalid(format!(
                    "resize expects [B,H,W,C], got {:?}",
                    self.shape(x)
                )))
            }
        };
        let plan = ResizePlan::new((h, w), target)?;
        let data = plan.apply(self.value(x).data(), b, c);
        let out = Array::new([b, target.0, target.1, c], data)?;
        let t = self.tracked_any(&[x]);
        Ok(self.push(
            out,
            Op::Resize {
                x,
                plan: Arc::new(plan),
                batch: b,
                channels: c,
            },
            t,
        ))
    }

    /// Convolution patches of a `[B,H,W,C]` operand as `[B*Ho*Wo, k*k*C]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (b, h, w, c) = match *self.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::invalid(format!(
                    "im2col expects [B,H,W,C], got {:?}",
                    self.shape(x)
                )))
            }
        };
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::invalid(format!(
                "invalid conv geometry k={kernel} s={stride} p={pad} on {h}x{w}"
            )));
        }
        let geom = ConvGeom {
            batch: b,
            height: h,
            width: w,
            channels: c,
            kernel,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = Array::new(
            [b * ho * wo, geom.patch_len()],
            kernels::im2col(self.value(x).data(), &geom),
        )?;
        let t = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Im2Col { x, geom }, t))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(x), factor)?;
        let t = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Upsample { x, factor }, t))
    }

    /// Sub-pixel rearrangement `[B,H,W,C*f*f] -> [B,H*f,W*f,C]`.
    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, h, w, cf) = match *self.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::invalid(format!(
                    "depth_to_space expects [B,H,W,C], got {:?}",
                    self.shape(x)
                )))
            }
        };
        if factor == 0 || cf % (factor * factor) != 0 {
            return Err(Error::invalid(format!(
                "depth_to_space factor {factor} does not divide {cf} channels"
            )));
        }
        let c = cf / (factor * factor);
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::depth_to_space_into(self.value(x).data(), &mut out, (b, h, w, c), factor, false);
        let out = Array::new([b, h * factor, w * factor, c], out)?;
        let t = self.tracked_any(&[x]);
        Ok(self.push(out, Op::DepthToSpace { x, factor }, t))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Array<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Array::zeros(self.shape(v).to_vec()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = G B^T ; dB = A^T G
                self.accumulate_with(grads, *a, |da| {
                    gemm(
                        gd,
                        MatView::dense(m, n, false),
                        vb.data(),
                        MatView::dense(n, k, true),
                        da,
                        MatView::dense(m, k, false),
                        true,
                    )
                });
                self.accumulate_with(grads, *b, |db| {
                    gemm(
                        va.data(),
                        MatView::dense(k, m, true),
                        gd,
                        MatView::dense(m, n, false),
                        db,
                        MatView::dense(k, n, false),
                        true,
                    )
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * vb[i];
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * va[i];
                    }
                });
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let c = g.cols();
                self.accumulate_with(grads, *b, |d| {
                    for row in gd.chunks(c) {
                        for (x, &y) in d.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.accumulate_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * kernels::gelu_grad_scalar(va[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.accumulate_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > T::zero() {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let n = T::from_usize(c).unwrap();
                if let Some(gm) = gamma {
                    self.accumulate_with(grads, *gm, |d| {
                        for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                d[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if let Some(bt) = beta {
                    self.accumulate_with(grads, *bt, |d| {
                        for grow in gd.chunks(c) {
                            for j in 0..c {
                                d[j] += grow[j];
                            }
                        }
                    });
                }
                let gvals = gamma.map(|gm| self.value(gm).data());
                self.accumulate_with(grads, *x, |d| {
                    let mut dxhat = vec![T::zero(); c];
                    for (r, ((grow, hrow), drow)) in gd
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(d.chunks_mut(c))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            dxhat[j] = match gvals {
                                Some(gv) => grow[j] * gv[j],
                                None => grow[j],
                            };
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for j in 0..c {
                            drow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = g.cols();
                self.accumulate_with(grads, *a, |d| {
                    for ((yrow, grow), drow) in y.chunks(c).zip(gd.chunks(c)).zip(d.chunks_mut(c))
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { src, idx } => {
                let c = g.cols();
                self.accumulate_with(grads, *src, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += gd[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &gd[off..off + len];
                    self.accumulate_with(grads, p, |d| {
                        for (x, &y) in d.iter_mut().zip(slice) {
                            *x += y;
                        }
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut col_off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate_with(grads, p, |d| {
                        for (r, drow) in d.chunks_mut(c).enumerate() {
                            let src = &gd[r * total + col_off..r * total + col_off + c];
                            for (x, &y) in drow.iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    col_off += c;
                }
            }
            Op::Reshape(a) => {
                self.accumulate_with(grads, *a, |d| {
                    for (x, &y) in d.iter_mut().zip(gd) {
                        *x += y;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => self.attention_backward(*q, *k, *v, geom, probs, gd, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = gd[0] / T::from_usize(targets.len().max(1)).unwrap();
                self.accumulate_with(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &probs[r * vocab..(r + 1) * vocab];
                        let drow = &mut d[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            drow[j] += scale * row[j];
                        }
                        drow[t] -= scale;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = T::lit(2.0) * gd[0] / T::from_usize(va.len().max(1)).unwrap();
                self.accumulate_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += s * (va[i] - vb[i]);
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= s * (va[i] - vb[i]);
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate_with(grads, *a, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let s = gd[0] / T::from_usize(self.value(*a).len().max(1)).unwrap();
                self.accumulate_with(grads, *a, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Resize {
                x,
                plan,
                batch,
                channels,
            } => {
                let back = plan.apply_adjoint(gd, *batch, *channels);
                self.accumulate_with(grads, *x, |d| {
                    for (x, y) in d.iter_mut().zip(back) {
                        *x += y;
                    }
                });
            }
            Op::Im2Col { x, geom } => {
                let back = kernels::col2im(gd, geom);
                self.accumulate_with(grads, *x, |d| {
                    for (x, y) in d.iter_mut().zip(back) {
                        *x += y;
                    }
                });
            }
            Op::DepthToSpace { x, factor } => {
                let s = self.shape(*x);
                let dims = (s[0], s[1], s[2], s[3] / (factor * factor));
                self.accumulate_with(grads, *x, |d| {
                    kernels::depth_to_space_into(gd, d, dims, *factor, true);
                });
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                self.accumulate_with(grads, *x, |d| {
                    for bi in 0..b {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let o = ((bi * oh + y) * ow + xx) * c;
                                let s = ((bi * h + y / factor) * w + xx / factor) * c;
                                for ch in 0..c {
                                    d[s + ch] += gd[o + ch];
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttnGeom,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Array<T>>],
    ) {
        let AttnGeom {
            batch,
            tq,
            tk,
            heads,
            dim,
        } = *geom;
        let dh = geom.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); vq.len()];
        let mut dk = vec![T::zero(); vk.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); tq * tk];
        let head_view = |t: usize, b: usize, h: usize| MatView {
            offset: b * t * dim + h * dh,
            rows: t,
            cols: dh,
            rs: dim,
            cs: 1,
        };
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let p = &probs[p_off..p_off + tq * tk];
                // dV += P^T dO
                gemm(
                    p,
                    MatView::dense(tk, tq, true),
                    gd,
                    head_view(tq, b, h),
                    &mut dv,
                    head_view(tk, b, h),
                    true,
                );
                // dP = dO V^T
                let vt = MatView {
                    offset: b * tk * dim + h * dh,
                    rows: dh,
                    cols: tk,
                    rs: 1,
                    cs: dim,
                };
                gemm(
                    gd,
                    head_view(tq, b, h),
                    vv,
                    vt,
                    &mut dp,
                    MatView::dense(tq, tk, false),
                    false,
                );
                // dS = P * (dP - rowsum(dP * P)) * scale
                for i in 0..tq {
                    let prow = &p[i * tk..(i + 1) * tk];
                    let drow = &mut dp[i * tk..(i + 1) * tk];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..tk {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                gemm(
                    &dp,
                    MatView::dense(tq, tk, false),
                    vk,
                    head_view(tk, b, h),
                    &mut dq,
                    head_view(tq, b, h),
                    true,
                );
                gemm(
                    &dp,
                    MatView::dense(tk, tq, true),
                    vq,
                    head_view(tq, b, h),
                    &mut dk,
                    head_view(tk, b, h),
                    true,
                );
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            self.accumulate_with(grads, var, |acc| {
                for (x, y) in acc.iter_mut().zip(d) {
                    *x += y;
                }
            });
        }
    }
}

/// Result of a backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Array<T>>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for any tracked node; `None` for untracked nodes or nodes
    /// the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every trainable parameter leaf; zero when off the loss path.
    pub fn params(&self) -> Vec<(ParamId, Array<T>)> {
        self.params
            .iter()
            .map(|&(id, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Array::zeros(self.shapes[v.0].clone()));
                (id, g)
            })
            .collect()
    }

    pub fn param(&self, id: ParamId) -> Option<Array<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|&(_, v)| {
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| Array::zeros(self.shapes[v.0].clone()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Array::zeros([2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn off_path_param_gets_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Array::full([2], 1.5));
        let b = store.add("b", Array::full([2, 2], 0.5));
        let frozen = store.add("frozen", Array::full([2], 1.0));
        store.set_trainable(frozen, false);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let _vb = g.param(&store, b);
        let vf = g.param(&store, frozen);
        let prod = g.mul(va, vf).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let by_id: HashMap<_, _> = grads.params().into_iter().collect();
        assert_eq!(by_id[&a].data(), &[1.0, 1.0]);
        assert_eq!(by_id[&b], Array::zeros([2, 2]));
        assert!(!by_id.contains_key(&frozen));
        assert!(grads.wrt(vf).is_none());
    }

    #[test]
    fn constants_do_not_receive_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Array::full([2], 2.0));
        let c = g.constant(Array::full([2], 3.0));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.wrt(c).is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Array::zeros([5, 256]));
        let ce = g.cross_entropy(l, vec![0, 3, 255, 17, 9]).unwrap();
        assert!((g.value(ce).data()[0] - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::<f32>::new();
        let l = g.input(Array::zeros([1, 4]));
        assert!(g.cross_entropy(l, vec![4]).is_err());
    }
}
