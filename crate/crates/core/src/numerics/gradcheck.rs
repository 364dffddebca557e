//! Central finite-difference oracle for graph gradients.
//!
//! The oracle only ever evaluates forward passes, in `f64`, so it shares no
//! code with the backward sweep it checks.

use crate::error::Result;

use super::{Array, Graph, Scalar, Var};

/// A scalar-valued function of several array inputs, expressible at any precision.
pub trait GraphFn {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error across all inputs.
    pub max_rel_err: f64,
    pub elements: usize,
}

fn eval_f64(f: &impl GraphFn, inputs: &[Array<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.constant(a.clone())).collect();
    let out = f.build(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Analytic gradients computed at precision `T` versus central differences
/// of the `f64` forward pass with step `h`.
///
/// The relative error of element `i` is `|a_i - n_i| / max(|a_i|, |n_i|, floor)`
/// where `floor = 1e-2 * max_j |n_j|` keeps near-zero entries from dominating.
pub fn check<T: Scalar>(f: &impl GraphFn, inputs: &[Array<f64>], h: f64) -> Result<GradCheckReport> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.cast())).collect();
    let out = f.build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut max_rel: f64 = 0.0;
    let mut elements = 0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(vars[which]) {
            Some(a) => a.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            numeric.push((eval_f64(f, &plus)? - eval_f64(f, &minus)?) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let floor = (1e-2 * scale).max(1e-12);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            max_rel = max_rel.max(rel);
        }
        elements += input.len();
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        elements,
    })
}

/// Deterministic weights used to reduce non-scalar op outputs to a scalar.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.731 + 0.3).sin()).collect()
}

fn reduce<T: Scalar>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = Array::new(shape, probe_weights(g.value(out).len()))?.cast::<T>();
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Which differentiable op a [`OpCase`] exercises.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale(f64),
    Gelu,
    Relu,
    LayerNorm,
    Softmax,
    GatherRows(Vec<usize>),
    ConcatRows,
    ConcatCols,
    Reshape(Vec<usize>),
    Attention {
        heads: usize,
        batch: usize,
        mask: Vec<bool>,
    },
    CrossEntropy(Vec<usize>),
    Mse,
    Sum,
    Mean,
    Resize(usize, usize),
    Im2Col {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Upsample(usize),
    DepthToSpace(usize),
}

/// One op applied to concrete random inputs.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub name: &'static str,
    pub kind: OpKind,
    pub inputs: Vec<Array<f64>>,
}

impl GraphFn for OpCase {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let out = match &self.kind {
            OpKind::MatMul => g.matmul(x[0], x[1])?,
            OpKind::Add => g.add(x[0], x[1])?,
            OpKind::Sub => g.sub(x[0], x[1])?,
            OpKind::Mul => g.mul(x[0], x[1])?,
            OpKind::AddBias => g.add_bias(x[0], x[1])?,
            OpKind::Scale(c) => g.scale(x[0], *c),
            OpKind::Gelu => g.gelu(x[0]),
            OpKind::Relu => g.relu(x[0]),
            OpKind::LayerNorm => g.layer_norm(x[0], Some(x[1]), Some(x[2]), 1e-5)?,
            OpKind::Softmax => g.softmax(x[0]),
            OpKind::GatherRows(idx) => g.gather_rows(x[0], idx.clone())?,
            OpKind::ConcatRows => g.concat_rows(x)?,
            OpKind::ConcatCols => g.concat_cols(x)?,
            OpKind::Reshape(s) => g.reshape(x[0], s.clone())?,
            OpKind::Attention { heads, batch, mask } => {
                g.attention(x[0], x[1], x[2], *heads, *batch, mask)?
            }
            OpKind::CrossEntropy(t) => return g.cross_entropy(x[0], t.clone()),
            OpKind::Mse => return g.mse(x[0], x[1]),
            OpKind::Sum => return Ok(g.sum(x[0])),
            OpKind::Mean => return Ok(g.mean(x[0])),
            OpKind::Resize(h, w) => g.resize(x[0], (*h, *w))?,
            OpKind::Im2Col {
                kernel,
                stride,
                pad,
            } => g.im2col(x[0], *kernel, *stride, *pad)?,
            OpKind::Upsample(f) => g.upsample(x[0], *f)?,
            OpKind::DepthToSpace(f) => g.depth_to_space(x[0], *f)?,
        };
        reduce(g, out)
    }
}

/// Five random instances of every differentiable graph op.
pub fn op_catalog(seed: u64) -> Vec<OpCase> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut arr = |shape: &[usize]| -> Array<f64> {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let mut cases = Vec::new();
    let mut push = |name, kind, inputs| cases.push(OpCase { name, kind, inputs });

    for (m, k, n) in [(1, 1, 1), (2, 3, 4), (5, 2, 3), (3, 7, 2), (4, 4, 4)] {
        push("matmul", OpKind::MatMul, vec![arr(&[m, k]), arr(&[k, n])]);
    }
    let elementwise: [&[usize]; 5] = [&[3], &[2, 3], &[4, 5], &[1, 7], &[2, 3, 4]];
    for s in elementwise {
        push("add", OpKind::Add, vec![arr(s), arr(s)]);
        push("sub", OpKind::Sub, vec![arr(s), arr(s)]);
        push("mul", OpKind::Mul, vec![arr(s), arr(s)]);
        push("scale", OpKind::Scale(-1.7), vec![arr(s)]);
        push("gelu", OpKind::Gelu, vec![arr(s).map(|v| v * 3.0)]);
        // keep relu inputs away from the kink
        push(
            "relu",
            OpKind::Relu,
            vec![arr(s).map(|v| v.signum() * (0.1 + v.abs()))],
        );
        push("mse", OpKind::Mse, vec![arr(s), arr(s)]);
        push("sum", OpKind::Sum, vec![arr(s)]);
        push("mean", OpKind::Mean, vec![arr(s)]);
    }
    for (r, c) in [(2, 3), (4, 5), (1, 1), (6, 4), (3, 2)] {
        push("add_bias", OpKind::AddBias, vec![arr(&[r, c]), arr(&[c])]);
    }
    for (r, c) in [(1, 4), (3, 5), (2, 8), (4, 3), (2, 16)] {
        push(
            "layer_norm",
            OpKind::LayerNorm,
            vec![arr(&[r, c]).map(|v| v * 2.0), arr(&[c]), arr(&[c])],
        );
        push("softmax", OpKind::Softmax, vec![arr(&[r, c]).map(|v| v * 3.0)]);
    }
    for (rows, d, idx) in [
        (5, 3, vec![0, 4, 4, 2]),
        (2, 2, vec![1]),
        (7, 4, vec![6, 0, 3]),
        (3, 5, vec![2, 2, 2, 1, 0]),
        (4, 1, vec![3, 1]),
    ] {
        push("gather_rows", OpKind::GatherRows(idx), vec![arr(&[rows, d])]);
    }
    for (r1, r2, c) in [(1, 1, 1), (2, 3, 4), (4, 1, 2), (3, 3, 3), (1, 5, 6)] {
        push("concat_rows", OpKind::ConcatRows, vec![arr(&[r1, c]), arr(&[r2, c])]);
        push("concat_cols", OpKind::ConcatCols, vec![arr(&[c, r1]), arr(&[c, r2])]);
    }
    for (from, to) in [
        (vec![6], vec![2, 3]),
        (vec![2, 3], vec![3, 2]),
        (vec![2, 2, 2], vec![8]),
        (vec![4, 3], vec![1, 12]),
        (vec![1, 5], vec![5, 1]),
    ] {
        push("reshape", OpKind::Reshape(to), vec![arr(&from)]);
    }
    for (batch, tq, tk, heads, dim) in [(1, 1, 1, 1, 2), (2, 3, 3, 1, 4), (1, 4, 6, 2, 4), (2, 5, 5, 2, 6), (3, 2, 4, 4, 8)] {
        // scattered mask with at least one visible key per query
        let mut mask: Vec<bool> = (0..tq * tk)
            .map(|i| (i * 7 + batch + heads) % 3 != 0)
            .collect();
        for i in 0..tq {
            mask[i * tk + i % tk] = true;
        }
        push(
            "attention",
            OpKind::Attention { heads, batch, mask },
            vec![
                arr(&[batch * tq, dim]),
                arr(&[batch * tk, dim]),
                arr(&[batch * tk, dim]),
            ],
        );
    }
    for (n, v, t) in [
        (1, 2, vec![1]),
        (3, 5, vec![0, 4, 2]),
        (2, 7, vec![6, 6]),
        (4, 3, vec![1, 0, 2, 1]),
        (5, 4, vec![3, 3, 0, 1, 2]),
    ] {
        push("cross_entropy", OpKind::CrossEntropy(t), vec![arr(&[n, v]).map(|x| x * 2.0)]);
    }
    for (shape, h, w) in [
        ([1, 2, 2, 1], 4, 4),
        ([2, 3, 3, 2], 2, 2),
        ([1, 4, 4, 3], 1, 1),
        ([1, 1, 1, 2], 3, 2),
        ([2, 4, 2, 1], 3, 5),
    ] {
        push("resize", OpKind::Resize(h, w), vec![arr(&shape)]);
    }
    for (shape, kernel, stride, pad) in [
        ([1, 4, 4, 1], 3, 2, 1),
        ([2, 5, 5, 2], 3, 1, 1),
        ([1, 6, 4, 3], 2, 2, 0),
        ([1, 3, 3, 1], 3, 1, 0),
        ([2, 4, 6, 1], 3, 2, 1),
    ] {
        push(
            "im2col",
            OpKind::Im2Col {
                kernel,
                stride,
                pad,
            },
            vec![arr(&shape)],
        );
    }
    for (shape, f) in [
        ([1, 2, 2, 1], 2),
        ([2, 1, 3, 2], 2),
        ([1, 3, 3, 1], 3),
        ([1, 2, 1, 4], 1),
        ([2, 2, 2, 2], 2),
    ] {
        push("upsample", OpKind::Upsample(f), vec![arr(&shape)]);
    }
    for (shape, f) in [
        ([1, 2, 2, 4], 2),
        ([2, 1, 3, 8], 2),
        ([1, 2, 2, 9], 3),
        ([1, 2, 1, 4], 1),
        ([2, 2, 2, 12], 2),
    ] {
        push("depth_to_space", OpKind::DepthToSpace(f), vec![arr(&shape)]);
    }
    cases
}
