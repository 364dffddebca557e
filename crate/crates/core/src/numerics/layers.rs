//! Parameterized building blocks over [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{Array, Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
    Identity,
}

pub fn init_array<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut impl Rng,
) -> Array<T> {
    let std = match init {
        Init::Zero => return Array::zeros(shape.to_vec()),
        Init::Identity => {
            assert!(shape.len() == 2 && shape[0] == shape[1], "identity init needs a square shape");
            return Array::eye(shape[0]);
        }
        Init::Normal(s) => s,
        Init::FanIn(gain) => gain / (fan_in.max(1) as f64).sqrt(),
    };
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| T::lit(dist.sample(rng))).collect(),
    )
    .expect("sized")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init_array(&[fan_in, fan_out], fan_in, init, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Array::zeros([fan_out])));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }

    pub fn numel(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Square-kernel convolution on `[B,H,W,C]` via patch extraction.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        Conv2d {
            lin: Linear::new(store, name, fan_in, cout, true, Init::FanIn(1.0), rng),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (b, h, w) = match *g.shape(x) {
            [b, h, w, _] => (b, h, w),
            _ => return Err(Error::invalid(format!("conv expects [B,H,W,C], got {:?}", g.shape(x)))),
        };
        let cols = g.im2col(x, self.kernel, self.stride, self.pad)?;
        let y = self.lin.forward(g, store, cols)?;
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        g.reshape(y, [b, ho, wo, self.lin.fan_out])
    }
}

/// Affine layer normalization parameters.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Array::full([dim], T::one())),
            beta: store.add(format!("{name}.beta"), Array::zeros([dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, Some(gamma), Some(beta), LN_EPS)
    }
}
