use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{init_array, Init, Linear, Norm};
use crate::numerics::{Array, Graph, ParamStore, Scalar, Var};

/// Anything that turns `[B,N,N,3]` images in [0,1] into `[B,H,W,C]` feature grids.
pub trait FeatureExtractor<T: Scalar> {
    fn input_size(&self) -> usize;
    fn grid(&self) -> (usize, usize);
    fn channels(&self) -> usize;
    fn extract(&self, images: &Array<T>) -> Result<Array<T>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    /// Channel width of every layer's feature grid.
    pub width: usize,
    pub patch: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    /// Tapped layers (0-based); derived from `depth` when absent.
    pub taps: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 12,
            width: 64,
            patch: 4,
            heads: 4,
            mlp_ratio: 2,
            image_size: 32,
            taps: None,
            seed: 0x5eed_e4c0,
        }
    }
}

/// `{d-1-k*floor(d/4)}` for k = 0..4, shallow first.
pub fn default_taps(depth: usize) -> Vec<usize> {
    let step = depth / 4;
    let mut taps: Vec<usize> = (0..4).map(|k| depth - 1 - k * step).collect();
    taps.reverse();
    taps
}

impl EncoderConfig {
    pub fn tap_set(&self) -> Vec<usize> {
        self.taps.clone().unwrap_or_else(|| default_taps(self.depth))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "encoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not a multiple of the patch size {}",
                self.image_size, self.patch
            )));
        }
        let taps = self.tap_set();
        if taps.len() != 4 {
            return Err(Error::invalid(format!("need exactly 4 tapped layers, got {}", taps.len())));
        }
        if let Some(&t) = taps.iter().find(|&&t| t >= self.depth) {
            return Err(Error::OutOfRange {
                what: "encoder tap",
                index: t,
                bound: self.depth,
            });
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch;
        (g, g)
    }
}

#[derive(Clone, Debug)]
struct EncBlock {
    ln1: Norm,
    qkv: [Linear; 3],
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Randomly initialized, then frozen, patch-embedding transformer.
#[derive(Clone, Debug)]
pub struct ControlEncoder<T> {
    cfg: EncoderConfig,
    store: ParamStore<T>,
    embed: Linear,
    pos: crate::numerics::ParamId,
    blocks: Vec<EncBlock>,
    taps: Vec<usize>,
    mask: Vec<bool>,
}

impl<T: Scalar> ControlEncoder<T> {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let c = cfg.width;
        let patch_len = cfg.patch * cfg.patch * 3;
        let (gh, gw) = cfg.grid();
        let embed = Linear::new(&mut s, "enc.embed", patch_len, c, true, Init::FanIn(1.0), r);
        let pos = s.add("enc.pos", init_array(&[gh * gw, c], c, Init::Normal(0.5), r));
        let hidden = c * cfg.mlp_ratio;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = |x: &str| format!("enc.b{i}.{x}");
                EncBlock {
                    ln1: Norm::new(&mut s, &n("ln1"), c),
                    qkv: [
                        Linear::new(&mut s, &n("q"), c, c, true, Init::FanIn(1.0), r),
                        Linear::new(&mut s, &n("k"), c, c, true, Init::FanIn(1.0), r),
                        Linear::new(&mut s, &n("v"), c, c, true, Init::FanIn(1.0), r),
                    ],
                    o: Linear::new(&mut s, &n("o"), c, c, true, Init::FanIn(0.5), r),
                    ln2: Norm::new(&mut s, &n("ln2"), c),
                    fc1: Linear::new(&mut s, &n("fc1"), c, hidden, true, Init::FanIn(1.0), r),
                    fc2: Linear::new(&mut s, &n("fc2"), hidden, c, true, Init::FanIn(0.5), r),
                }
            })
            .collect();
        let ids: Vec<_> = s.ids().collect();
        for id in ids {
            s.set_trainable(id, false);
        }
        let n = gh * gw;
        Ok(ControlEncoder {
            taps: cfg.tap_set(),
            cfg,
            store: s,
            embed,
            pos,
            blocks,
            mask: vec![true; n * n],
        })
    }

    /// Same construction with every block's residual branch zeroed, so each
    /// layer passes its input through unchanged.
    pub fn identity(cfg: EncoderConfig) -> Result<Self> {
        let mut enc = Self::new(cfg)?;
        let outs: Vec<_> = enc.blocks.iter().flat_map(|b| b.o.ids().into_iter().chain(b.fc2.ids())).collect();
        for id in outs {
            enc.store.value_mut(id).data_mut().fill(T::zero());
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Read-only view of the frozen weights.
    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Patch embedding plus position, `[B*n, C]`, before any block.
    fn embed_graph(&self, g: &mut Graph<T>, images: &Array<T>) -> Result<(Var, usize)> {
        let n = self.cfg.image_size;
        let b = match *images.shape() {
            [b, h, w, 3] if h == n && w == n => b,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "control image",
                    lhs: images.shape().to_vec(),
                    rhs: vec![0, n, n, 3],
                })
            }
        };
        let centred = images.map(|v| v * T::lit(2.0) - T::one());
        let x = g.constant(centred);
        let p = self.cfg.patch;
        let cols = g.im2col(x, p, p, 0)?;
        let e = self.embed.forward(g, &self.store, cols)?;
        let (gh, gw) = self.cfg.grid();
        let pos = g.param(&self.store, self.pos);
        let tiled = g.gather_rows(pos, (0..b).flat_map(|_| 0..gh * gw).collect::<Vec<_>>())?;
        Ok((g.add(e, tiled)?, b))
    }

    /// Input embedding grid `[B,H,W,C]`.
    pub fn input_embedding(&self, images: &Array<T>) -> Result<Array<T>> {
        let mut g = Graph::new();
        let (x, b) = self.embed_graph(&mut g, images)?;
        let (gh, gw) = self.cfg.grid();
        g.value(x).clone().reshape([b, gh, gw, self.cfg.width])
    }
}

impl<T: Scalar> FeatureExtractor<T> for ControlEncoder<T> {
    fn input_size(&self) -> usize {
        self.cfg.image_size
    }

    fn grid(&self) -> (usize, usize) {
        self.cfg.grid()
    }

    fn channels(&self) -> usize {
        self.taps.len() * self.cfg.width
    }

    /// Tapped layer outputs concatenated on channels, shallow first.
    fn extract(&self, images: &Array<T>) -> Result<Array<T>> {
        let mut g = Graph::new();
        let (mut x, b) = self.embed_graph(&mut g, images)?;
        let s = &self.store;
        let deepest = *self.taps.iter().max().expect("four taps");
        let mut outputs = Vec::with_capacity(deepest + 1);
        for blk in &self.blocks[..=deepest] {
            let h = blk.ln1.forward(&mut g, s, x)?;
            let q = blk.qkv[0].forward(&mut g, s, h)?;
            let k = blk.qkv[1].forward(&mut g, s, h)?;
            let v = blk.qkv[2].forward(&mut g, s, h)?;
            let a = g.attention(q, k, v, self.cfg.heads, b, &self.mask)?;
            let a = blk.o.forward(&mut g, s, a)?;
            x = g.add(x, a)?;
            let h = blk.ln2.forward(&mut g, s, x)?;
            let h = blk.fc1.forward(&mut g, s, h)?;
            let h = g.gelu(h);
            let h = blk.fc2.forward(&mut g, s, h)?;
            x = g.add(x, h)?;
            outputs.push(x);
        }
        let parts: Vec<Var> = self.taps.iter().map(|&t| outputs[t]).collect();
        let cat = g.concat_cols(&parts)?;
        let (gh, gw) = self.cfg.grid();
        g.value(cat).clone().reshape([b, gh, gw, self.channels()])
    }
}
