//! Multi-scale residual VQ tokenizer with a single shared codebook.

pub mod quantize;
mod schedule;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{init_array, Conv2d, Init};
use crate::numerics::{AdamW, AdamWConfig, Array, Graph, ParamId, ParamStore, ResizePlan, Scalar, Var};

pub use schedule::{check_maps, ScaleSchedule, TokenMap};

/// Spatial reduction of the encoder (three stride-2 stages).
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub code_dim: usize,
    pub vocab: usize,
    /// Channel widths of the outer and inner conv stages.
    pub widths: (usize, usize),
    pub commit_weight: f64,
    pub codebook_weight: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            image_size: 32,
            code_dim: 32,
            vocab: 256,
            widths: (32, 64),
            commit_weight: 0.25,
            codebook_weight: 1.0,
        }
    }
}

impl TokenizerConfig {
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / DOWNSAMPLE;
        (g, g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by the encoder stride {DOWNSAMPLE}",
                self.image_size
            )));
        }
        if self.vocab < 2 {
            return Err(Error::invalid("codebook needs at least 2 entries"));
        }
        if self.code_dim == 0 || self.widths.0 == 0 || self.widths.1 == 0 {
            return Err(Error::invalid("tokenizer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer<T> {
    pub cfg: TokenizerConfig,
    pub store: ParamStore<T>,
    enc: [Conv2d; 3],
    dec_in: Conv2d,
    dec: [Conv2d; 3],
    /// `[V, C_code]`; row 0 is held at zero.
    pub codebook: ParamId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TokenizerLosses {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (c1, c2, cc) = (cfg.widths.0, cfg.widths.1, cfg.code_dim);
        let r = &mut rng;
        let enc = [
            Conv2d::new(&mut s, "tok.enc0", 3, c1, 3, 2, 1, r),
            Conv2d::new(&mut s, "tok.enc1", c1, c2, 3, 2, 1, r),
            Conv2d::new(&mut s, "tok.enc2", c2, cc, 3, 2, 1, r),
        ];
        let dec_in = Conv2d::new(&mut s, "tok.dec_in", cc, c2, 3, 1, 1, r);
        // sub-pixel stages: each conv emits 4x the channels, then unpacks to 2x resolution
        let dec = [
            Conv2d::new(&mut s, "tok.dec0", c2, 4 * c2, 3, 1, 1, r),
            Conv2d::new(&mut s, "tok.dec1", c2, 4 * c1, 3, 1, 1, r),
            Conv2d::new(&mut s, "tok.dec2", c1, 4 * 3, 3, 1, 1, r),
        ];
        let mut cb: Array<T> = init_array(&[cfg.vocab, cc], cc, Init::Normal(0.1), r);
        cb.data_mut()[..cc].fill(T::zero());
        let codebook = s.add("tok.codebook", cb);
        s.set_decay(codebook, false);
        Ok(Tokenizer {
            cfg,
            store: s,
            enc,
            dec_in,
            dec,
            codebook,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.cfg.grid()
    }

    fn check_images(&self, images: &Array<T>) -> Result<usize> {
        let n = self.cfg.image_size;
        match *images.shape() {
            [b, h, w, 3] if h == n && w == n => Ok(b),
            _ => Err(Error::ShapeMismatch {
                op: "tokenizer input",
                lhs: images.shape().to_vec(),
                rhs: vec![0, n, n, 3],
            }),
        }
    }

    pub fn check_schedule(&self, schedule: &ScaleSchedule) -> Result<()> {
        if schedule.last() != self.grid() {
            return Err(Error::invalid(format!(
                "schedule ends at {:?} but the encoder grid is {:?}",
                schedule.last(),
                self.grid()
            )));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(g, &self.store, h)?;
            if i + 1 < self.enc.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(g, &self.store, z)?;
        h = g.gelu(h);
        for (i, conv) in self.dec.iter().enumerate() {
            h = conv.forward(g, &self.store, h)?;
            h = g.depth_to_space(h, 2)?;
            if i + 1 < self.dec.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    /// Continuous latents `[B,H,W,C]` of images `[B,N,N,3]` in [0,1].
    pub fn encode_latent(&self, images: &Array<T>) -> Result<Array<T>> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let f = self.encode_graph(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    /// Images `[B,N,N,3]` from latents `[B,H,W,C]`; deterministic.
    pub fn decode_latent(&self, latent: &Array<T>) -> Result<Array<T>> {
        let (gh, gw) = self.grid();
        match *latent.shape() {
            [_, h, w, c] if (h, w) == (gh, gw) && c == self.cfg.code_dim => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "decode latent",
                    lhs: latent.shape().to_vec(),
                    rhs: vec![0, gh, gw, self.cfg.code_dim],
                })
            }
        }
        let mut g = Graph::new();
        let z = g.constant(latent.clone());
        let y = self.decode_graph(&mut g, z)?;
        Ok(g.value(y).clone())
    }

    fn codebook_f64(&self) -> Vec<f64> {
        self.store.value(self.codebook).data().iter().map(|x| x.as_f64()).collect()
    }

    /// Token maps of every latent in a `[B,H,W,C]` stack.
    pub fn quantize_latents(&self, latent: &Array<T>, schedule: &ScaleSchedule) -> Result<Vec<Vec<TokenMap>>> {
        self.check_schedule(schedule)?;
        let cb = self.codebook_f64();
        let dim = self.cfg.code_dim;
        let per = self.grid().0 * self.grid().1 * dim;
        latent
            .data()
            .chunks(per)
            .map(|f| {
                let f: Vec<f64> = f.iter().map(|x| x.as_f64()).collect();
                quantize::quantize_residual(&f, self.grid(), dim, &cb, schedule, true)
            })
            .collect()
    }

    /// Token maps for a stack of images `[B,N,N,3]`.
    pub fn encode_batch(&self, images: &Array<T>, schedule: &ScaleSchedule) -> Result<Vec<Vec<TokenMap>>> {
        self.check_schedule(schedule)?;
        let f = self.encode_latent(images)?;
        self.quantize_latents(&f, schedule)
    }

    pub fn encode_multiscale(&self, image: &Array<T>, schedule: &ScaleSchedule) -> Result<Vec<TokenMap>> {
        let n = self.cfg.image_size;
        let batch = image.clone().reshape([1, n, n, 3]).map_err(|_| Error::ShapeMismatch {
            op: "tokenizer input",
            lhs: image.shape().to_vec(),
            rhs: vec![n, n, 3],
        })?;
        Ok(self.encode_batch(&batch, schedule)?.remove(0))
    }

    /// Cumulative latent `[H,W,C]` of the first `upto` maps.
    pub fn latent_from_maps(&self, maps: &[TokenMap], schedule: &ScaleSchedule, upto: usize) -> Result<Array<T>> {
        check_maps(maps, schedule, self.cfg.vocab)?;
        if upto > maps.len() {
            return Err(Error::OutOfRange {
                what: "scale prefix",
                index: upto,
                bound: maps.len(),
            });
        }
        let (h, w) = self.grid();
        let cb = self.store.value(self.codebook);
        let dim = self.cfg.code_dim;
        let mut acc = vec![T::zero(); h * w * dim];
        for m in &maps[..upto] {
            let looked = crate::numerics::embedding_lookup(cb, &m.indices)?;
            let up = ResizePlan::new((m.h, m.w), (h, w))?.apply(looked.data(), 1, dim);
            acc.iter_mut().zip(up).for_each(|(a, u)| *a += u);
        }
        Array::new([h, w, dim], acc)
    }

    /// Adds the upsampled codes of `map` into a cumulative latent `[H,W,C]`.
    pub fn accumulate(&self, acc: &mut Array<T>, map: &TokenMap) -> Result<()> {
        let (h, w) = self.grid();
        let dim = self.cfg.code_dim;
        if acc.shape() != [h, w, dim] {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                lhs: acc.shape().to_vec(),
                rhs: vec![h, w, dim],
            });
        }
        if map.indices.len() != map.h * map.w {
            return Err(Error::invalid("token map size disagrees with its extent"));
        }
        let looked = crate::numerics::embedding_lookup(self.store.value(self.codebook), &map.indices)?;
        let up = ResizePlan::new((map.h, map.w), (h, w))?.apply(looked.data(), 1, dim);
        acc.data_mut().iter_mut().zip(up).for_each(|(a, u)| *a += u);
        Ok(())
    }

    /// Teacher-forcing inputs for scales 2..K: each scale's extent sampled from
    /// the cumulative latent of all earlier scales. `[T - 1, C]`, row-major per scale.
    pub fn scale_inputs(&self, maps: &[TokenMap], schedule: &ScaleSchedule) -> Result<Array<T>> {
        check_maps(maps, schedule, self.cfg.vocab)?;
        let (h, w) = self.grid();
        let dim = self.cfg.code_dim;
        let mut acc = Array::zeros([h, w, dim]);
        let mut out = Vec::with_capacity((schedule.total_tokens() - schedule.tokens(0)) * dim);
        for k in 1..schedule.len() {
            self.accumulate(&mut acc, &maps[k - 1])?;
            out.extend(ResizePlan::new((h, w), schedule.extent(k))?.apply(acc.data(), 1, dim));
        }
        Array::new([out.len() / dim, dim], out)
    }

    /// Image `[N,N,3]` decoded from a complete set of token maps.
    pub fn decode_multiscale(&self, maps: &[TokenMap], schedule: &ScaleSchedule) -> Result<Array<T>> {
        if maps.len() != schedule.len() {
            return Err(Error::invalid(format!(
                "{} token maps for a {}-scale schedule",
                maps.len(),
                schedule.len()
            )));
        }
        let (h, w) = self.grid();
        let f = self.latent_from_maps(maps, schedule, maps.len())?;
        let n = self.cfg.image_size;
        let img = self.decode_latent(&f.reshape([1, h, w, self.cfg.code_dim])?)?;
        img.reshape([n, n, 3])
    }

    /// Squared error of every prefix reconstruction against the latent, in 64-bit.
    pub fn prefix_errors(&self, latent: &[f64], maps: &[TokenMap]) -> Result<Vec<f64>> {
        let cb = self.codebook_f64();
        (0..=maps.len())
            .map(|k| {
                let rec = quantize::reconstruct(maps, k, self.grid(), self.cfg.code_dim, &cb)?;
                Ok(rec.iter().zip(latent).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / latent.len() as f64)
            })
            .collect()
    }

    /// Seeds codebook rows 1.. from residual vectors of `images`.
    pub fn init_codebook(&mut self, images: &Array<T>, schedule: &ScaleSchedule, rng: &mut impl Rng) -> Result<()> {
        let pool = self.residual_pool(images, schedule)?;
        let dim = self.cfg.code_dim;
        let cb = self.store.value_mut(self.codebook);
        for row in 1..self.cfg.vocab {
            let v = pool.choose(rng).expect("nonempty pool");
            for c in 0..dim {
                let jitter = rng.random_range(-1e-3..1e-3);
                cb.data_mut()[row * dim + c] = T::lit(v[c] + jitter);
            }
        }
        Ok(())
    }

    fn residual_pool(&self, images: &Array<T>, schedule: &ScaleSchedule) -> Result<Vec<Vec<f64>>> {
        self.check_schedule(schedule)?;
        let f = self.encode_latent(images)?;
        let per = self.grid().0 * self.grid().1 * self.cfg.code_dim;
        let mut pool = Vec::new();
        for chunk in f.data().chunks(per) {
            let lat: Vec<f64> = chunk.iter().map(|x| x.as_f64()).collect();
            pool.extend(quantize::residual_vectors(&lat, self.grid(), self.cfg.code_dim, schedule)?);
        }
        Ok(pool)
    }

    /// Builds the training loss graph. Returns `(graph, total, parts, maps)`.
    fn loss_graph(
        &self,
        images: &Array<T>,
        schedule: &ScaleSchedule,
    ) -> Result<(Graph<T>, Var, [Var; 3], Vec<Vec<TokenMap>>)> {
        let b = self.check_images(images)?;
        self.check_schedule(schedule)?;
        let (h, w) = self.grid();
        let dim = self.cfg.code_dim;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let f = self.encode_graph(&mut g, x)?;
        let maps = self.quantize_latents(g.value(f), schedule)?;
        let cb = g.param(&self.store, self.codebook);
        let mut fhat: Option<Var> = None;
        for (k, &(sh, sw)) in schedule.scales().iter().enumerate() {
            let idx: Vec<usize> = maps.iter().flat_map(|m| m[k].indices.iter().copied()).collect();
            let rows = g.gather_rows(cb, idx)?;
            let grid = g.reshape(rows, [b, sh, sw, dim])?;
            let up = g.resize(grid, (h, w))?;
            fhat = Some(match fhat {
                Some(acc) => g.add(acc, up)?,
                None => up,
            });
        }
        let fhat = fhat.expect("nonempty schedule");
        let fhat_value = g.value(fhat).clone();
        let z = straight_through(&mut g, f, &fhat_value)?;
        let recon = self.decode_graph(&mut g, z)?;
        let l_rec = g.mse(recon, x)?;
        let f_sg = g.constant(g.value(f).clone());
        let fhat_sg = g.constant(g.value(fhat).clone());
        let l_cb = g.mse(fhat, f_sg)?;
        let l_commit = g.mse(f, fhat_sg)?;
        let a = g.scale(l_cb, self.cfg.codebook_weight);
        let c = g.scale(l_commit, self.cfg.commit_weight);
        let t = g.add(l_rec, a)?;
        let total = g.add(t, c)?;
        Ok((g, total, [l_rec, l_cb, l_commit], maps))
    }

    pub fn losses(&self, images: &Array<T>, schedule: &ScaleSchedule) -> Result<TokenizerLosses> {
        let (g, total, [r, cb, c], _) = self.loss_graph(images, schedule)?;
        let v = |x: Var| g.value(x).data()[0].as_f64();
        Ok(TokenizerLosses {
            recon: v(r),
            codebook: v(cb),
            commit: v(c),
            total: v(total),
        })
    }
}

/// `f + sg(fhat - f)`: evaluates to `fhat`, differentiates as identity in `f`.
pub fn straight_through<T: Scalar>(g: &mut Graph<T>, f: Var, fhat: &Array<T>) -> Result<Var> {
    if g.shape(f) != fhat.shape() {
        return Err(Error::ShapeMismatch {
            op: "straight_through",
            lhs: g.shape(f).to_vec(),
            rhs: fhat.shape().to_vec(),
        });
    }
    let mut shift = fhat.clone();
    for (s, &fv) in shift.data_mut().iter_mut().zip(g.value(f).data()) {
        *s -= fv;
    }
    let shift = g.constant(shift);
    g.add(f, shift)
}

/// Optimizer state and codebook bookkeeping for tokenizer training.
pub struct TokenizerTrainer<T> {
    pub opt: AdamW<T>,
    usage: Vec<u64>,
    pub restart_every: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> TokenizerTrainer<T> {
    pub fn new(opt: AdamWConfig, seed: u64, vocab: usize) -> Self {
        TokenizerTrainer {
            opt: AdamW::new(opt),
            usage: vec![0; vocab],
            restart_every: 100,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x70_6b_6e),
        }
    }

    /// One update: reconstruction + codebook + commitment, straight-through
    /// gradients. Returns the pre-update losses and the batch's token maps.
    pub fn step(
        &mut self,
        tok: &mut Tokenizer<T>,
        images: &Array<T>,
        schedule: &ScaleSchedule,
    ) -> Result<(TokenizerLosses, Vec<Vec<TokenMap>>)> {
        let (g, total, [r, cb, c], maps) = tok.loss_graph(images, schedule)?;
        let grads = g.backward(total)?;
        let mut list = grads.params();
        let dim = tok.cfg.code_dim;
        for (id, gr) in list.iter_mut() {
            if *id == tok.codebook {
                gr.data_mut()[..dim].fill(T::zero());
            }
        }
        self.opt.step(&mut tok.store, &list);
        for m in maps.iter().flatten() {
            for &i in &m.indices {
                self.usage[i] += 1;
            }
        }
        if self.restart_every > 0 && self.opt.steps_taken() % self.restart_every == 0 {
            self.restart_dead_codes(tok, images, schedule)?;
        }
        let v = |x: Var| g.value(x).data()[0].as_f64();
        Ok((
            TokenizerLosses {
                recon: v(r),
                codebook: v(cb),
                commit: v(c),
                total: v(total),
            },
            maps,
        ))
    }

    fn restart_dead_codes(&mut self, tok: &mut Tokenizer<T>, images: &Array<T>, schedule: &ScaleSchedule) -> Result<()> {
        let dead: Vec<usize> = (1..tok.cfg.vocab).filter(|&i| self.usage[i] == 0).collect();
        if !dead.is_empty() {
            let pool = tok.residual_pool(images, schedule)?;
            let dim = tok.cfg.code_dim;
            let cb = tok.store.value_mut(tok.codebook);
            for row in dead {
                let v = pool.choose(&mut self.rng).expect("nonempty pool");
                for c in 0..dim {
                    cb.data_mut()[row * dim + c] = T::lit(v[c]);
                }
            }
        }
        self.usage.fill(0);
        Ok(())
    }
}

/// Stacks `[N,N,3]` unit-range images into `[B,N,N,3]`.
pub fn stack_images<T: Scalar>(images: &[Vec<f32>], size: usize) -> Result<Array<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size * 3);
    for img in images {
        if img.len() != size * size * 3 {
            return Err(Error::ShapeMismatch {
                op: "stack images",
                lhs: vec![img.len()],
                rhs: vec![size, size, 3],
            });
        }
        data.extend(img.iter().map(|&v| T::lit(v as f64)));
    }
    Array::new([images.len(), size, size, 3], data)
}
