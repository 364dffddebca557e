//! Class-conditional next-scale transformer over token pyramids.

mod cache;
mod mask;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{init_array, Init, Linear, Norm};
use crate::numerics::{Array, Graph, ParamId, ParamStore, Scalar, Var};
use crate::tokenizer::ScaleSchedule;

pub use cache::{CacheTag, KVCache};
pub use mask::block_causal_mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub classes: usize,
    pub code_dim: usize,
    pub schedule: ScaleSchedule,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 6,
            d_model: 128,
            heads: 4,
            mlp_ratio: 4,
            vocab: 256,
            classes: crate::data::NUM_CLASSES,
            code_dim: 32,
            schedule: ScaleSchedule::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("backbone depth, width and MLP ratio must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 || self.classes == 0 || self.code_dim == 0 {
            return Err(Error::invalid("vocabulary, class count and code width must be positive"));
        }
        if !self.schedule.starts_at_unit() {
            return Err(Error::invalid(format!(
                "the first scale must be 1x1 (it holds the class token), got {:?}",
                self.schedule.extent(0)
            )));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.schedule.total_tokens()
    }
}

/// Class conditioning for the start token.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassCond {
    Label(usize),
    /// The learned unconditional embedding.
    Null,
    /// Convex combination of class embeddings; weights need not be normalized.
    Mixed(Vec<f64>),
}

impl ClassCond {
    /// Weights over the `classes + 1` embedding rows (the last row is null).
    pub fn weights(&self, classes: usize) -> Result<Vec<f64>> {
        let mut w = vec![0.0; classes + 1];
        match self {
            ClassCond::Label(c) => {
                if *c >= classes {
                    return Err(Error::OutOfRange {
                        what: "class label",
                        index: *c,
                        bound: classes,
                    });
                }
                w[*c] = 1.0;
            }
            ClassCond::Null => w[classes] = 1.0,
            ClassCond::Mixed(m) => {
                if m.len() != classes {
                    return Err(Error::invalid(format!(
                        "{} mixture weights for {classes} classes",
                        m.len()
                    )));
                }
                let total: f64 = m.iter().sum();
                if m.iter().any(|x| !x.is_finite() || *x < 0.0) || total <= 0.0 {
                    return Err(Error::invalid("mixture weights must be nonnegative with a positive sum"));
                }
                for (o, x) in w.iter_mut().zip(m) {
                    *o = x / total;
                }
            }
        }
        Ok(w)
    }
}

fn cache_tag(conds: &[ClassCond], classes: usize) -> Result<CacheTag> {
    let mut bits = Vec::new();
    for c in conds {
        bits.extend(c.weights(classes)?.into_iter().map(f64::to_bits));
    }
    Ok(CacheTag(bits))
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Embedded positions for a batch, `[B*T, d]` sample-major.
#[derive(Clone, Debug)]
pub struct ScaleSequence<T> {
    pub embeddings: Array<T>,
    pub batch: usize,
    /// Scale index of every position within one sample.
    pub scale_index: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    class_emb: ParamId,
    pos: ParamId,
    level: ParamId,
    word: Linear,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
    mask: Arc<Vec<bool>>,
}

impl Backbone {
    pub fn new<T: Scalar>(cfg: BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let emb = Init::Normal(0.02);
        let out_init = Init::Normal(0.02 / (2.0 * cfg.layers as f64).sqrt());
        let class_emb = store.add("bb.class_emb", init_array(&[cfg.classes + 1, d], d, emb, rng));
        let pos = store.add("bb.pos", init_array(&[cfg.positions(), d], d, emb, rng));
        let level = store.add("bb.level", init_array(&[cfg.schedule.len(), d], d, emb, rng));
        let word = Linear::new(store, "bb.word", cfg.code_dim, d, true, Init::FanIn(1.0), rng);
        let hidden = d * cfg.mlp_ratio;
        let blocks = (1..=cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("bb.l{l}.{s}");
                Block {
                    ln1: Norm::new(store, &n("ln1"), d),
                    q: Linear::new(store, &n("attn.q"), d, d, true, emb, rng),
                    k: Linear::new(store, &n("attn.k"), d, d, true, emb, rng),
                    v: Linear::new(store, &n("attn.v"), d, d, true, emb, rng),
                    o: Linear::new(store, &n("attn.o"), d, d, true, out_init, rng),
                    ln2: Norm::new(store, &n("ln2"), d),
                    fc1: Linear::new(store, &n("mlp.fc1"), d, hidden, true, emb, rng),
                    fc2: Linear::new(store, &n("mlp.fc2"), hidden, d, true, out_init, rng),
                }
            })
            .collect();
        let ln_f = Norm::new(store, "bb.ln_f", d);
        // zero head: every position starts at the uniform distribution
        let head = Linear::new(store, "bb.head", d, cfg.vocab, true, Init::Zero, rng);
        let mask = Arc::new(block_causal_mask(&cfg.schedule));
        Ok(Backbone {
            cfg,
            class_emb,
            pos,
            level,
            word,
            blocks,
            ln_f,
            head,
            mask,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.class_emb, self.pos, self.level];
        ids.extend(self.word.ids());
        for b in &self.blocks {
            ids.extend([b.ln1.gamma, b.ln1.beta, b.ln2.gamma, b.ln2.beta]);
            for lin in [&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2] {
                ids.extend(lin.ids());
            }
        }
        ids.extend([self.ln_f.gamma, self.ln_f.beta]);
        ids.extend(self.head.ids());
        ids
    }

    /// Query, key, value and output projections of every layer.
    pub fn attention_param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.o])
            .flat_map(|lin| lin.ids())
            .collect()
    }

    fn class_rows<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, conds: &[ClassCond]) -> Result<Var> {
        let c = self.cfg.classes;
        let mut w = Vec::with_capacity(conds.len() * (c + 1));
        for cond in conds {
            w.extend(cond.weights(c)?.into_iter().map(T::lit));
        }
        let w = g.constant(Array::new([conds.len(), c + 1], w)?);
        let table = g.param(store, self.class_emb);
        g.matmul(w, table)
    }

    fn word_rows<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &Array<T>) -> Result<Var> {
        if inputs.rank() != 2 || inputs.cols() != self.cfg.code_dim {
            return Err(Error::ShapeMismatch {
                op: "scale inputs",
                lhs: inputs.shape().to_vec(),
                rhs: vec![0, self.cfg.code_dim],
            });
        }
        let x = g.constant(inputs.clone());
        self.word.forward(g, store, x)
    }

    /// Positional plus level embedding for positions `span`, tiled over `batch`.
    fn pos_level<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        span: std::ops::Range<usize>,
        batch: usize,
    ) -> Result<Var> {
        let scale = self.cfg.schedule.scale_of_positions();
        let pos = g.param(store, self.pos);
        let pos = g.gather_rows(pos, span.clone().collect::<Vec<_>>())?;
        let lvl = g.param(store, self.level);
        let lvl = g.gather_rows(lvl, scale[span.clone()].to_vec())?;
        let pl = g.add(pos, lvl)?;
        let n = span.len();
        g.gather_rows(pl, (0..batch).flat_map(|_| 0..n).collect::<Vec<_>>())
    }

    /// Input embeddings `[B*T, d]` for a batch. `inputs` holds the scale 2..K
    /// inputs of every sample, `[B*(T-1), C]` sample-major.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        conds: &[ClassCond],
        inputs: &Array<T>,
    ) -> Result<Var> {
        let b = conds.len();
        let t = self.cfg.positions();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if inputs.rows() != b * (t - 1) {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: inputs.shape().to_vec(),
                rhs: vec![b * (t - 1), self.cfg.code_dim],
            });
        }
        let cls = self.class_rows(g, store, conds)?;
        let x = if t > 1 {
            let word = self.word_rows(g, store, inputs)?;
            let both = g.concat_rows(&[cls, word])?;
            let perm: Vec<usize> = (0..b)
                .flat_map(|s| (0..t).map(move |p| if p == 0 { s } else { b + s * (t - 1) + p - 1 }))
                .collect();
            g.gather_rows(both, perm)?
        } else {
            cls
        };
        let pl = self.pos_level(g, store, 0..t, b)?;
        g.add(x, pl)
    }

    /// Eager [`embed`](Self::embed).
    pub fn build_inputs<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        conds: &[ClassCond],
        inputs: &Array<T>,
    ) -> Result<ScaleSequence<T>> {
        let mut g = Graph::new();
        let x = self.embed(&mut g, store, conds, inputs)?;
        Ok(ScaleSequence {
            embeddings: g.value(x).clone(),
            batch: conds.len(),
            scale_index: self.cfg.schedule.scale_of_positions(),
        })
    }

    fn check_injections(&self, n: usize) -> Result<()> {
        if n != 0 && n != self.layers() {
            return Err(Error::invalid(format!(
                "{n} injection slots for a {}-layer backbone",
                self.layers()
            )));
        }
        Ok(())
    }

    fn inject<T: Scalar>(g: &mut Graph<T>, x: Var, c: Option<Var>) -> Result<Var> {
        match c {
            Some(c) => {
                if g.shape(c) != g.shape(x) {
                    return Err(Error::ShapeMismatch {
                        op: "control injection",
                        lhs: g.shape(c).to_vec(),
                        rhs: g.shape(x).to_vec(),
                    });
                }
                g.add(x, c)
            }
            None => Ok(x),
        }
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, blk: &Block, x: Var) -> Result<Var> {
        let h = blk.ln2.forward(g, store, x)?;
        let h = blk.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = blk.fc2.forward(g, store, h)?;
        g.add(x, h)
    }

    fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln_f.forward(g, store, x)?;
        self.head.forward(g, store, h)
    }

    /// Teacher-forced logits `[B*T, V]` over embedded inputs `x`.
    /// `injections` is empty or has one optional `[B*T, d]` term per layer,
    /// added to the residual stream entering that layer.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        injections: &[Option<Var>],
    ) -> Result<Var> {
        self.check_injections(injections.len())?;
        let mut x = x;
        for (l, blk) in self.blocks.iter().enumerate() {
            x = Self::inject(g, x, injections.get(l).copied().flatten())?;
            let h = blk.ln1.forward(g, store, x)?;
            let q = blk.q.forward(g, store, h)?;
            let k = blk.k.forward(g, store, h)?;
            let v = blk.v.forward(g, store, h)?;
            let a = g.attention(q, k, v, self.cfg.heads, batch, &self.mask)?;
            let a = blk.o.forward(g, store, a)?;
            x = g.add(x, a)?;
            x = self.mlp(g, store, blk, x)?;
        }
        self.logits(g, store, x)
    }

    /// Eager teacher-forced logits.
    pub fn forward_train<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seq: &ScaleSequence<T>,
        injections: &[Option<Array<T>>],
    ) -> Result<Array<T>> {
        let mut g = Graph::new();
        let x = g.constant(seq.embeddings.clone());
        let inj: Vec<Option<Var>> = injections
            .iter()
            .map(|c| c.as_ref().map(|c| g.constant(c.clone())))
            .collect();
        let y = self.forward(&mut g, store, x, seq.batch, &inj)?;
        Ok(g.value(y).clone())
    }

    pub fn new_cache<T: Scalar>(&self, batch: usize) -> KVCache<T> {
        KVCache::new(self.layers(), batch, self.cfg.d_model)
    }

    /// Logits `[B*n_k, V]` for scale `k` given the cached earlier scales.
    /// `input` is the `[B*n_k, C]` scale input (absent for the first scale);
    /// `injections` is empty or holds one optional `[B*n_k, d]` term per layer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        k: usize,
        conds: &[ClassCond],
        input: Option<&Array<T>>,
        cache: &mut KVCache<T>,
        injections: &[Option<Array<T>>],
    ) -> Result<Array<T>> {
        let sched = &self.cfg.schedule;
        if k >= sched.len() {
            return Err(Error::OutOfRange {
                what: "scale",
                index: k,
                bound: sched.len(),
            });
        }
        let b = conds.len();
        if b != cache.batch() || cache.layers() != self.layers() {
            return Err(Error::Cache(format!(
                "cache holds {} samples over {} layers, step has {b} over {}",
                cache.batch(),
                cache.layers(),
                self.layers()
            )));
        }
        let offsets = sched.offsets();
        if cache.len() != offsets[k] {
            return Err(Error::Cache(format!(
                "scale {k} needs {} cached positions, cache has {}",
                offsets[k],
                cache.len()
            )));
        }
        cache.check_tag(cache_tag(conds, self.cfg.classes)?)?;
        self.check_injections(injections.len())?;
        let n = sched.tokens(k);
        let mut g = Graph::new();
        let x = match (k, input) {
            (0, None) => self.class_rows(&mut g, store, conds)?,
            (0, Some(_)) => return Err(Error::invalid("the first scale takes no latent input")),
            (_, Some(inp)) => {
                if inp.rows() != b * n {
                    return Err(Error::ShapeMismatch {
                        op: "scale input",
                        lhs: inp.shape().to_vec(),
                        rhs: vec![b * n, self.cfg.code_dim],
                    });
                }
                self.word_rows(&mut g, store, inp)?
            }
            (_, None) => return Err(Error::invalid(format!("scale {k} needs a latent input"))),
        };
        let pl = self.pos_level(&mut g, store, offsets[k]..offsets[k + 1], b)?;
        let mut x = g.add(x, pl)?;
        let full_len = cache.len() + n;
        let mask = vec![true; n * full_len];
        let mut new_kv = Vec::with_capacity(self.layers());
        for (l, blk) in self.blocks.iter().enumerate() {
            let c = injections
                .get(l)
                .and_then(|c| c.as_ref())
                .map(|c| g.constant(c.clone()));
            x = Self::inject(&mut g, x, c)?;
            let h = blk.ln1.forward(&mut g, store, x)?;
            let q = blk.q.forward(&mut g, store, h)?;
            let kk = blk.k.forward(&mut g, store, h)?;
            let vv = blk.v.forward(&mut g, store, h)?;
            let (kf, vf) = cache.extended(l, g.value(kk).data(), g.value(vv).data(), n);
            let d = self.cfg.d_model;
            let kc = g.constant(Array::new([b * full_len, d], kf.clone())?);
            let vc = g.constant(Array::new([b * full_len, d], vf.clone())?);
            new_kv.push((kf, vf));
            let a = g.attention(q, kc, vc, self.cfg.heads, b, &mask)?;
            let a = blk.o.forward(&mut g, store, a)?;
            x = g.add(x, a)?;
            x = self.mlp(&mut g, store, blk, x)?;
        }
        for (l, (kf, vf)) in new_kv.into_iter().enumerate() {
            cache.store_layer(l, kf, vf);
        }
        cache.len = full_len;
        let y = self.logits(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }
}
