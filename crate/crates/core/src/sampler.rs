//! Scale-by-scale sampling with classifier-free guidance, inpainting and
//! hybrid-condition generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ClassCond, KVCache};
use crate::control::FeatureExtractor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Array, ResizePlan, Scalar};
use crate::tokenizer::{check_maps, ScaleSchedule, TokenMap};
use crate::unify::{fuse_hybrid, HybridSpec};

pub const DEFAULT_GUIDANCE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: DEFAULT_GUIDANCE,
            top_k: 64,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("guidance scale must be >= 0, got {}", self.scale)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return Err(Error::invalid(format!("top-k must be in 1..={vocab}, got {}", self.top_k)));
        }
        Ok(())
    }
}

/// `uncond + s * (cond - uncond)`, evaluated as `(1 - s) * uncond + s * cond`
/// so that `s = 0` and `s = 1` return their inputs exactly.
pub fn cfg_mix<T: Scalar>(cond: &Array<T>, uncond: &Array<T>, s: f64) -> Result<Array<T>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg mix",
            lhs: cond.shape().to_vec(),
            rhs: uncond.shape().to_vec(),
        });
    }
    let (a, s) = (T::lit(1.0 - s), T::lit(s));
    let data = cond.data().iter().zip(uncond.data()).map(|(&c, &u)| a * u + s * c).collect();
    Array::new(cond.shape().to_vec(), data)
}

/// Index drawn from temperature-scaled, top-k truncated logits.
/// Ties at the cutoff keep the lower indices.
pub fn sample_token<T: Scalar>(logits: &[T], top_k: usize, temperature: f64, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let u: f64 = rng.random();
    if order.len() == 1 {
        return order[0];
    }
    let top = logits[order[0]].as_f64();
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i].as_f64() - top) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (&i, w) in order.iter().zip(&weights) {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    *order.last().expect("nonempty")
}

/// Per-scale generate/teacher-force flags (`true` = generate).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InpaintMask {
    pub scales: Vec<Vec<bool>>,
}

impl InpaintMask {
    pub fn full(schedule: &ScaleSchedule, value: bool) -> Self {
        InpaintMask {
            scales: (0..schedule.len()).map(|k| vec![value; schedule.tokens(k)]).collect(),
        }
    }

    /// Token cells touching any masked pixel of a square `size x size` mask.
    pub fn from_pixels(pixels: &[bool], size: usize, schedule: &ScaleSchedule) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::invalid(format!(
                "pixel mask has {} entries, expected {}",
                pixels.len(),
                size * size
            )));
        }
        let scales = schedule
            .scales()
            .iter()
            .map(|&(h, w)| {
                let mut cells = vec![false; h * w];
                for y in 0..size {
                    for x in 0..size {
                        if pixels[y * size + x] {
                            cells[(y * h / size) * w + x * w / size] = true;
                        }
                    }
                }
                cells
            })
            .collect();
        Ok(InpaintMask { scales })
    }

    pub fn check(&self, schedule: &ScaleSchedule) -> Result<()> {
        let ok = self.scales.len() == schedule.len()
            && self.scales.iter().enumerate().all(|(k, m)| m.len() == schedule.tokens(k));
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "inpaint mask",
                lhs: self.scales.iter().map(Vec::len).collect(),
                rhs: (0..schedule.len()).map(|k| schedule.tokens(k)).collect(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generation<T> {
    /// Token maps per sample.
    pub maps: Vec<Vec<TokenMap>>,
    /// Decoded images `[B,N,N,3]`.
    pub images: Array<T>,
}

/// One request in a generation batch.
#[derive(Clone, Debug)]
pub struct Request<'a, T> {
    pub cond: ClassCond,
    /// Injected feature grid `[H,W,C]` (already aligned for unified models).
    pub control: Option<&'a Array<T>>,
    /// Teacher-forced maps and mask, for inpainting.
    pub teacher: Option<(&'a [TokenMap], &'a InpaintMask)>,
}

/// Samples every request of the batch. Request `i` draws from stream `i` of
/// the seeded generator.
pub fn generate_batch<T: Scalar>(model: &Model<T>, requests: &[Request<'_, T>], guidance: &GuidanceConfig) -> Result<Generation<T>> {
    let bb = &model.backbone;
    let sched = &bb.cfg.schedule;
    let vocab = bb.cfg.vocab;
    guidance.validate(vocab)?;
    let b = requests.len();
    if b == 0 {
        return Err(Error::invalid("no generation requests"));
    }
    let with_control = requests.iter().any(|r| r.control.is_some());
    if with_control && model.bank.is_none() {
        return Err(Error::invalid("control image given but the model has no control stack"));
    }
    let (gh, gw) = model.encoder.grid();
    let channels = model.control_channels();
    // per-scale control rows for each request (zero rows where absent)
    let mut control_rows: Vec<Vec<Array<T>>> = Vec::with_capacity(b);
    for r in requests {
        if let Some((maps, mask)) = r.teacher {
            check_maps(maps, sched, vocab)?;
            mask.check(sched)?;
        }
        control_rows.push(match r.control {
            Some(grid) => {
                if grid.shape() != [gh, gw, channels] {
                    return Err(Error::ShapeMismatch {
                        op: "control features",
                        lhs: grid.shape().to_vec(),
                        rhs: vec![gh, gw, channels],
                    });
                }
                model.scale_rows(grid)?
            }
            None => Vec::new(),
        });
    }
    let mut conds: Vec<ClassCond> = requests.iter().map(|r| r.cond.clone()).collect();
    conds.extend(std::iter::repeat_n(ClassCond::Null, b));
    let mut cache: KVCache<T> = bb.new_cache(2 * b);
    let mut rngs: Vec<ChaCha8Rng> = (0..b)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(guidance.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let tok = &model.tokenizer;
    let (lh, lw) = tok.grid();
    let dim = tok.cfg.code_dim;
    let mut acc: Vec<Array<T>> = (0..b).map(|_| Array::zeros([lh, lw, dim])).collect();
    let mut maps: Vec<Vec<TokenMap>> = vec![Vec::with_capacity(sched.len()); b];
    let d = bb.cfg.d_model;
    for k in 0..sched.len() {
        let (h, w) = sched.extent(k);
        let n = h * w;
        let input = if k == 0 {
            None
        } else {
            let plan = ResizePlan::new((lh, lw), (h, w))?;
            let mut rows = Vec::with_capacity(2 * b * n * dim);
            for a in &acc {
                rows.extend(plan.apply(a.data(), 1, dim));
            }
            rows.extend_from_within(..);
            Some(Array::new([2 * b * n, dim], rows)?)
        };
        let injections = match (&model.bank, with_control) {
            (Some(bank), true) => {
                let mut rows = Vec::with_capacity(b * n * channels);
                for cr in &control_rows {
                    match cr.get(k) {
                        Some(a) => rows.extend_from_slice(a.data()),
                        None => rows.extend(std::iter::repeat_n(T::zero(), n * channels)),
                    }
                }
                let per_layer = bank.step_injections(&model.store, &Array::new([b * n, channels], rows)?, k, bb.layers())?;
                per_layer
                    .into_iter()
                    .map(|c| {
                        c.map(|c| {
                            let mut data = c.into_data();
                            // requests without control and the unconditional half get nothing
                            for (i, cr) in control_rows.iter().enumerate() {
                                if cr.is_empty() {
                                    data[i * n * d..(i + 1) * n * d].fill(T::zero());
                                }
                            }
                            data.extend(std::iter::repeat_n(T::zero(), b * n * d));
                            Array::new([2 * b * n, d], data)
                        })
                        .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => Vec::new(),
        };
        let logits = bb.forward_step(&model.store, k, &conds, input.as_ref(), &mut cache, &injections)?;
        let half = b * n * vocab;
        let cond = Array::new([b * n, vocab], logits.data()[..half].to_vec())?;
        let uncond = Array::new([b * n, vocab], logits.data()[half..].to_vec())?;
        let mixed = cfg_mix(&cond, &uncond, guidance.scale)?;
        for (i, rng) in rngs.iter_mut().enumerate() {
            let mut idx: Vec<usize> = (0..n)
                .map(|p| {
                    let row = &mixed.data()[(i * n + p) * vocab..(i * n + p + 1) * vocab];
                    sample_token(row, guidance.top_k, guidance.temperature, rng)
                })
                .collect();
            if let Some((gt, mask)) = requests[i].teacher {
                for (p, v) in idx.iter_mut().enumerate() {
                    if !mask.scales[k][p] {
                        *v = gt[k].indices[p];
                    }
                }
            }
            let map = TokenMap { h, w, indices: idx };
            tok.accumulate(&mut acc[i], &map)?;
            maps[i].push(map);
        }
    }
    let mut stacked = Vec::with_capacity(b * lh * lw * dim);
    for a in &acc {
        stacked.extend_from_slice(a.data());
    }
    let images = tok.decode_latent(&Array::new([b, lh, lw, dim], stacked)?)?;
    Ok(Generation { maps, images })
}

/// Single-image generation.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    cond: ClassCond,
    control: Option<&Array<T>>,
    guidance: &GuidanceConfig,
) -> Result<Generation<T>> {
    generate_batch(
        model,
        &[Request {
            cond,
            control,
            teacher: None,
        }],
        guidance,
    )
}

/// Generates inside `mask` and teacher-forces `truth` everywhere else.
pub fn inpaint<T: Scalar>(
    model: &Model<T>,
    cond: ClassCond,
    control: Option<&Array<T>>,
    mask: &InpaintMask,
    truth: &[TokenMap],
    guidance: &GuidanceConfig,
) -> Result<Generation<T>> {
    generate_batch(
        model,
        &[Request {
            cond,
            control,
            teacher: Some((truth, mask)),
        }],
        guidance,
    )
}

/// Generation from two fused conditions of different modalities.
pub fn hybrid_generate<T: Scalar>(model: &Model<T>, spec: &HybridSpec<T>, guidance: &GuidanceConfig) -> Result<Generation<T>> {
    let head = model
        .align
        .as_ref()
        .ok_or_else(|| Error::invalid("hybrid generation needs a unified model with an alignment head"))?;
    let (grid, cond) = fuse_hybrid(spec, &model.encoder, head, &model.store, model.cfg.backbone.classes)?;
    generate(model, cond, Some(&grid), guidance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfg_reductions() {
        let c = Array::<f32>::new([1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let u = Array::<f32>::new([1, 3], vec![0.1, 0.3, -0.7]).unwrap();
        assert_eq!(cfg_mix(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_mix(&c, &u, 0.0).unwrap(), u);
        assert_eq!(GuidanceConfig::default().scale, 4.0);
    }

    #[test]
    fn top_one_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.1f32, 2.0, 2.0, -1.0];
        for _ in 0..20 {
            assert_eq!(sample_token(&logits, 1, 1.0, &mut rng), 1);
        }
    }

    #[test]
    fn top_k_truncates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.0f64, 5.0, 4.9, 4.8, 0.0];
        for _ in 0..200 {
            let i = sample_token(&logits, 2, 10.0, &mut rng);
            assert!(i == 1 || i == 2);
        }
    }

    #[test]
    fn pixel_mask_cells() {
        let sched = ScaleSchedule::square(&[1, 2]).unwrap();
        let mut px = vec![false; 16];
        px[3] = true; // top-right pixel
        let m = InpaintMask::from_pixels(&px, 4, &sched).unwrap();
        assert_eq!(m.scales, vec![vec![true], vec![false, true, false, false]]);
    }
}
