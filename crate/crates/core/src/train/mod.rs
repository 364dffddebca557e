//! Teacher-forced training of the backbone and control stack.

mod pipeline;
mod prepare;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ClassCond};
use crate::checkpoint::{resolve_moments, Moments};
use crate::control::ProjectionSpec;
use crate::data::{sample_seed, Modality};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamW, AdamWConfig, Array, Graph, ParamId, ParamStore, Scalar};
use crate::unify::sample_modality;

pub use pipeline::{finetune_control, pretrain_backbone, train_tokenizer, TokenizerStage};
pub use prepare::{condition_tensor, encode_conditions, prepare, prepare_tokens, Prepared};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FreezePolicy {
    #[default]
    #[serde(rename = "frz-none")]
    None,
    /// Query, key, value and output projections frozen.
    #[serde(rename = "frz-sa")]
    SelfAttention,
    #[serde(rename = "frz-all")]
    All,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 3] = [FreezePolicy::None, FreezePolicy::SelfAttention, FreezePolicy::All];

    pub fn tag(self) -> &'static str {
        match self {
            FreezePolicy::None => "frz-none",
            FreezePolicy::SelfAttention => "frz-sa",
            FreezePolicy::All => "frz-all",
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezePolicy::ALL
            .into_iter()
            .find(|p| p.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown freeze policy `{s}` (expected frz-none, frz-sa or frz-all)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Scalar,
    /// Multi-modality training with the alignment loss.
    Uni,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scalar" => Ok(Mode::Scalar),
            "uni" => Ok(Mode::Uni),
            _ => Err(Error::invalid(format!("unknown mode `{s}` (expected scalar or uni)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the alignment loss (unified mode).
    pub lambda: f64,
    /// Probability of dropping class and control together.
    pub class_drop: f64,
    pub seed: u64,
    pub freeze: FreezePolicy,
    pub projection: ProjectionSpec,
    pub mode: Mode,
    pub modalities: Vec<Modality>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            lambda: 1.0,
            class_drop: 0.1,
            seed: 0,
            freeze: FreezePolicy::None,
            projection: ProjectionSpec::default(),
            mode: Mode::Scalar,
            modalities: vec![Modality::Canny],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate must be positive and weight decay nonnegative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("alignment weight must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.class_drop) {
            return Err(Error::invalid("class-drop probability must lie in [0, 1]"));
        }
        if self.modalities.is_empty() {
            return Err(Error::invalid("at least one training modality is required"));
        }
        Ok(())
    }

    /// Whether the alignment head sits in the control path.
    pub fn aligned(&self) -> bool {
        self.mode == Mode::Uni && self.lambda > 0.0
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Mean negative log-likelihood of `targets` under row-wise `logits`.
pub fn ce_loss<T: Scalar>(logits: &Array<T>, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, targets.to_vec())?;
    Ok(g.value(ce).data()[0].as_f64())
}

/// Sets trainable flags per `policy` and returns the trainable set.
pub fn apply_freeze<T: Scalar>(
    store: &mut ParamStore<T>,
    backbone: &Backbone,
    control: &[ParamId],
    policy: FreezePolicy,
) -> Vec<ParamId> {
    let all = backbone.param_ids();
    for &id in &all {
        store.set_trainable(id, policy != FreezePolicy::All);
    }
    if policy == FreezePolicy::SelfAttention {
        for id in backbone.attention_param_ids() {
            store.set_trainable(id, false);
        }
    }
    for &id in control {
        store.set_trainable(id, true);
    }
    all.into_iter()
        .chain(control.iter().copied())
        .filter(|&id| store.get(id).trainable)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub ce: f64,
    pub align: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,ce,align,total";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:.9},{:.9},{:.9}", self.step, self.ce, self.align, self.total)
    }
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

const PERM_SALT: u64 = 0x7065_726d;

/// One sampled minibatch ready for the graph.
struct Batch<T> {
    conds: Vec<ClassCond>,
    active: Vec<bool>,
    inputs: Array<T>,
    targets: Vec<usize>,
    /// Per-scale rows `[B*n_k, C_f]`, or the grid stack `[B*H*W, C_f]`.
    control: Option<Vec<Array<T>>>,
    image_features: Option<Array<T>>,
}

/// Optimizer state plus the step counter that drives batch order and dropout.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub opt: AdamW<T>,
    pub trainable: Vec<ParamId>,
}

impl<T: Scalar> Trainer<T> {
    /// Applies the freeze policy to `model` and sets up the optimizer.
    pub fn new(model: &mut Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.aligned() && model.align.is_none() {
            return Err(Error::invalid("unified training with lambda > 0 needs an alignment head"));
        }
        if !cfg.aligned() && model.align.is_some() {
            return Err(Error::invalid("model carries an alignment head but lambda is 0 or mode is scalar"));
        }
        let control = model.control_param_ids();
        let trainable = apply_freeze(&mut model.store, &model.backbone, &control, cfg.freeze);
        Ok(Trainer {
            opt: AdamW::new(cfg.optimizer()),
            cfg,
            trainable,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.opt.steps_taken()
    }

    /// Restores optimizer progress saved by a checkpoint.
    pub fn restore(&mut self, model: &Model<T>, step: u64, moments: Moments<T>) -> Result<()> {
        let resolved = resolve_moments(&model.store, moments)?;
        self.opt.import(step, resolved);
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Sample indices of global step `step` over a dataset of `n`.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let per = self.steps_per_epoch(n) as u64;
        let (epoch, pos) = (step / per, (step % per) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed ^ PERM_SALT, epoch)));
        let bs = self.cfg.batch_size;
        order[pos * bs..((pos + 1) * bs).min(n)].to_vec()
    }

    fn batch(&self, model: &Model<T>, data: &Prepared<T>, indices: &[usize], step: u64) -> Result<Batch<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, step));
        let sched = &model.cfg.backbone.schedule;
        let with_control = model.bank.is_some();
        let mut conds = Vec::with_capacity(indices.len());
        let mut active = Vec::with_capacity(indices.len());
        let mut picks = Vec::with_capacity(indices.len());
        for &i in indices {
            let dropped = rng.random::<f64>() < self.cfg.class_drop;
            let m = if self.cfg.modalities.len() > 1 {
                sample_modality(&mut rng, &self.cfg.modalities)?
            } else {
                self.cfg.modalities[0]
            };
            conds.push(if dropped { ClassCond::Null } else { ClassCond::Label(data.classes[i]) });
            active.push(!dropped);
            picks.push(m);
        }
        let inputs: Vec<T> = indices.iter().flat_map(|&i| data.inputs[i].iter().copied()).collect();
        let c = model.cfg.backbone.code_dim;
        let inputs = Array::new([inputs.len() / c, c], inputs)?;
        let targets = indices.iter().flat_map(|&i| data.targets[i].iter().copied()).collect();
        let cf = model.control_channels();
        let control = if with_control {
            let feats = |i: usize, m: Modality| -> Result<&Vec<T>> {
                data.controls
                    .get(&m)
                    .map(|v| &v[i])
                    .ok_or_else(|| Error::invalid(format!("no cached features for modality {m}")))
            };
            if data.grids {
                let mut rows = Vec::new();
                for (&i, &m) in indices.iter().zip(&picks) {
                    rows.extend_from_slice(feats(i, m)?);
                }
                Some(vec![Array::new([rows.len() / cf, cf], rows)?])
            } else {
                let offsets = sched.offsets();
                let mut per_scale = Vec::with_capacity(sched.len());
                for k in 0..sched.len() {
                    let mut rows = Vec::with_capacity(indices.len() * sched.tokens(k) * cf);
                    for (&i, &m) in indices.iter().zip(&picks) {
                        rows.extend_from_slice(&feats(i, m)?[offsets[k] * cf..offsets[k + 1] * cf]);
                    }
                    per_scale.push(Array::new([rows.len() / cf, cf], rows)?);
                }
                Some(per_scale)
            }
        } else {
            None
        };
        let image_features = match (&data.image_features, self.cfg.aligned()) {
            (Some(f), true) => {
                let rows: Vec<T> = indices.iter().flat_map(|&i| f[i].iter().copied()).collect();
                Some(Array::new([rows.len() / cf, cf], rows)?)
            }
            (None, true) => return Err(Error::invalid("alignment needs cached image features")),
            _ => None,
        };
        Ok(Batch {
            conds,
            active,
            inputs,
            targets,
            control,
            image_features,
        })
    }

    /// Forward, backward and one optimizer update on `indices`.
    pub fn train_step(&mut self, model: &mut Model<T>, data: &Prepared<T>, indices: &[usize]) -> Result<LossRecord> {
        let step = self.opt.steps_taken();
        let batch = self.batch(model, data, indices, step)?;
        let b = indices.len();
        let sched = model.cfg.backbone.schedule.clone();
        let mut g = Graph::new();
        let store = &model.store;
        let x = model.backbone.embed(&mut g, store, &batch.conds, &batch.inputs)?;
        let mut align = None;
        let injections = match (&model.bank, &batch.control) {
            (Some(bank), Some(ctrl)) => {
                let rows = if data.grids {
                    let (gh, gw) = model.cfg.encoder.grid();
                    let cf = model.control_channels();
                    let grid = g.constant(ctrl[0].clone());
                    let grid = match &model.align {
                        Some(head) if self.cfg.aligned() => {
                            let a = head.forward(&mut g, store, grid)?;
                            let target = g.constant(batch.image_features.clone().expect("checked in batch"));
                            align = Some(g.mse(a, target)?);
                            a
                        }
                        _ => grid,
                    };
                    let grid = g.reshape(grid, [b, gh, gw, cf])?;
                    sched
                        .scales()
                        .iter()
                        .map(|&(h, w)| {
                            let r = g.resize(grid, (h, w))?;
                            g.reshape(r, [b * h * w, cf])
                        })
                        .collect::<Result<Vec<_>>>()?
                } else {
                    ctrl.iter().map(|a| g.constant(a.clone())).collect()
                };
                bank.injections(&mut g, store, &rows, b, &sched, model.backbone.layers(), Some(&batch.active))?
            }
            _ => Vec::new(),
        };
        let logits = model.backbone.forward(&mut g, store, x, b, &injections)?;
        let ce = g.cross_entropy(logits, batch.targets)?;
        let total = match align {
            Some(a) => {
                let weighted = g.scale(a, self.cfg.lambda);
                g.add(ce, weighted)?
            }
            None => ce,
        };
        let grads = g.backward(total)?;
        let record = LossRecord {
            step: step + 1,
            ce: g.value(ce).data()[0].as_f64(),
            align: align.map_or(0.0, |a| g.value(a).data()[0].as_f64()),
            total: g.value(total).data()[0].as_f64(),
        };
        if !record.total.is_finite() {
            return Err(Error::invalid(format!("non-finite loss at step {}", record.step)));
        }
        let updates = grads.params();
        self.opt.step(&mut model.store, &updates);
        Ok(record)
    }

    /// Runs until `epochs` full passes are done, resuming from the current step.
    pub fn run(
        &mut self,
        model: &mut Model<T>,
        data: &Prepared<T>,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let total = (self.steps_per_epoch(data.len()) * self.cfg.epochs) as u64;
        let mut records = Vec::new();
        while self.opt.steps_taken() < total {
            let idx = self.batch_indices(data.len(), self.opt.steps_taken());
            let r = self.train_step(model, data, &idx)?;
            on_step(&r);
            records.push(r);
        }
        Ok(records)
    }
}
