//! Staged training: tokenizer, class-conditional backbone, then control.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prepare, LossRecord, Mode, TrainConfig, Trainer};
use crate::data::ConditionSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamWConfig, Scalar};
use crate::tokenizer::{stack_images, TokenizerLosses, TokenizerTrainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerStage {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Images used for the k-means style codebook seed.
    pub init_images: usize,
}

impl Default for TokenizerStage {
    fn default() -> Self {
        TokenizerStage {
            steps: 1500,
            batch_size: 32,
            lr: 2e-3,
            init_images: 64,
        }
    }
}

/// Trains the tokenizer in place. The step sequence depends only on `seed`.
pub fn train_tokenizer<T: Scalar>(
    model: &mut Model<T>,
    samples: &[ConditionSample],
    stage: &TokenizerStage,
    seed: u64,
    mut on_step: impl FnMut(usize, &TokenizerLosses),
) -> Result<TokenizerLosses> {
    if samples.is_empty() || stage.batch_size == 0 {
        return Err(Error::invalid("tokenizer training needs samples and a positive batch size"));
    }
    let size = model.cfg.tokenizer.image_size;
    let sched = model.cfg.backbone.schedule.clone();
    let pixels: Vec<Vec<f32>> = samples.iter().map(|s| s.image.to_rgb_unit()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70_6b_00);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let first: Vec<Vec<f32>> = order
        .iter()
        .take(stage.init_images.max(1))
        .map(|&i| pixels[i].clone())
        .collect();
    model
        .tokenizer
        .init_codebook(&stack_images::<T>(&first, size)?, &sched, &mut rng)?;
    let opt = AdamWConfig {
        lr: stage.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut trainer = TokenizerTrainer::new(opt, seed, model.cfg.tokenizer.vocab);
    let mut last = TokenizerLosses::default();
    let mut cursor = 0;
    for step in 0..stage.steps {
        let mut batch = Vec::with_capacity(stage.batch_size);
        while batch.len() < stage.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pixels[order[cursor]].clone());
            cursor += 1;
        }
        let images = stack_images::<T>(&batch, size)?;
        last = trainer.step(&mut model.tokenizer, &images, &sched)?.0;
        on_step(step, &last);
    }
    Ok(last)
}

/// Class-conditional backbone training without control.
pub fn pretrain_backbone<T: Scalar>(
    model: &mut Model<T>,
    samples: &[ConditionSample],
    cfg: &TrainConfig,
    on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if model.bank.is_some() || model.align.is_some() {
        return Err(Error::invalid("pretraining expects a model without a control stack"));
    }
    let cfg = TrainConfig {
        mode: Mode::Scalar,
        ..cfg.clone()
    };
    let data = prepare(model, samples, &[], false)?;
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(model, &data, on_step)
}

/// Attaches the control stack described by `cfg` and fine-tunes it.
pub fn finetune_control<T: Scalar>(
    model: &mut Model<T>,
    samples: &[ConditionSample],
    cfg: &TrainConfig,
    on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    model.attach_control(cfg.projection.clone(), cfg.seed)?;
    if cfg.aligned() {
        model.attach_alignment(cfg.seed)?;
    }
    let data = prepare(model, samples, &cfg.modalities, cfg.aligned())?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(model, &data, on_step)
}
