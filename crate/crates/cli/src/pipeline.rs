use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use scalar_core::checkpoint::{self, Loaded};
use scalar_core::config::RunConfig;
use scalar_core::data::{load_dataset, ConditionSample};
use scalar_core::model::Model;
use scalar_core::train::{
    prepare, pretrain_backbone, train_tokenizer, write_loss_csv, LossRecord, Mode, Trainer, LOSS_CSV_HEADER,
};

use crate::{env_seed, resolve};

/// Files of one run directory.
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Paths { dir })
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.dir.join("pretrain.ckpt")
    }

    pub fn pretrain_loss(&self) -> PathBuf {
        self.dir.join("pretrain_loss.csv")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn loss(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
}

/// Reads the config, applies the environment seed, and pushes seeds down.
pub fn load_config(workdir: &Path, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&resolve(workdir, path))?;
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    Ok(cfg.resolved())
}

pub fn load_samples(workdir: &Path, cfg: &RunConfig) -> Result<Vec<ConditionSample>> {
    let dir = resolve(workdir, &cfg.data.dir);
    let (_, samples) = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(samples)
}

fn run_value(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Tokenizer and class-conditional backbone: loaded from `cfg.pretrained`, or
/// trained and saved into `paths` when `paths` is given.
pub fn base_model(
    workdir: &Path,
    cfg: &RunConfig,
    samples: &[ConditionSample],
    paths: Option<&Paths>,
) -> Result<Model<f32>> {
    if let Some(p) = &cfg.pretrained {
        let loaded: Loaded<f32> = checkpoint::load(&resolve(workdir, p))?;
        if loaded.model.bank.is_some() {
            bail!("pretrained checkpoint {} already carries a control stack", p.display());
        }
        if loaded.model.cfg != cfg.model {
            bail!("pretrained checkpoint {} was built with a different model configuration", p.display());
        }
        return Ok(loaded.model);
    }
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    eprintln!("tokenizer: {} steps", cfg.tokenizer.steps);
    let last = train_tokenizer(&mut model, samples, &cfg.tokenizer, cfg.seed, |_, _| {})?;
    eprintln!("tokenizer: reconstruction {:.5}", last.recon);
    let per_epoch = cfg.pretrain.batch_size;
    let steps = samples.len().div_ceil(per_epoch);
    let records = pretrain_backbone(&mut model, samples, &cfg.pretrain, |r| {
        if r.step as usize % steps == 0 {
            eprintln!("pretrain: epoch {} ce {:.4}", r.step as usize / steps, r.ce);
        }
    })?;
    if let Some(p) = paths {
        write_loss_csv(&p.pretrain_loss(), &records)?;
        checkpoint::save(&p.pretrain(), &model, &run_value(cfg)?, None)?;
    }
    Ok(model)
}

/// Control fine-tuning of `model` (fresh, or resumed from `resume`). With
/// `paths`, a checkpoint is written at every epoch end and the loss log is
/// kept in step with it.
pub fn finetune(
    mut model: Model<f32>,
    cfg: &RunConfig,
    samples: &[ConditionSample],
    paths: Option<&Paths>,
    resume: Option<Loaded<f32>>,
) -> Result<(Model<f32>, Vec<LossRecord>)> {
    let tc = &cfg.train;
    let mut restore = None;
    if let Some(loaded) = resume {
        let spec = loaded.model.bank.as_ref().map(|b| b.spec.clone());
        if spec.as_ref() != Some(&tc.projection) {
            bail!("resume checkpoint has projection {spec:?}, the config asks for {}", tc.projection);
        }
        if loaded.model.align.is_some() != tc.aligned() {
            bail!("resume checkpoint and config disagree on the alignment head");
        }
        restore = Some(loaded.optimizer.context("resume checkpoint holds no optimizer state")?);
        model = loaded.model;
    } else {
        model.attach_control(tc.projection.clone(), tc.seed)?;
        if tc.aligned() {
            model.attach_alignment(tc.seed)?;
        }
    }
    let data = prepare(&model, samples, &tc.modalities, tc.aligned())?;
    let mut trainer = Trainer::new(&mut model, tc.clone())?;
    if let Some((step, moments)) = restore {
        trainer.restore(&model, step, moments)?;
    }
    let per_epoch = trainer.steps_per_epoch(data.len()) as u64;
    let total = per_epoch * tc.epochs as u64;
    if trainer.steps_taken() > total {
        bail!("checkpoint is at step {}, past the configured {total}", trainer.steps_taken());
    }
    let run = run_value(cfg)?;
    let mut records = Vec::new();
    while trainer.steps_taken() < total {
        let idx = trainer.batch_indices(data.len(), trainer.steps_taken());
        let r = trainer.train_step(&mut model, &data, &idx)?;
        records.push(r);
        if r.step % per_epoch == 0 {
            eprintln!("train: epoch {} ce {:.4} align {:.4}", r.step / per_epoch, r.ce, r.align);
            if let Some(p) = paths {
                checkpoint::save(&p.model(), &model, &run, Some(&trainer.opt))?;
                append_losses(&p.loss(), &records, r.step)?;
            }
        }
    }
    Ok((model, records))
}

/// Rewrites the loss log: existing rows up to the first new step, then `new`.
fn append_losses(path: &Path, new: &[LossRecord], upto: u64) -> Result<()> {
    let first = new.first().map_or(upto + 1, |r| r.step);
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step < first {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    for r in new.iter().filter(|r| r.step <= upto) {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(workdir: &Path, config: &Path, mode: Mode, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(workdir, config)?;
    cfg.train.mode = mode;
    cfg.validate()?;
    let paths = Paths::new(resolve(workdir, &cfg.out))?;
    fs::write(paths.config(), cfg.to_toml())?;
    let samples = load_samples(workdir, &cfg)?;
    let (model, resume) = match resume {
        Some(p) => {
            let loaded: Loaded<f32> = checkpoint::load(&resolve(workdir, p))?;
            if loaded.model.cfg != cfg.model {
                bail!("resume checkpoint was built with a different model configuration");
            }
            (loaded.model.clone(), Some(loaded))
        }
        None => (base_model(workdir, &cfg, &samples, Some(&paths))?, None),
    };
    let (_, records) = finetune(model, &cfg, &samples, Some(&paths), resume)?;
    if let Some(r) = records.last() {
        println!("trained to step {} (ce {:.4}, align {:.4}); checkpoint {}", r.step, r.ce, r.align, paths.model().display());
    } else {
        println!("nothing to do: checkpoint already at the configured step count");
    }
    Ok(())
}
