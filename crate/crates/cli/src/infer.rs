use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use scalar_core::backbone::ClassCond;
use scalar_core::checkpoint::{self, Loaded};
use scalar_core::config::RunConfig;
use scalar_core::control::image_tensor;
use scalar_core::data::pnm::{read_pnm, write_pnm};
use scalar_core::data::{generate_dataset, load_dataset, Image, Modality};
use scalar_core::metrics::{config_hash, consistency_eval, reports_csv, EncoderEmbedder, EvalOptions};
use scalar_core::model::Model;
use scalar_core::numerics::Array;
use scalar_core::sampler::{generate_batch, inpaint, GuidanceConfig, InpaintMask, Request};

use crate::{env_seed, resolve};

fn load_model(workdir: &Path, path: &Path) -> Result<(Model<f32>, RunConfig)> {
    let loaded: Loaded<f32> = checkpoint::load(&resolve(workdir, path))?;
    // checkpoints written outside a run carry no config snapshot
    let run: RunConfig = if loaded.run.is_null() {
        RunConfig {
            model: loaded.model.cfg.clone(),
            ..Default::default()
        }
    } else {
        serde_json::from_value(loaded.run).context("checkpoint run configuration")?
    };
    Ok((loaded.model, run))
}

fn guidance(run: &RunConfig, seed: Option<u64>) -> Result<GuidanceConfig> {
    let mut g = run.guidance.clone();
    if let Some(s) = env_seed()? {
        g.seed = s;
    }
    if let Some(s) = seed {
        g.seed = s;
    }
    Ok(g)
}

fn check_class(model: &Model<f32>, class: usize) -> Result<()> {
    if class >= model.cfg.backbone.classes {
        bail!("class {class} out of range (model has {} classes)", model.cfg.backbone.classes);
    }
    Ok(())
}

/// Control features of a condition map file.
fn control_grid(workdir: &Path, model: &Model<f32>, path: &Path) -> Result<Array<f32>> {
    if model.bank.is_none() {
        bail!("--control given but the checkpoint has no control stack");
    }
    let img = read_pnm(&resolve(workdir, path))?;
    let n = model.cfg.tokenizer.image_size;
    if img.width != n || img.height != n {
        bail!("control map is {}x{}, the model expects {n}x{n}", img.width, img.height);
    }
    let t = image_tensor::<f32>(&img)?;
    let batch = Array::new([1, n, n, 3], t.into_data())?;
    let g = model.control_grids(&batch)?;
    let shape = g.shape()[1..].to_vec();
    Ok(Array::new(shape, g.into_data())?)
}

fn to_image(images: &Array<f32>, i: usize) -> Image {
    let n = images.shape()[1];
    Image::from_rgb_unit(n, n, &images.data()[i * n * n * 3..(i + 1) * n * n * 3])
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_generate(
    workdir: &Path,
    ckpt: &Path,
    out: &Path,
    class: usize,
    count: usize,
    control: Option<&Path>,
    seed: Option<u64>,
    scale: Option<f64>,
) -> Result<()> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let (model, run) = load_model(workdir, ckpt)?;
    check_class(&model, class)?;
    let mut g = guidance(&run, seed)?;
    if let Some(s) = scale {
        g.scale = s;
    }
    let grid = control.map(|c| control_grid(workdir, &model, c)).transpose()?;
    let requests: Vec<Request<'_, f32>> = (0..count)
        .map(|_| Request {
            cond: ClassCond::Label(class),
            control: grid.as_ref(),
            teacher: None,
        })
        .collect();
    let gen = generate_batch(&model, &requests, &g)?;
    let dir = resolve(workdir, out);
    fs::create_dir_all(&dir)?;
    for i in 0..count {
        write_pnm(&dir.join(format!("sample_{i:03}.ppm")), &to_image(&gen.images, i))?;
    }
    println!("wrote {count} images to {}", dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_inpaint(
    workdir: &Path,
    ckpt: &Path,
    source: &Path,
    mask: &Path,
    out: &Path,
    class: usize,
    control: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let (model, run) = load_model(workdir, ckpt)?;
    check_class(&model, class)?;
    let g = guidance(&run, seed)?;
    let n = model.cfg.tokenizer.image_size;
    let src = read_pnm(&resolve(workdir, source))?;
    let m = read_pnm(&resolve(workdir, mask))?;
    if src.channels != 3 || src.width != n || src.height != n {
        bail!("source must be a {n}x{n} colour image");
    }
    if m.channels != 1 || !m.is_binary() || m.width != n || m.height != n {
        bail!("mask must be a {n}x{n} binary greyscale image");
    }
    let sched = &model.cfg.backbone.schedule;
    let tensor = image_tensor::<f32>(&src)?;
    let truth = model.tokenizer.encode_multiscale(&tensor, sched)?;
    let pixels: Vec<bool> = m.data.iter().map(|&v| v == 255).collect();
    let mask = InpaintMask::from_pixels(&pixels, n, sched)?;
    let grid = control.map(|c| control_grid(workdir, &model, c)).transpose()?;
    let gen = inpaint(&model, ClassCond::Label(class), grid.as_ref(), &mask, &truth, &g)?;
    let path = resolve(workdir, out);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_pnm(&path, &to_image(&gen.images, 0))?;
    println!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    workdir: &Path,
    ckpt: &Path,
    out: &Path,
    count: usize,
    data: Option<&Path>,
    modalities: &[Modality],
    no_control: bool,
    seed: Option<u64>,
) -> Result<()> {
    if count == 0 {
        bail!("evaluation set is empty (--count 0)");
    }
    let (model, run) = load_model(workdir, ckpt)?;
    let samples = match data {
        Some(d) => {
            let (_, mut s) = load_dataset(&resolve(workdir, d))?;
            s.truncate(count);
            s
        }
        None => generate_dataset(count, run.data.eval_seed),
    };
    let mods: Vec<Modality> = if modalities.is_empty() {
        run.train.modalities.clone()
    } else {
        modalities.to_vec()
    };
    let opts = EvalOptions {
        guidance: guidance(&run, seed)?,
        use_control: !no_control && model.bank.is_some(),
        batch_size: 32,
    };
    let hash = config_hash(&serde_json::to_string(&run)?);
    let embedder = EncoderEmbedder::new(model.cfg.encoder.clone())?;
    let reports = mods
        .iter()
        .map(|&m| consistency_eval(&model, &samples, m, &opts, Some(&embedder), &hash))
        .collect::<scalar_core::Result<Vec<_>>>()?;
    let dir = resolve(workdir, out);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    let csv = reports_csv(&reports);
    fs::write(dir.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
