//! Conditional-consistency scores, Fréchet distance and the evaluation loop.

mod extract;
mod frechet;
mod score;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ClassCond;
use crate::control::{ControlEncoder, EncoderConfig, FeatureExtractor};
use crate::data::{sample_seed, ConditionSample, Image, Modality};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Array, Scalar};
use crate::sampler::{generate_batch, GuidanceConfig, Request};
use crate::tokenizer::stack_images;

pub use extract::{depth_map, edge_map, otsu_threshold, re_extract, sobel_magnitude, value_channel};
pub use frechet::{frechet_distance, Gaussian, EIG_CLAMP};
pub use score::{f1_edge, gaussian_window, rmse, ssim, SSIM_SIGMA, SSIM_WINDOW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    F1,
    Rmse,
    Ssim,
}

impl MetricKind {
    pub fn of(m: Modality) -> Self {
        match m {
            Modality::Canny | Modality::Sketch => MetricKind::F1,
            Modality::Depth | Modality::Normal => MetricKind::Rmse,
            Modality::Hed => MetricKind::Ssim,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != MetricKind::Rmse
    }

    pub fn tag(self) -> &'static str {
        match self {
            MetricKind::F1 => "f1",
            MetricKind::Rmse => "rmse",
            MetricKind::Ssim => "ssim",
        }
    }

    pub fn score(self, pred: &Image, reference: &Image) -> Result<f64> {
        match self {
            MetricKind::F1 => f1_edge(pred, reference),
            MetricKind::Rmse => rmse(pred, reference),
            MetricKind::Ssim => ssim(pred, reference),
        }
    }
}

/// Image embedding used for the Fréchet distance.
pub trait Embedder {
    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

/// Mean-pooled features of a frozen control encoder.
pub struct EncoderEmbedder {
    encoder: ControlEncoder<f32>,
}

impl EncoderEmbedder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        Ok(EncoderEmbedder {
            encoder: ControlEncoder::new(cfg)?,
        })
    }
}

impl Embedder for EncoderEmbedder {
    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let size = self.encoder.input_size();
        let (h, w) = self.encoder.grid();
        let c = self.encoder.channels();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let pixels: Vec<Vec<f32>> = chunk.iter().map(Image::to_rgb_unit).collect();
            let f = self.encoder.extract(&stack_images::<f32>(&pixels, size)?)?;
            for grid in f.data().chunks(h * w * c) {
                let mut pooled = vec![0.0; c];
                for px in grid.chunks(c) {
                    pooled.iter_mut().zip(px).for_each(|(p, &v)| *p += v as f64 / (h * w) as f64);
                }
                out.push(pooled);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub modality: Modality,
    pub metric: MetricKind,
    /// Mean score over the evaluated samples.
    pub consistency: f64,
    pub frechet: Option<f64>,
    pub count: usize,
    pub config_hash: String,
}

pub const REPORT_CSV_HEADER: &str = "modality,metric,consistency,frechet,count,config_hash";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{}",
            self.modality,
            self.metric.tag(),
            self.consistency,
            self.frechet.map(|f| format!("{f:.6}")).unwrap_or_default(),
            self.count,
            self.config_hash
        )
    }
}

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Hex SHA-256 of a serialized configuration.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Mean consistency of `generated[i]` against `samples[i]`'s condition.
pub fn consistency_of(generated: &[Image], samples: &[ConditionSample], m: Modality) -> Result<f64> {
    if generated.is_empty() || generated.len() != samples.len() {
        return Err(Error::invalid("consistency needs one generated image per sample"));
    }
    let kind = MetricKind::of(m);
    let mut total = 0.0;
    for (img, s) in generated.iter().zip(samples) {
        total += kind.score(&re_extract(img, m)?, s.condition(m))?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub guidance: GuidanceConfig,
    /// Feed each sample's condition map; off gives the class-only baseline.
    pub use_control: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            guidance: GuidanceConfig::default(),
            use_control: true,
            batch_size: 32,
        }
    }
}

fn to_images<T: Scalar>(images: &Array<T>) -> Vec<Image> {
    let n = images.shape()[1];
    images
        .data()
        .chunks(n * n * 3)
        .map(|c| {
            let v: Vec<f32> = c.iter().map(|x| x.as_f64() as f32).collect();
            Image::from_rgb_unit(n, n, &v)
        })
        .collect()
}

/// One image per sample, conditioned on its class (and its `m` map when
/// `opts.use_control`). Batch `j` samples with seed `sample_seed(seed, j)`.
pub fn generate_for<T: Scalar>(
    model: &Model<T>,
    samples: &[ConditionSample],
    m: Modality,
    opts: &EvalOptions,
) -> Result<Vec<Image>> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let size = model.cfg.tokenizer.image_size;
    let mut out = Vec::with_capacity(samples.len());
    for (j, chunk) in samples.chunks(opts.batch_size.max(1)).enumerate() {
        let grids = if opts.use_control {
            let pixels: Vec<Vec<f32>> = chunk.iter().map(|s| s.condition(m).to_rgb_unit()).collect();
            let f = model.control_grids(&stack_images::<T>(&pixels, size)?)?;
            let per = f.len() / chunk.len();
            let shape = f.shape()[1..].to_vec();
            f.data()
                .chunks(per)
                .map(|g| Array::new(shape.clone(), g.to_vec()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let requests: Vec<Request<'_, T>> = chunk
            .iter()
            .enumerate()
            .map(|(i, s)| Request {
                cond: ClassCond::Label(s.class),
                control: grids.get(i),
                teacher: None,
            })
            .collect();
        let guidance = GuidanceConfig {
            seed: sample_seed(opts.guidance.seed, j as u64),
            ..opts.guidance.clone()
        };
        out.extend(to_images(&generate_batch(model, &requests, &guidance)?.images));
    }
    Ok(out)
}

/// Generates from every sample's condition, re-extracts, and scores.
pub fn consistency_eval<T: Scalar>(
    model: &Model<T>,
    samples: &[ConditionSample],
    m: Modality,
    opts: &EvalOptions,
    embedder: Option<&dyn Embedder>,
    config_hash: &str,
) -> Result<MetricReport> {
    let generated = generate_for(model, samples, m, opts)?;
    let consistency = consistency_of(&generated, samples, m)?;
    let frechet = match embedder {
        Some(e) if samples.len() >= 2 => {
            let real: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
            let a = Gaussian::fit(&e.embed(&generated)?)?;
            let b = Gaussian::fit(&e.embed(&real)?)?;
            Some(frechet_distance(&a, &b)?)
        }
        _ => None,
    };
    Ok(MetricReport {
        modality: m,
        metric: MetricKind::of(m),
        consistency,
        frechet,
        count: samples.len(),
        config_hash: config_hash.to_string(),
    })
}
