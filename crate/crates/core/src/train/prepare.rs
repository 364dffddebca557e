use std::collections::BTreeMap;

use crate::control::{image_tensor, resize_features};
use crate::data::{ConditionSample, Modality};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Array, Scalar};
use crate::tokenizer::stack_images;

/// Images per encoder call while preparing.
const CHUNK: usize = 64;

/// Tokenized targets, teacher-forcing inputs and cached control features.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub classes: Vec<usize>,
    /// Flattened token maps, `T` per sample.
    pub targets: Vec<Vec<usize>>,
    /// Scale inputs `[(T-1) * C]` per sample.
    pub inputs: Vec<Vec<T>>,
    /// Per modality and sample: per-scale feature rows `[T, C_f]`, or the raw
    /// encoder grid `[H*W, C_f]` when `grids` is set.
    pub controls: BTreeMap<Modality, Vec<Vec<T>>>,
    pub grids: bool,
    /// Encoder grids of the images themselves, for alignment.
    pub image_features: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Prepared<T> {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn images_of<T: Scalar>(samples: &[ConditionSample], pick: impl Fn(&ConditionSample) -> &crate::data::Image) -> Result<Array<T>> {
    let size = samples.first().map(|s| s.image.width).unwrap_or(0);
    let pixels: Vec<Vec<f32>> = samples.iter().map(|s| pick(s).to_rgb_unit()).collect();
    stack_images(&pixels, size)
}

/// Token targets and scale inputs for every sample.
pub fn prepare_tokens<T: Scalar>(model: &Model<T>, samples: &[ConditionSample]) -> Result<(Vec<Vec<usize>>, Vec<Vec<T>>)> {
    let sched = &model.cfg.backbone.schedule;
    let mut targets = Vec::with_capacity(samples.len());
    let mut inputs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let images = images_of::<T>(chunk, |s| &s.image)?;
        for maps in model.tokenizer.encode_batch(&images, sched)? {
            targets.push(maps.iter().flat_map(|m| m.indices.iter().copied()).collect());
            inputs.push(model.tokenizer.scale_inputs(&maps, sched)?.into_data());
        }
    }
    Ok((targets, inputs))
}

/// Raw encoder grids (aligned if `aligned` and the model has a head), one per sample.
pub fn encode_conditions<T: Scalar>(
    model: &Model<T>,
    samples: &[ConditionSample],
    pick: impl Fn(&ConditionSample) -> &crate::data::Image + Copy,
    aligned: bool,
) -> Result<Vec<Array<T>>> {
    let (h, w) = model.cfg.encoder.grid();
    let c = model.control_channels();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let images = images_of::<T>(chunk, pick)?;
        let f = if aligned {
            model.control_grids(&images)?
        } else {
            model.raw_features(&images)?
        };
        for g in f.data().chunks(h * w * c) {
            out.push(Array::new([h, w, c], g.to_vec())?);
        }
    }
    Ok(out)
}

/// Builds the full training cache. `grids` keeps raw encoder grids (needed
/// when an alignment head sits in the control path).
pub fn prepare<T: Scalar>(
    model: &Model<T>,
    samples: &[ConditionSample],
    modalities: &[Modality],
    grids: bool,
) -> Result<Prepared<T>> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot prepare an empty dataset"));
    }
    let (targets, inputs) = prepare_tokens(model, samples)?;
    let sched = &model.cfg.backbone.schedule;
    let mut controls = BTreeMap::new();
    for &m in modalities {
        let feats = encode_conditions(model, samples, |s| s.condition(m), false)?;
        let per: Vec<Vec<T>> = if grids {
            feats.into_iter().map(Array::into_data).collect()
        } else {
            feats
                .iter()
                .map(|f| {
                    Ok(resize_features(f, sched)?
                        .into_iter()
                        .flat_map(Array::into_data)
                        .collect())
                })
                .collect::<Result<_>>()?
        };
        controls.insert(m, per);
    }
    let image_features = if grids {
        Some(
            encode_conditions(model, samples, |s| &s.image, false)?
                .into_iter()
                .map(Array::into_data)
                .collect(),
        )
    } else {
        None
    };
    Ok(Prepared {
        classes: samples.iter().map(|s| s.class).collect(),
        targets,
        inputs,
        controls,
        grids,
        image_features,
    })
}

/// `[N,N,3]` tensor of one condition map.
pub fn condition_tensor<T: Scalar>(sample: &ConditionSample, m: Modality) -> Result<Array<T>> {
    image_tensor(sample.condition(m))
}
