//! The assembled generator: tokenizer, backbone and optional control stack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::control::{resize_features, ControlEncoder, EncoderConfig, FeatureExtractor, ProjectionBank, ProjectionSpec};
use crate::error::{Error, Result};
use crate::numerics::{Array, ParamId, ParamStore, Scalar};
use crate::tokenizer::{Tokenizer, TokenizerConfig};
use crate::unify::AlignmentHead;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.backbone.validate()?;
        self.encoder.validate()?;
        let t = &self.tokenizer;
        let b = &self.backbone;
        if b.vocab != t.vocab || b.code_dim != t.code_dim {
            return Err(Error::invalid(format!(
                "backbone expects vocab {} / code width {}, tokenizer has {} / {}",
                b.vocab, b.code_dim, t.vocab, t.code_dim
            )));
        }
        if b.schedule.last() != t.grid() {
            return Err(Error::invalid(format!(
                "schedule ends at {:?} but the tokenizer grid is {:?}",
                b.schedule.last(),
                t.grid()
            )));
        }
        if self.encoder.image_size != t.image_size {
            return Err(Error::invalid("control encoder and tokenizer disagree on image size"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer<T>,
    pub encoder: ControlEncoder<T>,
    pub backbone: Backbone,
    /// Backbone, projection and alignment parameters.
    pub store: ParamStore<T>,
    pub bank: Option<ProjectionBank>,
    pub align: Option<AlignmentHead>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = Tokenizer::new(cfg.tokenizer.clone(), seed)?;
        let encoder = ControlEncoder::new(cfg.encoder.clone())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4c6_b0e5);
        let backbone = Backbone::new(cfg.backbone.clone(), &mut store, &mut rng)?;
        Ok(Model {
            cfg,
            tokenizer,
            encoder,
            backbone,
            store,
            bank: None,
            align: None,
        })
    }

    pub fn control_channels(&self) -> usize {
        self.encoder.channels()
    }

    /// Adds a freshly initialized projection bank; errors if one exists.
    pub fn attach_control(&mut self, spec: ProjectionSpec, seed: u64) -> Result<()> {
        if self.bank.is_some() {
            return Err(Error::invalid("model already has a control stack"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de_0001);
        let channels = self.control_channels();
        self.bank = Some(ProjectionBank::new(
            spec,
            &self.cfg.backbone.schedule,
            self.backbone.layers(),
            channels,
            self.cfg.backbone.d_model,
            &mut self.store,
            &mut rng,
        )?);
        Ok(())
    }

    pub fn attach_alignment(&mut self, seed: u64) -> Result<()> {
        if self.align.is_some() {
            return Err(Error::invalid("model already has an alignment head"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa119_0002);
        let channels = self.control_channels();
        self.align = Some(AlignmentHead::new(&mut self.store, channels, &mut rng));
        Ok(())
    }

    pub fn control_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.bank.as_ref().map(|b| b.param_ids()).unwrap_or_default();
        ids.extend(self.align.iter().flat_map(|a| a.param_ids()));
        ids
    }

    /// Raw encoder features `[B,H,W,C]` of control images `[B,N,N,3]`.
    pub fn raw_features(&self, images: &Array<T>) -> Result<Array<T>> {
        self.encoder.extract(images)
    }

    /// Features injected for control images `[B,N,N,3]`: encoder output,
    /// passed through the alignment head when one is attached.
    pub fn control_grids(&self, images: &Array<T>) -> Result<Array<T>> {
        let f = self.encoder.extract(images)?;
        match &self.align {
            Some(head) => head.apply(&self.store, &f),
            None => Ok(f),
        }
    }

    /// Per-scale feature rows `[h_k*w_k, C]` of one grid `[H,W,C]`.
    pub fn scale_rows(&self, grid: &Array<T>) -> Result<Vec<Array<T>>> {
        resize_features(grid, &self.cfg.backbone.schedule)
    }
}
