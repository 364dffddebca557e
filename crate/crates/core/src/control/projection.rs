use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{Init, Linear};
use crate::numerics::{bilinear_resize, Array, Graph, ParamId, ParamStore, Scalar, Var};
use crate::tokenizer::ScaleSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// One block per (scale, layer).
    PerScaleLayer,
    /// One block per scale, shared across layers.
    PerScale,
    /// One block per layer, shared across scales.
    PerLayer,
}

impl Sharing {
    pub const ALL: [Sharing; 3] = [Sharing::PerScaleLayer, Sharing::PerScale, Sharing::PerLayer];

    pub fn tag(self) -> &'static str {
        match self {
            Sharing::PerScaleLayer => "per-scale-layer",
            Sharing::PerScale => "per-scale",
            Sharing::PerLayer => "per-layer",
        }
    }
}

/// Written as its tag in config files: `linear` or `lite<N>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Structure {
    Linear,
    /// Squeeze to `bottleneck` channels, then expand.
    LinearLite { bottleneck: usize },
}

impl Structure {
    pub fn tag(self) -> String {
        match self {
            Structure::Linear => "linear".into(),
            Structure::LinearLite { bottleneck } => format!("lite{bottleneck}"),
        }
    }

    /// Parameters of one block mapping `c_in` channels to `d_model`.
    pub fn block_params(self, c_in: usize, d_model: usize) -> usize {
        match self {
            Structure::Linear => (c_in + 1) * d_model,
            Structure::LinearLite { bottleneck: b } => (c_in + 1) * b + (b + 1) * d_model,
        }
    }
}

/// Which backbone layers (1-based) receive control. Config files name the
/// standard sets (`s1`, `salt`, `sall`) or list layers explicitly.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "InjectionRepr", into = "InjectionRepr")]
pub enum InjectionSet {
    /// Layer 1 only.
    First,
    /// Odd layers 1, 3, 5, ...
    Alternate,
    All,
    Custom(Vec<usize>),
}

impl InjectionSet {
    pub fn tag(&self) -> String {
        match self {
            InjectionSet::First => "s1".into(),
            InjectionSet::Alternate => "salt".into(),
            InjectionSet::All => "sall".into(),
            InjectionSet::Custom(v) => {
                let parts: Vec<String> = v.iter().map(|l| l.to_string()).collect();
                format!("s{{{}}}", parts.join(","))
            }
        }
    }

    /// Sorted layer list for a backbone of `layers` layers.
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        let set: Vec<usize> = match self {
            InjectionSet::First => vec![1],
            InjectionSet::Alternate => (1..=layers).step_by(2).collect(),
            InjectionSet::All => (1..=layers).collect(),
            InjectionSet::Custom(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        if set.is_empty() {
            return Err(Error::invalid("injection set is empty"));
        }
        if let Some(&l) = set.iter().find(|&&l| l == 0 || l > layers) {
            return Err(Error::OutOfRange {
                what: "injection layer",
                index: l,
                bound: layers + 1,
            });
        }
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum InjectionRepr {
    Named(String),
    Layers(Vec<usize>),
}

impl From<InjectionSet> for InjectionRepr {
    fn from(s: InjectionSet) -> Self {
        match s {
            InjectionSet::Custom(v) => InjectionRepr::Layers(v),
            named => InjectionRepr::Named(named.tag()),
        }
    }
}

impl TryFrom<InjectionRepr> for InjectionSet {
    type Error = Error;

    fn try_from(r: InjectionRepr) -> Result<Self> {
        match r {
            InjectionRepr::Named(s) => s.parse(),
            InjectionRepr::Layers(v) => Ok(InjectionSet::Custom(v)),
        }
    }
}

impl From<Structure> for String {
    fn from(s: Structure) -> String {
        s.tag()
    }
}

impl TryFrom<String> for Structure {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for InjectionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "first" => Ok(InjectionSet::First),
            "salt" | "alternate" | "odd" => Ok(InjectionSet::Alternate),
            "sall" | "all" => Ok(InjectionSet::All),
            other => {
                if let Some(list) = other.strip_prefix("s{").and_then(|r| r.strip_suffix('}')) {
                    if let Ok(v) = list.split(',').map(|l| l.trim().parse()).collect::<std::result::Result<Vec<usize>, _>>() {
                        return Ok(InjectionSet::Custom(v));
                    }
                }
                Err(Error::invalid(format!(
                    "unknown injection set `{other}` (expected s1, salt, sall or s{{l1,l2,..}})"
                )))
            }
        }
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sharing::ALL
            .into_iter()
            .find(|m| m.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown sharing mode `{s}` (expected per-scale-layer, per-scale or per-layer)"
                ))
            })
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        if s == "linear" {
            return Ok(Structure::Linear);
        }
        if let Some(b) = s.strip_prefix("lite") {
            if let Ok(bottleneck) = b.parse() {
                return Ok(Structure::LinearLite { bottleneck });
            }
        }
        Err(Error::invalid(format!(
            "unknown projection structure `{s}` (expected linear or lite<N>)"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSpec {
    pub sharing: Sharing,
    pub structure: Structure,
    pub injection: InjectionSet,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        ProjectionSpec {
            sharing: Sharing::PerScaleLayer,
            structure: Structure::Linear,
            injection: InjectionSet::All,
        }
    }
}

impl fmt::Display for ProjectionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.sharing.tag(), self.structure.tag(), self.injection.tag())
    }
}

impl ProjectionSpec {
    pub fn validate(&self, layers: usize, c_in: usize, d_model: usize) -> Result<()> {
        self.injection.resolve(layers)?;
        if let Structure::LinearLite { bottleneck } = self.structure {
            if bottleneck == 0 || bottleneck >= c_in.min(d_model) {
                return Err(Error::invalid(format!(
                    "bottleneck {bottleneck} must be in 1..{}",
                    c_in.min(d_model)
                )));
            }
        }
        Ok(())
    }

    pub fn block_count(&self, scales: usize, injected: usize) -> usize {
        match self.sharing {
            Sharing::PerScaleLayer => scales * injected,
            Sharing::PerScale => scales,
            Sharing::PerLayer => injected,
        }
    }
}

/// Total projection parameters for `spec` over a `layers`-deep backbone.
pub fn projection_param_count(
    spec: &ProjectionSpec,
    schedule: &ScaleSchedule,
    layers: usize,
    d_model: usize,
    c_enc: usize,
) -> Result<usize> {
    let injected = spec.injection.resolve(layers)?.len();
    Ok(spec.block_count(schedule.len(), injected) * spec.structure.block_params(4 * c_enc, d_model))
}

#[derive(Clone, Debug)]
enum Block {
    Linear(Linear),
    Lite(Linear, Linear),
}

impl Block {
    fn ids(&self) -> Vec<ParamId> {
        match self {
            Block::Linear(l) => l.ids(),
            Block::Lite(a, b) => a.ids().into_iter().chain(b.ids()).collect(),
        }
    }

    fn numel(&self) -> usize {
        match self {
            Block::Linear(l) => l.numel(),
            Block::Lite(a, b) => a.numel() + b.numel(),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Block::Linear(l) => l.forward(g, store, x),
            Block::Lite(a, b) => {
                let h = a.forward(g, store, x)?;
                b.forward(g, store, h)
            }
        }
    }
}

/// Materialized projection blocks. Output transforms start at zero.
#[derive(Clone, Debug)]
pub struct ProjectionBank {
    pub spec: ProjectionSpec,
    layers: Vec<usize>,
    scales: usize,
    c_in: usize,
    d_model: usize,
    blocks: Vec<Block>,
}

impl ProjectionBank {
    pub fn new<T: Scalar>(
        spec: ProjectionSpec,
        schedule: &ScaleSchedule,
        backbone_layers: usize,
        c_in: usize,
        d_model: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate(backbone_layers, c_in, d_model)?;
        let layers = spec.injection.resolve(backbone_layers)?;
        let scales = schedule.len();
        let count = spec.block_count(scales, layers.len());
        let blocks = (0..count)
            .map(|i| {
                let name = format!("ctrl.proj{i}");
                match spec.structure {
                    Structure::Linear => {
                        Block::Linear(Linear::new(store, &name, c_in, d_model, true, Init::Zero, rng))
                    }
                    Structure::LinearLite { bottleneck } => Block::Lite(
                        Linear::new(store, &format!("{name}.squeeze"), c_in, bottleneck, true, Init::FanIn(1.0), rng),
                        Linear::new(store, &format!("{name}.expand"), bottleneck, d_model, true, Init::Zero, rng),
                    ),
                }
            })
            .collect();
        Ok(ProjectionBank {
            spec,
            layers,
            scales,
            c_in,
            d_model,
            blocks,
        })
    }

    /// Injected layers, 1-based and sorted.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(Block::ids).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::numel).sum()
    }

    pub fn injects(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    /// Block serving scale `k` (0-based) at layer `l` (1-based).
    pub fn block_index(&self, k: usize, l: usize) -> Result<usize> {
        let pos = self.layers.binary_search(&l).map_err(|_| {
            Error::invalid(format!("layer {l} is not in the injection set {:?}", self.layers))
        })?;
        if k >= self.scales {
            return Err(Error::OutOfRange {
                what: "scale",
                index: k,
                bound: self.scales,
            });
        }
        Ok(match self.spec.sharing {
            Sharing::PerScaleLayer => k * self.layers.len() + pos,
            Sharing::PerScale => k,
            Sharing::PerLayer => pos,
        })
    }

    /// `[rows, c_in]` resized features of scale `k` to `[rows, d_model]` for layer `l`.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        k: usize,
        l: usize,
    ) -> Result<Var> {
        let i = self.block_index(k, l)?;
        if g.value(x).cols() != self.c_in {
            return Err(Error::ShapeMismatch {
                op: "project control",
                lhs: g.shape(x).to_vec(),
                rhs: vec![0, self.c_in],
            });
        }
        self.blocks[i].forward(g, store, x)
    }

    /// Eager control encoding `C_{k,l}`, `[h_k*w_k, d_model]`, of a feature grid `[H,W,C]`.
    pub fn project_control<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Array<T>,
        schedule: &ScaleSchedule,
        k: usize,
        l: usize,
    ) -> Result<Array<T>> {
        let rows = resize_features(features, schedule)?;
        let rows = rows.get(k).ok_or(Error::OutOfRange {
            what: "scale",
            index: k,
            bound: schedule.len(),
        })?;
        let mut g = Graph::new();
        let x = g.constant(rows.clone());
        let y = self.project(&mut g, store, x, k, l)?;
        Ok(g.value(y).clone())
    }

    /// Per-layer injection terms `[B*T, d_model]` (sample-major, `None` off
    /// the injection set) from per-scale feature rows `[B*n_k, c_in]`.
    /// Samples flagged inactive receive exact zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn injections<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        scale_rows: &[Var],
        batch: usize,
        schedule: &ScaleSchedule,
        backbone_layers: usize,
        active: Option<&[bool]>,
    ) -> Result<Vec<Option<Var>>> {
        if let Some(a) = active {
            if a.len() != batch {
                return Err(Error::invalid(format!("{} activity flags for a batch of {batch}", a.len())));
            }
        }
        if scale_rows.len() != schedule.len() {
            return Err(Error::invalid(format!(
                "{} scale feature sets for a {}-scale schedule",
                scale_rows.len(),
                schedule.len()
            )));
        }
        let offsets = schedule.offsets();
        let t = schedule.total_tokens();
        // rows are concatenated scale-major; reorder them to sample-major sequences
        // inactive samples read an appended zero row
        let zero_row = batch * t;
        let any_off = active.is_some_and(|a| a.iter().any(|&on| !on));
        let perm: Vec<usize> = (0..batch)
            .flat_map(|b| {
                let offsets = &offsets;
                let on = active.is_none_or(|a| a[b]);
                (0..schedule.len()).flat_map(move |k| {
                    let n = schedule.tokens(k);
                    (0..n).map(move |i| if on { batch * offsets[k] + b * n + i } else { zero_row })
                })
            })
            .collect();
        debug_assert_eq!(perm.len(), batch * t);
        let mut out = vec![None; backbone_layers];
        for &l in &self.layers {
            let mut parts = (0..schedule.len())
                .map(|k| self.project(g, store, scale_rows[k], k, l))
                .collect::<Result<Vec<_>>>()?;
            if any_off {
                parts.push(g.constant(Array::zeros([1, self.d_model])));
            }
            let cat = g.concat_rows(&parts)?;
            out[l - 1] = Some(g.gather_rows(cat, perm.clone())?);
        }
        Ok(out)
    }

    /// Per-layer injection arrays for scale `k` only, `[B*n_k, d_model]`.
    pub fn step_injections<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rows: &Array<T>,
        k: usize,
        backbone_layers: usize,
    ) -> Result<Vec<Option<Array<T>>>> {
        let mut g = Graph::new();
        let x = g.constant(rows.clone());
        let mut out = vec![None; backbone_layers];
        for &l in &self.layers {
            let y = self.project(&mut g, store, x, k, l)?;
            out[l - 1] = Some(g.value(y).clone());
        }
        Ok(out)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

/// Bilinear resize of a feature grid `[H,W,C]` to every scale, flattened to
/// `[h_k*w_k, C]` rows.
pub fn resize_features<T: Scalar>(features: &Array<T>, schedule: &ScaleSchedule) -> Result<Vec<Array<T>>> {
    let c = match *features.shape() {
        [_, _, c] => c,
        _ => {
            return Err(Error::invalid(format!(
                "feature grid must be [H,W,C], got {:?}",
                features.shape()
            )))
        }
    };
    schedule
        .scales()
        .iter()
        .map(|&(h, w)| bilinear_resize(features, (h, w))?.reshape([h * w, c]))
        .collect()
}

/// Elementwise sum of a hidden block and its control encoding.
pub fn inject<T: Scalar>(hidden: &Array<T>, control: &Array<T>) -> Result<Array<T>> {
    crate::numerics::kernels::add(hidden, control)
}
