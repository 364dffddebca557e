//! Single-file checkpoints: magic, header length, JSON header, f32 payload.
//!
//! Layout: `SCLRCKPT`, a little-endian `u64` header length, the header
//! document, then every tensor as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::ProjectionSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamW, Array, ParamId, ParamStore, Scalar};

pub const MAGIC: &[u8; 8] = b"SCLRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Optimizer progress saved alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub config: ModelConfig,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run: serde_json::Value,
    /// Sections present, in file order.
    pub modules: Vec<String>,
    pub projection: Option<ProjectionSpec>,
    pub optimizer: Option<OptimizerState>,
    pub tensors: Vec<TensorEntry>,
}

/// Moment buffers keyed by parameter name.
pub type Moments<T> = Vec<(String, Vec<T>, Vec<T>)>;

/// A loaded checkpoint: the rebuilt model plus what a resumed run needs.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub model: Model<T>,
    pub run: serde_json::Value,
    pub optimizer: Option<(u64, Moments<T>)>,
}

fn module_of(name: &str) -> &'static str {
    if name.starts_with("tok/") {
        "tokenizer"
    } else if name.starts_with("opt.") {
        "optimizer"
    } else if name.starts_with("model/ctrl.") {
        "control"
    } else if name.starts_with("model/align") {
        "alignment"
    } else {
        "backbone"
    }
}

fn push<T: Scalar>(entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, name: String, shape: &[usize], data: &[T]) {
    let offset = payload.len() / 4;
    for &v in data {
        payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    entries.push(TensorEntry {
        name,
        shape: shape.to_vec(),
        offset,
    });
}

/// Serializes `model` and, when given, the optimizer state of a run.
pub fn to_bytes<T: Scalar>(model: &Model<T>, run: &serde_json::Value, opt: Option<&AdamW<T>>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (_, p) in model.tokenizer.store.iter() {
        push(&mut tensors, &mut payload, format!("tok/{}", p.name), p.value.shape(), p.value.data());
    }
    for (_, p) in model.store.iter() {
        push(&mut tensors, &mut payload, format!("model/{}", p.name), p.value.shape(), p.value.data());
    }
    let optimizer = opt.map(|o| {
        let (step, moments) = o.export();
        for (id, m, v) in moments {
            let p = model.store.get(id);
            push(&mut tensors, &mut payload, format!("opt.m/{}", p.name), p.value.shape(), &m);
            push(&mut tensors, &mut payload, format!("opt.v/{}", p.name), p.value.shape(), &v);
        }
        OptimizerState { step }
    });
    let mut modules: Vec<String> = Vec::new();
    for t in &tensors {
        let m = module_of(&t.name);
        if !modules.iter().any(|x| x == m) {
            modules.push(m.to_string());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: model.cfg.clone(),
        run: run.clone(),
        modules,
        projection: model.bank.as_ref().map(|b| b.spec.clone()),
        optimizer,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, run: &serde_json::Value, opt: Option<&AdamW<T>>) -> Result<()> {
    let bytes = to_bytes(model, run, opt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits raw bytes into a checked header and the f32 payload.
pub fn parse(bytes: &[u8], path: &Path) -> Result<(Header, Vec<f32>)> {
    let bad = |msg: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 16 + hlen,
            found: bytes.len(),
        });
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| bad(e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    let body = &bytes[16 + hlen..];
    let mut expected = 0;
    for t in &header.tensors {
        if t.offset != expected {
            return Err(bad(format!("tensor {} starts at {}, expected {expected}", t.name, t.offset)));
        }
        expected += t.len();
    }
    if body.len() != expected * 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 16 + hlen + expected * 4,
            found: bytes.len(),
        });
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, payload))
}

fn assign<T: Scalar>(store: &mut ParamStore<T>, name: &str, shape: &[usize], data: &[f32]) -> Result<ParamId> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has no matching parameter")))?;
    if store.value(id).shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {shape:?}, the configuration gives {:?}",
            store.value(id).shape()
        )));
    }
    let arr = Array::new(shape.to_vec(), data.iter().map(|&v| T::lit(v as f64)).collect())?;
    store.set_value(id, arr)?;
    Ok(id)
}

/// Rebuilds the model from the header's configuration and fills every tensor.
pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Loaded<T>> {
    let (header, payload) = parse(bytes, path)?;
    let mut model = Model::<T>::new(header.config.clone(), 0)?;
    if let Some(spec) = &header.projection {
        model.attach_control(spec.clone(), 0)?;
    }
    if header.modules.iter().any(|m| m == "alignment") {
        model.attach_alignment(0)?;
    }
    let mut seen_tok = 0;
    let mut seen_model = 0;
    let mut moments: std::collections::BTreeMap<String, (Vec<T>, Vec<T>)> = Default::default();
    for t in &header.tensors {
        let data = &payload[t.offset..t.offset + t.len()];
        if let Some(name) = t.name.strip_prefix("tok/") {
            assign(&mut model.tokenizer.store, name, &t.shape, data)?;
            seen_tok += 1;
        } else if let Some(name) = t.name.strip_prefix("model/") {
            assign(&mut model.store, name, &t.shape, data)?;
            seen_model += 1;
        } else if let Some((kind, name)) = t.name.split_once('/') {
            let conv: Vec<T> = data.iter().map(|&v| T::lit(v as f64)).collect();
            let slot = moments.entry(name.to_string()).or_default();
            match kind {
                "opt.m" => slot.0 = conv,
                "opt.v" => slot.1 = conv,
                _ => return Err(Error::Checkpoint(format!("unknown tensor section in {}", t.name))),
            }
        } else {
            return Err(Error::Checkpoint(format!("unnamed section for tensor {}", t.name)));
        }
    }
    if seen_tok != model.tokenizer.store.len() || seen_model != model.store.len() {
        return Err(Error::Checkpoint("checkpoint does not cover every parameter".into()));
    }
    let optimizer = header.optimizer.map(|o| {
        // keep parameter order so re-saving writes the same bytes
        let mut list: Moments<T> = moments.into_iter().map(|(n, (m, v))| (n, m, v)).collect();
        list.sort_by_key(|(n, _, _)| model.store.find(n).map(|id| id.index()));
        (o.step, list)
    });
    Ok(Loaded {
        model,
        run: header.run,
        optimizer,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Moment buffers by name, resolved against `store`.
pub fn resolve_moments<T: Scalar>(store: &ParamStore<T>, moments: Moments<T>) -> Result<Vec<(ParamId, Vec<T>, Vec<T>)>> {
    moments
        .into_iter()
        .map(|(name, m, v)| {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            Ok((id, m, v))
        })
        .collect()
}
