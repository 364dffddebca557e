use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Identifies the conditioning a cache was filled under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheTag(pub Vec<u64>);

/// Per-layer key/value rows, `[batch, len, d_model]` each, grown scale by scale.
#[derive(Clone, Debug)]
pub struct KVCache<T> {
    pub(crate) tag: Option<CacheTag>,
    pub(crate) batch: usize,
    pub(crate) len: usize,
    pub(crate) d_model: usize,
    pub(crate) keys: Vec<Vec<T>>,
    pub(crate) values: Vec<Vec<T>>,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(layers: usize, batch: usize, d_model: usize) -> Self {
        KVCache {
            tag: None,
            batch,
            len: 0,
            d_model,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    /// Cached positions per sample (identical for every layer).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    /// Rows stored for `layer`, per sample.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / (self.batch * self.d_model).max(1)
    }

    pub(crate) fn check_tag(&mut self, tag: CacheTag) -> Result<()> {
        match &self.tag {
            None => {
                self.tag = Some(tag);
                Ok(())
            }
            Some(t) if *t == tag => Ok(()),
            Some(_) => Err(Error::Cache(
                "cache was filled under a different class conditioning".into(),
            )),
        }
    }

    /// `[batch, len + n, d]` keys/values with `new` (`[batch, n, d]`) appended.
    pub(crate) fn extended(&self, layer: usize, new_k: &[T], new_v: &[T], n: usize) -> (Vec<T>, Vec<T>) {
        let d = self.d_model;
        let join = |old: &[T], new: &[T]| {
            let mut out = Vec::with_capacity(old.len() + new.len());
            for b in 0..self.batch {
                out.extend_from_slice(&old[b * self.len * d..(b + 1) * self.len * d]);
                out.extend_from_slice(&new[b * n * d..(b + 1) * n * d]);
            }
            out
        };
        (join(&self.keys[layer], new_k), join(&self.values[layer], new_v))
    }

    pub(crate) fn store_layer(&mut self, layer: usize, k: Vec<T>, v: Vec<T>) {
        self.keys[layer] = k;
        self.values[layer] = v;
    }
}
