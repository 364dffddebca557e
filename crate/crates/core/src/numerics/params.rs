use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Array, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Array<T>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named parameter registry. Models hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let decay = value.rank() >= 2;
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Array<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_decay(&mut self, id: ParamId, decay: bool) {
        self.params[id.0].decay = decay;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.params[id.0].value.len()).sum()
    }

    /// Same registry with elements converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters not marked trainable are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Array<T>)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        for (id, g) in grads {
            let p = &mut store.params[id.0];
            if !p.trainable {
                continue;
            }
            debug_assert_eq!(p.value.shape(), g.shape());
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            if p.decay && c.weight_decay != 0.0 {
                p.value.data_mut().iter_mut().for_each(|x| *x *= decay);
            }
            for (((x, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *x -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moment buffers for checkpointing, keyed by parameter.
    pub fn export(&self) -> (u64, Vec<(ParamId, Vec<T>, Vec<T>)>) {
        let list = self
            .moments
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|(a, b)| (ParamId(i), a.clone(), b.clone())))
            .collect();
        (self.step, list)
    }

    pub fn import(&mut self, step: u64, moments: Vec<(ParamId, Vec<T>, Vec<T>)>) {
        self.step = step;
        self.moments.clear();
        for (id, m, v) in moments {
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            self.moments[id.0] = Some((m, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_untouched() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Array::full([2, 2], 1.0));
        let b = store.add("b", Array::full([2], 1.0));
        store.set_trainable(a, false);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = vec![(a, Array::full([2, 2], 1.0)), (b, Array::full([2], 1.0))];
        opt.step(&mut store, &grads);
        assert_eq!(store.value(a), &Array::full([2, 2], 1.0));
        assert!(store.value(b).data().iter().all(|&x| x < 1.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected Adam moves each coordinate by ~lr on the first step.
        let mut store = ParamStore::<f64>::new();
        let b = store.add("b", Array::full([3], 0.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &[(b, Array::new([3], vec![2.0, -0.5, 7.0]).unwrap())]);
        for (&x, s) in store.value(b).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-9);
        }
    }
}
