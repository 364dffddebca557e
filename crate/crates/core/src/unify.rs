//! Multi-modality alignment of control features into image-feature space.

use rand::Rng;

use crate::backbone::ClassCond;
use crate::control::{extract_control_features, FeatureExtractor};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::numerics::layers::{Init, Linear};
use crate::numerics::{Array, Graph, ParamId, ParamStore, Scalar, Var};

/// Pointwise linear map on feature grids, starting at the identity.
#[derive(Clone, Debug)]
pub struct AlignmentHead {
    lin: Linear,
}

impl AlignmentHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl Rng) -> Self {
        AlignmentHead {
            lin: Linear::new(store, "align", channels, channels, true, Init::Identity, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.lin.fan_in
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.lin.ids()
    }

    /// `x: [rows, C]` feature rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.lin.forward(g, store, x)
    }

    /// Aligned copy of a feature grid `[..., C]`.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, grid: &Array<T>) -> Result<Array<T>> {
        let shape = grid.shape().to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "align",
                lhs: shape,
                rhs: vec![self.channels()],
            });
        }
        let mut g = Graph::new();
        let x = g.constant(grid.clone().reshape([grid.len() / c, c])?);
        let y = self.forward(&mut g, store, x)?;
        g.value(y).clone().reshape(shape)
    }
}

/// Mean squared difference between aligned control features and image
/// features over all grid positions and channels.
pub fn align_loss<T: Scalar>(
    head: &AlignmentHead,
    store: &ParamStore<T>,
    control: &Array<T>,
    image: &Array<T>,
) -> Result<f64> {
    if control.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            op: "align loss",
            lhs: control.shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let aligned = head.apply(store, control)?;
    let sum: f64 = aligned
        .data()
        .iter()
        .zip(image.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / aligned.len() as f64)
}

pub fn total_loss(ce: f64, align: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("alignment weight must be >= 0, got {lambda}")));
    }
    Ok(ce + lambda * align)
}

/// Uniform draw from `pool`.
pub fn sample_modality(rng: &mut impl Rng, pool: &[Modality]) -> Result<Modality> {
    if pool.is_empty() {
        return Err(Error::invalid("no modalities to sample from"));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

#[derive(Clone, Debug)]
pub struct HybridInput<T> {
    pub modality: Modality,
    /// Control image `[N,N,3]` in [0,1].
    pub image: Array<T>,
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct HybridSpec<T> {
    pub a: HybridInput<T>,
    pub b: HybridInput<T>,
    pub weights: (f64, f64),
}

impl<T: Scalar> HybridSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.a.modality == self.b.modality {
            return Err(Error::invalid(format!(
                "hybrid inputs must use different modalities, both are {}",
                self.a.modality
            )));
        }
        let (wa, wb) = self.weights;
        if !(wa >= 0.0 && wb >= 0.0) || ((wa + wb) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "fusion weights must be nonnegative and sum to 1, got ({wa}, {wb})"
            )));
        }
        Ok(())
    }
}

/// Weighted mean of the two aligned feature grids, and the matching mixture
/// of the two class embeddings.
pub fn fuse_hybrid<T: Scalar, E: FeatureExtractor<T> + ?Sized>(
    spec: &HybridSpec<T>,
    encoder: &E,
    head: &AlignmentHead,
    store: &ParamStore<T>,
    classes: usize,
) -> Result<(Array<T>, ClassCond)> {
    spec.validate()?;
    let fa = head.apply(store, &extract_control_features(&spec.a.image, encoder)?)?;
    let fb = head.apply(store, &extract_control_features(&spec.b.image, encoder)?)?;
    let (wa, wb) = (T::lit(spec.weights.0), T::lit(spec.weights.1));
    let fused: Vec<T> = fa.data().iter().zip(fb.data()).map(|(&a, &b)| wa * a + wb * b).collect();
    let fused = Array::new(fa.shape().to_vec(), fused)?;
    for c in [spec.a.class, spec.b.class] {
        if c >= classes {
            return Err(Error::OutOfRange {
                what: "class label",
                index: c,
                bound: classes,
            });
        }
    }
    let mut mix = vec![0.0; classes];
    mix[spec.a.class] += spec.weights.0;
    mix[spec.b.class] += spec.weights.1;
    Ok((fused, ClassCond::Mixed(mix)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, 0.5).unwrap(), 2.0);
        assert_eq!(total_loss(0.7, 123.0, 0.0).unwrap(), 0.7);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }
}
