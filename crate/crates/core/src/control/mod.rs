//! Control features from a frozen encoder, projected per scale and layer and
//! added to the backbone's residual stream.

mod encoder;
mod projection;

pub use encoder::{default_taps, ControlEncoder, EncoderConfig, FeatureExtractor};
pub use projection::{
    inject, projection_param_count, resize_features, InjectionSet, ProjectionBank, ProjectionSpec, Sharing,
    Structure,
};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::{Array, Scalar};

/// `[N,N,3]` unit-range tensor of an image; gray images are replicated.
pub fn image_tensor<T: Scalar>(img: &Image) -> Result<Array<T>> {
    if img.width != img.height {
        return Err(Error::invalid(format!(
            "control images must be square, got {}x{}",
            img.width, img.height
        )));
    }
    let data = img.to_rgb_unit().into_iter().map(|v| T::lit(v as f64)).collect();
    Array::new([img.height, img.width, 3], data)
}

/// Feature grid `[H,W,C]` of one control image `[N,N,3]`.
pub fn extract_control_features<T: Scalar, E: FeatureExtractor<T> + ?Sized>(
    image: &Array<T>,
    encoder: &E,
) -> Result<Array<T>> {
    let n = encoder.input_size();
    let batch = image.clone().reshape([1, n, n, 3]).map_err(|_| Error::ShapeMismatch {
        op: "control image",
        lhs: image.shape().to_vec(),
        rhs: vec![n, n, 3],
    })?;
    let (h, w) = encoder.grid();
    encoder.extract(&batch)?.reshape([h, w, encoder.channels()])
}
