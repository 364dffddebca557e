//! Synthetic shape corpus with analytic condition maps and on-disk format.

mod image;
mod manifest;
pub mod pnm;
pub mod raster;
mod scene;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::Image;
pub use manifest::{
    load_dataset, load_sample, save_dataset, save_sample, ClassCount, Manifest, SampleEntry,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use scene::{
    gen_scene, hsv_to_rgb, quantize_normal, Geometry, Scene, Shape, CLASS_NAMES, DEPTH_NEAR,
    DEPTH_STEP, NUM_CLASSES, RANK_BRIGHTNESS,
};

pub const IMAGE_SIZE: usize = 32;

/// Control-condition kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Canny,
    Depth,
    Normal,
    Hed,
    Sketch,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Canny,
        Modality::Depth,
        Modality::Normal,
        Modality::Hed,
        Modality::Sketch,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Canny => "canny",
            Modality::Depth => "depth",
            Modality::Normal => "normal",
            Modality::Hed => "hed",
            Modality::Sketch => "sketch",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canny" | "edge" => Ok(Modality::Canny),
            "depth" => Ok(Modality::Depth),
            "normal" => Ok(Modality::Normal),
            "hed" => Ok(Modality::Hed),
            "sketch" => Ok(Modality::Sketch),
            _ => Err(Error::invalid(format!(
                "unknown modality {s:?} (expected one of canny, depth, normal, hed, sketch)"
            ))),
        }
    }
}

/// One training record: image, label and its five aligned condition maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionSample {
    pub class: usize,
    pub image: Image,
    pub edge: Image,
    pub depth: Image,
    pub normal: Image,
    pub hed: Image,
    pub sketch: Image,
}

impl ConditionSample {
    pub fn condition(&self, m: Modality) -> &Image {
        match m {
            Modality::Canny => &self.edge,
            Modality::Depth => &self.depth,
            Modality::Normal => &self.normal,
            Modality::Hed => &self.hed,
            Modality::Sketch => &self.sketch,
        }
    }
}

/// Seed of sample `index` within a dataset seeded with `seed` (splitmix64 finalizer).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(count: usize, seed: u64) -> Vec<ConditionSample> {
    (0..count as u64)
        .map(|i| gen_scene(sample_seed(seed, i)))
        .collect()
}
