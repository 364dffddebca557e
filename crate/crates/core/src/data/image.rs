use crate::error::{Error, Result};

/// Interleaved 8-bit raster with one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image buffer holds {} bytes, {width}x{height}x{channels} needs {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_mask(size: usize, mask: &[bool]) -> Self {
        Image {
            width: size,
            height: size,
            channels: 1,
            data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Channel values scaled to [0,1], single channel replicated to three.
    pub fn to_rgb_unit(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        for px in self.data.chunks(self.channels) {
            if self.channels == 1 {
                let v = px[0] as f32 / 255.0;
                out.extend([v, v, v]);
            } else {
                out.extend(px.iter().map(|&v| v as f32 / 255.0));
            }
        }
        out
    }

    /// Quantizes `[H,W,3]` values in [0,1].
    pub fn from_rgb_unit(width: usize, height: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), width * height * 3);
        Image {
            width,
            height,
            channels: 3,
            data: values
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    /// Rec. 601 luma on the 0-255 scale.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|px| {
                if self.channels == 1 {
                    px[0] as f64
                } else {
                    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
                }
            })
            .collect()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0 || v == 255)
    }
}
