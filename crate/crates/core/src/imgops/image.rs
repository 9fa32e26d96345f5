use crate::error::{Error, Result};

/// Pixels live on the grid `k / 2^24`, which every `f32` in `[0, 1]`
/// rounds onto and which is closed under `1 - x`.
const GRID: f32 = 16_777_216.0;

/// Clamp into `[0, 1]` and round onto the pixel grid.
#[inline]
pub(crate) fn settle(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * GRID).round() / GRID
}

/// An `H x W x C` image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Build an image, clamping values into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("image", "zero-sized image"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::contract("image", format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(Error::contract(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("image", "non-finite pixel"));
        }
        let data = data.into_iter().map(settle).collect();
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    /// 8-bit pixels scaled by 1/255.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Internal constructor for transform outputs; settles every value.
    pub(crate) fn from_raw(like: &Image, mut data: Vec<f32>) -> Image {
        debug_assert_eq!(data.len(), like.data.len());
        data.iter_mut().for_each(|v| *v = settle(*v));
        Image { height: like.height, width: like.width, channels: like.channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-major copy (`C x H x W`) for the convolutional network.
    pub fn write_chw(&self, out: &mut Vec<f32>) {
        for c in 0..self.channels {
            out.extend(self.data.iter().skip(c).step_by(self.channels));
        }
    }

    /// Per-pixel luminance (the channel itself for grayscale).
    pub(crate) fn luminance(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        total / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_scaling_hits_one_exactly() {
        let img = Image::from_u8(1, 2, 1, &[0, 255]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn grid_is_closed_under_inversion() {
        for k in [1u32, 7, 12345, 8_388_609, 16_777_215] {
            let x = settle(k as f32 / GRID);
            assert_eq!(settle(1.0 - settle(1.0 - x)), x);
        }
    }

    #[test]
    fn chw_layout() {
        let img = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut out = Vec::new();
        img.write_chw(&mut out);
        let expected: Vec<f32> = [0.1f32, 0.4, 0.2, 0.5, 0.3, 0.6].iter().map(|&v| settle(v)).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn rejects_bad_channel_count() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
    }
}
