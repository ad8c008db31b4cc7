//! Dense floating-point images in height x width x channel order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::seed::derive_seed;
use crate::store::{TensorData, TensorRecord};

/// 8-bit dynamic range used by the quality metrics.
pub const MAX_VALUE: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(contract(format!(
                "image buffer holds {} values, {height}x{width}x{channels} needs {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image { height, width, channels, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Luma (ITU-R BT.601 weights) for three-channel images; single-channel
    /// images are returned unchanged.
    pub fn to_gray(&self) -> Result<Image> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => Ok(Image::from_fn(self.height, self.width, 1, |y, x, _| {
                0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
            })),
            c => Err(contract(format!("grayscale conversion needs 1 or 3 channels, got {c}"))),
        }
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n)
            .collect()
    }

    pub fn to_record(&self, name: &str) -> TensorRecord {
        TensorRecord::new(
            name,
            vec![self.height as u64, self.width as u64, self.channels as u64],
            TensorData::F64(self.data.clone()),
        )
        .expect("image buffer matches its shape")
    }

    pub fn from_record(record: &TensorRecord) -> Result<Self> {
        match record.shape.as_slice() {
            &[h, w, c] => Image::new(h as usize, w as usize, c as usize, record.to_f64_vec()),
            other => Err(contract(format!("record `{}` has shape {other:?}, expected HxWxC", record.name))),
        }
    }
}

/// Deterministic three-channel test image for a (class, image) pair.
///
/// Each class has its own palette and dominant grating orientation/frequency;
/// images within a class differ by phase, a secondary blob, and pixel noise.
/// Values lie in `[0, 255]`.
pub fn synthetic_image(class_index: usize, image_index: usize, height: usize, width: usize, seed: u64) -> Image {
    let mut class_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1000 + class_index as u64));
    let palette: [f64; 3] = [
        class_rng.gen_range(40.0..215.0),
        class_rng.gen_range(40.0..215.0),
        class_rng.gen_range(40.0..215.0),
    ];
    let angle = class_rng.gen_range(0.0..std::f64::consts::PI);
    let freq = class_rng.gen_range(1.5..6.0);
    let chroma: [f64; 3] = [
        class_rng.gen_range(-1.0..1.0),
        class_rng.gen_range(-1.0..1.0),
        class_rng.gen_range(-1.0..1.0),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        0x2000_0000 + ((class_index as u64) << 20) + image_index as u64,
    ));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (bx, by) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let radius = rng.gen_range(0.08..0.25);
    let noise: Vec<f64> = (0..height * width * 3).map(|_| rng.gen_range(-12.0..12.0)).collect();

    let (ca, sa) = (angle.cos(), angle.sin());
    Image::from_fn(height, width, 3, |y, x, c| {
        let u = x as f64 / width as f64;
        let v = y as f64 / height as f64;
        let grating = (std::f64::consts::TAU * freq * (u * ca + v * sa) + phase).sin();
        let d2 = (u - bx).powi(2) + (v - by).powi(2);
        let blob = (-d2 / (2.0 * radius * radius)).exp();
        let value = palette[c] + 45.0 * chroma[c] * grating + 60.0 * blob * (1.0 - chroma[c])
            + noise[(y * width + x) * 3 + c];
        value.clamp(0.0, MAX_VALUE)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_of_equal_channels_is_identity() {
        let img = Image::filled(4, 4, 3, 100.0);
        let g = img.to_gray().unwrap();
        assert!(g.data().iter().all(|&v| (v - 100.0).abs() < 1e-12));
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = synthetic_image(2, 5, 32, 32, 7);
        let b = synthetic_image(2, 5, 32, 32, 7);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=MAX_VALUE).contains(&v)));
        assert_ne!(a, synthetic_image(2, 6, 32, 32, 7));
    }

    #[test]
    fn record_round_trip() {
        let img = synthetic_image(0, 0, 8, 8, 1);
        assert_eq!(Image::from_record(&img.to_record("image")).unwrap(), img);
    }
}
