use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{synthetic, ImageSample, SampleDescriptor, SampleSource, IMAGE_SIZE};
use crate::error::{HistoError, Result};

/// `3×H×W` intensities in `[0, 1]`, before z-scoring.
pub type RawImage = Array3<f32>;

/// Per-channel z-score statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        for (c, &s) in self.std.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(HistoError::ZeroVariance { channel: c });
            }
        }
        Ok(())
    }
}

/// Bilinear resize with antialiasing when shrinking.
pub fn resize(raw: &RawImage, height: usize, width: usize) -> RawImage {
    let (c, h, w) = raw.dim();
    assert_eq!(c, 3, "expected an RGB image");
    if h == height && w == width {
        return raw.clone();
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([
            raw[[0, y as usize, x as usize]],
            raw[[1, y as usize, x as usize]],
            raw[[2, y as usize, x as usize]],
        ])
    });
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    Array3::from_shape_fn((3, height, width), |(c, y, x)| out.get_pixel(x as u32, y as u32)[c])
}

/// Loads a sample's pixels at `224×224`, intensities in `[0, 1]`.
pub fn load_raw(desc: &SampleDescriptor) -> Result<RawImage> {
    match &desc.source {
        SampleSource::Synthetic { seed } => Ok(synthetic::render_synthetic(desc.subtype, desc.magnification, *seed)),
        SampleSource::File(path) => {
            let img = image::open(path).map_err(|e| HistoError::ImageDecode {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let rgb = img.to_rgb32f();
            let (w, h) = rgb.dimensions();
            let raw = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c]
            });
            Ok(resize(&raw, IMAGE_SIZE, IMAGE_SIZE))
        }
    }
}

/// Fits per-channel statistics over the samples of `train`, loading each image.
pub fn compute_normalization_stats(train: &super::DatasetIndex) -> Result<NormalizationStats> {
    compute_normalization_stats_with(train, load_raw)
}

/// Like [`compute_normalization_stats`] with a caller-supplied image loader.
pub fn compute_normalization_stats_with(
    train: &super::DatasetIndex,
    mut loader: impl FnMut(&SampleDescriptor) -> Result<RawImage>,
) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(HistoError::invalid("normalization statistics need a non-empty training split"));
    }
    let mut acc = ChannelMoments::default();
    for desc in &train.samples {
        acc.add(&loader(desc)?);
    }
    acc.finish()
}

pub fn stats_from_images<'a>(images: impl IntoIterator<Item = &'a RawImage>) -> Result<NormalizationStats> {
    let mut acc = ChannelMoments::default();
    for img in images {
        acc.add(img);
    }
    if acc.count == 0 {
        return Err(HistoError::invalid("normalization statistics need at least one image"));
    }
    acc.finish()
}

#[derive(Default)]
struct ChannelMoments {
    sum: [f64; 3],
    sum_sq: [f64; 3],
    count: u64,
}

impl ChannelMoments {
    fn add(&mut self, img: &RawImage) {
        for (c, plane) in img.outer_iter().enumerate().take(3) {
            for &v in plane.iter() {
                let v = v as f64;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += (img.len() / 3) as u64;
    }

    fn finish(&self) -> Result<NormalizationStats> {
        let n = self.count as f64;
        let mut stats = NormalizationStats {
            mean: [0.0; 3],
            std: [0.0; 3],
        };
        for c in 0..3 {
            let mean = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - mean * mean).max(0.0);
            stats.mean[c] = mean;
            stats.std[c] = var.sqrt();
            if stats.std[c] <= 1e-12 {
                return Err(HistoError::ZeroVariance { channel: c });
            }
        }
        Ok(stats)
    }
}

/// Resizes to `224×224` if needed and applies `(I − μ) / σ` per channel.
pub fn preprocess(raw: &RawImage, stats: &NormalizationStats) -> Array3<f32> {
    let resized = resize(raw, IMAGE_SIZE, IMAGE_SIZE);
    normalize(&resized, stats)
}

/// `(I − μ) / σ` per channel, at the image's own size.
pub fn normalize(raw: &RawImage, stats: &NormalizationStats) -> Array3<f32> {
    let mut out = raw.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        plane.mapv_inplace(|v| ((v as f64 - m) / s) as f32);
    }
    out
}

/// Inverse of [`normalize`]: `I = I′·σ + μ`.
pub fn denormalize(x: &Array3<f32>, stats: &NormalizationStats) -> RawImage {
    let mut out = x.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        plane.mapv_inplace(|v| (v as f64 * s + m) as f32);
    }
    out
}

pub fn preprocess_sample(desc: &SampleDescriptor, stats: &NormalizationStats) -> Result<ImageSample> {
    stats.validate()?;
    let raw = load_raw(desc)?;
    Ok(ImageSample {
        id: desc.id.clone(),
        pixels: preprocess(&raw, stats),
        subtype: desc.subtype,
        magnification: desc.magnification,
        patient_id: desc.patient_id.clone(),
        stratum_key: desc.stratum_key(),
    })
}
