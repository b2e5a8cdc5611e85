//! Procedural eight-class texture dataset with the BreaKHis descriptor schema.
//!
//! Each class is a parametric texture family: a stroma background carrying
//! randomly oriented fibre stripes, overlaid with stained "nuclei" blobs.
//! Class identity is carried by blob count, blob size, nucleus stain and
//! stripe wavelength, while orientation, phase, positions and a small global
//! stain jitter are random per image. Magnification zooms the
//! texture. No biological realism is claimed.

use ndarray::Array3;
use rand::Rng;

use super::{DatasetIndex, Magnification, SampleDescriptor, SampleSource, Subtype, Superclass, IMAGE_SIZE};
use crate::error::{HistoError, Result};
use crate::rng::{derive_seed, rng_for};

/// Class- and magnification-dependent generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureParams {
    /// Number of nuclei blobs; strictly increasing with subtype index.
    pub blob_count: usize,
    pub blob_radius: f64,
    pub stripe_wavelength: f64,
    pub zoom: f64,
    pub nucleus_rgb: [f32; 3],
}

const STRIPE_WAVELENGTHS: [f64; 4] = [5.0, 8.0, 12.5, 19.0];

/// Per-subtype stain of the nuclei; malignant stains are darker.
const NUCLEUS_RGB: [[f32; 3]; 8] = [
    [0.45, 0.28, 0.62],
    [0.42, 0.16, 0.50],
    [0.40, 0.36, 0.74],
    [0.44, 0.22, 0.36],
    [0.28, 0.12, 0.44],
    [0.20, 0.22, 0.60],
    [0.30, 0.04, 0.28],
    [0.16, 0.14, 0.34],
];

pub fn texture_params(subtype: Subtype, magnification: Magnification) -> TextureParams {
    let c = subtype.index();
    let zoom = match magnification.value() {
        40 => 1.0,
        100 => 1.1,
        200 => 1.2,
        _ => 1.3,
    };
    let radius = match subtype.superclass() {
        Superclass::Benign => 3.0,
        Superclass::Malignant => 4.6,
    };
    TextureParams {
        blob_count: 10 + 12 * c,
        blob_radius: radius * zoom,
        stripe_wavelength: STRIPE_WAVELENGTHS[c % 4] * zoom,
        zoom,
        nucleus_rgb: NUCLEUS_RGB[c],
    }
}

/// Renders one `3×224×224` image with intensities in `[0, 1]`.
pub fn render_synthetic(subtype: Subtype, magnification: Magnification, seed: u64) -> Array3<f32> {
    let p = texture_params(subtype, magnification);
    let mut rng = rng_for(seed, &[0x7e47]);
    let n = IMAGE_SIZE;

    // Background stroma with a random global stain shift.
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.02..0.02));
    let base = [0.93f32, 0.78, 0.86];
    let mut img = Array3::<f32>::zeros((3, n, n));
    for c in 0..3 {
        img.index_axis_mut(ndarray::Axis(0), c).fill(base[c] + jitter[c]);
    }

    // Fibre stripes: random orientation and phase, class-specific wavelength.
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let k = std::f64::consts::TAU / p.stripe_wavelength;
    let eosin = [0.10f32, 0.22, 0.12];
    for y in 0..n {
        for x in 0..n {
            let s = ((x as f64 * dx + y as f64 * dy) * k + phase).sin() as f32;
            let amp = 0.5 * (s + 1.0);
            for c in 0..3 {
                img[[c, y, x]] -= amp * eosin[c];
            }
        }
    }

    // Nuclei: soft-edged discs, slightly elliptical.
    for _ in 0..p.blob_count {
        let cx: f64 = rng.random_range(0.0..n as f64);
        let cy: f64 = rng.random_range(0.0..n as f64);
        let r = p.blob_radius * rng.random_range(0.8..1.2);
        let aspect: f64 = rng.random_range(0.75..1.25);
        let (rx, ry) = (r * aspect, r / aspect);
        let reach = (rx.max(ry) * 1.6).ceil() as i64;
        for yy in (cy as i64 - reach).max(0)..(cy as i64 + reach + 1).min(n as i64) {
            for xx in (cx as i64 - reach).max(0)..(cx as i64 + reach + 1).min(n as i64) {
                let ex = (xx as f64 - cx) / rx;
                let ey = (yy as f64 - cy) / ry;
                let d2 = ex * ex + ey * ey;
                let w = (1.0 / (1.0 + (6.0 * (d2.sqrt() - 1.0)).exp())) as f32;
                if w < 1e-3 {
                    continue;
                }
                for c in 0..3 {
                    let v = &mut img[[c, yy as usize, xx as usize]];
                    *v = *v * (1.0 - w) + p.nucleus_rgb[c] * w;
                }
            }
        }
    }

    // Sensor noise.
    img.mapv_inplace(|v| (v + rng.random_range(-0.02f32..0.02)).clamp(0.0, 1.0));
    img
}

/// `n_per_class` samples for every (subtype, magnification) cell.
pub fn generate_synthetic_dataset(
    n_per_class: usize,
    magnifications: &[Magnification],
    seed: u64,
) -> Result<DatasetIndex> {
    if n_per_class == 0 {
        return Err(HistoError::invalid("n_per_class must be at least 1"));
    }
    let mut samples = Vec::with_capacity(8 * magnifications.len() * n_per_class);
    for subtype in Subtype::all() {
        for &mag in magnifications {
            for i in 0..n_per_class {
                let sample_seed = derive_seed(seed, &[subtype.index() as u64, mag.value() as u64, i as u64]);
                samples.push(SampleDescriptor {
                    id: format!("syn-{}-{}x-{:04}", subtype.index(), mag.value(), i),
                    source: SampleSource::Synthetic { seed: sample_seed },
                    subtype,
                    magnification: mag,
                    patient_id: format!("synpat-{}-{}", subtype.index(), i % 4),
                });
            }
        }
    }
    Ok(DatasetIndex::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mags() -> Vec<Magnification> {
        Magnification::ALL.to_vec()
    }

    #[test]
    fn counts_per_cell() {
        let idx = generate_synthetic_dataset(10, &mags(), 1).unwrap();
        assert_eq!(idx.len(), 320);
        assert!(idx.cell_counts().values().all(|&c| c == 10));
        assert_eq!(idx.cell_counts().len(), 32);
    }

    #[test]
    fn zero_per_class_is_rejected() {
        assert!(generate_synthetic_dataset(0, &mags(), 1).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_dataset(1, &mags()[..1], 3).unwrap();
        let b = generate_synthetic_dataset(1, &mags()[..1], 3).unwrap();
        assert_eq!(a, b);
        let d = &a.samples[5];
        let SampleSource::Synthetic { seed } = d.source else { panic!() };
        let x = render_synthetic(d.subtype, d.magnification, seed);
        let y = render_synthetic(d.subtype, d.magnification, seed);
        assert_eq!(x, y);
        assert_eq!(x.dim(), (3, IMAGE_SIZE, IMAGE_SIZE));
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blob_count_increases_monotonically_with_class() {
        for m in mags() {
            let counts: Vec<usize> = Subtype::all().map(|s| texture_params(s, m).blob_count).collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        }
    }

    #[test]
    fn magnification_zooms_the_texture() {
        let s = Subtype::new(2).unwrap();
        let lo = texture_params(s, Magnification::new(40).unwrap());
        let hi = texture_params(s, Magnification::new(400).unwrap());
        assert!(hi.blob_radius > lo.blob_radius);
        assert!(hi.stripe_wavelength > lo.stripe_wavelength);
        assert_eq!(hi.blob_count, lo.blob_count);
    }

    #[test]
    fn rendered_nuclei_coverage_tracks_blob_count() {
        // Dark-pixel fraction rises with the number of nuclei within a superclass.
        let m = Magnification::new(40).unwrap();
        let dark_fraction = |c: usize| -> f64 {
            (0..4)
                .map(|s| {
                    let img = render_synthetic(Subtype::new(c).unwrap(), m, 100 + s);
                    let dark = img
                        .index_axis(ndarray::Axis(0), 0)
                        .iter()
                        .filter(|&&v| v < 0.55)
                        .count();
                    dark as f64 / (IMAGE_SIZE * IMAGE_SIZE) as f64
                })
                .sum::<f64>()
                / 4.0
        };
        assert!(dark_fraction(0) < dark_fraction(3));
        assert!(dark_fraction(4) < dark_fraction(7));
    }
}
