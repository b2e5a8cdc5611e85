//! Raster figures: uncertainty and confidence histograms, their scatter, the
//! confusion matrix, a 2-D t-SNE of exported descriptors, and occlusion overlays.

use std::path::{Path, PathBuf};

use histo_core::dataset::RawImage;
use histo_core::evaluation::{EmbeddingRow, EvalReport, SampleRow};
use histo_core::rng::rng_for;
use histo_core::{HistoError, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand_distr::{Distribution, Normal};

pub const FIGURES: [&str; 5] = [
    "uncertainty_histogram.png",
    "confidence_histogram.png",
    "uncertainty_vs_confidence.png",
    "confusion_matrix.png",
    "embedding_tsne.png",
];

const SIZE: (u32, u32) = (720, 540);
const MARGIN: u32 = 40;
const BINS: usize = 20;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([40, 90, 200]);
const GREEN: Rgb<u8> = Rgb([30, 160, 60]);
const RED: Rgb<u8> = Rgb([210, 40, 40]);

/// Eight well-separated colours, one per subtype.
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([23, 190, 207]),
];

fn save_err(path: &Path, e: impl std::fmt::Display) -> HistoError {
    HistoError::io(path, std::io::Error::other(e.to_string()))
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside the range land in the edge bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    counts
}

/// Correct and wrong confidence histograms over `[0, 1]`.
pub fn confidence_split(rows: &[SampleRow], bins: usize) -> (Vec<usize>, Vec<usize>) {
    let (right, wrong): (Vec<&SampleRow>, Vec<&SampleRow>) = rows.iter().partition(|r| r.prediction == r.label);
    let conf = |v: Vec<&SampleRow>| v.iter().map(|r| r.confidence).collect::<Vec<f64>>();
    (histogram(&conf(right), 0.0, 1.0, bins), histogram(&conf(wrong), 0.0, 1.0, bins))
}

/// A white raster with an axis box; data coordinates map into the box.
/// Figures carry no text, their meaning is in the file name.
struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(size: (u32, u32), x: (f64, f64), y: (f64, f64)) -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(size.0, size.1, WHITE),
            x,
            y,
        };
        let (w, h) = size;
        for px in MARGIN..w - MARGIN {
            c.img.put_pixel(px, h - MARGIN, BLACK);
            c.img.put_pixel(px, MARGIN, BLACK);
        }
        for py in MARGIN..=h - MARGIN {
            c.img.put_pixel(MARGIN, py, BLACK);
            c.img.put_pixel(w - MARGIN - 1, py, BLACK);
        }
        c
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = self.img.dimensions();
        let span = |r: (f64, f64)| if r.1 > r.0 { r.1 - r.0 } else { 1.0 };
        let px = MARGIN as f64 + (x - self.x.0) / span(self.x) * (w - 2 * MARGIN - 1) as f64;
        let py = (h - MARGIN) as f64 - (y - self.y.0) / span(self.y) * (h - 2 * MARGIN) as f64;
        (px, py)
    }

    fn blend(&mut self, px: i64, py: i64, c: Rgb<u8>, alpha: f64) {
        let (w, h) = self.img.dimensions();
        if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
            return;
        }
        let p = self.img.get_pixel_mut(px as u32, py as u32);
        for k in 0..3 {
            p.0[k] = ((1.0 - alpha) * p.0[k] as f64 + alpha * c.0[k] as f64).round() as u8;
        }
    }

    /// Fills the data-space rectangle `[x0, x1] × [y0, y1]`.
    fn rect(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>, alpha: f64) {
        let (a, b) = (self.to_px(x0, y0), self.to_px(x1, y1));
        let (l, r) = (a.0.min(b.0).round() as i64, a.0.max(b.0).round() as i64);
        let (t, bo) = (a.1.min(b.1).round() as i64, a.1.max(b.1).round() as i64);
        for py in t..bo {
            for px in l..r {
                self.blend(px, py, c, alpha);
            }
        }
    }

    fn disc(&mut self, x: f64, y: f64, radius: i64, c: Rgb<u8>) {
        let (cx, cy) = self.to_px(x, y);
        let (cx, cy) = (cx.round() as i64, cy.round() as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.blend(cx + dx, cy + dy, c, 0.8);
                }
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| save_err(path, e))
    }
}

fn bar_chart(path: &Path, lo: f64, hi: f64, series: &[(&[usize], Rgb<u8>)]) -> Result<()> {
    let y_max = series.iter().flat_map(|(c, _)| c.iter()).copied().max().unwrap_or(0).max(1) as f64 * 1.1;
    let mut canvas = Canvas::new(SIZE, (lo, hi), (0.0, y_max));
    for (counts, color) in series {
        let w = (hi - lo) / counts.len() as f64;
        for (i, &c) in counts.iter().enumerate() {
            let x0 = lo + i as f64 * w;
            canvas.rect((x0, 0.0), (x0 + w, c as f64), *color, 0.55);
        }
    }
    canvas.save(path)
}

fn padded_range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || hi - lo < 1e-12 {
        (lo.min(0.0) - 0.5, hi.max(0.0) + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn scatter(path: &Path, points: &[(f64, f64, Rgb<u8>)]) -> Result<()> {
    let x = padded_range(points.iter().map(|p| p.0));
    let y = padded_range(points.iter().map(|p| p.1));
    let mut canvas = Canvas::new(SIZE, x, y);
    for &(px, py, c) in points {
        canvas.disc(px, py, 4, c);
    }
    canvas.save(path)
}

/// Row-normalised rates shaded white to blue; the true class runs top to bottom.
fn confusion_figure(path: &Path, confusion: &[Vec<usize>]) -> Result<()> {
    let c = confusion.len().max(1) as f64;
    let mut canvas = Canvas::new((640, 640), (0.0, c), (0.0, c));
    for (t, row) in confusion.iter().enumerate() {
        let total = row.iter().sum::<usize>().max(1) as f64;
        for (p, &n) in row.iter().enumerate() {
            let y = c - 1.0 - t as f64;
            canvas.rect((p as f64, y), (p as f64 + 1.0, y + 1.0), Rgb([0, 0, 255]), n as f64 / total);
        }
    }
    canvas.save(path)
}

/// Seeded exact t-SNE to two dimensions.
pub fn tsne_2d(vectors: &[Vec<f64>], seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n < 5 {
        // Too few points for any perplexity: lay them out on a line.
        return Ok((0..n).map(|i| [i as f64, 0.0]).collect());
    }
    let perplexity = (((n - 1) / 3) as f64 - 1.0).clamp(1.0, 30.0);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut rng = rng_for(seed, &[0x75e]);
    let init: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let rows: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    // One worker keeps the floating-point reductions in a fixed order.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| HistoError::invalid(e.to_string()))?;
    let flat = pool.install(|| {
        let mut tsne: bhtsne::tSNE<f64, &[f64]> = bhtsne::tSNE::new(&rows);
        tsne.perplexity(perplexity)
            .epochs(500)
            .initial_embedding(init)
            .exact(|a, b| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        tsne.embedding()
    });
    Ok(flat.chunks(2).map(|p| [p[0], p[1]]).collect())
}

/// Writes the five figures and returns their paths.
pub fn render_all(dir: &Path, report: &EvalReport, rows: &[SampleRow], emb: &[EmbeddingRow]) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = FIGURES.iter().map(|f| dir.join(f)).collect();

    let unc: Vec<f64> = rows.iter().map(|r| r.uncertainty).collect();
    let hi = unc.iter().cloned().fold(0.0, f64::max);
    let hi = if hi > 0.0 { hi } else { 1.0 };
    bar_chart(&paths[0], 0.0, hi, &[(&histogram(&unc, 0.0, hi, BINS), BLUE)])?;

    let (right, wrong) = confidence_split(rows, BINS);
    // Correct in green, wrong in red.
    bar_chart(&paths[1], 0.0, 1.0, &[(&right, GREEN), (&wrong, RED)])?;

    let points: Vec<(f64, f64, Rgb<u8>)> = rows
        .iter()
        .map(|r| (r.confidence, r.uncertainty, if r.prediction == r.label { GREEN } else { RED }))
        .collect();
    scatter(&paths[2], &points)?;

    confusion_figure(&paths[3], &report.confusion)?;

    let vectors: Vec<Vec<f64>> = emb.iter().map(|e| e.vector.clone()).collect();
    let xy = tsne_2d(&vectors, report.seed)?;
    let points: Vec<(f64, f64, Rgb<u8>)> = xy
        .iter()
        .zip(emb)
        .map(|(p, e)| (p[0], p[1], PALETTE[e.label % PALETTE.len()]))
        .collect();
    scatter(&paths[4], &points)?;
    Ok(paths)
}

/// Per-pixel sensitivity: mean over the windows covering the pixel.
pub fn upsample_map(map: &Array2<f64>, height: usize, width: usize, patch: usize, stride: usize) -> Array2<f64> {
    let mut sum = Array2::<f64>::zeros((height, width));
    let mut hits = Array2::<f64>::zeros((height, width));
    for ((i, j), &v) in map.indexed_iter() {
        for y in i * stride..(i * stride + patch).min(height) {
            for x in j * stride..(j * stride + patch).min(width) {
                sum[[y, x]] += v;
                hits[[y, x]] += 1.0;
            }
        }
    }
    sum.zip_mut_with(&hits, |s, &h| {
        if h > 0.0 {
            *s /= h;
        }
    });
    sum
}

/// The image with the sensitivity map blended in red.
pub fn write_heatmap(path: &Path, raw: &RawImage, map: &Array2<f64>, patch: usize, stride: usize) -> Result<()> {
    let (_, h, w) = raw.dim();
    let up = upsample_map(map, h, w, patch, stride);
    let peak = up.iter().cloned().fold(0.0, f64::max);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let a = if peak > 0.0 { 0.6 * up[[y, x]] / peak } else { 0.0 };
        let px = |c: usize, tint: f64| {
            let v = raw[[c, y, x]].clamp(0.0, 1.0) as f64;
            (255.0 * ((1.0 - a) * v + a * tint)).round() as u8
        };
        image::Rgb([px(0, 1.0), px(1, 0.0), px(2, 0.0)])
    });
    img.save(path).map_err(|e| save_err(path, e))
}
