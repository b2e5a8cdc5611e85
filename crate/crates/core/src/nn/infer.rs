//! Forward-only `f32` layers used by the frozen feature extractors.
//!
//! Feature maps are `C×H×W` arrays for a single image. Convolutions lower to
//! GEMM through im2col; depthwise convolutions use direct loops.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type FeatureMap = Array3<f32>;

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `out × (in/groups · k · k)`.
    weight: Array2<f32>,
    bias: Option<Array1<f32>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// He-normal initialized convolution (`std = sqrt(2 / fan_in)`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(groups == 1 || (groups == in_ch && groups == out_ch), "only dense or depthwise convolutions");
        let fan_in = in_ch / groups * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_ch, fan_in), |_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        });
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(out_ch)),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            groups,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut out = if self.groups == 1 {
            self.forward_dense(x, oh, ow)
        } else {
            self.forward_depthwise(x, oh, ow)
        };
        if let Some(b) = &self.bias {
            for (mut plane, &bv) in out.outer_iter_mut().zip(b.iter()) {
                plane += bv;
            }
        }
        out
    }

    fn forward_dense(&self, x: &FeatureMap, oh: usize, ow: usize) -> FeatureMap {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let mut out = Array2::<f32>::zeros((self.out_ch, oh * ow));
        if k == 1 && self.stride == 1 && self.padding == 0 {
            let xs = x.as_standard_layout();
            let xm: ArrayView2<f32> = xs.view().into_shape_with_order((c, h * w)).unwrap();
            general_mat_mul(1.0, &self.weight, &xm, 0.0, &mut out);
        } else {
            let cols = im2col(x, k, self.stride, self.padding, oh, ow);
            general_mat_mul(1.0, &self.weight, &cols, 0.0, &mut out);
        }
        out.into_shape_with_order((self.out_ch, oh, ow)).unwrap()
    }

    fn forward_depthwise(&self, x: &FeatureMap, oh: usize, ow: usize) -> FeatureMap {
        let (c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let mut out = Array3::<f32>::zeros((c, oh, ow));
        for ch in 0..c {
            let wk = self.weight.row(ch);
            let plane = x.index_axis(ndarray::Axis(0), ch);
            let mut oplane = out.index_axis_mut(ndarray::Axis(0), ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wk[ky * k + kx] * plane[[iy as usize, ix as usize]];
                        }
                    }
                    oplane[[oy, ox]] = acc;
                }
            }
        }
        out
    }
}

fn im2col(x: &FeatureMap, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    let p = pad as isize;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inference-mode batch normalization folded to a per-channel affine map.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl BatchNorm2d {
    /// Freshly initialized statistics: γ=1, β=0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        Self::from_stats(
            &vec![1.0; channels],
            &vec![0.0; channels],
            &vec![0.0; channels],
            &vec![1.0; channels],
            1e-5,
        )
    }

    pub fn from_stats(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Self {
        let scale: Vec<f32> = gamma.iter().zip(var).map(|(g, v)| g / (v + eps).sqrt()).collect();
        let shift = beta
            .iter()
            .zip(mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        Self { scale, shift }
    }

    pub fn forward_inplace(&self, x: &mut FeatureMap) {
        for ((mut plane, &s), &b) in x.outer_iter_mut().zip(&self.scale).zip(&self.shift) {
            plane.mapv_inplace(|v| v * s + b);
        }
    }
}

/// Layer normalization over channels at each spatial position.
#[derive(Clone, Debug)]
pub struct ChannelLayerNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
    eps: f32,
}

impl ChannelLayerNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-6,
        }
    }

    pub fn forward_inplace(&self, x: &mut FeatureMap) {
        let (c, h, w) = x.dim();
        for y in 0..h {
            for xx in 0..w {
                let mut mean = 0.0f32;
                for ch in 0..c {
                    mean += x[[ch, y, xx]];
                }
                mean /= c as f32;
                let mut var = 0.0f32;
                for ch in 0..c {
                    let d = x[[ch, y, xx]] - mean;
                    var += d * d;
                }
                let inv = 1.0 / (var / c as f32 + self.eps).sqrt();
                for ch in 0..c {
                    let v = (x[[ch, y, xx]] - mean) * inv;
                    x[[ch, y, xx]] = v * self.gamma[ch] + self.beta[ch];
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn silu_inplace(x: &mut FeatureMap) {
    x.mapv_inplace(|v| v / (1.0 + (-v).exp()));
}

pub fn gelu_inplace(x: &mut FeatureMap) {
    x.mapv_inplace(|v| 0.5 * v * (1.0 + erf(v / std::f32::consts::SQRT_2)));
}

/// Abramowitz–Stegun 7.1.26 (absolute error below 1.5e-7).
fn erf(x: f32) -> f32 {
    let sign = x.signum();
    let x = x.abs() as f64;
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let y = 1.0
        - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t
            + 0.254_829_592)
            * t
            * (-x * x).exp();
    sign * y as f32
}

pub fn max_pool(x: &FeatureMap, k: usize, stride: usize, pad: usize) -> FeatureMap {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let p = pad as isize;
    Array3::from_shape_fn((c, oh, ow), |(ch, oy, ox)| {
        let mut m = f32::NEG_INFINITY;
        for ky in 0..k {
            let iy = (oy * stride + ky) as isize - p;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..k {
                let ix = (ox * stride + kx) as isize - p;
                if ix >= 0 && ix < w as isize {
                    m = m.max(x[[ch, iy as usize, ix as usize]]);
                }
            }
        }
        m
    })
}

pub fn avg_pool(x: &FeatureMap, k: usize, stride: usize) -> FeatureMap {
    let (c, h, w) = x.dim();
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let norm = 1.0 / (k * k) as f32;
    Array3::from_shape_fn((c, oh, ow), |(ch, oy, ox)| {
        let mut s = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                s += x[[ch, oy * stride + ky, ox * stride + kx]];
            }
        }
        s * norm
    })
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f32> {
    let (_, h, w) = x.dim();
    let n = (h * w) as f32;
    x.outer_iter().map(|plane| plane.sum() / n).collect()
}

/// Concatenates feature maps along the channel axis.
pub fn concat_channels(parts: &[&FeatureMap]) -> FeatureMap {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("spatial sizes must agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (c, h, w) = x.dim();
        let (oh, ow) = (conv.out_size(h), conv.out_size(w));
        let k = conv.kernel;
        let cpg = c / conv.groups;
        let opg = conv.out_ch / conv.groups;
        Array3::from_shape_fn((conv.out_ch, oh, ow), |(o, oy, ox)| {
            let grp = o / opg;
            let mut acc = 0.0f32;
            for ci in 0..cpg {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            acc += conv.weight[[o, (ci * k + ky) * k + kx]]
                                * x[[grp * cpg + ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn dense_and_depthwise_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((4, 9, 7), |_| rng.random_range(-1.0f32..1.0));
        for (k, s, p, g, co) in [(3, 2, 1, 1, 5), (1, 1, 0, 1, 6), (7, 1, 3, 4, 4), (3, 2, 1, 4, 4), (4, 4, 0, 1, 3)] {
            let conv = Conv2d::new(&mut rng, 4, co, k, s, p, g, false);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s} g={g}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pooling_shapes() {
        let x = Array3::from_shape_fn((2, 112, 112), |(c, y, x)| (c + y + x) as f32);
        assert_eq!(max_pool(&x, 3, 2, 1).dim(), (2, 56, 56));
        assert_eq!(avg_pool(&x, 2, 2).dim(), (2, 56, 56));
        let g = global_avg_pool(&Array3::from_elem((3, 4, 4), 2.5));
        assert_eq!(g, vec![2.5; 3]);
    }

    #[test]
    fn erf_is_accurate() {
        for (x, want) in [(0.0f32, 0.0f32), (0.5, 0.520_499_9), (1.0, 0.842_700_8), (-2.0, -0.995_322_3)] {
            assert!((erf(x) - want).abs() < 1e-6);
        }
    }
}
