//! Pyramid construction: Gaussian RGB pyramids and conv-feature pyramids.
//!
//! The conv pyramid runs a stack of 3x3 conv + ReLU layers (optionally
//! followed by 2x2 max-pooling) over an RGB image and exposes the activation
//! of every conv layer as one pyramid level. The exposed activation is the
//! layer output after ReLU and before any pooling; pooling only shapes the
//! input of the next layer. With VGG-16 weights on a 224x224 image this
//! yields 13 levels at 224 (levels 0-1), 112 (2-3), 56 (4-6), 28 (7-9) and
//! 14 (10-12).

mod weights;

pub use weights::{
    decode_weights, encode_weights, load_weights, write_weights, ConvLayer, ConvLayerSpec, NetworkWeights,
    VGG16_CHANNELS, VGG16_POOLS_AFTER,
};

use std::sync::Arc;

use thiserror::Error;

use crate::par;
use crate::tensor::{self, FeaturePyramid, FeatureVolume, Image, TensorError};
use crate::warp::Intrinsics;

/// Per-channel RGB means subtracted before the conv stack (VGG convention,
/// inputs in `[0, 255]`, no further scaling).
pub const VGG_MEAN_RGB: [f32; 3] = [123.68, 116.779, 103.939];

/// Working resolution of the conv pyramid.
pub const CONV_INPUT_SIZE: usize = 224;

/// Default number of Gaussian pyramid levels.
pub const DEFAULT_RGB_LEVELS: usize = 5;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("layer expects {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("bad magic: expected CWTS")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("layer {layer} reads {actual} channels but its input has {expected}")]
    ShapeChain {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("layer {layer} has a {kh}x{kw} kernel; only 3x3 is supported")]
    UnsupportedKernel { layer: usize, kh: usize, kw: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("truncated weight file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error("weight dimensions overflow the address space")]
    DimensionOverflow,
    #[error("image {width}x{height} too small for {levels} pyramid levels")]
    ImageTooSmall { width: usize, height: usize, levels: usize },
    #[error("expected an RGB image, got {0} channels")]
    NotRgb(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 3x3 convolution, stride 1, zero padding 1, plus bias, then ReLU.
pub fn conv_forward(input: &FeatureVolume, layer: &ConvLayer) -> Result<FeatureVolume, ExtractError> {
    let spec = &layer.spec;
    if input.channels() != spec.in_channels {
        return Err(ExtractError::ChannelMismatch {
            expected: spec.in_channels,
            actual: input.channels(),
        });
    }
    let (w, h) = (input.width(), input.height());
    let mut out = FeatureVolume::zeros(w, h, spec.out_channels);
    par::for_each_chunk_mut(out.data_mut(), w * h, |o, dst| {
        // Accumulate in f64 so deep layers with thousands of taps stay exact
        // to f32 output precision.
        let mut acc = vec![layer.biases[o] as f64; w * h];
        for i in 0..spec.in_channels {
            let src = input.channel(i);
            let k = layer.kernel(o, i);
            for ky in 0..3 {
                // Left tap reads x-1, centre x, right x+1.
                let (kl, kc, kr) = (k[ky * 3] as f64, k[ky * 3 + 1] as f64, k[ky * 3 + 2] as f64);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let arow = &mut acc[y * w..(y + 1) * w];
                    for x in 0..w {
                        let mut v = kc * srow[x] as f64;
                        if x > 0 {
                            v += kl * srow[x - 1] as f64;
                        }
                        if x + 1 < w {
                            v += kr * srow[x + 1] as f64;
                        }
                        arow[x] += v;
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = a.max(0.0) as f32;
        }
    });
    Ok(out)
}

/// 2x2 max-pool with stride 2. Odd trailing rows/columns are dropped; a
/// dimension of 1 is kept as 1.
pub fn max_pool_2x2(input: &FeatureVolume) -> FeatureVolume {
    let (w, h) = (input.width(), input.height());
    let (ow, oh) = ((w / 2).max(1), (h / 2).max(1));
    let mut out = FeatureVolume::zeros(ow, oh, input.channels());
    par::for_each_chunk_mut(out.data_mut(), ow * oh, |c, dst| {
        let src = input.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        m = m.max(src[y * w + x]);
                    }
                }
                dst[oy * ow + ox] = m;
            }
        }
    });
    out
}

fn check_rgb(img: &Image) -> Result<(), ExtractError> {
    if img.channels() != 3 {
        return Err(ExtractError::NotRgb(img.channels()));
    }
    Ok(())
}

/// Centre-crops to a square and bilinearly resizes to 224x224. Inputs that
/// are already 224x224 are returned unchanged.
pub fn prepare_conv_input(img: &Image) -> Image {
    if img.width() == CONV_INPUT_SIZE && img.height() == CONV_INPUT_SIZE {
        return img.clone();
    }
    let square = tensor::center_crop_to_aspect(img, 1, 1);
    tensor::resize_bilinear(&square, CONV_INPUT_SIZE, CONV_INPUT_SIZE)
}

/// Runs the conv stack over an RGB image in `[0, 255]`, one level per layer.
pub fn build_conv_pyramid(img: &Image, weights: &NetworkWeights) -> Result<FeaturePyramid, ExtractError> {
    check_rgb(img)?;
    let mut x = FeatureVolume::from_fn(img.width(), img.height(), 3, |c, px, py| {
        img.get(c, px, py) - VGG_MEAN_RGB[c]
    });
    let mut levels = Vec::with_capacity(weights.len());
    let mut scales = Vec::with_capacity(weights.len());
    let mut scale = 1u32;
    for layer in weights.layers() {
        let act = conv_forward(&x, layer)?;
        levels.push(act.clone());
        scales.push(scale);
        x = if layer.spec.followed_by_pool {
            scale *= 2;
            max_pool_2x2(&act)
        } else {
            act
        };
    }
    Ok(FeaturePyramid::new(levels, scales)?)
}

/// Gaussian pyramid: level 0 is the input, each further level one
/// [`tensor::downsample_gaussian`] step of the previous.
pub fn build_rgb_pyramid(img: &Image, levels: usize) -> Result<FeaturePyramid, ExtractError> {
    let too_small = || ExtractError::ImageTooSmall {
        width: img.width(),
        height: img.height(),
        levels,
    };
    if levels == 0 || levels > 31 {
        return Err(too_small());
    }
    let min_side = 1usize << (levels - 1);
    if img.width() < min_side || img.height() < min_side {
        return Err(too_small());
    }
    let mut out = vec![img.clone()];
    let mut scales = vec![1u32];
    for l in 1..levels {
        let next = tensor::downsample_gaussian(&out[l - 1]).map_err(|_| too_small())?;
        out.push(next);
        scales.push(1 << l);
    }
    Ok(FeaturePyramid::new(out, scales)?)
}

/// How alignment pyramids are built from RGB frames.
#[derive(Clone, Debug)]
pub enum PyramidKind {
    RgbGaussian { levels: usize },
    Conv(Arc<NetworkWeights>),
}

impl PyramidKind {
    pub fn rgb() -> Self {
        Self::RgbGaussian {
            levels: DEFAULT_RGB_LEVELS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RgbGaussian { .. } => "rgb",
            Self::Conv(_) => "conv",
        }
    }

    /// Image the pyramid is actually computed from: conv mode works at
    /// 224x224, RGB mode at the native size.
    pub fn working_image(&self, img: &Image) -> Image {
        match self {
            Self::RgbGaussian { .. } => img.clone(),
            Self::Conv(_) => prepare_conv_input(img),
        }
    }

    /// Camera model of [`Self::working_image`] for a `width x height` input
    /// described by `k`. Conv mode follows the centre crop and the pixel
    /// centre convention of [`tensor::resize_bilinear`].
    pub fn working_intrinsics(&self, k: &Intrinsics, width: usize, height: usize) -> Intrinsics {
        match self {
            Self::RgbGaussian { .. } => *k,
            Self::Conv(_) if width == CONV_INPUT_SIZE && height == CONV_INPUT_SIZE => *k,
            Self::Conv(_) => {
                let side = width.min(height);
                let (x0, y0) = (((width - side) / 2) as f64, ((height - side) / 2) as f64);
                let s = CONV_INPUT_SIZE as f64 / side as f64;
                Intrinsics {
                    fx: k.fx * s,
                    fy: k.fy * s,
                    cx: (k.cx - x0 + 0.5) * s - 0.5,
                    cy: (k.cy - y0 + 0.5) * s - 0.5,
                }
            }
        }
    }

    /// Builds the pyramid of an image that is already at working resolution.
    pub fn build(&self, working: &Image) -> Result<FeaturePyramid, ExtractError> {
        match self {
            Self::RgbGaussian { levels } => build_rgb_pyramid(working, *levels),
            Self::Conv(w) => build_conv_pyramid(working, w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct 6-loop convolution with zero padding, bias and ReLU.
    fn naive_conv(input: &FeatureVolume, layer: &ConvLayer) -> Vec<f32> {
        let (w, h) = (input.width() as isize, input.height() as isize);
        let s = &layer.spec;
        let mut out = Vec::new();
        for o in 0..s.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for i in 0..s.in_channels {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sx, sy) = (x + kx - 1, y + ky - 1);
                                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                                    continue;
                                }
                                let wt = layer.weights[((o * s.in_channels + i) * 9) + (ky * 3 + kx) as usize];
                                acc += wt as f64 * input.get(i, sx as usize, sy as usize) as f64;
                            }
                        }
                    }
                    out.push((acc + layer.biases[o] as f64).max(0.0) as f32);
                }
            }
        }
        out
    }

    fn random_layer(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> ConvLayer {
        let w = (0..out * inp * 9).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let b = (0..out).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        ConvLayer::new(out, inp, false, w, b).unwrap()
    }

    fn random_volume(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> FeatureVolume {
        FeatureVolume::from_fn(w, h, c, |_, _, _| rng.random_range(-2.0f32..2.0))
    }

    #[test]
    fn identity_kernel_passes_nonnegative_input() {
        let mut wts = vec![0.0; 2 * 2 * 9];
        wts[4] = 1.0; // out 0 <- in 0 centre
        wts[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 centre
        let layer = ConvLayer::new(2, 2, false, wts, vec![0.0, 0.0]).unwrap();
        let x = FeatureVolume::from_fn(5, 4, 2, |c, x, y| (c * 7 + x * 3 + y) as f32);
        assert_eq!(conv_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let layer = ConvLayer::new(3, 1, false, vec![0.0; 27], vec![0.5, 1.0, 2.0]).unwrap();
        let out = conv_forward(&FeatureVolume::filled(4, 4, 1, 9.0), &layer).unwrap();
        for c in 0..3 {
            assert!(out.channel(c).iter().all(|&v| v == layer.biases[c]));
        }
    }

    #[test]
    fn channel_mismatch() {
        let layer = ConvLayer::new(1, 2, false, vec![0.0; 18], vec![0.0]).unwrap();
        assert!(matches!(
            conv_forward(&FeatureVolume::zeros(3, 3, 1), &layer),
            Err(ExtractError::ChannelMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn matches_naive_oracle_on_small_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // The 2x1x3x3 on 4x4 case, then random shapes up to 3 channels, 16x16.
        let layer = random_layer(&mut rng, 2, 1);
        let x = random_volume(&mut rng, 4, 4, 1);
        let fast = conv_forward(&x, &layer).unwrap();
        for (a, b) in fast.data().iter().zip(naive_conv(&x, &layer)) {
            assert_relative_eq!(*a, b, epsilon = 1e-5, max_relative = 1e-5);
        }
        for _ in 0..30 {
            let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let layer = random_layer(&mut rng, cout, cin);
            let x = random_volume(&mut rng, w, h, cin);
            let fast = conv_forward(&x, &layer).unwrap();
            for (a, b) in fast.data().iter().zip(naive_conv(&x, &layer)) {
                assert_relative_eq!(*a, b, epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn pooling_shapes_and_values() {
        let v = FeatureVolume::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool_2x2(&v).data(), &[4.0]);
        let c = max_pool_2x2(&FeatureVolume::filled(224, 224, 2, 1.5));
        assert_eq!((c.width(), c.height()), (112, 112));
        assert!(c.data().iter().all(|&x| x == 1.5));
        let odd = max_pool_2x2(&FeatureVolume::zeros(5, 7, 1));
        assert_eq!((odd.width(), odd.height()), (2, 3));
    }

    #[test]
    fn rgb_pyramid_shapes() {
        let img = FeatureVolume::filled(224, 224, 3, 80.0);
        let p = build_rgb_pyramid(&img, 5).unwrap();
        let sizes: Vec<usize> = p.levels().iter().map(|l| l.width()).collect();
        assert_eq!(sizes, vec![224, 112, 56, 28, 14]);
        assert_eq!(p.scales(), &[1, 2, 4, 8, 16]);
        for l in p.levels() {
            assert!(l.data().iter().all(|&v| v == 80.0));
        }
        let one = build_rgb_pyramid(&img, 1).unwrap();
        assert_eq!(one.num_levels(), 1);
        assert_eq!(one.level(0), &img);
        assert!(matches!(
            build_rgb_pyramid(&FeatureVolume::zeros(8, 8, 3), 5),
            Err(ExtractError::ImageTooSmall { .. })
        ));
    }

    fn vgg_shaped(bias: f32) -> NetworkWeights {
        // Zero kernels keep this cheap to reason about; only shapes matter.
        let mut layers = Vec::new();
        let mut inp = 3;
        for (i, &out) in VGG16_CHANNELS.iter().enumerate() {
            let pool = VGG16_POOLS_AFTER.contains(&(i + 1));
            layers.push(ConvLayer::new(out, inp, pool, vec![0.0; out * inp * 9], vec![bias; out]).unwrap());
            inp = out;
        }
        NetworkWeights::new(layers).unwrap()
    }

    #[test]
    fn conv_pyramid_follows_vgg_plan() {
        let img = FeatureVolume::filled(224, 224, 3, 0.0);
        let p = build_conv_pyramid(&img, &vgg_shaped(0.0)).unwrap();
        assert_eq!(p.num_levels(), 13);
        let res: Vec<usize> = p.levels().iter().map(|l| l.width()).collect();
        assert_eq!(res, vec![224, 224, 112, 112, 56, 56, 56, 28, 28, 28, 14, 14, 14]);
        let ch: Vec<usize> = p.shape();
        assert_eq!(ch, VGG16_CHANNELS.to_vec());
        assert_eq!(p.bands().len(), 5);
        assert_eq!(p.bands()[4], vec![10, 11, 12]);
        for l in p.levels() {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_pyramid_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetworkWeights::new(vec![
            {
                let mut l = random_layer(&mut rng, 4, 3);
                l.spec.followed_by_pool = true;
                l
            },
            random_layer(&mut rng, 5, 4),
        ])
        .unwrap();
        let img = FeatureVolume::from_fn(16, 16, 3, |_, _, _| rng.random_range(0.0f32..255.0));
        let p = build_conv_pyramid(&img, &net).unwrap();
        assert_eq!(p.scales(), &[1, 2]);
        assert_eq!(p.level(1).width(), 8);
        assert!(p.levels().iter().all(|l| l.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn prepare_resizes_and_crops() {
        let img = FeatureVolume::filled(300, 200, 3, 10.0);
        let p = prepare_conv_input(&img);
        assert_eq!((p.width(), p.height()), (224, 224));
        let same = FeatureVolume::filled(224, 224, 3, 1.0);
        assert_eq!(prepare_conv_input(&same), same);
    }

    #[test]
    fn working_intrinsics_follow_crop_and_resize() {
        // Channels hold the input pixel coordinates, which bilinear
        // resampling reproduces exactly away from the clamped border.
        let (w, h) = (300, 200);
        let img = FeatureVolume::from_fn(w, h, 3, |c, x, y| [x as f32, y as f32, 0.0][c]);
        let k = Intrinsics::new(280.0, 270.0, 151.0, 97.5).unwrap();
        let layer = ConvLayer::new(1, 3, false, vec![0.0; 27], vec![0.0]).unwrap();
        let kind = PyramidKind::Conv(Arc::new(NetworkWeights::new(vec![layer]).unwrap()));
        let kw = kind.working_intrinsics(&k, w, h);
        let prepared = prepare_conv_input(&img);
        for ray in [[0.0, 0.0, 1.0], [0.1, -0.05, 1.0], [-0.2, 0.15, 1.0]] {
            let d = nalgebra::Vector3::from(ray);
            let src = k.project(&d).unwrap();
            let dst = kw.project(&d).unwrap();
            assert_relative_eq!(
                prepared.sample_bilinear(dst[0], dst[1], 0).value,
                src[0],
                epsilon = 1e-3
            );
            assert_relative_eq!(
                prepared.sample_bilinear(dst[0], dst[1], 1).value,
                src[1],
                epsilon = 1e-3
            );
        }
        assert_eq!(PyramidKind::rgb().working_intrinsics(&k, w, h), k);
    }
}
