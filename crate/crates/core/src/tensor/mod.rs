//! Image and feature-volume containers.
//!
//! A [`FeatureVolume`] is a stack of `channels` scalar fields of identical
//! size stored channel-major ("CHW"): all of channel 0 row by row, then all
//! of channel 1, and so on. A plain [`Image`] is a volume with one channel
//! (RGB images simply carry three).

mod io;

pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor};

use thiserror::Error;

use crate::par;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {actual} does not match {width}x{height}x{channels}")]
    LengthMismatch {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
    #[error("volume must have at least one channel and non-zero extent")]
    EmptyShape,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{width}x{height} is below the minimum {min}x{min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("channel {channel} out of range for a {channels}-channel volume")]
    ChannelOutOfRange { channel: usize, channels: usize },
    #[error("invalid pyramid: {0}")]
    InvalidPyramid(String),
    #[error("bad magic: expected FTNS")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported tensor shape: {0}")]
    BadShape(String),
    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),
    #[error("tensor dimensions overflow the address space")]
    DimensionOverflow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Multi-channel 2-D scalar field, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

/// A single- or three-channel volume holding pixel intensities.
pub type Image = FeatureVolume;

/// Outcome of a sub-pixel lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleResult {
    pub value: f64,
    pub valid: bool,
}

impl FeatureVolume {
    /// Wraps `data`, checking its length and that every value is finite.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(TensorError::EmptyShape);
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or(TensorError::DimensionOverflow)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                width,
                height,
                channels,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Internal constructor for buffers produced by finite arithmetic.
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "empty volume");
        assert!(value.is_finite());
        Self::from_raw(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds a volume from `f(channel, x, y)`, called in storage order
    /// (channel, then row, then column).
    ///
    /// Panics if `f` produces a non-finite value.
    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> f32,
    {
        assert!(width > 0 && height > 0 && channels > 0, "empty volume");
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, x, y);
                    assert!(v.is_finite(), "non-finite value at ({c}, {x}, {y})");
                    data.push(v);
                }
            }
        }
        Self::from_raw(width, height, channels, data)
    }

    /// Concatenates single- or multi-channel volumes of equal size along the
    /// channel axis.
    pub fn stack(parts: &[FeatureVolume]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyShape)?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.width != w || p.height != h {
                return Err(TensorError::BadShape(format!(
                    "cannot stack {}x{} with {}x{}",
                    p.width, p.height, w, h
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Self::from_raw(w, h, channels, data))
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Contiguous plane of one channel.
    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub(crate) fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.pixel_count() + y * self.width + x]
    }

    /// One channel as its own single-channel image.
    pub fn channel_image(&self, c: usize) -> Image {
        Self::from_raw(self.width, self.height, 1, self.channel(c).to_vec())
    }

    /// Copies the listed channels, in the listed order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<Self, TensorError> {
        if indices.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        let mut data = Vec::with_capacity(indices.len() * self.pixel_count());
        for &c in indices {
            if c >= self.channels {
                return Err(TensorError::ChannelOutOfRange {
                    channel: c,
                    channels: self.channels,
                });
            }
            data.extend_from_slice(self.channel(c));
        }
        Ok(Self::from_raw(self.width, self.height, indices.len(), data))
    }

    /// Applies `f` to every value. `f` must keep values finite.
    pub fn map<F: Fn(f32) -> f32>(&self, f: F) -> Self {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced non-finite values");
        Self::from_raw(self.width, self.height, self.channels, data)
    }

    /// Bilinear interpolation of one channel at the continuous position `(x, y)`.
    ///
    /// Pixel centres sit on integer coordinates. The sample is invalid as
    /// soon as any contributing neighbour lies outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64, channel: usize) -> SampleResult {
        assert!(channel < self.channels, "channel out of range");
        match BilinearTap::new(self.width, self.height, x, y) {
            Some(tap) => SampleResult {
                value: tap.apply(self.channel(channel)),
                valid: true,
            },
            None => SampleResult {
                value: 0.0,
                valid: false,
            },
        }
    }
}

/// Precomputed bilinear footprint, reused across channels at one position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    base: usize,
    dx: usize,
    dy: usize,
    w00: f64,
    w10: f64,
    w01: f64,
    w11: f64,
}

impl BilinearTap {
    #[inline]
    pub(crate) fn new(width: usize, height: usize, x: f64, y: f64) -> Option<Self> {
        // Also rejects NaN.
        if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
            return None;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as usize, y0 as usize);
        let dx = usize::from(x0 + 1 < width);
        let dy = if y0 + 1 < height { width } else { 0 };
        Some(Self {
            base: y0 * width + x0,
            dx,
            dy,
            w00: (1.0 - fx) * (1.0 - fy),
            w10: fx * (1.0 - fy),
            w01: (1.0 - fx) * fy,
            w11: fx * fy,
        })
    }

    #[inline]
    pub(crate) fn apply(&self, plane: &[f32]) -> f64 {
        let b = self.base;
        plane[b] as f64 * self.w00
            + plane[b + self.dx] as f64 * self.w10
            + plane[b + self.dy] as f64 * self.w01
            + plane[b + self.dx + self.dy] as f64 * self.w11
    }
}

/// Central-difference gradients `(d/dx, d/dy)` of every channel.
///
/// Interior pixels use `(f(x+1) - f(x-1)) / 2`; the one-pixel border uses
/// one-sided differences so the output keeps the input size.
pub fn gradient_central(v: &FeatureVolume) -> Result<(FeatureVolume, FeatureVolume), TensorError> {
    let (w, h) = (v.width, v.height);
    if w < 3 || h < 3 {
        return Err(TensorError::TooSmall {
            width: w,
            height: h,
            min: 3,
        });
    }
    let mut gx = FeatureVolume::zeros(w, h, v.channels);
    let mut gy = FeatureVolume::zeros(w, h, v.channels);
    for c in 0..v.channels {
        let src = v.channel(c);
        let dst = gx.channel_mut(c);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let out = &mut dst[y * w..(y + 1) * w];
            out[0] = row[1] - row[0];
            for x in 1..w - 1 {
                out[x] = 0.5 * (row[x + 1] - row[x - 1]);
            }
            out[w - 1] = row[w - 1] - row[w - 2];
        }
        let dst = gy.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = if y == 0 {
                    src[w + x] - src[x]
                } else if y == h - 1 {
                    src[y * w + x] - src[(y - 1) * w + x]
                } else {
                    0.5 * (src[(y + 1) * w + x] - src[(y - 1) * w + x])
                };
            }
        }
    }
    Ok((gx, gy))
}

/// Reflect-101 index mapping (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
#[inline]
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

const BINOMIAL5: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

/// One Gaussian-pyramid step: 5x5 binomial blur with reflect-101 borders,
/// then every second pixel starting at `(0, 0)`. Output is `ceil(dim / 2)`.
pub fn downsample_gaussian(v: &FeatureVolume) -> Result<FeatureVolume, TensorError> {
    let (w, h) = (v.width, v.height);
    if w < 2 || h < 2 {
        return Err(TensorError::TooSmall {
            width: w,
            height: h,
            min: 2,
        });
    }
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = FeatureVolume::zeros(ow, oh, v.channels);
    let plane = ow * oh;
    par::for_each_chunk_mut(&mut out.data, plane, |c, dst| {
        let src = v.channel(c);
        // Horizontal pass at even columns only; integer weights keep sums exact.
        let mut horiz = vec![0f64; ow * h];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for ox in 0..ow {
                let x = (2 * ox) as isize;
                let mut acc = 0.0;
                for (k, wt) in BINOMIAL5.iter().enumerate() {
                    acc += wt * row[reflect101(x + k as isize - 2, w)] as f64;
                }
                horiz[y * ow + ox] = acc;
            }
        }
        for oy in 0..oh {
            let y = (2 * oy) as isize;
            for ox in 0..ow {
                let mut acc = 0.0;
                for (k, wt) in BINOMIAL5.iter().enumerate() {
                    acc += wt * horiz[reflect101(y + k as isize - 2, h) * ow + ox];
                }
                dst[oy * ow + ox] = (acc / 256.0) as f32;
            }
        }
    });
    Ok(out)
}

/// Separable Gaussian blur (radius `ceil(3 sigma)`, reflect-101 borders).
pub fn gaussian_blur(v: &FeatureVolume, sigma: f64) -> FeatureVolume {
    assert!(sigma > 0.0 && sigma.is_finite());
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let (w, h) = (v.width, v.height);
    let mut out = FeatureVolume::zeros(w, h, v.channels);
    par::for_each_chunk_mut(&mut out.data, w * h, |c, dst| {
        let src = v.channel(c);
        let mut tmp = vec![0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let xi = reflect101(x as isize + k as isize - radius, w);
                    acc += wt * src[y * w + xi] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let yi = reflect101(y as isize + k as isize - radius, h);
                    acc += wt * tmp[yi * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    });
    out
}

/// Nearest-neighbour upsampling to an explicit size.
pub fn upsample_nearest(v: &FeatureVolume, width: usize, height: usize) -> FeatureVolume {
    FeatureVolume::from_fn(width, height, v.channels, |c, x, y| {
        let sx = (x * v.width / width).min(v.width - 1);
        let sy = (y * v.height / height).min(v.height - 1);
        v.get(c, sx, sy)
    })
}

/// Bilinear resize; output pixel centres map onto the input by
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the input domain.
pub fn resize_bilinear(v: &FeatureVolume, width: usize, height: usize) -> FeatureVolume {
    let sx = v.width as f64 / width as f64;
    let sy = v.height as f64 / height as f64;
    let maxx = (v.width - 1) as f64;
    let maxy = (v.height - 1) as f64;
    let mut out = FeatureVolume::zeros(width, height, v.channels);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, maxy);
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, maxx);
            let tap = BilinearTap::new(v.width, v.height, fx, fy).expect("clamped into domain");
            for c in 0..v.channels {
                out.channel_mut(c)[y * width + x] = tap.apply(v.channel(c)) as f32;
            }
        }
    }
    out
}

/// Largest centred crop with the requested aspect ratio.
pub fn center_crop_to_aspect(v: &FeatureVolume, aspect_w: usize, aspect_h: usize) -> FeatureVolume {
    let (w, h) = (v.width, v.height);
    let (cw, ch) = if w * aspect_h > h * aspect_w {
        ((h * aspect_w / aspect_h).max(1), h)
    } else {
        (w, (w * aspect_h / aspect_w).max(1))
    };
    let (x0, y0) = ((w - cw) / 2, (h - ch) / 2);
    FeatureVolume::from_fn(cw, ch, v.channels, |c, x, y| v.get(c, x0 + x, y0 + y))
}

/// Ordered stack of volumes, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureVolume>,
    level_scale: Vec<u32>,
}

impl FeaturePyramid {
    /// Checks that resolutions never grow with the level index and that the
    /// scale divisors are non-decreasing powers of two starting at 1.
    pub fn new(levels: Vec<FeatureVolume>, level_scale: Vec<u32>) -> Result<Self, TensorError> {
        if levels.is_empty() {
            return Err(TensorError::InvalidPyramid("no levels".into()));
        }
        if levels.len() != level_scale.len() {
            return Err(TensorError::InvalidPyramid(format!(
                "{} levels but {} scales",
                levels.len(),
                level_scale.len()
            )));
        }
        if level_scale[0] != 1 {
            return Err(TensorError::InvalidPyramid("level 0 must have scale 1".into()));
        }
        for (i, s) in level_scale.iter().enumerate() {
            if !s.is_power_of_two() {
                return Err(TensorError::InvalidPyramid(format!(
                    "scale {s} at level {i} is not a power of two"
                )));
            }
        }
        for i in 1..levels.len() {
            if level_scale[i] < level_scale[i - 1] {
                return Err(TensorError::InvalidPyramid(format!("scale decreases at level {i}")));
            }
            let (a, b) = (&levels[i - 1], &levels[i]);
            if b.width > a.width || b.height > a.height {
                return Err(TensorError::InvalidPyramid(format!("resolution grows at level {i}")));
            }
        }
        Ok(Self { levels, level_scale })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &FeatureVolume {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[FeatureVolume] {
        &self.levels
    }

    pub fn scale(&self, i: usize) -> u32 {
        self.level_scale[i]
    }

    pub fn scales(&self) -> &[u32] {
        &self.level_scale
    }

    /// Channel count of each level.
    pub fn shape(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.channels()).collect()
    }

    /// Groups level indices that share a resolution, finest band first.
    pub fn bands(&self) -> Vec<Vec<usize>> {
        let mut bands: Vec<Vec<usize>> = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            match bands.last_mut() {
                Some(b)
                    if {
                        let p = &self.levels[b[0]];
                        p.width == l.width && p.height == l.height
                    } =>
                {
                    b.push(i)
                }
                _ => bands.push(vec![i]),
            }
        }
        bands
    }

    /// Restricts every level to the given channel subsets.
    pub fn select_channels(&self, per_level: &[Vec<usize>]) -> Result<Self, TensorError> {
        if per_level.len() != self.levels.len() {
            return Err(TensorError::InvalidPyramid(format!(
                "mask covers {} levels, pyramid has {}",
                per_level.len(),
                self.levels.len()
            )));
        }
        let levels = self
            .levels
            .iter()
            .zip(per_level)
            .map(|(l, idx)| l.select_channels(idx))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            levels,
            level_scale: self.level_scale.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(w: usize, h: usize, c: usize, seed: u64) -> FeatureVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureVolume::from_fn(w, h, c, |_, _, _| rng_value(&mut rng))
    }

    fn rng_value(rng: &mut ChaCha8Rng) -> f32 {
        rng.random_range(-1.0f32..1.0)
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(
            FeatureVolume::new(2, 2, 1, vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            FeatureVolume::new(2, 1, 1, vec![0.0, f32::NAN]),
            Err(TensorError::NonFinite(1))
        ));
        assert!(matches!(
            FeatureVolume::new(0, 1, 1, vec![]),
            Err(TensorError::EmptyShape)
        ));
    }

    #[test]
    fn sample_at_grid_point_is_stored_value() {
        let v = random_volume(8, 8, 2, 1);
        let s = v.sample_bilinear(3.0, 5.0, 1);
        assert!(s.valid);
        assert_eq!(s.value, v.get(1, 3, 5) as f64);
        // Far corner is a grid point too.
        let s = v.sample_bilinear(7.0, 7.0, 0);
        assert!(s.valid);
        assert_eq!(s.value, v.get(0, 7, 7) as f64);
    }

    #[test]
    fn sample_outside_is_invalid() {
        let v = random_volume(4, 4, 1, 2);
        assert!(!v.sample_bilinear(-0.5, 2.0, 0).valid);
        assert!(!v.sample_bilinear(3.01, 2.0, 0).valid);
        assert!(!v.sample_bilinear(1.0, f64::NAN, 0).valid);
    }

    #[test]
    fn sample_two_by_two_center() {
        let v = FeatureVolume::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        // (1 - .5)(1 - .5) * 0 + .5 * .5 * 1 + .5 * .5 * 2 + .25 * 3 = 1.5
        assert_abs_diff_eq!(v.sample_bilinear(0.5, 0.5, 0).value, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn sample_is_exact_on_linear_fields() {
        let (a, b, c) = (0.7f64, -1.3f64, 4.0f64);
        let v = FeatureVolume::from_fn(20, 15, 1, |_, x, y| (a * x as f64 + b * y as f64 + c) as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = rng.random_range(0.0..19.0);
            let y = rng.random_range(0.0..14.0);
            let s = v.sample_bilinear(x, y, 0);
            assert!(s.valid);
            assert_abs_diff_eq!(s.value, a * x + b * y + c, epsilon = 1e-5);
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let v = FeatureVolume::filled(5, 4, 2, 3.5);
        let (gx, gy) = gradient_central(&v).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_of_plane_is_exact() {
        let v = FeatureVolume::from_fn(7, 6, 1, |_, x, y| 2.0 * x as f32 - 0.5 * y as f32);
        let (gx, gy) = gradient_central(&v).unwrap();
        for y in 1..5 {
            for x in 1..6 {
                assert_eq!(gx.get(0, x, y), 2.0);
                assert_eq!(gy.get(0, x, y), -0.5);
            }
        }
    }

    #[test]
    fn gradient_matches_brute_force() {
        let v = random_volume(5, 5, 1, 4);
        let (gx, gy) = gradient_central(&v).unwrap();
        let f = |x: i32, y: i32| v.get(0, x as usize, y as usize);
        for y in 0..5i32 {
            for x in 0..5i32 {
                let ex = match x {
                    0 => f(1, y) - f(0, y),
                    4 => f(4, y) - f(3, y),
                    _ => (f(x + 1, y) - f(x - 1, y)) / 2.0,
                };
                let ey = match y {
                    0 => f(x, 1) - f(x, 0),
                    4 => f(x, 4) - f(x, 3),
                    _ => (f(x, y + 1) - f(x, y - 1)) / 2.0,
                };
                assert_abs_diff_eq!(gx.get(0, x as usize, y as usize), ex, epsilon = 1e-7);
                assert_abs_diff_eq!(gy.get(0, x as usize, y as usize), ey, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn gradient_rejects_tiny() {
        let v = FeatureVolume::zeros(2, 5, 1);
        assert!(matches!(gradient_central(&v), Err(TensorError::TooSmall { .. })));
    }

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-2, 2), 0);
        assert_eq!(reflect101(3, 2), 1);
    }

    #[test]
    fn downsample_constant_and_shape() {
        let v = FeatureVolume::filled(224, 224, 3, 17.25);
        let d = downsample_gaussian(&v).unwrap();
        assert_eq!((d.width(), d.height(), d.channels()), (112, 112, 3));
        assert!(d.data().iter().all(|&x| x == 17.25));
        let odd = downsample_gaussian(&FeatureVolume::zeros(7, 5, 1)).unwrap();
        assert_eq!((odd.width(), odd.height()), (4, 3));
    }

    #[test]
    fn downsample_delta_hand_convolution() {
        // Delta at (2, 2) in a 4x4 image. Output pixel (ox, oy) samples the
        // blurred image at (2ox, 2oy); the blur of a delta is the kernel
        // itself, with reflect-101 folding energy back at the border.
        let mut data = vec![0f32; 16];
        data[2 * 4 + 2] = 1.0;
        let v = FeatureVolume::new(4, 4, 1, data).unwrap();
        let d = downsample_gaussian(&v).unwrap();
        let k = [1.0, 4.0, 6.0, 4.0, 1.0];
        // Weight of input column 2 seen from output column x = 2*ox, by reflect-101.
        let wcol = |x: isize| -> f64 {
            (0..5)
                .filter(|&t| reflect101(x + t as isize - 2, 4) == 2)
                .map(|t| k[t])
                .sum::<f64>()
        };
        for oy in 0..2 {
            for ox in 0..2 {
                let expect = wcol(2 * ox as isize) * wcol(2 * oy as isize) / 256.0;
                assert_abs_diff_eq!(d.get(0, ox, oy) as f64, expect, epsilon = 1e-7);
            }
        }
        // At the centre the reflected tail tap lands on the delta too: (6 + 1)^2.
        assert_abs_diff_eq!(d.get(0, 1, 1) as f64, 49.0 / 256.0, epsilon = 1e-7);
    }

    #[test]
    fn downsample_then_upsample_constant_is_identity() {
        let v = FeatureVolume::filled(10, 6, 2, -4.0);
        let d = downsample_gaussian(&v).unwrap();
        let u = upsample_nearest(&d, 10, 6);
        assert_eq!(u, v);
    }

    #[test]
    fn blur_preserves_constant() {
        let v = FeatureVolume::filled(9, 9, 1, 3.0);
        let b = gaussian_blur(&v, 2.0);
        for &x in b.data() {
            assert_abs_diff_eq!(x, 3.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn pyramid_invariants() {
        let a = FeatureVolume::zeros(8, 8, 1);
        let b = FeatureVolume::zeros(4, 4, 1);
        assert!(FeaturePyramid::new(vec![a.clone(), b.clone()], vec![1, 2]).is_ok());
        assert!(FeaturePyramid::new(vec![b.clone(), a.clone()], vec![1, 2]).is_err());
        assert!(FeaturePyramid::new(vec![a.clone(), b.clone()], vec![2, 2]).is_err());
        assert!(FeaturePyramid::new(vec![a.clone(), b.clone()], vec![1, 3]).is_err());
        let p = FeaturePyramid::new(vec![a.clone(), a, b.clone(), b], vec![1, 1, 2, 2]).unwrap();
        assert_eq!(p.bands(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn select_channels_order_and_bounds() {
        let v = random_volume(3, 3, 4, 9);
        let s = v.select_channels(&[2, 0]).unwrap();
        assert_eq!(s.channel(0), v.channel(2));
        assert_eq!(s.channel(1), v.channel(0));
        assert!(v.select_channels(&[4]).is_err());
    }

    #[test]
    fn resize_identity_size_is_noop() {
        let v = random_volume(6, 5, 2, 11);
        let r = resize_bilinear(&v, 6, 5);
        for (a, b) in r.data().iter().zip(v.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn crop_to_square() {
        let v = FeatureVolume::from_fn(10, 6, 1, |_, x, y| (x * 10 + y) as f32);
        let c = center_crop_to_aspect(&v, 1, 1);
        assert_eq!((c.width(), c.height()), (6, 6));
        assert_eq!(c.get(0, 0, 0), 20.0);
    }
}
