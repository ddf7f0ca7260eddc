//! CWTS network weight files.
//!
//! Little-endian: magic `CWTS`, `u32` version (1), `u32` layer count, then
//! per layer `u32 out, u32 in, u32 kh, u32 kw, u8 pool_after`, the
//! `out*in*kh*kw` f32 weights (out-major, then in, kh, kw) and `out` f32
//! biases.

use std::fs;
use std::path::Path;

use super::ExtractError;

const MAGIC: &[u8; 4] = b"CWTS";
const VERSION: u32 = 1;

/// VGG-16 conv channel plan.
pub const VGG16_CHANNELS: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
/// 1-based conv layers followed by a 2x2 max-pool in VGG-16.
pub const VGG16_POOLS_AFTER: [usize; 5] = [2, 4, 7, 10, 13];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub followed_by_pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    /// `out x in x 3 x 3`, row-major.
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

impl ConvLayer {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        followed_by_pool: bool,
        weights: Vec<f32>,
        biases: Vec<f32>,
    ) -> Result<Self, ExtractError> {
        let spec = ConvLayerSpec {
            out_channels,
            in_channels,
            kernel_h: 3,
            kernel_w: 3,
            followed_by_pool,
        };
        let layer = Self { spec, weights, biases };
        layer.check(0)?;
        Ok(layer)
    }

    fn check(&self, index: usize) -> Result<(), ExtractError> {
        let s = &self.spec;
        if s.kernel_h != 3 || s.kernel_w != 3 {
            return Err(ExtractError::UnsupportedKernel {
                layer: index,
                kh: s.kernel_h,
                kw: s.kernel_w,
            });
        }
        if s.out_channels == 0 || s.in_channels == 0 {
            return Err(ExtractError::InvalidWeights(format!("layer {index} has no channels")));
        }
        if self.weights.len() != s.out_channels * s.in_channels * 9 || self.biases.len() != s.out_channels {
            return Err(ExtractError::InvalidWeights(format!(
                "layer {index} tensor sizes do not match its shape"
            )));
        }
        if self.weights.iter().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(ExtractError::InvalidWeights(format!(
                "layer {index} has non-finite values"
            )));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn kernel(&self, out: usize, inp: usize) -> &[f32] {
        let base = (out * self.spec.in_channels + inp) * 9;
        &self.weights[base..base + 9]
    }
}

/// A validated stack of 3x3 conv layers taking RGB input.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    layers: Vec<ConvLayer>,
}

impl NetworkWeights {
    /// Checks the shape chain: layer 0 reads 3 channels and every layer reads
    /// what the previous one wrote.
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self, ExtractError> {
        if layers.is_empty() {
            return Err(ExtractError::InvalidWeights("no layers".into()));
        }
        let mut expected_in = 3;
        for (i, l) in layers.iter().enumerate() {
            l.check(i)?;
            if l.spec.in_channels != expected_in {
                return Err(ExtractError::ShapeChain {
                    layer: i,
                    expected: expected_in,
                    actual: l.spec.in_channels,
                });
            }
            expected_in = l.spec.out_channels;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Confirms the 13-layer VGG-16 channel and pooling plan.
    pub fn check_vgg16_plan(&self) -> Result<(), ExtractError> {
        if self.layers.len() != VGG16_CHANNELS.len() {
            return Err(ExtractError::InvalidWeights(format!(
                "expected 13 VGG-16 conv layers, found {}",
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let pool = VGG16_POOLS_AFTER.contains(&(i + 1));
            if l.spec.out_channels != VGG16_CHANNELS[i] || l.spec.followed_by_pool != pool {
                return Err(ExtractError::InvalidWeights(format!(
                    "layer {} deviates from the VGG-16 plan",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

pub fn encode_weights(net: &NetworkWeights) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        let s = &l.spec;
        for d in [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(u8::from(s.followed_by_pool));
        for v in l.weights.iter().chain(&l.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExtractError> {
        let end = self.pos.checked_add(n).ok_or(ExtractError::DimensionOverflow)?;
        let s = self.bytes.get(self.pos..end).ok_or(ExtractError::Truncated {
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ExtractError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ExtractError> {
        let len = n.checked_mul(4).ok_or(ExtractError::DimensionOverflow)?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<NetworkWeights, ExtractError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ExtractError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(ExtractError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut layers = Vec::new();
    for i in 0..count {
        let out_channels = r.u32()?;
        let in_channels = r.u32()?;
        let kernel_h = r.u32()?;
        let kernel_w = r.u32()?;
        let followed_by_pool = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(ExtractError::InvalidWeights(format!("layer {i} pool flag {f}"))),
        };
        let n = out_channels
            .checked_mul(in_channels)
            .and_then(|n| n.checked_mul(kernel_h))
            .and_then(|n| n.checked_mul(kernel_w))
            .ok_or(ExtractError::DimensionOverflow)?;
        let weights = r.f32s(n)?;
        let biases = r.f32s(out_channels)?;
        layers.push(ConvLayer {
            spec: ConvLayerSpec {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                followed_by_pool,
            },
            weights,
            biases,
        });
    }
    if r.pos != bytes.len() {
        return Err(ExtractError::TrailingBytes(bytes.len() - r.pos));
    }
    NetworkWeights::new(layers)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights, ExtractError> {
    decode_weights(&fs::read(path)?)
}

pub fn write_weights(net: &NetworkWeights, path: impl AsRef<Path>) -> Result<(), ExtractError> {
    fs::write(path, encode_weights(net))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(out: usize, inp: usize, pool: bool, seed: f32) -> ConvLayer {
        let w = (0..out * inp * 9).map(|i| (i as f32 * 0.37 + seed).sin()).collect();
        let b = (0..out).map(|i| i as f32 * 0.1 - seed).collect();
        ConvLayer::new(out, inp, pool, w, b).unwrap()
    }

    fn tiny() -> NetworkWeights {
        NetworkWeights::new(vec![layer(4, 3, true, 0.5), layer(6, 4, false, 1.5)]).unwrap()
    }

    #[test]
    fn round_trip_is_identical() {
        let net = tiny();
        let bytes = encode_weights(&net);
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn shape_chain_is_enforced() {
        let err = NetworkWeights::new(vec![layer(4, 3, true, 0.0), layer(6, 5, false, 0.0)]).unwrap_err();
        assert!(matches!(
            err,
            ExtractError::ShapeChain {
                layer: 1,
                expected: 4,
                actual: 5
            }
        ));
        let err = NetworkWeights::new(vec![layer(4, 1, false, 0.0)]).unwrap_err();
        assert!(matches!(err, ExtractError::ShapeChain { layer: 0, .. }));

        // Same failure when the broken chain comes from a file.
        let mut bad = tiny();
        bad.layers[1] = layer(6, 2, false, 0.0);
        let bytes = encode_weights(&bad);
        assert!(matches!(decode_weights(&bytes), Err(ExtractError::ShapeChain { .. })));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_weights(&tiny());
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 1]),
            Err(ExtractError::Truncated { .. })
        ));
        bytes[4] = 9;
        assert!(matches!(
            decode_weights(&bytes),
            Err(ExtractError::UnsupportedVersion(9))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_weights(&bytes), Err(ExtractError::BadMagic)));
        let mut extra = encode_weights(&tiny());
        extra.push(0);
        assert!(matches!(decode_weights(&extra), Err(ExtractError::TrailingBytes(1))));
    }

    #[test]
    fn non_3x3_kernels_are_rejected() {
        let mut bytes = encode_weights(&NetworkWeights::new(vec![layer(1, 3, false, 0.0)]).unwrap());
        // kh lives right after magic, version, count, out, in.
        bytes[20] = 5;
        assert!(matches!(
            decode_weights(&bytes),
            Err(ExtractError::UnsupportedKernel { .. }) | Err(ExtractError::Truncated { .. })
        ));
    }

    #[test]
    fn vgg_plan_check() {
        let mut layers = Vec::new();
        let mut inp = 3;
        for (i, &out) in VGG16_CHANNELS.iter().enumerate() {
            let pool = VGG16_POOLS_AFTER.contains(&(i + 1));
            layers.push(ConvLayer::new(out, inp, pool, vec![0.0; out * inp * 9], vec![0.0; out]).unwrap());
            inp = out;
        }
        let net = NetworkWeights::new(layers).unwrap();
        assert!(net.check_vgg16_plan().is_ok());
        assert!(tiny().check_vgg16_plan().is_err());
    }
}
