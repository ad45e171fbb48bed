//! Asymmetric min/max activation quantization.
//!
//! For a range `[min, max]` and bit-width `b` with `L = 2^b - 1` levels:
//!
//! ```text
//! scale      = (max - min) / L
//! inv_scale  = L / (max - min)
//! zero_point = round(-min * L / (max - min))
//! code       = clamp(round(x * inv_scale + zero_point), 0, L)
//! x_hat      = scale * (code - zero_point)
//! ```
//!
//! `round` is round-half-to-even throughout. The ratios are formed in `f64`
//! from the range itself and rounded once to `f32`, so ranges like `[-1, 1]`
//! at 3 bits give the exact tie `round(3.5) = 4` rather than falling just
//! short of it through `1 / f32(2/7)`.
//!
//! A range no wider than [`DEGENERATE_RANGE`] gets `scale = 1`,
//! `zero_point = round(-min)`. Zero-points are not clamped; only codes are.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simd;
use crate::tensor::{ActivationTensor, DecomposedView, Shape};

pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u8);

impl BitWidth {
    pub fn new(bits: u32) -> Result<Self> {
        if (2..=8).contains(&bits) {
            Ok(BitWidth(bits as u8))
        } else {
            Err(Error::InvalidBits(bits))
        }
    }

    pub fn get(self) -> u32 {
        self.0 as u32
    }

    /// `2^b - 1`, the largest code.
    pub fn levels(self) -> u32 {
        (1u32 << self.0) - 1
    }

    pub fn max_code(self) -> u8 {
        self.levels() as u8
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        BitWidth::new(bits)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.get()
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    LayerWise,
    ChannelWise,
}

/// Scale and zero-point vectors: length 1 layer-wise, length `C` channel-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    scale: Vec<f32>,
    inv_scale: Vec<f32>,
    zero_point: Vec<i32>,
    bits: BitWidth,
    granularity: Granularity,
}

impl QuantParams {
    /// Builds parameters from explicit scales. The inverse scale is the
    /// correctly rounded `1 / scale`.
    pub fn new(
        scale: Vec<f32>,
        zero_point: Vec<i32>,
        bits: BitWidth,
        granularity: Granularity,
    ) -> Result<Self> {
        let inv_scale = scale.iter().map(|&s| (1.0 / s as f64) as f32).collect();
        let p = QuantParams {
            scale,
            inv_scale,
            zero_point,
            bits,
            granularity,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.scale.is_empty() {
            return Err(Error::InvalidParams("empty scale vector".into()));
        }
        if self.scale.len() != self.zero_point.len() {
            return Err(Error::InvalidParams(format!(
                "{} scales but {} zero-points",
                self.scale.len(),
                self.zero_point.len()
            )));
        }
        if self.granularity == Granularity::LayerWise && self.scale.len() != 1 {
            return Err(Error::InvalidParams(format!(
                "layer-wise parameters need exactly one scale, got {}",
                self.scale.len()
            )));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidParams(format!("scale {s} is not positive")));
        }
        Ok(())
    }

    fn from_ranges(mins: &[f32], maxs: &[f32], bits: BitWidth, granularity: Granularity) -> Self {
        let n = mins.len();
        let mut scale = Vec::with_capacity(n);
        let mut inv_scale = Vec::with_capacity(n);
        let mut zero_point = Vec::with_capacity(n);
        for (&lo, &hi) in mins.iter().zip(maxs) {
            let (s, inv, z) = range_params(lo, hi, bits);
            scale.push(s);
            inv_scale.push(inv);
            zero_point.push(z);
        }
        QuantParams {
            scale,
            inv_scale,
            zero_point,
            bits,
            granularity,
        }
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    pub fn inv_scale(&self) -> &[f32] {
        &self.inv_scale
    }

    pub fn zero_point(&self) -> &[i32] {
        &self.zero_point
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    /// `(scale, inv_scale, zero_point)` governing channel `c`.
    pub(crate) fn zero_f32(&self) -> Vec<f32> {
        self.zero_point.iter().map(|&z| z as f32).collect()
    }

    pub fn channel(&self, c: usize) -> (f32, f32, i32) {
        let i = match self.granularity {
            Granularity::LayerWise => 0,
            Granularity::ChannelWise => c,
        };
        (self.scale[i], self.inv_scale[i], self.zero_point[i])
    }

    pub(crate) fn check_channels(&self, channels: usize) -> Result<()> {
        if self.granularity == Granularity::ChannelWise && self.scale.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "{} channel parameters for a tensor with {channels} channels",
                self.scale.len()
            )));
        }
        Ok(())
    }
}

fn range_params(min: f32, max: f32, bits: BitWidth) -> (f32, f32, i32) {
    let range = max as f64 - min as f64;
    if range <= DEGENERATE_RANGE {
        return (1.0, 1.0, saturate((-(min as f64)).round_ties_even()));
    }
    let levels = bits.levels() as f64;
    let scale = (range / levels) as f32;
    let inv_scale = (levels / range) as f32;
    let zero_point = saturate((-(min as f64) * levels / range).round_ties_even());
    (scale, inv_scale, zero_point)
}

fn saturate(z: f64) -> i32 {
    z.clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

/// One scale/zero-point pair over the whole tensor.
pub fn params_layerwise(a: &ActivationTensor, bits: BitWidth) -> QuantParams {
    let (lo, hi) = a.min_max();
    QuantParams::from_ranges(&[lo], &[hi], bits, Granularity::LayerWise)
}

/// Per-channel parameters: one lane-parallel min/max sweep over the view,
/// then one elementwise pass over the `C`-length range vectors.
pub fn params_channelwise(v: &DecomposedView<'_>, bits: BitWidth) -> QuantParams {
    let (mins, maxs) = v.channel_min_max();
    QuantParams::from_ranges(&mins, &maxs, bits, Granularity::ChannelWise)
}

/// Per-channel parameters the conventional way: channel by channel, one
/// scalar at a time. Same result as [`params_channelwise`]; this is the
/// parameter stage of the in-loop baseline.
pub fn params_channelwise_scalar(v: &DecomposedView<'_>, bits: BitWidth) -> QuantParams {
    let c = v.rows();
    let mut mins = Vec::with_capacity(c);
    let mut maxs = Vec::with_capacity(c);
    for ch in 0..c {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for j in 0..v.cols() {
            let x = v.get(ch, j);
            if x < lo {
                lo = x;
            }
            if x > hi {
                hi = x;
            }
        }
        mins.push(lo);
        maxs.push(hi);
    }
    QuantParams::from_ranges(&mins, &maxs, bits, Granularity::ChannelWise)
}

pub fn params_for(a: &ActivationTensor, bits: BitWidth, granularity: Granularity) -> QuantParams {
    match granularity {
        Granularity::LayerWise => params_layerwise(a, bits),
        Granularity::ChannelWise => params_channelwise(&a.decompose(), bits),
    }
}

/// Integer codes with the parameters that produced them. Codes are stored as
/// `u8` for every bit-width.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivation {
    codes: Vec<u8>,
    params: QuantParams,
    shape: Shape,
}

impl QuantizedActivation {
    pub fn new(shape: Shape, codes: Vec<u8>, params: QuantParams) -> Result<Self> {
        if codes.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                len: codes.len(),
                expected: shape.numel(),
                shape: shape.dims(),
            });
        }
        params.check_channels(shape.c)?;
        let max = params.bits.max_code();
        if let Some(q) = codes.iter().find(|&&q| q > max) {
            return Err(Error::InvalidParams(format!(
                "code {q} exceeds {max} for {}-bit quantization",
                params.bits
            )));
        }
        Ok(QuantizedActivation {
            codes,
            params,
            shape,
        })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Codes of sample `n`, `C*H*W` long.
    pub(crate) fn sample(&self, n: usize) -> &[u8] {
        let len = self.shape.c * self.shape.plane();
        &self.codes[n * len..(n + 1) * len]
    }
}

pub fn quantize(a: &ActivationTensor, p: &QuantParams) -> Result<QuantizedActivation> {
    let shape = a.shape();
    p.check_channels(shape.c)?;
    let mut codes = vec![0u8; shape.numel()];
    let max_code = p.bits.max_code() as f32;
    simd::quantize_channels(a.data(), &mut codes, shape.plane(), &p.inv_scale, &p.zero_f32(), max_code);
    Ok(QuantizedActivation {
        codes,
        params: p.clone(),
        shape,
    })
}

/// Reconstructs `scale_c * (code - zero_c)` for every element: the pre-scaled
/// activation consumed by the scale-free accumulation.
pub fn dequantize_prescale(q: &QuantizedActivation) -> ActivationTensor {
    let shape = q.shape;
    let mut out = vec![0.0f32; shape.numel()];
    let p = &q.params;
    simd::dequantize_channels(&q.codes, &mut out, shape.plane(), &p.scale, &p.zero_f32());
    ActivationTensor::from_parts_unchecked(shape, out)
}

/// Fake quantization with parameters ranged from `a` itself.
pub fn fake_quantize_ste_forward(
    a: &ActivationTensor,
    bits: BitWidth,
    granularity: Granularity,
) -> Result<ActivationTensor> {
    let p = params_for(a, bits, granularity);
    let mut out = vec![0.0f32; a.data().len()];
    fake_quantize_into(a.data(), &mut out, a.shape().plane(), &p, &p.scale);
    Ok(ActivationTensor::from_parts_unchecked(a.shape(), out))
}

/// Quantizes `src` (whole samples) with `p` and writes `scale_c * (code -
/// zero_c)`; equal to [`quantize`] then [`dequantize_prescale`] when `scale`
/// is `p.scale()`.
pub(crate) fn fake_quantize_into(src: &[f32], dst: &mut [f32], plane: usize, p: &QuantParams, scale: &[f32]) {
    let zero = p.zero_f32();
    let max_code = p.bits.max_code() as f32;
    simd::fake_quantize_channels(src, dst, plane, (&p.inv_scale, &zero, scale), max_code);
}

/// Straight-through gradient: the upstream gradient, unchanged. Ranges are
/// recomputed from every forward input, so nothing is ever clipped.
pub fn fake_quantize_ste_backward(
    forward_shape: Shape,
    upstream: &ActivationTensor,
) -> Result<ActivationTensor> {
    if upstream.shape() != forward_shape {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {} does not match forward input {forward_shape}",
            upstream.shape()
        )));
    }
    Ok(upstream.clone())
}
