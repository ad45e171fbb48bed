//! Weighted channel accumulation over quantized activations.
//!
//! Weights form a dense `M x C` matrix applied at every position of the
//! decomposed activation (a 1x1 convolution), producing `M x (N*H*W)` outputs
//! in the same column order as [`DecomposedView`](crate::tensor::DecomposedView).
//!
//! All three paths accumulate in `f32`, channel by channel from zero, with one
//! fused multiply-add per channel: `acc = fma(w, s * (q - z), acc)`. The
//! in-loop and pre-scaled paths therefore round identically and agree
//! bit-for-bit; only where the scale multiply happens differs.

use std::hint::black_box;

use crate::error::{Error, Result};
use crate::quantizer::{fake_quantize_into, Granularity, QuantParams, QuantizedActivation};
use crate::simd;
use crate::tensor::{ActivationTensor, Shape};

/// Row-major `M x C` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    values: Vec<f32>,
    out_units: usize,
    in_channels: usize,
}

impl ChannelWeights {
    pub fn new(out_units: usize, in_channels: usize, values: Vec<f32>) -> Result<Self> {
        if out_units == 0 || in_channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "weight matrix {out_units}x{in_channels} is empty"
            )));
        }
        if values.len() != out_units * in_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {out_units}x{in_channels} matrix",
                values.len()
            )));
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(ChannelWeights {
            values,
            out_units,
            in_channels,
        })
    }

    pub fn identity(channels: usize) -> Result<Self> {
        let mut values = vec![0.0; channels * channels];
        for c in 0..channels {
            values[c * channels + c] = 1.0;
        }
        ChannelWeights::new(channels, channels, values)
    }

    pub fn out_units(&self) -> usize {
        self.out_units
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.values[m * self.in_channels..(m + 1) * self.in_channels]
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if self.in_channels != shape.c {
            return Err(Error::ShapeMismatch(format!(
                "weights expect {} channels, activation has {}",
                self.in_channels, shape.c
            )));
        }
        Ok(())
    }
}

/// Row-major `M x (N*H*W)` accumulation result.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputVector {
    values: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl OutputVector {
    /// An all-zero `rows x cols` output, for use with the `_into` functions.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        OutputVector {
            values: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    /// Makes this a `rows x cols` output, reusing the allocation. Contents
    /// are unspecified until overwritten.
    fn reshape(&mut self, rows: usize, cols: usize) {
        self.values.resize(rows * cols, 0.0);
        self.rows = rows;
        self.cols = cols;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, m: usize, j: usize) -> f32 {
        self.values[m * self.cols + j]
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.values[m * self.cols..(m + 1) * self.cols]
    }
}

/// Conventional channel-wise accumulation: the channel scale is applied
/// inside the channel loop at every accumulation step.
///
/// The per-channel `(scale, zero)` table is passed through
/// [`black_box`] once per output row, so the compiler cannot prove it constant
/// across rows and fold the scales into the weights ahead of time; the inner
/// loop is a sequential `f32` reduction, which is never reassociated or
/// vectorized across channels.
pub fn accumulate_inloop(q: &QuantizedActivation, w: &ChannelWeights) -> Result<OutputVector> {
    let mut out = OutputVector::zeros(0, 0);
    accumulate_inloop_into(q, w, &mut out)?;
    Ok(out)
}

/// [`accumulate_inloop`] writing into an existing output.
pub fn accumulate_inloop_into(q: &QuantizedActivation, w: &ChannelWeights, out: &mut OutputVector) -> Result<()> {
    let shape = q.shape();
    w.check(shape)?;
    let (c_count, plane, cols) = (shape.c, shape.plane(), shape.positions());
    let table: Vec<(f32, f32)> = (0..c_count)
        .map(|c| {
            let (s, _, z) = q.params().channel(c);
            (s, z as f32)
        })
        .collect();
    let codes = q.codes();
    out.reshape(w.out_units, cols);
    for n in 0..shape.n {
        let sample = &codes[n * c_count * plane..(n + 1) * c_count * plane];
        for m in 0..w.out_units {
            let weights = w.row(m);
            let table = black_box(&table[..]);
            let dst = &mut out.values[m * cols + n * plane..m * cols + (n + 1) * plane];
            simd::inloop_row(dst, weights, table, sample);
        }
    }
    Ok(())
}

/// Pre-scaled accumulation: every code is dequantized exactly once into
/// scale-free activations, which then feed a dense inner product with no
/// scaling in the loop. Dequantization goes one sample at a time into a
/// scratch buffer that stays in cache for the product.
pub fn accumulate_prescaled(q: &QuantizedActivation, w: &ChannelWeights) -> Result<OutputVector> {
    let mut out = OutputVector::zeros(0, 0);
    accumulate_prescaled_into(q, w, &mut out)?;
    Ok(out)
}

/// [`accumulate_prescaled`] writing into an existing output.
pub fn accumulate_prescaled_into(q: &QuantizedActivation, w: &ChannelWeights, out: &mut OutputVector) -> Result<()> {
    w.check(q.shape())?;
    let (plane, params) = (q.shape().plane(), q.params());
    let zeros = params.zero_f32();
    accumulate_samples(q.shape(), w, out, |n, dst| {
        simd::dequantize_channels(q.sample(n), dst, plane, params.scale(), &zeros);
    });
    Ok(())
}

/// Layer-wise accumulation: `s * sum_c w[m][c] * (q - z)`, with the single
/// scale hoisted out of both loops.
pub fn accumulate_layerwise(q: &QuantizedActivation, w: &ChannelWeights) -> Result<OutputVector> {
    let mut out = OutputVector::zeros(0, 0);
    accumulate_layerwise_into(q, w, &mut out)?;
    Ok(out)
}

/// [`accumulate_layerwise`] writing into an existing output.
pub fn accumulate_layerwise_into(q: &QuantizedActivation, w: &ChannelWeights, out: &mut OutputVector) -> Result<()> {
    if q.params().granularity() != Granularity::LayerWise {
        return Err(Error::Granularity(
            "layer-wise accumulation needs layer-wise parameters".into(),
        ));
    }
    w.check(q.shape())?;
    let (s, _, z) = q.params().channel(0);
    accumulate_samples(q.shape(), w, out, |n, dst| {
        simd::dequantize_channels(q.sample(n), dst, dst.len(), &[1.0], &[z as f32]);
    });
    simd::scale_in_place(&mut out.values, s);
    Ok(())
}

/// Quantizes `a` with channel-wise `p` and runs the pre-scaled accumulation,
/// one sample at a time: each sample is quantized and pre-scaled straight
/// into a cache-resident buffer, without storing codes. Bit-identical to
/// [`accumulate_prescaled_into`] on [`quantize`](crate::quantizer::quantize)`(a, p)`.
pub fn quantize_accumulate_prescaled_into(
    a: &ActivationTensor,
    p: &QuantParams,
    w: &ChannelWeights,
    out: &mut OutputVector,
) -> Result<()> {
    let shape = a.shape();
    p.check_channels(shape.c)?;
    if p.granularity() != Granularity::ChannelWise {
        return Err(Error::Granularity(
            "pre-scaled accumulation needs channel-wise parameters".into(),
        ));
    }
    w.check(shape)?;
    let len = shape.c * shape.plane();
    accumulate_samples(shape, w, out, |n, dst| {
        fake_quantize_into(&a.data()[n * len..(n + 1) * len], dst, shape.plane(), p, p.scale());
    });
    Ok(())
}

/// Layer-wise counterpart of [`quantize_accumulate_prescaled_into`],
/// bit-identical to [`accumulate_layerwise_into`] on the quantized `a`.
pub fn quantize_accumulate_layerwise_into(
    a: &ActivationTensor,
    p: &QuantParams,
    w: &ChannelWeights,
    out: &mut OutputVector,
) -> Result<()> {
    let shape = a.shape();
    p.check_channels(shape.c)?;
    if p.granularity() != Granularity::LayerWise {
        return Err(Error::Granularity(
            "layer-wise accumulation needs layer-wise parameters".into(),
        ));
    }
    w.check(shape)?;
    let len = shape.c * shape.plane();
    accumulate_samples(shape, w, out, |n, dst| {
        fake_quantize_into(&a.data()[n * len..(n + 1) * len], dst, len, p, &[1.0]);
    });
    simd::scale_in_place(&mut out.values, p.scale()[0]);
    Ok(())
}

/// `y[m][j] = sum_c w[m][c] * a[c][j]` over a decomposed activation.
pub fn accumulate_dense(a: &ActivationTensor, w: &ChannelWeights) -> Result<OutputVector> {
    let shape = a.shape();
    w.check(shape)?;
    let (plane, cols) = (shape.plane(), shape.positions());
    let mut out = vec![0.0f32; w.out_units * cols];
    for (n, sample) in a.data().chunks_exact(shape.c * plane).enumerate() {
        simd::weighted_rows(&mut out[n * plane..], cols, &w.values, w.out_units, sample, plane);
    }
    Ok(OutputVector {
        values: out,
        rows: w.out_units,
        cols,
    })
}

/// Dense accumulation over per-sample activations written by
/// `fill(n, sample)`.
fn accumulate_samples(shape: Shape, w: &ChannelWeights, out: &mut OutputVector, mut fill: impl FnMut(usize, &mut [f32])) {
    let (plane, cols) = (shape.plane(), shape.positions());
    out.reshape(w.out_units, cols);
    let mut scratch = vec![0.0f32; shape.c * plane];
    for n in 0..shape.n {
        fill(n, &mut scratch);
        simd::weighted_rows(&mut out.values[n * plane..], cols, &w.values, w.out_units, &scratch, plane);
    }
}

/// Largest elementwise `|a - b| / max(|a|, |b|)`; equal elements count as 0.
pub fn max_relative_deviation(a: &OutputVector, b: &OutputVector) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::ShapeMismatch(format!(
            "outputs {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| relative_deviation(x, y))
        .fold(0.0, f64::max))
}

pub fn relative_deviation(x: f32, y: f32) -> f64 {
    if x == y {
        return 0.0;
    }
    let (x, y) = (x as f64, y as f64);
    (x - y).abs() / x.abs().max(y.abs())
}
