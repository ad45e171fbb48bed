//! Distortion and distribution statistics. Sums are accumulated in `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{fake_quantize_ste_forward, BitWidth, Granularity};
use crate::tensor::ActivationTensor;

/// The three activation quantization strategies under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "layerwise")]
    LayerWise,
    #[serde(rename = "inloop")]
    ChannelWiseInLoop,
    #[serde(rename = "prescaled")]
    ChannelWisePrescaled,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::LayerWise,
        Strategy::ChannelWiseInLoop,
        Strategy::ChannelWisePrescaled,
    ];

    pub fn granularity(self) -> Granularity {
        match self {
            Strategy::LayerWise => Granularity::LayerWise,
            Strategy::ChannelWiseInLoop | Strategy::ChannelWisePrescaled => Granularity::ChannelWise,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LayerWise => "layerwise",
            Strategy::ChannelWiseInLoop => "inloop",
            Strategy::ChannelWisePrescaled => "prescaled",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected layerwise, inloop or prescaled)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistortion {
    pub layer: usize,
    pub cosine: f64,
    pub rel_error: f64,
}

/// Per-layer distortion plus the unweighted means over layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub strategy: Strategy,
    pub bits: BitWidth,
    pub cosine: f64,
    pub rel_error: f64,
    pub per_layer: Vec<LayerDistortion>,
}

fn check_lengths(x: &[f32], q: &[f32]) -> Result<()> {
    if x.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            q.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::ShapeMismatch("empty vectors".into()));
    }
    Ok(())
}

/// `x.q / (|x| |q|)`, or 0 when exactly one side is all zeros.
pub fn cosine_similarity(x: &[f32], q: &[f32]) -> Result<f64> {
    check_lengths(x, q)?;
    let (mut dot, mut xx, mut qq) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        xx += a * a;
        qq += b * b;
    }
    match (xx == 0.0, qq == 0.0) {
        (true, true) => Err(Error::ZeroReference),
        (true, false) | (false, true) => Ok(0.0),
        _ => Ok((dot / (xx.sqrt() * qq.sqrt())).clamp(-1.0, 1.0)),
    }
}

/// `|x - q| / |x|`.
pub fn relative_error(x: &[f32], q: &[f32]) -> Result<f64> {
    check_lengths(x, q)?;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        diff += (a - b) * (a - b);
        norm += a * a;
    }
    if norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((diff / norm).sqrt())
}

/// Population skewness `m3 / m2^(3/2)`.
pub fn skewness(x: &[f32]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::ZeroVariance);
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(Error::ZeroVariance);
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0f64, 0.0f64);
    for &v in x {
        let d = v as f64 - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    Ok(m3 / m2.powf(1.5))
}

/// Fake-quantizes every layer under `strategy` and records the distortion of
/// each reconstruction. Both channel-wise strategies reconstruct identically.
pub fn profile_layers(
    layers: &[ActivationTensor],
    bits: BitWidth,
    strategy: Strategy,
) -> Result<DistortionReport> {
    if layers.is_empty() {
        return Err(Error::ShapeMismatch("no layers to profile".into()));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for (layer, a) in layers.iter().enumerate() {
        let recon = fake_quantize_ste_forward(a, bits, strategy.granularity())?;
        per_layer.push(LayerDistortion {
            layer,
            cosine: cosine_similarity(a.data(), recon.data())?,
            rel_error: relative_error(a.data(), recon.data())?,
        });
    }
    let k = per_layer.len() as f64;
    Ok(DistortionReport {
        strategy,
        bits,
        cosine: per_layer.iter().map(|l| l.cosine).sum::<f64>() / k,
        rel_error: per_layer.iter().map(|l| l.rel_error).sum::<f64>() / k,
        per_layer,
    })
}
