//! Activation quantization kernels contrasting three strategies:
//!
//! - **layer-wise**: one scale/zero-point for the whole activation tensor;
//! - **channel-wise, in-loop**: one pair per channel, with the channel scale
//!   multiplied in at every step of the weighted accumulation;
//! - **channel-wise, pre-scaled**: per-channel parameters computed in one
//!   vectorized pass, applied once during dequantization so the accumulation
//!   is a plain dense inner product.
//!
//! Alongside the kernels: distortion metrics, a seedable synthetic activation
//! generator, a latency harness and the `pquant` command-line front end.

pub mod accumulate;
pub mod bench;
pub mod cli;
mod error;
pub mod format;
pub mod metrics;
pub mod quantizer;
mod simd;
pub mod synthgen;
pub mod tensor;

pub use accumulate::{
    accumulate_inloop, accumulate_inloop_into, accumulate_layerwise, accumulate_layerwise_into,
    accumulate_prescaled, accumulate_prescaled_into, quantize_accumulate_layerwise_into,
    quantize_accumulate_prescaled_into, ChannelWeights, OutputVector,
};
pub use error::{Error, Result};
pub use metrics::{cosine_similarity, relative_error, skewness, DistortionReport, Strategy};
pub use quantizer::{BitWidth, Granularity, QuantParams, QuantizedActivation};
pub use synthgen::{generate, resnet20_shape_preset, GenSpec};
pub use tensor::{ActivationTensor, DecomposedView, Shape};
