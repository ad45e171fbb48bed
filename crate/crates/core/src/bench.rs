//! Latency harness for the three quantization strategies.
//!
//! One timed iteration runs the full data-conversion pipeline of a strategy
//! over every layer of a workload, followed by one accumulation pass with
//! `C x C` weights:
//!
//! | strategy    | parameters                    | conversion + accumulation       |
//! |-------------|-------------------------------|---------------------------------|
//! | `layerwise` | one global min/max            | quantize, scale-free GEMM, one final rescale |
//! | `inloop`    | per-channel scalar loop       | quantize, scale applied at every accumulation step |
//! | `prescaled` | vectorized per-channel ranges | quantize, vectorized pre-scale, scale-free GEMM |
//!
//! Inputs and weights are generated before timing starts. After timing, each
//! channel-wise path is re-run next to the other and the two outputs must
//! agree within [`EQUIVALENCE_TOLERANCE`].

use std::hint::black_box;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accumulate::{
    accumulate_inloop, accumulate_inloop_into, accumulate_prescaled, max_relative_deviation,
    quantize_accumulate_layerwise_into, quantize_accumulate_prescaled_into, ChannelWeights,
    OutputVector,
};
use crate::error::{Error, Result};
use crate::metrics::Strategy;
use crate::quantizer::{
    params_channelwise, params_channelwise_scalar, params_layerwise, quantize, BitWidth,
};
use crate::simd;
use crate::synthgen::{generate, resnet20_preset, GenSpec, SplitMix64};
use crate::tensor::{ActivationTensor, Shape};

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_ITERS: usize = 50;
pub const MIN_ITERS: usize = 10;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

pub const CSV_HEADER: &str =
    "strategy,n,c,h,w,bits,warmup,iters,median_ns,mean_ns,p10_ns,p90_ns";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub strategy: Strategy,
    /// Shape of the first layer of the workload.
    pub shape: Shape,
    pub bits: BitWidth,
    pub warmup: usize,
    pub iters: usize,
    pub median_ns: u64,
    pub mean_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    /// Layers timed per iteration.
    pub layers: usize,
    /// Whether any kernel ran multi-threaded. The driver and kernels are
    /// single-threaded, so this is always false.
    pub parallel: bool,
    /// Whether the vectorized kernels used AVX2.
    pub avx2: bool,
}

impl BenchRecord {
    pub fn row(&self) -> BenchRow {
        BenchRow {
            strategy: self.strategy,
            n: self.shape.n,
            c: self.shape.c,
            h: self.shape.h,
            w: self.shape.w,
            bits: self.bits.get(),
            warmup: self.warmup,
            iters: self.iters,
            median_ns: self.median_ns,
            mean_ns: self.mean_ns,
            p10_ns: self.p10_ns,
            p90_ns: self.p90_ns,
        }
    }
}

/// One CSV row; field order is the column order of [`CSV_HEADER`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub bits: u32,
    pub warmup: usize,
    pub iters: usize,
    pub median_ns: u64,
    pub mean_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
}

pub struct LayerInput {
    pub input: ActivationTensor,
    pub weights: ChannelWeights,
}

/// Generated inputs and weights, shared by every strategy benchmarked on it.
pub struct Workload {
    pub layers: Vec<LayerInput>,
}

impl Workload {
    pub fn generate(specs: &[GenSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidSpec("empty workload".into()));
        }
        let layers = specs
            .iter()
            .map(|spec| {
                Ok(LayerInput {
                    input: generate(spec)?,
                    weights: layer_weights(spec)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Workload { layers })
    }

    pub fn first_shape(&self) -> Shape {
        self.layers[0].input.shape()
    }
}

/// `C x C` weights uniform on `[-1, 1)`, drawn from `SplitMix64(!seed)`.
pub fn layer_weights(spec: &GenSpec) -> Result<ChannelWeights> {
    let c = spec.shape.c;
    let mut rng = SplitMix64::new(!spec.seed);
    let values = (0..c * c)
        .map(|_| (2.0 * rng.next_f64() - 1.0) as f32)
        .collect();
    ChannelWeights::new(c, c, values)
}

/// Parameters, quantization and one accumulation pass for one layer.
pub fn run_pipeline(
    strategy: Strategy,
    input: &ActivationTensor,
    weights: &ChannelWeights,
    bits: BitWidth,
) -> Result<OutputVector> {
    let mut out = OutputVector::zeros(0, 0);
    run_pipeline_into(strategy, input, weights, bits, &mut out)?;
    Ok(out)
}

/// [`run_pipeline`] writing into an existing output. Timed passes reuse one
/// output per layer, so page faults from fresh allocations stay out of the
/// measurement.
pub fn run_pipeline_into(
    strategy: Strategy,
    input: &ActivationTensor,
    weights: &ChannelWeights,
    bits: BitWidth,
    out: &mut OutputVector,
) -> Result<()> {
    match strategy {
        Strategy::LayerWise => {
            let p = params_layerwise(input, bits);
            quantize_accumulate_layerwise_into(input, &p, weights, out)
        }
        Strategy::ChannelWiseInLoop => {
            let p = params_channelwise_scalar(&input.decompose(), bits);
            accumulate_inloop_into(&quantize(input, &p)?, weights, out)
        }
        Strategy::ChannelWisePrescaled => {
            let p = params_channelwise(&input.decompose(), bits);
            quantize_accumulate_prescaled_into(input, &p, weights, out)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stats {
    pub median_ns: u64,
    pub mean_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
}

/// Nearest-rank percentiles and the truncated mean of `samples`.
pub fn summarize(samples: &[u64]) -> Stats {
    assert!(!samples.is_empty(), "no samples");
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = |q: f64| {
        let idx = (q * sorted.len() as f64).ceil() as usize;
        sorted[idx.clamp(1, sorted.len()) - 1]
    };
    let sum: u128 = sorted.iter().map(|&v| v as u128).sum();
    Stats {
        median_ns: rank(0.5),
        mean_ns: (sum / sorted.len() as u128) as u64,
        p10_ns: rank(0.1),
        p90_ns: rank(0.9),
    }
}

/// Times `strategy` on `workload`: `warmup` untimed passes, then `iters`
/// timed passes over every layer. Channel-wise runs are followed by a check
/// that the in-loop and pre-scaled outputs agree.
pub fn bench_workload(
    workload: &Workload,
    bits: BitWidth,
    strategy: Strategy,
    warmup: usize,
    iters: usize,
) -> Result<BenchRecord> {
    Ok(bench_strategies(workload, bits, &[strategy], warmup, iters)?.remove(0))
}

/// Times several strategies on one workload, interleaved: each warmup and
/// timed round runs every strategy once in turn, so slow drift in machine
/// speed affects all of them alike. Returns one record per strategy, in order.
pub fn bench_strategies(
    workload: &Workload,
    bits: BitWidth,
    strategies: &[Strategy],
    warmup: usize,
    iters: usize,
) -> Result<Vec<BenchRecord>> {
    if iters < MIN_ITERS {
        return Err(Error::InvalidSpec(format!(
            "at least {MIN_ITERS} measured iterations required, got {iters}"
        )));
    }
    let mut outputs: Vec<OutputVector> = workload.layers.iter().map(|_| OutputVector::zeros(0, 0)).collect();
    let mut pass = |strategy| -> Result<()> {
        for (layer, out) in workload.layers.iter().zip(&mut outputs) {
            run_pipeline_into(strategy, black_box(&layer.input), &layer.weights, bits, out)?;
            black_box(&*out);
        }
        Ok(())
    };
    for _ in 0..warmup {
        for &strategy in strategies {
            pass(strategy)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(iters); strategies.len()];
    for _ in 0..iters {
        for (&strategy, samples) in strategies.iter().zip(&mut samples) {
            let start = Instant::now();
            pass(strategy)?;
            samples.push(start.elapsed().as_nanos() as u64);
        }
    }
    if strategies.iter().any(|&s| s != Strategy::LayerWise) {
        verify_channel_paths(workload, bits)?;
    }
    Ok(strategies
        .iter()
        .zip(&samples)
        .map(|(&strategy, samples)| {
            let stats = summarize(samples);
            BenchRecord {
                strategy,
                shape: workload.first_shape(),
                bits,
                warmup,
                iters,
                median_ns: stats.median_ns,
                mean_ns: stats.mean_ns,
                p10_ns: stats.p10_ns,
                p90_ns: stats.p90_ns,
                layers: workload.layers.len(),
                parallel: false,
                avx2: simd::avx2_enabled(),
            }
        })
        .collect())
}

fn verify_channel_paths(workload: &Workload, bits: BitWidth) -> Result<()> {
    for layer in &workload.layers {
        let a = run_pipeline(Strategy::ChannelWiseInLoop, &layer.input, &layer.weights, bits)?;
        let b = run_pipeline(Strategy::ChannelWisePrescaled, &layer.input, &layer.weights, bits)?;
        let deviation = max_relative_deviation(&a, &b)?;
        if deviation > EQUIVALENCE_TOLERANCE {
            return Err(Error::Divergence {
                deviation,
                tolerance: EQUIVALENCE_TOLERANCE,
            });
        }
    }
    Ok(())
}

/// Generates the workload for `specs` and times `strategy` on it.
pub fn bench_quantization(
    specs: &[GenSpec],
    bits: BitWidth,
    strategy: Strategy,
    warmup: usize,
    iters: usize,
) -> Result<BenchRecord> {
    let workload = Workload::generate(specs)?;
    bench_workload(&workload, bits, strategy, warmup, iters)
}

/// Every strategy at every batch size over the ResNet-20 preset. Strategies
/// at one batch size share a single generated workload and are timed
/// interleaved. Records are ordered
/// by strategy, then by position in `batches`.
pub fn bench_sweep(
    batches: &[usize],
    bits: BitWidth,
    seed: u64,
    warmup: usize,
    iters: usize,
) -> Result<Vec<BenchRecord>> {
    if batches.is_empty() {
        return Err(Error::InvalidSpec("empty batch list".into()));
    }
    let mut by_batch = Vec::with_capacity(batches.len());
    for &batch in batches {
        let specs = resnet20_preset(seed)
            .into_iter()
            .map(|s| s.with_batch(batch))
            .collect::<Result<Vec<_>>>()?;
        let workload = Workload::generate(&specs)?;
        by_batch.push(bench_strategies(&workload, bits, &Strategy::ALL, warmup, iters)?);
    }
    let mut out = Vec::with_capacity(batches.len() * Strategy::ALL.len());
    for s in 0..Strategy::ALL.len() {
        for records in &by_batch {
            out.push(records[s].clone());
        }
    }
    Ok(out)
}

/// Outcome of [`equivalence_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

/// Randomized comparison of the in-loop and pre-scaled accumulation paths.
///
/// Each trial draws, from `SplitMix64(seed)`: channels `C` in `1..=64`, batch
/// `N` in `1..=4`, width `W` in `1..=64`, height `H` so that `N*H*W <= 4096`,
/// bits in `2..=8`, output units `M` in `1..=16`, then a generator spec
/// (spread in `[1, 16)`, skew in `[0, 1)`, optional clipping) and `M x C`
/// weights on `[-1, 1)`.
pub fn equivalence_check(trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rng = SplitMix64::new(seed);
    let mut max_deviation = 0.0f64;
    for _ in 0..trials {
        let c = 1 + rng.below(64);
        let n = 1 + rng.below(4);
        let w = 1 + rng.below(64);
        let h = 1 + rng.below((4096 / (n * w)).max(1));
        let bits = BitWidth::new(2 + rng.below(7) as u32)?;
        let m = 1 + rng.below(16);
        let spec = GenSpec {
            seed: rng.next_u64(),
            shape: Shape::new(n, c, h, w)?,
            channel_spread: 1.0 + 15.0 * rng.next_f64(),
            skew: rng.next_f64(),
            nonneg: rng.below(2) == 1,
        };
        let weights = ChannelWeights::new(
            m,
            c,
            (0..m * c).map(|_| (2.0 * rng.next_f64() - 1.0) as f32).collect(),
        )?;
        let input = generate(&spec)?;
        let q = quantize(&input, &params_channelwise(&input.decompose(), bits))?;
        let a = accumulate_inloop(&q, &weights)?;
        let b = accumulate_prescaled(&q, &weights)?;
        max_deviation = max_deviation.max(max_relative_deviation(&a, &b)?);
    }
    Ok(EquivalenceReport {
        trials,
        max_deviation,
        tolerance: EQUIVALENCE_TOLERANCE,
    })
}

pub fn write_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))
            .map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_csv`]. Lines starting with `#` are skipped.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let header: Vec<String> = r
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
