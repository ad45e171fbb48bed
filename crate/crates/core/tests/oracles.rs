//! Kernel outputs checked against straightforward reference computations
//! written here, independently of the library's fast paths.

use pquant::accumulate::{accumulate_dense, max_relative_deviation};
use pquant::quantizer::{
    dequantize_prescale, params_channelwise, params_channelwise_scalar, params_layerwise, quantize,
};
use pquant::synthgen::{generate, SplitMix64, DEFAULT_SEED};
use pquant::{
    accumulate_inloop, accumulate_layerwise, accumulate_prescaled, skewness, ActivationTensor,
    BitWidth, ChannelWeights, GenSpec, Shape,
};

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

fn bits(b: u32) -> BitWidth {
    BitWidth::new(b).unwrap()
}

fn random_tensor(seed: u64, s: Shape, spread: f64) -> ActivationTensor {
    let mut spec = GenSpec::new(seed, s);
    spec.channel_spread = spread;
    spec.skew = 0.3;
    generate(&spec).unwrap()
}

fn random_weights(seed: u64, m: usize, c: usize) -> ChannelWeights {
    let mut rng = SplitMix64::new(seed);
    let v = (0..m * c).map(|_| (2.0 * rng.next_f64() - 1.0) as f32).collect();
    ChannelWeights::new(m, c, v).unwrap()
}

#[test]
fn decompose_matches_index_formula() {
    let s = shape(2, 3, 4, 4);
    let data: Vec<f32> = (0..s.numel()).map(|i| i as f32).collect();
    let a = ActivationTensor::new(s, data).unwrap();
    let v = a.decompose();
    assert_eq!((v.rows(), v.cols()), (3, 32));
    for c in 0..3 {
        let row = v.row_vec(c);
        for n in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    let j = n * 16 + h * 4 + w;
                    let flat = ((n * 3 + c) * 4 + h) * 4 + w;
                    assert_eq!(v.get(c, j), flat as f32);
                    assert_eq!(row[j], flat as f32);
                }
            }
        }
    }
}

#[test]
fn channel_ranges_match_scalar_scan() {
    let a = random_tensor(3, shape(4, 64, 16, 16), 16.0);
    let v = a.decompose();
    let (mins, maxs) = v.channel_min_max();
    for c in 0..64 {
        let row = v.row_vec(c);
        let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((mins[c], maxs[c]), (lo, hi), "channel {c}");
    }
    let all = a.data().iter().cloned();
    let lo = all.clone().fold(f32::INFINITY, f32::min);
    let hi = all.fold(f32::NEG_INFINITY, f32::max);
    assert_eq!(a.min_max(), (lo, hi));
}

#[test]
fn channel_params_match_single_channel_layerwise() {
    let a = random_tensor(5, shape(3, 10, 5, 7), 8.0);
    let v = a.decompose();
    for b in 2..=8 {
        let p = params_channelwise(&v, bits(b));
        assert_eq!(p, params_channelwise_scalar(&v, bits(b)));
        for c in 0..10 {
            let row = ActivationTensor::new(shape(1, 1, 1, v.cols()), v.row_vec(c)).unwrap();
            let single = params_layerwise(&row, bits(b));
            let (s, inv, z) = p.channel(c);
            assert_eq!((s, inv, z), single.channel(0), "bits {b} channel {c}");
        }
    }
}

#[test]
fn quantize_matches_scalar_formula() {
    let a = random_tensor(8, shape(2, 6, 3, 9), 16.0);
    let p = params_channelwise(&a.decompose(), bits(4));
    let q = quantize(&a, &p).unwrap();
    let s = a.shape();
    for (i, (&x, &code)) in a.data().iter().zip(q.codes()).enumerate() {
        let c = (i / s.plane()) % s.c;
        let (_, inv, z) = p.channel(c);
        let expected = (x * inv + z as f32).round_ties_even().clamp(0.0, 15.0) as u8;
        assert_eq!(code, expected, "element {i}");
    }
}

/// Triple loop over outputs, positions and channels, applying the scale at
/// every step with one fused multiply-add per channel.
fn accumulate_oracle(
    q: &pquant::QuantizedActivation,
    w: &ChannelWeights,
) -> Vec<f32> {
    let s = q.shape();
    let p = q.params();
    let cols = s.positions();
    let mut out = vec![0.0f32; w.out_units() * cols];
    for m in 0..w.out_units() {
        for j in 0..cols {
            let (n, pos) = (j / s.plane(), j % s.plane());
            let mut acc = 0.0f32;
            for c in 0..s.c {
                let (scale, _, z) = p.channel(c);
                let code = q.codes()[(n * s.c + c) * s.plane() + pos] as f32;
                acc = w.row(m)[c].mul_add(scale * (code - z as f32), acc);
            }
            out[m * cols + j] = acc;
        }
    }
    out
}

/// The same sums in f64, with a bound on the f32 rounding error.
fn accumulate_f64(q: &pquant::QuantizedActivation, w: &ChannelWeights) -> Vec<(f64, f64)> {
    let s = q.shape();
    let p = q.params();
    let cols = s.positions();
    let mut out = Vec::with_capacity(w.out_units() * cols);
    for m in 0..w.out_units() {
        for j in 0..cols {
            let (n, pos) = (j / s.plane(), j % s.plane());
            let (mut sum, mut mag) = (0.0f64, 0.0f64);
            for c in 0..s.c {
                let (scale, _, z) = p.channel(c);
                let code = q.codes()[(n * s.c + c) * s.plane() + pos] as f64;
                let term = w.row(m)[c] as f64 * scale as f64 * (code - z as f64);
                sum += term;
                mag += term.abs();
            }
            out.push((sum, mag * (s.c as f64 + 2.0) * f32::EPSILON as f64));
        }
    }
    out
}

#[test]
fn accumulation_paths_match_oracles() {
    let cases = [(1usize, 1usize, 1usize, 1usize, 1usize), (2, 5, 3, 7, 4), (3, 17, 4, 9, 9), (1, 40, 6, 6, 33)];
    for (i, &(n, c, h, w, m)) in cases.iter().enumerate() {
        let a = random_tensor(20 + i as u64, shape(n, c, h, w), 16.0);
        let weights = random_weights(i as u64, m, c);
        let q = quantize(&a, &params_channelwise(&a.decompose(), bits(3))).unwrap();
        let oracle = accumulate_oracle(&q, &weights);
        let inloop = accumulate_inloop(&q, &weights).unwrap();
        let pre = accumulate_prescaled(&q, &weights).unwrap();
        assert_eq!(inloop.values(), &oracle[..], "case {i}");
        assert_eq!(pre.values(), &oracle[..], "case {i}");
        assert_eq!((pre.rows(), pre.cols()), (m, n * h * w));
        for (k, (&y, &(exact, bound))) in pre.values().iter().zip(&accumulate_f64(&q, &weights)).enumerate() {
            assert!((y as f64 - exact).abs() <= bound, "case {i} element {k}: {y} vs {exact}");
        }
        let dense = accumulate_dense(&dequantize_prescale(&q), &weights).unwrap();
        assert_eq!(dense.values(), &oracle[..]);
    }
}

#[test]
fn layerwise_path_matches_f64_sum() {
    let a = random_tensor(31, shape(2, 12, 5, 5), 4.0);
    let weights = random_weights(9, 6, 12);
    let q = quantize(&a, &params_layerwise(&a, bits(5))).unwrap();
    let y = accumulate_layerwise(&q, &weights).unwrap();
    for (k, (&v, &(exact, bound))) in y.values().iter().zip(&accumulate_f64(&q, &weights)).enumerate() {
        assert!((v as f64 - exact).abs() <= bound, "element {k}: {v} vs {exact}");
    }
    let pre = accumulate_prescaled(&q, &weights).unwrap();
    assert!(max_relative_deviation(&y, &pre).unwrap() < 1e-5);
}

#[test]
fn generated_channel_ranges_follow_spread() {
    // Ratio of the widest to the narrowest empirical channel range.
    let mut spec = GenSpec::new(DEFAULT_SEED, shape(1, 32, 100, 100));
    spec.channel_spread = 16.0;
    let a = generate(&spec).unwrap();
    let (mins, maxs) = a.decompose().channel_min_max();
    let ranges: Vec<f64> = mins.iter().zip(&maxs).map(|(&l, &h)| h as f64 - l as f64).collect();
    let lo = ranges.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ranges.iter().cloned().fold(0.0, f64::max);
    let ratio = hi / lo;
    assert!((8.0..=16.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn gaussian_generator_is_symmetric() {
    let a = generate(&GenSpec::new(77, shape(1, 4, 250, 250))).unwrap();
    let s = skewness(a.data()).unwrap();
    assert!(s.abs() <= 0.1, "skewness {s}");
}

#[test]
fn skew_knob_is_monotone() {
    let mut prev = f64::NEG_INFINITY;
    for k in [0.0, 0.25, 0.5, 1.0] {
        let mut spec = GenSpec::new(13, shape(1, 4, 250, 250));
        spec.skew = k;
        let s = skewness(generate(&spec).unwrap().data()).unwrap();
        assert!(s + 0.05 >= prev, "skew {k}: {s} after {prev}");
        prev = s;
    }
    // Population value at k = 0.5: (e^0.25 + 2) sqrt(e^0.25 - 1).
    let mut spec = GenSpec::new(13, shape(1, 1, 1000, 1000));
    spec.skew = 0.5;
    let s = skewness(generate(&spec).unwrap().data()).unwrap();
    let e = 0.25f64.exp();
    assert!((s - (e + 2.0) * (e - 1.0).sqrt()).abs() < 0.1, "skewness {s}");
}
