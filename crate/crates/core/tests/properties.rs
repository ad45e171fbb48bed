use proptest::prelude::*;

use pquant::accumulate::{max_relative_deviation, quantize_accumulate_layerwise_into, quantize_accumulate_prescaled_into};
use pquant::metrics::profile_layers;
use pquant::quantizer::{
    dequantize_prescale, fake_quantize_ste_backward, fake_quantize_ste_forward, params_channelwise,
    params_layerwise, quantize, QuantParams, DEGENERATE_RANGE,
};
use pquant::{
    accumulate_inloop, accumulate_layerwise, accumulate_prescaled, cosine_similarity, generate,
    relative_error, skewness, ActivationTensor, BitWidth, ChannelWeights, GenSpec, Granularity,
    OutputVector, Shape, Strategy as QuantStrategy,
};

fn shapes() -> impl Strategy<Value = Shape> {
    (1usize..4, 1usize..9, 1usize..6, 1usize..11).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w).unwrap())
}

/// Tensors whose channels have their own offset and magnitude.
fn tensors() -> impl Strategy<Value = ActivationTensor> {
    shapes().prop_flat_map(|s| {
        let channels = prop::collection::vec((-50.0f32..50.0, 0.01f32..100.0), s.c);
        let unit = prop::collection::vec(-1.0f32..1.0, s.numel());
        (Just(s), channels, unit).prop_map(|(s, ch, unit)| {
            let data = unit
                .iter()
                .enumerate()
                .map(|(i, &u)| {
                    let (offset, mag) = ch[(i / s.plane()) % s.c];
                    offset + mag * u
                })
                .collect();
            ActivationTensor::new(s, data).unwrap()
        })
    })
}

fn bit_widths() -> impl Strategy<Value = BitWidth> {
    (2u32..=8).prop_map(|b| BitWidth::new(b).unwrap())
}

fn weights_for(c: usize) -> impl Strategy<Value = ChannelWeights> {
    (1usize..6).prop_flat_map(move |m| {
        prop::collection::vec(-1.0f32..1.0, m * c).prop_map(move |v| ChannelWeights::new(m, c, v).unwrap())
    })
}

fn granularities() -> impl Strategy<Value = Granularity> {
    prop_oneof![Just(Granularity::LayerWise), Just(Granularity::ChannelWise)]
}

fn params(a: &ActivationTensor, bits: BitWidth, g: Granularity) -> QuantParams {
    match g {
        Granularity::LayerWise => params_layerwise(a, bits),
        Granularity::ChannelWise => params_channelwise(&a.decompose(), bits),
    }
}

proptest! {
    #[test]
    fn codes_fit_bit_width(a in tensors(), bits in bit_widths(), g in granularities()) {
        let q = quantize(&a, &params(&a, bits, g)).unwrap();
        prop_assert!(q.codes().iter().all(|&c| c <= bits.max_code()));
    }

    #[test]
    fn reconstruction_within_one_step(a in tensors(), bits in bit_widths(), g in granularities()) {
        let p = params(&a, bits, g);
        let recon = dequantize_prescale(&quantize(&a, &p).unwrap());
        let s = a.shape();
        for (i, (&x, &y)) in a.data().iter().zip(recon.data()).enumerate() {
            let (scale, _, _) = p.channel((i / s.plane()) % s.c);
            prop_assert!((x - y).abs() <= scale, "element {}: {} vs {} with scale {}", i, x, y, scale);
        }
    }

    #[test]
    fn channel_scales_never_exceed_layer_scale(a in tensors(), bits in bit_widths()) {
        let layer = params_layerwise(&a, bits).scale()[0];
        let channel = params_channelwise(&a.decompose(), bits);
        let (mins, maxs) = a.decompose().channel_min_max();
        for (c, &s) in channel.scale().iter().enumerate() {
            if maxs[c] as f64 - mins[c] as f64 > DEGENERATE_RANGE {
                prop_assert!(s <= layer, "channel {}: {} > {}", c, s, layer);
            } else {
                // Constant channels use the fixed step 1.
                prop_assert_eq!(s, 1.0);
            }
        }
    }

    #[test]
    fn requantization_is_idempotent(a in tensors(), bits in bit_widths(), g in granularities()) {
        let p = params(&a, bits, g);
        let q = quantize(&a, &p).unwrap();
        let again = quantize(&dequantize_prescale(&q), &p).unwrap();
        prop_assert_eq!(q.codes(), again.codes());
    }

    #[test]
    fn codes_are_monotone(a in tensors(), bits in bit_widths(), x in -200.0f32..200.0, y in -200.0f32..200.0) {
        let p = params_layerwise(&a, bits);
        let s = Shape::new(1, 1, 1, 2).unwrap();
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let q = quantize(&ActivationTensor::new(s, vec![lo, hi]).unwrap(), &p).unwrap();
        prop_assert!(q.codes()[0] <= q.codes()[1]);
    }

    #[test]
    fn inloop_and_prescaled_agree(
        (a, w) in tensors().prop_flat_map(|a| { let c = a.shape().c; (Just(a), weights_for(c)) }),
        bits in bit_widths(),
    ) {
        let q = quantize(&a, &params_channelwise(&a.decompose(), bits)).unwrap();
        let x = accumulate_inloop(&q, &w).unwrap();
        let y = accumulate_prescaled(&q, &w).unwrap();
        prop_assert_eq!(x.values(), y.values());
        prop_assert!(max_relative_deviation(&x, &y).unwrap() <= 1e-5);
    }

    #[test]
    fn fused_pipelines_match_two_step(
        (a, w) in tensors().prop_flat_map(|a| { let c = a.shape().c; (Just(a), weights_for(c)) }),
        bits in bit_widths(),
    ) {
        let p = params_channelwise(&a.decompose(), bits);
        let mut fused = OutputVector::zeros(0, 0);
        quantize_accumulate_prescaled_into(&a, &p, &w, &mut fused).unwrap();
        prop_assert_eq!(&fused, &accumulate_prescaled(&quantize(&a, &p).unwrap(), &w).unwrap());

        let p = params_layerwise(&a, bits);
        quantize_accumulate_layerwise_into(&a, &p, &w, &mut fused).unwrap();
        prop_assert_eq!(&fused, &accumulate_layerwise(&quantize(&a, &p).unwrap(), &w).unwrap());
    }

    #[test]
    fn ste_forward_is_quantize_then_dequantize(a in tensors(), bits in bit_widths(), g in granularities()) {
        let fwd = fake_quantize_ste_forward(&a, bits, g).unwrap();
        let two_step = dequantize_prescale(&quantize(&a, &params(&a, bits, g)).unwrap());
        let bits_of = |t: &ActivationTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits_of(&fwd), bits_of(&two_step));
        let grad = fake_quantize_ste_backward(a.shape(), &fwd).unwrap();
        prop_assert_eq!(bits_of(&grad), bits_of(&fwd));
    }

    #[test]
    fn cosine_invariances(x in prop::collection::vec(-10.0f32..10.0, 2..64), k in 0.125f32..8.0) {
        prop_assume!(x.iter().any(|&v| v != 0.0));
        prop_assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let scaled: Vec<f32> = x.iter().map(|&v| v * k).collect();
        prop_assert!((cosine_similarity(&x, &scaled).unwrap() - 1.0).abs() < 1e-6);
        let c = cosine_similarity(&x, &x.iter().map(|&v| v + 1.0).collect::<Vec<_>>()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn relative_error_scale_invariance(
        xq in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..64),
        e in -3i32..=3,
    ) {
        let (x, q): (Vec<f32>, Vec<f32>) = xq.into_iter().unzip();
        prop_assume!(x.iter().any(|&v| v != 0.0));
        prop_assert_eq!(relative_error(&x, &x).unwrap(), 0.0);
        // Powers of two scale both vectors exactly.
        let k = 2f32.powi(e);
        let sx: Vec<f32> = x.iter().map(|&v| v * k).collect();
        let sq: Vec<f32> = q.iter().map(|&v| v * k).collect();
        let (r, rs) = (relative_error(&x, &q).unwrap(), relative_error(&sx, &sq).unwrap());
        prop_assert!((r - rs).abs() <= 1e-12 * r.max(1.0));
    }

    #[test]
    fn skewness_invariances(x in prop::collection::vec(-10.0f32..10.0, 3..64), shift in -5.0f32..5.0, e in -3i32..=3) {
        prop_assume!(x.iter().any(|&v| v != x[0]));
        let s = skewness(&x).unwrap();
        let k = 2f32.powi(e);
        let scaled: Vec<f32> = x.iter().map(|&v| v * k).collect();
        prop_assert!((skewness(&scaled).unwrap() - s).abs() < 1e-9);
        let negated: Vec<f32> = x.iter().map(|&v| -v).collect();
        prop_assert!((skewness(&negated).unwrap() + s).abs() < 1e-9);
        // Exact translation in f64, where the mean is subtracted.
        let shifted: Vec<f32> = x.iter().map(|&v| v + shift).collect();
        let exact = x.iter().zip(&shifted).all(|(&a, &b)| b as f64 - a as f64 == shift as f64);
        if exact {
            prop_assert!((skewness(&shifted).unwrap() - s).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), s in shapes(), spread in 1.0f64..32.0, skew in 0.0f64..2.0, nonneg in any::<bool>()) {
        let spec = GenSpec { seed, shape: s, channel_spread: spread, skew, nonneg };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        let bits_of = |t: &ActivationTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits_of(&a), bits_of(&b));
        if nonneg {
            prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn channelwise_distortion_never_worse(seed in any::<u64>(), spread in 8.0f64..32.0, b in 2u32..=8) {
        let mut spec = GenSpec::new(seed, Shape::new(2, 16, 12, 12).unwrap());
        spec.channel_spread = spread;
        spec.skew = 0.5;
        let layers = vec![generate(&spec).unwrap()];
        let bits = BitWidth::new(b).unwrap();
        let lw = profile_layers(&layers, bits, QuantStrategy::LayerWise).unwrap();
        let cw = profile_layers(&layers, bits, QuantStrategy::ChannelWisePrescaled).unwrap();
        prop_assert!(cw.per_layer[0].rel_error <= lw.per_layer[0].rel_error + 1e-9);
        prop_assert_eq!(cw.per_layer.clone(), profile_layers(&layers, bits, QuantStrategy::ChannelWiseInLoop).unwrap().per_layer);
    }
}
