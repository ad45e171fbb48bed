//! Seedable synthetic activations with wide inter-channel spread and a
//! right-skew knob.
//!
//! Generation is a pure function of [`GenSpec`]. Everything is drawn from a
//! single SplitMix64 stream seeded with `spec.seed`:
//!
//! 1. **Channel order.** A Fisher-Yates shuffle `perm` of `0..C`, walking
//!    `i = C-1 .. 1` and swapping `i` with `j = (next() * (i+1)) >> 64`.
//! 2. **Channel scales.** For each channel `c` in order, one uniform `u` and
//!    `scale_c = spread ^ ((perm[c] + u) / C)`. This is log-uniform on
//!    `[1, spread]`, stratified so the channels cover the whole range.
//! 3. **Values,** in NCHW order. Standard normals come from Box-Muller pairs:
//!    `u1 = 1 - U`, `u2 = U`, `r = sqrt(-2 ln u1)`, emitting `r cos(2 pi u2)` then
//!    `r sin(2 pi u2)`. Each normal `z` becomes
//!    `x = scale_c * expm1(skew * z) / skew` (`x = scale_c * z` when
//!    `skew == 0`), clipped at zero when `nonneg` is set, and rounded to `f32`.
//!
//! `U` is `(next() >> 11) * 2^-53`. The skew map is monotone in `z` and is the
//! identity at `skew = 0`; for `skew > 0` it is a shifted log-normal with
//! skewness `(e^(k^2) + 2) sqrt(e^(k^2) - 1)`, increasing in `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ActivationTensor, Shape};

pub const DEFAULT_SEED: u64 = 42;

/// SplitMix64 (Steele, Lea and Flood).
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }
}

struct Normals {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl Normals {
    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.rng.next_f64();
        let u2 = self.rng.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub shape: Shape,
    /// Ratio between the largest and smallest channel scale, `>= 1`.
    pub channel_spread: f64,
    /// Right-skew strength, `>= 0`; zero gives Gaussian values.
    pub skew: f64,
    /// Clip values below zero, as after a ReLU.
    pub nonneg: bool,
}

impl GenSpec {
    pub fn new(seed: u64, shape: Shape) -> Self {
        GenSpec {
            seed,
            shape,
            channel_spread: 1.0,
            skew: 0.0,
            nonneg: false,
        }
    }

    pub fn with_batch(self, n: usize) -> Result<Self> {
        Ok(GenSpec {
            shape: self.shape.with_batch(n)?,
            ..self
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        Shape::new(s.n, s.c, s.h, s.w)?;
        if !(self.channel_spread.is_finite() && self.channel_spread >= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "channel spread {} must be a finite value >= 1",
                self.channel_spread
            )));
        }
        if !(self.skew.is_finite() && self.skew >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "skew {} must be a finite value >= 0",
                self.skew
            )));
        }
        Ok(())
    }

    /// Scales drawn in step 2 of the generation procedure.
    pub fn channel_scales(&self) -> Vec<f64> {
        self.draw_scales(&mut SplitMix64::new(self.seed))
    }

    fn draw_scales(&self, rng: &mut SplitMix64) -> Vec<f64> {
        let c = self.shape.c;
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        perm.iter()
            .map(|&p| {
                let u = (p as f64 + rng.next_f64()) / c as f64;
                self.channel_spread.powf(u)
            })
            .collect()
    }
}

pub fn generate(spec: &GenSpec) -> Result<ActivationTensor> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let scales = spec.draw_scales(&mut rng);
    let mut normals = Normals { rng, spare: None };
    let shape = spec.shape;
    let plane = shape.plane();
    let mut data = Vec::with_capacity(shape.numel());
    for _ in 0..shape.n {
        for &scale in &scales {
            for _ in 0..plane {
                let z = normals.next();
                let t = if spec.skew == 0.0 {
                    z
                } else {
                    (spec.skew * z).exp_m1() / spec.skew
                };
                let mut x = scale * t;
                if spec.nonneg && x < 0.0 {
                    x = 0.0;
                }
                data.push(x as f32);
            }
        }
    }
    ActivationTensor::new(shape, data)
}

pub const RESNET20_BATCH: usize = 16;

/// Activation sites of a CIFAR ResNet-20 at batch 16, seeded from
/// [`DEFAULT_SEED`]. See [`resnet20_preset`].
pub fn resnet20_shape_preset() -> Vec<GenSpec> {
    resnet20_preset(DEFAULT_SEED)
}

/// The 19 conv activation sites of a CIFAR ResNet-20: the 16-channel stem and
/// six convs at 32x32, six 32-channel convs at 16x16 and six 64-channel convs
/// at 8x8. Layer `i` is seeded with `seed + i`; all use spread 16, skew 0.5
/// and ReLU clipping.
pub fn resnet20_preset(seed: u64) -> Vec<GenSpec> {
    let stages = [(16usize, 32usize, 7usize), (32, 16, 6), (64, 8, 6)];
    stages
        .iter()
        .flat_map(|&(c, hw, count)| std::iter::repeat((c, hw)).take(count))
        .enumerate()
        .map(|(i, (c, hw))| GenSpec {
            seed: seed.wrapping_add(i as u64),
            shape: Shape {
                n: RESNET20_BATCH,
                c,
                h: hw,
                w: hw,
            },
            channel_spread: 16.0,
            skew: 0.5,
            nonneg: true,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 1234567, from the reference C implementation.
        let mut rng = SplitMix64::new(1234567);
        let expected = [
            6457827717110365317u64,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn below_stays_in_bounds() {
        let mut rng = SplitMix64::new(3);
        for bound in 1..50 {
            assert!(rng.below(bound) < bound);
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let shape = Shape::new(1, 2, 2, 2).unwrap();
        let mut spec = GenSpec::new(1, shape);
        spec.channel_spread = 0.5;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        spec.channel_spread = 2.0;
        spec.skew = -1.0;
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        spec.skew = 0.0;
        spec.shape.h = 0;
        assert!(matches!(generate(&spec), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn stratified_scales_cover_the_range() {
        let mut spec = GenSpec::new(9, Shape::new(1, 32, 1, 1).unwrap());
        spec.channel_spread = 16.0;
        let scales = spec.channel_scales();
        let lo = scales.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scales.iter().cloned().fold(0.0, f64::max);
        assert!(lo >= 1.0 && hi <= 16.0);
        // min stratum below 16^(1/32), max stratum above 16^(31/32)
        assert!(lo < 16f64.powf(1.0 / 32.0));
        assert!(hi > 16f64.powf(31.0 / 32.0));
    }

    #[test]
    fn nonneg_clips() {
        let mut spec = GenSpec::new(5, Shape::new(2, 3, 4, 4).unwrap());
        spec.nonneg = true;
        spec.skew = 1.0;
        let t = generate(&spec).unwrap();
        assert!(t.data().iter().all(|&v| v >= 0.0));
        assert!(t.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn preset_layout() {
        let p = resnet20_shape_preset();
        assert_eq!(p.len(), 19);
        assert_eq!(p[0].shape.dims(), [16, 16, 32, 32]);
        assert_eq!(p[7].shape.dims(), [16, 32, 16, 16]);
        assert_eq!(p[18].shape.dims(), [16, 64, 8, 8]);
        assert!(p.iter().all(|s| s.shape.n == RESNET20_BATCH));
    }
}
