//! Slice kernels shared by the quantizer and the accumulation paths.
//!
//! Each kernel is written once as an `#[inline(always)]` body over fixed-width
//! lane arrays so LLVM can auto-vectorize it, then instantiated three times: a
//! baseline build plus AVX2 and AVX-512 builds (both with FMA) selected at
//! runtime. Accumulation uses `mul_add`, which is correctly rounded on every
//! build, so results never depend on the host CPU; only speed does.

const LANES: usize = 16;

/// Output rows and columns held in registers by the dense accumulation
/// micro-kernel.
const MR: usize = 8;
const NR: usize = 32;

macro_rules! dispatch {
    (
        $(#[$meta:meta])*
        pub(crate) fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? => $body:ident
    ) => {
        $(#[$meta])*
        pub(crate) fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn avx2($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                #[target_feature(enable = "avx512f,fma")]
                unsafe fn avx512($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                if $crate::simd::avx512_enabled() {
                    // SAFETY: the features were detected on this CPU.
                    return unsafe { avx512($($arg),*) };
                }
                if $crate::simd::avx2_enabled() {
                    // SAFETY: the features were detected on this CPU.
                    return unsafe { avx2($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

/// Whether the vectorized kernels run with at least AVX2 and FMA on this host.
pub fn avx2_enabled() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

pub(crate) fn avx512_enabled() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx512f") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[inline(always)]
fn fold_lanes(xs: &[f32], lo: &mut [f32; LANES], hi: &mut [f32; LANES]) {
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for chunk in chunks {
        for i in 0..LANES {
            let v = chunk[i];
            lo[i] = if v < lo[i] { v } else { lo[i] };
            hi[i] = if v > hi[i] { v } else { hi[i] };
        }
    }
    for (i, &v) in tail.iter().enumerate() {
        lo[i] = if v < lo[i] { v } else { lo[i] };
        hi[i] = if v > hi[i] { v } else { hi[i] };
    }
}

#[inline(always)]
fn reduce_lanes(mut lo: [f32; LANES], mut hi: [f32; LANES]) -> (f32, f32) {
    let mut half = LANES / 2;
    while half > 0 {
        for i in 0..half {
            lo[i] = if lo[i + half] < lo[i] { lo[i + half] } else { lo[i] };
            hi[i] = if hi[i + half] > hi[i] { hi[i + half] } else { hi[i] };
        }
        half /= 2;
    }
    (lo[0], hi[0])
}

#[inline(always)]
fn min_max_body(xs: &[f32]) -> (f32, f32) {
    let mut lo = [f32::INFINITY; LANES];
    let mut hi = [f32::NEG_INFINITY; LANES];
    fold_lanes(xs, &mut lo, &mut hi);
    reduce_lanes(lo, hi)
}

dispatch! {
    /// Lane-parallel min and max. Returns `(inf, -inf)` for an empty slice.
    pub(crate) fn min_max(xs: &[f32]) -> (f32, f32) => min_max_body
}

#[inline(always)]
fn segment_min_max_body(data: &[f32], plane: usize, mins: &mut [f32], maxs: &mut [f32]) {
    let channels = mins.len();
    let mut lo = vec![[f32::INFINITY; LANES]; channels];
    let mut hi = vec![[f32::NEG_INFINITY; LANES]; channels];
    for sample in data.chunks_exact(plane * channels) {
        for ((seg, lo), hi) in sample.chunks_exact(plane).zip(&mut lo).zip(&mut hi) {
            fold_lanes(seg, lo, hi);
        }
    }
    for c in 0..channels {
        let (l, h) = reduce_lanes(lo[c], hi[c]);
        if l < mins[c] {
            mins[c] = l;
        }
        if h > maxs[c] {
            maxs[c] = h;
        }
    }
}

dispatch! {
    /// Folds the range of channel `c` of every `channels x plane` sample in
    /// `data` into `mins[c]` and `maxs[c]`.
    pub(crate) fn segment_min_max(data: &[f32], plane: usize, mins: &mut [f32], maxs: &mut [f32]) => segment_min_max_body
}

#[inline(always)]
fn quantize_body(src: &[f32], dst: &mut [u8], inv_scale: f32, zero: f32, max_code: f32) {
    for (d, &x) in dst.iter_mut().zip(src) {
        let t = (x * inv_scale + zero).round_ties_even();
        let t = if t <= 0.0 { 0.0 } else { t };
        let t = if t > max_code { max_code } else { t };
        // t is an integer in [0, 255]; adding 2^23 moves it into the low
        // mantissa bits, which vectorizes where a saturating cast does not.
        *d = (t + 8_388_608.0).to_bits() as u8;
    }
}

#[inline(always)]
fn quantize_channels_body(src: &[f32], dst: &mut [u8], plane: usize, inv_scale: &[f32], zero: &[f32], max_code: f32) {
    let channels = inv_scale.len();
    let mut c = 0;
    for (seg, out) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        quantize_body(seg, out, inv_scale[c], zero[c], max_code);
        c += 1;
        if c == channels {
            c = 0;
        }
    }
}

dispatch! {
    /// Quantizes consecutive `plane`-long segments, cycling through the
    /// per-channel `inv_scale` and `zero`.
    pub(crate) fn quantize_channels(src: &[f32], dst: &mut [u8], plane: usize, inv_scale: &[f32], zero: &[f32], max_code: f32) => quantize_channels_body
}

#[inline(always)]
fn fake_quantize_channels_body(
    src: &[f32],
    dst: &mut [f32],
    plane: usize,
    (inv_scale, zero, scale): (&[f32], &[f32], &[f32]),
    max_code: f32,
) {
    let channels = inv_scale.len();
    let mut c = 0;
    for (seg, out) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        let (inv, z, s) = (inv_scale[c], zero[c], scale[c]);
        for (d, &x) in out.iter_mut().zip(seg) {
            let t = (x * inv + z).round_ties_even();
            let t = if t <= 0.0 { 0.0 } else { t };
            let t = if t > max_code { max_code } else { t };
            *d = s * (t - z);
        }
        c += 1;
        if c == channels {
            c = 0;
        }
    }
}

dispatch! {
    /// Quantize then dequantize without storing codes: per element the same
    /// value as [`quantize_channels`] followed by [`dequantize_channels`].
    pub(crate) fn fake_quantize_channels(src: &[f32], dst: &mut [f32], plane: usize, params: (&[f32], &[f32], &[f32]), max_code: f32) => fake_quantize_channels_body
}

#[inline(always)]
fn dequantize_channels_body(src: &[u8], dst: &mut [f32], plane: usize, scale: &[f32], zero: &[f32]) {
    let channels = scale.len();
    let mut c = 0;
    for (seg, out) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        let (s, z) = (scale[c], zero[c]);
        for (d, &q) in out.iter_mut().zip(seg) {
            *d = s * (q as f32 - z);
        }
        c += 1;
        if c == channels {
            c = 0;
        }
    }
}

dispatch! {
    /// `dst = scale * (code - zero)` over consecutive `plane`-long segments,
    /// cycling through the per-channel `scale` and `zero`.
    pub(crate) fn dequantize_channels(src: &[u8], dst: &mut [f32], plane: usize, scale: &[f32], zero: &[f32]) => dequantize_channels_body
}

#[inline(always)]
fn scale_body(xs: &mut [f32], s: f32) {
    for x in xs {
        *x *= s;
    }
}

dispatch! {
    pub(crate) fn scale_in_place(xs: &mut [f32], s: f32) => scale_body
}

#[inline(always)]
fn tile_full(w: [&[f32]; MR], rows: &[f32], width: usize, col: usize) -> [[f32; NR]; MR] {
    let mut acc = [[0.0f32; NR]; MR];
    for (c, src) in rows.chunks_exact(width).enumerate().take(w[0].len()) {
        let src: &[f32; NR] = src[col..col + NR].try_into().unwrap();
        for r in 0..MR {
            let wc = w[r][c];
            for i in 0..NR {
                acc[r][i] = wc.mul_add(src[i], acc[r][i]);
            }
        }
    }
    acc
}

/// Output rows `ms` and columns `js` of the product, one output at a time.
/// Handles the edges the register tiles do not cover.
#[inline(always)]
fn weighted_rows_edge(
    out: &mut [f32],
    out_stride: usize,
    (weights, channels): (&[f32], usize),
    (rows, width): (&[f32], usize),
    ms: std::ops::Range<usize>,
    js: std::ops::Range<usize>,
) {
    for m in ms {
        let w = &weights[m * channels..(m + 1) * channels];
        for j in js.clone() {
            let mut acc = 0.0f32;
            for (c, &wc) in w.iter().enumerate() {
                acc = wc.mul_add(rows[c * width + j], acc);
            }
            out[m * out_stride + j] = acc;
        }
    }
}

/// `out[m * out_stride + j] = sum_c weights[m * C + c] * rows[c * width + j]`
/// for every output row `m < out_rows` and column `j < width`, where
/// `C = weights.len() / out_rows`. Each sum runs in channel order starting
/// from zero, one fused multiply-add per channel.
#[inline(always)]
fn weighted_rows_body(out: &mut [f32], out_stride: usize, weights: &[f32], out_rows: usize, rows: &[f32], width: usize) {
    let channels = weights.len() / out_rows;
    let rows = &rows[..channels * width];
    let (full_rows, full_cols) = (out_rows / MR * MR, width / NR * NR);
    for col in (0..full_cols).step_by(NR) {
        for m0 in (0..full_rows).step_by(MR) {
            let w: [&[f32]; MR] = std::array::from_fn(|r| &weights[(m0 + r) * channels..(m0 + r + 1) * channels]);
            let acc = tile_full(w, rows, width, col);
            for (r, a) in acc.iter().enumerate() {
                let start = (m0 + r) * out_stride + col;
                out[start..start + NR].copy_from_slice(a);
            }
        }
    }
    weighted_rows_edge(out, out_stride, (weights, channels), (rows, width), 0..out_rows, full_cols..width);
    weighted_rows_edge(out, out_stride, (weights, channels), (rows, width), full_rows..out_rows, 0..full_cols);
}

dispatch! {
    pub(crate) fn weighted_rows_auto(out: &mut [f32], out_stride: usize, weights: &[f32], out_rows: usize, rows: &[f32], width: usize) => weighted_rows_body
}

/// Dense product of a row-major weight matrix with `C` rows of activations;
/// see [`weighted_rows_body`] for the exact contract.
pub(crate) fn weighted_rows(out: &mut [f32], out_stride: usize, weights: &[f32], out_rows: usize, rows: &[f32], width: usize) {
    let channels = weights.len() / out_rows;
    assert!(weights.len() == out_rows * channels && rows.len() >= channels * width);
    assert!(width <= out_stride && out.len() >= (out_rows - 1) * out_stride + width);
    #[cfg(target_arch = "x86_64")]
    if avx512_enabled() {
        // SAFETY: the feature was detected and the asserts above bound every
        // access the kernel makes.
        unsafe { avx512::weighted_rows(out, out_stride, weights, out_rows, rows, width) };
        return;
    }
    weighted_rows_auto(out, out_stride, weights, out_rows, rows, width);
}

/// One output row of the in-loop baseline over one sample:
/// `dst[p] = sum_c weights[c] * (scale_c * (codes[c * plane + p] - zero_c))`,
/// with the scale applied to every term inside the channel loop.
#[inline(always)]
fn inloop_row_body(dst: &mut [f32], weights: &[f32], table: &[(f32, f32)], codes: &[u8]) {
    let plane = dst.len();
    for (p, y) in dst.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (c, (&w, &(scale, zero))) in weights.iter().zip(table).enumerate() {
            let code = codes[c * plane + p] as f32;
            acc = w.mul_add(scale * (code - zero), acc);
        }
        *y = acc;
    }
}

dispatch! {
    pub(crate) fn inloop_row(dst: &mut [f32], weights: &[f32], table: &[(f32, f32)], codes: &[u8]) => inloop_row_body
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    const MR: usize = 8;
    const NR: usize = 32;

    /// Register tile of 8 output rows by 32 columns, sixteen `zmm`
    /// accumulators.
    ///
    /// # Safety
    /// AVX-512F and FMA must be available and the bounds checked by
    /// [`super::weighted_rows`] must hold.
    #[target_feature(enable = "avx512f,fma")]
    pub(super) unsafe fn weighted_rows(
        out: &mut [f32],
        out_stride: usize,
        weights: &[f32],
        out_rows: usize,
        rows: &[f32],
        width: usize,
    ) {
        const V: usize = NR / 16;
        let channels = weights.len() / out_rows;
        let (full_rows, full_cols) = (out_rows / MR * MR, width / NR * NR);
        let (wp, op) = (weights.as_ptr(), out.as_mut_ptr());
        for col in (0..full_cols).step_by(NR) {
            for m0 in (0..full_rows).step_by(MR) {
                let mut acc = [[_mm512_setzero_ps(); V]; MR];
                let mut src = rows.as_ptr().add(col);
                let w = wp.add(m0 * channels);
                for c in 0..channels {
                    let a: [__m512; V] = std::array::from_fn(|v| _mm512_loadu_ps(src.add(16 * v)));
                    for r in 0..MR {
                        let b = _mm512_set1_ps(*w.add(r * channels + c));
                        for v in 0..V {
                            acc[r][v] = _mm512_fmadd_ps(b, a[v], acc[r][v]);
                        }
                    }
                    src = src.add(width);
                }
                for r in 0..MR {
                    let dst = op.add((m0 + r) * out_stride + col);
                    for v in 0..V {
                        _mm512_storeu_ps(dst.add(16 * v), acc[r][v]);
                    }
                }
            }
        }
        let edge = ((weights, channels), (rows, width));
        super::weighted_rows_edge(out, out_stride, edge.0, edge.1, 0..out_rows, full_cols..width);
        super::weighted_rows_edge(out, out_stride, edge.0, edge.1, full_rows..out_rows, 0..full_cols);
    }
}
