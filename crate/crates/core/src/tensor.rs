//! Dense NCHW activation tensors and the channel-major decomposition.
//!
//! A [`DecomposedView`] presents the tensor as a `C x (N*H*W)` matrix. Column
//! `j` of row `c` is the `j`-th value of channel `c` in batch-major, then
//! row-major spatial order: `j = n*H*W + h*W + w`. Batch statistics are
//! therefore gathered per channel across every sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        if shape.dims().contains(&0) {
            return Err(Error::InvalidShape(shape.dims()));
        }
        Ok(shape)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one channel plane of one sample.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Columns of the decomposed view, `N*H*W`.
    pub fn positions(&self) -> usize {
        self.n * self.plane()
    }

    pub fn with_batch(self, n: usize) -> Result<Self> {
        Shape::new(n, self.c, self.h, self.w)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Immutable NCHW activation map with finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor {
    data: Vec<f32>,
    shape: Shape,
}

impl ActivationTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        Shape::new(shape.n, shape.c, shape.h, shape.w)?;
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                len: data.len(),
                expected: shape.numel(),
                shape: shape.dims(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(ActivationTensor { data, shape })
    }

    pub fn zeros(shape: Shape) -> Self {
        ActivationTensor {
            data: vec![0.0; shape.numel()],
            shape,
        }
    }

    /// Rebuilds a tensor from channel rows laid out as in [`DecomposedView`].
    pub fn from_channel_rows(shape: Shape, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.len() != shape.c {
            return Err(Error::ShapeMismatch(format!(
                "{} rows for {} channels",
                rows.len(),
                shape.c
            )));
        }
        let plane = shape.plane();
        let mut data = vec![0.0; shape.numel()];
        for (c, row) in rows.iter().enumerate() {
            if row.len() != shape.positions() {
                return Err(Error::ShapeMismatch(format!(
                    "row {c} has {} values, expected {}",
                    row.len(),
                    shape.positions()
                )));
            }
            for (n, segment) in row.chunks_exact(plane).enumerate() {
                let start = (n * shape.c + c) * plane;
                data[start..start + plane].copy_from_slice(segment);
            }
        }
        ActivationTensor::new(shape, data)
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        ActivationTensor { data, shape }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn decompose(&self) -> DecomposedView<'_> {
        DecomposedView { tensor: self }
    }

    /// Global `(min, max)` over every element.
    pub fn min_max(&self) -> (f32, f32) {
        simd::min_max(&self.data)
    }
}

/// Borrowed `C x (N*H*W)` reindexing of an [`ActivationTensor`].
#[derive(Clone, Copy, Debug)]
pub struct DecomposedView<'a> {
    tensor: &'a ActivationTensor,
}

impl<'a> DecomposedView<'a> {
    pub fn rows(&self) -> usize {
        self.tensor.shape.c
    }

    pub fn cols(&self) -> usize {
        self.tensor.shape.positions()
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape
    }

    pub fn tensor(&self) -> &'a ActivationTensor {
        self.tensor
    }

    /// Value at channel `c`, column `j`. Panics when out of bounds.
    pub fn get(&self, c: usize, j: usize) -> f32 {
        let s = self.tensor.shape;
        assert!(c < s.c && j < s.positions(), "index ({c}, {j}) out of bounds");
        let plane = s.plane();
        let (n, p) = (j / plane, j % plane);
        self.tensor.data[(n * s.c + c) * plane + p]
    }

    /// The contiguous `H*W` segments making up row `c`, one per sample.
    pub fn segments(&self, c: usize) -> impl Iterator<Item = &'a [f32]> + 'a {
        let s = self.tensor.shape;
        assert!(c < s.c, "channel {c} out of bounds");
        let plane = s.plane();
        let data = &self.tensor.data;
        (0..s.n).map(move |n| {
            let start = (n * s.c + c) * plane;
            &data[start..start + plane]
        })
    }

    pub fn row(&self, c: usize) -> impl Iterator<Item = f32> + 'a {
        self.segments(c).flat_map(|seg| seg.iter().copied())
    }

    pub fn row_vec(&self, c: usize) -> Vec<f32> {
        self.row(c).collect()
    }

    /// Per-channel `(min, max)` vectors, one lane-parallel pass per segment.
    pub fn channel_min_max(&self) -> (Vec<f32>, Vec<f32>) {
        let s = self.tensor.shape;
        let mut mins = vec![f32::INFINITY; s.c];
        let mut maxs = vec![f32::NEG_INFINITY; s.c];
        simd::segment_min_max(&self.tensor.data, s.plane(), &mut mins, &mut maxs);
        (mins, maxs)
    }
}

/// Channel-major view of `a`.
pub fn decompose(a: &ActivationTensor) -> DecomposedView<'_> {
    a.decompose()
}

/// Per-channel minima and maxima of a decomposed view.
pub fn channel_min_max(v: &DecomposedView<'_>) -> (Vec<f32>, Vec<f32>) {
    v.channel_min_max()
}
