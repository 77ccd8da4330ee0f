//! Dense real tensors and the handful of linear-algebra primitives the
//! transformer and tracking models are built from.
//!
//! Two layouts are used throughout:
//!
//! * [`FeatureMap`] stores a `C×H×W` patch channel-major
//!   (`data[c·H·W + h·W + w]`).
//! * [`EmbeddingMatrix`] stores `N×C` row-major, one row per spatial
//!   location. Several patches are stacked block by block.
//!
//! Conversions between the two only happen through
//! [`reshape_to_embeddings`], [`concat_embeddings`] and
//! [`FeatureMap::from_embeddings`].

use crate::error::{Error, Result};

/// Guard used by both normalizations when a row or block has zero norm.
pub const NORM_EPS: f64 = 1e-12;

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// A `C×H×W` feature patch in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "feature map extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        check_finite(&data, "feature map")?;
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// The `C`-vector at spatial location `(h, w)`.
    pub fn embedding_at(&self, h: usize, w: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, h, w)).collect()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn scaled(&self, alpha: f64) -> Result<FeatureMap> {
        FeatureMap::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    /// Inverse of [`reshape_to_embeddings`]: `rows` must equal `height·width`.
    pub fn from_embeddings(x: &EmbeddingMatrix, height: usize, width: usize) -> Result<Self> {
        if x.rows != height * width {
            return Err(Error::dim(format!(
                "{} embedding rows cannot form a {height}x{width} map",
                x.rows
            )));
        }
        let hw = height * width;
        let mut data = vec![0.0; x.cols * hw];
        for r in 0..hw {
            let row = x.row(r);
            for (c, v) in row.iter().enumerate() {
                data[c * hw + r] = *v;
            }
        }
        FeatureMap::new(x.cols, height, width, data)
    }
}

/// `N×C` row-major matrix; every row is one spatial embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!(
                "matrix extents must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "embedding matrix")?;
        Ok(EmbeddingMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(n, n, data)
    }

    /// Internal constructor for results of operations on already-validated
    /// inputs. Still rejects non-finite output.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(data.len(), rows * cols);
        check_finite(&data, "operation result")?;
        Ok(EmbeddingMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_norm(&self, r: usize) -> f64 {
        self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm of rows `[start, start + len)`.
    pub fn block_norm(&self, start: usize, len: usize) -> f64 {
        self.data[start * self.cols..(start + len) * self.cols]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of rows `[start, start + len)`.
    pub fn block(&self, start: usize, len: usize) -> Result<EmbeddingMatrix> {
        if len == 0 || start + len > self.rows {
            return Err(Error::dim(format!(
                "row block {start}..{} outside {} rows",
                start + len,
                self.rows
            )));
        }
        Ok(EmbeddingMatrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn scaled(&self, alpha: f64) -> Result<EmbeddingMatrix> {
        Self::from_parts(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }

    /// Element-wise sum of two equally shaped matrices.
    pub fn add(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Self::from_parts(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// Multiplies every row `r` by `weights[r]` (broadcast over columns).
    pub fn scale_rows(&self, weights: &[f64]) -> Result<EmbeddingMatrix> {
        if weights.len() != self.rows {
            return Err(Error::dim(format!(
                "{} row weights for {} rows",
                weights.len(),
                self.rows
            )));
        }
        let mut data = self.data.clone();
        for (r, w) in weights.iter().enumerate() {
            for v in &mut data[r * self.cols..(r + 1) * self.cols] {
                *v *= w;
            }
        }
        Self::from_parts(self.rows, self.cols, data)
    }

    /// Stacks matrices with equal column counts top to bottom.
    pub fn vstack(parts: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("nothing to stack"))?;
        if parts.iter().any(|p| p.cols != first.cols) {
            return Err(Error::dim("stacked matrices differ in column count"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self::from_parts(rows, first.cols, data)
    }
}

/// A per-location weight vector with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector {
    data: Vec<f64>,
}

impl MaskVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::dim("mask must be non-empty"));
        }
        check_finite(&data, "mask")?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("mask value {v} outside [0, 1]")));
        }
        Ok(MaskVector { data })
    }

    pub fn filled(len: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn concat(parts: &[MaskVector]) -> Result<MaskVector> {
        MaskVector::new(parts.iter().flat_map(|m| m.data.iter().copied()).collect())
    }
}

/// Flattens a patch to `H·W` rows of `C` channels; row index is `h·W + w`.
pub fn reshape_to_embeddings(fm: &FeatureMap) -> EmbeddingMatrix {
    let hw = fm.spatial_len();
    let c = fm.channels;
    let mut data = vec![0.0; hw * c];
    for ch in 0..c {
        let plane = &fm.data[ch * hw..(ch + 1) * hw];
        for (r, v) in plane.iter().enumerate() {
            data[r * c + ch] = *v;
        }
    }
    EmbeddingMatrix {
        rows: hw,
        cols: c,
        data,
    }
}

/// Flattens an ensemble of equally shaped patches, template by template.
pub fn concat_embeddings(maps: &[FeatureMap]) -> Result<EmbeddingMatrix> {
    let first = maps.first().ok_or(Error::EmptyEnsemble)?;
    if let Some(bad) = maps.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::dim(format!(
            "template {}x{}x{} differs from {}x{}x{}",
            bad.channels, bad.height, bad.width, first.channels, first.height, first.width
        )));
    }
    let parts: Vec<_> = maps.iter().map(reshape_to_embeddings).collect();
    EmbeddingMatrix::vstack(&parts)
}

/// Standard product `A·B` with a fixed accumulation order over the inner index.
pub fn matmul(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    EmbeddingMatrix::from_parts(a.rows, b.cols, out)
}

/// `A·Bᵀ`: dot products between rows of `a` and rows of `b`.
pub fn matmul_transposed(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.cols != b.cols {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by transpose of {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.push(dot(ar, b.row(j)));
        }
    }
    EmbeddingMatrix::from_parts(a.rows, b.rows, out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Divides every row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows(x: &EmbeddingMatrix, eps: f64) -> EmbeddingMatrix {
    let mut data = x.data.clone();
    for row in data.chunks_mut(x.cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    EmbeddingMatrix {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

/// Jointly ℓ2-normalizes each block of `block_rows` consecutive rows (one
/// image patch) by the block's Frobenius norm, floored at `eps`.
///
/// `block_rows == x.rows()` normalizes the whole matrix as one patch.
pub fn instance_normalize(
    x: &EmbeddingMatrix,
    block_rows: usize,
    eps: f64,
) -> Result<EmbeddingMatrix> {
    if block_rows == 0 || !x.rows.is_multiple_of(block_rows) {
        return Err(Error::dim(format!(
            "{} rows do not split into patches of {block_rows}",
            x.rows
        )));
    }
    let mut data = x.data.clone();
    for block in data.chunks_mut(block_rows * x.cols) {
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in block.iter_mut() {
            *v /= norm;
        }
    }
    EmbeddingMatrix::from_parts(x.rows, x.cols, data)
}
