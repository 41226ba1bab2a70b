//! INT8 operands, INT32 accumulators and the exact tiled GEMM used as the
//! golden reference for every fault experiment.

use std::ops::Range;

use crate::error::{Error, Result};

/// Largest inner dimension a single GEMM may use. With INT8 operands the
/// worst-case accumulator magnitude is `128 * 128 * 4096 = 2^26`, so INT32
/// accumulation never wraps below this bound.
pub const MAX_INNER_DIM: usize = 4096;

/// Row-major INT8 matrix with a per-tensor dequantization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    scale: f64,
}

impl QuantTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>, scale: f64) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidScale(scale));
        }
        Ok(Self {
            rows,
            cols,
            data,
            scale,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    /// Copy of the rows in `range`, keeping the scale.
    pub fn row_slice(&self, range: Range<usize>) -> QuantTensor {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        QuantTensor {
            rows: range.len(),
            cols: self.cols,
            data,
            scale: self.scale,
        }
    }

    /// Copy of the columns in `range`, keeping the scale.
    pub fn col_slice(&self, range: Range<usize>) -> QuantTensor {
        let mut data = Vec::with_capacity(self.rows * range.len());
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + range.start..r * self.cols + range.end]);
        }
        QuantTensor {
            rows: self.rows,
            cols: range.len(),
            data,
            scale: self.scale,
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&q| q as f64 * self.scale).collect()
    }
}

/// Row-major INT32 matrix: a GEMM result and the target of fault injection.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccTensor {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl AccTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: i32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn same_shape(&self, other: &AccTensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn check_index(&self, row: usize, col: usize) -> Result<()> {
        if row < self.rows && col < self.cols {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    /// Size in bytes when stored as 4-byte words.
    pub fn byte_len(&self) -> u64 {
        4 * self.data.len() as u64
    }
}

/// Edge lengths of one systolic-array tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileSpec {
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl TileSpec {
    pub fn new(tile_rows: usize, tile_cols: usize) -> Result<Self> {
        if tile_rows == 0 || tile_cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "tile edges must be positive, got {tile_rows}x{tile_cols}"
            )));
        }
        Ok(Self {
            tile_rows,
            tile_cols,
        })
    }

    pub fn square(edge: usize) -> Result<Self> {
        Self::new(edge, edge)
    }
}

/// Half-open coordinate ranges of one tile within a matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TileRange {
    pub tile_row: usize,
    pub tile_col: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl TileRange {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.contains(&row) && self.cols.contains(&col)
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partitions a `rows x cols` matrix into tiles in row-major tile order.
/// Edge tiles are truncated to the matrix bounds.
pub fn tile_partition(rows: usize, cols: usize, tiles: TileSpec) -> Vec<TileRange> {
    let mut out = Vec::new();
    for (tile_row, r0) in (0..rows).step_by(tiles.tile_rows).enumerate() {
        for (tile_col, c0) in (0..cols).step_by(tiles.tile_cols).enumerate() {
            out.push(TileRange {
                tile_row,
                tile_col,
                rows: r0..(r0 + tiles.tile_rows).min(rows),
                cols: c0..(c0 + tiles.tile_cols).min(cols),
            });
        }
    }
    out
}

/// Per-tensor symmetric scale mapping the largest magnitude onto 127.
/// All-zero input gets scale 1.
pub fn absmax_scale(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 && max.is_finite() {
        max / 127.0
    } else {
        1.0
    }
}

/// Quantizes a row-major real matrix with round-half-away-from-zero and
/// saturation to `[-128, 127]`.
pub fn quantize(rows: usize, cols: usize, values: &[f64], scale: f64) -> Result<QuantTensor> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{rows}x{cols} matrix needs {} elements, got {}",
            rows * cols,
            values.len()
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidScale(scale));
    }
    let mut data = Vec::with_capacity(values.len());
    for (idx, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: idx / cols.max(1),
                col: idx % cols.max(1),
                value: v,
            });
        }
        // f64::round is half-away-from-zero
        let q = (v / scale).round().clamp(-128.0, 127.0);
        data.push(q as i8);
    }
    QuantTensor::new(rows, cols, data, scale)
}

fn check_gemm_dims(a: &QuantTensor, b: &QuantTensor) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.cols > MAX_INNER_DIM {
        return Err(Error::InnerDimTooLarge(a.cols));
    }
    Ok(())
}

/// Exact INT8 x INT8 -> INT32 product.
pub fn gemm_exact(a: &QuantTensor, b: &QuantTensor) -> Result<AccTensor> {
    check_gemm_dims(a, b)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a.data[i * k + kk] as i32;
            if av == 0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (acc, &bv) in row.iter_mut().zip(brow) {
                *acc += av * bv as i32;
            }
        }
    }
    AccTensor::new(m, n, out)
}

/// Same product computed tile by tile over the output, the way a systolic
/// array of edge `tiles` would stream it. Bit-identical to [`gemm_exact`].
pub fn gemm_tiled(a: &QuantTensor, b: &QuantTensor, tiles: TileSpec) -> Result<AccTensor> {
    check_gemm_dims(a, b)?;
    let (k, n) = (a.cols, b.cols);
    let mut out = AccTensor::zeros(a.rows, n);
    for tile in tile_partition(a.rows, n, tiles) {
        for i in tile.rows.clone() {
            for j in tile.cols.clone() {
                let mut acc = 0i32;
                for kk in 0..k {
                    acc += a.data[i * k + kk] as i32 * b.data[kk * n + j] as i32;
                }
                out.data[i * n + j] = acc;
            }
        }
    }
    Ok(out)
}

/// MAC count of an `m x k` by `k x n` product.
pub fn gemm_macs(m: usize, k: usize, n: usize) -> u64 {
    (m * k * n) as u64
}
