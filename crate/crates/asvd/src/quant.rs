//! Round-to-nearest integer quantization for factor matrices.
//!
//! Symmetric per-output-row scheme: each row is divided by its own scale
//! and rounded to a signed integer grid. How the singular values were
//! absorbed into the factors changes the row magnitudes and therefore the
//! grids, so quantization quality is where absorption choices show up.

use crate::decompose::{weighted_frob, DecomposedLayer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const SUPPORTED_BITS: [u32; 3] = [4, 6, 8];

#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    pub data: Vec<i8>,
    pub rows: usize,
    pub cols: usize,
    /// One scale per output row.
    pub scales: Vec<f64>,
    pub bits: u32,
}

impl QuantizedTensor {
    pub fn qmax(&self) -> i8 {
        qmax_for(self.bits)
    }
}

fn qmax_for(bits: u32) -> i8 {
    ((1i32 << (bits - 1)) - 1) as i8
}

/// Quantize with one symmetric grid per row. A zero row keeps scale 1 so
/// dequantization stays well defined.
pub fn rtn_quantize(w: &Matrix, bits: u32) -> Result<QuantizedTensor> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::invalid(format!(
            "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
        )));
    }
    let qmax = qmax_for(bits);
    let (rows, cols) = w.shape();
    let mut data = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = w.row(i);
        let max_abs = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / qmax as f64 };
        scales.push(scale);
        for &v in row {
            // Rounding after the division can land one step past qmax.
            let q = (v / scale).round().clamp(-(qmax as f64), qmax as f64);
            data.push(q as i8);
        }
    }
    Ok(QuantizedTensor { data, rows, cols, scales, bits })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |i, j| q.data[i * q.cols + j] as f64 * q.scales[i])
}

/// Quantize both factors of a decomposed layer and return the factored
/// weight they reconstruct.
pub fn quantized_effective_weight(layer: &DecomposedLayer, bits: u32) -> Result<Matrix> {
    let a = dequantize(&rtn_quantize(&layer.a, bits)?);
    let b = dequantize(&rtn_quantize(&layer.b, bits)?);
    Ok(a.matmul(&b))
}

/// Activation-weighted output error of a layer after quantizing both of
/// its factors: `||(Â B̂ - W) X||_F` computed through the Gram matrix of
/// the calibration activations.
pub fn quantized_output_error(
    layer: &DecomposedLayer,
    w: &Matrix,
    gram: &Matrix,
    bits: u32,
) -> Result<f64> {
    if w.shape() != (layer.out_dim(), layer.in_dim()) {
        return Err(Error::invalid(format!(
            "weight is {}x{} but the layer maps {} to {}",
            w.rows(),
            w.cols(),
            layer.in_dim(),
            layer.out_dim()
        )));
    }
    if gram.shape() != (w.cols(), w.cols()) {
        return Err(Error::invalid(format!(
            "gram must be {0}x{0} for a {1}x{0} weight",
            w.cols(),
            w.rows()
        )));
    }
    let d = quantized_effective_weight(layer, bits)?.sub(w);
    Ok(weighted_frob(&d, gram))
}
