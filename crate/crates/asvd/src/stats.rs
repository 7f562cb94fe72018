//! Per-layer activation statistics gathered from calibration batches.
//!
//! Activations are channels x tokens; every statistic here is per channel.
//! Stats from separate batches merge associatively (token-weighted means,
//! elementwise maxima, Gram sums), so a sharded collection pass gives the
//! same result as one pass over the concatenated tokens, up to rounding.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct ActivationStats {
    channels: usize,
    token_count: usize,
    abs_mean: Vec<f64>,
    abs_max: Vec<f64>,
    gram: Matrix,
}

impl ActivationStats {
    /// Stats over one activation matrix (channels x tokens).
    pub fn from_activations(x: &Matrix) -> Self {
        let channels = x.rows();
        let tokens = x.cols();
        let mut abs_mean = vec![0.0; channels];
        let mut abs_max = vec![0.0; channels];
        for i in 0..channels {
            let row = x.row(i);
            let mut sum = 0.0;
            let mut max = 0.0_f64;
            for &v in row {
                sum += v.abs();
                max = max.max(v.abs());
            }
            abs_mean[i] = sum / tokens as f64;
            abs_max[i] = max;
        }
        ActivationStats { channels, token_count: tokens, abs_mean, abs_max, gram: x.gram() }
    }

    /// Neutral element for merging.
    pub fn empty(channels: usize) -> Self {
        ActivationStats {
            channels,
            token_count: 0,
            abs_mean: vec![0.0; channels],
            abs_max: vec![0.0; channels],
            gram: Matrix::zeros(channels, channels),
        }
    }

    /// Combine stats from two disjoint token sets.
    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        if self.channels != other.channels {
            return Err(Error::invalid(format!(
                "cannot merge stats over {} and {} channels",
                self.channels, other.channels
            )));
        }
        let total = self.token_count + other.token_count;
        if total == 0 {
            return Ok(ActivationStats::empty(self.channels));
        }
        let wa = self.token_count as f64;
        let wb = other.token_count as f64;
        let abs_mean = self
            .abs_mean
            .iter()
            .zip(&other.abs_mean)
            .map(|(a, b)| (wa * a + wb * b) / (wa + wb))
            .collect();
        let abs_max = self
            .abs_max
            .iter()
            .zip(&other.abs_max)
            .map(|(a, b)| a.max(*b))
            .collect();
        Ok(ActivationStats {
            channels: self.channels,
            token_count: total,
            abs_mean,
            abs_max,
            gram: self.gram.add(&other.gram),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn abs_mean(&self) -> &[f64] {
        &self.abs_mean
    }

    pub fn abs_max(&self) -> &[f64] {
        &self.abs_max
    }

    /// Accumulated X X^T over all merged tokens.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// Rebuild from stored parts (container loading). Validates shapes.
    pub fn from_parts(
        abs_mean: Vec<f64>,
        abs_max: Vec<f64>,
        gram: Matrix,
        token_count: usize,
    ) -> Result<Self> {
        let channels = abs_mean.len();
        if abs_max.len() != channels || gram.shape() != (channels, channels) {
            return Err(Error::invalid(format!(
                "inconsistent stat shapes: mean {}, max {}, gram {:?}",
                channels,
                abs_max.len(),
                gram.shape()
            )));
        }
        Ok(ActivationStats { channels, token_count, abs_mean, abs_max, gram })
    }
}
