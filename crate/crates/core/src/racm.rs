//! Two-bandwidth cost model for random-access-constrained memory.
//!
//! Decode steps stream the whole batch's KV cache once. A contiguous layout
//! reads at the streaming bandwidth; a paged layout pays the random-access
//! bandwidth. Overflow copies are always sequential.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Peak device bandwidth of an MLU370-X4 card, bytes per second.
pub const MLU370_BANDWIDTH: f64 = 307.2e9;

#[derive(Debug, Error, PartialEq)]
pub enum RacmError {
    #[error("invalid racm parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    #[default]
    Contiguous,
    Paged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RacmParams {
    /// Streaming bandwidth, bytes/s.
    pub b_seq: f64,
    /// Random-access bandwidth, bytes/s.
    pub b_rand: f64,
    /// Fixed compute time per decode step, seconds.
    pub compute_base: f64,
    /// Count an overflow copy as a read plus a write.
    pub copy_read_write: bool,
}

impl RacmParams {
    pub fn new(b_seq: f64, alpha_ratio: f64, compute_base: f64) -> Result<Self, RacmError> {
        let p = Self {
            b_seq,
            b_rand: b_seq * alpha_ratio,
            compute_base,
            copy_read_write: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// LPDDR5-class card: 307.2 GB/s streaming, half that for random access.
    pub fn mlu370_like(compute_base: f64) -> Self {
        Self::new(MLU370_BANDWIDTH, 0.5, compute_base).expect("preset is valid")
    }

    /// Control condition where layout does not matter.
    pub fn hbm_like(compute_base: f64) -> Self {
        Self::new(MLU370_BANDWIDTH, 1.0, compute_base).expect("preset is valid")
    }

    pub fn validate(&self) -> Result<(), RacmError> {
        if !(self.b_seq.is_finite() && self.b_seq > 0.0) {
            return Err(RacmError::Invalid(format!("b_seq must be > 0 (got {})", self.b_seq)));
        }
        if !(self.b_rand > 0.0 && self.b_rand <= self.b_seq) {
            return Err(RacmError::Invalid(format!(
                "b_rand must be in (0, b_seq] (got {} with b_seq {})",
                self.b_rand, self.b_seq
            )));
        }
        if !(self.compute_base.is_finite() && self.compute_base >= 0.0) {
            return Err(RacmError::Invalid(format!(
                "compute_base must be >= 0 (got {})",
                self.compute_base
            )));
        }
        Ok(())
    }

    pub fn alpha_ratio(&self) -> f64 {
        self.b_rand / self.b_seq
    }

    pub fn step_time(&self, batch_kv_bytes: u64, layout: Layout) -> f64 {
        let bw = match layout {
            Layout::Contiguous => self.b_seq,
            Layout::Paged => self.b_rand,
        };
        self.compute_base + batch_kv_bytes as f64 / bw
    }

    pub fn copy_time(&self, bytes: u64) -> f64 {
        let factor = if self.copy_read_write { 2.0 } else { 1.0 };
        factor * bytes as f64 / self.b_seq
    }
}
