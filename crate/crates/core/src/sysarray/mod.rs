//! Cycle-level model of an `n x n` wavefront systolic GEMM array with
//! per-column DSP rounding units.
//!
//! Each node multiplies and accumulates one pair of operands per cycle into
//! an `acc_width`-bit register. Results leave through a per-column output
//! chain into a rounding unit that adds an LFSR value and drops the low
//! bits (stochastic rounding), then saturates on overflow.

mod lfsr;
mod perf;
mod sim;

use thiserror::Error;

use crate::fxp::{FxFormat, FxScalar};
use crate::fxtensor::TensorError;

pub use lfsr::{lfsr_draw, maximal_taps, Lfsr, MAX_LFSR_WIDTH, MIN_LFSR_WIDTH};
pub use perf::{perf_report, PerfSummary};
pub use sim::{issue_interval, simulate_gemm, SimOutput, TraceReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("operand format {format} does not fit {input_width}-bit inputs")]
    InputWidth { format: FxFormat, input_width: u32 },
    #[error("accumulator overflow at output ({row}, {col}): value needs {bits} bits, register has {acc_width}")]
    Overflow { row: usize, col: usize, bits: u32, acc_width: u32 },
    #[error("blocks need {needed} elements of on-chip memory; capacity is {capacity}")]
    L2Capacity { needed: usize, capacity: usize },
    #[error("the array implements stochastic rounding only")]
    NearestUnsupported,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Array geometry and hardware parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SysArrayConfig {
    /// Array dimension.
    pub n: usize,
    pub acc_width: u32,
    pub input_width: u32,
    /// Seed for column `j`'s LFSR is derived from this and `j`.
    pub lfsr_seed: u32,
    /// If set, must equal the number of bits the rounding units drop.
    pub lfsr_width: Option<u32>,
    /// Row-block multiplier; derived from `l2_capacity` when `None`.
    pub p: Option<usize>,
    /// On-chip buffer capacity in elements.
    pub l2_capacity: usize,
    /// Off-chip fetch rate in elements per cycle; `None` means fetches are
    /// free and never stall the array.
    pub bandwidth: Option<f64>,
}

impl Default for SysArrayConfig {
    fn default() -> Self {
        Self {
            n: 28,
            acc_width: 48,
            input_width: 18,
            lfsr_seed: 0xACE1,
            lfsr_width: None,
            p: None,
            l2_capacity: 1 << 20,
            bandwidth: None,
        }
    }
}

impl SysArrayConfig {
    pub fn with_n(n: usize) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SysError> {
        if self.n == 0 {
            return Err(SysError::Config("array dimension must be at least 1".into()));
        }
        if !(2..=127).contains(&self.acc_width) {
            return Err(SysError::Config(format!("accumulator width {} out of range", self.acc_width)));
        }
        if self.input_width == 0 || 2 * self.input_width > self.acc_width {
            return Err(SysError::Config(format!(
                "input width {} does not fit a {}-bit accumulator",
                self.input_width, self.acc_width
            )));
        }
        if let Some(b) = self.bandwidth {
            if b.is_nan() || b <= 0.0 {
                return Err(SysError::Config("bandwidth must be positive".into()));
            }
        }
        Ok(())
    }

    /// Largest inner dimension for which saturated inputs cannot overflow
    /// the accumulator: `2^(acc_width - 2 * input_width)`.
    pub fn max_safe_depth(&self) -> u128 {
        1u128 << (self.acc_width - 2 * self.input_width).min(126)
    }

    /// Rounding units: one per column.
    pub fn rounding_units(&self) -> usize {
        self.n
    }

    /// DSP slices: one per node plus one per rounding unit.
    pub fn dsp_units(&self) -> usize {
        self.n * self.n + self.n
    }

    pub fn rounding_overhead(&self) -> f64 {
        self.rounding_units() as f64 / self.dsp_units() as f64
    }

    /// Row-block multiplier for inner dimension `k`: explicit `p`, or the
    /// largest `p` whose double-buffered A and B blocks
    /// (`2 * (p*n*k + n*k)` elements) fit the buffer.
    pub fn block_p(&self, k: usize) -> Result<usize, SysError> {
        let nk = self.n * k.max(1);
        let p = match self.p {
            Some(p) if p >= 1 => p,
            Some(_) => return Err(SysError::Config("p must be at least 1".into())),
            None => {
                let fit = self.l2_capacity / (2 * nk);
                if fit < 2 {
                    return Err(SysError::L2Capacity { needed: 4 * nk, capacity: self.l2_capacity });
                }
                fit - 1
            }
        };
        let needed = 2 * (p * nk + nk);
        if needed > self.l2_capacity {
            return Err(SysError::L2Capacity { needed, capacity: self.l2_capacity });
        }
        Ok(p)
    }
}

/// The rounding unit's arithmetic: add `r`, drop `k` low bits, and
/// saturate when the bits above the output word are not a pure sign
/// extension.
pub fn dsp_round_with(acc: i128, k: u32, out: FxFormat, r: u32) -> FxScalar {
    let shifted = (acc + r as i128) >> k;
    let (lo, hi) = (out.min_mantissa() as i128, out.max_mantissa() as i128);
    let m = shifted.clamp(lo, hi);
    FxScalar::new(m as i64, out).expect("clamped into range")
}

/// Round one accumulator value held at binary point `in_point` into
/// `out`, drawing the next value from `lfsr`.
pub fn dsp_round(acc: i128, in_point: u32, out: FxFormat, lfsr: &mut Lfsr) -> Result<FxScalar, SysError> {
    let k = drop_bits(in_point, out)?;
    if k == 0 {
        return Ok(dsp_round_with(acc, 0, out, 0));
    }
    if lfsr.width() != k {
        return Err(SysError::Config(format!(
            "LFSR width {} differs from the {k} bits being rounded off",
            lfsr.width()
        )));
    }
    let r = lfsr.next_value();
    Ok(dsp_round_with(acc, k, out, r))
}

pub(crate) fn drop_bits(in_point: u32, out: FxFormat) -> Result<u32, SysError> {
    in_point.checked_sub(out.fl()).ok_or_else(|| {
        SysError::Config(format!(
            "output format {out} is finer than the accumulator point {in_point}"
        ))
    })
}
