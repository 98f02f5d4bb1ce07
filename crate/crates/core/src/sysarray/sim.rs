//! The cycle loop.
//!
//! Output tiles are `n x n`. They are streamed in the order row-block
//! (`p*n` rows of A), column-block (`n` columns of B), sub-tile, so an A
//! block stays on chip while every column block of B passes it and each
//! fetched B block serves `p*n` rows. On every advancing cycle `c` node
//! `(i, j)` consumes stream element `c - i - j`, which is the wavefront
//! skew. A node that finishes a tile latches its sum into a local
//! register, which loads into the column's output chain when the chain
//! slot at that node is free; the chain moves one hop up per cycle to the
//! rounding unit at the array edge.
//!
//! Row `i` of a tile reaches chain slot `s` at `start + k + j + 2i - s`, so
//! tiles issued `d` cycles apart collide in the chain only when some
//! multiple of `d` is even and at most `2n - 2`. The controller therefore
//! issues tiles every `issue_interval(k, n)` cycles, padding the operand
//! stream with idle slots when `k` is shorter; for `k >= 2n - 1` there is
//! no padding. When the next block has not arrived from memory the whole
//! array, output chains included, is clock-gated for that cycle.

use crate::fxp::{FxFormat, RoundingMode};
use crate::fxtensor::{FxTensor, GemmSpec};
use crate::rng::RecordedDraws;

use super::lfsr::{lfsr_draw, Lfsr};
use super::{drop_bits, dsp_round_with, SysArrayConfig, SysError};

/// Cycle and traffic accounting for one simulated GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub k: usize,
    pub m: usize,
    pub tiles: usize,
    /// Cycle on which the last multiply-accumulate happened (1-based).
    pub compute_cycles: u64,
    /// Until the last result has left its rounding unit.
    pub total_cycles: u64,
    /// Cycles the array held waiting for memory.
    pub memory_stall_cycles: u64,
    /// Cycles the array held because an output register was occupied.
    pub output_stall_cycles: u64,
    /// Multiply-accumulates on real (non-padding) operands.
    pub macc_ops: u64,
    /// Arithmetic operations, two per multiply-accumulate.
    pub ops: u64,
    /// Times each element of A is used (once per column of B).
    pub reuse_a: usize,
    /// Times each fetched element of B is used (rows in a row block).
    pub reuse_b: usize,
    /// Elements fetched from off-chip memory.
    pub fetched_elements: u64,
    pub ops_per_cycle: f64,
    /// `macc_ops / (n^2 * total_cycles)`.
    pub utilization: f64,
    /// Largest two's-complement width any accumulator reached.
    pub max_acc_bits: u32,
    pub rounding_units: usize,
    pub dsp_units: usize,
}

impl TraceReport {
    pub const CSV_HEADER: &'static str = "n,p,l,k,m,tiles,compute_cycles,total_cycles,memory_stall_cycles,\
output_stall_cycles,macc_ops,ops,reuse_a,reuse_b,fetched_elements,ops_per_cycle,utilization,max_acc_bits,\
rounding_units,dsp_units";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{},{},{}",
            self.n,
            self.p,
            self.l,
            self.k,
            self.m,
            self.tiles,
            self.compute_cycles,
            self.total_cycles,
            self.memory_stall_cycles,
            self.output_stall_cycles,
            self.macc_ops,
            self.ops,
            self.reuse_a,
            self.reuse_b,
            self.fetched_elements,
            self.ops_per_cycle,
            self.utilization,
            self.max_acc_bits,
            self.rounding_units,
            self.dsp_units
        )
    }
}

impl std::fmt::Display for TraceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gemm             {}x{} * {}x{} on {}x{} array (p = {})", self.l, self.k, self.k, self.m, self.n, self.n, self.p)?;
        writeln!(f, "tiles            {}", self.tiles)?;
        writeln!(f, "compute cycles   {}", self.compute_cycles)?;
        writeln!(f, "total cycles     {}", self.total_cycles)?;
        writeln!(f, "stall cycles     {} memory, {} output", self.memory_stall_cycles, self.output_stall_cycles)?;
        writeln!(f, "macc ops         {} ({} ops)", self.macc_ops, self.ops)?;
        writeln!(f, "reuse            A x{}, B x{}", self.reuse_a, self.reuse_b)?;
        writeln!(f, "fetched          {} elements", self.fetched_elements)?;
        writeln!(f, "ops per cycle    {:.3}", self.ops_per_cycle)?;
        writeln!(f, "utilization      {:.4}", self.utilization)?;
        write!(f, "max acc width    {} bits", self.max_acc_bits)
    }
}

/// Result matrix, trace, and the rounding draws the LFSRs implied.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub result: FxTensor,
    pub report: TraceReport,
    /// For output `(r, c)`, index `r * m + c`: the 64-bit draw under which
    /// stochastic conversion makes the same choice the rounding unit made.
    pub draws: RecordedDraws,
}

#[derive(Clone, Copy)]
struct Parked {
    value: i128,
    row: usize,
    col: usize,
}

struct Tile {
    row0: usize,
    col0: usize,
}

fn column_seed(seed: u32, j: usize, k: u32) -> u32 {
    let period = if k >= 32 { u32::MAX as u64 } else { (1u64 << k) - 1 };
    let s = (seed as u64).wrapping_add((j as u64).wrapping_mul(0x9E37_79B9)) % period;
    (s + 1) as u32
}

fn bits_signed(v: i128) -> u32 {
    if v >= 0 {
        129 - v.leading_zeros()
    } else {
        129 - (!v).leading_zeros()
    }
}

/// Cycles between tile issues: the smallest `d >= max(k, n)` that is odd
/// or at least `2n - 1`, so that no two results ever meet in an output
/// chain. Nondecreasing in `k`.
pub fn issue_interval(k: usize, n: usize) -> usize {
    let d = k.max(n);
    if d % 2 == 1 || d + 1 >= 2 * n {
        d
    } else {
        d + 1
    }
}

/// Simulate `A (l x k) * B (k x m)` on the array and round each output
/// through its column's rounding unit.
pub fn simulate_gemm(
    a: &FxTensor,
    b: &FxTensor,
    cfg: &SysArrayConfig,
    spec: &GemmSpec,
) -> Result<SimOutput, SysError> {
    cfg.validate()?;
    if spec.mode == RoundingMode::Nearest {
        return Err(SysError::NearestUnsupported);
    }
    for t in [a, b] {
        if t.shape().len() != 2 {
            return Err(SysError::Config(format!("operands must be 2-D, got {:?}", t.shape())));
        }
        if t.format().wl() > cfg.input_width {
            return Err(SysError::InputWidth { format: t.format(), input_width: cfg.input_width });
        }
    }
    let (l, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(SysError::Config(format!("inner dimensions differ: {:?} * {:?}", a.shape(), b.shape())));
    }
    if k == 0 {
        return Err(SysError::Config("inner dimension must be at least 1".into()));
    }
    let point = a.format().fl() + b.format().fl();
    let out: FxFormat = spec.out_format;
    let kbits = drop_bits(point, out)?;
    if let Some(w) = cfg.lfsr_width {
        if w != kbits {
            return Err(SysError::Config(format!(
                "LFSR width {w} differs from the {kbits} bits being rounded off"
            )));
        }
    }
    let n = cfg.n;
    let p = cfg.block_p(k)?;
    let mut lfsrs = if kbits == 0 {
        Vec::new()
    } else {
        (0..n).map(|j| Lfsr::new(kbits, column_seed(cfg.lfsr_seed, j, kbits))).collect::<Result<Vec<_>, _>>()?
    };

    // Tile stream and memory phases.
    let slot = issue_interval(k, n);
    let row_blocks = l.div_ceil(p * n).max(1);
    let col_blocks = m.div_ceil(n).max(1);
    let mut tiles = Vec::new();
    // (first stream element, elements to fetch) per phase
    let mut phases: Vec<(usize, u64)> = Vec::new();
    for rb in 0..row_blocks {
        let rows_in_block = (l - (rb * p * n).min(l)).min(p * n);
        let subtiles = rows_in_block.div_ceil(n).max(1);
        for cb in 0..col_blocks {
            let cols_in_block = (m - (cb * n).min(m)).min(n);
            let mut fetch = (cols_in_block * k) as u64;
            if cb == 0 {
                fetch += (rows_in_block * k) as u64;
            }
            phases.push((tiles.len() * slot, fetch));
            for s in 0..subtiles {
                tiles.push(Tile { row0: rb * p * n + s * n, col0: cb * n });
            }
        }
    }
    // The last tile needs no trailing idle slots.
    let stream_len = (tiles.len() - 1) * slot + k;
    let fetch_time = |elems: u64| -> u64 {
        match cfg.bandwidth {
            Some(bw) => (elems as f64 / bw).ceil() as u64,
            None => 0,
        }
    };
    // fetch_done[q]: cycle from which phase q's data is on chip
    let mut fetch_done = vec![0u64; phases.len()];
    fetch_done[0] = fetch_time(phases[0].1);
    let mut entered = 0;

    let acc_limit_bits = cfg.acc_width;
    let mut acc = vec![0i128; n * n];
    // Each node latches a finished sum into its local register; the local
    // register feeds the column's output chain when the chain slot at that
    // node is free.
    let mut local: Vec<Option<Parked>> = vec![None; n * n];
    let mut chain: Vec<Option<Parked>> = vec![None; n * n];
    let mut result = vec![0i32; l * m];
    let mut draws = vec![0u64; l * m];
    let mut remaining = l * m;

    let mut cycle: u64 = 0;
    let mut advance: usize = 0;
    let mut compute_cycles = 0u64;
    let mut mem_stall = 0u64;
    let out_stall = ((tiles.len() - 1) * (slot - k)) as u64;
    let mut macc_ops = 0u64;
    let mut max_bits = 1u32;
    let last_advance = stream_len + 2 * (n - 1);

    while advance < last_advance || remaining > 0 {
        // Memory: node (0, 0) entering a new phase needs its data. Double
        // buffering starts the following fetch as soon as a phase begins.
        if advance < last_advance && entered < phases.len() && advance == phases[entered].0 {
            if cycle < fetch_done[entered] {
                mem_stall += 1;
                cycle += 1;
                continue;
            }
            if entered + 1 < phases.len() {
                fetch_done[entered + 1] = cycle + fetch_time(phases[entered + 1].1);
            }
            entered += 1;
        }

        // Rounding units take the head of each column's output chain.
        for j in 0..n {
            if let Some(v) = chain[j].take() {
                let r = if kbits == 0 { 0 } else { lfsrs[j].next_value() };
                let y = dsp_round_with(v.value, kbits, out, r);
                result[v.row * m + v.col] = y.mantissa() as i32;
                draws[v.row * m + v.col] = lfsr_draw(r, kbits);
                remaining -= 1;
            }
        }
        for i in 1..n {
            for j in 0..n {
                chain[(i - 1) * n + j] = chain[i * n + j].take();
            }
        }
        for (c, l) in chain.iter_mut().zip(local.iter_mut()) {
            debug_assert!(c.is_none() || l.is_none(), "issue interval keeps output chains collision-free");
            if c.is_none() {
                *c = l.take();
            }
        }

        if advance < last_advance {
            for i in 0..n {
                for j in 0..n {
                    let Some(g) = advance.checked_sub(i + j) else { continue };
                    if g >= stream_len || g % slot >= k {
                        continue;
                    }
                    let tile = &tiles[g / slot];
                    let kk = g % slot;
                    let (row, col) = (tile.row0 + i, tile.col0 + j);
                    let live = row < l && col < m;
                    let cell = &mut acc[i * n + j];
                    if live {
                        *cell += a.data()[row * k + kk] as i128 * b.data()[kk * m + col] as i128;
                        macc_ops += 1;
                        let bits = bits_signed(*cell);
                        if bits > acc_limit_bits {
                            return Err(SysError::Overflow { row, col, bits, acc_width: acc_limit_bits });
                        }
                        max_bits = max_bits.max(bits);
                    }
                    if kk == k - 1 {
                        if live {
                            let reg = &mut local[i * n + j];
                            debug_assert!(reg.is_none(), "issue interval keeps local registers free");
                            *reg = Some(Parked { value: *cell, row, col });
                        }
                        *cell = 0;
                    }
                }
            }
            advance += 1;
            compute_cycles = cycle + 1;
        }
        cycle += 1;
    }

    let total_cycles = cycle;
    let ops = 2 * macc_ops;
    let report = TraceReport {
        n,
        p,
        l,
        k,
        m,
        tiles: tiles.len(),
        compute_cycles,
        total_cycles,
        memory_stall_cycles: mem_stall,
        output_stall_cycles: out_stall,
        macc_ops,
        ops,
        reuse_a: m,
        reuse_b: (p * n).min(l),
        fetched_elements: phases.iter().map(|ph| ph.1).sum(),
        ops_per_cycle: ops as f64 / total_cycles as f64,
        utilization: macc_ops as f64 / ((n * n) as f64 * total_cycles as f64),
        max_acc_bits: max_bits,
        rounding_units: cfg.rounding_units(),
        dsp_units: cfg.dsp_units(),
    };
    let result = FxTensor::new(vec![l, m], result, out, "sysarray")?;
    Ok(SimOutput { result, report, draws: RecordedDraws::new(draws, "sysarray") })
}
