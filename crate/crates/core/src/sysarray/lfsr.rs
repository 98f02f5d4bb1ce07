//! Fibonacci linear feedback shift registers with maximal-length taps.

use super::SysError;

/// Maximal-length tap positions (1-based, highest first) for widths 1..=32.
/// Widths 3 and up follow the Xilinx XAPP052 table.
const TAPS: [&[u32]; 32] = [
    &[1],
    &[2, 1],
    &[3, 2],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 6, 4, 1],
    &[13, 4, 3, 1],
    &[14, 5, 3, 1],
    &[15, 14],
    &[16, 15, 13, 4],
    &[17, 14],
    &[18, 11],
    &[19, 6, 2, 1],
    &[20, 17],
    &[21, 19],
    &[22, 21],
    &[23, 18],
    &[24, 23, 22, 17],
    &[25, 22],
    &[26, 6, 2, 1],
    &[27, 5, 2, 1],
    &[28, 25],
    &[29, 27],
    &[30, 6, 4, 1],
    &[31, 28],
    &[32, 22, 2, 1],
];

pub const MIN_LFSR_WIDTH: u32 = 1;
pub const MAX_LFSR_WIDTH: u32 = 32;

pub fn maximal_taps(width: u32) -> Option<&'static [u32]> {
    if (MIN_LFSR_WIDTH..=MAX_LFSR_WIDTH).contains(&width) {
        Some(TAPS[(width - MIN_LFSR_WIDTH) as usize])
    } else {
        None
    }
}

/// A `width`-bit register. Each step shifts left and feeds back the parity
/// of the tapped bits; the all-zeros state is never entered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lfsr {
    state: u32,
    width: u32,
    mask: u32,
}

impl Lfsr {
    /// Register with the table taps. A zero seed (after masking to the
    /// width) is rejected because it is a fixed point.
    pub fn new(width: u32, seed: u32) -> Result<Self, SysError> {
        let taps = maximal_taps(width)
            .ok_or_else(|| SysError::Config(format!("no LFSR taps for width {width}")))?;
        Self::with_taps(width, taps, seed)
    }

    pub fn with_taps(width: u32, taps: &[u32], seed: u32) -> Result<Self, SysError> {
        if !(1..=MAX_LFSR_WIDTH).contains(&width) {
            return Err(SysError::Config(format!("LFSR width {width} out of range")));
        }
        let mut mask = 0u32;
        for &t in taps {
            if t == 0 || t > width {
                return Err(SysError::Config(format!("tap {t} outside a {width}-bit register")));
            }
            mask |= 1 << (t - 1);
        }
        let state = seed & width_mask(width);
        if state == 0 {
            return Err(SysError::Config("LFSR seed must be nonzero".into()));
        }
        Ok(Self { state, width, mask })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    /// Advance one step and return the new state, a value in `[1, 2^k - 1]`.
    #[inline]
    pub fn next_value(&mut self) -> u32 {
        let fb = (self.state & self.mask).count_ones() & 1;
        self.state = ((self.state << 1) | fb) & width_mask(self.width);
        self.state
    }

    /// Steps until the starting state recurs. Brute force; meant for tests.
    pub fn period(&self) -> u64 {
        let mut r = self.clone();
        let start = r.state;
        let mut n = 0u64;
        loop {
            r.next_value();
            n += 1;
            if r.state == start || n > (1u64 << self.width) {
                return n;
            }
        }
    }
}

fn width_mask(width: u32) -> u32 {
    if width == 32 {
        u32::MAX
    } else {
        (1u32 << width) - 1
    }
}

/// The 64-bit stochastic-rounding draw equivalent to LFSR value `r` when
/// `k` bits are dropped: adding `r` carries out exactly when the draw is
/// below the dropped residue.
pub fn lfsr_draw(r: u32, k: u32) -> u64 {
    if k == 0 {
        return 0;
    }
    let top = ((1u64 << k) - 1) - r as u64;
    top << (64 - k)
}
