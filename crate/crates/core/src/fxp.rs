//! Scalar fixed-point formats, rounding and saturating conversion.
//!
//! A format `<IL,FL>` stores a value as a two's-complement mantissa `m` of
//! `WL = IL + FL` bits and represents `m * 2^-FL`. Values are brought into a
//! format with [`convert`], which saturates out-of-range inputs to the format
//! limits and otherwise rounds onto the `2^-FL` grid with the requested
//! [`RoundingMode`].
//!
//! Pre-rounding values travel as [`Exact`] rationals so rounding decisions
//! (including the stochastic up-probability) are computed without any
//! intermediate binary floating point.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Widest word length a format may declare. Tensors store mantissas in `i32`.
pub const MAX_WORD_LENGTH: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("integer length must be at least 1 (sign bit), got IL={0}")]
    NoSignBit(u32),
    #[error("word length {0} outside [2, {MAX_WORD_LENGTH}]")]
    WordLength(u32),
    #[error("cannot parse fixed-point format from {0:?} (expected `IL,FL` or `<IL,FL>`)")]
    Parse(String),
    #[error("mantissa {mantissa} does not fit format {format}")]
    MantissaRange { mantissa: i64, format: FxFormat },
}

/// A `<IL,FL>` fixed-point word format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxFormat {
    il: u32,
    fl: u32,
}

impl FxFormat {
    pub fn new(il: u32, fl: u32) -> Result<Self, FormatError> {
        if il < 1 {
            return Err(FormatError::NoSignBit(il));
        }
        let wl = il + fl;
        if !(2..=MAX_WORD_LENGTH).contains(&wl) {
            return Err(FormatError::WordLength(wl));
        }
        Ok(Self { il, fl })
    }

    /// Format with word length `wl` and `fl` fractional bits.
    pub fn with_wl(wl: u32, fl: u32) -> Result<Self, FormatError> {
        if fl >= wl {
            return Err(FormatError::NoSignBit(wl.saturating_sub(fl)));
        }
        Self::new(wl - fl, fl)
    }

    pub fn wl(&self) -> u32 {
        self.il + self.fl
    }

    pub fn il(&self) -> u32 {
        self.il
    }

    pub fn fl(&self) -> u32 {
        self.fl
    }

    /// Resolution `2^-FL`.
    pub fn epsilon(&self) -> f64 {
        (-(self.fl as f64)).exp2()
    }

    pub fn min_mantissa(&self) -> i64 {
        -(1i64 << (self.wl() - 1))
    }

    pub fn max_mantissa(&self) -> i64 {
        (1i64 << (self.wl() - 1)) - 1
    }

    /// Lower limit `-2^(IL-1)`.
    pub fn lower(&self) -> f64 {
        self.min_mantissa() as f64 * self.epsilon()
    }

    /// Upper limit `2^(IL-1) - 2^-FL`.
    pub fn upper(&self) -> f64 {
        self.max_mantissa() as f64 * self.epsilon()
    }

    pub fn contains_mantissa(&self, m: i64) -> bool {
        (self.min_mantissa()..=self.max_mantissa()).contains(&m)
    }

    /// Same integer length, `extra` more fractional bits.
    pub fn widened(&self, extra: u32) -> Result<Self, FormatError> {
        Self::new(self.il, self.fl + extra)
    }
}

impl fmt::Display for FxFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.il, self.fl)
    }
}

impl FromStr for FxFormat {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s.trim().trim_start_matches('<').trim_end_matches('>');
        let (il, fl) = inner
            .split_once(',')
            .ok_or_else(|| FormatError::Parse(s.to_string()))?;
        let il = il.trim().parse().map_err(|_| FormatError::Parse(s.to_string()))?;
        let fl = fl.trim().parse().map_err(|_| FormatError::Parse(s.to_string()))?;
        Self::new(il, fl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoundingMode {
    Nearest,
    Stochastic,
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoundingMode::Nearest => "nearest",
            RoundingMode::Stochastic => "stochastic",
        })
    }
}

impl FromStr for RoundingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" | "round-to-nearest" => Ok(RoundingMode::Nearest),
            "stochastic" => Ok(RoundingMode::Stochastic),
            other => Err(format!("unknown rounding mode {other:?}")),
        }
    }
}

/// An exact rational `num * 2^-shift / div`.
///
/// Every value the arithmetic produces before rounding has this shape:
/// accumulator contents (`div = 1`), minibatch means (`div = batch`),
/// pixel intensities (`div = 255`) and any finite `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exact {
    num: i128,
    shift: i32,
    div: u32,
}

impl std::ops::Neg for Exact {
    type Output = Self;

    fn neg(self) -> Self {
        Self { num: -self.num, ..self }
    }
}

impl Exact {
    pub const ZERO: Exact = Exact { num: 0, shift: 0, div: 1 };

    pub fn from_int(v: i128) -> Self {
        Self { num: v, shift: 0, div: 1 }
    }

    /// `num * 2^-frac_bits`.
    pub fn dyadic(num: i128, frac_bits: i32) -> Self {
        Self { num, shift: frac_bits, div: 1 }
    }

    /// `num / div`. Panics if `div == 0`.
    pub fn ratio(num: i128, div: u32) -> Self {
        assert!(div > 0, "zero divisor");
        Self { num, shift: 0, div }
    }

    /// The exact value of a finite `f64`; `None` for NaN and infinities.
    pub fn from_f64(x: f64) -> Option<Self> {
        if !x.is_finite() {
            return None;
        }
        if x == 0.0 {
            return Some(Self::ZERO);
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1i128 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i32;
        let frac = (bits & ((1u64 << 52) - 1)) as i128;
        let (mant, e) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1i128 << 52), exp - 1075)
        };
        Some(Self { num: sign * mant, shift: -e, div: 1 })
    }

    pub fn numerator(&self) -> i128 {
        self.num
    }

    pub fn shift(&self) -> i32 {
        self.shift
    }

    pub fn divisor(&self) -> u32 {
        self.div
    }

    /// Divide by a further positive integer.
    pub fn checked_div_int(self, d: u32) -> Option<Self> {
        if d == 0 {
            return None;
        }
        let div = self.div.checked_mul(d)?;
        Some(Self { div, ..self })
    }

    pub fn checked_mul(self, rhs: Self) -> Option<Self> {
        Some(Self {
            num: self.num.checked_mul(rhs.num)?,
            shift: self.shift.checked_add(rhs.shift)?,
            div: self.div.checked_mul(rhs.div)?,
        })
    }

    pub fn checked_add(self, rhs: Self) -> Option<Self> {
        if self.num == 0 {
            return Some(rhs);
        }
        if rhs.num == 0 {
            return Some(self);
        }
        let shift = self.shift.max(rhs.shift);
        let scale = |v: Self, other_div: u32| -> Option<i128> {
            let up = u32::try_from(shift - v.shift).ok()?;
            let n = v.num.checked_mul(other_div as i128)?;
            if up >= 127 {
                return None;
            }
            let shifted = n.checked_shl(up)?;
            (shifted >> up == n).then_some(shifted)
        };
        let (div, a, b) = if self.div == rhs.div {
            (self.div, scale(self, 1)?, scale(rhs, 1)?)
        } else {
            (self.div.checked_mul(rhs.div)?, scale(self, rhs.div)?, scale(rhs, self.div)?)
        };
        Some(Self { num: a.checked_add(b)?, shift, div })
    }

    pub fn checked_sub(self, rhs: Self) -> Option<Self> {
        self.checked_add(-rhs)
    }

    /// Nearest `f64` (for reporting only; never used in rounding decisions).
    pub fn to_f64(&self) -> f64 {
        let n = self.num as f64;
        n * (-(self.shift as f64)).exp2() / self.div as f64
    }

    /// Split `x * 2^fl` into its floor and the top 64 bits of the fractional
    /// part. `sticky` is set when bits below those 64 are nonzero.
    fn grid_split(&self, fl: u32) -> GridSplit {
        let t = self.shift as i64 - fl as i64;
        let (q0, low64, mut sticky) = if t <= 0 {
            let up = (-t) as u32;
            let bits = 128 - self.num.unsigned_abs().leading_zeros();
            if self.num != 0 && bits as u64 + up as u64 >= 127 {
                return GridSplit::Huge { negative: self.num < 0 };
            }
            (self.num << up, 0u64, false)
        } else if t < 64 {
            let t = t as u32;
            let q0 = self.num >> t;
            let low = (self.num as u128) & ((1u128 << t) - 1);
            (q0, (low as u64) << (64 - t), false)
        } else {
            let q0 = if t >= 127 { self.num >> 127 } else { self.num >> t };
            let s = t - 64;
            let (top, exact) = if s >= 127 {
                (self.num >> 127, self.num == 0)
            } else {
                let top = self.num >> s;
                (top, top << s == self.num)
            };
            (q0, top as u64, !exact)
        };
        if self.div == 1 {
            return GridSplit::Finite { q: q0, frac: low64, sticky };
        }
        let div = self.div as i128;
        let q = q0.div_euclid(div);
        let r0 = q0.rem_euclid(div) as u128;
        let numer = (r0 << 64) | low64 as u128;
        let frac = numer / self.div as u128;
        if !numer.is_multiple_of(self.div as u128) {
            sticky = true;
        }
        GridSplit::Finite { q, frac: frac as u64, sticky }
    }
}

enum GridSplit {
    /// `|x * 2^fl| >= 2^94`: beyond any representable format.
    Huge { negative: bool },
    Finite { q: i128, frac: u64, sticky: bool },
}

const HALF: u64 = 1 << 63;

/// An `FxFormat` value: `mantissa * 2^-fl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxScalar {
    mantissa: i64,
    format: FxFormat,
}

impl FxScalar {
    pub fn new(mantissa: i64, format: FxFormat) -> Result<Self, FormatError> {
        if !format.contains_mantissa(mantissa) {
            return Err(FormatError::MantissaRange { mantissa, format });
        }
        Ok(Self { mantissa, format })
    }

    pub(crate) fn new_unchecked(mantissa: i64, format: FxFormat) -> Self {
        debug_assert!(format.contains_mantissa(mantissa));
        Self { mantissa, format }
    }

    pub fn mantissa(&self) -> i64 {
        self.mantissa
    }

    pub fn format(&self) -> FxFormat {
        self.format
    }

    pub fn to_f64(&self) -> f64 {
        self.mantissa as f64 * self.format.epsilon()
    }
}

/// Exact value of a fixed-point scalar.
pub fn to_real(s: FxScalar) -> Exact {
    Exact::dyadic(s.mantissa as i128, s.format.fl as i32)
}

/// Alias of [`convert`].
pub fn from_real(x: Exact, format: FxFormat, mode: RoundingMode, draw: u64) -> FxScalar {
    convert(x, format, mode, draw)
}

/// Largest multiple of `2^-fl` that is `<= x` (floor toward -inf).
pub fn floor_to_grid(x: Exact, format: FxFormat) -> Exact {
    match x.grid_split(format.fl) {
        GridSplit::Finite { q, .. } => Exact::dyadic(q, format.fl as i32),
        GridSplit::Huge { .. } => x,
    }
}

/// Round to the `2^-fl` grid; exact midpoints go down.
pub fn round_nearest(x: Exact, format: FxFormat) -> Exact {
    match x.grid_split(format.fl) {
        GridSplit::Finite { q, frac, sticky } => {
            Exact::dyadic(q + nearest_up(frac, sticky) as i128, format.fl as i32)
        }
        GridSplit::Huge { .. } => x,
    }
}

/// Round up with probability `(x - floor(x)) / eps`, decided by `draw`
/// read as the uniform value `draw / 2^64`.
pub fn round_stochastic(x: Exact, format: FxFormat, draw: u64) -> Exact {
    match x.grid_split(format.fl) {
        GridSplit::Finite { q, frac, sticky } => {
            Exact::dyadic(q + stochastic_up(frac, sticky, draw) as i128, format.fl as i32)
        }
        GridSplit::Huge { .. } => x,
    }
}

#[inline]
fn nearest_up(frac: u64, sticky: bool) -> bool {
    frac > HALF || (frac == HALF && sticky)
}

#[inline]
fn stochastic_up(frac: u64, sticky: bool, draw: u64) -> bool {
    // draw / 2^64 < frac_exact  <=>  draw < ceil(frac_exact * 2^64)
    (draw as u128) < frac as u128 + sticky as u128
}

/// Saturating conversion: clip to the format limits, otherwise round.
///
/// The limits are tested before rounding, so any `x >= upper` maps to the
/// upper limit and any `x <= lower` to the lower limit.
pub fn convert(x: Exact, format: FxFormat, mode: RoundingMode, draw: u64) -> FxScalar {
    count_rounding_event();
    let lo = format.min_mantissa() as i128;
    let hi = format.max_mantissa() as i128;
    let m = match x.grid_split(format.fl) {
        GridSplit::Huge { negative: true } => lo,
        GridSplit::Huge { negative: false } => hi,
        GridSplit::Finite { q, frac, sticky } => {
            if q >= hi {
                hi
            } else if q < lo || (q == lo && frac == 0 && !sticky) {
                lo
            } else {
                let up = match mode {
                    RoundingMode::Nearest => nearest_up(frac, sticky),
                    RoundingMode::Stochastic => stochastic_up(frac, sticky, draw),
                };
                q + up as i128
            }
        }
    };
    FxScalar::new_unchecked(m as i64, format)
}

/// [`convert`] for an `f64` input. The float is an exact dyadic rational, so
/// this is the same total function; infinities saturate and NaN maps to zero.
pub fn convert_f64(x: f64, format: FxFormat, mode: RoundingMode, draw: u64) -> FxScalar {
    match Exact::from_f64(x) {
        Some(e) => convert(e, format, mode, draw),
        None if x.is_nan() => {
            count_rounding_event();
            FxScalar::new_unchecked(0, format)
        }
        None => convert(
            Exact::from_int(if x > 0.0 { i64::MAX as i128 } else { i64::MIN as i128 }),
            format,
            mode,
            draw,
        ),
    }
}

thread_local! {
    static ROUNDING_EVENTS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
fn count_rounding_event() {
    ROUNDING_EVENTS.with(|c| c.set(c.get() + 1));
}

/// Number of [`convert`] calls made on this thread so far.
pub fn rounding_events() -> u64 {
    ROUNDING_EVENTS.with(Cell::get)
}

pub fn reset_rounding_events() {
    ROUNDING_EVENTS.with(|c| c.set(0));
}
