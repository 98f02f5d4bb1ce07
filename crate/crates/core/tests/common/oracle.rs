//! Reference arithmetic on arbitrary-precision integers. Shares nothing with
//! the library except the format and draw types.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};

use fxnet::fxp::{Exact, FxFormat, RoundingMode};
use fxnet::fxtensor::{ConvGeometry, FxTensor};
use fxnet::rng::DrawSource;

pub fn pow2(k: u32) -> BigInt {
    BigInt::one() << k as usize
}

/// `(n, d)` with `d > 0` such that `x == n / d`.
pub fn exact_parts(x: Exact) -> (BigInt, BigInt) {
    let mut n = BigInt::from(x.numerator());
    let mut d = BigInt::from(x.divisor());
    if x.shift() >= 0 {
        d <<= x.shift() as usize;
    } else {
        n <<= (-x.shift()) as usize;
    }
    (n, d)
}

/// Saturating conversion of the rational `n / d`: clip first, otherwise round to the
/// `2^-fl` grid. A draw `u` stands for `u / 2^64`.
pub fn convert_ratio(n: &BigInt, d: &BigInt, f: FxFormat, mode: RoundingMode, draw: u64) -> i64 {
    assert!(d > &BigInt::zero());
    let scaled = n << f.fl() as usize;
    let (q, r) = scaled.div_mod_floor(d);
    let lo = BigInt::from(f.min_mantissa());
    let hi = BigInt::from(f.max_mantissa());
    if q >= hi {
        return f.max_mantissa();
    }
    if q < lo || (q == lo && r.is_zero()) {
        return f.min_mantissa();
    }
    let up = match mode {
        RoundingMode::Nearest => (&r << 1usize) > *d,
        RoundingMode::Stochastic => BigInt::from(draw) * d < (&r << 64usize),
    };
    let m = if up { q + 1 } else { q };
    i64::try_from(m).expect("in range after saturation")
}

pub fn cmp(a: Exact, b: Exact) -> std::cmp::Ordering {
    let (na, da) = exact_parts(a);
    let (nb, db) = exact_parts(b);
    (na * db).cmp(&(nb * da))
}

pub fn convert_exact(x: Exact, f: FxFormat, mode: RoundingMode, draw: u64) -> i64 {
    let (n, d) = exact_parts(x);
    convert_ratio(&n, &d, f, mode, draw)
}

/// Value of `round_nearest` as `(n, d)`: grid point below or above.
pub fn nearest_grid(x: Exact, fl: u32) -> BigInt {
    let (n, d) = exact_parts(x);
    let (q, r) = (n << fl as usize).div_mod_floor(&d);
    if (r << 1usize) > d {
        q + 1
    } else {
        q
    }
}

fn draw_for(mode: RoundingMode, draws: &dyn DrawSource, i: usize) -> u64 {
    match mode {
        RoundingMode::Stochastic => draws.draw(i as u64),
        RoundingMode::Nearest => 0,
    }
}

/// `A * B (+ bias)` by schoolbook summation, one conversion per output.
pub fn gemm(
    a: &FxTensor,
    b: &FxTensor,
    bias: Option<&FxTensor>,
    out: FxFormat,
    mode: RoundingMode,
    draws: &dyn DrawSource,
) -> Vec<i64> {
    let (l, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let point = a.format().fl() + b.format().fl();
    let d = pow2(point);
    let mut res = Vec::with_capacity(l * m);
    for r in 0..l {
        for c in 0..m {
            let mut z = BigInt::zero();
            for i in 0..k {
                z += BigInt::from(a.data()[r * k + i]) * BigInt::from(b.data()[i * m + c]);
            }
            if let Some(bias) = bias {
                z += BigInt::from(bias.data()[c]) << (point - bias.format().fl()) as usize;
            }
            res.push(convert_ratio(&z, &d, out, mode, draw_for(mode, draws, r * m + c)));
        }
    }
    res
}

/// Direct nested-loop convolution over `N x C x H x W` with zero padding.
pub fn conv2d(
    x: &FxTensor,
    w: &FxTensor,
    bias: Option<&FxTensor>,
    geo: &ConvGeometry,
    out: FxFormat,
    mode: RoundingMode,
    draws: &dyn DrawSource,
) -> Vec<i64> {
    let n = x.shape()[0];
    let f = w.shape()[0];
    let (c, h, wd) = (geo.channels, geo.height, geo.width);
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let point = x.format().fl() + w.format().fl();
    let d = pow2(point);
    let mut res = Vec::with_capacity(n * f * oh * ow);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut z = BigInt::zero();
                    for ci in 0..c {
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((fi * c + ci) * geo.kh + ky) * geo.kw + kx];
                                z += BigInt::from(xv) * BigInt::from(wv);
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        z += BigInt::from(bias.data()[fi]) << (point - bias.format().fl()) as usize;
                    }
                    let idx = res.len();
                    res.push(convert_ratio(&z, &d, out, mode, draw_for(mode, draws, idx)));
                }
            }
        }
    }
    res
}
