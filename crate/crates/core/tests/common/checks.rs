//! Seeded property checks. Each returns a one-line summary on success and
//! the first counterexample on failure.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use fxnet::data::{Dataset, Split};
use fxnet::fxp::{
    convert, convert_f64, floor_to_grid, from_real, reset_rounding_events, round_nearest, round_stochastic,
    rounding_events, to_real, Exact, FxFormat, FxScalar, RoundingMode,
};
use fxnet::fxtensor::{
    conv2d, gemm, gemm_bias, gemm_strips, gemm_wide, inner_product, quantize, ConvGeometry, FxTensor, GemmSpec,
};
use fxnet::net::{FloatArith, NetSpec, Network, Precision};
use fxnet::rng::{ConstDraw, DrawSource, RoundRng, RoundStream};
use fxnet::sysarray::{dsp_round_with, perf_report, simulate_gemm, Lfsr, SysArrayConfig, SysError};

use super::oracle::{self, exact_parts};

pub type Check = Result<String, String>;

pub const FORMATS: [(u32, u32); 3] = [(2, 14), (4, 12), (8, 8)];

pub fn q(il: u32, fl: u32) -> FxFormat {
    FxFormat::new(il, fl).unwrap()
}

fn same_value(a: Exact, b: Exact) -> bool {
    let (na, da) = exact_parts(a);
    let (nb, db) = exact_parts(b);
    na * db == nb * da
}

fn cmp_exact(a: Exact, b: Exact) -> std::cmp::Ordering {
    let (na, da) = exact_parts(a);
    let (nb, db) = exact_parts(b);
    (na * db).cmp(&(nb * da))
}

fn mode_of(rng: &mut ChaCha8Rng) -> RoundingMode {
    if rng.random() {
        RoundingMode::Stochastic
    } else {
        RoundingMode::Nearest
    }
}

/// A rational of one of several shapes: short and long dyadics, values far
/// outside any format, and non-dyadic ratios.
pub fn random_exact(rng: &mut ChaCha8Rng) -> Exact {
    match rng.random_range(0..5) {
        0 => Exact::dyadic(rng.random_range(-(1i128 << 40)..(1i128 << 40)), rng.random_range(0..50)),
        1 => Exact::dyadic(rng.random::<i64>() as i128, rng.random_range(-20..90)),
        2 => Exact::ratio(rng.random_range(-(1i128 << 30)..(1i128 << 30)), rng.random_range(1..2000)),
        3 => Exact::dyadic(rng.random_range(-(1i128 << 20)..(1i128 << 20)), rng.random_range(0..30))
            .checked_div_int(rng.random_range(1..300))
            .unwrap(),
        _ => Exact::from_f64(rng.random_range(-300.0..300.0)).unwrap(),
    }
}

// ------------------------------------------------------------------ fxp

/// Empirical mean of stochastic rounding within 4 standard errors of `x`
/// for `per_format` random `x` in each format, `n` keyed draws each.
pub fn stochastic_unbiased(per_format: usize, n: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b1a5);
    let mut worst = 0.0f64;
    for (il, fl) in FORMATS {
        let f = q(il, fl);
        for j in 0..per_format {
            let extra = rng.random_range(1..=30u32);
            let lo = (f.min_mantissa() as i128) << extra;
            let hi = (f.max_mantissa() as i128) << extra;
            let num = rng.random_range(3 * lo + 1..3 * hi);
            let x = Exact::dyadic(num, (fl + extra) as i32).checked_div_int(3).unwrap();
            let (xn, xd) = exact_parts(x);
            let (floor, r) = (xn << fl as usize).div_mod_floor(&xd);
            let p = r.to_f64().unwrap() / xd.to_f64().unwrap();
            let floor = floor.to_i64().unwrap();
            let stream = RoundStream::new(0xb1a5, &format!("unbiased.{il}.{j}"), 0);
            let mut ups = 0u64;
            for i in 0..n {
                let m = convert(x, f, RoundingMode::Stochastic, stream.draw(i)).mantissa();
                match m - floor {
                    0 => {}
                    1 => ups += 1,
                    d => return Err(format!("x={x:?} in {f}: result {d} grid steps from the floor")),
                }
            }
            let expect = p * n as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            if sd == 0.0 {
                if ups != 0 {
                    return Err(format!("representable x={x:?} in {f} rounded up {ups} times"));
                }
                continue;
            }
            let z = (ups as f64 - expect) / sd;
            worst = worst.max(z.abs());
            if z.abs() > 4.0 {
                return Err(format!("x={x:?} in {f}: {ups} ups, expected {expect:.1} (z = {z:.2})"));
            }
        }
    }
    Ok(format!("{} values x {n} draws, worst |z| = {worst:.2}", per_format * FORMATS.len()))
}

/// The documented Monte Carlo example: 0.375 at FL 1 over 10^6 draws.
pub fn stochastic_example() -> Check {
    let f = q(4, 1);
    let x = Exact::dyadic(3, 3);
    let n = 1_000_000u64;
    let stream = RoundStream::new(7, "example", 0);
    let sum: i64 = (0..n).map(|i| convert(x, f, RoundingMode::Stochastic, stream.draw(i)).mantissa()).sum();
    let mean = sum as f64 * 0.5 / n as f64;
    let se = (0.75f64 * 0.25).sqrt() * 0.5 / (n as f64).sqrt();
    if (mean - 0.375).abs() > 3.0 * se {
        return Err(format!("mean {mean} vs 0.375 (3 SE = {:.2e})", 3.0 * se));
    }
    Ok(format!("mean {mean:.5}"))
}

/// Exact midpoints round down; anything above them rounds up.
pub fn midpoints_round_down(per_format: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3d);
    if !same_value(round_nearest(Exact::dyadic(1, 3), q(4, 2)), Exact::ZERO) {
        return Err("0.125 at FL 2 did not round to 0".into());
    }
    for (il, fl) in FORMATS {
        let f = q(il, fl);
        for _ in 0..per_format {
            let m = rng.random_range(f.min_mantissa()..f.max_mantissa()) as i128;
            let mid = Exact::dyadic(2 * m + 1, fl as i32 + 1);
            if !same_value(round_nearest(mid, f), Exact::dyadic(m, fl as i32)) {
                return Err(format!("midpoint above {m} in {f} did not round down"));
            }
            if convert(mid, f, RoundingMode::Nearest, 0).mantissa() as i128 != m {
                return Err(format!("convert sent midpoint above {m} in {f} up"));
            }
            let k = rng.random_range(1..40);
            let above = Exact::dyadic(((2 * m + 1) << k) + 1, fl as i32 + 1 + k);
            if convert(above, f, RoundingMode::Nearest, 0).mantissa() as i128 != m + 1 {
                return Err(format!("value just above midpoint {m} in {f} did not round up"));
            }
        }
    }
    Ok(format!("{} midpoints per format", per_format))
}

/// `convert`, `round_nearest`, `round_stochastic` and `floor_to_grid` agree
/// with the big-integer reference on random rationals; nearest rounding is
/// within half an ulp.
pub fn convert_matches_oracle(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0);
    for i in 0..cases {
        let x = random_exact(&mut rng);
        let wl = rng.random_range(2..=32u32);
        let f = FxFormat::with_wl(wl, rng.random_range(0..wl)).unwrap();
        let mode = mode_of(&mut rng);
        let draw: u64 = rng.random();
        let got = convert(x, f, mode, draw).mantissa();
        let want = oracle::convert_exact(x, f, mode, draw);
        if got != want {
            return Err(format!("case {i}: convert({x:?}, {f}, {mode:?}, {draw}) = {got}, oracle {want}"));
        }
        let (n, d) = exact_parts(x);
        let scaled = &n << f.fl() as usize;
        let near = oracle::nearest_grid(x, f.fl());
        let rn = round_nearest(x, f);
        if !same_value(rn, Exact::dyadic(near.to_i128().ok_or("grid index overflow")?, f.fl() as i32)) {
            return Err(format!("case {i}: round_nearest({x:?}, fl {})", f.fl()));
        }
        if ((&near * &d - &scaled).abs() << 1usize) > d {
            return Err(format!("case {i}: nearest rounding of {x:?} off by more than half an ulp"));
        }
        let fl_q = scaled.div_floor(&d).to_i128().ok_or("grid index overflow")?;
        if !same_value(floor_to_grid(x, f), Exact::dyadic(fl_q, f.fl() as i32)) {
            return Err(format!("case {i}: floor_to_grid({x:?}, fl {})", f.fl()));
        }
        let rs = round_stochastic(x, f, draw);
        let r = scaled.mod_floor(&d);
        let up = BigInt::from(draw) * &d < (r << 64usize);
        if !same_value(rs, Exact::dyadic(fl_q + up as i128, f.fl() as i32)) {
            return Err(format!("case {i}: round_stochastic({x:?}, fl {}, {draw})", f.fl()));
        }
    }
    Ok(format!("{cases} random rationals"))
}

/// `x <= y` implies `convert(x) <= convert(y)` under nearest rounding.
pub fn nearest_monotone(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x307);
    for i in 0..cases {
        let (il, fl) = FORMATS[i % FORMATS.len()];
        let f = q(il, fl);
        let (mut a, mut b) = (random_exact(&mut rng), random_exact(&mut rng));
        if i % 4 == 0 {
            // close pairs exercise neighbouring grid cells
            let e = Exact::dyadic(rng.random_range(0..8), fl as i32 + 2);
            b = a.checked_add(e).unwrap();
        }
        if cmp_exact(a, b).is_gt() {
            std::mem::swap(&mut a, &mut b);
        }
        let (ma, mb) = (convert(a, f, RoundingMode::Nearest, 0), convert(b, f, RoundingMode::Nearest, 0));
        if ma.mantissa() > mb.mantissa() {
            return Err(format!("{a:?} <= {b:?} but {} > {} in {f}", ma.mantissa(), mb.mantissa()));
        }
    }
    Ok(format!("{cases} ordered pairs"))
}

/// Results stay within the format for any input; inputs past a limit give
/// exactly that limit.
pub fn saturation_total(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a7);
    let extremes = [
        Exact::from_int(i128::MAX),
        Exact::from_int(i128::MIN + 1),
        Exact::dyadic(i128::MAX, -90),
        Exact::dyadic(i128::MIN + 1, -90),
        Exact::dyadic(1, -100),
        Exact::from_f64(f64::MAX).unwrap(),
        Exact::from_f64(-f64::MAX).unwrap(),
        Exact::dyadic(1, 120),
    ];
    for (il, fl) in FORMATS.into_iter().chain([(2, 0), (1, 31), (32, 0)]) {
        let f = q(il, fl);
        let upper = Exact::dyadic(f.max_mantissa() as i128, fl as i32);
        let lower = Exact::dyadic(f.min_mantissa() as i128, fl as i32);
        let xs: Vec<Exact> = extremes.iter().copied().chain((0..cases).map(|_| random_exact(&mut rng))).collect();
        for x in xs {
            for mode in [RoundingMode::Nearest, RoundingMode::Stochastic] {
                let m = convert(x, f, mode, rng.random()).mantissa();
                if !f.contains_mantissa(m) {
                    return Err(format!("{x:?} in {f} gave out-of-range mantissa {m}"));
                }
                if cmp_exact(x, upper).is_ge() && m != f.max_mantissa() {
                    return Err(format!("{x:?} >= upper limit of {f} gave {m}"));
                }
                if cmp_exact(x, lower).is_le() && m != f.min_mantissa() {
                    return Err(format!("{x:?} <= lower limit of {f} gave {m}"));
                }
            }
        }
        for v in [f64::INFINITY, f64::NEG_INFINITY, 1e300, -1e300] {
            let m = convert_f64(v, f, RoundingMode::Stochastic, u64::MAX).mantissa();
            let want = if v > 0.0 { f.max_mantissa() } else { f.min_mantissa() };
            if m != want {
                return Err(format!("{v} in {f} gave {m}"));
            }
        }
    }
    let f = q(2, 14);
    let examples = [(3.1, f.max_mantissa()), (-5.0, f.min_mantissa())];
    for (x, want) in examples {
        if convert_f64(x, f, RoundingMode::Nearest, 0).mantissa() != want {
            return Err(format!("{x} in {f} did not saturate"));
        }
    }
    if convert_f64(0.3, q(4, 2), RoundingMode::Nearest, 0).mantissa() != 1 {
        return Err("0.30 in <4,2> did not give mantissa 1".into());
    }
    Ok(format!("{} inputs per format and mode", cases + extremes.len()))
}

/// `from_real(to_real(s)) == s` for random scalars in both modes.
pub fn round_trip(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x77);
    for _ in 0..cases {
        let wl = rng.random_range(2..=32u32);
        let f = FxFormat::with_wl(wl, rng.random_range(0..wl)).unwrap();
        let s = FxScalar::new(rng.random_range(f.min_mantissa()..=f.max_mantissa()), f).unwrap();
        for mode in [RoundingMode::Nearest, RoundingMode::Stochastic] {
            if from_real(to_real(s), f, mode, rng.random()) != s {
                return Err(format!("{s:?} did not survive a round trip"));
            }
        }
    }
    Ok(format!("{cases} scalars"))
}

/// Chi-squared uniformity of the keyed generator over 256 bins, for keys
/// that vary by element index and by step.
pub fn rng_uniform(n: u64) -> Check {
    let rr = RoundRng::new(2024);
    let chi2 = ChiSquared::new(255.0).unwrap();
    let mut report = Vec::new();
    for (what, key) in [("index", 0usize), ("step", 1)] {
        let mut bins = [0u64; 256];
        for i in 0..n {
            let d = if key == 0 { rr.draw("uniformity", i, 0) } else { rr.draw("uniformity", 0, i) };
            bins[(d >> 56) as usize] += 1;
        }
        let e = n as f64 / 256.0;
        let stat: f64 = bins.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - chi2.cdf(stat);
        if p <= 0.001 {
            return Err(format!("draws over {what}: chi2 {stat:.1}, p {p:.2e}"));
        }
        report.push(format!("{what} p={p:.3}"));
        if rr.draw("uniformity", 5, 9) != rr.draw("uniformity", 5, 9) {
            return Err("same key gave different draws".into());
        }
    }
    Ok(report.join(", "))
}

// ------------------------------------------------------------- fxtensor

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, f: FxFormat) -> FxTensor {
    let n: usize = shape.iter().product();
    let style = rng.random_range(0..4);
    let (lo, hi) = (f.min_mantissa(), f.max_mantissa());
    let data = (0..n)
        .map(|_| match style {
            0 => rng.random_range(lo..=hi),
            1 => rng.random_range(-4..=4),
            2 => [lo, hi, 0, lo + 1][rng.random_range(0..4)],
            _ => rng.random_range(lo / 16..=hi / 16),
        } as i32)
        .collect();
    FxTensor::new(shape, data, f, "t").unwrap()
}

fn random_format(rng: &mut ChaCha8Rng, wl: u32) -> FxFormat {
    FxFormat::with_wl(wl, rng.random_range(0..wl)).unwrap()
}

fn compare(what: &str, case: usize, got: &FxTensor, want: &[i64]) -> Result<(), String> {
    let got: Vec<i64> = got.data().iter().map(|&m| m as i64).collect();
    if got != want {
        let i = got.iter().zip(want).position(|(a, b)| a != b).unwrap_or(0);
        return Err(format!("case {case} ({what}): element {i} is {}, oracle {}", got[i], want[i]));
    }
    Ok(())
}

/// `gemm`, `gemm_bias` and `conv2d` equal the big-integer reference bit for
/// bit on random shapes, formats and modes under identical keyed draws.
pub fn tensor_oracle(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let mut counts = [0usize; 3];
    for case in 0..cases {
        let wl = [8u32, 12, 16, 18][rng.random_range(0..4)];
        let fa = random_format(&mut rng, wl);
        let fb = random_format(&mut rng, wl);
        let out_wl = rng.random_range(2..=(2 * wl).min(32));
        let out = random_format(&mut rng, out_wl);
        let mode = mode_of(&mut rng);
        let spec = GemmSpec::new(out, mode);
        let draws = RoundStream::new(case as u64, "oracle", case as u64 * 3);
        let point = fa.fl() + fb.fl();
        let bias_fmt = FxFormat::with_wl(wl, rng.random_range(0..=point.min(wl - 1))).unwrap();
        let op = case % 3;
        counts[op] += 1;
        match op {
            0 | 1 => {
                let (l, k, m) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
                let a = random_tensor(&mut rng, vec![l, k], fa);
                let b = random_tensor(&mut rng, vec![k, m], fb);
                if op == 0 {
                    let got = gemm(&a, &b, &spec, &draws).map_err(|e| e.to_string())?;
                    compare("gemm", case, &got, &oracle::gemm(&a, &b, None, out, mode, &draws))?;
                } else {
                    let bias = random_tensor(&mut rng, vec![m], bias_fmt);
                    let got = gemm_bias(&a, &b, &bias, &spec, &draws).map_err(|e| e.to_string())?;
                    compare("gemm_bias", case, &got, &oracle::gemm(&a, &b, Some(&bias), out, mode, &draws))?;
                }
            }
            _ => {
                let geo = loop {
                    let (c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=8), rng.random_range(1..=8));
                    let (kh, kw) = (rng.random_range(1..=5), rng.random_range(1..=5));
                    if let Ok(g) =
                        ConvGeometry::new(c, h, w, kh, kw, rng.random_range(1..=2), rng.random_range(0..=2))
                    {
                        break g;
                    }
                };
                let (n, f) = (rng.random_range(1..=2), rng.random_range(1..=3));
                let x = random_tensor(&mut rng, vec![n, geo.channels, geo.height, geo.width], fa);
                let w = random_tensor(&mut rng, vec![f, geo.channels, geo.kh, geo.kw], fb);
                let bias = rng.random::<bool>().then(|| random_tensor(&mut rng, vec![f], bias_fmt));
                let got = conv2d(&x, &w, bias.as_ref(), &geo, &spec, &draws).map_err(|e| e.to_string())?;
                let want = oracle::conv2d(&x, &w, bias.as_ref(), &geo, out, mode, &draws);
                compare("conv2d", case, &got, &want)?;
            }
        }
    }
    Ok(format!("{cases} cases ({} gemm, {} gemm_bias, {} conv2d)", counts[0], counts[1], counts[2]))
}

/// The documented tensor examples: underflow of `[eps, eps, eps]` dotted
/// with itself, identity products, width of the worst-case accumulation,
/// and the bias-saturation case.
pub fn tensor_examples() -> Check {
    let f = q(2, 14);
    let eps = FxTensor::new(vec![3], vec![1, 1, 1], f, "e").unwrap();
    let near = inner_product(&eps, &eps, &GemmSpec::new(f, RoundingMode::Nearest), &ConstDraw(0)).unwrap();
    if near.mantissa() != 0 {
        return Err("3 eps^2 did not round to zero".into());
    }
    let n = 1_000_000u64;
    let sto = GemmSpec::new(f, RoundingMode::Stochastic);
    let ups: u64 = (0..n)
        .map(|i| inner_product(&eps, &eps, &sto, &RoundStream::new(1, "ip", i)).unwrap().mantissa() as u64)
        .sum();
    let p = 3.0 / 16384.0;
    let z = (ups as f64 - n as f64 * p) / (n as f64 * p * (1.0 - p)).sqrt();
    if z.abs() > 4.0 {
        return Err(format!("3 eps^2 rounded up {ups} times in {n}, expected {:.0}", n as f64 * p));
    }

    let g = q(4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_tensor(&mut rng, vec![5, 4], g);
    let eye = FxTensor::new(vec![5, 5], (0..25).map(|i| if i % 6 == 0 { 1 << 12 } else { 0 }).collect(), g, "I").unwrap();
    let prod = gemm(&eye, &b, &GemmSpec::new(g, RoundingMode::Stochastic), &RoundStream::new(1, "I", 0)).unwrap();
    if prod.data() != b.data() {
        return Err("identity * B != B".into());
    }

    for wl in [8u32, 16, 18] {
        let h = FxFormat::with_wl(wl, wl - 2).unwrap();
        let lo = h.min_mantissa() as i32;
        let a = FxTensor::new(vec![1, 64], vec![lo; 64], h, "a").unwrap();
        let bb = FxTensor::new(vec![64, 1], vec![lo; 64], h, "b").unwrap();
        let w = gemm_wide(&a, false, &bb, false).unwrap();
        let want = 64i128 << (2 * (wl - 1));
        if w.data()[0] != want || w.bits_used() > 6 + 2 * wl {
            return Err(format!("worst case at WL {wl}: {} in {} bits", w.data()[0], w.bits_used()));
        }
    }

    let zero = FxTensor::zeros(vec![2, 3], g, "z");
    let bias = FxTensor::new(vec![2], vec![g.max_mantissa() as i32, -77], g, "b").unwrap();
    let out = gemm_bias(&zero, &FxTensor::zeros(vec![3, 2], g, "z"), &bias, &GemmSpec::new(g, RoundingMode::Nearest), &ConstDraw(0)).unwrap();
    if out.data() != [g.max_mantissa() as i32, -77, g.max_mantissa() as i32, -77] {
        return Err(format!("zero * B + bias gave {:?}", out.data()));
    }
    let ones = FxTensor::new(vec![1, 1], vec![1 << 12], g, "o").unwrap();
    let sat = gemm_bias(&ones, &ones, &bias.clone(), &GemmSpec::new(g, RoundingMode::Nearest), &ConstDraw(0));
    if sat.is_ok() {
        return Err("bias of length 2 accepted for a 1-column product".into());
    }
    let b1 = FxTensor::new(vec![1], vec![g.max_mantissa() as i32], g, "b").unwrap();
    let sat = gemm_bias(&ones, &ones, &b1, &GemmSpec::new(g, RoundingMode::Stochastic), &RoundStream::new(0, "s", 0)).unwrap();
    if sat.data()[0] != g.max_mantissa() as i32 {
        return Err("upper-limit bias plus a positive product did not saturate".into());
    }
    Ok(format!("stochastic eps underflow z = {z:.2}"))
}

/// One conversion per output element of `gemm`, `gemm_bias` and `conv2d`.
pub fn single_rounding() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51);
    let f = q(4, 12);
    let spec = GemmSpec::new(f, RoundingMode::Stochastic);
    let d = RoundStream::new(0, "r", 0);
    for _ in 0..20 {
        let (l, k, m) = (rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9));
        let a = random_tensor(&mut rng, vec![l, k], f);
        let b = random_tensor(&mut rng, vec![k, m], f);
        let bias = random_tensor(&mut rng, vec![m], f);
        reset_rounding_events();
        gemm(&a, &b, &spec, &d).unwrap();
        let e1 = rounding_events();
        reset_rounding_events();
        gemm_bias(&a, &b, &bias, &spec, &d).unwrap();
        let e2 = rounding_events();
        if e1 != (l * m) as u64 || e2 != (l * m) as u64 {
            return Err(format!("{l}x{k}x{m}: {e1} and {e2} rounding events"));
        }
    }
    let geo = ConvGeometry::new(2, 6, 6, 3, 3, 1, 1).unwrap();
    let x = random_tensor(&mut rng, vec![2, 2, 6, 6], f);
    let w = random_tensor(&mut rng, vec![3, 2, 3, 3], f);
    reset_rounding_events();
    conv2d(&x, &w, None, &geo, &spec, &d).unwrap();
    let e = rounding_events();
    if e != 2 * 3 * 36 {
        return Err(format!("conv2d made {e} rounding events for 216 outputs"));
    }
    Ok("l*m events per product".into())
}

/// Maps a draw index of `C^T (m x l)` to the index of `C (l x m)`.
struct Transposed<'a> {
    inner: &'a dyn DrawSource,
    l: usize,
    m: usize,
}

impl DrawSource for Transposed<'_> {
    fn draw(&self, index: u64) -> u64 {
        let (c, r) = (index as usize / self.l, index as usize % self.l);
        self.inner.draw((r * self.m + c) as u64)
    }
}

fn transpose(t: &FxTensor) -> FxTensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let data = (0..r * c).map(|i| t.data()[(i % r) * c + i / r]).collect();
    FxTensor::new(vec![c, r], data, t.format(), t.tag()).unwrap()
}

/// Row-major, column-major and 4-strip parallel products agree.
pub fn order_independent(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0d);
    for case in 0..cases {
        let f = q(4, 12);
        let (l, k, m) = (rng.random_range(1..=17), rng.random_range(1..=17), rng.random_range(1..=17));
        let a = random_tensor(&mut rng, vec![l, k], f);
        let b = random_tensor(&mut rng, vec![k, m], f);
        let spec = GemmSpec::new(q(6, 10), RoundingMode::Stochastic);
        let d = RoundStream::new(case as u64, "order", 1);
        let row = gemm(&a, &b, &spec, &d).unwrap();
        let strips = gemm_strips(&a, &b, &spec, &d, 4).unwrap();
        let col = transpose(&gemm(&transpose(&b), &transpose(&a), &spec, &Transposed { inner: &d, l, m }).unwrap());
        if row.data() != strips.data() || row.data() != col.data() {
            return Err(format!("case {case}: evaluation orders disagree"));
        }
    }
    Ok(format!("{cases} products"))
}

/// Same keys give the same tensor on another thread.
pub fn thread_deterministic() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7d);
    let x = random_tensor(&mut rng, vec![64, 64], q(4, 12));
    let run = |x: &FxTensor| quantize(x, q(2, 8), RoundingMode::Stochastic, &RoundStream::new(3, "det", 4));
    let here = run(&x);
    let there = std::thread::scope(|s| (0..4).map(|_| s.spawn(|| run(&x))).map(|h| h.join().unwrap()).collect::<Vec<_>>());
    if there.iter().any(|t| t != &here) {
        return Err("quantize differs across threads".into());
    }
    Ok("4 threads".into())
}

// ------------------------------------------------------------------ net

pub fn toy_dataset(n: usize, shape: (usize, usize, usize), seed: u64) -> Dataset {
    let per = shape.0 * shape.1 * shape.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<u8> = (0..n * per).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    Dataset::new(Split::Train, shape, pixels, labels).unwrap()
}

/// Float-engine gradients of every parameter against central differences
/// with step `h`; returns the largest relative error.
pub fn gradient_check(spec: NetSpec, input: (usize, usize, usize), h: f64, tol: f64) -> Check {
    let ds = toy_dataset(6, input, 5);
    let idx: Vec<usize> = (0..6).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
    let mut net = Network::init(spec, FloatArith, 9, 0.3).map_err(|e| e.to_string())?;
    let x = net.input(&ds, &idx);
    let fwd = net.forward(x.clone(), "").map_err(|e| e.to_string())?;
    let g = net.backward(&fwd, &labels, 0.0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for layer in 0..net.spec.layers.len() {
        let Some((dw, db)) = g.params[layer].clone() else { continue };
        for (is_bias, analytic) in [(false, dw), (true, db)] {
            for k in 0..analytic.data.len() {
                let at = |v: f64, net: &mut Network<FloatArith>| {
                    let p = net.state.params[layer].as_mut().unwrap();
                    let t = if is_bias { &mut p.b } else { &mut p.w };
                    std::mem::replace(&mut t.data[k], v)
                };
                let orig = at(0.0, &mut net);
                at(orig + h, &mut net);
                let up = net.loss(x.clone(), &labels).map_err(|e| e.to_string())?;
                at(orig - h, &mut net);
                let down = net.loss(x.clone(), &labels).map_err(|e| e.to_string())?;
                at(orig, &mut net);
                let num = (up - down) / (2.0 * h);
                let an = analytic.data[k];
                let scale = num.abs().max(an.abs());
                let rel = if scale < 1e-9 { 0.0 } else { (num - an).abs() / scale };
                worst = worst.max(rel);
                if rel >= tol {
                    return Err(format!("layer {layer} {} {k}: numeric {num:.8e}, analytic {an:.8e}", if is_bias { "bias" } else { "weight" }));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} parameters, max relative error {worst:.2e}"))
}

/// The three-layer dense toy network.
pub fn toy_dense() -> NetSpec {
    NetSpec::builder("toy-dense", [1, 5, 5], Precision::uniform(q(4, 12)))
        .linear(16)
        .relu()
        .linear(12)
        .relu()
        .linear(10)
        .done()
        .unwrap()
}

pub fn toy_conv() -> NetSpec {
    NetSpec::builder("toy-conv", [2, 8, 8], Precision::uniform(q(4, 12)))
        .conv(3, 3, 1)
        .relu()
        .pool(2, 2)
        .conv(4, 3, 0)
        .relu()
        .linear(10)
        .done()
        .unwrap()
}

// ------------------------------------------------------------- sysarray

fn sim_spec(out: FxFormat) -> GemmSpec {
    GemmSpec::new(out, RoundingMode::Stochastic)
}

/// A single `n x n` tile with inner dimension `k` computes in `k + 2n - 2`
/// cycles.
pub fn tile_timing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x71);
    let f = q(4, 12);
    let mut cases = 0;
    for n in [1usize, 2, 3, 5, 8] {
        for k in [1usize, 3, 16, 61] {
            let a = random_tensor(&mut rng, vec![n, k], f);
            let b = random_tensor(&mut rng, vec![k, n], f);
            let s = simulate_gemm(&a, &b, &SysArrayConfig::with_n(n), &sim_spec(f)).map_err(|e| e.to_string())?;
            let want = (k + 2 * n - 2) as u64;
            if s.report.compute_cycles != want || s.report.tiles != 1 {
                return Err(format!("n={n} k={k}: {} cycles over {} tiles, expected {want}", s.report.compute_cycles, s.report.tiles));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (n, k) pairs"))
}

/// Simulator output equals `gemm` under the draws the LFSRs imply, and the
/// trace counts are consistent.
pub fn sim_matches_gemm(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e);
    for case in 0..cases {
        let wl = rng.random_range(4..=18u32);
        let (fa, fb) = (random_format(&mut rng, wl), random_format(&mut rng, wl));
        let point = fa.fl() + fb.fl();
        let drop = rng.random_range(0..=point.min(20));
        let fl_out = point - drop;
        let max_wl = (2 * wl).min(32);
        if fl_out >= max_wl {
            continue;
        }
        let out = FxFormat::new(rng.random_range(1..=max_wl - fl_out), fl_out).unwrap();
        let (l, k, m) = (rng.random_range(1..=20), rng.random_range(1..=20), rng.random_range(1..=20));
        let a = random_tensor(&mut rng, vec![l, k], fa);
        let b = random_tensor(&mut rng, vec![k, m], fb);
        let n = rng.random_range(1..=6);
        let cfg = SysArrayConfig {
            p: rng.random::<bool>().then(|| rng.random_range(1..=3)),
            lfsr_seed: rng.random(),
            ..SysArrayConfig::with_n(n)
        };
        let s = simulate_gemm(&a, &b, &cfg, &sim_spec(out)).map_err(|e| format!("case {case}: {e}"))?;
        let g = gemm(&a, &b, &sim_spec(out), &s.draws).map_err(|e| e.to_string())?;
        if s.result.data() != g.data() {
            return Err(format!("case {case}: {l}x{k}x{m} on n={n} differs from gemm"));
        }
        if s.report.ops != (2 * l * k * m) as u64 || s.report.macc_ops != (l * k * m) as u64 {
            return Err(format!("case {case}: op count {}", s.report.ops));
        }
        if s.report.reuse_a != m {
            return Err(format!("case {case}: A reused {} times, expected {m}", s.report.reuse_a));
        }
    }
    Ok(format!("{cases} random products"))
}

/// Maximal-length LFSRs visit every nonzero state once per period.
pub fn lfsr_periods(max_width: u32) -> Check {
    for k in 1..=max_width {
        let mut r = Lfsr::new(k, 1).map_err(|e| e.to_string())?;
        let period = (1u64 << k) - 1;
        let mut seen = vec![false; 1 << k];
        for _ in 0..period {
            let v = r.next_value() as usize;
            if v == 0 || seen[v] {
                return Err(format!("width {k}: state {v} repeated or zero"));
            }
            seen[v] = true;
        }
        if r.state() != 1 {
            return Err(format!("width {k}: period is not {period}"));
        }
    }
    Ok(format!("widths 1..={max_width}"))
}

/// Over one LFSR period, residue `m` of `k` dropped bits rounds up exactly
/// `m` times out of `2^k - 1` (the zero state never occurs).
pub fn dsp_round_distribution(max_k: u32) -> Check {
    let out = q(8, 4);
    for k in 1..=max_k {
        for m in 0..(1i128 << k) {
            let mut r = Lfsr::new(k, 1).unwrap();
            let base = 37i128 << k;
            let ups = (0..(1u64 << k) - 1)
                .filter(|_| dsp_round_with(base + m, k, out, r.next_value()).mantissa() as i128 == 38)
                .count() as i128;
            if ups != m {
                return Err(format!("k={k}: residue {m} rounded up {ups} times"));
            }
        }
    }
    let mut r = Lfsr::new(4, 3).unwrap();
    for _ in 0..15 {
        if dsp_round_with(5 << 4, 4, out, r.next_value()).mantissa() != 5 {
            return Err("exact multiple changed by the draw".into());
        }
        if dsp_round_with(1 << 40, 4, out, r.next_value()).mantissa() != out.max_mantissa() {
            return Err("overflowing accumulator did not saturate".into());
        }
    }
    Ok(format!("k = 1..={max_k}, every residue"))
}

/// Total cycles never decrease as any dimension grows, across array
/// sizes, block multipliers and memory bandwidths.
pub fn cycles_monotone(configs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x33);
    let f = q(4, 12);
    let mut n_cmp = 0;
    for _ in 0..configs {
        let cfg = SysArrayConfig {
            p: [None, Some(1), Some(2)][rng.random_range(0..3)],
            bandwidth: [None, Some(0.5), Some(3.0)][rng.random_range(0..3)],
            ..SysArrayConfig::with_n(rng.random_range(1..=5))
        };
        let (l, k, m) = (rng.random_range(1..=14), rng.random_range(1..=14), rng.random_range(1..=14));
        let mut cycles = |l: usize, k: usize, m: usize| -> Result<u64, String> {
            let a = random_tensor(&mut rng, vec![l, k], f);
            let b = random_tensor(&mut rng, vec![k, m], f);
            Ok(simulate_gemm(&a, &b, &cfg, &sim_spec(f)).map_err(|e| e.to_string())?.report.total_cycles)
        };
        let base = cycles(l, k, m)?;
        for (dl, dk, dm) in [(1, 0, 0), (0, 1, 0), (0, 0, 1), (3, 2, 4)] {
            let c = cycles(l + dl, k + dk, m + dm)?;
            if c < base {
                return Err(format!("{cfg:?} {l}x{k}x{m}: {base} cycles, grown by ({dl},{dk},{dm}): {c}"));
            }
            n_cmp += 1;
        }
    }
    Ok(format!("{n_cmp} comparisons over {configs} configurations"))
}

/// Saturated 18-bit inputs with the deepest safe inner dimension do not
/// overflow the 48-bit accumulator; one step deeper does.
pub fn worst_case_accumulation() -> Check {
    let f = FxFormat::with_wl(18, 16).unwrap();
    let cfg = SysArrayConfig::with_n(2);
    let depth = cfg.max_safe_depth() as usize;
    let lo = f.min_mantissa() as i32;
    let run = |k: usize| {
        let a = FxTensor::new(vec![2, k], vec![lo; 2 * k], f, "a").unwrap();
        let b = FxTensor::new(vec![k, 2], vec![lo; 2 * k], f, "b").unwrap();
        simulate_gemm(&a, &b, &SysArrayConfig { l2_capacity: 1 << 24, ..cfg.clone() }, &sim_spec(q(18, 14)))
    };
    let ok = run(depth).map_err(|e| format!("depth {depth}: {e}"))?;
    if ok.report.max_acc_bits > cfg.acc_width {
        return Err(format!("{} accumulator bits used", ok.report.max_acc_bits));
    }
    if !matches!(run(2 * depth), Err(SysError::Overflow { .. })) {
        return Err("doubling the depth did not report overflow".into());
    }
    Ok(format!("k = {depth}, {} of {} bits", ok.report.max_acc_bits, cfg.acc_width))
}

/// Throughput and efficiency of the 28 x 28 array at 166 MHz and 7 W, and
/// the rounding-unit share of DSP slices.
pub fn perf_numbers() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = q(2, 14);
    let a = random_tensor(&mut rng, vec![224, 256], f);
    let b = random_tensor(&mut rng, vec![256, 224], f);
    let s = simulate_gemm(&a, &b, &SysArrayConfig::default(), &sim_spec(f)).map_err(|e| e.to_string())?;
    let p = perf_report(&s.report, 166e6, Some(7.0)).ok_or("no report")?;
    let gops = p.gops();
    let eff = p.gops_per_watt().unwrap();
    if (gops - 260.0).abs() > 2.6 || (eff - 37.0).abs() > 0.37 {
        return Err(format!("{gops:.2} G-ops/s, {eff:.2} G-ops/s/W"));
    }
    let cfg = SysArrayConfig::default();
    if cfg.rounding_units() != 28 || cfg.dsp_units() != 812 || cfg.rounding_overhead() >= 0.04 {
        return Err(format!("{} rounding units of {}", cfg.rounding_units(), cfg.dsp_units()));
    }
    Ok(format!(
        "{gops:.2} G-ops/s (peak {:.2}), {eff:.2} G-ops/s/W, rounding units {}/{} = {:.2}%",
        p.peak_gops(),
        cfg.rounding_units(),
        cfg.dsp_units(),
        100.0 * cfg.rounding_overhead()
    ))
}
