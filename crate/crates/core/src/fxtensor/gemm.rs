//! Exact integer matrix products over mantissas.
//!
//! Two kernels produce the same exact sums. The fast one runs the product
//! through `f64` GEMM: every operand is an integer below `2^26`, the inner
//! dimension is cut into chunks whose partial sums stay below `2^53`, and
//! within that range every `f64` addition, multiplication and FMA is exact
//! regardless of summation order. Chunk results are then added as `i128`.
//! When operands are too wide for that (large word lengths) the plain
//! `i128` kernel is used.

use super::{FxTensor, TensorError, WideTensor};

/// Largest magnitude bit-length for which the f64 kernel is used at all.
const F64_MANTISSA_BITS: u32 = 53;
/// Below this chunk length the f64 kernel stops paying off.
const MIN_F64_CHUNK: usize = 8;

/// A tensor viewed as a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [i32],
    pub rows: usize,
    pub cols: usize,
    /// Row and column strides into `data`.
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatView<'a> {
    pub fn of(t: &'a FxTensor, trans: bool) -> Self {
        let rows = t.shape().first().copied().unwrap_or(1);
        let cols = t.len().checked_div(rows).unwrap_or(0);
        Self::from_slice(t.data(), rows, cols, trans)
    }

    pub fn from_slice(data: &'a [i32], rows: usize, cols: usize, trans: bool) -> Self {
        if trans {
            Self { data, rows: cols, cols: rows, rs: 1, cs: cols }
        } else {
            Self { data, rows, cols, rs: cols, cs: 1 }
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> i32 {
        self.data[i * self.rs + j * self.cs]
    }

    fn max_bits(&self) -> u32 {
        let m = self.data.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
        32 - m.leading_zeros()
    }
}

pub(crate) fn ceil_log2(d: usize) -> u32 {
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

/// `C = A * B` accumulated exactly. `point` is the binary point of the
/// products (`fl_a + fl_b`).
pub(crate) fn matmul_exact(
    a: MatView<'_>,
    b: MatView<'_>,
    wl_bound: u32,
    point: u32,
) -> Result<WideTensor, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Shape(format!(
            "inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (l, k, m) = (a.rows, a.cols, b.cols);
    let needed = ceil_log2(k.max(1)) + wl_bound;
    if needed > 127 {
        return Err(TensorError::AccumulatorWidth { needed, available: 127 });
    }
    let mut out = vec![0i128; l * m];
    if l == 0 || m == 0 || k == 0 {
        return Ok(WideTensor::new(vec![l, m], out, point));
    }
    let prod_bits = a.max_bits() + b.max_bits();
    if prod_bits < F64_MANTISSA_BITS {
        let chunk = 1usize << (F64_MANTISSA_BITS - prod_bits).min(40);
        if chunk >= MIN_F64_CHUNK || chunk >= k {
            matmul_f64(a, b, chunk.min(k), &mut out);
            return Ok(WideTensor::new(vec![l, m], out, point));
        }
    }
    matmul_i128(a, b, &mut out);
    Ok(WideTensor::new(vec![l, m], out, point))
}

fn to_f64_buf(v: MatView<'_>) -> Vec<f64> {
    v.data.iter().map(|&x| x as f64).collect()
}

fn matmul_f64(a: MatView<'_>, b: MatView<'_>, chunk: usize, out: &mut [i128]) {
    let (l, k, m) = (a.rows, a.cols, b.cols);
    let af = to_f64_buf(a);
    let bf = to_f64_buf(b);
    let mut c = vec![0f64; l * m];
    let mut p0 = 0;
    while p0 < k {
        let kc = chunk.min(k - p0);
        // SAFETY: the views address `af`/`bf` within bounds: element (i, p)
        // of A lives at i*rs + p*cs < len for i < l, p < k, and likewise B.
        unsafe {
            matrixmultiply::dgemm(
                l,
                kc,
                m,
                1.0,
                af.as_ptr().add(p0 * a.cs),
                a.rs as isize,
                a.cs as isize,
                bf.as_ptr().add(p0 * b.rs),
                b.rs as isize,
                b.cs as isize,
                0.0,
                c.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        for (o, &v) in out.iter_mut().zip(&c) {
            *o += v as i128;
        }
        p0 += kc;
    }
}

pub(crate) fn matmul_i128(a: MatView<'_>, b: MatView<'_>, out: &mut [i128]) {
    let (l, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..l {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.at(i, p) as i64;
            if av == 0 {
                continue;
            }
            for (j, o) in row.iter_mut().enumerate() {
                *o += (av * b.at(p, j) as i64) as i128;
            }
        }
    }
}
