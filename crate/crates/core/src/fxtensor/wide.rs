//! Wide accumulators: exact sums held at the product binary point until the
//! single conversion back into a word format.

use crate::fxp::{convert, Exact, FxFormat, FxScalar, RoundingMode};
use crate::rng::DrawSource;

use super::{FxTensor, TensorError};

/// Scalar accumulator for one inner product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WideAcc {
    value: i128,
    point: u32,
}

impl WideAcc {
    pub fn new(point: u32) -> Self {
        Self { value: 0, point }
    }

    #[inline]
    pub fn add_product(&mut self, a: i64, b: i64) {
        self.value += (a as i128) * (b as i128);
    }

    /// Add a mantissa with `fl` fractional bits, aligned to the point.
    pub fn add_aligned(&mut self, m: i64, fl: u32) -> Result<(), TensorError> {
        if fl > self.point {
            return Err(TensorError::BiasAlignment { fl, point: self.point });
        }
        self.value += (m as i128) << (self.point - fl);
        Ok(())
    }

    pub fn value(&self) -> i128 {
        self.value
    }

    pub fn point(&self) -> u32 {
        self.point
    }

    /// Two's-complement bits needed to hold the current value.
    pub fn bits_used(&self) -> u32 {
        bits_signed(self.value)
    }

    pub fn to_exact(&self) -> Exact {
        Exact::dyadic(self.value, self.point as i32)
    }

    pub fn convert(&self, format: FxFormat, mode: RoundingMode, draw: u64) -> FxScalar {
        convert(self.to_exact(), format, mode, draw)
    }
}

pub(crate) fn bits_signed(v: i128) -> u32 {
    if v >= 0 {
        129 - v.leading_zeros()
    } else {
        129 - (!v).leading_zeros()
    }
}

/// A tensor of exact accumulator values sharing one binary point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WideTensor {
    shape: Vec<usize>,
    data: Vec<i128>,
    point: u32,
}

impl WideTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i128>, point: u32) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length");
        Self { shape, data, point }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i128] {
        &self.data
    }

    pub fn point(&self) -> u32 {
        self.point
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn value(&self, i: usize) -> Exact {
        Exact::dyadic(self.data[i], self.point as i32)
    }

    pub fn bits_used(&self) -> u32 {
        self.data.iter().map(|&v| bits_signed(v)).max().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    fn aligned(&self, bias: &FxTensor, expect: usize) -> Result<Vec<i128>, TensorError> {
        if bias.len() != expect {
            return Err(TensorError::Shape(format!(
                "bias has {} elements, expected {expect}",
                bias.len()
            )));
        }
        let fl = bias.format().fl();
        if fl > self.point {
            return Err(TensorError::BiasAlignment { fl, point: self.point });
        }
        let up = self.point - fl;
        Ok(bias.data().iter().map(|&b| (b as i128) << up).collect())
    }

    fn rows_cols(&self) -> (usize, usize) {
        let rows = self.shape.first().copied().unwrap_or(1);
        (rows, self.data.len().checked_div(rows).unwrap_or(0))
    }

    /// Add `bias[j]` to every element of column `j`.
    pub fn add_col_bias(&mut self, bias: &FxTensor) -> Result<(), TensorError> {
        let (_, cols) = self.rows_cols();
        let b = self.aligned(bias, cols)?;
        for row in self.data.chunks_mut(cols.max(1)) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok(())
    }

    /// Add `bias[i]` to every element of row `i`.
    pub fn add_row_bias(&mut self, bias: &FxTensor) -> Result<(), TensorError> {
        let (rows, cols) = self.rows_cols();
        let b = self.aligned(bias, rows)?;
        for (row, bb) in self.data.chunks_mut(cols.max(1)).zip(&b) {
            for v in row {
                *v += bb;
            }
        }
        Ok(())
    }

    /// Exact sums over rows: a vector with one entry per column.
    pub fn column_sums(&self) -> WideTensor {
        let (_, cols) = self.rows_cols();
        let mut out = vec![0i128; cols];
        for row in self.data.chunks(cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        WideTensor::new(vec![cols], out, self.point)
    }

    /// Exact sums over columns: a vector with one entry per row.
    pub fn row_sums(&self) -> WideTensor {
        let (rows, cols) = self.rows_cols();
        let out = self.data.chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        WideTensor::new(vec![rows], out, self.point)
    }

    /// One conversion per element; element `i` uses draw `i`.
    pub fn convert(
        &self,
        format: FxFormat,
        mode: RoundingMode,
        draws: &dyn DrawSource,
    ) -> FxTensor {
        self.convert_map(format, mode, draws, |_, e| e)
    }

    /// Like [`convert`](Self::convert), but the exact value of element `i`
    /// is first passed through `f` (for example to divide by a batch size
    /// or add a decay term). `f` must not round.
    pub fn convert_map(
        &self,
        format: FxFormat,
        mode: RoundingMode,
        draws: &dyn DrawSource,
        f: impl Fn(usize, Exact) -> Exact,
    ) -> FxTensor {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = f(i, Exact::dyadic(v, self.point as i32));
                let d = match mode {
                    RoundingMode::Stochastic => draws.draw(i as u64),
                    RoundingMode::Nearest => 0,
                };
                convert(x, format, mode, d).mantissa() as i32
            })
            .collect();
        FxTensor::from_parts(self.shape.clone(), data, format, draws.tag().to_string())
    }
}

/// Reorders a `[F, N, S]` tensor into `[N, F, S]`.
pub(crate) fn swap_leading<T: Copy + Default>(data: &[T], f: usize, n: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for fi in 0..f {
        for ni in 0..n {
            let src = &data[(fi * n + ni) * s..(fi * n + ni + 1) * s];
            out[(ni * f + fi) * s..(ni * f + fi + 1) * s].copy_from_slice(src);
        }
    }
    out
}
