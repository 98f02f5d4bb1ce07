//! Quantized tensors and two-step multiply-accumulate linear algebra.
//!
//! Every product-sum is accumulated exactly in a wide register (binary
//! point `fl_a + fl_b`) and converted to the output format exactly once.
//! Convolution is lowered to the same GEMM through `im2col`; pooling and
//! ReLU are exact mantissa operations and never round.

mod conv;
mod gemm;
mod wide;

use thiserror::Error;

use crate::fxp::{convert, convert_f64, Exact, FormatError, FxFormat, FxScalar, RoundingMode};
use crate::rng::DrawSource;

pub use conv::{col2im_wide, conv2d, conv2d_backward_input, conv2d_backward_weights, im2col, ConvGeometry};
pub use wide::{WideAcc, WideTensor};

pub(crate) use gemm::MatView;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operand word lengths differ: {a} vs {b}")]
    FormatMismatch { a: FxFormat, b: FxFormat },
    #[error("accumulator would need {needed} bits; only {available} available")]
    AccumulatorWidth { needed: u32, available: u32 },
    #[error("bias with {fl} fractional bits cannot be aligned to accumulator point {point}")]
    BiasAlignment { fl: u32, point: u32 },
    #[error("output format {out} is wider than the exact product ({product_wl} bits)")]
    OutputTooWide { out: FxFormat, product_wl: u32 },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A shaped array of mantissas sharing one format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    format: FxFormat,
    tag: String,
}

impl FxTensor {
    pub fn new(
        shape: Vec<usize>,
        data: Vec<i32>,
        format: FxFormat,
        tag: impl Into<String>,
    ) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(&m) = data.iter().find(|&&m| !format.contains_mantissa(m as i64)) {
            return Err(FormatError::MantissaRange { mantissa: m as i64, format }.into());
        }
        Ok(Self { shape, data, format, tag: tag.into() })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i32>, format: FxFormat, tag: String) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, format, tag }
    }

    pub fn zeros(shape: Vec<usize>, format: FxFormat, tag: impl Into<String>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0; n], format, tag: tag.into() }
    }

    /// Quantize real values; element `i` uses draw `i`.
    pub fn from_f64(
        shape: Vec<usize>,
        values: &[f64],
        format: FxFormat,
        mode: RoundingMode,
        draws: &dyn DrawSource,
    ) -> Result<Self, TensorError> {
        Self::from_exact_fn(shape, values.len(), format, mode, draws, |i| {
            convert_f64(values[i], format, mode, draw_for(mode, draws, i))
        })
    }

    /// Quantize exact values produced by `value(i)`.
    pub fn from_exact(
        shape: Vec<usize>,
        len: usize,
        format: FxFormat,
        mode: RoundingMode,
        draws: &dyn DrawSource,
        value: impl Fn(usize) -> Exact,
    ) -> Result<Self, TensorError> {
        Self::from_exact_fn(shape, len, format, mode, draws, |i| {
            convert(value(i), format, mode, draw_for(mode, draws, i))
        })
    }

    fn from_exact_fn(
        shape: Vec<usize>,
        len: usize,
        format: FxFormat,
        _mode: RoundingMode,
        draws: &dyn DrawSource,
        f: impl Fn(usize) -> FxScalar,
    ) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != len {
            return Err(TensorError::Shape(format!("shape {shape:?} needs {n} elements, got {len}")));
        }
        let data = (0..len).map(|i| f(i).mantissa() as i32).collect();
        Ok(Self { shape, data, format, tag: draws.tag().to_string() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn format(&self) -> FxFormat {
        self.format
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scalar(&self, i: usize) -> FxScalar {
        FxScalar::new_unchecked(self.data[i] as i64, self.format)
    }

    pub fn value(&self, i: usize) -> Exact {
        Exact::dyadic(self.data[i] as i128, self.format.fl() as i32)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        let eps = self.format.epsilon();
        self.data.iter().map(|&m| m as f64 * eps).collect()
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value-preserving move to a format with `extra` more fractional bits.
    pub fn widen(&self, extra: u32) -> Result<Self, TensorError> {
        let format = self.format.widened(extra)?;
        let data = self.data.iter().map(|&m| m << extra).collect();
        Ok(Self { shape: self.shape.clone(), data, format, tag: self.tag.clone() })
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&m| m == 0).count()
    }

    /// Rows of a tensor viewed as a matrix over its leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Copy out a subset of leading-dimension slices (e.g. minibatch rows).
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let per = if self.rows() == 0 { 0 } else { self.len() / self.rows() };
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data, format: self.format, tag: self.tag.clone() }
    }
}

#[inline]
fn draw_for(mode: RoundingMode, draws: &dyn DrawSource, i: usize) -> u64 {
    match mode {
        RoundingMode::Stochastic => draws.draw(i as u64),
        RoundingMode::Nearest => 0,
    }
}

/// Output format and rounding mode of a product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmSpec {
    pub out_format: FxFormat,
    pub mode: RoundingMode,
}

impl GemmSpec {
    pub fn new(out_format: FxFormat, mode: RoundingMode) -> Self {
        Self { out_format, mode }
    }
}

fn check_operands(a: &FxTensor, b: &FxTensor, spec: Option<&GemmSpec>) -> Result<(), TensorError> {
    if a.format.wl() != b.format.wl() {
        return Err(TensorError::FormatMismatch { a: a.format, b: b.format });
    }
    if let Some(spec) = spec {
        let product_wl = a.format.wl() + b.format.wl();
        if spec.out_format.wl() > product_wl {
            return Err(TensorError::OutputTooWide { out: spec.out_format, product_wl });
        }
    }
    Ok(())
}

/// Exact `op(A) * op(B)` into a wide tensor; nothing is rounded.
///
/// Both operands are read as matrices over their leading dimension. They
/// must share a word length; their fractional lengths may differ, and the
/// result point is `fl_a + fl_b`.
pub fn gemm_wide(a: &FxTensor, trans_a: bool, b: &FxTensor, trans_b: bool) -> Result<WideTensor, TensorError> {
    check_operands(a, b, None)?;
    gemm::matmul_exact(
        MatView::of(a, trans_a),
        MatView::of(b, trans_b),
        a.format.wl() + b.format.wl(),
        a.format.fl() + b.format.fl(),
    )
}

/// Inner product with a single rounding of the exact sum (draw index 0).
pub fn inner_product(
    a: &FxTensor,
    b: &FxTensor,
    spec: &GemmSpec,
    draws: &dyn DrawSource,
) -> Result<FxScalar, TensorError> {
    check_operands(a, b, Some(spec))?;
    if a.len() != b.len() || a.is_empty() {
        return Err(TensorError::Shape(format!(
            "inner product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = WideAcc::new(a.format.fl() + b.format.fl());
    for (&x, &y) in a.data.iter().zip(&b.data) {
        acc.add_product(x as i64, y as i64);
    }
    Ok(acc.convert(spec.out_format, spec.mode, draw_for(spec.mode, draws, 0)))
}

fn require_2d(t: &FxTensor, what: &str) -> Result<(), TensorError> {
    if t.shape.len() != 2 {
        return Err(TensorError::Shape(format!("{what} must be 2-D, got {:?}", t.shape)));
    }
    Ok(())
}

/// `A (l x k) * B (k x m)`, one rounding per output; output element
/// `(r, c)` uses draw `r * m + c`.
pub fn gemm(a: &FxTensor, b: &FxTensor, spec: &GemmSpec, draws: &dyn DrawSource) -> Result<FxTensor, TensorError> {
    require_2d(a, "A")?;
    require_2d(b, "B")?;
    check_operands(a, b, Some(spec))?;
    Ok(gemm_wide(a, false, b, false)?.convert(spec.out_format, spec.mode, draws))
}

/// `A * B + bias` with the bias added inside the accumulator.
pub fn gemm_bias(
    a: &FxTensor,
    b: &FxTensor,
    bias: &FxTensor,
    spec: &GemmSpec,
    draws: &dyn DrawSource,
) -> Result<FxTensor, TensorError> {
    require_2d(a, "A")?;
    require_2d(b, "B")?;
    check_operands(a, b, Some(spec))?;
    let mut w = gemm_wide(a, false, b, false)?;
    w.add_col_bias(bias)?;
    Ok(w.convert(spec.out_format, spec.mode, draws))
}

/// [`gemm`] computed as `strips` row blocks on separate threads. Keys are
/// global output indices, so the result equals the sequential one.
pub fn gemm_strips(
    a: &FxTensor,
    b: &FxTensor,
    spec: &GemmSpec,
    draws: &dyn DrawSource,
    strips: usize,
) -> Result<FxTensor, TensorError> {
    require_2d(a, "A")?;
    require_2d(b, "B")?;
    check_operands(a, b, Some(spec))?;
    let (l, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k {
        return Err(TensorError::Shape(format!("{:?} * {:?}", a.shape, b.shape)));
    }
    let strips = strips.clamp(1, l.max(1));
    let per = l.div_ceil(strips).max(1);
    let point = a.format.fl() + b.format.fl();
    let wl = a.format.wl() + b.format.wl();
    let parts: Vec<Result<Vec<i32>, TensorError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..l)
            .step_by(per)
            .map(|r0| {
                let r1 = (r0 + per).min(l);
                s.spawn(move || {
                    let av = MatView::from_slice(&a.data[r0 * k..r1 * k], r1 - r0, k, false);
                    let wide = gemm::matmul_exact(av, MatView::of(b, false), wl, point)?;
                    Ok(wide
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let idx = r0 * m + i;
                            let d = draw_for(spec.mode, draws, idx);
                            convert(Exact::dyadic(v, point as i32), spec.out_format, spec.mode, d)
                                .mantissa() as i32
                        })
                        .collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gemm strip panicked")).collect()
    });
    let mut data = Vec::with_capacity(l * m);
    for p in parts {
        data.extend(p?);
    }
    Ok(FxTensor::from_parts(vec![l, m], data, spec.out_format, draws.tag().to_string()))
}

/// Elementwise conversion into another format; element `i` uses draw `i`.
pub fn quantize(x: &FxTensor, format: FxFormat, mode: RoundingMode, draws: &dyn DrawSource) -> FxTensor {
    let fl = x.format.fl() as i32;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            convert(Exact::dyadic(m as i128, fl), format, mode, draw_for(mode, draws, i)).mantissa() as i32
        })
        .collect();
    FxTensor::from_parts(x.shape.clone(), data, format, draws.tag().to_string())
}

pub fn relu(x: &FxTensor) -> FxTensor {
    FxTensor { data: x.data.iter().map(|&m| m.max(0)).collect(), ..x.clone() }
}

/// Gradient through ReLU: pass `dy` where the forward output was positive.
pub fn relu_backward(dy: &FxTensor, y: &FxTensor) -> Result<FxTensor, TensorError> {
    if dy.len() != y.len() {
        return Err(TensorError::Shape("relu backward length mismatch".into()));
    }
    let data = dy.data.iter().zip(&y.data).map(|(&d, &v)| if v > 0 { d } else { 0 }).collect();
    Ok(FxTensor { data, ..dy.clone() })
}

/// Output side length of a pooling window sweep; trailing rows that do
/// not fill a whole window are dropped.
pub fn pool_output_size(input: usize, window: usize, stride: usize) -> Result<usize, TensorError> {
    if window == 0 || stride == 0 || window > input {
        return Err(TensorError::Geometry(format!(
            "pooling window {window} / stride {stride} incompatible with size {input}"
        )));
    }
    Ok((input - window) / stride + 1)
}

/// Max pooling over `N x C x H x W`. Returns the pooled tensor and, per
/// output element, the flat input index of its maximum (lowest index wins
/// ties).
pub fn maxpool(x: &FxTensor, window: usize, stride: usize) -> Result<(FxTensor, Vec<u32>), TensorError> {
    if x.shape.len() != 4 {
        return Err(TensorError::Shape(format!("maxpool expects NCHW, got {:?}", x.shape)));
    }
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let oh = pool_output_size(h, window, stride)?;
    let ow = pool_output_size(w, window, stride)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data[best]);
                arg.push(best as u32);
            }
        }
    }
    let t = FxTensor { shape: vec![n, c, oh, ow], data: out, format: x.format, tag: x.tag.clone() };
    Ok((t, arg))
}

/// Route pooled gradients back to the recorded maxima. Overlapping windows
/// sum exactly; the sum saturates to the format range.
pub fn maxpool_backward(dy: &FxTensor, argmax: &[u32], input_shape: &[usize]) -> Result<FxTensor, TensorError> {
    if dy.len() != argmax.len() {
        return Err(TensorError::Shape("argmax length differs from gradient".into()));
    }
    let n: usize = input_shape.iter().product();
    let mut acc = vec![0i64; n];
    for (&g, &i) in dy.data.iter().zip(argmax) {
        acc[i as usize] += g as i64;
    }
    let (lo, hi) = (dy.format.min_mantissa(), dy.format.max_mantissa());
    let data = acc.into_iter().map(|v| v.clamp(lo, hi) as i32).collect();
    Ok(FxTensor { shape: input_shape.to_vec(), data, format: dy.format, tag: dy.tag.clone() })
}
