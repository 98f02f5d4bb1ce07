//! The two arithmetic engines a network can run on.
//!
//! [`FixedArith`] quantizes every layer output, back-propagated error,
//! gradient and update exactly once, with the two-step multiply-accumulate.
//! [`FloatArith`] runs the same formulas in `f64` with no quantization; it
//! is the baseline and the reference for gradient checks.

use std::cell::Cell;

use crate::fxp::{convert, Exact, FxFormat, RoundingMode};
use crate::fxtensor::{
    conv2d, conv2d_backward_input, conv2d_backward_weights, gemm_wide, im2col, maxpool, maxpool_backward,
    relu, relu_backward, ConvGeometry, FxTensor, GemmSpec, TensorError, WideTensor,
};
use crate::rng::{DrawSource, RoundRng};

use super::{NetError, TensorRecord};

/// Tensor operations needed to train a network.
///
/// Linear layers hold weights `out x in` and map `N x in` to `N x out`.
/// Convolution filters are `F x C x kh x kw` over `N x C x H x W` inputs.
/// `fmt` arguments are ignored by engines without formats. Gradients of
/// parameters are means over the minibatch; weight gradients include the
/// decay term `decay * W`.
pub trait Arith {
    type T: Clone + std::fmt::Debug;

    fn name(&self) -> &'static str;
    /// Rounding keys of subsequent operations use this step.
    fn set_step(&mut self, step: u64);

    /// Images `idx` of a byte dataset, normalized by 255.
    fn input(&self, pixels: &[u8], image_shape: [usize; 3], idx: &[usize], fmt: FxFormat) -> Self::T;
    fn param(&self, shape: Vec<usize>, values: &[f64], fmt: FxFormat, tag: &str) -> Self::T;
    fn zeros(&self, shape: Vec<usize>, fmt: FxFormat) -> Self::T;
    fn values(&self, t: &Self::T) -> Vec<f64>;
    fn shape<'a>(&self, t: &'a Self::T) -> &'a [usize];
    fn reshape(&self, t: Self::T, shape: Vec<usize>) -> Result<Self::T, NetError>;
    fn format_of(&self, t: &Self::T) -> Option<FxFormat>;

    fn linear(&self, x: &Self::T, w: &Self::T, b: &Self::T, fmt: FxFormat, tag: &str) -> Result<Self::T, NetError>;
    fn linear_grad_input(&self, dy: &Self::T, w: &Self::T, fmt: FxFormat, tag: &str) -> Result<Self::T, NetError>;
    fn linear_grad_params(
        &self,
        dy: &Self::T,
        x: &Self::T,
        w: &Self::T,
        decay: f64,
        tag: &str,
    ) -> Result<(Self::T, Self::T), NetError>;

    fn conv(
        &self,
        x: &Self::T,
        w: &Self::T,
        b: &Self::T,
        geo: &ConvGeometry,
        fmt: FxFormat,
        tag: &str,
    ) -> Result<Self::T, NetError>;
    fn conv_grad_input(
        &self,
        dy: &Self::T,
        w: &Self::T,
        geo: &ConvGeometry,
        fmt: FxFormat,
        tag: &str,
    ) -> Result<Self::T, NetError>;
    fn conv_grad_params(
        &self,
        dy: &Self::T,
        x: &Self::T,
        w: &Self::T,
        geo: &ConvGeometry,
        decay: f64,
        tag: &str,
    ) -> Result<(Self::T, Self::T), NetError>;

    fn relu(&self, x: &Self::T) -> Self::T;
    fn relu_grad(&self, dy: &Self::T, y: &Self::T) -> Result<Self::T, NetError>;
    fn maxpool(&self, x: &Self::T, window: usize, stride: usize) -> Result<(Self::T, Vec<u32>), NetError>;
    fn maxpool_grad(&self, dy: &Self::T, argmax: &[u32], input_shape: &[usize]) -> Result<Self::T, NetError>;

    /// Per-example gradient of softmax cross-entropy, `p - onehot`,
    /// computed in `f64` and then stored in `fmt`. Also returns the summed
    /// loss and the number of correct argmax predictions.
    fn softmax_xent_grad(
        &self,
        logits: &Self::T,
        labels: &[usize],
        fmt: FxFormat,
        tag: &str,
    ) -> Result<(Self::T, f64, usize), NetError>;

    /// `v <- p*v - lr*dw`, `w <- w + v`. Returns how many elements of the
    /// new `v` are exactly zero.
    fn momentum_step(
        &self,
        w: &mut Self::T,
        v: &mut Self::T,
        dw: &Self::T,
        lr: f64,
        momentum: f64,
        tag: &str,
    ) -> Result<usize, NetError>;

    /// Give the tensor `extra` more fractional bits, preserving its value.
    fn widen(&self, t: &Self::T, extra: u32) -> Result<Self::T, NetError>;

    fn to_record(&self, t: &Self::T) -> TensorRecord;
    fn load_record(&self, r: TensorRecord) -> Result<Self::T, NetError>;
}

/// Softmax over one row, returned with `log(sum(exp))` for the loss.
pub(crate) fn softmax_row(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), m + s.ln())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_batch(z: &[f64], classes: usize, labels: &[usize]) -> Result<(Vec<f64>, f64, usize), NetError> {
    if z.len() != classes * labels.len() {
        return Err(NetError::Shape(format!("{} logits for {} labels", z.len(), labels.len())));
    }
    let mut grad = Vec::with_capacity(z.len());
    let (mut loss, mut correct) = (0.0, 0);
    for (row, &y) in z.chunks(classes).zip(labels) {
        if y >= classes {
            return Err(NetError::Label { label: y, classes });
        }
        let (p, lse) = softmax_row(row);
        loss += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
        grad.extend(p.iter().enumerate().map(|(i, &pi)| if i == y { pi - 1.0 } else { pi }));
    }
    Ok((grad, loss, correct))
}

fn exact_const(v: f64, what: &str) -> Result<Exact, NetError> {
    Exact::from_f64(v).ok_or_else(|| NetError::Hyper(format!("{what} must be finite, got {v}")))
}

// ---------------------------------------------------------------- fixed

/// Fixed-point engine: one rounding mode for every conversion, with keys
/// `(seed, tag, element, step)`.
#[derive(Debug, Clone)]
pub struct FixedArith {
    mode: RoundingMode,
    rng: RoundRng,
    step: u64,
}

impl FixedArith {
    pub fn new(mode: RoundingMode, seed: u64) -> Self {
        Self { mode, rng: RoundRng::new(seed), step: 0 }
    }

    pub fn mode(&self) -> RoundingMode {
        self.mode
    }

    fn spec(&self, fmt: FxFormat) -> GemmSpec {
        GemmSpec::new(fmt, self.mode)
    }

    fn stream(&self, tag: &str) -> crate::rng::RoundStream {
        self.rng.stream(tag, self.step)
    }

    /// Convert `wide / batch + decay * w` once into `w`'s format.
    fn mean_plus_decay(
        &self,
        wide: &WideTensor,
        batch: usize,
        decay: Option<(&FxTensor, Exact)>,
        fmt: FxFormat,
        tag: &str,
    ) -> Result<FxTensor, NetError> {
        let overflow = Cell::new(false);
        let b = batch as u32;
        let draws = self.stream(tag);
        let out = wide.convert_map(fmt, self.mode, &draws, |i, e| {
            let mean = e.checked_div_int(b);
            let v = match (mean, decay) {
                (Some(m), Some((w, lambda))) => lambda.checked_mul(w.value(i)).and_then(|d| m.checked_add(d)),
                (m, None) => m,
                (None, _) => None,
            };
            v.unwrap_or_else(|| {
                overflow.set(true);
                Exact::ZERO
            })
        });
        if overflow.get() {
            return Err(NetError::Tensor(TensorError::AccumulatorWidth { needed: 128, available: 127 }));
        }
        Ok(out)
    }
}

fn column_sums(dy: &FxTensor) -> WideTensor {
    let rows = dy.rows();
    let cols = dy.len().checked_div(rows).unwrap_or(0);
    let mut s = vec![0i128; cols];
    for r in dy.data().chunks(cols.max(1)) {
        for (o, &v) in s.iter_mut().zip(r) {
            *o += v as i128;
        }
    }
    WideTensor::new(vec![cols], s, dy.format().fl())
}

impl Arith for FixedArith {
    type T = FxTensor;

    fn name(&self) -> &'static str {
        match self.mode {
            RoundingMode::Nearest => "fixed-nearest",
            RoundingMode::Stochastic => "fixed-stochastic",
        }
    }

    fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    fn input(&self, pixels: &[u8], shape: [usize; 3], idx: &[usize], fmt: FxFormat) -> FxTensor {
        // b / 255 rounded to nearest, tabulated once per call
        let table: Vec<i32> = (0..=255)
            .map(|b| convert(Exact::ratio(b, 255), fmt, RoundingMode::Nearest, 0).mantissa() as i32)
            .collect();
        let per = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(pixels[i * per..(i + 1) * per].iter().map(|&b| table[b as usize]));
        }
        FxTensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], data, fmt, "input").expect("in range")
    }

    fn param(&self, shape: Vec<usize>, values: &[f64], fmt: FxFormat, tag: &str) -> FxTensor {
        FxTensor::from_f64(shape, values, fmt, self.mode, &self.stream(tag)).expect("shape matches values").with_tag("")
    }

    fn zeros(&self, shape: Vec<usize>, fmt: FxFormat) -> FxTensor {
        FxTensor::zeros(shape, fmt, "")
    }

    fn values(&self, t: &FxTensor) -> Vec<f64> {
        t.to_f64_vec()
    }

    fn shape<'a>(&self, t: &'a FxTensor) -> &'a [usize] {
        t.shape()
    }

    fn reshape(&self, t: FxTensor, shape: Vec<usize>) -> Result<FxTensor, NetError> {
        Ok(t.reshape(shape)?)
    }

    fn format_of(&self, t: &FxTensor) -> Option<FxFormat> {
        Some(t.format())
    }

    fn linear(&self, x: &FxTensor, w: &FxTensor, b: &FxTensor, fmt: FxFormat, tag: &str) -> Result<FxTensor, NetError> {
        let mut acc = gemm_wide(x, false, w, true)?;
        acc.add_col_bias(b)?;
        Ok(acc.convert(fmt, self.mode, &self.stream(tag)))
    }

    fn linear_grad_input(&self, dy: &FxTensor, w: &FxTensor, fmt: FxFormat, tag: &str) -> Result<FxTensor, NetError> {
        Ok(gemm_wide(dy, false, w, false)?.convert(fmt, self.mode, &self.stream(tag)))
    }

    fn linear_grad_params(
        &self,
        dy: &FxTensor,
        x: &FxTensor,
        w: &FxTensor,
        decay: f64,
        tag: &str,
    ) -> Result<(FxTensor, FxTensor), NetError> {
        let batch = dy.rows();
        let lambda = exact_const(decay, "weight decay")?;
        let decay = (decay != 0.0).then_some((w, lambda));
        let dw_sum = gemm_wide(dy, true, x, false)?;
        let dw = self.mean_plus_decay(&dw_sum, batch, decay, w.format(), &format!("{tag}.dw"))?;
        let db = self.mean_plus_decay(&column_sums(dy), batch, None, w.format(), &format!("{tag}.db"))?;
        Ok((dw, db))
    }

    fn conv(
        &self,
        x: &FxTensor,
        w: &FxTensor,
        b: &FxTensor,
        geo: &ConvGeometry,
        fmt: FxFormat,
        tag: &str,
    ) -> Result<FxTensor, NetError> {
        Ok(conv2d(x, w, Some(b), geo, &self.spec(fmt), &self.stream(tag))?)
    }

    fn conv_grad_input(
        &self,
        dy: &FxTensor,
        w: &FxTensor,
        geo: &ConvGeometry,
        fmt: FxFormat,
        tag: &str,
    ) -> Result<FxTensor, NetError> {
        Ok(conv2d_backward_input(dy, w, geo)?.convert(fmt, self.mode, &self.stream(tag)))
    }

    fn conv_grad_params(
        &self,
        dy: &FxTensor,
        x: &FxTensor,
        w: &FxTensor,
        geo: &ConvGeometry,
        decay: f64,
        tag: &str,
    ) -> Result<(FxTensor, FxTensor), NetError> {
        let batch = dy.rows();
        let cols = im2col(x, geo)?;
        let (dw_sum, db_sum) = conv2d_backward_weights(dy, &cols)?;
        let lambda = exact_const(decay, "weight decay")?;
        let decay = (decay != 0.0).then_some((w, lambda));
        let dw = self.mean_plus_decay(&dw_sum, batch, decay, w.format(), &format!("{tag}.dw"))?;
        let dw = dw.reshape(w.shape().to_vec())?;
        let db = self.mean_plus_decay(&db_sum, batch, None, w.format(), &format!("{tag}.db"))?;
        Ok((dw, db))
    }

    fn relu(&self, x: &FxTensor) -> FxTensor {
        relu(x)
    }

    fn relu_grad(&self, dy: &FxTensor, y: &FxTensor) -> Result<FxTensor, NetError> {
        Ok(relu_backward(dy, y)?)
    }

    fn maxpool(&self, x: &FxTensor, window: usize, stride: usize) -> Result<(FxTensor, Vec<u32>), NetError> {
        Ok(maxpool(x, window, stride)?)
    }

    fn maxpool_grad(&self, dy: &FxTensor, argmax: &[u32], input_shape: &[usize]) -> Result<FxTensor, NetError> {
        Ok(maxpool_backward(dy, argmax, input_shape)?)
    }

    fn softmax_xent_grad(
        &self,
        logits: &FxTensor,
        labels: &[usize],
        fmt: FxFormat,
        tag: &str,
    ) -> Result<(FxTensor, f64, usize), NetError> {
        let classes = logits.len() / labels.len().max(1);
        let (grad, loss, correct) = softmax_batch(&logits.to_f64_vec(), classes, labels)?;
        let d = FxTensor::from_f64(logits.shape().to_vec(), &grad, fmt, self.mode, &self.stream(tag))?;
        Ok((d, loss, correct))
    }

    fn momentum_step(
        &self,
        w: &mut FxTensor,
        v: &mut FxTensor,
        dw: &FxTensor,
        lr: f64,
        momentum: f64,
        tag: &str,
    ) -> Result<usize, NetError> {
        if w.len() != v.len() || w.len() != dw.len() {
            return Err(NetError::Shape("parameter, velocity and gradient lengths differ".into()));
        }
        let p = exact_const(momentum, "momentum")?;
        let neg_lr = exact_const(-lr, "learning rate")?;
        let fmt = w.format();
        let overflow = Cell::new(false);
        let draws = self.stream(&format!("{tag}.v"));
        let mode = self.mode;
        let new_v: Vec<i32> = (0..v.len())
            .map(|i| {
                let step = neg_lr.checked_mul(dw.value(i));
                let val = if momentum == 0.0 {
                    step
                } else {
                    step.and_then(|s| p.checked_mul(v.value(i)).and_then(|pv| pv.checked_add(s)))
                };
                let val = val.unwrap_or_else(|| {
                    overflow.set(true);
                    Exact::ZERO
                });
                let d = if mode == RoundingMode::Stochastic { draws.draw(i as u64) } else { 0 };
                convert(val, fmt, mode, d).mantissa() as i32
            })
            .collect();
        if overflow.get() {
            return Err(NetError::Tensor(TensorError::AccumulatorWidth { needed: 128, available: 127 }));
        }
        // w + v lies on the grid already, so the conversion only saturates.
        let (lo, hi) = (fmt.min_mantissa(), fmt.max_mantissa());
        let new_w: Vec<i32> =
            w.data().iter().zip(&new_v).map(|(&a, &b)| (a as i64 + b as i64).clamp(lo, hi) as i32).collect();
        let zeros = new_v.iter().filter(|&&m| m == 0).count();
        *v = FxTensor::new(v.shape().to_vec(), new_v, fmt, v.tag().to_string())?;
        *w = FxTensor::new(w.shape().to_vec(), new_w, fmt, w.tag().to_string())?;
        Ok(zeros)
    }

    fn widen(&self, t: &FxTensor, extra: u32) -> Result<FxTensor, NetError> {
        Ok(t.widen(extra)?)
    }

    fn to_record(&self, t: &FxTensor) -> TensorRecord {
        TensorRecord::Fixed { shape: t.shape().to_vec(), format: t.format(), data: t.data().to_vec() }
    }

    fn load_record(&self, r: TensorRecord) -> Result<FxTensor, NetError> {
        match r {
            TensorRecord::Fixed { shape, format, data } => Ok(FxTensor::new(shape, data, format, "")?),
            TensorRecord::Float { .. } => Err(NetError::Checkpoint("float tensor in a fixed-point checkpoint".into())),
        }
    }
}

// ---------------------------------------------------------------- float

/// Plain `f64` tensor for the float engine.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length");
        Self { shape, data }
    }

    fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    fn cols(&self) -> usize {
        self.data.len().checked_div(self.rows()).unwrap_or(0)
    }
}

/// `op(A) * op(B)` for row-major `f64` matrices.
#[allow(clippy::too_many_arguments)]
fn fgemm(a: &[f64], ar: usize, ac: usize, ta: bool, b: &[f64], br: usize, bc: usize, tb: bool) -> Result<Vec<f64>, NetError> {
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    if k != k2 {
        return Err(NetError::Shape(format!("inner dimensions {k} and {k2} differ")));
    }
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    // SAFETY: the strides address `a`, `b` and `c` within their lengths for
    // the m x k, k x n and m x n extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

fn fim2col(x: &FloatTensor, geo: &ConvGeometry) -> Result<Vec<f64>, NetError> {
    let n = geo.check_input(&x.shape)?;
    let cols = n * geo.out_h() * geo.out_w();
    let mut out = vec![0.0; geo.patch_len() * cols];
    geo.for_each_tap(n, |dst, _, s| out[dst] = x.data[s]);
    Ok(out)
}

/// `[A, B, S]` to `[B, A, S]`.
fn swap01(data: &[f64], a: usize, b: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * s..(j * a + i + 1) * s].copy_from_slice(&data[(i * b + j) * s..(i * b + j + 1) * s]);
        }
    }
    out
}

/// Float engine. Formats are accepted and ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct FloatArith;

impl Arith for FloatArith {
    type T = FloatTensor;

    fn name(&self) -> &'static str {
        "float"
    }

    fn set_step(&mut self, _step: u64) {}

    fn input(&self, pixels: &[u8], shape: [usize; 3], idx: &[usize], _fmt: FxFormat) -> FloatTensor {
        let per = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(pixels[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0));
        }
        FloatTensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], data)
    }

    fn param(&self, shape: Vec<usize>, values: &[f64], _fmt: FxFormat, _tag: &str) -> FloatTensor {
        FloatTensor::new(shape, values.to_vec())
    }

    fn zeros(&self, shape: Vec<usize>, _fmt: FxFormat) -> FloatTensor {
        let n = shape.iter().product();
        FloatTensor::new(shape, vec![0.0; n])
    }

    fn values(&self, t: &FloatTensor) -> Vec<f64> {
        t.data.clone()
    }

    fn shape<'a>(&self, t: &'a FloatTensor) -> &'a [usize] {
        &t.shape
    }

    fn reshape(&self, mut t: FloatTensor, shape: Vec<usize>) -> Result<FloatTensor, NetError> {
        if shape.iter().product::<usize>() != t.data.len() {
            return Err(NetError::Shape(format!("cannot reshape {:?} into {shape:?}", t.shape)));
        }
        t.shape = shape;
        Ok(t)
    }

    fn format_of(&self, _t: &FloatTensor) -> Option<FxFormat> {
        None
    }

    fn linear(&self, x: &FloatTensor, w: &FloatTensor, b: &FloatTensor, _: FxFormat, _: &str) -> Result<FloatTensor, NetError> {
        let (n, out) = (x.rows(), w.rows());
        let mut y = fgemm(&x.data, n, x.cols(), false, &w.data, out, w.cols(), true)?;
        for row in y.chunks_mut(out.max(1)) {
            for (v, bb) in row.iter_mut().zip(&b.data) {
                *v += bb;
            }
        }
        Ok(FloatTensor::new(vec![n, out], y))
    }

    fn linear_grad_input(&self, dy: &FloatTensor, w: &FloatTensor, _: FxFormat, _: &str) -> Result<FloatTensor, NetError> {
        let dx = fgemm(&dy.data, dy.rows(), dy.cols(), false, &w.data, w.rows(), w.cols(), false)?;
        Ok(FloatTensor::new(vec![dy.rows(), w.cols()], dx))
    }

    fn linear_grad_params(
        &self,
        dy: &FloatTensor,
        x: &FloatTensor,
        w: &FloatTensor,
        decay: f64,
        _: &str,
    ) -> Result<(FloatTensor, FloatTensor), NetError> {
        let bsz = dy.rows() as f64;
        let mut dw = fgemm(&dy.data, dy.rows(), dy.cols(), true, &x.data, x.rows(), x.cols(), false)?;
        for (g, &wv) in dw.iter_mut().zip(&w.data) {
            *g = *g / bsz + decay * wv;
        }
        let mut db = vec![0.0; dy.cols()];
        for r in dy.data.chunks(dy.cols().max(1)) {
            for (o, v) in db.iter_mut().zip(r) {
                *o += v;
            }
        }
        db.iter_mut().for_each(|v| *v /= bsz);
        Ok((FloatTensor::new(w.shape.clone(), dw), FloatTensor::new(vec![db.len()], db)))
    }

    fn conv(
        &self,
        x: &FloatTensor,
        w: &FloatTensor,
        b: &FloatTensor,
        geo: &ConvGeometry,
        _: FxFormat,
        _: &str,
    ) -> Result<FloatTensor, NetError> {
        let n = x.rows();
        let cols = fim2col(x, geo)?;
        let f = w.rows();
        let s = geo.out_h() * geo.out_w();
        let mut y = fgemm(&w.data, f, geo.patch_len(), false, &cols, geo.patch_len(), n * s, false)?;
        for (row, bb) in y.chunks_mut((n * s).max(1)).zip(&b.data) {
            row.iter_mut().for_each(|v| *v += bb);
        }
        Ok(FloatTensor::new(vec![n, f, geo.out_h(), geo.out_w()], swap01(&y, f, n, s)))
    }

    fn conv_grad_input(
        &self,
        dy: &FloatTensor,
        w: &FloatTensor,
        geo: &ConvGeometry,
        _: FxFormat,
        _: &str,
    ) -> Result<FloatTensor, NetError> {
        let (n, f) = (dy.shape[0], dy.shape[1]);
        let s = geo.out_h() * geo.out_w();
        let g = swap01(&dy.data, n, f, s);
        let cols = fgemm(&w.data, f, geo.patch_len(), true, &g, f, n * s, false)?;
        let mut dx = vec![0.0; n * geo.channels * geo.height * geo.width];
        geo.for_each_tap(n, |src, _, dst| dx[dst] += cols[src]);
        Ok(FloatTensor::new(vec![n, geo.channels, geo.height, geo.width], dx))
    }

    fn conv_grad_params(
        &self,
        dy: &FloatTensor,
        x: &FloatTensor,
        w: &FloatTensor,
        geo: &ConvGeometry,
        decay: f64,
        _: &str,
    ) -> Result<(FloatTensor, FloatTensor), NetError> {
        let (n, f) = (dy.shape[0], dy.shape[1]);
        let s = geo.out_h() * geo.out_w();
        let bsz = n as f64;
        let g = swap01(&dy.data, n, f, s);
        let cols = fim2col(x, geo)?;
        let mut dw = fgemm(&g, f, n * s, false, &cols, geo.patch_len(), n * s, true)?;
        for (d, &wv) in dw.iter_mut().zip(&w.data) {
            *d = *d / bsz + decay * wv;
        }
        let db: Vec<f64> = g.chunks((n * s).max(1)).map(|r| r.iter().sum::<f64>() / bsz).collect();
        Ok((FloatTensor::new(w.shape.clone(), dw), FloatTensor::new(vec![f], db)))
    }

    fn relu(&self, x: &FloatTensor) -> FloatTensor {
        FloatTensor::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())
    }

    fn relu_grad(&self, dy: &FloatTensor, y: &FloatTensor) -> Result<FloatTensor, NetError> {
        if dy.data.len() != y.data.len() {
            return Err(NetError::Shape("relu gradient length mismatch".into()));
        }
        let d = dy.data.iter().zip(&y.data).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
        Ok(FloatTensor::new(dy.shape.clone(), d))
    }

    fn maxpool(&self, x: &FloatTensor, window: usize, stride: usize) -> Result<(FloatTensor, Vec<u32>), NetError> {
        if x.shape.len() != 4 {
            return Err(NetError::Shape(format!("maxpool expects NCHW, got {:?}", x.shape)));
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let oh = crate::fxtensor::pool_output_size(h, window, stride)?;
        let ow = crate::fxtensor::pool_output_size(w, window, stride)?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x.data[i] > x.data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x.data[best]);
                    arg.push(best as u32);
                }
            }
        }
        Ok((FloatTensor::new(vec![n, c, oh, ow], out), arg))
    }

    fn maxpool_grad(&self, dy: &FloatTensor, argmax: &[u32], input_shape: &[usize]) -> Result<FloatTensor, NetError> {
        if dy.data.len() != argmax.len() {
            return Err(NetError::Shape("argmax length differs from gradient".into()));
        }
        let mut dx = vec![0.0; input_shape.iter().product()];
        for (&g, &i) in dy.data.iter().zip(argmax) {
            dx[i as usize] += g;
        }
        Ok(FloatTensor::new(input_shape.to_vec(), dx))
    }

    fn softmax_xent_grad(
        &self,
        logits: &FloatTensor,
        labels: &[usize],
        _: FxFormat,
        _: &str,
    ) -> Result<(FloatTensor, f64, usize), NetError> {
        let classes = logits.data.len() / labels.len().max(1);
        let (grad, loss, correct) = softmax_batch(&logits.data, classes, labels)?;
        Ok((FloatTensor::new(logits.shape.clone(), grad), loss, correct))
    }

    fn momentum_step(
        &self,
        w: &mut FloatTensor,
        v: &mut FloatTensor,
        dw: &FloatTensor,
        lr: f64,
        momentum: f64,
        _: &str,
    ) -> Result<usize, NetError> {
        if w.data.len() != v.data.len() || w.data.len() != dw.data.len() {
            return Err(NetError::Shape("parameter, velocity and gradient lengths differ".into()));
        }
        let mut zeros = 0;
        for ((wv, vv), &g) in w.data.iter_mut().zip(v.data.iter_mut()).zip(&dw.data) {
            *vv = momentum * *vv - lr * g;
            *wv += *vv;
            zeros += (*vv == 0.0) as usize;
        }
        Ok(zeros)
    }

    fn widen(&self, t: &FloatTensor, _extra: u32) -> Result<FloatTensor, NetError> {
        Ok(t.clone())
    }

    fn to_record(&self, t: &FloatTensor) -> TensorRecord {
        TensorRecord::Float { shape: t.shape.clone(), data: t.data.clone() }
    }

    fn load_record(&self, r: TensorRecord) -> Result<FloatTensor, NetError> {
        match r {
            TensorRecord::Float { shape, data } if shape.iter().product::<usize>() == data.len() => {
                Ok(FloatTensor::new(shape, data))
            }
            TensorRecord::Float { .. } => Err(NetError::Checkpoint("tensor shape and length disagree".into())),
            TensorRecord::Fixed { .. } => Err(NetError::Checkpoint("fixed-point tensor in a float checkpoint".into())),
        }
    }
}
