//! Convolution lowered to the exact GEMM through `im2col`.
//!
//! Column matrices are laid out `(C*kh*kw) x (N*H'*W')`: row index
//! `(c, ky, kx)`, column index `(n, oy, ox)`.

use crate::rng::DrawSource;

use super::gemm::{matmul_exact, MatView};
use super::wide::swap_leading;
use super::{check_operands, FxTensor, GemmSpec, TensorError, WideTensor};

/// Geometry of one square-stride convolution over `C x H x W` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        let g = Self { channels, height, width, kh, kw, stride, pad };
        g.out_dim(height, kh)?;
        g.out_dim(width, kw)?;
        Ok(g)
    }

    fn out_dim(&self, size: usize, k: usize) -> Result<usize, TensorError> {
        let span = size + 2 * self.pad;
        if self.stride == 0 || k == 0 || k > span || !(span - k).is_multiple_of(self.stride) {
            return Err(TensorError::Geometry(format!(
                "kernel {k}, stride {}, pad {} do not tile size {size}",
                self.stride, self.pad
            )));
        }
        Ok((span - k) / self.stride + 1)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the column matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub(crate) fn check_input(&self, x: &[usize]) -> Result<usize, TensorError> {
        if x.len() != 4 || x[1] != self.channels || x[2] != self.height || x[3] != self.width {
            return Err(TensorError::Shape(format!(
                "input {x:?} does not match geometry {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        Ok(x[0])
    }

    /// Visit every (column-matrix element, input element) pair that is not
    /// padding: `f(row, col, input_flat_index)`.
    pub(crate) fn for_each_tap(&self, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = n * oh * ow;
        let (h, w, pad) = (self.height as isize, self.width as isize, self.pad as isize);
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for ni in 0..n {
                        let plane = (ni * self.channels + c) * self.height * self.width;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                let col = (ni * oh + oy) * ow + ox;
                                f(row * cols + col, col, plane + iy as usize * self.width + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Rearrange an `N x C x H x W` tensor into its column matrix. Padding
/// positions hold mantissa 0. No rounding.
pub fn im2col(x: &FxTensor, geo: &ConvGeometry) -> Result<FxTensor, TensorError> {
    let n = geo.check_input(x.shape())?;
    let cols = n * geo.out_h() * geo.out_w();
    let mut out = vec![0i32; geo.patch_len() * cols];
    let src = x.data();
    geo.for_each_tap(n, |dst, _, s| out[dst] = src[s]);
    Ok(FxTensor::from_parts(vec![geo.patch_len(), cols], out, x.format(), x.tag().to_string()))
}

/// Scatter-add a wide column matrix back to `N x C x H x W` exactly.
pub fn col2im_wide(cols: &WideTensor, geo: &ConvGeometry, n: usize) -> Result<WideTensor, TensorError> {
    let expect = geo.patch_len() * n * geo.out_h() * geo.out_w();
    if cols.len() != expect {
        return Err(TensorError::Shape(format!("column matrix has {} elements, expected {expect}", cols.len())));
    }
    let mut out = vec![0i128; n * geo.channels * geo.height * geo.width];
    let src = cols.data();
    geo.for_each_tap(n, |s, _, dst| out[dst] += src[s]);
    Ok(WideTensor::new(vec![n, geo.channels, geo.height, geo.width], out, cols.point()))
}

fn weight_matrix<'a>(w: &'a FxTensor, geo: &ConvGeometry) -> Result<(usize, MatView<'a>), TensorError> {
    let s = w.shape();
    if s.len() != 4 || s[1] != geo.channels || s[2] != geo.kh || s[3] != geo.kw {
        return Err(TensorError::Shape(format!("filter bank {s:?} does not match geometry")));
    }
    Ok((s[0], MatView::from_slice(w.data(), s[0], geo.patch_len(), false)))
}

/// Exact pre-activation sums `N x F x H' x W'` from a prepared column
/// matrix, with the bias folded into the accumulator.
pub(crate) fn conv_wide(
    cols: &FxTensor,
    w: &FxTensor,
    bias: Option<&FxTensor>,
    geo: &ConvGeometry,
    n: usize,
) -> Result<WideTensor, TensorError> {
    check_operands(w, cols, None)?;
    let (f, wm) = weight_matrix(w, geo)?;
    let point = w.format().fl() + cols.format().fl();
    let mut wide = matmul_exact(wm, MatView::of(cols, false), w.format().wl() + cols.format().wl(), point)?;
    if let Some(b) = bias {
        wide.add_row_bias(b)?;
    }
    let s = geo.out_h() * geo.out_w();
    let data = swap_leading(wide.data(), f, n, s);
    Ok(WideTensor::new(vec![n, f, geo.out_h(), geo.out_w()], data, point))
}

/// `N x C x H x W` input, `F x C x kh x kw` filters, optional length-`F`
/// bias. Output element `i` (flat, `N x F x H' x W'`) uses draw `i`.
pub fn conv2d(
    x: &FxTensor,
    w: &FxTensor,
    bias: Option<&FxTensor>,
    geo: &ConvGeometry,
    spec: &GemmSpec,
    draws: &dyn DrawSource,
) -> Result<FxTensor, TensorError> {
    check_operands(x, w, Some(spec))?;
    let n = geo.check_input(x.shape())?;
    let cols = im2col(x, geo)?;
    Ok(conv_wide(&cols, w, bias, geo, n)?.convert(spec.out_format, spec.mode, draws))
}

/// Reorder `N x F x H' x W'` gradients into an `F x (N*H'*W')` matrix.
pub(crate) fn grad_matrix(dy: &FxTensor) -> Result<FxTensor, TensorError> {
    let s = dy.shape();
    if s.len() != 4 {
        return Err(TensorError::Shape(format!("expected NFHW gradient, got {s:?}")));
    }
    let (n, f, hw) = (s[0], s[1], s[2] * s[3]);
    let data = swap_leading(dy.data(), n, f, hw);
    Ok(FxTensor::from_parts(vec![f, n * hw], data, dy.format(), dy.tag().to_string()))
}

/// Exact input gradient `N x C x H x W`: `col2im(W^T * dY)`. The caller
/// converts once.
pub fn conv2d_backward_input(dy: &FxTensor, w: &FxTensor, geo: &ConvGeometry) -> Result<WideTensor, TensorError> {
    check_operands(dy, w, None)?;
    let n = dy.shape().first().copied().unwrap_or(0);
    let (f, wm) = weight_matrix(w, geo)?;
    let g = grad_matrix(dy)?;
    if g.shape()[0] != f || g.shape()[1] != n * geo.out_h() * geo.out_w() {
        return Err(TensorError::Shape("gradient does not match filter bank / geometry".into()));
    }
    let wt = MatView { rows: wm.cols, cols: wm.rows, rs: wm.cs, cs: wm.rs, ..wm };
    let cols = matmul_exact(wt, MatView::of(&g, false), w.format().wl() + dy.format().wl(), w.format().fl() + dy.format().fl())?;
    col2im_wide(&cols, geo, n)
}

/// Exact weight and bias gradient sums (not yet averaged): `dY * cols^T`
/// as `F x (C*kh*kw)` and the per-filter sums of `dY`.
pub fn conv2d_backward_weights(dy: &FxTensor, cols: &FxTensor) -> Result<(WideTensor, WideTensor), TensorError> {
    check_operands(dy, cols, None)?;
    let g = grad_matrix(dy)?;
    let dw = matmul_exact(
        MatView::of(&g, false),
        MatView::of(cols, true),
        dy.format().wl() + cols.format().wl(),
        dy.format().fl() + cols.format().fl(),
    )?;
    let db: Vec<i128> = g.data().chunks(g.shape()[1].max(1)).map(|r| r.iter().map(|&v| v as i128).sum()).collect();
    let f = db.len();
    Ok((dw, WideTensor::new(vec![f], db, dy.format().fl())))
}
