//! C ABI over the fixed-point core: tensor conversion, GEMM and the
//! systolic-array simulator.
//!
//! Every fallible call returns an [`FxStatus`]; on failure a message is
//! kept per thread and can be copied out with [`fx_last_error`]. Tensors
//! are opaque handles owned by the caller and released with
//! [`fx_tensor_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fxnet::fxp::{convert_f64, FxFormat, RoundingMode};
use fxnet::fxtensor::{gemm, FxTensor, GemmSpec, TensorError};
use fxnet::rng::RoundStream;
use fxnet::sysarray::{perf_report, simulate_gemm, SysArrayConfig, SysError, TraceReport};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Shape = 4,
    Overflow = 5,
    BufferTooSmall = 6,
    Unsupported = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FxRounding {
    Nearest = 0,
    Stochastic = 1,
}

impl From<FxRounding> for RoundingMode {
    fn from(r: FxRounding) -> Self {
        match r {
            FxRounding::Nearest => RoundingMode::Nearest,
            FxRounding::Stochastic => RoundingMode::Stochastic,
        }
    }
}

/// Opaque tensor handle.
pub struct FxTensorHandle(FxTensor);

/// Array parameters. Zero in `lfsr_width` or `p` means "derive"; a
/// non-positive `bandwidth` means unlimited.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FxSysConfig {
    pub n: usize,
    pub acc_width: u32,
    pub input_width: u32,
    pub lfsr_seed: u32,
    pub lfsr_width: u32,
    pub p: usize,
    pub l2_capacity: usize,
    pub bandwidth: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FxTrace {
    pub n: usize,
    pub p: usize,
    pub tiles: usize,
    pub compute_cycles: u64,
    pub total_cycles: u64,
    pub memory_stall_cycles: u64,
    pub output_stall_cycles: u64,
    pub macc_ops: u64,
    pub ops: u64,
    pub reuse_a: usize,
    pub reuse_b: usize,
    pub fetched_elements: u64,
    pub ops_per_cycle: f64,
    pub utilization: f64,
    pub max_acc_bits: u32,
    pub rounding_units: usize,
    pub dsp_units: usize,
}

impl From<&TraceReport> for FxTrace {
    fn from(t: &TraceReport) -> Self {
        Self {
            n: t.n,
            p: t.p,
            tiles: t.tiles,
            compute_cycles: t.compute_cycles,
            total_cycles: t.total_cycles,
            memory_stall_cycles: t.memory_stall_cycles,
            output_stall_cycles: t.output_stall_cycles,
            macc_ops: t.macc_ops,
            ops: t.ops,
            reuse_a: t.reuse_a,
            reuse_b: t.reuse_b,
            fetched_elements: t.fetched_elements,
            ops_per_cycle: t.ops_per_cycle,
            utilization: t.utilization,
            max_acc_bits: t.max_acc_bits,
            rounding_units: t.rounding_units,
            dsp_units: t.dsp_units,
        }
    }
}

/// Throughput summary; efficiency fields are NaN when no power was given.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FxPerf {
    pub gops: f64,
    pub peak_gops: f64,
    pub gops_per_watt: f64,
    pub peak_gops_per_watt: f64,
    pub utilization: f64,
    pub rounding_overhead: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(FxStatus, String);

impl From<TensorError> for Fail {
    fn from(e: TensorError) -> Self {
        let status = match e {
            TensorError::Shape(_) | TensorError::Geometry(_) => FxStatus::Shape,
            TensorError::AccumulatorWidth { .. } => FxStatus::Overflow,
            _ => FxStatus::Format,
        };
        Fail(status, e.to_string())
    }
}

impl From<SysError> for Fail {
    fn from(e: SysError) -> Self {
        let status = match &e {
            SysError::Config(_) | SysError::L2Capacity { .. } => FxStatus::InvalidArgument,
            SysError::InputWidth { .. } => FxStatus::Format,
            SysError::Overflow { .. } => FxStatus::Overflow,
            SysError::NearestUnsupported => FxStatus::Unsupported,
            SysError::Tensor(_) => FxStatus::Shape,
        };
        Fail(status, e.to_string())
    }
}

fn null() -> Fail {
    Fail(FxStatus::NullPointer, "null pointer argument".into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FxStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            FxStatus::Panic
        }
    }
}

fn format(il: u32, fl: u32) -> Result<FxFormat, Fail> {
    FxFormat::new(il, fl).map_err(|e| Fail(FxStatus::Format, e.to_string()))
}

/// # Safety
/// `p` must be null or point to `len` readable elements.
unsafe fn slice<'a, T>(p: *const T, len: usize) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or a handle from this library that was not freed.
unsafe fn handle<'a>(p: *const FxTensorHandle) -> Result<&'a FxTensor, Fail> {
    p.as_ref().map(|h| &h.0).ok_or_else(null)
}

fn emit(t: FxTensor, out: *mut *mut FxTensorHandle) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null());
    }
    // SAFETY: `out` is non-null and the caller promises it is writable.
    unsafe { *out = Box::into_raw(Box::new(FxTensorHandle(t))) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fx_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn fx_status_str(s: FxStatus) -> *const c_char {
    let msg: &'static [u8] = match s {
        FxStatus::Ok => b"ok\0",
        FxStatus::NullPointer => b"null pointer\0",
        FxStatus::InvalidArgument => b"invalid argument\0",
        FxStatus::Format => b"format error\0",
        FxStatus::Shape => b"shape error\0",
        FxStatus::Overflow => b"overflow\0",
        FxStatus::BufferTooSmall => b"buffer too small\0",
        FxStatus::Unsupported => b"unsupported\0",
        FxStatus::Panic => b"internal panic\0",
    };
    msg.as_ptr().cast()
}

/// Convert one real to `<il, fl>`; writes the mantissa. `draw` is the
/// 64-bit uniform used by stochastic rounding.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fx_convert(x: f64, il: u32, fl: u32, mode: FxRounding, draw: u64, out: *mut i64) -> FxStatus {
    guard(|| {
        let f = format(il, fl)?;
        if !x.is_finite() {
            return Err(Fail(FxStatus::InvalidArgument, "value must be finite".into()));
        }
        let out = out.as_mut().ok_or_else(null)?;
        *out = convert_f64(x, f, mode.into(), draw).mantissa();
        Ok(())
    })
}

/// Tensor from real values, rounded into `<il, fl>` with draws keyed by
/// `seed`.
///
/// # Safety
/// `shape` must hold `ndim` elements, `values` `len` elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_from_f64(
    shape: *const usize,
    ndim: usize,
    values: *const f64,
    len: usize,
    il: u32,
    fl: u32,
    mode: FxRounding,
    seed: u64,
    out: *mut *mut FxTensorHandle,
) -> FxStatus {
    guard(|| {
        let shape = slice(shape, ndim)?.to_vec();
        let values = slice(values, len)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Fail(FxStatus::InvalidArgument, "values must be finite".into()));
        }
        let draws = RoundStream::new(seed, "ffi.input", 0);
        emit(FxTensor::from_f64(shape, values, format(il, fl)?, mode.into(), &draws)?, out)
    })
}

/// Tensor from raw mantissas, each of which must fit `<il, fl>`.
///
/// # Safety
/// As for [`fx_tensor_from_f64`].
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_from_mantissas(
    shape: *const usize,
    ndim: usize,
    data: *const i32,
    len: usize,
    il: u32,
    fl: u32,
    out: *mut *mut FxTensorHandle,
) -> FxStatus {
    guard(|| {
        let shape = slice(shape, ndim)?.to_vec();
        let data = slice(data, len)?.to_vec();
        emit(FxTensor::new(shape, data, format(il, fl)?, "")?, out)
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `t` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_free(t: *mut FxTensorHandle) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Element count, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_len(t: *const FxTensorHandle) -> usize {
    t.as_ref().map_or(0, |h| h.0.len())
}

/// Rank, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_ndim(t: *const FxTensorHandle) -> usize {
    t.as_ref().map_or(0, |h| h.0.shape().len())
}

/// # Safety
/// `t` must be a live handle; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_shape(t: *const FxTensorHandle, out: *mut usize, cap: usize) -> FxStatus {
    guard(|| copy_out(handle(t)?.shape(), out, cap))
}

/// # Safety
/// `t` must be a live handle; `il` and `fl` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_format(t: *const FxTensorHandle, il: *mut u32, fl: *mut u32) -> FxStatus {
    guard(|| {
        let f = handle(t)?.format();
        *il.as_mut().ok_or_else(null)? = f.il();
        *fl.as_mut().ok_or_else(null)? = f.fl();
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_mantissas(t: *const FxTensorHandle, out: *mut i32, cap: usize) -> FxStatus {
    guard(|| copy_out(handle(t)?.data(), out, cap))
}

/// Values as `f64` (exact: every mantissa times `2^-fl` is representable).
///
/// # Safety
/// `t` must be a live handle; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn fx_tensor_to_f64(t: *const FxTensorHandle, out: *mut f64, cap: usize) -> FxStatus {
    guard(|| copy_out(&handle(t)?.to_f64_vec(), out, cap))
}

unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(FxStatus::BufferTooSmall, format!("need {} elements, buffer holds {cap}", src.len())));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null());
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// `A * B` with exact accumulation and one conversion into `<il, fl>`.
///
/// # Safety
/// `a`, `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fx_gemm(
    a: *const FxTensorHandle,
    b: *const FxTensorHandle,
    il: u32,
    fl: u32,
    mode: FxRounding,
    seed: u64,
    out: *mut *mut FxTensorHandle,
) -> FxStatus {
    guard(|| {
        let (a, b) = (handle(a)?, handle(b)?);
        let spec = GemmSpec::new(format(il, fl)?, mode.into());
        let draws = RoundStream::new(seed, "ffi.gemm", 0);
        emit(gemm(a, b, &spec, &draws)?, out)
    })
}

/// The default array (28 x 28 settings) resized to dimension `n`.
#[no_mangle]
pub extern "C" fn fx_sys_config_default(n: usize) -> FxSysConfig {
    let c = SysArrayConfig::with_n(n);
    FxSysConfig {
        n: c.n,
        acc_width: c.acc_width,
        input_width: c.input_width,
        lfsr_seed: c.lfsr_seed,
        lfsr_width: 0,
        p: 0,
        l2_capacity: c.l2_capacity,
        bandwidth: 0.0,
    }
}

/// Simulate `A * B` on the array with stochastic rounding into `<il, fl>`.
/// `result` may be null if only the trace is wanted.
///
/// # Safety
/// `a`, `b` must be live handles; `cfg` and `trace` must be valid pointers;
/// `result` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fx_sysarray_simulate(
    a: *const FxTensorHandle,
    b: *const FxTensorHandle,
    cfg: *const FxSysConfig,
    il: u32,
    fl: u32,
    trace: *mut FxTrace,
    result: *mut *mut FxTensorHandle,
) -> FxStatus {
    guard(|| {
        let (a, b) = (handle(a)?, handle(b)?);
        let c = cfg.as_ref().ok_or_else(null)?;
        let trace = trace.as_mut().ok_or_else(null)?;
        let cfg = SysArrayConfig {
            n: c.n,
            acc_width: c.acc_width,
            input_width: c.input_width,
            lfsr_seed: c.lfsr_seed,
            lfsr_width: (c.lfsr_width != 0).then_some(c.lfsr_width),
            p: (c.p != 0).then_some(c.p),
            l2_capacity: c.l2_capacity,
            bandwidth: (c.bandwidth > 0.0).then_some(c.bandwidth),
        };
        let spec = GemmSpec::new(format(il, fl)?, RoundingMode::Stochastic);
        let out = simulate_gemm(a, b, &cfg, &spec)?;
        *trace = FxTrace::from(&out.report);
        if !result.is_null() {
            emit(out.result, result)?;
        }
        Ok(())
    })
}

/// Scale a trace by a clock (Hz) and optional power (W; <= 0 for none).
///
/// # Safety
/// `trace` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fx_perf_report(trace: *const FxTrace, frequency_hz: f64, power_w: f64, out: *mut FxPerf) -> FxStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(null)?;
        let out = out.as_mut().ok_or_else(null)?;
        let report = TraceReport {
            n: t.n,
            p: t.p,
            l: 0,
            k: 0,
            m: 0,
            tiles: t.tiles,
            compute_cycles: t.compute_cycles,
            total_cycles: t.total_cycles,
            memory_stall_cycles: t.memory_stall_cycles,
            output_stall_cycles: t.output_stall_cycles,
            macc_ops: t.macc_ops,
            ops: t.ops,
            reuse_a: t.reuse_a,
            reuse_b: t.reuse_b,
            fetched_elements: t.fetched_elements,
            ops_per_cycle: t.ops_per_cycle,
            utilization: t.utilization,
            max_acc_bits: t.max_acc_bits,
            rounding_units: t.rounding_units,
            dsp_units: t.dsp_units,
        };
        let power = (power_w > 0.0).then_some(power_w);
        let p = perf_report(&report, frequency_hz, power)
            .ok_or_else(|| Fail(FxStatus::InvalidArgument, "frequency must be positive and finite".into()))?;
        *out = FxPerf {
            gops: p.gops(),
            peak_gops: p.peak_gops(),
            gops_per_watt: p.gops_per_watt().unwrap_or(f64::NAN),
            peak_gops_per_watt: p.peak_gops_per_watt().unwrap_or(f64::NAN),
            utilization: p.utilization,
            rounding_overhead: p.rounding_overhead,
        };
        Ok(())
    })
}
