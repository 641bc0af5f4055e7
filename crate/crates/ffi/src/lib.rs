//! C interface to the `gsun` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_load`
//! or `gsun_simulate` and released by the matching `*_free`. Every fallible
//! call returns a [`GsunStatus`]; on failure the message is kept per thread
//! and can be copied out with [`gsun_last_error_message`]. Matrices are
//! column-major with one column per replicate.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gsun::gsun::{krige, simulate, GsunTheta, LocationSet, SpatialSample};
use gsun::neural::graph::GraphBatch;
use gsun::neural::network::estimate_batch;
use gsun::neural::{read_weights, EstimatorWeights};
use gsun::numcore::{DenseMatrix, RngStream};
use gsun::pit::{pit, Model};
use gsun::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsunStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid parameters, shapes or input files.
    InvalidInput = 2,
    /// A numerical routine failed.
    Numeric = 3,
    /// The output buffer is too small.
    BufferTooSmall = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Replicated observations at a set of locations.
pub struct GsunSample(SpatialSample);

/// A trained estimator.
pub struct GsunEstimator(EstimatorWeights);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Null(&'static str),
    Lib(Error),
    Small(usize),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type FfiResult = std::result::Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> GsunStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GsunStatus::Ok
        }
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("null pointer for {arg}"));
            GsunStatus::NullPointer
        }
        Ok(Err(Fail::Small(need))) => {
            set_error(format!("output buffer too small, need {need} elements"));
            GsunStatus::BufferTooSmall
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(format!("{}: {e}", e.name()));
            if e.is_config_error() {
                GsunStatus::InvalidInput
            } else {
                GsunStatus::Numeric
            }
        }
        Err(_) => {
            set_error("panic inside gsun".into());
            GsunStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Fail::Lib(Error::Parse(format!("{name} is not UTF-8: {e}"))))
}

unsafe fn theta_arg(p: *const f64) -> Result<GsunTheta, Fail> {
    let s = slice(p, 7, "theta")?;
    let t = GsunTheta::from_array(s.try_into().expect("seven entries"));
    t.validate()?;
    Ok(t)
}

unsafe fn locs_arg(xs: *const f64, ys: *const f64, n: usize) -> Result<LocationSet, Fail> {
    let x = slice(xs, n, "xs")?;
    let y = slice(ys, n, "ys")?;
    Ok(LocationSet::new(x.iter().zip(y).map(|(a, b)| [*a, *b]).collect())?)
}

fn out_ptr<T>(p: *mut T, name: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(name))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gsun_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to fit) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gsun_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let k = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, k);
            *buf.add(k) = 0;
        }
        msg.len()
    })
}

/// Builds a sample from `n` locations and an `n × reps` column-major value
/// matrix.
///
/// # Safety
/// `xs`, `ys` must hold `n` values, `values` `n * reps` values; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn gsun_sample_new(xs: *const f64, ys: *const f64, n: usize, values: *const f64, reps: usize, out: *mut *mut GsunSample) -> GsunStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let locs = locs_arg(xs, ys, n)?;
        let v = slice(values, n * reps, "values")?;
        let s = SpatialSample::new(locs, DenseMatrix::from_column_slice(n, reps, v))?;
        *out = Box::into_raw(Box::new(GsunSample(s)));
        Ok(())
    })
}

/// Simulates `reps` replicates of the process with parameters `theta`
/// (σ², β₁, ν₁, β₂, ν₂, δ₁, δ₂) at the given locations.
///
/// # Safety
/// `theta` must hold 7 values, `xs` and `ys` `n` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gsun_simulate(theta: *const f64, xs: *const f64, ys: *const f64, n: usize, reps: usize, seed: u64, out: *mut *mut GsunSample) -> GsunStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let t = theta_arg(theta)?;
        let locs = locs_arg(xs, ys, n)?;
        let s = simulate(&t, &locs, reps, &mut RngStream::new(seed).substream("simulate", 0))?;
        *out = Box::into_raw(Box::new(GsunSample(s)));
        Ok(())
    })
}

/// # Safety
/// `sample` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gsun_sample_free(sample: *mut GsunSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// # Safety
/// `sample` must be a live handle; `n` and `reps` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gsun_sample_dims(sample: *const GsunSample, n: *mut usize, reps: *mut usize) -> GsunStatus {
    guard(|| {
        let s = sample.as_ref().ok_or(Fail::Null("sample"))?;
        out_ptr(n, "n")?;
        out_ptr(reps, "reps")?;
        *n = s.0.locs.len();
        *reps = s.0.replicates();
        Ok(())
    })
}

/// Copies the column-major values into `buf`, which must hold `n * reps`
/// entries.
///
/// # Safety
/// `sample` must be a live handle and `buf` hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn gsun_sample_values(sample: *const GsunSample, buf: *mut f64, len: usize) -> GsunStatus {
    guard(|| {
        let s = sample.as_ref().ok_or(Fail::Null("sample"))?;
        let v = s.0.values.as_slice();
        if len < v.len() {
            return Err(Fail::Small(v.len()));
        }
        slice_mut(buf, v.len(), "buf")?.copy_from_slice(v);
        Ok(())
    })
}

/// Reads a sample CSV (`x,y,rep_0,…`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsun_sample_read_csv(path: *const c_char, out: *mut *mut GsunSample) -> GsunStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = str_arg(path, "path")?;
        let f = File::open(p).map_err(|e| Error::Io(format!("{p}: {e}")))?;
        let s = SpatialSample::read_csv(BufReader::new(f))?;
        *out = Box::into_raw(Box::new(GsunSample(s)));
        Ok(())
    })
}

/// # Safety
/// `sample` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gsun_sample_write_csv(sample: *const GsunSample, path: *const c_char) -> GsunStatus {
    guard(|| {
        let s = sample.as_ref().ok_or(Fail::Null("sample"))?;
        let p = str_arg(path, "path")?;
        let f = File::create(p).map_err(|e| Error::Io(format!("{p}: {e}")))?;
        s.0.write_csv(BufWriter::new(f))?;
        Ok(())
    })
}

/// Conditional mean and variance at `m` prediction locations given the
/// first replicate of `observed`.
///
/// # Safety
/// `theta` must hold 7 values; `px`, `py`, `mean_out` and `var_out` `m`
/// values each.
#[no_mangle]
pub unsafe extern "C" fn gsun_krige(
    theta: *const f64,
    observed: *const GsunSample,
    px: *const f64,
    py: *const f64,
    m: usize,
    draws: usize,
    seed: u64,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> GsunStatus {
    guard(|| {
        let t = theta_arg(theta)?;
        let s = observed.as_ref().ok_or(Fail::Null("observed"))?;
        let pred = locs_arg(px, py, m)?;
        let k = krige(&t, &s.0, &pred, draws, &mut RngStream::new(seed).substream("krige", 0))?;
        slice_mut(mean_out, m, "mean_out")?.copy_from_slice(k.mean.as_slice());
        slice_mut(var_out, m, "var_out")?.copy_from_slice(k.var.as_slice());
        Ok(())
    })
}

/// Marginal PIT of a one-replicate sample under `model` (`"gaussian"`,
/// `"tg"`, `"tgh"` or `"gsun"`). Writes `n` PIT values to `u_out` and the
/// Kolmogorov–Smirnov statistic and p-value.
///
/// # Safety
/// `model` must be a NUL-terminated string, `params` hold `n_params` values
/// and `u_out` `n` values, where `n` is the sample size.
#[no_mangle]
pub unsafe extern "C" fn gsun_pit(
    model: *const c_char,
    params: *const f64,
    n_params: usize,
    sample: *const GsunSample,
    u_out: *mut f64,
    len: usize,
    ks_stat: *mut f64,
    p_value: *mut f64,
) -> GsunStatus {
    guard(|| {
        let name = str_arg(model, "model")?;
        let p = slice(params, n_params, "params")?;
        let text = p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let m = Model::parse(name, &text)?;
        let s = sample.as_ref().ok_or(Fail::Null("sample"))?;
        out_ptr(ks_stat, "ks_stat")?;
        out_ptr(p_value, "p_value")?;
        let n = s.0.locs.len();
        if len < n {
            return Err(Fail::Small(n));
        }
        let out = slice_mut(u_out, n, "u_out")?;
        let r = pit(&m, &s.0, "ffi")?;
        out.copy_from_slice(&r.u);
        *ks_stat = r.ks_stat;
        *p_value = r.p_value;
        Ok(())
    })
}

/// Loads estimator weights written by the `gsun train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsun_estimator_load(path: *const c_char, out: *mut *mut GsunEstimator) -> GsunStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = str_arg(path, "path")?;
        let f = File::open(p).map_err(|e| Error::Io(format!("{p}: {e}")))?;
        let w = read_weights(BufReader::new(f))?;
        *out = Box::into_raw(Box::new(GsunEstimator(w)));
        Ok(())
    })
}

/// # Safety
/// `est` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gsun_estimator_free(est: *mut GsunEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Point estimate from every replicate of `sample`, written as 7 values in
/// wire order. A non-positive `radius` selects the estimator's own.
///
/// # Safety
/// `est` and `sample` must be live handles and `theta_out` hold 7 values.
#[no_mangle]
pub unsafe extern "C" fn gsun_estimate(est: *const GsunEstimator, sample: *const GsunSample, radius: f64, theta_out: *mut f64) -> GsunStatus {
    guard(|| {
        let w = est.as_ref().ok_or(Fail::Null("est"))?;
        let s = sample.as_ref().ok_or(Fail::Null("sample"))?;
        let out = slice_mut(theta_out, 7, "theta_out")?;
        let r = if radius > 0.0 { radius } else { w.0.config.radius };
        let batch = GraphBatch::from_sample(&s.0, r)?;
        out.copy_from_slice(&estimate_batch(&w.0, &batch)?.to_array());
        Ok(())
    })
}
