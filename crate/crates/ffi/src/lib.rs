//! C ABI over a trained parser: load a saved fold, extract fingerprints,
//! parse images, plus the spectrum and AUC helpers.
//!
//! Every fallible call returns a [`GmparseStatus`]; on failure the message is
//! available from [`gmparse_last_error`] on the same thread until the next
//! failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gmparse::experiment::{load_parser, FoldArtifact};
use gmparse::parser::{ParsingModel, ParsingWeights};
use gmparse::{fingerprint, labels, metrics, spectral, Error, Tensor};

pub const GMPARSE_NUM_CONTINUOUS: usize = 9;
pub const GMPARSE_NUM_DISCRETE: usize = 6;
pub const GMPARSE_NUM_COARSE: usize = 3;
pub const GMPARSE_NUM_FINE: usize = 8;

const _: () = assert!(GMPARSE_NUM_CONTINUOUS == labels::NUM_CONTINUOUS);
const _: () = assert!(GMPARSE_NUM_DISCRETE == labels::NUM_DISCRETE);
const _: () = assert!(GMPARSE_NUM_COARSE == labels::NUM_COARSE);
const _: () = assert!(GMPARSE_NUM_FINE == labels::NUM_FINE);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmparseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

/// One parsed image.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GmparsePrediction {
    /// In the original units (layer counts, parameter counts, ...).
    pub continuous: [f64; GMPARSE_NUM_CONTINUOUS],
    /// In [0, 1] relative to the training range.
    pub continuous_normalized: [f64; GMPARSE_NUM_CONTINUOUS],
    pub discrete: [u32; GMPARSE_NUM_DISCRETE],
    pub coarse: [f64; GMPARSE_NUM_COARSE],
    pub fine: [f64; GMPARSE_NUM_FINE],
}

/// Opaque handle to a loaded parser.
pub struct GmparseParser {
    artifact: FoldArtifact,
    model: ParsingModel,
    weights: ParsingWeights<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GmparseStatus {
    match e {
        Error::Shape { .. } => GmparseStatus::Shape,
        Error::NonFinite { .. } | Error::Divergence { .. } => GmparseStatus::Numeric,
        Error::InvalidArgument(_) | Error::Coverage(_) => GmparseStatus::InvalidArgument,
        Error::Io(_) | Error::MissingFile(_) => GmparseStatus::Io,
        Error::Format(_) | Error::Json(_) => GmparseStatus::Format,
    }
}

struct Fail(GmparseStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GmparseStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GmparseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GmparseStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GmparseStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

impl GmparseParser {
    fn input_len(&self) -> usize {
        self.artifact.fen.input_shape().iter().product()
    }

    /// `pixels` is `n` images in CHW order, already in [-1, 1].
    fn batch(&self, pixels: &[f32], n: usize) -> Result<Tensor<f32>, Fail> {
        let per = self.input_len();
        if n == 0 || pixels.len() != n * per {
            return Err(Fail(
                GmparseStatus::Shape,
                format!("expected {n} x {per} pixels, got {}", pixels.len()),
            ));
        }
        let [c, h, w] = self.artifact.fen.input_shape();
        Ok(Tensor::new(vec![n, c, h, w], pixels.to_vec())?)
    }
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn gmparse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn gmparse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load fold `fold` of a `gmparse parse train` run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmparse_parser_load(run_dir: *const c_char, fold: usize, out: *mut *mut GmparseParser) -> GmparseStatus {
    guard(|| {
        if run_dir.is_null() {
            return Err(null("run_dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = CStr::from_ptr(run_dir)
            .to_str()
            .map_err(|_| Fail(GmparseStatus::InvalidArgument, "run_dir is not UTF-8".into()))?;
        let (artifact, weights) = load_parser(Path::new(dir), fold)?;
        let model = artifact.model()?;
        *out = Box::into_raw(Box::new(GmparseParser { artifact, model, weights }));
        Ok(())
    })
}

/// # Safety
/// `parser` must come from [`gmparse_parser_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gmparse_parser_free(parser: *mut GmparseParser) {
    if !parser.is_null() {
        drop(Box::from_raw(parser));
    }
}

/// Expected image shape as channels, height, width.
///
/// # Safety
/// `parser` must be live; `shape` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn gmparse_parser_input_shape(parser: *const GmparseParser, shape: *mut usize) -> GmparseStatus {
    guard(|| {
        let p = parser.as_ref().ok_or_else(|| null("parser"))?;
        slice_mut(shape, 3, "shape")?.copy_from_slice(&p.artifact.fen.input_shape());
        Ok(())
    })
}

/// Fingerprints of `n` images; `out` receives the same number of values as
/// `pixels`.
///
/// # Safety
/// `pixels` and `out` must each hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn gmparse_parser_fingerprint(
    parser: *const GmparseParser,
    pixels: *const f32,
    n: usize,
    len: usize,
    out: *mut f32,
) -> GmparseStatus {
    guard(|| {
        let p = parser.as_ref().ok_or_else(|| null("parser"))?;
        let x = p.batch(slice(pixels, len, "pixels")?, n)?;
        let f = fingerprint::fen_forward(&x, &p.model.fen, &p.weights.fen)?;
        slice_mut(out, len, "out")?.copy_from_slice(f.data());
        Ok(())
    })
}

/// Parse `n` images into `out[0..n]`.
///
/// # Safety
/// `pixels` must hold `len` floats and `out` must hold `n` predictions.
#[no_mangle]
pub unsafe extern "C" fn gmparse_parser_predict(
    parser: *const GmparseParser,
    pixels: *const f32,
    n: usize,
    len: usize,
    out: *mut GmparsePrediction,
) -> GmparseStatus {
    guard(|| {
        let p = parser.as_ref().ok_or_else(|| null("parser"))?;
        let x = p.batch(slice(pixels, len, "pixels")?, n)?;
        let preds = p.model.predict(&p.weights, &x)?;
        let dst = slice_mut(out, n, "out")?;
        for (d, pr) in dst.iter_mut().zip(&preds) {
            let norm = pr.continuous.map(|v| v.clamp(0.0, 1.0));
            *d = GmparsePrediction {
                continuous: p.artifact.stats.denormalize(&norm),
                continuous_normalized: norm,
                discrete: pr.discrete.map(|v| v as u32),
                coarse: pr.coarse,
                fine: pr.fine,
            };
        }
        Ok(())
    })
}

/// Centered magnitude spectrum of an `h` x `w` image, scaled to [0, 1].
///
/// # Safety
/// `image` and `out` must each hold `h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn gmparse_spectrum_magnitude(
    image: *const f64,
    h: usize,
    w: usize,
    log_scale: bool,
    out: *mut f64,
) -> GmparseStatus {
    guard(|| {
        let n = h.checked_mul(w).filter(|&n| n > 0).ok_or_else(|| {
            Fail(GmparseStatus::InvalidArgument, format!("bad image size {h}x{w}"))
        })?;
        let t = Tensor::new(vec![h, w], slice(image, n, "image")?.to_vec())?;
        let m = spectral::spectrum_magnitude_image(&spectral::dft2(&t)?, log_scale);
        slice_mut(out, n, "out")?.copy_from_slice(m.data());
        Ok(())
    })
}

/// Area under the ROC curve; `labels` are 0 (negative) or non-zero.
///
/// # Safety
/// `scores` and `labels` must each hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmparse_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> GmparseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        *out = metrics::auc(s, &l)?;
        Ok(())
    })
}
