//! C interface to the colorprop engine.
//!
//! An engine holds the loaded networks and feature extractor. A sequence is
//! started from the first gray frame and its colors, then fed one gray frame
//! at a time. Images are row-major `float` buffers in `[0, 1]`: gray frames
//! have one sample per pixel, color frames three (RGB, interleaved).
//!
//! Every function returns a [`CpStatus`]. On failure a message is available
//! from [`cp_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use colorprop::color::{ColorSpace, Image};
use colorprop::global::extractor_from_spec;
use colorprop::pipeline::{Mode, Models, Propagator};
use colorprop::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 1,
    Shape = 2,
    Contract = 3,
    Format = 4,
    Config = 5,
    Io = 6,
    Numeric = 7,
    /// The engine panicked; the handle should be freed.
    Internal = 8,
}

pub const CP_MODE_FULL: u32 = 0;
pub const CP_MODE_LOCAL: u32 = 1;
pub const CP_MODE_GLOBAL: u32 = 2;

/// Loaded networks and feature extractor.
pub struct CpEngine {
    models: Arc<Models>,
}

/// A sequence being propagated.
pub struct CpSequence {
    propagator: Propagator,
    height: usize,
    width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CpStatus {
    match e {
        Error::Shape(_) => CpStatus::Shape,
        Error::Contract(_) => CpStatus::Contract,
        Error::Format(_) | Error::Image { .. } | Error::MissingCache { .. } => CpStatus::Format,
        Error::Config(_) => CpStatus::Config,
        Error::Io { .. } => CpStatus::Io,
        Error::Numeric(_) => CpStatus::Numeric,
    }
}

struct Failure(CpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(CpStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            CpStatus::Internal
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

unsafe fn image_from(p: *const f32, height: usize, width: usize, space: ColorSpace, what: &str) -> Result<Image, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    let len = height * width * space.channels();
    let data = std::slice::from_raw_parts(p, len).to_vec();
    Ok(Image::new(height, width, space, data)?)
}

/// Creates an engine. `warp_checkpoint` and `fusion_checkpoint` may be null
/// when the modes used do not need them; a null `extractor` means the
/// built-in one, otherwise `"builtin"` or `"import:DIR"`.
///
/// # Safety
/// String arguments must be null or nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_engine_new(
    warp_checkpoint: *const c_char,
    fusion_checkpoint: *const c_char,
    extractor: *const c_char,
    out: *mut *mut CpEngine,
) -> CpStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let warp = opt_str(warp_checkpoint, "warp_checkpoint")?.map(PathBuf::from);
        let fusion = opt_str(fusion_checkpoint, "fusion_checkpoint")?.map(PathBuf::from);
        let extractor = extractor_from_spec(opt_str(extractor, "extractor")?.unwrap_or("builtin"))?;
        let models = Models::load(warp.as_deref(), fusion.as_deref(), extractor)?;
        *out = Box::into_raw(Box::new(CpEngine {
            models: Arc::new(models),
        }));
        Ok(())
    })
}

/// Frees an engine. Sequences started from it stay valid.
///
/// # Safety
/// `engine` must be null or come from [`cp_engine_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cp_engine_free(engine: *mut CpEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Starts a sequence from its first gray frame and that frame's colors.
/// `mode` is one of `CP_MODE_FULL`, `CP_MODE_LOCAL`, `CP_MODE_GLOBAL`.
///
/// # Safety
/// `gray1` must hold `height * width` floats, `rgb1` three times as many.
#[no_mangle]
pub unsafe extern "C" fn cp_sequence_begin(
    engine: *const CpEngine,
    mode: u32,
    height: usize,
    width: usize,
    gray1: *const f32,
    rgb1: *const f32,
    out: *mut *mut CpSequence,
) -> CpStatus {
    guard(|| {
        if engine.is_null() || out.is_null() {
            return Err(invalid("engine or out is null"));
        }
        let mode = match mode {
            CP_MODE_FULL => Mode::Full,
            CP_MODE_LOCAL => Mode::LocalOnly,
            CP_MODE_GLOBAL => Mode::GlobalOnly,
            other => return Err(invalid(&format!("unknown mode {other}"))),
        };
        let g1 = image_from(gray1, height, width, ColorSpace::Gray, "gray1")?;
        let i1 = image_from(rgb1, height, width, ColorSpace::Rgb, "rgb1")?;
        let propagator = Propagator::new((*engine).models.clone(), mode, &g1, &i1)?;
        *out = Box::into_raw(Box::new(CpSequence {
            propagator,
            height,
            width,
        }));
        Ok(())
    })
}

/// Colors the next gray frame, writing `3 * height * width` floats to `rgb_out`.
///
/// # Safety
/// `gray` must hold `height * width` floats and `rgb_out` three times as many.
#[no_mangle]
pub unsafe extern "C" fn cp_sequence_push(sequence: *mut CpSequence, gray: *const f32, rgb_out: *mut f32) -> CpStatus {
    guard(|| {
        if sequence.is_null() || rgb_out.is_null() {
            return Err(invalid("sequence or rgb_out is null"));
        }
        let seq = &mut *sequence;
        let g = image_from(gray, seq.height, seq.width, ColorSpace::Gray, "gray")?;
        let (img, _) = seq.propagator.push(&g)?;
        std::slice::from_raw_parts_mut(rgb_out, img.data().len()).copy_from_slice(img.data());
        Ok(())
    })
}

/// 1-based index of the last frame produced by the sequence, or 0 for null.
///
/// # Safety
/// `sequence` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_sequence_frame(sequence: *const CpSequence) -> usize {
    if sequence.is_null() {
        0
    } else {
        (*sequence).propagator.frame()
    }
}

/// # Safety
/// `sequence` must be null or come from [`cp_sequence_begin`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cp_sequence_free(sequence: *mut CpSequence) {
    if !sequence.is_null() {
        drop(Box::from_raw(sequence));
    }
}

/// Message of the last failure on this thread, or null. The pointer is valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}
