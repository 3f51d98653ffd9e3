//! C interface to the tracker. Models and trackers are opaque handles; every
//! fallible call returns a [`SegtrackStatus`] and leaves a message for
//! [`segtrack_last_error`] on the calling thread.
//!
//! Images are passed as tightly packed 8-bit RGB, masks as 8-bit single
//! channel (0 background, 255 foreground).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use segtrack::config::{Ablation, NetConfig, TrackerConfig};
use segtrack::eval;
use segtrack::geometry::{BoundingBox, BoxRole, CoordSpace, Image, Mask};
use segtrack::pipeline::NetworkBundle;
use segtrack::tracker::{FrameFlags, FrameResult, InitTarget, Tracker};
use segtrack::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegtrackStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Model = 4,
    ShapeMismatch = 5,
    EmptyTarget = 6,
    Config = 7,
    Internal = 8,
    Panic = 9,
}

/// Axis-aligned box in pixels, top-left corner plus size.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegtrackBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub const SEGTRACK_FLAG_MASK_EMPTY: u32 = 1;
pub const SEGTRACK_FLAG_SCALE_NONPOSITIVE: u32 = 2;
pub const SEGTRACK_FLAG_SCALE_LOW_CONFIDENCE: u32 = 4;
pub const SEGTRACK_FLAG_SCALE_OUT_OF_RANGE: u32 = 8;
pub const SEGTRACK_FLAG_PROXY_EMPTY: u32 = 16;

/// Boxes and fallback flags of one tracked frame.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegtrackFrame {
    pub index: u32,
    pub visible: SegtrackBox,
    pub inherent: SegtrackBox,
    /// Bitwise OR of `SEGTRACK_FLAG_*`.
    pub flags: u32,
}

/// Loaded network weights, shareable between trackers.
pub struct SegtrackModel {
    bundle: Arc<NetworkBundle>,
}

/// One tracked target.
pub struct SegtrackTracker {
    tracker: Tracker,
    width: usize,
    height: usize,
    last_mask: Mask,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> SegtrackStatus {
    match e {
        Error::Io { .. } => SegtrackStatus::Io,
        Error::Model(_) => SegtrackStatus::Model,
        Error::Config(_) => SegtrackStatus::Config,
        Error::ShapeMismatch(_) | Error::ChannelMismatch { .. } | Error::BadResolution(..) => SegtrackStatus::ShapeMismatch,
        Error::EmptyTarget | Error::MissingInitTarget | Error::NoForeground | Error::EmptyForeground => {
            SegtrackStatus::EmptyTarget
        }
        Error::InvalidArgument(_) | Error::Image(_) | Error::Dataset(_) => SegtrackStatus::InvalidArgument,
        _ => SegtrackStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status and message.
fn guard(f: impl FnOnce() -> Result<(), (SegtrackStatus, String)>) -> SegtrackStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SegtrackStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SegtrackStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SegtrackStatus, String) {
    (status_of(&e), format!("{}: {e}", e.code()))
}

fn null(what: &str) -> (SegtrackStatus, String) {
    (SegtrackStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (SegtrackStatus, String) {
    (SegtrackStatus::InvalidArgument, msg)
}

unsafe fn slice<'a>(ptr: *const u8, len: usize, what: &str) -> Result<&'a [u8], (SegtrackStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn rgb_image(rgb: *const u8, width: u32, height: u32) -> Result<Image, (SegtrackStatus, String)> {
    let (w, h) = (width as usize, height as usize);
    if w == 0 || h == 0 {
        return Err(invalid(format!("image size {w}x{h}")));
    }
    let data = slice(rgb, w * h * 3, "rgb")?;
    Image::new(w, h, 3, data.iter().map(|&v| v as f32 / 255.0).collect()).map_err(lib_err)
}

unsafe fn gray_mask(mask: *const u8, width: u32, height: u32) -> Result<Mask, (SegtrackStatus, String)> {
    let (w, h) = (width as usize, height as usize);
    let data = slice(mask, w * h, "mask")?;
    Mask::new(w, h, data.iter().map(|&v| v as f32 / 255.0).collect(), CoordSpace::Image).map_err(lib_err)
}

unsafe fn ablation(flags: *const c_char) -> Result<Ablation, (SegtrackStatus, String)> {
    if flags.is_null() {
        return Ok(Ablation::default());
    }
    let s = CStr::from_ptr(flags).to_str().map_err(|_| invalid("ablation flags are not UTF-8".into()))?;
    Ablation::parse(s).map_err(lib_err)
}

fn to_c(b: &BoundingBox) -> SegtrackBox {
    SegtrackBox { x: b.x, y: b.y, w: b.w, h: b.h }
}

fn from_c(b: &SegtrackBox, role: BoxRole) -> Result<BoundingBox, (SegtrackStatus, String)> {
    BoundingBox::new(b.x, b.y, b.w, b.h, role).map_err(lib_err)
}

fn flag_bits(f: &FrameFlags) -> u32 {
    let mut bits = 0;
    for (on, bit) in [
        (f.mask_empty, SEGTRACK_FLAG_MASK_EMPTY),
        (f.sem_nonpositive, SEGTRACK_FLAG_SCALE_NONPOSITIVE),
        (f.sem_low_confidence, SEGTRACK_FLAG_SCALE_LOW_CONFIDENCE),
        (f.sem_out_of_range, SEGTRACK_FLAG_SCALE_OUT_OF_RANGE),
        (f.proxy_empty, SEGTRACK_FLAG_PROXY_EMPTY),
    ] {
        if on {
            bits |= bit;
        }
    }
    bits
}

fn frame_of(r: &FrameResult) -> SegtrackFrame {
    SegtrackFrame { index: r.index as u32, visible: to_c(&r.visible), inherent: to_c(&r.inherent), flags: flag_bits(&r.flags) }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn segtrack_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn segtrack_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a weights file written by `segtrack train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segtrack_model_load(path: *const c_char, out: *mut *mut SegtrackModel) -> SegtrackStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8".into()))?;
        let (bundle, _, _) = NetworkBundle::load(Path::new(p)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SegtrackModel { bundle: Arc::new(bundle) }));
        Ok(())
    })
}

/// Creates a model with the default architecture and untrained weights
/// drawn from `seed`. Useful for smoke tests only.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segtrack_model_random(seed: u64, out: *mut *mut SegtrackModel) -> SegtrackStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bundle = NetworkBundle::new(&NetConfig::default(), seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SegtrackModel { bundle: Arc::new(bundle) }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from a `segtrack_model_*` constructor and not be used
/// afterwards. Null is ignored. Trackers created from it stay valid.
#[no_mangle]
pub unsafe extern "C" fn segtrack_model_free(model: *mut SegtrackModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn init(
    model: *const SegtrackModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    target: impl FnOnce() -> Result<InitTarget, (SegtrackStatus, String)>,
    ablate: *const c_char,
    first: *mut SegtrackFrame,
    out: *mut *mut SegtrackTracker,
) -> SegtrackStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let frame = rgb_image(rgb, width, height)?;
        let target = target()?;
        let ab = ablation(ablate)?;
        let (tracker, r0) =
            Tracker::initialize(model.bundle.clone(), &TrackerConfig::default(), ab, &frame, &target).map_err(lib_err)?;
        if !first.is_null() {
            *first = frame_of(&r0);
        }
        *out = Box::into_raw(Box::new(SegtrackTracker {
            tracker,
            width: width as usize,
            height: height as usize,
            last_mask: r0.mask,
        }));
        Ok(())
    })
}

/// Starts tracking from a mask on the first frame.
///
/// # Safety
/// `rgb` must hold `width*height*3` bytes and `mask` `width*height` bytes.
/// `ablate` is null or a comma-separated flag list such as `"no_sem"`.
/// `first` may be null; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn segtrack_tracker_init_mask(
    model: *const SegtrackModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    mask: *const u8,
    ablate: *const c_char,
    first: *mut SegtrackFrame,
    out: *mut *mut SegtrackTracker,
) -> SegtrackStatus {
    init(model, rgb, width, height, || Ok(InitTarget::Mask(gray_mask(mask, width, height)?)), ablate, first, out)
}

/// Starts tracking from a box on the first frame.
///
/// # Safety
/// As [`segtrack_tracker_init_mask`], without the mask.
#[no_mangle]
pub unsafe extern "C" fn segtrack_tracker_init_box(
    model: *const SegtrackModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    target: SegtrackBox,
    ablate: *const c_char,
    first: *mut SegtrackFrame,
    out: *mut *mut SegtrackTracker,
) -> SegtrackStatus {
    init(model, rgb, width, height, || Ok(InitTarget::Box(from_c(&target, BoxRole::Visible)?)), ablate, first, out)
}

/// Tracks the next frame, which must have the first frame's size.
///
/// # Safety
/// `tracker` and `out` must be valid; `rgb` must hold `width*height*3` bytes.
#[no_mangle]
pub unsafe extern "C" fn segtrack_tracker_step(
    tracker: *mut SegtrackTracker,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut SegtrackFrame,
) -> SegtrackStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if (width as usize, height as usize) != (t.width, t.height) {
            return Err((
                SegtrackStatus::ShapeMismatch,
                format!("frame is {width}x{height}, tracker expects {}x{}", t.width, t.height),
            ));
        }
        let frame = rgb_image(rgb, width, height)?;
        let r = t.tracker.step(&frame).map_err(lib_err)?;
        *out = frame_of(&r);
        t.last_mask = r.mask;
        Ok(())
    })
}

/// Copies the latest foreground probability, quantized to 0..=255, into
/// `out`, which must hold `len >= width*height` bytes.
///
/// # Safety
/// `tracker` must be valid and `out` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn segtrack_tracker_mask(tracker: *const SegtrackTracker, out: *mut u8, len: usize) -> SegtrackStatus {
    guard(|| {
        let t = tracker.as_ref().ok_or_else(|| null("tracker"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let n = t.width * t.height;
        if len < n {
            return Err(invalid(format!("buffer holds {len} bytes, mask needs {n}")));
        }
        let dst = std::slice::from_raw_parts_mut(out, n);
        for (d, &p) in dst.iter_mut().zip(t.last_mask.data()) {
            *d = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `tracker` must come from a `segtrack_tracker_init_*` call and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn segtrack_tracker_free(tracker: *mut SegtrackTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Intersection over union of two 8-bit masks binarized at 128.
///
/// # Safety
/// `a` and `b` must hold `width*height` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn segtrack_jaccard(a: *const u8, b: *const u8, width: u32, height: u32, out: *mut f64) -> SegtrackStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (ma, mb) = (gray_mask(a, width, height)?, gray_mask(b, width, height)?);
        *out = eval::jaccard(&ma, &mb).map_err(lib_err)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn segtrack_box_iou(a: SegtrackBox, b: SegtrackBox, out: *mut f64) -> SegtrackStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = eval::box_iou(&from_c(&a, BoxRole::Visible)?, &from_c(&b, BoxRole::Visible)?);
        Ok(())
    })
}
