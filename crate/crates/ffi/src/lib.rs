//! C ABI over the `gmcml` core.
//!
//! Every entry point returns a [`GmcmlStatus`]; on failure the message is
//! kept per thread and read back with [`gmcml_last_error_message`]. Models
//! and datasets cross the boundary as opaque handles owned by the caller
//! and released with the matching `_free` function. Images are planar
//! `[3, S, S]` doubles in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gmcml::render::{render_dataset, write_dataset, Modes, RenderConfig, SamplePair, Split};
use gmcml::tensor::Tensor;
use gmcml::trainer::{ConjugateModel, Trainer};
use gmcml::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmcmlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Dataset = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    OutOfRange = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmcmlModes {
    Centered = 0,
    Shifted = 1,
    Both = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmcmlSplit {
    Train = 0,
    Test = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GmcmlRenderConfig {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub modes: GmcmlModes,
    pub subdivision: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GmcmlSampleInfo {
    pub category: usize,
    pub pose: [f64; 3],
    pub light: f64,
    pub split: GmcmlSplit,
}

/// A trained model loaded from a checkpoint.
pub struct GmcmlModel {
    inner: ConjugateModel,
}

/// An in-memory rendered dataset.
pub struct GmcmlDataset {
    pairs: Vec<SamplePair>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> GmcmlStatus {
    match err {
        Error::ShapeMismatch { .. } => GmcmlStatus::ShapeMismatch,
        Error::InvalidArgument(_) | Error::Domain { .. } => GmcmlStatus::InvalidArgument,
        Error::NonFinite(_) | Error::TapeConsumed | Error::NonScalarLoss(_) => GmcmlStatus::Numeric,
        Error::Metadata { .. } | Error::MissingImage(_) | Error::Json(_) => GmcmlStatus::Dataset,
        Error::Checkpoint(_) => GmcmlStatus::Checkpoint,
        Error::Io(_) | Error::Image(_) => GmcmlStatus::Io,
    }
}

struct Fail(GmcmlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GmcmlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GmcmlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GmcmlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GmcmlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GmcmlStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            GmcmlStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Length in bytes of the last error message on this thread, excluding
/// the terminating NUL.
#[no_mangle]
pub extern "C" fn gmcml_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message, NUL terminated and truncated to fit.
/// Returns the number of bytes written, excluding the NUL.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn gmcml_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    if buf.is_null() || cap == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(cap - 1);
        ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Static NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn gmcml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the model weights stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmcml_model_load(path: *const c_char, out: *mut *mut GmcmlModel) -> GmcmlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let trainer = Trainer::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(GmcmlModel { inner: trainer.model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`gmcml_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gmcml_model_free(model: *mut GmcmlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input side length, number of classes and descriptor length.
///
/// # Safety
/// `model` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn gmcml_model_dims(
    model: *const GmcmlModel,
    resolution: *mut usize,
    classes: *mut usize,
    descriptor_len: *mut usize,
) -> GmcmlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if let Some(r) = resolution.as_mut() {
            *r = m.inner.resolution();
        }
        if let Some(c) = classes.as_mut() {
            *c = m.inner.classes();
        }
        if let Some(d) = descriptor_len.as_mut() {
            *d = m.inner.classifier.config.descriptor_len();
        }
        Ok(())
    })
}

/// Runs one image through both networks without corruption. `mask_out`
/// receives `3 * S * S` values, `descriptor_out` and `logits_out` the
/// lengths reported by [`gmcml_model_dims`]. Any output may be null.
///
/// # Safety
/// `image` must point to `image_len` doubles; each non-null output must
/// point to at least its stated capacity.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gmcml_model_infer(
    model: *const GmcmlModel,
    image: *const f64,
    image_len: usize,
    mask_out: *mut f64,
    mask_cap: usize,
    descriptor_out: *mut f64,
    descriptor_cap: usize,
    logits_out: *mut f64,
    logits_cap: usize,
) -> GmcmlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        let s = m.inner.resolution();
        if image_len != 3 * s * s {
            return Err(Error::ShapeMismatch {
                op: "gmcml_model_infer",
                left: vec![image_len],
                right: vec![3 * s * s],
            }
            .into());
        }
        let x = Tensor::new(vec![3, s, s], std::slice::from_raw_parts(image, image_len).to_vec())?;
        let inf = m.inner.infer(&[&x])?.remove(0);
        for (dst, cap, src, what) in [
            (mask_out, mask_cap, inf.mask.data(), "mask_out"),
            (descriptor_out, descriptor_cap, &inf.descriptor[..], "descriptor_out"),
            (logits_out, logits_cap, &inf.logits[..], "logits_out"),
        ] {
            if !dst.is_null() {
                out_slice(dst, cap, src.len(), what)?.copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Renders a dataset in memory.
///
/// # Safety
/// `config` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmcml_dataset_render(
    config: *const GmcmlRenderConfig,
    out: *mut *mut GmcmlDataset,
) -> GmcmlStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = RenderConfig {
            seed: c.seed,
            classes: c.classes,
            per_class: c.per_class,
            test_per_class: c.test_per_class,
            resolution: c.resolution,
            modes: match c.modes {
                GmcmlModes::Centered => Modes::Centered,
                GmcmlModes::Shifted => Modes::Shifted,
                GmcmlModes::Both => Modes::Both,
            },
            subdivision: c.subdivision,
        };
        let pairs = render_dataset(&cfg)?;
        *out = Box::into_raw(Box::new(GmcmlDataset { pairs }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`gmcml_dataset_render`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gmcml_dataset_free(dataset: *mut GmcmlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of pairs, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gmcml_dataset_len(dataset: *const GmcmlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.pairs.len())
}

/// Copies pair `index`: the image and mask (`3 * S * S` values each) and
/// its labels. Any output may be null.
///
/// # Safety
/// `dataset` must be a live handle; each non-null output must point to at
/// least its stated capacity.
#[no_mangle]
pub unsafe extern "C" fn gmcml_dataset_get(
    dataset: *const GmcmlDataset,
    index: usize,
    image_out: *mut f64,
    image_cap: usize,
    mask_out: *mut f64,
    mask_cap: usize,
    info_out: *mut GmcmlSampleInfo,
) -> GmcmlStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let p = d.pairs.get(index).ok_or_else(|| {
            Fail(
                GmcmlStatus::OutOfRange,
                format!("index {index} outside dataset of {}", d.pairs.len()),
            )
        })?;
        if !image_out.is_null() {
            out_slice(image_out, image_cap, p.o.numel(), "image_out")?.copy_from_slice(p.o.data());
        }
        if !mask_out.is_null() {
            out_slice(mask_out, mask_cap, p.m.numel(), "mask_out")?.copy_from_slice(p.m.data());
        }
        if let Some(info) = info_out.as_mut() {
            *info = GmcmlSampleInfo {
                category: p.category,
                pose: p.pose,
                light: p.light,
                split: match p.split {
                    Split::Train => GmcmlSplit::Train,
                    Split::Test => GmcmlSplit::Test,
                },
            };
        }
        Ok(())
    })
}

/// Writes the dataset as PNG pairs plus `meta.jsonl` under `dir`.
///
/// # Safety
/// `dataset` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gmcml_dataset_write(dataset: *const GmcmlDataset, dir: *const c_char) -> GmcmlStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        write_dataset(&d.pairs, &path_arg(dir)?)?;
        Ok(())
    })
}
