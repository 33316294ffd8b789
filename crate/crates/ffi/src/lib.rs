//! C ABI over the `sbseg` library.
//!
//! Every fallible function returns an [`SbsegStatus`]. After a failure the
//! message is available from [`sbseg_last_error_message`] on the same thread
//! until the next failing call. Tensors and label maps are opaque handles
//! owned by the caller and released with their `_free` function; freeing
//! NULL is a no-op. Output handles are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sbseg::edge::{self, CannyConfig};
use sbseg::eval;
use sbseg::image::{ColorImage, GrayImage, LabelMap};
use sbseg::ioformats;
use sbseg::loss::{self, GuideMode, ImageTags, LossConfig, Order};
use sbseg::refine::{self, RefineConfig, RefineMethod};
use sbseg::tensor::Tensor;

/// Dense `channels × height × width` float tensor.
pub struct SbsegTensor(Tensor);

/// Per-pixel class indices.
pub struct SbsegLabelMap(LabelMap);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    NonFinite = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SbsegCannyOptions {
    pub sigma: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SbsegLossOptions {
    pub alpha: f64,
    pub lambda_s: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub psi_eps: f64,
    pub bce_clamp: f64,
    pub normalize: bool,
    /// Gate on the guide values instead of their derivatives.
    pub guide_direct: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SbsegRefineOptions {
    pub steps: usize,
    pub step_size: f64,
    pub fidelity_mu: f64,
    pub rw_beta: f64,
    pub rw_iters: usize,
    pub bg_threshold: f64,
    pub affinity_radius: usize,
    pub affinity_sigma: f64,
    /// Projected gradient descent instead of the primal-dual solver.
    pub gradient_descent: bool,
    pub loss: SbsegLossOptions,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(sbseg::Error),
}

impl From<sbseg::Error> for Failure {
    fn from(e: sbseg::Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn status_of(e: &sbseg::Error) -> SbsegStatus {
    use sbseg::Error as E;
    match e {
        E::ShapeMismatch { .. } | E::SizeMismatch { .. } => SbsegStatus::ShapeMismatch,
        E::InvalidKernel(_)
        | E::InvalidArgument(_)
        | E::LabelOutOfRange { .. }
        | E::DuplicateName(_)
        | E::MissingTensor(_) => SbsegStatus::InvalidArgument,
        E::NonFinite(_) => SbsegStatus::NonFinite,
        E::UnsupportedVariant(_)
        | E::MalformedHeader(_)
        | E::UnsupportedMaxval(_)
        | E::TruncatedPayload(_)
        | E::BadMagic(_) => SbsegStatus::Format,
        E::Io(_) => SbsegStatus::Io,
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> FfiResult<()>) -> SbsegStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SbsegStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed as {what}"));
            SbsegStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(m))) => {
            set_error(m);
            SbsegStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let m = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {m}"));
            SbsegStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

fn count(width: usize, height: usize, per_pixel: usize) -> FfiResult<usize> {
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(per_pixel))
        .ok_or_else(|| Failure::Invalid(format!("image of {width}x{height} pixels is too large")))
}

unsafe fn tags(foreground: *const u8, len: usize) -> FfiResult<ImageTags> {
    Ok(ImageTags::new(slice(foreground, len, "foreground")?.iter().map(|&f| f != 0).collect()))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

fn loss_config(o: &SbsegLossOptions) -> LossConfig {
    LossConfig {
        alpha: o.alpha,
        lambda_s: o.lambda_s,
        lambda1: o.lambda1,
        lambda2: o.lambda2,
        psi_eps: o.psi_eps,
        bce_clamp: o.bce_clamp,
        normalize: o.normalize,
        guide_mode: if o.guide_direct { GuideMode::Direct } else { GuideMode::Gradient },
    }
}

fn refine_config(o: &SbsegRefineOptions) -> RefineConfig {
    RefineConfig {
        steps: o.steps,
        step_size: o.step_size,
        fidelity_mu: o.fidelity_mu,
        rw_beta: o.rw_beta,
        rw_iters: o.rw_iters,
        bg_threshold: o.bg_threshold,
        affinity_radius: o.affinity_radius,
        affinity_sigma: o.affinity_sigma,
        method: if o.gradient_descent { RefineMethod::GradientDescent } else { RefineMethod::PrimalDual },
    }
}

unsafe fn refine_options(p: *const SbsegRefineOptions) -> SbsegRefineOptions {
    p.as_ref().copied().unwrap_or_else(|| sbseg_refine_options_default())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sbseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sbseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn sbseg_canny_options_default() -> SbsegCannyOptions {
    let d = CannyConfig::default();
    SbsegCannyOptions {
        sigma: d.gaussian_sigma,
        low_threshold: d.low_threshold,
        high_threshold: d.high_threshold,
    }
}

#[no_mangle]
pub extern "C" fn sbseg_loss_options_default() -> SbsegLossOptions {
    let d = LossConfig::default();
    SbsegLossOptions {
        alpha: d.alpha,
        lambda_s: d.lambda_s,
        lambda1: d.lambda1,
        lambda2: d.lambda2,
        psi_eps: d.psi_eps,
        bce_clamp: d.bce_clamp,
        normalize: d.normalize,
        guide_direct: d.guide_mode == GuideMode::Direct,
    }
}

#[no_mangle]
pub extern "C" fn sbseg_refine_options_default() -> SbsegRefineOptions {
    let d = RefineConfig::default();
    SbsegRefineOptions {
        steps: d.steps,
        step_size: d.step_size,
        fidelity_mu: d.fidelity_mu,
        rw_beta: d.rw_beta,
        rw_iters: d.rw_iters,
        bg_threshold: d.bg_threshold,
        affinity_radius: d.affinity_radius,
        affinity_sigma: d.affinity_sigma,
        gradient_descent: d.method == RefineMethod::GradientDescent,
        loss: sbseg_loss_options_default(),
    }
}

/// Copies `channels * height * width` floats, channel-major then row-major.
///
/// # Safety
/// `data` must point to that many floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_tensor_new(
    channels: usize,
    height: usize,
    width: usize,
    data: *const f32,
    out: *mut *mut SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = count(width, height, channels)?;
        let t = Tensor::new(channels, height, width, slice(data, n, "data")?.to_vec())?;
        *out = boxed(SbsegTensor(t));
        Ok(())
    })
}

/// # Safety
/// `tensor` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbseg_tensor_free(tensor: *mut SbsegTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// # Safety
/// `tensor` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_tensor_shape(
    tensor: *const SbsegTensor,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> SbsegStatus {
    guard(|| {
        let (c, h, w) = borrow(tensor, "tensor")?.0.shape();
        *out_ptr(channels, "channels")? = c;
        *out_ptr(height, "height")? = h;
        *out_ptr(width, "width")? = w;
        Ok(())
    })
}

/// Borrowed pointer to the tensor's values, valid until the handle is freed.
///
/// # Safety
/// `tensor` must be a live handle and `data` writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_tensor_data(tensor: *const SbsegTensor, data: *mut *const f32) -> SbsegStatus {
    guard(|| {
        let t = borrow(tensor, "tensor")?;
        *out_ptr(data, "data")? = t.0.data().as_ptr();
        Ok(())
    })
}

/// # Safety
/// `data` must point to `width * height` labels and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_label_map_new(
    width: usize,
    height: usize,
    data: *const u32,
    out: *mut *mut SbsegLabelMap,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = count(width, height, 1)?;
        let map = LabelMap::new(width, height, slice(data, n, "data")?.to_vec())?;
        *out = boxed(SbsegLabelMap(map));
        Ok(())
    })
}

/// # Safety
/// `map` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbseg_label_map_free(map: *mut SbsegLabelMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `map` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_label_map_shape(
    map: *const SbsegLabelMap,
    width: *mut usize,
    height: *mut usize,
) -> SbsegStatus {
    guard(|| {
        let m = &borrow(map, "map")?.0;
        *out_ptr(width, "width")? = m.width;
        *out_ptr(height, "height")? = m.height;
        Ok(())
    })
}

/// Borrowed pointer to the labels, valid until the handle is freed.
///
/// # Safety
/// `map` must be a live handle and `data` writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_label_map_data(map: *const SbsegLabelMap, data: *mut *const u32) -> SbsegStatus {
    guard(|| {
        let m = borrow(map, "map")?;
        *out_ptr(data, "data")? = m.0.data.as_ptr();
        Ok(())
    })
}

/// Reads entry `name` of an SMT1 container; NULL `name` selects the first
/// entry.
///
/// # Safety
/// `path` and a non-NULL `name` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_read_tensor(
    path: *const c_char,
    name: *const c_char,
    out: *mut *mut SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let container = ioformats::read_tensors(text(path, "path")?)?;
        let name = if name.is_null() {
            container
                .names()
                .next()
                .ok_or_else(|| Failure::Invalid("container has no entries".into()))?
                .to_owned()
        } else {
            text(name, "name")?.to_owned()
        };
        *out = boxed(SbsegTensor(container.tensor(&name)?));
        Ok(())
    })
}

/// Writes `tensor` as the single entry `name` of a new SMT1 container.
///
/// # Safety
/// `path` and `name` must be NUL-terminated; `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbseg_write_tensor(
    path: *const c_char,
    name: *const c_char,
    tensor: *const SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let mut c = ioformats::TensorContainer::new();
        c.insert_tensor(text(name, "name")?, &borrow(tensor, "tensor")?.0)?;
        ioformats::write_tensors(text(path, "path")?, &c)?;
        Ok(())
    })
}

/// Binary Canny edge map of an 8-bit grayscale image; NULL `options` uses
/// the defaults.
///
/// # Safety
/// `gray` must point to `width * height` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_canny(
    gray: *const u8,
    width: usize,
    height: usize,
    options: *const SbsegCannyOptions,
    out: *mut *mut SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let o = options.as_ref().copied().unwrap_or_else(|| sbseg_canny_options_default());
        let image = GrayImage::new(width, height, slice(gray, count(width, height, 1)?, "gray")?.to_vec())?;
        let config = CannyConfig {
            gaussian_sigma: o.sigma,
            low_threshold: o.low_threshold,
            high_threshold: o.high_threshold,
        };
        *out = boxed(SbsegTensor(edge::canny(&image, &config)?));
        Ok(())
    })
}

/// # Safety
/// `labels` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_label_to_boundary(
    labels: *const SbsegLabelMap,
    num_classes: usize,
    thickness: usize,
    out: *mut *mut SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let b = edge::label_to_boundary(&borrow(labels, "labels")?.0, num_classes, thickness)?;
        *out = boxed(SbsegTensor(b));
        Ok(())
    })
}

/// Boundary-guided smoothness loss of order 1 or 2. `foreground` holds one
/// flag per foreground class; the background channel is always active.
/// `grad` may be NULL when the gradient is not needed.
///
/// # Safety
/// Handles must be live, `foreground` must hold `num_foreground` bytes and
/// `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_smoothness_loss(
    cam: *const SbsegTensor,
    guide: *const SbsegTensor,
    foreground: *const u8,
    num_foreground: usize,
    order: u32,
    options: *const SbsegLossOptions,
    value: *mut f64,
    grad: *mut *mut SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let value = out_ptr(value, "value")?;
        let o = options.as_ref().copied().unwrap_or_else(|| sbseg_loss_options_default());
        let tags = tags(foreground, num_foreground)?;
        let r = loss::smoothness_loss(
            &borrow(cam, "cam")?.0,
            &borrow(guide, "guide")?.0,
            &tags,
            Order::from_int(order)?,
            &loss_config(&o),
        )?;
        *value = r.value;
        if let Some(g) = grad.as_mut() {
            *g = boxed(SbsegTensor(r.grad));
        }
        Ok(())
    })
}

/// Smoothness refinement of a CAM guided by a boundary stack.
///
/// # Safety
/// Handles must be live, `foreground` must hold `num_foreground` bytes and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_refine(
    cam: *const SbsegTensor,
    guide: *const SbsegTensor,
    foreground: *const u8,
    num_foreground: usize,
    options: *const SbsegRefineOptions,
    out: *mut *mut SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let o = refine_options(options);
        let tags = tags(foreground, num_foreground)?;
        let refined = refine::refine_cam_by_smoothness(
            &borrow(cam, "cam")?.0,
            &borrow(guide, "guide")?.0,
            &tags,
            &refine_config(&o),
            &loss_config(&o.loss),
        )?;
        *out = boxed(SbsegTensor(refined));
        Ok(())
    })
}

/// Random-walk diffusion of a CAM over color affinities of an interleaved
/// RGB image.
///
/// # Safety
/// `rgb` must point to `3 * width * height` bytes; `cam` must be live and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_random_walk(
    cam: *const SbsegTensor,
    rgb: *const u8,
    width: usize,
    height: usize,
    options: *const SbsegRefineOptions,
    out: *mut *mut SbsegTensor,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let config = refine_config(&refine_options(options));
        let image = ColorImage::new(width, height, slice(rgb, count(width, height, 3)?, "rgb")?.to_vec())?;
        let graph = refine::build_color_affinity(&image, &config)?;
        let walked = refine::random_walk_refine(&borrow(cam, "cam")?.0, &graph, &config)?;
        *out = boxed(SbsegTensor(walked));
        Ok(())
    })
}

/// Argmax pseudo-labels over the tagged classes, background below
/// `bg_threshold`.
///
/// # Safety
/// `cam` must be live, `foreground` must hold `num_foreground` bytes and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_pseudo_label(
    cam: *const SbsegTensor,
    foreground: *const u8,
    num_foreground: usize,
    bg_threshold: f64,
    out: *mut *mut SbsegLabelMap,
) -> SbsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let tags = tags(foreground, num_foreground)?;
        let labels = refine::cam_to_pseudo_label(&borrow(cam, "cam")?.0, &tags, bg_threshold)?;
        *out = boxed(SbsegLabelMap(labels));
        Ok(())
    })
}

/// Mean IoU over `count` prediction/truth pairs, absent classes excluded.
///
/// # Safety
/// `preds` and `truths` must each hold `count` live handles; `miou` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sbseg_miou(
    preds: *const *const SbsegLabelMap,
    truths: *const *const SbsegLabelMap,
    count: usize,
    num_classes: usize,
    miou: *mut f64,
) -> SbsegStatus {
    guard(|| {
        let miou = out_ptr(miou, "miou")?;
        let collect = |ptrs: &[*const SbsegLabelMap], what| -> FfiResult<Vec<LabelMap>> {
            ptrs.iter().map(|&p| Ok(borrow(p, what)?.0.clone())).collect()
        };
        let p = collect(slice(preds, count, "preds")?, "preds")?;
        let t = collect(slice(truths, count, "truths")?, "truths")?;
        *miou = eval::miou(&p, &t, num_classes)?.miou;
        Ok(())
    })
}
