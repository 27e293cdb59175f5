//! C ABI for embedding extraction.
//!
//! The surface is deliberately small: load a checkpoint into an opaque
//! handle, query the input/output geometry, embed images, free the handle.
//! All functions return a [`PaStatus`] code; the last failure message is
//! kept per thread and readable via [`pa_last_error_message`].
//!
//! The generated header lands in `include/partalign.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use partalign::ndgrad::{ModelParams, Tensor};
use partalign::partnet::{embed, load_checkpoint, BackboneConfig, HeadKind, PartNetConfig};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaStatus {
    PaOk = 0,
    /// A required pointer argument was null.
    PaNullArgument = 1,
    /// A string argument was not valid UTF-8.
    PaInvalidUtf8 = 2,
    /// The checkpoint could not be read or parsed.
    PaIoError = 3,
    /// Checkpoint and configuration disagree, or the head cannot embed
    /// without external masks.
    PaIncompatible = 4,
    /// Image buffer has the wrong length or non-finite values.
    PaBadInput = 5,
    /// The computation produced non-finite values.
    PaNumeric = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// An embedding model: parameters plus the two configuration records.
pub struct PaModel {
    params: ModelParams,
    backbone: BackboneConfig,
    partnet: PartNetConfig,
}

/// Loads a checkpoint (with its JSON sidecar) into a fresh handle.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn pa_model_load(
    checkpoint_path: *const c_char,
    out: *mut *mut PaModel,
) -> PaStatus {
    if checkpoint_path.is_null() || out.is_null() {
        set_error("null argument to pa_model_load");
        return PaStatus::PaNullArgument;
    }
    let path = match CStr::from_ptr(checkpoint_path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("checkpoint path is not valid utf-8");
            return PaStatus::PaInvalidUtf8;
        }
    };
    match load_checkpoint(Path::new(path)) {
        Ok((params, backbone, partnet)) => {
            if partnet.head == HeadKind::FixedMask {
                set_error("fixed-mask checkpoints need external masks; not supported over the C ABI");
                return PaStatus::PaIncompatible;
            }
            *out = Box::into_raw(Box::new(PaModel {
                params,
                backbone,
                partnet,
            }));
            PaStatus::PaOk
        }
        Err(e) => {
            set_error(&e.to_string());
            match e {
                partalign::Error::Data(_) => PaStatus::PaIncompatible,
                _ => PaStatus::PaIoError,
            }
        }
    }
}

/// Frees a handle returned by [`pa_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by `pa_model_load` and not
/// freed since.
#[no_mangle]
pub unsafe extern "C" fn pa_model_free(model: *mut PaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the embedding vectors this model produces.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_model_embedding_dim(model: *const PaModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).partnet.embedding_width()
}

/// Expected image geometry: height, width, channels (row-major, channel
/// fastest, values in [0,1]).
///
/// # Safety
/// `model` must be a live handle; out pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn pa_model_input_shape(
    model: *const PaModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) {
    if model.is_null() {
        return;
    }
    let b = &(*model).backbone;
    if !height.is_null() {
        *height = b.input_h;
    }
    if !width.is_null() {
        *width = b.input_w;
    }
    if !channels.is_null() {
        *channels = 3;
    }
}

/// Embeds one image into `out`. `image_len` must equal H*W*3 and `out_len`
/// must equal the embedding dimension.
///
/// # Safety
/// `model` must be a live handle; `image` and `out` must point to buffers of
/// the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pa_model_embed(
    model: *const PaModel,
    image: *const f64,
    image_len: usize,
    out: *mut f64,
    out_len: usize,
) -> PaStatus {
    if model.is_null() || image.is_null() || out.is_null() {
        set_error("null argument to pa_model_embed");
        return PaStatus::PaNullArgument;
    }
    let m = &*model;
    let (h, w) = (m.backbone.input_h, m.backbone.input_w);
    if image_len != h * w * 3 {
        set_error(&format!(
            "image buffer holds {} values, model expects {}x{}x3 = {}",
            image_len,
            h,
            w,
            h * w * 3
        ));
        return PaStatus::PaBadInput;
    }
    let dim = m.partnet.embedding_width();
    if out_len != dim {
        set_error(&format!(
            "output buffer holds {} values, embedding width is {}",
            out_len, dim
        ));
        return PaStatus::PaBadInput;
    }
    let pixels = std::slice::from_raw_parts(image, image_len);
    if pixels.iter().any(|v| !v.is_finite()) {
        set_error("image contains non-finite values");
        return PaStatus::PaBadInput;
    }
    let tensor = match Tensor::new(vec![h, w, 3], pixels.to_vec()) {
        Ok(t) => t,
        Err(e) => {
            set_error(&e.to_string());
            return PaStatus::PaBadInput;
        }
    };
    match embed(&tensor, &m.params, &m.backbone, &m.partnet) {
        Ok(embedding) => {
            if embedding.as_slice().iter().any(|v| !v.is_finite()) {
                set_error("embedding came out non-finite");
                return PaStatus::PaNumeric;
            }
            std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(embedding.as_slice());
            PaStatus::PaOk
        }
        Err(e) => {
            set_error(&e.to_string());
            PaStatus::PaNumeric
        }
    }
}

/// Squared Euclidean distance between two embeddings of equal width.
///
/// # Safety
/// Both pointers must address `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn pa_squared_distance(a: *const f64, b: *const f64, len: usize) -> f64 {
    if a.is_null() || b.is_null() {
        return f64::NAN;
    }
    let av = std::slice::from_raw_parts(a, len);
    let bv = std::slice::from_raw_parts(b, len);
    av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum()
}
