//! C ABI over the sgadv attack library.
//!
//! Conventions:
//!
//! * Handles (`SgadvModel`, `SgadvImage`) are opaque pointers created and
//!   destroyed by this library; never free them with `free()`.
//! * Every fallible function returns an [`SgadvStatus`]; outputs are written
//!   through out-pointers only on `SGADV_STATUS_OK`.
//! * On failure, a thread-local message is retrievable with
//!   [`sgadv_last_error`].
//! * All pointers must be non-null and, for buffers, valid for the stated
//!   length; pixel data is row-major, channel-interleaved `f64` in [0, 1].

use std::cell::RefCell;
use std::os::raw::c_char;
use std::slice;

use sgadv::attacks::{fgsm_attack, pgd_attack, sgadv_attack, AttackConfig, Objective};
use sgadv::data::Image;
use sgadv::embedding::{EmbeddingModel, ReferenceEmbedder};
use sgadv::metrics::dissimilarity;
use sgadv::Error;

/// Result code of every fallible C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgadvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
        e.push(0);
    });
}

fn fail(err: &Error) -> SgadvStatus {
    set_error(&err.to_string());
    match err {
        Error::Io(_) => SgadvStatus::Io,
        Error::InvalidArgument(_) => SgadvStatus::InvalidArgument,
        Error::DimensionMismatch(_) => SgadvStatus::DimensionMismatch,
        _ => SgadvStatus::Internal,
    }
}

fn null_fail(what: &str) -> SgadvStatus {
    set_error(&format!("null pointer: {what}"));
    SgadvStatus::NullPointer
}

/// Opaque embedding-model handle.
pub struct SgadvModel {
    inner: ReferenceEmbedder,
}

/// Opaque image handle.
pub struct SgadvImage {
    inner: Image,
}

/// Attack technique selector for [`sgadv_attack_run`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgadvTechnique {
    FgsmCbce = 0,
    PgdCbce = 1,
    Sgadv = 2,
}

/// Attack outcome scalars; the adversarial image is returned as a handle.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SgadvAttackOutcome {
    /// Iterations executed.
    pub steps_taken: usize,
    /// Dissimilarity between the adversarial embedding and the target
    /// template at termination.
    pub final_dissimilarity: f64,
    /// Lowest loss observed along the trace.
    pub best_loss: f64,
    /// Step index of the lowest loss.
    pub best_step: usize,
}

/// Copies the most recent error message for the calling thread into `buf`
/// (NUL-terminated, truncated to `len` bytes) and returns the full message
/// length including the terminator. A return of 0 means no error has been
/// recorded. `buf` may be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn sgadv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if e.is_empty() {
            return 0;
        }
        if !buf.is_null() && len > 0 {
            let n = (len - 1).min(e.len() - 1);
            let out = slice::from_raw_parts_mut(buf as *mut u8, n + 1);
            out[..n].copy_from_slice(&e[..n]);
            out[n] = 0;
        }
        e.len()
    })
}

/// Creates a seeded reference embedder. `width * height * channels` pixels,
/// embedding dimension `feature_dim`.
#[no_mangle]
pub unsafe extern "C" fn sgadv_model_new(
    width: usize,
    height: usize,
    channels: usize,
    feature_dim: usize,
    seed: u64,
    out: *mut *mut SgadvModel,
) -> SgadvStatus {
    if out.is_null() {
        return null_fail("out");
    }
    match ReferenceEmbedder::new((width, height, channels), feature_dim, seed) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(SgadvModel { inner }));
            SgadvStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Destroys a model handle; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sgadv_model_free(model: *mut SgadvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension of the model.
#[no_mangle]
pub unsafe extern "C" fn sgadv_model_feature_dim(model: *const SgadvModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.feature_dim()
}

/// Creates an image from `len = width * height * channels` pixels in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn sgadv_image_new(
    width: usize,
    height: usize,
    channels: usize,
    pixels: *const f64,
    len: usize,
    out: *mut *mut SgadvImage,
) -> SgadvStatus {
    if pixels.is_null() {
        return null_fail("pixels");
    }
    if out.is_null() {
        return null_fail("out");
    }
    let data = slice::from_raw_parts(pixels, len).to_vec();
    match Image::new(width, height, channels, data) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(SgadvImage { inner }));
            SgadvStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Destroys an image handle; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sgadv_image_free(image: *mut SgadvImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Pixel count of the image.
#[no_mangle]
pub unsafe extern "C" fn sgadv_image_len(image: *const SgadvImage) -> usize {
    if image.is_null() {
        return 0;
    }
    (*image).inner.len()
}

/// Copies the image's pixels into `buf` (`len` must equal
/// [`sgadv_image_len`]).
#[no_mangle]
pub unsafe extern "C" fn sgadv_image_copy_pixels(
    image: *const SgadvImage,
    buf: *mut f64,
    len: usize,
) -> SgadvStatus {
    if image.is_null() {
        return null_fail("image");
    }
    if buf.is_null() {
        return null_fail("buf");
    }
    let pixels = (*image).inner.pixels();
    if len != pixels.len() {
        set_error(&format!("buffer length {len} != pixel count {}", pixels.len()));
        return SgadvStatus::DimensionMismatch;
    }
    slice::from_raw_parts_mut(buf, len).copy_from_slice(pixels);
    SgadvStatus::Ok
}

/// Embeds `image` and writes the unit-norm feature vector into `buf`
/// (`len` must equal the model's feature dimension).
#[no_mangle]
pub unsafe extern "C" fn sgadv_embed(
    model: *const SgadvModel,
    image: *const SgadvImage,
    buf: *mut f64,
    len: usize,
) -> SgadvStatus {
    if model.is_null() {
        return null_fail("model");
    }
    if image.is_null() {
        return null_fail("image");
    }
    if buf.is_null() {
        return null_fail("buf");
    }
    let m = &(*model).inner;
    if len != m.feature_dim() {
        set_error(&format!(
            "buffer length {len} != feature dim {}",
            m.feature_dim()
        ));
        return SgadvStatus::DimensionMismatch;
    }
    match m.embed(&(*image).inner) {
        Ok(f) => {
            slice::from_raw_parts_mut(buf, len).copy_from_slice(f.values());
            SgadvStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Normalized cosine dissimilarity in [0, 1] between the embeddings of two
/// images under `model`.
#[no_mangle]
pub unsafe extern "C" fn sgadv_dissimilarity(
    model: *const SgadvModel,
    a: *const SgadvImage,
    b: *const SgadvImage,
    out: *mut f64,
) -> SgadvStatus {
    if model.is_null() {
        return null_fail("model");
    }
    if a.is_null() || b.is_null() {
        return null_fail("image");
    }
    if out.is_null() {
        return null_fail("out");
    }
    let m = &(*model).inner;
    let run = || -> sgadv::Result<f64> {
        let fa = m.embed(&(*a).inner)?;
        let fb = m.embed(&(*b).inner)?;
        dissimilarity(&fa, &fb)
    };
    match run() {
        Ok(d) => {
            *out = d;
            SgadvStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Runs one targeted attack of `source` toward `target` under `model`.
///
/// `cbce_tau` is the decision threshold for the C-BCE objective and is
/// ignored by `SGADV_TECHNIQUE_SGADV`. On success `*out_adversarial` holds a
/// new image handle the caller must free with [`sgadv_image_free`], and
/// `*outcome` holds the scalar results.
#[no_mangle]
pub unsafe extern "C" fn sgadv_attack_run(
    model: *const SgadvModel,
    source: *const SgadvImage,
    target: *const SgadvImage,
    technique: SgadvTechnique,
    epsilon: f64,
    alpha: f64,
    t_max: usize,
    tau_conv: f64,
    seed: u64,
    cbce_tau: f64,
    out_adversarial: *mut *mut SgadvImage,
    outcome: *mut SgadvAttackOutcome,
) -> SgadvStatus {
    if model.is_null() {
        return null_fail("model");
    }
    if source.is_null() || target.is_null() {
        return null_fail("image");
    }
    if out_adversarial.is_null() {
        return null_fail("out_adversarial");
    }
    if outcome.is_null() {
        return null_fail("outcome");
    }

    let (objective, cbce_tau) = match technique {
        SgadvTechnique::Sgadv => (Objective::Sgadv, None),
        _ => (Objective::Cbce, Some(cbce_tau)),
    };
    let cfg = AttackConfig {
        epsilon,
        alpha,
        t_max,
        tau_conv,
        seed,
        objective,
        cbce_tau,
    };
    let m = &(*model).inner;
    let src = &(*source).inner;
    let tgt = &(*target).inner;
    let result = match technique {
        SgadvTechnique::FgsmCbce => fgsm_attack(m, src, tgt, &cfg),
        SgadvTechnique::PgdCbce => pgd_attack(m, src, tgt, &cfg),
        SgadvTechnique::Sgadv => sgadv_attack(m, src, tgt, &cfg),
    };
    match result {
        Ok(r) => {
            *outcome = SgadvAttackOutcome {
                steps_taken: r.steps_taken,
                final_dissimilarity: r.final_dissimilarity,
                best_loss: r.best_loss,
                best_step: r.best_step,
            };
            *out_adversarial = Box::into_raw(Box::new(SgadvImage { inner: r.adversarial }));
            SgadvStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    unsafe fn make_image(side: usize, value: f64) -> *mut SgadvImage {
        let pixels = vec![value; side * side];
        let mut img = ptr::null_mut();
        let st = sgadv_image_new(side, side, 1, pixels.as_ptr(), pixels.len(), &mut img);
        assert_eq!(st, SgadvStatus::Ok);
        img
    }

    #[test]
    fn model_and_image_lifecycle() {
        unsafe {
            let mut model = ptr::null_mut();
            assert_eq!(
                sgadv_model_new(8, 8, 1, 12, 5, &mut model),
                SgadvStatus::Ok
            );
            assert_eq!(sgadv_model_feature_dim(model), 12);

            let img = make_image(8, 0.5);
            assert_eq!(sgadv_image_len(img), 64);
            let mut buf = vec![0.0; 12];
            assert_eq!(sgadv_embed(model, img, buf.as_mut_ptr(), 12), SgadvStatus::Ok);
            let norm: f64 = buf.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);

            sgadv_image_free(img);
            sgadv_model_free(model);
        }
    }

    #[test]
    fn null_and_mismatch_errors() {
        unsafe {
            let mut model = ptr::null_mut();
            assert_eq!(
                sgadv_model_new(8, 8, 1, 12, 5, ptr::null_mut()),
                SgadvStatus::NullPointer
            );
            assert_eq!(sgadv_model_new(8, 8, 1, 12, 5, &mut model), SgadvStatus::Ok);

            let img = make_image(8, 0.5);
            let mut buf = vec![0.0; 5];
            assert_eq!(
                sgadv_embed(model, img, buf.as_mut_ptr(), 5),
                SgadvStatus::DimensionMismatch
            );
            let mut msg = vec![0i8; 128];
            let n = sgadv_last_error(msg.as_mut_ptr(), msg.len());
            assert!(n > 1);

            // Out-of-range pixels are rejected.
            let bad = vec![2.0; 64];
            let mut out = ptr::null_mut();
            assert_eq!(
                sgadv_image_new(8, 8, 1, bad.as_ptr(), 64, &mut out),
                SgadvStatus::InvalidArgument
            );

            sgadv_image_free(img);
            sgadv_model_free(model);
        }
    }

    #[test]
    fn attack_round_trip_respects_budget() {
        unsafe {
            let mut model = ptr::null_mut();
            assert_eq!(sgadv_model_new(10, 10, 1, 12, 9, &mut model), SgadvStatus::Ok);
            let source = make_image(10, 0.4);
            let target = make_image(10, 0.7);

            let mut adv = ptr::null_mut();
            let mut outcome = SgadvAttackOutcome {
                steps_taken: 0,
                final_dissimilarity: 0.0,
                best_loss: 0.0,
                best_step: 0,
            };
            let st = sgadv_attack_run(
                model,
                source,
                target,
                SgadvTechnique::Sgadv,
                0.03,
                0.001,
                60,
                1e-4,
                7,
                0.0,
                &mut adv,
                &mut outcome,
            );
            assert_eq!(st, SgadvStatus::Ok);
            assert!(outcome.steps_taken >= 1);

            let mut src_px = vec![0.0; 100];
            let mut adv_px = vec![0.0; 100];
            assert_eq!(
                sgadv_image_copy_pixels(source, src_px.as_mut_ptr(), 100),
                SgadvStatus::Ok
            );
            assert_eq!(
                sgadv_image_copy_pixels(adv, adv_px.as_mut_ptr(), 100),
                SgadvStatus::Ok
            );
            let linf = src_px
                .iter()
                .zip(&adv_px)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(linf <= 0.03 + 1e-9);
            assert!(adv_px.iter().all(|p| (0.0..=1.0).contains(p)));

            // The attack moved the source toward the target.
            let mut d = 0.0;
            assert_eq!(
                sgadv_dissimilarity(model, adv, target, &mut d),
                SgadvStatus::Ok
            );
            assert!((d - outcome.final_dissimilarity).abs() < 1e-12);

            sgadv_image_free(adv);
            sgadv_image_free(source);
            sgadv_image_free(target);
            sgadv_model_free(model);
        }
    }
}
