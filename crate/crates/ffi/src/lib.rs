//! C ABI over the anchorft encoder, regularization losses, retrieval metrics
//! and weight interpolation.
//!
//! Every fallible function returns an [`AftStatus`]. On failure the message is
//! available from [`aft_last_error_message`] on the same thread until the next
//! failing call. Matrices are dense row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use anchorft::encoder::{forward_batch, init_params};
use anchorft::losses::{domain_loss, embed_reg_loss, param_reg_loss, Prototypes};
use anchorft::metrics::{map_at_k, recall_at_1_paired, RetrievalSplit};
use anchorft::{wise_ft, Activation, EncoderConfig, Error, ParameterVector};
use ndarray::{Array2, ArrayView2};

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Degenerate = 3,
    Numerical = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AftActivation {
    Tanh = 0,
    Gelu = 1,
}

/// Opaque encoder handle: architecture plus current parameters.
pub struct AftEncoder {
    config: EncoderConfig,
    params: ParameterVector,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> AftStatus {
    match e {
        Error::DegenerateEmbedding { .. } | Error::DegenerateSample { .. } => AftStatus::Degenerate,
        Error::Divergence { .. } | Error::NonFiniteGradient => AftStatus::Numerical,
        Error::Io(_) => AftStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) | Error::CacheMismatch { .. } => AftStatus::Format,
        _ => AftStatus::InvalidArgument,
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> AftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AftStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is null"));
            AftStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            AftStatus::Panic
        }
    }
}

/// # Safety
/// A non-null `ptr` must point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// A non-null `ptr` must point to `len` writable values.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// A non-null `ptr` must point to a writable `T`.
unsafe fn write_out<T>(ptr: *mut T, value: T, name: &'static str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(name));
    }
    ptr.write(value);
    Ok(())
}

fn matrix<'a>(data: &'a [f64], rows: usize, cols: usize) -> Result<ArrayView2<'a, f64>, Failure> {
    ArrayView2::from_shape((rows, cols), data)
        .map_err(|e| Failure::Core(Error::ShapeMismatch(e.to_string())))
}

fn copy_into(dst: &mut [f64], src: &Array2<f64>) {
    dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d = *s);
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aft_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates an encoder with freshly initialized parameters.
///
/// # Safety
/// `hidden_dims` must point to `num_hidden` values (or be null when it is 0);
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_new(
    input_dim: usize,
    hidden_dims: *const usize,
    num_hidden: usize,
    embed_dim: usize,
    activation: AftActivation,
    init_seed: u64,
    init_scale: f64,
    out: *mut *mut AftEncoder,
) -> AftStatus {
    guarded(|| {
        let config = EncoderConfig {
            input_dim,
            hidden_dims: slice(hidden_dims, num_hidden, "hidden_dims")?.to_vec(),
            embed_dim,
            activation: match activation {
                AftActivation::Tanh => Activation::Tanh,
                AftActivation::Gelu => Activation::Gelu,
            },
            init_seed,
            init_scale,
        };
        config.validate()?;
        let params = init_params(&config);
        write_out(out, Box::into_raw(Box::new(AftEncoder { config, params })), "out")
    })
}

/// # Safety
/// `encoder` must come from [`aft_encoder_new`] and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_free(encoder: *mut AftEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_param_count(encoder: *const AftEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.params.len())
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_embed_dim(encoder: *const AftEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.config.embed_dim)
}

/// Replaces the parameters; `len` must equal the parameter count.
///
/// # Safety
/// `encoder` must be a live handle and `params` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_set_params(
    encoder: *mut AftEncoder,
    params: *const f64,
    len: usize,
) -> AftStatus {
    guarded(|| {
        let enc = encoder.as_mut().ok_or(Failure::Null("encoder"))?;
        let p = ParameterVector::new(slice(params, len, "params")?.to_vec());
        p.check_for(&enc.config)?;
        enc.params = p;
        Ok(())
    })
}

/// Copies the parameters into `out`; `len` must equal the parameter count.
///
/// # Safety
/// `encoder` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_get_params(encoder: *const AftEncoder, out: *mut f64, len: usize) -> AftStatus {
    guarded(|| {
        let enc = encoder.as_ref().ok_or(Failure::Null("encoder"))?;
        if len != enc.params.len() {
            return Err(Error::LengthMismatch { expected: enc.params.len(), actual: len }.into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(enc.params.as_slice());
        Ok(())
    })
}

/// Loads a `params.bin` file written by the CLI.
///
/// # Safety
/// `encoder` must be a live handle and `path` a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_load_params(encoder: *mut AftEncoder, path: *const c_char) -> AftStatus {
    guarded(|| {
        let enc = encoder.as_mut().ok_or(Failure::Null("encoder"))?;
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::ConfigInvalid("path is not UTF-8".into()))?;
        let p = ParameterVector::load(Path::new(path))?;
        p.check_for(&enc.config)?;
        enc.params = p;
        Ok(())
    })
}

/// Embeds `rows` inputs of width `input_dim` into `out` (`rows x embed_dim`).
///
/// # Safety
/// `x` must hold `rows * input_dim` values and `out` `rows * embed_dim` writable values.
#[no_mangle]
pub unsafe extern "C" fn aft_encoder_forward(
    encoder: *const AftEncoder,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> AftStatus {
    guarded(|| {
        let enc = encoder.as_ref().ok_or(Failure::Null("encoder"))?;
        let cfg = &enc.config;
        let x = matrix(slice(x, rows * cfg.input_dim, "x")?, rows, cfg.input_dim)?;
        let emb = forward_batch(&enc.params, cfg, x)?;
        copy_into(slice_mut(out, rows * cfg.embed_dim, "out")?, &emb);
        Ok(())
    })
}

/// Parameter drift penalty `(1/n) * ||theta_ft - theta_pre||^2`. `grad_out` may be null.
///
/// # Safety
/// `theta_ft` and `theta_pre` must hold `n` values; a non-null `grad_out` must hold `n`.
#[no_mangle]
pub unsafe extern "C" fn aft_param_reg_loss(
    theta_ft: *const f64,
    theta_pre: *const f64,
    n: usize,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> AftStatus {
    guarded(|| {
        let ft = ParameterVector::new(slice(theta_ft, n, "theta_ft")?.to_vec());
        let pre = ParameterVector::new(slice(theta_pre, n, "theta_pre")?.to_vec());
        let (loss, grad) = param_reg_loss(&ft, &pre)?;
        if !grad_out.is_null() {
            slice_mut(grad_out, n, "grad_out")?.copy_from_slice(grad.as_slice());
        }
        write_out(loss_out, loss, "loss_out")
    })
}

/// Embedding distillation `(1/rows) * sum ||f_i - t_i||^2`. `grad_out` may be null.
///
/// # Safety
/// `embeddings` and `targets` must hold `rows * dim` values; a non-null `grad_out` as well.
#[no_mangle]
pub unsafe extern "C" fn aft_embed_reg_loss(
    embeddings: *const f64,
    targets: *const f64,
    rows: usize,
    dim: usize,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> AftStatus {
    guarded(|| {
        let f = matrix(slice(embeddings, rows * dim, "embeddings")?, rows, dim)?;
        let t = matrix(slice(targets, rows * dim, "targets")?, rows, dim)?;
        let (loss, grad) = embed_reg_loss(f, t)?;
        if !grad_out.is_null() {
            copy_into(slice_mut(grad_out, rows * dim, "grad_out")?, &grad);
        }
        write_out(loss_out, loss, "loss_out")
    })
}

/// Cosine-classifier cross-entropy over `num_classes` prototypes (rows are re-normalized).
///
/// # Safety
/// `embeddings` must hold `rows * dim` values, `labels` `rows` values and
/// `prototypes` `num_classes * dim` values.
#[no_mangle]
pub unsafe extern "C" fn aft_domain_loss(
    embeddings: *const f64,
    rows: usize,
    dim: usize,
    labels: *const u32,
    prototypes: *const f64,
    num_classes: usize,
    logit_scale: f64,
    loss_out: *mut f64,
) -> AftStatus {
    guarded(|| {
        let f = matrix(slice(embeddings, rows * dim, "embeddings")?, rows, dim)?;
        let labels: Vec<usize> = slice(labels, rows, "labels")?.iter().map(|&l| l as usize).collect();
        let p = matrix(slice(prototypes, num_classes * dim, "prototypes")?, num_classes, dim)?;
        let protos = Prototypes::from_rows(p.to_owned())?;
        let dl = domain_loss(f, &labels, &protos, logit_scale)?;
        write_out(loss_out, dl.loss, "loss_out")
    })
}

/// Mean average precision at `k` over queries with at least one relevant index item.
///
/// # Safety
/// Query buffers must hold `num_queries` rows (embeddings `num_queries * dim`),
/// index buffers `num_index` rows.
#[no_mangle]
pub unsafe extern "C" fn aft_map_at_k(
    query_embeddings: *const f64,
    query_labels: *const u64,
    query_ids: *const u64,
    num_queries: usize,
    index_embeddings: *const f64,
    index_labels: *const u64,
    index_ids: *const u64,
    num_index: usize,
    dim: usize,
    k: usize,
    out: *mut f64,
) -> AftStatus {
    guarded(|| {
        let split = RetrievalSplit {
            query_embeddings: matrix(slice(query_embeddings, num_queries * dim, "query_embeddings")?, num_queries, dim)?
                .to_owned(),
            query_labels: slice(query_labels, num_queries, "query_labels")?.to_vec(),
            query_ids: slice(query_ids, num_queries, "query_ids")?.to_vec(),
            index_embeddings: matrix(slice(index_embeddings, num_index * dim, "index_embeddings")?, num_index, dim)?
                .to_owned(),
            index_labels: slice(index_labels, num_index, "index_labels")?.to_vec(),
            index_ids: slice(index_ids, num_index, "index_ids")?.to_vec(),
        };
        write_out(out, map_at_k(&split, k)?.map_at_k, "out")
    })
}

/// Recall@1 where row `i` of `view_a` should retrieve row `i` of `view_b`.
///
/// # Safety
/// Both views must hold `rows * dim` values.
#[no_mangle]
pub unsafe extern "C" fn aft_recall_at_1_paired(
    view_a: *const f64,
    view_b: *const f64,
    rows: usize,
    dim: usize,
    out: *mut f64,
) -> AftStatus {
    guarded(|| {
        let a = matrix(slice(view_a, rows * dim, "view_a")?, rows, dim)?;
        let b = matrix(slice(view_b, rows * dim, "view_b")?, rows, dim)?;
        write_out(out, recall_at_1_paired(a, b)?, "out")
    })
}

/// `out = (1 - alpha) * theta_pre + alpha * theta_ft`.
///
/// # Safety
/// All three buffers must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn aft_wise_ft(
    theta_pre: *const f64,
    theta_ft: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> AftStatus {
    guarded(|| {
        let pre = ParameterVector::new(slice(theta_pre, n, "theta_pre")?.to_vec());
        let ft = ParameterVector::new(slice(theta_ft, n, "theta_ft")?.to_vec());
        let mixed = wise_ft(&pre, &ft, alpha)?;
        slice_mut(out, n, "out")?.copy_from_slice(mixed.as_slice());
        Ok(())
    })
}
