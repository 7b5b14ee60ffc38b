//! C ABI over the minent loss kernels and the trained classifier.
//!
//! Conventions:
//! * every fallible function returns a [`MinentStatus`]; results go through
//!   out-pointers, which are left untouched on failure;
//! * after a failure, [`minent_last_error`] describes it (per thread);
//! * handles are opaque and must be released with their `_free` function;
//! * array arguments are `(pointer, length)` pairs of doubles, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use minent::data::{Dataset, SplitTag};
use minent::loss::{self, LossKind, LossParams, ProbVector, SmoothedTarget};
use minent::net::{NetConfig, NetState};
use minent::trainer::{self, Beta2Setting, LossHeadConfig};
use minent::{checkpoint, Error};
use ndarray::ArrayView2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinentStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidConfig = 3,
    DegenerateTarget = 4,
    DataIntegrity = 5,
    Divergence = 6,
    Checkpoint = 7,
    MissingArtifact = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinentLossKind {
    Ce = 0,
    Mix = 1,
    Min = 2,
}

impl From<MinentLossKind> for LossKind {
    fn from(k: MinentLossKind) -> Self {
        match k {
            MinentLossKind::Ce => LossKind::Ce,
            MinentLossKind::Mix => LossKind::Mix,
            MinentLossKind::Min => LossKind::Min,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinentBeta2Mode {
    Learnable = 0,
    Fixed = 1,
    Disabled = 2,
}

/// Opaque loss-head parameters.
pub struct MinentLossParams {
    inner: LossParams,
}

/// Opaque classifier together with its loss head.
pub struct MinentNet {
    net: NetState,
    loss: LossParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MinentStatus {
    match e {
        Error::InvalidInput(_) | Error::Contract(_) => MinentStatus::InvalidInput,
        Error::InvalidConfig(_) => MinentStatus::InvalidConfig,
        Error::DegenerateTarget => MinentStatus::DegenerateTarget,
        Error::Idx(_) | Error::DataIntegrity(_) => MinentStatus::DataIntegrity,
        Error::Divergence { .. } => MinentStatus::Divergence,
        Error::CheckpointVersion { .. }
        | Error::CheckpointShape(_)
        | Error::CorruptCheckpoint(_) => MinentStatus::Checkpoint,
        Error::MissingArtifact(_) => MinentStatus::MissingArtifact,
        Error::Io { .. } => MinentStatus::Io,
    }
}

struct Fail(MinentStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MinentStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MinentStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MinentStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MinentStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn prob(ptr: *const f64, k: usize, what: &str) -> Result<ProbVector, Fail> {
    Ok(ProbVector::new(slice(ptr, k, what)?.to_vec())?)
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn minent_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn minent_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `out[0..k] = softmax(logits[0..k])`.
///
/// # Safety
/// `logits` and `out` must be valid for `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn minent_softmax(
    logits: *const f64,
    k: usize,
    out: *mut f64,
) -> MinentStatus {
    guard(|| {
        let p = loss::softmax(slice(logits, k, "logits")?)?;
        slice_mut(out, k, "out")?.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Entropy of `p` divided by `ln_base`.
///
/// # Safety
/// `p` must be valid for `k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_entropy(
    p: *const f64,
    k: usize,
    ln_base: f64,
    out: *mut f64,
) -> MinentStatus {
    guard(|| {
        let v = loss::entropy(&prob(p, k, "p")?, ln_base)?;
        write(out, v, "out")
    })
}

/// `-sum target * ln(p_hat) / ln_base`.
///
/// # Safety
/// `target` and `p_hat` must be valid for `k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_cross_entropy(
    target: *const f64,
    p_hat: *const f64,
    k: usize,
    ln_base: f64,
    out: *mut f64,
) -> MinentStatus {
    guard(|| {
        let v = loss::cross_entropy(
            &prob(target, k, "target")?,
            &prob(p_hat, k, "p_hat")?,
            ln_base,
        )?;
        write(out, v, "out")
    })
}

/// `-sum p_hat * ln(target) / ln_base` for a label-smoothed one-hot target.
///
/// # Safety
/// `p_hat` must be valid for `k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_swapped_cross_entropy(
    class_index: usize,
    epsilon: f64,
    p_hat: *const f64,
    k: usize,
    ln_base: f64,
    out: *mut f64,
) -> MinentStatus {
    guard(|| {
        let target = SmoothedTarget::new(class_index, epsilon, k)?;
        let v = loss::swapped_cross_entropy(&target, &prob(p_hat, k, "p_hat")?, ln_base)?;
        write(out, v, "out")
    })
}

/// `sum weighting * ln(weighting / other) / ln_base`.
///
/// # Safety
/// `weighting` and `other` must be valid for `k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_kl_divergence(
    weighting: *const f64,
    other: *const f64,
    k: usize,
    ln_base: f64,
    out: *mut f64,
) -> MinentStatus {
    guard(|| {
        let v = loss::kl_divergence(
            &prob(weighting, k, "weighting")?,
            &prob(other, k, "other")?,
            ln_base,
        )?;
        write(out, v, "out")
    })
}

/// Default loss head: beta1 fixed at 1, learnable beta2 and base.
#[no_mangle]
pub extern "C" fn minent_loss_params_new_default() -> *mut MinentLossParams {
    Box::into_raw(Box::new(MinentLossParams {
        inner: LossParams::default(),
    }))
}

/// Loss head with the given modes and initial constrained values.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_loss_params_new(
    beta1_learnable: bool,
    beta1_init: f64,
    beta2_mode: MinentBeta2Mode,
    beta2_init: f64,
    base_learnable: bool,
    ln_base_init: f64,
    out: *mut *mut MinentLossParams,
) -> MinentStatus {
    guard(|| {
        let head = LossHeadConfig {
            beta1_learnable,
            beta1_init,
            beta2_mode: match beta2_mode {
                MinentBeta2Mode::Learnable => Beta2Setting::Learnable,
                MinentBeta2Mode::Fixed => Beta2Setting::Fixed,
                MinentBeta2Mode::Disabled => Beta2Setting::Disabled,
            },
            beta2_init,
            base_learnable,
            ln_base_init,
        };
        let inner = head.params_for(LossKind::Min)?;
        write(
            out,
            Box::into_raw(Box::new(MinentLossParams { inner })),
            "out",
        )
    })
}

/// # Safety
/// `params` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn minent_loss_params_free(params: *mut MinentLossParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Constrained values `beta1`, `beta2` and `ln(base)`.
///
/// # Safety
/// `params` must be a live handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_loss_params_values(
    params: *const MinentLossParams,
    beta1: *mut f64,
    beta2: *mut f64,
    ln_base: *mut f64,
) -> MinentStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?.inner;
        write(beta1, p.beta1(), "beta1")?;
        write(beta2, p.beta2(), "beta2")?;
        write(ln_base, p.ln_base(), "ln_base")
    })
}

/// Raw parameters `[theta_beta1, theta_beta2, theta_base]`.
///
/// # Safety
/// `params` must be a live handle; `out` must be valid for 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn minent_loss_params_get_raw(
    params: *const MinentLossParams,
    out: *mut f64,
) -> MinentStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        slice_mut(out, 3, "out")?.copy_from_slice(&p.inner.raw());
        Ok(())
    })
}

/// # Safety
/// `params` must be a live handle; `raw` must be valid for 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn minent_loss_params_set_raw(
    params: *mut MinentLossParams,
    raw: *const f64,
) -> MinentStatus {
    guard(|| {
        let p = params.as_mut().ok_or_else(|| null("params"))?;
        let r = slice(raw, 3, "raw")?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Fail(
                MinentStatus::InvalidInput,
                "raw parameters must be finite".into(),
            ));
        }
        p.inner.set_raw([r[0], r[1], r[2]]);
        Ok(())
    })
}

/// Loss of one sample with a label-smoothed target, plus its gradient.
/// `grad_logits` (k doubles) and `grad_raw` (3 doubles) may be NULL.
/// `MINENT_LOSS_KIND_CE` ignores `params` and uses plain cross entropy.
///
/// # Safety
/// `logits` must be valid for `k` doubles, `params` a live handle, and
/// non-NULL outputs writable for their lengths.
#[no_mangle]
pub unsafe extern "C" fn minent_loss_value_and_grad(
    kind: MinentLossKind,
    logits: *const f64,
    k: usize,
    class_index: usize,
    epsilon: f64,
    params: *const MinentLossParams,
    total: *mut f64,
    grad_logits: *mut f64,
    grad_raw: *mut f64,
) -> MinentStatus {
    guard(|| {
        let z = slice(logits, k, "logits")?;
        let kind = LossKind::from(kind);
        let p = if kind == LossKind::Ce {
            LossParams::cross_entropy()
        } else {
            params.as_ref().ok_or_else(|| null("params"))?.inner
        };
        let target = SmoothedTarget::new(class_index, epsilon, k)?;
        let (value, grad) = loss::loss_value_and_grad(kind, z, &target, &p)?;
        write(total, value.total, "total")?;
        if !grad_logits.is_null() {
            slice_mut(grad_logits, k, "grad_logits")?.copy_from_slice(&grad.logits);
        }
        if !grad_raw.is_null() {
            slice_mut(grad_raw, 3, "grad_raw")?.copy_from_slice(&grad.raw());
        }
        Ok(())
    })
}

/// Freshly initialized classifier with the default loss head.
///
/// # Safety
/// `hidden_dims` must be valid for `num_hidden` entries (may be NULL when
/// `num_hidden` is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_net_new(
    input_dim: usize,
    hidden_dims: *const usize,
    num_hidden: usize,
    num_classes: usize,
    dropout_rate: f64,
    seed: u64,
    out: *mut *mut MinentNet,
) -> MinentStatus {
    guard(|| {
        let hidden = if num_hidden == 0 {
            Vec::new()
        } else if hidden_dims.is_null() {
            return Err(null("hidden_dims"));
        } else {
            std::slice::from_raw_parts(hidden_dims, num_hidden).to_vec()
        };
        let config: NetConfig =
            trainer::net_config_for(input_dim, hidden, num_classes, dropout_rate, seed);
        let net = NetState::init(config)?;
        write(
            out,
            Box::into_raw(Box::new(MinentNet {
                net,
                loss: LossParams::default(),
            })),
            "out",
        )
    })
}

/// Load a checkpoint directory written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_net_load_checkpoint(
    path: *const c_char,
    out: *mut *mut MinentNet,
) -> MinentStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(MinentStatus::InvalidInput, "path is not UTF-8".into()))?;
        let state = checkpoint::load(Path::new(path))?;
        write(
            out,
            Box::into_raw(Box::new(MinentNet {
                net: state.net,
                loss: state.loss,
            })),
            "out",
        )
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn minent_net_free(net: *mut MinentNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input width and class count.
///
/// # Safety
/// `net` must be a live handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_net_shape(
    net: *const MinentNet,
    input_dim: *mut usize,
    num_classes: *mut usize,
) -> MinentStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        write(input_dim, n.net.config().input_dim, "input_dim")?;
        write(num_classes, n.net.config().num_classes, "num_classes")
    })
}

/// Copy of the network's loss head.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_net_loss_params(
    net: *const MinentNet,
    out: *mut *mut MinentLossParams,
) -> MinentStatus {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        write(
            out,
            Box::into_raw(Box::new(MinentLossParams { inner: n.loss })),
            "out",
        )
    })
}

unsafe fn inputs<'a>(
    net: &MinentNet,
    ptr: *const f64,
    n: usize,
) -> Result<ArrayView2<'a, f64>, Fail> {
    let d = net.net.config().input_dim;
    let flat = slice(ptr, n * d, "inputs")?;
    Ok(ArrayView2::from_shape((n, d), flat).expect("length checked"))
}

/// Eval-mode logits for `n` row-major samples into `logits` (`n * K`).
///
/// # Safety
/// `inputs` must be valid for `n * input_dim` doubles and `logits` for
/// `n * num_classes`.
#[no_mangle]
pub unsafe extern "C" fn minent_net_predict(
    net: *const MinentNet,
    inputs_ptr: *const f64,
    n: usize,
    logits: *mut f64,
) -> MinentStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let x = inputs(net, inputs_ptr, n)?;
        let z = net.net.forward_eval(x)?;
        let out = slice_mut(logits, n * net.net.config().num_classes, "logits")?;
        for (o, v) in out.iter_mut().zip(z.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Accuracy (percent) and mean prediction entropy (nats) on `n` samples.
///
/// # Safety
/// `inputs` must be valid for `n * input_dim` doubles and `labels` for `n`
/// entries; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn minent_net_evaluate(
    net: *const MinentNet,
    inputs_ptr: *const f64,
    labels: *const u32,
    n: usize,
    accuracy: *mut f64,
    mean_entropy: *mut f64,
) -> MinentStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let x = inputs(net, inputs_ptr, n)?.to_owned();
        if labels.is_null() {
            return Err(null("labels"));
        }
        let labels: Vec<usize> = std::slice::from_raw_parts(labels, n)
            .iter()
            .map(|&l| l as usize)
            .collect();
        let data = Dataset::new(x, labels, net.net.config().num_classes, SplitTag::Test)?;
        let e = trainer::evaluate(&net.net, &data)?;
        write(accuracy, e.accuracy, "accuracy")?;
        write(mean_entropy, e.mean_entropy, "mean_entropy")
    })
}
