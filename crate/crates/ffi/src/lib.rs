//! C ABI over `prefopt`.
//!
//! Every fallible function returns a [`PrefoptStatus`]. On failure the
//! message is kept per thread and read back with
//! [`prefopt_last_error_message`]. Models are opaque handles released with
//! [`prefopt_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use prefopt::autodiff::Graph;
use prefopt::dataforge::{first_difference, forge, write_jsonl, DataConfig, Generator, PairMeta, PreferencePair};
use prefopt::losses::{pair_loss, LossConfig, LossKind, RefLogProbs};
use prefopt::model::{checkpoint, LMConfig, LMParams, ModelNodes, TokenSeq};
use prefopt::theory::{dpop_logit_grad, SoftmaxRowPair};
use prefopt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefoptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Contract = 4,
    Numeric = 5,
    Io = 6,
    Parse = 7,
    Checkpoint = 8,
    Panic = 9,
    Other = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefoptLossKind {
    Sft = 0,
    Dpo = 1,
    Dpop = 2,
    Ipo = 3,
    Slic = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefoptGenerator {
    CalcChain = 0,
    MultipleChoice = 1,
}

/// Model architecture.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PrefoptModelConfig {
    pub vocab_size: u32,
    pub d_model: u32,
    pub n_layers: u32,
    pub n_heads: u32,
    pub max_seq_len: u32,
}

/// Loss selection and scalars.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PrefoptLossConfig {
    pub kind: PrefoptLossKind,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub slic_reg_weight: f64,
}

/// Opaque model handle.
pub struct PrefoptModel {
    params: LMParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PrefoptStatus {
    match e {
        Error::Config(_) => PrefoptStatus::Config,
        Error::Contract(_) | Error::Dimension(_) | Error::Length { .. } | Error::Tokenize(_) => {
            PrefoptStatus::Contract
        }
        Error::Numeric(_) | Error::NonFinite { .. } | Error::Diverged { .. } => PrefoptStatus::Numeric,
        Error::Io { .. } => PrefoptStatus::Io,
        Error::Parse { .. } | Error::Csv(_) => PrefoptStatus::Parse,
        Error::Checkpoint(_) => PrefoptStatus::Checkpoint,
        _ => PrefoptStatus::Other,
    }
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, records any failure as the thread's last error, and maps it to
/// a status code. Panics never cross the boundary.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrefoptStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrefoptStatus::Ok,
        Ok(Err(Failure::Null(arg))) => {
            set_last_error(format!("{arg} is null"));
            PrefoptStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(arg))) => {
            set_last_error(format!("{arg} is not valid UTF-8"));
            PrefoptStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            PrefoptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn tokens(p: *const u32, len: usize, name: &'static str) -> Result<TokenSeq, Failure> {
    Ok(TokenSeq::new(slice_arg(p, len, name)?.to_vec()))
}

fn boxed(params: LMParams) -> *mut PrefoptModel {
    Box::into_raw(Box::new(PrefoptModel { params }))
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn prefopt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prefopt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Deterministic fresh initialization.
///
/// # Safety
/// `config` must point to a valid config and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn prefopt_model_init(
    config: *const PrefoptModelConfig,
    seed: u64,
    out: *mut *mut PrefoptModel,
) -> PrefoptStatus {
    guard(|| {
        let c = ref_arg(config, "config")?;
        let out = out_arg(out, "out")?;
        let cfg = LMConfig {
            vocab_size: c.vocab_size as usize,
            d_model: c.d_model as usize,
            n_layers: c.n_layers as usize,
            n_heads: c.n_heads as usize,
            max_seq_len: c.max_seq_len as usize,
        };
        *out = boxed(LMParams::init(&cfg, seed)?);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn prefopt_model_load(path: *const c_char, out: *mut *mut PrefoptModel) -> PrefoptStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = boxed(checkpoint::load(path)?);
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn prefopt_model_save(model: *const PrefoptModel, path: *const c_char) -> PrefoptStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        checkpoint::save(&m.params, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// A frozen copy usable as the reference policy.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn prefopt_model_snapshot_reference(
    model: *const PrefoptModel,
    out: *mut *mut PrefoptModel,
) -> PrefoptStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = boxed(m.params.snapshot_reference());
        Ok(())
    })
}

/// Writes the model's architecture to `out`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn prefopt_model_config(
    model: *const PrefoptModel,
    out: *mut PrefoptModelConfig,
) -> PrefoptStatus {
    guard(|| {
        let c = ref_arg(model, "model")?.params.config();
        *out_arg(out, "out")? = PrefoptModelConfig {
            vocab_size: c.vocab_size as u32,
            d_model: c.d_model as u32,
            n_layers: c.n_layers as u32,
            n_heads: c.n_heads as u32,
            max_seq_len: c.max_seq_len as u32,
        };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn prefopt_model_free(model: *mut PrefoptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// `log π(completion | prompt)` summed over completion tokens.
///
/// # Safety
/// Token pointers must reference `*_len` readable values.
#[no_mangle]
pub unsafe extern "C" fn prefopt_completion_log_prob(
    model: *const PrefoptModel,
    prompt: *const u32,
    prompt_len: usize,
    completion: *const u32,
    completion_len: usize,
    out: *mut f64,
) -> PrefoptStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let p = tokens(prompt, prompt_len, "prompt")?;
        let c = tokens(completion, completion_len, "completion")?;
        *out_arg(out, "out")? = m.params.completion_log_prob(&p, &c)?;
        Ok(())
    })
}

/// Loss value of one preference pair under `policy`.
///
/// `reference` may be null for SFT and SLiC and must be a frozen snapshot
/// otherwise.
///
/// # Safety
/// Handles must be live; token pointers must reference `*_len` values.
#[no_mangle]
pub unsafe extern "C" fn prefopt_pair_loss(
    policy: *const PrefoptModel,
    reference: *const PrefoptModel,
    loss: *const PrefoptLossConfig,
    prompt: *const u32,
    prompt_len: usize,
    chosen: *const u32,
    chosen_len: usize,
    rejected: *const u32,
    rejected_len: usize,
    out: *mut f64,
) -> PrefoptStatus {
    guard(|| {
        let policy = ref_arg(policy, "policy")?;
        let l = ref_arg(loss, "loss")?;
        let out = out_arg(out, "out")?;
        let chosen = tokens(chosen, chosen_len, "chosen")?;
        let rejected = tokens(rejected, rejected_len, "rejected")?;
        let m = if chosen.len() == rejected.len() {
            first_difference(&chosen, &rejected)
        } else {
            None
        };
        let pair = PreferencePair::new(
            0,
            tokens(prompt, prompt_len, "prompt")?,
            chosen,
            rejected,
            m,
            PairMeta::default(),
        )?;
        let cfg = LossConfig {
            kind: match l.kind {
                PrefoptLossKind::Sft => LossKind::Sft,
                PrefoptLossKind::Dpo => LossKind::Dpo,
                PrefoptLossKind::Dpop => LossKind::Dpop,
                PrefoptLossKind::Ipo => LossKind::Ipo,
                PrefoptLossKind::Slic => LossKind::Slic,
            },
            beta: l.beta,
            lambda: l.lambda,
            tau: l.tau,
            slic_reg_weight: l.slic_reg_weight,
        };
        cfg.validate()?;
        let refs = match reference.as_ref() {
            Some(r) => Some(RefLogProbs::compute(&r.params, &pair)?),
            None => None,
        };
        let mut g = Graph::new();
        let theta = ModelNodes::bind(&policy.params, &mut g)?;
        *out = pair_loss(&mut g, &theta, &pair, refs, &cfg)?.value;
        Ok(())
    })
}

/// Closed-form DPOP logit gradient for one position; DPO at `lambda = 0`
/// or when `ratio_below_one` is false. Writes `len` values to `out`.
///
/// # Safety
/// `s_w`, `s_l` and `out` must reference `len` values each.
#[no_mangle]
pub unsafe extern "C" fn prefopt_dpop_logit_grad(
    s_w: *const f64,
    s_l: *const f64,
    len: usize,
    target_index: usize,
    lambda: f64,
    ratio_below_one: bool,
    out: *mut f64,
) -> PrefoptStatus {
    guard(|| {
        let rows = SoftmaxRowPair::new(
            slice_arg(s_w, len, "s_w")?.to_vec(),
            slice_arg(s_l, len, "s_l")?.to_vec(),
            target_index,
        )?;
        let grad = dpop_logit_grad(&rows, lambda, ratio_below_one)?;
        if len > 0 && out.is_null() {
            return Err(Failure::Null("out"));
        }
        ptr::copy_nonoverlapping(grad.as_ptr(), out, grad.len());
        Ok(())
    })
}

/// Generates `n_pairs` pairs and writes them as JSONL to `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn prefopt_forge_jsonl(
    generator: PrefoptGenerator,
    n_pairs: usize,
    seed: u64,
    path: *const c_char,
) -> PrefoptStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let cfg = DataConfig {
            generator: match generator {
                PrefoptGenerator::CalcChain => Generator::CalcChain,
                PrefoptGenerator::MultipleChoice => Generator::MultipleChoice,
            },
            n_pairs,
            seed,
            ..DataConfig::default()
        };
        cfg.validate()?;
        write_jsonl(&forge(&cfg)?, &path)?;
        Ok(())
    })
}
