//! C ABI for loading checkpoints and running the adapted model.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible function returns a
//! [`PmoeStatus`]; on failure [`pmoe_last_error`] describes the problem
//! for the calling thread. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pmoe_core::adapters::{adapted_forward_batch, trainable_param_count, AdapterMode, AdapterShape, PmoeAdapterSet};
use pmoe_core::checkpoint::load_checkpoint;
use pmoe_core::transformer::{argmax, BaseModel, PackedBatch};
use pmoe_core::PmoeError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Corrupt = 5,
    Inconsistent = 6,
    Dimension = 7,
    Runtime = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmoeMode {
    Pmoe = 0,
    LoraSeq = 1,
}

/// A frozen base model.
pub struct PmoeBase {
    model: BaseModel,
}

/// A set of adapters (shared LoRA, experts, router).
pub struct PmoeAdapters {
    set: PmoeAdapterSet,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &PmoeError) -> PmoeStatus {
    match e {
        PmoeError::Io { .. } => PmoeStatus::Io,
        PmoeError::Corrupt(_) | PmoeError::Json(_) => PmoeStatus::Corrupt,
        PmoeError::Consistency(_) => PmoeStatus::Inconsistent,
        PmoeError::Dimension(_) | PmoeError::Length { .. } => PmoeStatus::Dimension,
        PmoeError::Input(_) | PmoeError::Validation { .. } | PmoeError::Index(_) => PmoeStatus::InvalidArgument,
        _ => PmoeStatus::Runtime,
    }
}

enum Failure {
    Status(PmoeStatus, String),
    Core(PmoeError),
}

impl From<PmoeError> for Failure {
    fn from(e: PmoeError) -> Self {
        Failure::Core(e)
    }
}

fn fail(status: PmoeStatus, msg: impl Into<String>) -> Failure {
    Failure::Status(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PmoeStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            PmoeStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(fail(PmoeStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(PmoeStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn tokens_arg(tokens: *const u32, len: usize) -> Result<Vec<usize>, Failure> {
    if tokens.is_null() {
        return Err(fail(PmoeStatus::NullPointer, "tokens is null"));
    }
    if len == 0 {
        return Err(fail(PmoeStatus::InvalidArgument, "token sequence is empty"));
    }
    Ok(std::slice::from_raw_parts(tokens, len).iter().map(|&t| t as usize).collect())
}

unsafe fn base_arg<'a>(base: *const PmoeBase) -> Result<&'a BaseModel, Failure> {
    base.as_ref().map(|b| &b.model).ok_or_else(|| fail(PmoeStatus::NullPointer, "base is null"))
}

fn logits_and_gate(base: &BaseModel, adapters: Option<&PmoeAdapterSet>, tokens: &[usize]) -> Result<(Vec<f64>, Option<Vec<f64>>), Failure> {
    let batch = PackedBatch::new(&[tokens], &base.config)?;
    match adapters {
        Some(set) => {
            let (logits, gate) = adapted_forward_batch(&batch, base, set)?;
            Ok((logits.into_data(), gate.map(|g| g.into_data())))
        }
        None => Ok((pmoe_core::transformer::base_forward(tokens, base)?.into_data(), None)),
    }
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `cap`) into `buf`. Returns the full message length
/// including the terminator, so a too-small buffer can be resized.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pmoe_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let needed = msg.len() + 1;
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        needed
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a base-model checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmoe_base_load(path: *const c_char, out: *mut *mut PmoeBase) -> PmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PmoeStatus::NullPointer, "out is null"));
        }
        let model = load_checkpoint(path_arg(path)?)?.to_base()?;
        *out = Box::into_raw(Box::new(PmoeBase { model }));
        Ok(())
    })
}

/// # Safety
/// `base` must be null or a handle from [`pmoe_base_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pmoe_base_free(base: *mut PmoeBase) {
    if !base.is_null() {
        drop(Box::from_raw(base));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `base` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmoe_base_vocab_size(base: *const PmoeBase) -> usize {
    base.as_ref().map_or(0, |b| b.model.config.vocab_size)
}

/// Context length, or 0 for a null handle.
///
/// # Safety
/// `base` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmoe_base_max_seq_len(base: *const PmoeBase) -> usize {
    base.as_ref().map_or(0, |b| b.model.config.max_seq_len)
}

/// Total base parameters, or 0 for a null handle.
///
/// # Safety
/// `base` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmoe_base_param_count(base: *const PmoeBase) -> usize {
    base.as_ref().map_or(0, |b| b.model.param_count())
}

/// Loads an adapter checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmoe_adapters_load(path: *const c_char, out: *mut *mut PmoeAdapters) -> PmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PmoeStatus::NullPointer, "out is null"));
        }
        let set = load_checkpoint(path_arg(path)?)?.to_adapters()?;
        *out = Box::into_raw(Box::new(PmoeAdapters { set }));
        Ok(())
    })
}

/// # Safety
/// `adapters` must be null or a handle from [`pmoe_adapters_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pmoe_adapters_free(adapters: *mut PmoeAdapters) {
    if !adapters.is_null() {
        drop(Box::from_raw(adapters));
    }
}

/// Expert count (1 for sequential-LoRA sets), or 0 for a null handle.
///
/// # Safety
/// `adapters` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmoe_adapters_num_experts(adapters: *const PmoeAdapters) -> usize {
    adapters.as_ref().map_or(0, |a| a.set.num_experts())
}

/// Forward pass over `len` tokens. Writes `len × vocab` logits row-major
/// into `logits` (capacity `logits_cap` values). When `adapters` is a
/// pmoe set and `gate` is non-null, also writes the `len × experts` gate.
/// `adapters` may be null to run the bare base model.
///
/// # Safety
/// Pointers must be null or valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pmoe_forward(
    base: *const PmoeBase,
    adapters: *const PmoeAdapters,
    tokens: *const u32,
    len: usize,
    logits: *mut f64,
    logits_cap: usize,
    gate: *mut f64,
    gate_cap: usize,
) -> PmoeStatus {
    guard(|| {
        let model = base_arg(base)?;
        let set = adapters.as_ref().map(|a| &a.set);
        let toks = tokens_arg(tokens, len)?;
        if logits.is_null() {
            return Err(fail(PmoeStatus::NullPointer, "logits is null"));
        }
        let (l, g) = logits_and_gate(model, set, &toks)?;
        if l.len() > logits_cap {
            return Err(fail(PmoeStatus::BufferTooSmall, format!("logits need {} values, capacity {logits_cap}", l.len())));
        }
        if let (Some(g), false) = (&g, gate.is_null()) {
            if g.len() > gate_cap {
                return Err(fail(PmoeStatus::BufferTooSmall, format!("gate needs {} values, capacity {gate_cap}", g.len())));
            }
            std::ptr::copy_nonoverlapping(g.as_ptr(), gate, g.len());
        }
        std::ptr::copy_nonoverlapping(l.as_ptr(), logits, l.len());
        Ok(())
    })
}

/// Greedy continuation of `prompt`: appends argmax tokens (lowest id on
/// ties) until `max_new` tokens, the end-of-sequence token, or the
/// context limit. Writes only the generated tokens to `out` and their
/// count to `*out_len`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `adapters` may be null.
#[no_mangle]
pub unsafe extern "C" fn pmoe_greedy_decode(
    base: *const PmoeBase,
    adapters: *const PmoeAdapters,
    prompt: *const u32,
    len: usize,
    max_new: usize,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> PmoeStatus {
    guard(|| {
        let model = base_arg(base)?;
        let set = adapters.as_ref().map(|a| &a.set);
        let mut seq = tokens_arg(prompt, len)?;
        if out_len.is_null() || (out.is_null() && out_cap > 0) {
            return Err(fail(PmoeStatus::NullPointer, "output pointer is null"));
        }
        let vocab = model.config.vocab_size;
        let mut generated = Vec::new();
        while generated.len() < max_new && seq.len() < model.config.max_seq_len {
            let (logits, _) = logits_and_gate(model, set, &seq)?;
            let next = argmax(&logits[logits.len() - vocab..]);
            seq.push(next);
            generated.push(next as u32);
            if next == pmoe_core::tasks::vocab::EOS {
                break;
            }
        }
        if generated.len() > out_cap {
            return Err(fail(PmoeStatus::BufferTooSmall, format!("{} tokens generated, capacity {out_cap}", generated.len())));
        }
        std::ptr::copy_nonoverlapping(generated.as_ptr(), out, generated.len());
        *out_len = generated.len();
        Ok(())
    })
}

/// Trainable adapter parameter count for the given shape (two adapted
/// projections per layer).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmoe_param_count(
    num_layers: usize,
    d_model: usize,
    rank: usize,
    tau: usize,
    num_experts: usize,
    mode: PmoeMode,
    out: *mut u64,
) -> PmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PmoeStatus::NullPointer, "out is null"));
        }
        let mode = match mode {
            PmoeMode::Pmoe => AdapterMode::Pmoe,
            PmoeMode::LoraSeq => AdapterMode::LoraSeq,
        };
        if mode == AdapterMode::Pmoe && (tau == 0 || tau >= num_layers || num_experts == 0) {
            return Err(fail(PmoeStatus::InvalidArgument, "need 0 < tau < num_layers and at least one expert"));
        }
        let shape = AdapterShape { num_layers, d_model, rank, tau, num_experts, projections: 2 };
        *out = trainable_param_count(&shape, mode, 1).count as u64;
        Ok(())
    })
}
