//! C ABI over the `mmger` crate.
//!
//! Every function returns an [`MmgerStatus`]; on failure the message is
//! available from [`mmger_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use candle_core::DType;
use mmger::config::RunConfig;
use mmger::ctc::{ctc_forward_backward, regularize};
use mmger::lm::FrozenLm;
use mmger::synthdata::{generate_corpus, load_split, manifest_path, GeneratorConfig, Utterance};
use mmger::trainer::{edit_distance, Trainer};
use mmger::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmgerStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidState = 2,
    Io = 3,
    Checksum = 4,
    Internal = 5,
}

impl From<&Error> for MmgerStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) => MmgerStatus::InvalidArgument,
            Error::InvalidState(_) | Error::NonFiniteLoss { .. } => MmgerStatus::InvalidState,
            Error::Io { .. } => MmgerStatus::Io,
            Error::Checksum { .. } => MmgerStatus::Checksum,
            _ => MmgerStatus::Internal,
        }
    }
}

/// Utterances of one corpus split.
pub struct MmgerDataset {
    utts: Vec<Utterance>,
}

/// A trained model restored from a checkpoint.
pub struct MmgerModel {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> MmgerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MmgerStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            MmgerStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MmgerStatus::Internal
        }
    }
}

fn invalid(msg: &str) -> Error {
    Error::InvalidArgument(msg.to_string())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Error> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Error> {
    p.as_mut()
        .ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Error> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_symbols(
    symbols: &[u32],
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> Result<(), Error> {
    let len = out_ref(out_len, "out_len")?;
    *len = symbols.len();
    if symbols.len() > capacity {
        return Err(invalid(&format!(
            "output buffer holds {capacity}, need {}",
            symbols.len()
        )));
    }
    if !symbols.is_empty() {
        if out.is_null() {
            return Err(invalid("output buffer is null"));
        }
        ptr::copy_nonoverlapping(symbols.as_ptr(), out, symbols.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mmger_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// CTC negative log-likelihood of one utterance.
///
/// `logits` is `frames x classes`, row-major, class 0 is blank. `grad` may be
/// null; otherwise it receives `frames x classes` gradient values. Infeasible
/// targets yield `+inf` and a zero gradient.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mmger_ctc_loss(
    logits: *const f64,
    frames: usize,
    classes: usize,
    target: *const u32,
    target_len: usize,
    out_loss: *mut f64,
    grad: *mut f64,
) -> MmgerStatus {
    guard(|| {
        let logits = slice(logits, frames * classes, "logits")?;
        let target = slice(target, target_len, "target")?;
        let out = out_ref(out_loss, "out_loss")?;
        let (loss, g) = ctc_forward_backward(logits, frames, classes, target)?;
        *out = loss;
        if !grad.is_null() {
            ptr::copy_nonoverlapping(g.as_ptr(), grad, g.len());
        }
        Ok(())
    })
}

/// Collapses repeats then removes blanks. `out` needs room for `len` symbols.
///
/// # Safety
/// `labels` must hold `len` values and `out` must hold `capacity`.
#[no_mangle]
pub unsafe extern "C" fn mmger_regularize(
    labels: *const u32,
    len: usize,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> MmgerStatus {
    guard(|| {
        let labels = slice(labels, len, "labels")?;
        write_symbols(&regularize(labels), out, capacity, out_len)
    })
}

/// Character error rate; the reference must be nonempty.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mmger_cer(
    hyp: *const u32,
    hyp_len: usize,
    reference: *const u32,
    ref_len: usize,
    out: *mut f64,
) -> MmgerStatus {
    guard(|| {
        let hyp = slice(hyp, hyp_len, "hyp")?;
        let reference = slice(reference, ref_len, "reference")?;
        if reference.is_empty() {
            return Err(invalid("CER needs a nonempty reference"));
        }
        *out_ref(out, "out")? = edit_distance(hyp, reference) as f64 / reference.len() as f64;
        Ok(())
    })
}

/// Writes a synthetic corpus into `out_dir`. `config_path` may be null for
/// defaults; otherwise it names a run configuration whose `synthdata` section is used.
///
/// # Safety
/// Strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mmger_generate_corpus(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> MmgerStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            GeneratorConfig::default()
        } else {
            RunConfig::load(&path_arg(config_path, "config_path")?)?.synthdata
        };
        generate_corpus(&cfg, &path_arg(out_dir, "out_dir")?)?;
        Ok(())
    })
}

/// Loads one split of a corpus (directory or manifest path).
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmger_dataset_open(
    corpus: *const c_char,
    split: *const c_char,
    out: *mut *mut MmgerDataset,
) -> MmgerStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let path = manifest_path(&path_arg(corpus, "corpus")?);
        let split = path_arg(split, "split")?;
        let (_, utts) = load_split(&path, &split.to_string_lossy())?;
        *slot = Box::into_raw(Box::new(MmgerDataset { utts }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from `mmger_dataset_open` (or be null).
#[no_mangle]
pub unsafe extern "C" fn mmger_dataset_len(ds: *const MmgerDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.utts.len())
}

unsafe fn utterance<'a>(ds: *const MmgerDataset, index: usize) -> Result<&'a Utterance, Error> {
    let ds = ds.as_ref().ok_or_else(|| invalid("dataset is null"))?;
    ds.utts
        .get(index)
        .ok_or_else(|| invalid(&format!("index {index} out of range")))
}

/// Accent label and frame count of utterance `index`.
///
/// # Safety
/// `ds` must be a live dataset handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn mmger_dataset_info(
    ds: *const MmgerDataset,
    index: usize,
    out_accent: *mut usize,
    out_frames: *mut usize,
) -> MmgerStatus {
    guard(|| {
        let u = utterance(ds, index)?;
        if let Some(a) = out_accent.as_mut() {
            *a = u.accent;
        }
        if let Some(f) = out_frames.as_mut() {
            *f = u.num_frames;
        }
        Ok(())
    })
}

/// Reference transcript of utterance `index`; `out_len` receives the required
/// length even when `capacity` is too small.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn mmger_dataset_transcript(
    ds: *const MmgerDataset,
    index: usize,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> MmgerStatus {
    guard(|| write_symbols(&utterance(ds, index)?.transcript, out, capacity, out_len))
}

/// # Safety
/// `ds` must come from `mmger_dataset_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmger_dataset_free(ds: *mut MmgerDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Restores a trained model; `lm_path` is the frozen LM it was trained against.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmger_model_open(
    checkpoint_path: *const c_char,
    lm_path: *const c_char,
    out: *mut *mut MmgerModel,
) -> MmgerStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        let lm = FrozenLm::load(&path_arg(lm_path, "lm_path")?, DType::F32)?;
        let trainer = Trainer::load_checkpoint(&path_arg(checkpoint_path, "checkpoint_path")?, lm)?;
        *slot = Box::into_raw(Box::new(MmgerModel { trainer }));
        Ok(())
    })
}

/// Corrected transcription and predicted accent of utterance `index`.
/// `out_accent` may be null; it receives `SIZE_MAX` when the model has no accent head.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn mmger_model_decode(
    model: *const MmgerModel,
    ds: *const MmgerDataset,
    index: usize,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    out_accent: *mut usize,
) -> MmgerStatus {
    guard(|| {
        let model = &model
            .as_ref()
            .ok_or_else(|| invalid("model is null"))?
            .trainer;
        let u = utterance(ds, index)?;
        let (fwd, corrected) = model.model().decode(&[u])?;
        if let Some(a) = out_accent.as_mut() {
            *a = match &fwd.ar {
                Some(ar) => mmger::arfusion::predicted_accents(&ar.logits)?[0],
                None => usize::MAX,
            };
        }
        write_symbols(&corrected[0], out, capacity, out_len)
    })
}

/// # Safety
/// `model` must come from `mmger_model_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmger_model_free(model: *mut MmgerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
