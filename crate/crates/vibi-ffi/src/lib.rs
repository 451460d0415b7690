//! C ABI over the vibi library: opaque handles, status codes, and
//! string/byte buffers with explicit free functions. The header
//! `include/vibi.h` is generated by cbindgen at build time.
//!
//! Conventions: every fallible call returns a `VibiStatus`; on failure a
//! thread-local message is retrievable via `vibi_last_error_message` (valid
//! until the next failing call on the same thread). Strings returned
//! through out-parameters are owned by the caller and must be released with
//! `vibi_string_free` (or `vibi_bytes_free` for byte buffers).

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::{c_char, size_t};

use vibi::config::{Overrides, RunConfig};
use vibi::data::{gen_synth, load_idx, Dataset, SynthSpec};
use vibi::error::Error;
use vibi::eval;
use vibi::explain::export_explanation;
use vibi::nets::{BlackBox, ModelBlackBox, RuleBlackBox};
use vibi::pipeline::{load_task, train_run};
use vibi::trainer::Checkpoint;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VibiStatus {
    Ok = 0,
    NullPointer = 1,
    Utf8 = 2,
    InvalidArgument = 3,
    Data = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
}

/// Which fidelity variant to evaluate.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VibiFidelityVariant {
    Approximator = 0,
    Rationale = 1,
}

/// Which split of a generated task to expose as a dataset.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VibiSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// A loaded explainer/approximator checkpoint (opaque).
pub struct VibiCheckpoint {
    inner: Checkpoint,
}

/// A row-oriented dataset (opaque).
pub struct VibiDataset {
    inner: Dataset,
}

/// A black box under explanation (opaque).
pub struct VibiBlackBox {
    inner: Box<dyn BlackBox>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> VibiStatus {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => VibiStatus::InvalidArgument,
        Error::Data(_) | Error::Lookup(_) => VibiStatus::Data,
        Error::Numeric(_) => VibiStatus::Numeric,
        Error::Io(_) => VibiStatus::Io,
    }
}

fn fail(err: Error) -> VibiStatus {
    set_error(&err.to_string());
    status_of(&err)
}

fn guard(f: impl FnOnce() -> VibiStatus) -> VibiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic across the FFI boundary");
            VibiStatus::Panic
        }
    }
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, VibiStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(VibiStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(VibiStatus::Utf8)
        }
    }
}

fn give_string(s: String, out: *mut *mut c_char) -> VibiStatus {
    if out.is_null() {
        set_error("null output pointer");
        return VibiStatus::NullPointer;
    }
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            VibiStatus::Ok
        }
        Err(_) => {
            set_error("string contains interior NUL");
            VibiStatus::Data
        }
    }
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn vibi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread. Valid until the next
/// failing call on the same thread; never freed by the caller.
#[no_mangle]
pub extern "C" fn vibi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned through an out-parameter.
///
/// # Safety
/// `s` must have been produced by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn vibi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Release a byte buffer returned through an out-parameter.
///
/// # Safety
/// `ptr`/`len` must come from this library and not be freed before.
#[no_mangle]
pub unsafe extern "C" fn vibi_bytes_free(ptr: *mut u8, len: size_t) {
    if !ptr.is_null() {
        drop(Vec::from_raw_parts(ptr, len, len));
    }
}

// ---- checkpoints ---------------------------------------------------------

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vibi_checkpoint_load(
    path: *const c_char,
    out: *mut *mut VibiCheckpoint,
) -> VibiStatus {
    guard(|| {
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("null output pointer");
            return VibiStatus::NullPointer;
        }
        match Checkpoint::load(&p) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(VibiCheckpoint { inner: ck }));
                VibiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Save a checkpoint to a file (byte-exact round-trip).
///
/// # Safety
/// `ck` must be a live handle from this library; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vibi_checkpoint_save(
    ck: *const VibiCheckpoint,
    path: *const c_char,
) -> VibiStatus {
    guard(|| {
        if ck.is_null() {
            set_error("null checkpoint");
            return VibiStatus::NullPointer;
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match (*ck).inner.save(&p) {
            Ok(()) => VibiStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// The checkpoint's configuration as a JSON string (caller frees).
///
/// # Safety
/// `ck` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vibi_checkpoint_config_json(
    ck: *const VibiCheckpoint,
    out: *mut *mut c_char,
) -> VibiStatus {
    guard(|| {
        if ck.is_null() {
            set_error("null checkpoint");
            return VibiStatus::NullPointer;
        }
        match (*ck).inner.config_json() {
            Ok(s) => give_string(s, out),
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `ck` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vibi_checkpoint_free(ck: *mut VibiCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

// ---- datasets --------------------------------------------------------------

/// Load a paired IDX image/label dataset.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vibi_dataset_load_idx(
    images_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut VibiDataset,
) -> VibiStatus {
    guard(|| {
        let (ip, lp) = match (path_arg(images_path), path_arg(labels_path)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        if out.is_null() {
            set_error("null output pointer");
            return VibiStatus::NullPointer;
        }
        match load_idx(&ip, &lp) {
            Ok((_, ds)) => {
                *out = Box::into_raw(Box::new(VibiDataset { inner: ds }));
                VibiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Generate one split of the deterministic synthetic planted-chunk task.
///
/// # Safety
/// `relevant` must point to `relevant_len` readable u32 values; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vibi_dataset_gen_synth(
    d: u32,
    features_per_chunk: u32,
    relevant: *const u32,
    relevant_len: size_t,
    n: u64,
    seed: u64,
    split: VibiSplit,
    out: *mut *mut VibiDataset,
) -> VibiStatus {
    guard(|| {
        if (relevant.is_null() && relevant_len > 0) || out.is_null() {
            set_error("null pointer argument");
            return VibiStatus::NullPointer;
        }
        let rel: Vec<usize> = std::slice::from_raw_parts(relevant, relevant_len)
            .iter()
            .map(|&v| v as usize)
            .collect();
        let spec = SynthSpec {
            d: d as usize,
            features_per_chunk: features_per_chunk as usize,
            relevant: rel,
            n: n as usize,
        };
        match gen_synth(&spec, seed) {
            Ok(task) => {
                let ds = match split {
                    VibiSplit::Train => task.splits.train,
                    VibiSplit::Val => task.splits.val,
                    VibiSplit::Test => task.splits.test,
                };
                *out = Box::into_raw(Box::new(VibiDataset { inner: ds }));
                VibiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of instances; 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vibi_dataset_len(ds: *const VibiDataset) -> u64 {
    if ds.is_null() {
        0
    } else {
        (*ds).inner.n() as u64
    }
}

/// Features per instance; 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn vibi_dataset_features(ds: *const VibiDataset) -> u64 {
    if ds.is_null() {
        0
    } else {
        (*ds).inner.features() as u64
    }
}

/// # Safety
/// `ds` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vibi_dataset_free(ds: *mut VibiDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---- black boxes -------------------------------------------------------------

/// Load a model-backed black box from a `VIBB` artifact file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vibi_blackbox_load(
    path: *const c_char,
    out: *mut *mut VibiBlackBox,
) -> VibiStatus {
    guard(|| {
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("null output pointer");
            return VibiStatus::NullPointer;
        }
        let result = vibi::blackbox::BlackboxArtifact::load(&p)
            .and_then(|a| a.model())
            .and_then(ModelBlackBox::new);
        match result {
            Ok(bb) => {
                *out = Box::into_raw(Box::new(VibiBlackBox { inner: Box::new(bb) }));
                VibiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Construct the planted-rule black box of the synthetic task.
///
/// # Safety
/// `relevant` must point to `relevant_len` readable u32 values; `out`
/// valid.
#[no_mangle]
pub unsafe extern "C" fn vibi_blackbox_rule(
    d: u32,
    features_per_chunk: u32,
    relevant: *const u32,
    relevant_len: size_t,
    out: *mut *mut VibiBlackBox,
) -> VibiStatus {
    guard(|| {
        if (relevant.is_null() && relevant_len > 0) || out.is_null() {
            set_error("null pointer argument");
            return VibiStatus::NullPointer;
        }
        let rel: Vec<usize> = std::slice::from_raw_parts(relevant, relevant_len)
            .iter()
            .map(|&v| v as usize)
            .collect();
        let result = vibi::chunker::make_token_chunks(
            d as usize,
            1,
            features_per_chunk as usize,
        )
        .and_then(|map| RuleBlackBox::new(map, rel));
        match result {
            Ok(bb) => {
                *out = Box::into_raw(Box::new(VibiBlackBox { inner: Box::new(bb) }));
                VibiStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `bb` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vibi_blackbox_free(bb: *mut VibiBlackBox) {
    if !bb.is_null() {
        drop(Box::from_raw(bb));
    }
}

// ---- evaluation and explanation ----------------------------------------------

/// Evaluate fidelity of a checkpoint against a black box over a dataset,
/// returning the report as JSON (caller frees). `n_samples = 0` uses the
/// checkpoint's configured evaluation sample count.
///
/// # Safety
/// All handles must be live; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn vibi_eval_fidelity_json(
    ck: *const VibiCheckpoint,
    bb: *const VibiBlackBox,
    ds: *const VibiDataset,
    variant: VibiFidelityVariant,
    n_samples: u32,
    seed: u64,
    out_json: *mut *mut c_char,
) -> VibiStatus {
    guard(|| {
        if ck.is_null() || bb.is_null() || ds.is_null() {
            set_error("null handle argument");
            return VibiStatus::NullPointer;
        }
        let ck = &(*ck).inner;
        let bb = (*bb).inner.as_ref();
        let ds = &(*ds).inner;
        let report = match variant {
            VibiFidelityVariant::Approximator => {
                let s = if n_samples == 0 {
                    ck.config.eval_samples
                } else {
                    n_samples as usize
                };
                eval::approximator_fidelity(ck, bb, ds, s, seed)
            }
            VibiFidelityVariant::Rationale => eval::rationale_fidelity(ck, bb, ds),
        };
        match report {
            Ok(r) => give_string(r.to_json(), out_json),
            Err(e) => fail(e),
        }
    })
}

/// Export the explanation record of one instance as JSON (caller frees).
///
/// # Safety
/// All handles must be live; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn vibi_explain_json(
    ck: *const VibiCheckpoint,
    bb: *const VibiBlackBox,
    ds: *const VibiDataset,
    instance: u64,
    out_json: *mut *mut c_char,
) -> VibiStatus {
    guard(|| {
        if ck.is_null() || bb.is_null() || ds.is_null() {
            set_error("null handle argument");
            return VibiStatus::NullPointer;
        }
        match export_explanation(
            &(*ck).inner,
            (*bb).inner.as_ref(),
            &(*ds).inner,
            instance as usize,
        ) {
            Ok(e) => give_string(e.record_json(), out_json),
            Err(e) => fail(e),
        }
    })
}

/// Render the PGM heatmap of one instance (grid chunkings only); the byte
/// buffer is released with `vibi_bytes_free`.
///
/// # Safety
/// All handles must be live; `out_bytes` and `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn vibi_explain_heatmap_pgm(
    ck: *const VibiCheckpoint,
    bb: *const VibiBlackBox,
    ds: *const VibiDataset,
    instance: u64,
    out_bytes: *mut *mut u8,
    out_len: *mut size_t,
) -> VibiStatus {
    guard(|| {
        if ck.is_null() || bb.is_null() || ds.is_null() || out_bytes.is_null() || out_len.is_null()
        {
            set_error("null pointer argument");
            return VibiStatus::NullPointer;
        }
        match export_explanation(
            &(*ck).inner,
            (*bb).inner.as_ref(),
            &(*ds).inner,
            instance as usize,
        ) {
            Ok(e) => match e.heatmap {
                Some(pgm) => {
                    let mut v = pgm.into_boxed_slice();
                    *out_len = v.len();
                    *out_bytes = v.as_mut_ptr();
                    std::mem::forget(v);
                    VibiStatus::Ok
                }
                None => {
                    set_error(
                        e.note
                            .as_deref()
                            .unwrap_or("chunk kind has no heatmap rendering"),
                    );
                    VibiStatus::InvalidArgument
                }
            },
            Err(e) => fail(e),
        }
    })
}

/// Run a full training described by a TOML run-configuration file, writing
/// the checkpoint and resolved configuration into the configured output
/// directory, and return the checkpoint handle.
///
/// # Safety
/// `config_path` must be NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vibi_train_from_config(
    config_path: *const c_char,
    out: *mut *mut VibiCheckpoint,
) -> VibiStatus {
    guard(|| {
        let p = match path_arg(config_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("null output pointer");
            return VibiStatus::NullPointer;
        }
        let run = match RunConfig::load(&p).and_then(|c| c.resolve(&Overrides::default())) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let env = match load_task(&run) {
            Ok(e) => e,
            Err(e) => return fail(e),
        };
        let trained = match train_run(&run, &env) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        let dir = &run.config.out_dir;
        if let Err(e) = std::fs::create_dir_all(dir).map_err(Error::from) {
            return fail(e);
        }
        if let Err(e) = trained.checkpoint.save(&dir.join("checkpoint.vibi")) {
            return fail(e);
        }
        if let Err(e) = run.write(dir) {
            return fail(e);
        }
        *out = Box::into_raw(Box::new(VibiCheckpoint {
            inner: trained.checkpoint,
        }));
        VibiStatus::Ok
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    fn cstr(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn version_and_error_strings_are_valid() {
        let v = unsafe { CStr::from_ptr(vibi_version()) };
        assert!(!v.to_str().unwrap().is_empty());
        let e = unsafe { CStr::from_ptr(vibi_last_error_message()) };
        assert!(e.to_str().is_ok());
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut out: *mut VibiCheckpoint = std::ptr::null_mut();
        let s = unsafe { vibi_checkpoint_load(std::ptr::null(), &mut out) };
        assert_eq!(s, VibiStatus::NullPointer);
        let p = cstr("/tmp/whatever.vibi");
        let s2 = unsafe { vibi_checkpoint_load(p.as_ptr(), std::ptr::null_mut()) };
        assert_eq!(s2, VibiStatus::NullPointer);
    }

    #[test]
    fn missing_checkpoint_reports_data_error_with_message() {
        let mut out: *mut VibiCheckpoint = std::ptr::null_mut();
        let p = cstr("/tmp/definitely-not-here.vibi");
        let s = unsafe { vibi_checkpoint_load(p.as_ptr(), &mut out) };
        assert_eq!(s, VibiStatus::Data);
        let msg = unsafe { CStr::from_ptr(vibi_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("definitely-not-here"));
    }

    #[test]
    fn synth_dataset_and_rule_blackbox_round_trip() {
        let relevant = [2u32, 5];
        let mut ds: *mut VibiDataset = std::ptr::null_mut();
        let s = unsafe {
            vibi_dataset_gen_synth(8, 4, relevant.as_ptr(), 2, 200, 7, VibiSplit::Test, &mut ds)
        };
        assert_eq!(s, VibiStatus::Ok);
        assert_eq!(unsafe { vibi_dataset_len(ds) }, 20);
        assert_eq!(unsafe { vibi_dataset_features(ds) }, 32);

        let mut bb: *mut VibiBlackBox = std::ptr::null_mut();
        let s2 = unsafe { vibi_blackbox_rule(8, 4, relevant.as_ptr(), 2, &mut bb) };
        assert_eq!(s2, VibiStatus::Ok);

        unsafe {
            vibi_dataset_free(ds);
            vibi_blackbox_free(bb);
        }
    }

    #[test]
    fn idx_files_load_through_the_abi() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        let mut imgs = Vec::new();
        imgs.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&2u32.to_be_bytes());
        imgs.extend_from_slice(&[0, 51, 102, 153, 204, 255, 10, 20]);
        std::fs::write(&ip, imgs).unwrap();
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 7]);
        std::fs::write(&lp, labels).unwrap();

        let ipc = cstr(ip.to_str().unwrap());
        let lpc = cstr(lp.to_str().unwrap());
        let mut ds: *mut VibiDataset = std::ptr::null_mut();
        let st = unsafe { vibi_dataset_load_idx(ipc.as_ptr(), lpc.as_ptr(), &mut ds) };
        assert_eq!(st, VibiStatus::Ok);
        assert_eq!(unsafe { vibi_dataset_len(ds) }, 2);
        assert_eq!(unsafe { vibi_dataset_features(ds) }, 4);
        unsafe { vibi_dataset_free(ds) };

        // truncated file reports a data error
        std::fs::write(&ip, [0u8; 6]).unwrap();
        let mut ds2: *mut VibiDataset = std::ptr::null_mut();
        let st2 = unsafe { vibi_dataset_load_idx(ipc.as_ptr(), lpc.as_ptr(), &mut ds2) };
        assert_eq!(st2, VibiStatus::Data);
    }

    #[test]
    fn grid_checkpoint_renders_heatmap_through_the_abi() {
        use vibi::chunker::ChunkSpec;
        use vibi::diffcore::TensorOf;
        use vibi::nets::{dense_approximator_arch, dense_explainer_arch, Model};
        use vibi::rng::RngStream;
        use vibi::trainer::VibiConfig;

        // a 4x4 image task with 2x2 patches so the heatmap path engages
        let chunks = ChunkSpec::GridPatch { height: 4, width: 4, patch_h: 2, patch_w: 2 };
        let mut rng = RngStream::from_seed(8);
        let explainer = Model::new(dense_explainer_arch(16, 8, 4), &mut rng).unwrap();
        let approximator = Model::new(dense_approximator_arch(16, 8, 2), &mut rng).unwrap();
        let ck = Checkpoint {
            config: VibiConfig {
                k: 1,
                tau: 0.5,
                beta: 0.1,
                train_samples: 1,
                lr: 1e-3,
                batch: 4,
                epochs: 1,
                seed: 8,
                chunks: chunks.clone(),
                explainer: explainer.spec().clone(),
                approximator: approximator.spec().clone(),
                eval_samples: 4,
                adam_beta1: 0.5,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                early_stop_patience: None,
                val_limit: 1000,
                soft_labels: false,
            },
            explainer: explainer.params().to_vec(),
            approximator: approximator.params().to_vec(),
            loss_trace: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let ck_path = dir.path().join("grid.vibi");
        ck.save(&ck_path).unwrap();

        let cpath = cstr(ck_path.to_str().unwrap());
        let mut handle: *mut VibiCheckpoint = std::ptr::null_mut();
        assert_eq!(
            unsafe { vibi_checkpoint_load(cpath.as_ptr(), &mut handle) },
            VibiStatus::Ok
        );

        let mut ds: *mut VibiDataset = std::ptr::null_mut();
        // token-group generator with matching feature count backs the rows;
        // the checkpoint's own chunking drives the rendering
        let relevant = [0u32];
        unsafe {
            vibi_dataset_gen_synth(4, 4, relevant.as_ptr(), 1, 40, 8, VibiSplit::Test, &mut ds)
        };
        let mut bb: *mut VibiBlackBox = std::ptr::null_mut();
        unsafe { vibi_blackbox_rule(4, 4, relevant.as_ptr(), 1, &mut bb) };

        let mut bytes: *mut u8 = std::ptr::null_mut();
        let mut len: size_t = 0;
        let st = unsafe { vibi_explain_heatmap_pgm(handle, bb, ds, 0, &mut bytes, &mut len) };
        assert_eq!(st, VibiStatus::Ok, "{:?}", unsafe {
            CStr::from_ptr(vibi_last_error_message())
        });
        let pgm = unsafe { std::slice::from_raw_parts(bytes, len) }.to_vec();
        let header = b"P5\n4 4\n255\n";
        assert!(pgm.starts_with(header));
        assert_eq!(pgm.len(), header.len() + 16);

        // the selected patch's pixels are all forced to 255
        let mut json: *mut c_char = std::ptr::null_mut();
        assert_eq!(
            unsafe { vibi_explain_json(handle, bb, ds, 0, &mut json) },
            VibiStatus::Ok
        );
        let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
        unsafe { vibi_string_free(json) };
        let record: serde_json::Value = serde_json::from_str(&text).unwrap();
        let selected = record["selected"][0].as_u64().unwrap() as usize;
        let (py, px) = (selected / 2, selected % 2);
        let body = &pgm[header.len()..];
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(body[(py * 2 + r) * 4 + px * 2 + c], 255);
            }
        }
        unsafe {
            vibi_bytes_free(bytes, len);
            vibi_dataset_free(ds);
            vibi_blackbox_free(bb);
            vibi_checkpoint_free(handle);
        }
    }

    #[test]
    fn full_train_eval_explain_cycle_through_the_abi() {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("out");
        let cfg = format!(
            r#"
task = "synthetic"
out_dir = "{}"
seed = 3

[vibi]
k = 2
tau = 0.5
beta = 0.1
lr = 0.001
batch = 50
epochs = 3
patience = 0
"#,
            out_dir.display()
        );
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, cfg).unwrap();

        let mut ck: *mut VibiCheckpoint = std::ptr::null_mut();
        let cpath = cstr(cfg_path.to_str().unwrap());
        let s = unsafe { vibi_train_from_config(cpath.as_ptr(), &mut ck) };
        assert_eq!(s, VibiStatus::Ok, "train failed: {:?}", unsafe {
            CStr::from_ptr(vibi_last_error_message())
        });
        assert!(out_dir.join("checkpoint.vibi").exists());
        assert!(out_dir.join("resolved.toml").exists());

        // reload through the ABI and check save round-trip
        let saved = out_dir.join("resaved.vibi");
        let spath = cstr(saved.to_str().unwrap());
        assert_eq!(unsafe { vibi_checkpoint_save(ck, spath.as_ptr()) }, VibiStatus::Ok);
        assert_eq!(
            std::fs::read(out_dir.join("checkpoint.vibi")).unwrap(),
            std::fs::read(&saved).unwrap()
        );

        let mut json: *mut c_char = std::ptr::null_mut();
        assert_eq!(
            unsafe { vibi_checkpoint_config_json(ck, &mut json) },
            VibiStatus::Ok
        );
        let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
        assert!(text.contains("\"k\": 2"));
        unsafe { vibi_string_free(json) };

        let relevant = [2u32, 5];
        let mut ds: *mut VibiDataset = std::ptr::null_mut();
        unsafe {
            vibi_dataset_gen_synth(8, 4, relevant.as_ptr(), 2, 2000, 3, VibiSplit::Test, &mut ds)
        };
        let mut bb: *mut VibiBlackBox = std::ptr::null_mut();
        unsafe { vibi_blackbox_rule(8, 4, relevant.as_ptr(), 2, &mut bb) };

        let mut fid_json: *mut c_char = std::ptr::null_mut();
        let s3 = unsafe {
            vibi_eval_fidelity_json(
                ck,
                bb,
                ds,
                VibiFidelityVariant::Rationale,
                0,
                3,
                &mut fid_json,
            )
        };
        assert_eq!(s3, VibiStatus::Ok);
        let fid_text = unsafe { CStr::from_ptr(fid_json) }.to_str().unwrap().to_string();
        assert!(fid_text.contains("\"variant\": \"rationale\""));
        assert!(fid_text.contains("\"accuracy\""));
        unsafe { vibi_string_free(fid_json) };

        let mut expl_json: *mut c_char = std::ptr::null_mut();
        let s4 = unsafe { vibi_explain_json(ck, bb, ds, 0, &mut expl_json) };
        assert_eq!(s4, VibiStatus::Ok);
        let expl_text = unsafe { CStr::from_ptr(expl_json) }.to_str().unwrap().to_string();
        assert!(expl_text.contains("\"selected\""));
        unsafe { vibi_string_free(expl_json) };

        // token-group chunking has no heatmap: invalid argument, message set
        let mut bytes: *mut u8 = std::ptr::null_mut();
        let mut len: size_t = 0;
        let s5 = unsafe { vibi_explain_heatmap_pgm(ck, bb, ds, 0, &mut bytes, &mut len) };
        assert_eq!(s5, VibiStatus::InvalidArgument);

        unsafe {
            vibi_dataset_free(ds);
            vibi_blackbox_free(bb);
            vibi_checkpoint_free(ck);
        }
    }
}
