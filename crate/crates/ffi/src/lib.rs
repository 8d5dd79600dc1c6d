//! C ABI over `dscl-core`.
//!
//! Every fallible function returns a [`DsclStatus`]. On failure the message
//! is kept per thread and can be read with [`dscl_last_error_message`].
//! Handles are opaque; free them with the matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dscl_core::cli::{cmd_train, ExperimentConfig};
use dscl_core::datagen::{fig1_benchmark, load_path, Dataset};
use dscl_core::harness::{split_tasks, AccuracyMatrix};
use dscl_core::nets::{build_multihead, ArchConfig, ArchKind, Mode, Model, ParamGroup};
use dscl_core::tensor::Tensor;
use dscl_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Shape = 5,
    Numerics = 6,
    Eval = 7,
    Io = 8,
    Checkpoint = 9,
    Panic = 10,
    Other = 11,
}

pub struct DsclModel {
    model: Model<f32>,
    input_size: usize,
}

pub struct DsclDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DsclStatus {
    match e {
        Error::Config(_) => DsclStatus::Config,
        Error::Data(_) => DsclStatus::Data,
        Error::Shape { .. } => DsclStatus::Shape,
        Error::Numerics { .. } | Error::Divergence(_) => DsclStatus::Numerics,
        Error::Eval(_) | Error::Metric(_) => DsclStatus::Eval,
        Error::Io { .. } => DsclStatus::Io,
        Error::Format { .. } | Error::State(_) => DsclStatus::Checkpoint,
        _ => DsclStatus::Other,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsclStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsclStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            DsclStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            DsclStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DsclStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn arch_config(json: *const c_char) -> Result<ArchConfig, Fail> {
    if json.is_null() {
        return Ok(ArchConfig::default());
    }
    let s = str_arg(json, "config_json")?;
    serde_json::from_str(s).map_err(|e| Fail::Core(Error::Config(format!("arch config: {e}"))))
}

unsafe fn arch_kind(p: *const c_char) -> Result<ArchKind, Fail> {
    let s = str_arg(p, "arch")?;
    s.parse().map_err(|e: Error| Fail::Core(e))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).expect("json has no nul").into_raw()
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dscl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn dscl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn dscl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Feature-extractor parameter count of `arch` ("resnet18", "ds", ...).
/// `config_json` is an architecture config object or NULL for defaults.
#[no_mangle]
pub unsafe extern "C" fn dscl_fe_param_count(
    arch: *const c_char,
    config_json: *const c_char,
    out_count: *mut u64,
) -> DsclStatus {
    guard(|| {
        let kind = arch_kind(arch)?;
        let cfg = arch_config(config_json)?;
        let out = out_arg(out_count, "out_count")?;
        // heads do not affect the extractor; one is needed to build
        *out = build_multihead(kind, &cfg, &[2])?.fe_param_count() as u64;
        Ok(())
    })
}

/// Builds a freshly initialised multi-head model with `n_tasks` heads of
/// `task_classes[t]` outputs each.
#[no_mangle]
pub unsafe extern "C" fn dscl_model_new(
    arch: *const c_char,
    config_json: *const c_char,
    task_classes: *const usize,
    n_tasks: usize,
    seed: u64,
    out_model: *mut *mut DsclModel,
) -> DsclStatus {
    guard(|| {
        let kind = arch_kind(arch)?;
        let cfg = arch_config(config_json)?;
        let out = out_arg(out_model, "out_model")?;
        if task_classes.is_null() && n_tasks > 0 {
            return Err(Fail::Null("task_classes"));
        }
        let tasks = if n_tasks == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(task_classes, n_tasks).to_vec()
        };
        let model = Model::new(build_multihead(kind, &cfg, &tasks)?, seed)?;
        *out = Box::into_raw(Box::new(DsclModel {
            model,
            input_size: cfg.input_size,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dscl_model_free(model: *mut DsclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature-extractor and total (extractor plus every head) parameter counts.
#[no_mangle]
pub unsafe extern "C" fn dscl_model_param_counts(
    model: *const DsclModel,
    out_fe: *mut u64,
    out_total: *mut u64,
) -> DsclStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_arg(out_fe, "out_fe")? = m.model.param_count(ParamGroup::Shared) as u64;
        *out_arg(out_total, "out_total")? = m.model.total_param_count() as u64;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dscl_model_n_tasks(model: *const DsclModel, out_n: *mut usize) -> DsclStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_arg(out_n, "out_n")? = m.model.n_tasks();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dscl_model_task_classes(
    model: *const DsclModel,
    task: usize,
    out_classes: *mut usize,
) -> DsclStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let classes = m.model.spec().task_classes();
        let c = classes
            .get(task)
            .ok_or_else(|| Fail::Arg(format!("task {task} out of range ({} heads)", classes.len())))?;
        *out_arg(out_classes, "out_classes")? = *c;
        Ok(())
    })
}

/// Eval-mode logits of head `task` for `n` images laid out N×3×S×S, where S
/// is the model's input size. Writes `n * classes` floats to `out_logits`,
/// whose capacity `out_len` must be large enough.
#[no_mangle]
pub unsafe extern "C" fn dscl_model_predict(
    model: *const DsclModel,
    images: *const f32,
    n: usize,
    task: usize,
    out_logits: *mut f32,
    out_len: usize,
) -> DsclStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if images.is_null() {
            return Err(Fail::Null("images"));
        }
        if out_logits.is_null() {
            return Err(Fail::Null("out_logits"));
        }
        if n == 0 {
            return Err(Fail::Arg("n must be positive".into()));
        }
        let classes = *m
            .model
            .spec()
            .task_classes()
            .get(task)
            .ok_or_else(|| Fail::Arg(format!("task {task} out of range")))?;
        if out_len < n * classes {
            return Err(Fail::Arg(format!("out_len {out_len} < {}", n * classes)));
        }
        let s = m.input_size;
        let data = std::slice::from_raw_parts(images, n * 3 * s * s).to_vec();
        let x = Tensor::from_vec(vec![n, 3, s, s], data)?;
        let logits = m.model.predict(&x, &[task], Mode::Eval, 64)?;
        let out = std::slice::from_raw_parts_mut(out_logits, n * classes);
        out.copy_from_slice(logits[0].data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dscl_model_save(model: *const DsclModel, path: *const c_char) -> DsclStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let p = PathBuf::from(str_arg(path, "path")?);
        m.model.save(&p)?;
        Ok(())
    })
}

/// Loads weights and running statistics into an existing model of the same
/// architecture.
#[no_mangle]
pub unsafe extern "C" fn dscl_model_load(model: *mut DsclModel, path: *const c_char) -> DsclStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Fail::Null("model"))?;
        let p = PathBuf::from(str_arg(path, "path")?);
        m.model.load(&p)?;
        Ok(())
    })
}

/// Generates the two-task color/shape benchmark.
#[no_mangle]
pub unsafe extern "C" fn dscl_dataset_fig1(
    image_size: usize,
    n_per_class: usize,
    seed: u64,
    out_train: *mut *mut DsclDataset,
    out_test: *mut *mut DsclDataset,
) -> DsclStatus {
    guard(|| {
        let tr = out_arg(out_train, "out_train")?;
        let te = out_arg(out_test, "out_test")?;
        let b = fig1_benchmark(image_size, n_per_class, seed)?;
        *tr = Box::into_raw(Box::new(DsclDataset { data: b.train }));
        *te = Box::into_raw(Box::new(DsclDataset { data: b.test }));
        Ok(())
    })
}

/// Loads a packed `.dsds` file or a class-per-directory PPM tree, resized
/// to `input_size`.
#[no_mangle]
pub unsafe extern "C" fn dscl_dataset_load(
    path: *const c_char,
    input_size: usize,
    out_dataset: *mut *mut DsclDataset,
) -> DsclStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out_dataset, "out_dataset")?;
        let data = load_path(&p, input_size)?;
        *out = Box::into_raw(Box::new(DsclDataset { data }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dscl_dataset_free(dataset: *mut DsclDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Sample count, class count and image side length.
#[no_mangle]
pub unsafe extern "C" fn dscl_dataset_info(
    dataset: *const DsclDataset,
    out_len: *mut usize,
    out_classes: *mut usize,
    out_image_size: *mut usize,
) -> DsclStatus {
    guard(|| {
        let d = &dataset.as_ref().ok_or(Fail::Null("dataset"))?.data;
        *out_arg(out_len, "out_len")? = d.len();
        *out_arg(out_classes, "out_classes")? = d.n_classes();
        *out_arg(out_image_size, "out_image_size")? = d.image_size();
        Ok(())
    })
}

/// Borrowed pointer to the N×3×S×S pixel buffer, valid while the handle
/// lives. NULL for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dscl_dataset_images(dataset: *const DsclDataset) -> *const f32 {
    dataset.as_ref().map_or(ptr::null(), |d| d.data.images.data().as_ptr())
}

/// Copies the labels into `out_labels`, which must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn dscl_dataset_labels(
    dataset: *const DsclDataset,
    out_labels: *mut usize,
    len: usize,
) -> DsclStatus {
    guard(|| {
        let d = &dataset.as_ref().ok_or(Fail::Null("dataset"))?.data;
        if out_labels.is_null() {
            return Err(Fail::Null("out_labels"));
        }
        if len != d.len() {
            return Err(Fail::Arg(format!("len {len} != dataset length {}", d.len())));
        }
        std::slice::from_raw_parts_mut(out_labels, len).copy_from_slice(&d.labels);
        Ok(())
    })
}

/// Seeded partition of `n_classes` classes into `n_tasks` tasks. Writes the
/// task of every class to `out_task_of_class` (length `n_classes`).
#[no_mangle]
pub unsafe extern "C" fn dscl_split_tasks(
    n_classes: usize,
    n_tasks: usize,
    seed: u64,
    out_task_of_class: *mut usize,
) -> DsclStatus {
    guard(|| {
        if out_task_of_class.is_null() {
            return Err(Fail::Null("out_task_of_class"));
        }
        let split = split_tasks(n_classes, n_tasks, seed)?;
        let out = std::slice::from_raw_parts_mut(out_task_of_class, n_classes);
        for (t, task) in split.tasks.iter().enumerate() {
            for &c in &task.classes {
                out[c] = t;
            }
        }
        Ok(())
    })
}

/// Mean final accuracy and mean forgetting of a row-major `n_tasks` ×
/// `n_tasks` accuracy matrix (percent). Entries above the diagonal are
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn dscl_metrics(
    matrix: *const f64,
    n_tasks: usize,
    out_mean_acc: *mut f64,
    out_mean_forgetting: *mut f64,
) -> DsclStatus {
    guard(|| {
        if matrix.is_null() {
            return Err(Fail::Null("matrix"));
        }
        let flat = std::slice::from_raw_parts(matrix, n_tasks * n_tasks);
        let rows: Vec<Vec<f64>> = (0..n_tasks)
            .map(|t| flat[t * n_tasks..=t * n_tasks + t].to_vec())
            .collect();
        let m = AccuracyMatrix::from_rows(&rows)?;
        *out_arg(out_mean_acc, "out_mean_acc")? = m.mean_accuracy()?;
        *out_arg(out_mean_forgetting, "out_mean_forgetting")? = m.mean_forgetting()?;
        Ok(())
    })
}

/// Runs a full experiment described by a JSON config (the same format the
/// `dscl` command accepts), writing run directories under its `out_dir`.
/// On success `out_metrics_json` receives a JSON array with one metrics
/// object per seed; free it with [`dscl_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dscl_train_json(config_json: *const c_char, out_metrics_json: *mut *mut c_char) -> DsclStatus {
    guard(|| {
        let s = str_arg(config_json, "config_json")?;
        let out = out_arg(out_metrics_json, "out_metrics_json")?;
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| Fail::Core(Error::Config(format!("experiment config: {e}"))))?;
        let metrics = cmd_train(&cfg)?;
        *out = into_c_string(serde_json::to_string(&metrics).map_err(Error::from)?);
        Ok(())
    })
}
