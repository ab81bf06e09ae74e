//! C ABI over `ctxsql-core`.
//!
//! Every function returns a [`CtxsqlStatus`]. On failure the message is kept
//! per thread and read with [`ctxsql_last_error`]. Strings handed out by the
//! library must be released with [`ctxsql_string_free`], catalogs with
//! [`ctxsql_catalog_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::time::Duration;

use ctxsql_core::corpus::{load_dataset, load_schema_catalog, SchemaCatalog, Split};
use ctxsql_core::eval::{execute_sql, score, ScoreOptions};
use ctxsql_core::pipeline::read_predictions;
use ctxsql_core::promptgen::{render_zero_shot, HistoryItem, RenderOptions};
use ctxsql_core::sqltext::{extract_sql, jaccard, syntax_set};
use ctxsql_core::PromptStyle;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxsqlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    NotFound = 4,
    InvalidInput = 5,
    NoSql = 6,
    Panic = 99,
}

/// Loaded schemas plus the database directory they point at.
pub struct CtxsqlCatalog {
    inner: SchemaCatalog,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(CtxsqlStatus, String);

impl Fail {
    fn new(status: CtxsqlStatus, msg: impl ToString) -> Self {
        Fail(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CtxsqlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtxsqlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CtxsqlStatus::Panic
        }
    }
}

unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(CtxsqlStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(CtxsqlStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::new(CtxsqlStatus::NullArgument, format!("{name} is null")))
}

fn owned(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes replaced").into_raw()
}

unsafe fn handle<'a>(c: *const CtxsqlCatalog) -> Result<&'a SchemaCatalog, Fail> {
    c.as_ref()
        .map(|c| &c.inner)
        .ok_or_else(|| Fail::new(CtxsqlStatus::NullArgument, "catalog is null"))
}

/// Message for the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ctxsql_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ctxsql_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a SParC `tables.json`. With a null `database_dir`, database files
/// are looked up under `database/` next to the tables file.
///
/// # Safety
/// Pointer arguments must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxsql_catalog_load(
    tables_json: *const c_char,
    database_dir: *const c_char,
    out: *mut *mut CtxsqlCatalog,
) -> CtxsqlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = arg(tables_json, "tables_json")?;
        let mut inner = load_schema_catalog(Path::new(path)).map_err(|e| Fail::new(CtxsqlStatus::Io, e))?;
        if !database_dir.is_null() {
            inner = inner.with_database_dir(Path::new(arg(database_dir, "database_dir")?));
        }
        *out = Box::into_raw(Box::new(CtxsqlCatalog { inner }));
        Ok(())
    })
}

/// # Safety
/// `catalog` must come from [`ctxsql_catalog_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ctxsql_catalog_free(catalog: *mut CtxsqlCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Number of databases in the catalog; 0 for null.
///
/// # Safety
/// `catalog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxsql_catalog_len(catalog: *const CtxsqlCatalog) -> usize {
    catalog.as_ref().map_or(0, |c| c.inner.len())
}

/// Zero-shot prompt for `question` against database `db_id` in `style`
/// (BSp, TRp, CRp or ODp), without conversation history.
///
/// # Safety
/// Pointer arguments must be valid; `out` receives a string to free with
/// [`ctxsql_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ctxsql_render_prompt(
    catalog: *const CtxsqlCatalog,
    db_id: *const c_char,
    style: *const c_char,
    question: *const c_char,
    out: *mut *mut c_char,
) -> CtxsqlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cat = handle(catalog)?;
        let db_id = arg(db_id, "db_id")?;
        let schema = cat
            .get(db_id)
            .ok_or_else(|| Fail::new(CtxsqlStatus::NotFound, format!("unknown database `{db_id}`")))?;
        let style: PromptStyle = arg(style, "style")?.parse().map_err(|e| Fail::new(CtxsqlStatus::InvalidInput, e))?;
        let opts = RenderOptions { style, ..RenderOptions::default() };
        let history: [HistoryItem; 0] = [];
        let p = render_zero_shot(schema, &history, arg(question, "question")?, &opts)
            .map_err(|e| Fail::new(CtxsqlStatus::InvalidInput, e))?;
        *out = owned(p.text);
        Ok(())
    })
}

/// Jaccard similarity of the SQL keyword sets of two queries.
///
/// # Safety
/// `sql_a` and `sql_b` must be valid strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxsql_jaccard(sql_a: *const c_char, sql_b: *const c_char, out: *mut f64) -> CtxsqlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let a = syntax_set(arg(sql_a, "sql_a")?).map_err(|e| Fail::new(CtxsqlStatus::InvalidInput, e))?;
        let b = syntax_set(arg(sql_b, "sql_b")?).map_err(|e| Fail::new(CtxsqlStatus::InvalidInput, e))?;
        *out = jaccard(&a, &b);
        Ok(())
    })
}

/// Pulls the SQL statement out of a model response.
///
/// # Safety
/// `raw` must be a valid string; `out` receives a string to free with
/// [`ctxsql_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ctxsql_extract_sql(raw: *const c_char, out: *mut *mut c_char) -> CtxsqlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let sql = extract_sql(arg(raw, "raw")?).map_err(|e| Fail::new(CtxsqlStatus::NoSql, e))?;
        *out = owned(sql);
        Ok(())
    })
}

/// Runs one read-only query and writes the outcome as JSON
/// (`{"status": "rows" | "error" | "timeout", "rows": [...], ...}`).
/// A failing query is still `Ok`; the failure is in the JSON.
///
/// # Safety
/// Pointer arguments must be valid; `out` receives a string to free with
/// [`ctxsql_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ctxsql_execute(
    catalog: *const CtxsqlCatalog,
    db_id: *const c_char,
    sql: *const c_char,
    timeout_ms: u64,
    out: *mut *mut c_char,
) -> CtxsqlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cat = handle(catalog)?;
        let db_id = arg(db_id, "db_id")?;
        let schema = cat
            .get(db_id)
            .ok_or_else(|| Fail::new(CtxsqlStatus::NotFound, format!("unknown database `{db_id}`")))?;
        let outcome = execute_sql(&schema.db_file_path, arg(sql, "sql")?, Duration::from_millis(timeout_ms));
        *out = owned(serde_json::to_string(&outcome).map_err(|e| Fail::new(CtxsqlStatus::Panic, e))?);
        Ok(())
    })
}

/// Scores a predictions JSONL file against a SParC dataset. Writes EX and
/// IX as percentages.
///
/// # Safety
/// Pointer arguments must be valid; `ex` and `ix` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxsql_score(
    catalog: *const CtxsqlCatalog,
    dataset_json: *const c_char,
    predictions_jsonl: *const c_char,
    timeout_ms: u64,
    ex: *mut f64,
    ix: *mut f64,
) -> CtxsqlStatus {
    guard(|| {
        let ex = out_ptr(ex, "ex")?;
        let ix = out_ptr(ix, "ix")?;
        let cat = handle(catalog)?;
        let ds = load_dataset(Path::new(arg(dataset_json, "dataset_json")?), Split::Test)
            .map_err(|e| Fail::new(CtxsqlStatus::Io, e))?;
        let preds = read_predictions(Path::new(arg(predictions_jsonl, "predictions_jsonl")?))
            .map_err(|e| Fail::new(CtxsqlStatus::Io, e))?;
        let opts = ScoreOptions { timeout: Duration::from_millis(timeout_ms), ..ScoreOptions::default() };
        let report = score(&ds, &preds, cat, &opts).map_err(|e| Fail::new(CtxsqlStatus::InvalidInput, e))?;
        *ex = report.ex;
        *ix = report.ix;
        Ok(())
    })
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn ctxsql_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
