#ifndef CTXSQL_H
#define CTXSQL_H

#pragma once

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtxsqlStatus {
  CTXSQL_STATUS_OK = 0,
  CTXSQL_STATUS_NULL_ARGUMENT = 1,
  CTXSQL_STATUS_INVALID_UTF8 = 2,
  CTXSQL_STATUS_IO = 3,
  CTXSQL_STATUS_NOT_FOUND = 4,
  CTXSQL_STATUS_INVALID_INPUT = 5,
  CTXSQL_STATUS_NO_SQL = 6,
  CTXSQL_STATUS_PANIC = 99,
} CtxsqlStatus;

/**
 * Loaded schemas plus the database directory they point at.
 */
typedef struct CtxsqlCatalog CtxsqlCatalog;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Owned by the
 * library and valid until the next call on the same thread.
 */
const char *ctxsql_last_error(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ctxsql_string_free(char *s);

/**
 * Loads a SParC `tables.json`. With a null `database_dir`, database files
 * are looked up under `database/` next to the tables file.
 *
 * # Safety
 * Pointer arguments must be valid NUL-terminated strings; `out` must be writable.
 */
enum CtxsqlStatus ctxsql_catalog_load(const char *tables_json,
                                      const char *database_dir,
                                      struct CtxsqlCatalog **out);

/**
 * # Safety
 * `catalog` must come from [`ctxsql_catalog_load`] and not be freed twice.
 */
void ctxsql_catalog_free(struct CtxsqlCatalog *catalog);

/**
 * Number of databases in the catalog; 0 for null.
 *
 * # Safety
 * `catalog` must be null or a live handle.
 */
size_t ctxsql_catalog_len(const struct CtxsqlCatalog *catalog);

/**
 * Zero-shot prompt for `question` against database `db_id` in `style`
 * (BSp, TRp, CRp or ODp), without conversation history.
 *
 * # Safety
 * Pointer arguments must be valid; `out` receives a string to free with
 * [`ctxsql_string_free`].
 */
enum CtxsqlStatus ctxsql_render_prompt(const struct CtxsqlCatalog *catalog,
                                       const char *db_id,
                                       const char *style,
                                       const char *question,
                                       char **out);

/**
 * Jaccard similarity of the SQL keyword sets of two queries.
 *
 * # Safety
 * `sql_a` and `sql_b` must be valid strings; `out` must be writable.
 */
enum CtxsqlStatus ctxsql_jaccard(const char *sql_a, const char *sql_b, double *out);

/**
 * Pulls the SQL statement out of a model response.
 *
 * # Safety
 * `raw` must be a valid string; `out` receives a string to free with
 * [`ctxsql_string_free`].
 */
enum CtxsqlStatus ctxsql_extract_sql(const char *raw, char **out);

/**
 * Runs one read-only query and writes the outcome as JSON
 * (`{"status": "rows" | "error" | "timeout", "rows": [...], ...}`).
 * A failing query is still `Ok`; the failure is in the JSON.
 *
 * # Safety
 * Pointer arguments must be valid; `out` receives a string to free with
 * [`ctxsql_string_free`].
 */
enum CtxsqlStatus ctxsql_execute(const struct CtxsqlCatalog *catalog,
                                 const char *db_id,
                                 const char *sql,
                                 uint64_t timeout_ms,
                                 char **out);

/**
 * Scores a predictions JSONL file against a SParC dataset. Writes EX and
 * IX as percentages.
 *
 * # Safety
 * Pointer arguments must be valid; `ex` and `ix` must be writable.
 */
enum CtxsqlStatus ctxsql_score(const struct CtxsqlCatalog *catalog,
                               const char *dataset_json,
                               const char *predictions_jsonl,
                               uint64_t timeout_ms,
                               double *ex,
                               double *ix);

/**
 * Library version, statically allocated.
 */
const char *ctxsql_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXSQL_H */
