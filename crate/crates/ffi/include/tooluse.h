#ifndef TOOLUSE_H
#define TOOLUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum TuStatus {
  TU_STATUS_OK = 0,
  TU_STATUS_NULL_ARGUMENT = 1,
  TU_STATUS_INVALID_UTF8 = 2,
  TU_STATUS_INVALID_JSON = 3,
  TU_STATUS_MALFORMED = 4,
  TU_STATUS_ARITY_MISMATCH = 5,
  TU_STATUS_REGISTRY = 6,
  TU_STATUS_EMPTY_EVAL_SET = 7,
  TU_STATUS_IO = 8,
  TU_STATUS_INTERNAL = 99,
} TuStatus;

// Opaque tool registry.
typedef struct TuRegistry TuRegistry;

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *tu_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void tu_string_free(char *s);

// Library version as a static string.
const char *tu_version(void);

// The built-in 31-tool registry.
struct TuRegistry *tu_registry_builtin(void);

// Loads a registry from a TOML tool file.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
enum TuStatus tu_registry_load(const char *path, struct TuRegistry **out);

// Builds a registry from TOML text.
//
// # Safety
// `text` must be a valid C string; `out` must be writable.
enum TuStatus tu_registry_from_toml(const char *text, struct TuRegistry **out);

// Releases a registry. Null is ignored.
//
// # Safety
// `r` must come from a `tu_registry_*` constructor and not have been freed.
void tu_registry_free(struct TuRegistry *r);

// Number of tools, or 0 for null.
//
// # Safety
// `r` must be null or a live registry handle.
size_t tu_registry_len(const struct TuRegistry *r);

// Argument count of `tool`.
//
// # Safety
// Pointers must be valid; `out` must be writable.
enum TuStatus tu_registry_arity(const struct TuRegistry *r, const char *tool, size_t *out);

// Tool definition block, one `Name: usage` line per tool. `tools_json` is a
// JSON array of names, or null for every tool.
//
// # Safety
// Pointers must be valid; `out` must be writable.
enum TuStatus tu_tool_definitions(const struct TuRegistry *r, const char *tools_json, char **out);

// Tool-usage prompt for an evaluation record given as JSON.
//
// # Safety
// Pointers must be valid; `out` must be writable.
enum TuStatus tu_tool_usage_prompt(const struct TuRegistry *r, const char *record_json, char **out);

// Parses transcript text into its JSON form
// `{"steps": [...], "terminated": bool}`.
//
// # Safety
// `text` must be a valid C string; `out` must be writable.
enum TuStatus tu_parse_transcript(const char *text, char **out);

// Writes a JSON transcript back as keyword lines.
//
// # Safety
// `json` must be a valid C string; `out` must be writable.
enum TuStatus tu_serialize_transcript(const char *json, char **out);

// Splits an action input into `arity` arguments, returned as a JSON array.
//
// # Safety
// `raw` must be a valid C string; `out` must be writable.
enum TuStatus tu_split_arguments(const char *raw, size_t arity, char **out);

// BLEU of `candidate` against `reference`.
//
// # Safety
// Strings must be valid; `out` must be writable.
enum TuStatus tu_bleu(const char *candidate, const char *reference, double *out);

// Token LCS similarity of two instructions.
//
// # Safety
// Strings must be valid; `out` must be writable.
enum TuStatus tu_lcs_similarity(const char *a, const char *b, double *out);

// Scores model output text against an evaluation record. `options_json`
// may be null for defaults (`{"path_mode": "filename", "no_tool_policy":
// "vacuous"}`). The score is returned as JSON.
//
// # Safety
// Pointers must be valid (options may be null); `out` must be writable.
enum TuStatus tu_score_prediction(const struct TuRegistry *r,
                                  const char *record_json,
                                  const char *prediction,
                                  const char *options_json,
                                  char **out);

// Aggregates a JSON array of sample scores into a report (rates,
// per-tool table, seen/unseen split; the per-sample list is left out).
//
// # Safety
// Pointers must be valid (options may be null); `out` must be writable.
enum TuStatus tu_aggregate(const struct TuRegistry *r,
                           const char *scores_json,
                           const char *options_json,
                           char **out);

#endif  /* TOOLUSE_H */
