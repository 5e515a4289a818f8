#ifndef PTA_H
#define PTA_H

/* Generated by cbindgen from the pta-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of any C-visible call.
typedef enum PtaStatus {
  PTA_STATUS_OK = 0,
  PTA_STATUS_NULL_POINTER = 1,
  PTA_STATUS_INVALID_UTF8 = 2,
  PTA_STATUS_INVALID_ARGUMENT = 3,
  PTA_STATUS_INVALID_CONFIG = 4,
  PTA_STATUS_SHAPE_MISMATCH = 5,
  PTA_STATUS_NOT_FOUND = 6,
  PTA_STATUS_NUMERIC_ERROR = 7,
  PTA_STATUS_CORRUPT_ARTIFACT = 8,
  PTA_STATUS_IO_ERROR = 9,
  PTA_STATUS_JSON_ERROR = 10,
  PTA_STATUS_RENDER_ERROR = 11,
  PTA_STATUS_PANIC = 12,
} PtaStatus;

// Opaque dataset handle.
typedef struct PtaDataset {
  uint8_t _private[0];
} PtaDataset;

// Opaque trained-run handle.
typedef struct PtaRun {
  uint8_t _private[0];
} PtaRun;

// Returns the library version as a static NUL-terminated string.
const char *pta_version(void);

// Returns the message for the most recent failure on this thread. The
// pointer stays valid until the next failing call on the same thread.
const char *pta_last_error(void);

// Generates a dataset from an experiment-config JSON string and stores the
// new handle in `out`.
//
// # Safety
// `config_json` must be a valid NUL-terminated string and `out` a valid
// pointer; the returned handle must be released with [`pta_dataset_free`].
enum PtaStatus pta_dataset_generate(const char *config_json, struct PtaDataset **out);

// Releases a dataset handle. Null is a no-op.
//
// # Safety
// `ptr` must be null or a handle from [`pta_dataset_generate`], released
// at most once.
void pta_dataset_free(struct PtaDataset *ptr);

// Writes the train/val/test sample counts of a dataset.
//
// # Safety
// All pointers must be valid; `ptr` must be a live dataset handle.
enum PtaStatus pta_dataset_sizes(const struct PtaDataset *ptr,
                                 size_t *train,
                                 size_t *val,
                                 size_t *test);

// Trains a model to completion from an experiment-config JSON string under
// the given seed, reusing `dataset` if non-null (it must have been generated
// from the same data config) and regenerating it otherwise.
//
// # Safety
// `config_json` and `out` must be valid pointers; `dataset` must be null or
// a live dataset handle. Release the result with [`pta_run_free`].
enum PtaStatus pta_train(const char *config_json,
                         uint64_t seed,
                         const struct PtaDataset *dataset,
                         struct PtaRun **out);

// Releases a run handle. Null is a no-op.
//
// # Safety
// `ptr` must be null or a handle from [`pta_train`]/[`pta_run_load`],
// released at most once.
void pta_run_free(struct PtaRun *ptr);

// Serializes a run to the given file path (JSON).
//
// # Safety
// `run` must be a live run handle; `path` a valid NUL-terminated string.
enum PtaStatus pta_run_save(const struct PtaRun *run, const char *path);

// Loads a run previously written by [`pta_run_save`].
//
// # Safety
// `path` and `out` must be valid pointers. Release the result with
// [`pta_run_free`].
enum PtaStatus pta_run_load(const char *path, struct PtaRun **out);

// Number of modalities the run was trained over.
//
// # Safety
// `run` must be a live run handle and `out` a valid pointer.
enum PtaStatus pta_run_n_modalities(const struct PtaRun *run, size_t *out);

// Writes the learned normalized fusion weights, in modality order, into a
// caller-owned buffer of length `len` (which must equal the modality count).
//
// # Safety
// `run` must be a live run handle and `out` valid for `len` writes.
enum PtaStatus pta_run_weights(const struct PtaRun *run, double *out, size_t len);

// Evaluates a run on the test split of `dataset` over a comma-separated
// modality subset, writing the task metric to `out`.
//
// # Safety
// `run` and `dataset` must be live handles; `subset` a valid NUL-terminated
// string; `out` a valid pointer.
enum PtaStatus pta_evaluate_subset(const struct PtaRun *run,
                                   const struct PtaDataset *dataset,
                                   const char *subset,
                                   double *out);

#endif /* PTA_H */
