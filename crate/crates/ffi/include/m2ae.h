#ifndef M2AE_H
#define M2AE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Values accepted by the `direction` argument of
// [`m2ae_reconstruct_mae`].
typedef enum M2aeDirection {
  M2AE_DIRECTION_ECG_TO_PPG = 0,
  M2AE_DIRECTION_PPG_TO_ECG = 1,
} M2aeDirection;

// Values accepted by the `source` argument of
// [`m2ae_extract_fingerprints`].
typedef enum M2aeSource {
  M2AE_SOURCE_ECG = 0,
  M2AE_SOURCE_PPG = 1,
  M2AE_SOURCE_PAIRED = 2,
} M2aeSource;

// Result of every fallible call.
typedef enum M2aeStatus {
  M2AE_STATUS_OK = 0,
  // A required pointer argument was null.
  M2AE_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  M2AE_STATUS_INVALID_UTF8 = 2,
  // An argument or configuration value was rejected.
  M2AE_STATUS_INVALID_INPUT = 3,
  M2AE_STATUS_IO = 4,
  // A dataset or checkpoint file is malformed.
  M2AE_STATUS_FORMAT = 5,
  // The model lacks an encoder or decoder the call needs.
  M2AE_STATUS_MODALITY_MISMATCH = 6,
  M2AE_STATUS_NON_FINITE = 7,
  // An output buffer is shorter than the data to copy.
  M2AE_STATUS_BUFFER_TOO_SMALL = 8,
  M2AE_STATUS_INTERNAL = 9,
} M2aeStatus;

// Paired ECG/PPG segments.
typedef struct M2aeDataset M2aeDataset;

// Fingerprints keyed by subject and segment.
typedef struct M2aeFingerprints M2aeFingerprints;

// Model parameters loaded from or written to a checkpoint.
typedef struct M2aeModel M2aeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *m2ae_version(void);

// Message of the last failed call on this thread, or null after a
// successful call. The pointer stays valid until the next call into the
// library on this thread.
const char *m2ae_last_error_message(void);

// Synthesizes `subjects × pairs_per_subject` paired segments.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum M2aeStatus m2ae_dataset_generate(uint32_t subjects,
                                      uint32_t pairs_per_subject,
                                      uint64_t seed,
                                      struct M2aeDataset **out);

// Reads a dataset file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum M2aeStatus m2ae_dataset_load(const char *path, struct M2aeDataset **out);

// Writes a dataset file.
//
// # Safety
// `dataset` must be a live handle and `path` a NUL-terminated string.
enum M2aeStatus m2ae_dataset_save(const struct M2aeDataset *dataset, const char *path);

// Number of pairs, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t m2ae_dataset_len(const struct M2aeDataset *dataset);

// Samples per segment, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t m2ae_dataset_segment_len(const struct M2aeDataset *dataset);

// # Safety
// `dataset` must be null or a handle not yet freed.
void m2ae_dataset_free(struct M2aeDataset *dataset);

// Loads the model parameters of a checkpoint; training state is dropped.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum M2aeStatus m2ae_model_load(const char *path, struct M2aeModel **out);

// Writes the model as a parameters-only checkpoint.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum M2aeStatus m2ae_model_save(const struct M2aeModel *model, const char *path);

// Fingerprint width, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t m2ae_model_d_enc(const struct M2aeModel *model);

// True when the model holds both modalities.
//
// # Safety
// `model` must be null or a live handle.
bool m2ae_model_is_cross_modal(const struct M2aeModel *model);

// # Safety
// `model` must be null or a handle not yet freed.
void m2ae_model_free(struct M2aeModel *model);

// Splits `dataset` by subject and pretrains a model. `config` holds run
// config text (`key = value` lines) or is null for defaults. With a
// non-null `out_dir`, the metrics log and checkpoints are written there.
// `out` receives the parameters with the lowest validation loss.
//
// # Safety
// `dataset` must be a live handle, `config` and `out_dir` null or
// NUL-terminated strings, and `out` writable.
enum M2aeStatus m2ae_pretrain(const struct M2aeDataset *dataset,
                              const char *config,
                              const char *out_dir,
                              struct M2aeModel **out);

// Frozen-encoder fingerprints of every pair. `source` takes an
// [`M2aeSource`] value.
//
// # Safety
// `model` and `dataset` must be live handles and `out` writable.
enum M2aeStatus m2ae_extract_fingerprints(const struct M2aeModel *model,
                                          const struct M2aeDataset *dataset,
                                          uint32_t source,
                                          struct M2aeFingerprints **out);

// Number of fingerprint rows, or 0 for a null handle.
//
// # Safety
// `fingerprints` must be null or a live handle.
size_t m2ae_fingerprints_rows(const struct M2aeFingerprints *fingerprints);

// Values per row, or 0 for a null handle.
//
// # Safety
// `fingerprints` must be null or a live handle.
size_t m2ae_fingerprints_dim(const struct M2aeFingerprints *fingerprints);

// Copies all fingerprints row-major into `buffer`, which must hold at
// least `rows × dim` values.
//
// # Safety
// `fingerprints` must be a live handle and `buffer` valid for `len`
// writes.
enum M2aeStatus m2ae_fingerprints_copy(const struct M2aeFingerprints *fingerprints,
                                       double *buffer,
                                       size_t len);

// Subject id and segment index of one row.
//
// # Safety
// `fingerprints` must be a live handle and both outputs writable.
enum M2aeStatus m2ae_fingerprints_key(const struct M2aeFingerprints *fingerprints,
                                      size_t row,
                                      uint32_t *subject_id,
                                      uint32_t *segment_index);

// Writes the fingerprint CSV.
//
// # Safety
// `fingerprints` must be a live handle and `path` a NUL-terminated string.
enum M2aeStatus m2ae_fingerprints_write_csv(const struct M2aeFingerprints *fingerprints,
                                            const char *path);

// # Safety
// `fingerprints` must be null or a handle not yet freed.
void m2ae_fingerprints_free(struct M2aeFingerprints *fingerprints);

// Mean absolute error of fully frozen cross-modal reconstruction over every
// pair. `direction` takes an [`M2aeDirection`] value.
//
// # Safety
// `model` and `dataset` must be live handles and `mae` writable.
enum M2aeStatus m2ae_reconstruct_mae(const struct M2aeModel *model,
                                     const struct M2aeDataset *dataset,
                                     uint32_t direction,
                                     double *mae);

// Area under the ROC curve of `n` scores against 0/1 labels.
//
// # Safety
// `scores` and `labels` must hold `n` elements and `out` be writable.
enum M2aeStatus m2ae_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Area under the precision-recall step curve of `n` scores against 0/1
// labels.
//
// # Safety
// `scores` and `labels` must hold `n` elements and `out` be writable.
enum M2aeStatus m2ae_auprc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* M2AE_H */
