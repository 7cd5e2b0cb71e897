#ifndef MMGER_H
#define MMGER_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MMGER_STATUS_OK = 0,
  MMGER_STATUS_INVALID_ARGUMENT = 1,
  MMGER_STATUS_INVALID_STATE = 2,
  MMGER_STATUS_IO = 3,
  MMGER_STATUS_CHECKSUM = 4,
  MMGER_STATUS_INTERNAL = 5,
} MmgerStatus;

/**
 * Utterances of one corpus split.
 */
typedef struct MmgerDataset MmgerDataset;

/**
 * A trained model restored from a checkpoint.
 */
typedef struct MmgerModel MmgerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mmger_last_error_message(void);

/**
 * CTC negative log-likelihood of one utterance.
 *
 * `logits` is `frames x classes`, row-major, class 0 is blank. `grad` may be
 * null; otherwise it receives `frames x classes` gradient values. Infeasible
 * targets yield `+inf` and a zero gradient.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
MmgerStatus mmger_ctc_loss(const double *logits,
                           uintptr_t frames,
                           uintptr_t classes,
                           const uint32_t *target,
                           uintptr_t target_len,
                           double *out_loss,
                           double *grad);

/**
 * Collapses repeats then removes blanks. `out` needs room for `len` symbols.
 *
 * # Safety
 * `labels` must hold `len` values and `out` must hold `capacity`.
 */
MmgerStatus mmger_regularize(const uint32_t *labels,
                             uintptr_t len,
                             uint32_t *out,
                             uintptr_t capacity,
                             uintptr_t *out_len);

/**
 * Character error rate; the reference must be nonempty.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
MmgerStatus mmger_cer(const uint32_t *hyp,
                      uintptr_t hyp_len,
                      const uint32_t *reference,
                      uintptr_t ref_len,
                      double *out);

/**
 * Writes a synthetic corpus into `out_dir`. `config_path` may be null for
 * defaults; otherwise it names a run configuration whose `synthdata` section is used.
 *
 * # Safety
 * Strings must be NUL-terminated.
 */
MmgerStatus mmger_generate_corpus(const char *config_path, const char *out_dir);

/**
 * Loads one split of a corpus (directory or manifest path).
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
MmgerStatus mmger_dataset_open(const char *corpus, const char *split, MmgerDataset **out);

/**
 * # Safety
 * `ds` must come from `mmger_dataset_open` (or be null).
 */
uintptr_t mmger_dataset_len(const MmgerDataset *ds);

/**
 * Accent label and frame count of utterance `index`.
 *
 * # Safety
 * `ds` must be a live dataset handle; outputs may be null.
 */
MmgerStatus mmger_dataset_info(const MmgerDataset *ds,
                               uintptr_t index,
                               uintptr_t *out_accent,
                               uintptr_t *out_frames);

/**
 * Reference transcript of utterance `index`; `out_len` receives the required
 * length even when `capacity` is too small.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` must hold `capacity` values.
 */
MmgerStatus mmger_dataset_transcript(const MmgerDataset *ds,
                                     uintptr_t index,
                                     uint32_t *out,
                                     uintptr_t capacity,
                                     uintptr_t *out_len);

/**
 * # Safety
 * `ds` must come from `mmger_dataset_open` and not be used afterwards.
 */
void mmger_dataset_free(MmgerDataset *ds);

/**
 * Restores a trained model; `lm_path` is the frozen LM it was trained against.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
MmgerStatus mmger_model_open(const char *checkpoint_path, const char *lm_path, MmgerModel **out);

/**
 * Corrected transcription and predicted accent of utterance `index`.
 * `out_accent` may be null; it receives `SIZE_MAX` when the model has no accent head.
 *
 * # Safety
 * Handles must be live; `out` must hold `capacity` values.
 */
MmgerStatus mmger_model_decode(const MmgerModel *model,
                               const MmgerDataset *ds,
                               uintptr_t index,
                               uint32_t *out,
                               uintptr_t capacity,
                               uintptr_t *out_len,
                               uintptr_t *out_accent);

/**
 * # Safety
 * `model` must come from `mmger_model_open` and not be used afterwards.
 */
void mmger_model_free(MmgerModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMGER_H */
