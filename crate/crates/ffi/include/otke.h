#ifndef OTKE_H
#define OTKE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result codes. Non-zero values match the exit codes of the `otke` binary.
typedef enum OtkeStatus {
  OTKE_STATUS_OK = 0,
  // Null pointer, bad parameter value or undersized output buffer.
  OTKE_STATUS_INVALID_ARGUMENT = 2,
  // File could not be read or is not a valid checkpoint.
  OTKE_STATUS_IO = 3,
  // A NaN or infinity appeared during the computation.
  OTKE_STATUS_NON_FINITE = 4,
  // Input dimensions disagree with the model or with each other.
  OTKE_STATUS_SHAPE = 5,
  // Input exceeds a size limit.
  OTKE_STATUS_TOO_LARGE = 6,
  // The library panicked. This is a bug.
  OTKE_STATUS_INTERNAL = 7,
} OtkeStatus;

// Arithmetic used by [`otke_sinkhorn`].
typedef enum OtkeSinkhornMode {
  OTKE_SINKHORN_MODE_LOG_DOMAIN = 0,
  OTKE_SINKHORN_MODE_STANDARD = 1,
} OtkeSinkhornMode;

// A trained model: Nyström map, references and linear classifier.
typedef struct OtkeModel OtkeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL if it succeeded.
//
// The pointer stays valid until the next call into this library on the
// same thread.
const char *otke_last_error(void);

// Library version as a static NUL-terminated string.
const char *otke_version(void);

// Loads a checkpoint written by `otke fit`.
//
// On success `*out` receives a handle that must be released with
// [`otke_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum OtkeStatus otke_model_load(const char *path, struct OtkeModel **out);

// Releases a model. Passing NULL is a no-op.
//
// # Safety
// `model` must come from [`otke_model_load`] and not be used afterwards.
void otke_model_free(struct OtkeModel *model);

// Feature width `d` expected by the model, 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
uintptr_t otke_model_input_dim(const struct OtkeModel *model);

// Length `q·p·k` of one embedding, 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
uintptr_t otke_model_embedding_dim(const struct OtkeModel *model);

// Number of classifier outputs, 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
uintptr_t otke_model_num_classes(const struct OtkeModel *model);

// Embeds one set of `n` feature vectors of width `d` (row-major `n × d`).
//
// Writes [`otke_model_embedding_dim`] values to `out`; `out_len` is the
// capacity of `out`.
//
// # Safety
// `model` must be a live handle, `features` must hold `n * d` doubles and
// `out` must hold `out_len` doubles.
enum OtkeStatus otke_model_embed(const struct OtkeModel *model,
                                 const double *features,
                                 uintptr_t n,
                                 uintptr_t d,
                                 double *out,
                                 uintptr_t out_len);

// Classifier scores (logits) for one set, [`otke_model_num_classes`] values.
//
// # Safety
// Same contract as [`otke_model_embed`].
enum OtkeStatus otke_model_scores(const struct OtkeModel *model,
                                  const double *features,
                                  uintptr_t n,
                                  uintptr_t d,
                                  double *out,
                                  uintptr_t out_len);

// Entropic transport plan between `n` uniform input points and `p` uniform
// reference points, given their `n × p` similarity matrix.
//
// Runs exactly `iters` Sinkhorn iterations and writes the `n × p` plan
// row-major to `plan`.
//
// # Safety
// `similarity` and `plan` must each hold `n * p` doubles.
enum OtkeStatus otke_sinkhorn(const double *similarity,
                              uintptr_t n,
                              uintptr_t p,
                              double epsilon,
                              uintptr_t iters,
                              enum OtkeSinkhornMode mode,
                              double *plan);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTKE_H */
