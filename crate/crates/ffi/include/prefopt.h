#ifndef PREFOPT_H
#define PREFOPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrefoptStatus {
  PREFOPT_STATUS_OK = 0,
  PREFOPT_STATUS_NULL_POINTER = 1,
  PREFOPT_STATUS_INVALID_UTF8 = 2,
  PREFOPT_STATUS_CONFIG = 3,
  PREFOPT_STATUS_CONTRACT = 4,
  PREFOPT_STATUS_NUMERIC = 5,
  PREFOPT_STATUS_IO = 6,
  PREFOPT_STATUS_PARSE = 7,
  PREFOPT_STATUS_CHECKPOINT = 8,
  PREFOPT_STATUS_PANIC = 9,
  PREFOPT_STATUS_OTHER = 10,
} PrefoptStatus;

typedef enum PrefoptLossKind {
  PREFOPT_LOSS_KIND_SFT = 0,
  PREFOPT_LOSS_KIND_DPO = 1,
  PREFOPT_LOSS_KIND_DPOP = 2,
  PREFOPT_LOSS_KIND_IPO = 3,
  PREFOPT_LOSS_KIND_SLIC = 4,
} PrefoptLossKind;

typedef enum PrefoptGenerator {
  PREFOPT_GENERATOR_CALC_CHAIN = 0,
  PREFOPT_GENERATOR_MULTIPLE_CHOICE = 1,
} PrefoptGenerator;

/*
 Opaque model handle.
 */
typedef struct PrefoptModel PrefoptModel;

/*
 Model architecture.
 */
typedef struct PrefoptModelConfig {
  uint32_t vocab_size;
  uint32_t d_model;
  uint32_t n_layers;
  uint32_t n_heads;
  uint32_t max_seq_len;
} PrefoptModelConfig;

/*
 Loss selection and scalars.
 */
typedef struct PrefoptLossConfig {
  enum PrefoptLossKind kind;
  double beta;
  double lambda;
  double tau;
  double slic_reg_weight;
} PrefoptLossConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null after a
 success. Valid until the next call on the same thread.
 */
const char *prefopt_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *prefopt_version(void);

/*
 Deterministic fresh initialization.

 # Safety
 `config` must point to a valid config and `out` to writable storage.
 */
enum PrefoptStatus prefopt_model_init(const struct PrefoptModelConfig *config,
                                      uint64_t seed,
                                      struct PrefoptModel **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum PrefoptStatus prefopt_model_load(const char *path, struct PrefoptModel **out);

/*
 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum PrefoptStatus prefopt_model_save(const struct PrefoptModel *model, const char *path);

/*
 A frozen copy usable as the reference policy.

 # Safety
 `model` must be a live handle and `out` writable.
 */
enum PrefoptStatus prefopt_model_snapshot_reference(const struct PrefoptModel *model,
                                                    struct PrefoptModel **out);

/*
 Writes the model's architecture to `out`.

 # Safety
 `model` must be a live handle and `out` writable.
 */
enum PrefoptStatus prefopt_model_config(const struct PrefoptModel *model,
                                        struct PrefoptModelConfig *out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void prefopt_model_free(struct PrefoptModel *model);

/*
 `log π(completion | prompt)` summed over completion tokens.

 # Safety
 Token pointers must reference `*_len` readable values.
 */
enum PrefoptStatus prefopt_completion_log_prob(const struct PrefoptModel *model,
                                               const uint32_t *prompt,
                                               uintptr_t prompt_len,
                                               const uint32_t *completion,
                                               uintptr_t completion_len,
                                               double *out);

/*
 Loss value of one preference pair under `policy`.

 `reference` may be null for SFT and SLiC and must be a frozen snapshot
 otherwise.

 # Safety
 Handles must be live; token pointers must reference `*_len` values.
 */
enum PrefoptStatus prefopt_pair_loss(const struct PrefoptModel *policy,
                                     const struct PrefoptModel *reference,
                                     const struct PrefoptLossConfig *loss,
                                     const uint32_t *prompt,
                                     uintptr_t prompt_len,
                                     const uint32_t *chosen,
                                     uintptr_t chosen_len,
                                     const uint32_t *rejected,
                                     uintptr_t rejected_len,
                                     double *out);

/*
 Closed-form DPOP logit gradient for one position; DPO at `lambda = 0`
 or when `ratio_below_one` is false. Writes `len` values to `out`.

 # Safety
 `s_w`, `s_l` and `out` must reference `len` values each.
 */
enum PrefoptStatus prefopt_dpop_logit_grad(const double *s_w,
                                           const double *s_l,
                                           uintptr_t len,
                                           uintptr_t target_index,
                                           double lambda,
                                           bool ratio_below_one,
                                           double *out);

/*
 Generates `n_pairs` pairs and writes them as JSONL to `path`.

 # Safety
 `path` must be a NUL-terminated string.
 */
enum PrefoptStatus prefopt_forge_jsonl(enum PrefoptGenerator generator,
                                       uintptr_t n_pairs,
                                       uint64_t seed,
                                       const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREFOPT_H */
