#ifndef PMOE_H
#define PMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PmoeStatus {
  PMOE_STATUS_OK = 0,
  PMOE_STATUS_NULL_POINTER = 1,
  PMOE_STATUS_INVALID_ARGUMENT = 2,
  PMOE_STATUS_BUFFER_TOO_SMALL = 3,
  PMOE_STATUS_IO = 4,
  PMOE_STATUS_CORRUPT = 5,
  PMOE_STATUS_INCONSISTENT = 6,
  PMOE_STATUS_DIMENSION = 7,
  PMOE_STATUS_RUNTIME = 8,
  PMOE_STATUS_PANIC = 9,
} PmoeStatus;

typedef enum PmoeMode {
  PMOE_MODE_PMOE = 0,
  PMOE_MODE_LORA_SEQ = 1,
} PmoeMode;

/**
 * A set of adapters (shared LoRA, experts, router).
 */
typedef struct PmoeAdapters PmoeAdapters;

/**
 * A frozen base model.
 */
typedef struct PmoeBase PmoeBase;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated,
 * truncated to `cap`) into `buf`. Returns the full message length
 * including the terminator, so a too-small buffer can be resized.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t pmoe_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pmoe_version(void);

/**
 * Loads a base-model checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PmoeStatus pmoe_base_load(const char *path, struct PmoeBase **out);

/**
 * # Safety
 * `base` must be null or a handle from [`pmoe_base_load`] not yet freed.
 */
void pmoe_base_free(struct PmoeBase *base);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `base` must be null or a live handle.
 */
size_t pmoe_base_vocab_size(const struct PmoeBase *base);

/**
 * Context length, or 0 for a null handle.
 *
 * # Safety
 * `base` must be null or a live handle.
 */
size_t pmoe_base_max_seq_len(const struct PmoeBase *base);

/**
 * Total base parameters, or 0 for a null handle.
 *
 * # Safety
 * `base` must be null or a live handle.
 */
size_t pmoe_base_param_count(const struct PmoeBase *base);

/**
 * Loads an adapter checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PmoeStatus pmoe_adapters_load(const char *path, struct PmoeAdapters **out);

/**
 * # Safety
 * `adapters` must be null or a handle from [`pmoe_adapters_load`] not yet freed.
 */
void pmoe_adapters_free(struct PmoeAdapters *adapters);

/**
 * Expert count (1 for sequential-LoRA sets), or 0 for a null handle.
 *
 * # Safety
 * `adapters` must be null or a live handle.
 */
size_t pmoe_adapters_num_experts(const struct PmoeAdapters *adapters);

/**
 * Forward pass over `len` tokens. Writes `len × vocab` logits row-major
 * into `logits` (capacity `logits_cap` values). When `adapters` is a
 * pmoe set and `gate` is non-null, also writes the `len × experts` gate.
 * `adapters` may be null to run the bare base model.
 *
 * # Safety
 * Pointers must be null or valid for the stated lengths.
 */
enum PmoeStatus pmoe_forward(const struct PmoeBase *base,
                             const struct PmoeAdapters *adapters,
                             const uint32_t *tokens,
                             size_t len,
                             double *logits,
                             size_t logits_cap,
                             double *gate,
                             size_t gate_cap);

/**
 * Greedy continuation of `prompt`: appends argmax tokens (lowest id on
 * ties) until `max_new` tokens, the end-of-sequence token, or the
 * context limit. Writes only the generated tokens to `out` and their
 * count to `*out_len`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `adapters` may be null.
 */
enum PmoeStatus pmoe_greedy_decode(const struct PmoeBase *base,
                                   const struct PmoeAdapters *adapters,
                                   const uint32_t *prompt,
                                   size_t len,
                                   size_t max_new,
                                   uint32_t *out,
                                   size_t out_cap,
                                   size_t *out_len);

/**
 * Trainable adapter parameter count for the given shape (two adapted
 * projections per layer).
 *
 * # Safety
 * `out` must be writable.
 */
enum PmoeStatus pmoe_param_count(size_t num_layers,
                                 size_t d_model,
                                 size_t rank,
                                 size_t tau,
                                 size_t num_experts,
                                 enum PmoeMode mode,
                                 uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMOE_H */
