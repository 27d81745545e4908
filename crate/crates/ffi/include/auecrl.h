#ifndef AUECRL_H
#define AUECRL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AuecrlStatus {
  AUECRL_OK = 0,
  AUECRL_ERR_NULL = 1,
  AUECRL_ERR_UTF8 = 2,
  AUECRL_ERR_PARSE = 3,
  AUECRL_ERR_VALIDATION = 4,
  AUECRL_ERR_SHAPE = 5,
  AUECRL_ERR_NUMERICS = 6,
  AUECRL_ERR_CONFIG = 7,
  AUECRL_ERR_FORMAT = 8,
  AUECRL_ERR_IO = 9,
  AUECRL_ERR_PANIC = 10,
} AuecrlStatus;

typedef struct AuecrlDataset AuecrlDataset;

/**
 * Knowledge base plus the prior matrix derived from it.
 */
typedef struct AuecrlKnowledge AuecrlKnowledge;

typedef struct AuecrlModel AuecrlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *auecrl_last_error(void);

/**
 * The built-in knowledge base.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum AuecrlStatus auecrl_knowledge_builtin(struct AuecrlKnowledge **out);

/**
 * Loads a knowledge file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum AuecrlStatus auecrl_knowledge_load(const char *path, struct AuecrlKnowledge **out);

/**
 * # Safety
 * `k` must be null or a handle from this library, not yet freed.
 */
void auecrl_knowledge_free(struct AuecrlKnowledge *k);

/**
 * # Safety
 * `k` must be a live handle.
 */
uintptr_t auecrl_knowledge_n_expressions(const struct AuecrlKnowledge *k);

/**
 * # Safety
 * `k` must be a live handle.
 */
uintptr_t auecrl_knowledge_n_aus(const struct AuecrlKnowledge *k);

/**
 * Copies the `E × A` prior matrix, row-major, into `out` (`len` must be
 * exactly `E * A`).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum AuecrlStatus auecrl_knowledge_prior(const struct AuecrlKnowledge *k,
                                         double *out,
                                         uintptr_t len);

/**
 * Generates a planted synthetic dataset.
 *
 * # Safety
 * `k` must be a live handle; `out` must be writable.
 */
enum AuecrlStatus auecrl_dataset_generate(const struct AuecrlKnowledge *k,
                                          uintptr_t n,
                                          uintptr_t input_dim,
                                          double signal,
                                          double noise,
                                          uint64_t seed,
                                          struct AuecrlDataset **out);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum AuecrlStatus auecrl_dataset_read(const char *path, struct AuecrlDataset **out);

/**
 * # Safety
 * `d` must be a live handle; `path` a nul-terminated string.
 */
enum AuecrlStatus auecrl_dataset_write(const struct AuecrlDataset *d, const char *path);

/**
 * # Safety
 * `d` must be null or a live handle.
 */
uintptr_t auecrl_dataset_len(const struct AuecrlDataset *d);

/**
 * Splits off the samples from `at` onward into a new dataset; `d` keeps
 * the first `at`.
 *
 * # Safety
 * `d` must be a live handle; `tail` must be writable.
 */
enum AuecrlStatus auecrl_dataset_split(struct AuecrlDataset *d,
                                       uintptr_t at,
                                       struct AuecrlDataset **tail);

/**
 * # Safety
 * `d` must be null or a handle from this library, not yet freed.
 */
void auecrl_dataset_free(struct AuecrlDataset *d);

/**
 * A freshly initialized model with default widths.
 *
 * # Safety
 * `k` must be a live handle; `out` must be writable.
 */
enum AuecrlStatus auecrl_model_new(const struct AuecrlKnowledge *k,
                                   uintptr_t input_dim,
                                   uint64_t seed,
                                   struct AuecrlModel **out);

/**
 * Runs stages 1 to 3 with default hyperparameters. `epochs` of 0 keeps
 * the default epoch count.
 *
 * # Safety
 * All handles must be live.
 */
enum AuecrlStatus auecrl_model_train(struct AuecrlModel *m,
                                     const struct AuecrlKnowledge *k,
                                     const struct AuecrlDataset *d,
                                     uintptr_t epochs,
                                     uint64_t seed);

/**
 * Average (mean per-class) and overall accuracy in percent.
 *
 * # Safety
 * Handles must be live; output pointers writable or null.
 */
enum AuecrlStatus auecrl_model_evaluate(const struct AuecrlModel *m,
                                        const struct AuecrlDataset *d,
                                        double *average_acc,
                                        double *overall_acc);

/**
 * Writes the expression distribution for one input into `p_out`.
 *
 * # Safety
 * `x` must point to `x_len` doubles and `p_out` to `p_len` writable doubles.
 */
enum AuecrlStatus auecrl_model_predict(const struct AuecrlModel *m,
                                       const double *x,
                                       uintptr_t x_len,
                                       double *p_out,
                                       uintptr_t p_len);

/**
 * Last completed training stage, 0 for an untrained model.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
uint32_t auecrl_model_stage(const struct AuecrlModel *m);

/**
 * # Safety
 * `m` must be a live handle; `path` a nul-terminated string.
 */
enum AuecrlStatus auecrl_model_save(const struct AuecrlModel *m, const char *path);

/**
 * Loads a checkpoint written for a model with default widths and the
 * given input dimension.
 *
 * # Safety
 * `k` must be a live handle; `path` a nul-terminated string; `out` writable.
 */
enum AuecrlStatus auecrl_model_load(const struct AuecrlKnowledge *k,
                                    const char *path,
                                    uintptr_t input_dim,
                                    struct AuecrlModel **out);

/**
 * # Safety
 * `m` must be null or a handle from this library, not yet freed.
 */
void auecrl_model_free(struct AuecrlModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUECRL_H */
