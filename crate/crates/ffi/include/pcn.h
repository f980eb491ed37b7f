#ifndef PCN_H
#define PCN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Acquisition phase.
typedef enum PcnPhase {
  PCN_PHASE_ARTERIAL = 0,
  PCN_PHASE_VENOUS = 1,
} PcnPhase;

// Status codes returned by every fallible call.
typedef enum PcnStatus {
  PCN_STATUS_OK = 0,
  PCN_STATUS_NULL_POINTER = 1,
  PCN_STATUS_INVALID_ARGUMENT = 2,
  PCN_STATUS_VALIDATION = 3,
  PCN_STATUS_IO = 4,
  PCN_STATUS_FORMAT = 5,
  PCN_STATUS_PREREQUISITE = 6,
  PCN_STATUS_RUNTIME = 7,
  PCN_STATUS_PANIC = 8,
} PcnStatus;

// Opaque dataset handle.
typedef struct PcnDataset PcnDataset;

// Opaque handle to a trained model bundle.
typedef struct PcnModel PcnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call on the same thread.
const char *pcn_last_error(void);

// Library version as a static NUL-terminated string.
const char *pcn_version(void);

// Generates a phantom dataset from a preset name (`default`, `weak_arterial`,
// `weak_venous`, `abnormal`) on a `side` x `side` grid.
//
// # Safety
// `preset` must be a NUL-terminated string and `out` a writable pointer.
enum PcnStatus pcn_dataset_generate(const char *preset,
                                    size_t side,
                                    size_t cases,
                                    uint64_t seed,
                                    struct PcnDataset **out);

// Loads a dataset directory written by `pcn phantom-gen`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a writable pointer.
enum PcnStatus pcn_dataset_load(const char *dir, struct PcnDataset **out);

// Number of cases; 0 for a null handle.
//
// # Safety
// `d` must be null or a handle from this library.
size_t pcn_dataset_len(const struct PcnDataset *d);

// # Safety
// `d` must be null or a handle from this library not yet freed.
void pcn_dataset_free(struct PcnDataset *d);

// Loads a bundle checkpoint (`model.ckpt` of a training run).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PcnStatus pcn_model_load(const char *path, struct PcnModel **out);

// A freshly initialized, untrained bundle for a `side` x `side` grid with
// the default architecture.
//
// # Safety
// `out` must be a writable pointer.
enum PcnStatus pcn_model_init(size_t side, uint64_t seed, struct PcnModel **out);

// # Safety
// `m` must be null or a handle from this library not yet freed.
void pcn_model_free(struct PcnModel *m);

// Segments one `height` x `width` image given in HU, row-major, into
// `labels` (same length). With `fused` nonzero the translated branch is
// averaged in with weight 0.5.
//
// # Safety
// `hu` must point to `height * width` doubles and `labels` to as many bytes.
enum PcnStatus pcn_model_segment(const struct PcnModel *m,
                                 enum PcnPhase phase,
                                 bool fused,
                                 const double *hu,
                                 size_t height,
                                 size_t width,
                                 uint8_t *labels);

// Average DSC of `model` on `data` for one phase. `class` 0 selects the mean
// over foreground classes.
//
// # Safety
// Handles must come from this library; `out` must be writable.
enum PcnStatus pcn_model_evaluate(const struct PcnModel *m,
                                  const struct PcnDataset *d,
                                  enum PcnPhase phase,
                                  bool fused,
                                  uint32_t class_,
                                  double *out);

// DSC of class `class` between two label arrays of length `len`.
//
// # Safety
// `a` and `b` must point to `len` bytes; `out` must be writable.
enum PcnStatus pcn_dsc(const uint8_t *a, const uint8_t *b, size_t len, uint8_t class_, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PCN_H */
