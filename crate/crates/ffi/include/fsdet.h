/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef FSDET_H
#define FSDET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum FsdetStatus {
  FSDET_STATUS_OK = 0,
  FSDET_STATUS_NULL_ARGUMENT = 1,
  FSDET_STATUS_INVALID_UTF8 = 2,
  FSDET_STATUS_INVALID_ARGUMENT = 3,
  FSDET_STATUS_CONFIG = 4,
  FSDET_STATUS_PROTOCOL = 5,
  FSDET_STATUS_IO = 6,
  FSDET_STATUS_CHECKPOINT = 7,
  FSDET_STATUS_PARSE = 8,
  FSDET_STATUS_PANIC = 9,
} FsdetStatus;

// Which phase a loaded checkpoint finished.
typedef enum FsdetPhase {
  FSDET_PHASE_BASE = 0,
  FSDET_PHASE_FINETUNED = 1,
} FsdetPhase;

// A dataset directory loaded into memory.
typedef struct FsdetDataset FsdetDataset;

// A loaded checkpoint.
typedef struct FsdetDetector FsdetDetector;

// Detection settings; [`fsdet_detect_options_default`] fills the defaults.
typedef struct FsdetDetectOptions {
  double score_threshold;
  double nms_threshold;
  uint32_t max_detections;
} FsdetDetectOptions;

// One detection in image pixel coordinates.
typedef struct FsdetDetection {
  // Index into the detector's class list, see [`fsdet_detector_class_name`].
  uint32_t class_index;
  double score;
  double x1;
  double y1;
  double x2;
  double y2;
} FsdetDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fsdet_version(void);

// Message of the calling thread's last failure, or NULL. Valid until the
// next failing call on the same thread.
const char *fsdet_last_error(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void fsdet_string_free(char *s);

struct FsdetDetectOptions fsdet_detect_options_default(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FsdetStatus fsdet_detector_load(const char *path, struct FsdetDetector **out);

// Releases a detector. NULL is ignored.
//
// # Safety
// `det` must come from [`fsdet_detector_load`] and not have been freed.
void fsdet_detector_free(struct FsdetDetector *det);

// Number of classes the detector can report.
//
// # Safety
// `det` must be a live handle or NULL (which yields 0).
uint32_t fsdet_detector_num_classes(const struct FsdetDetector *det);

// Name of class `index`, owned by the handle; NULL when out of range.
//
// # Safety
// `det` must be a live handle or NULL.
const char *fsdet_detector_class_name(const struct FsdetDetector *det, uint32_t index);

// Phase the checkpoint finished.
//
// # Safety
// `det` must be a live handle; `out` must be writable.
enum FsdetStatus fsdet_detector_phase(const struct FsdetDetector *det, enum FsdetPhase *out);

// Expected input size in pixels.
//
// # Safety
// `det` must be a live handle; `width` and `height` must be writable.
enum FsdetStatus fsdet_detector_input_size(const struct FsdetDetector *det,
                                           uint32_t *width,
                                           uint32_t *height);

// Runs the detector on a packed RGB8 image of `width * height * 3` bytes.
// Up to `capacity` detections, best first, are written to `out`;
// `out_count` receives the total found, which may exceed `capacity`.
// `options` may be NULL for the defaults.
//
// # Safety
// `rgb` must point to `width * height * 3` readable bytes, `out` to
// `capacity` writable elements (or be NULL when `capacity` is 0).
enum FsdetStatus fsdet_detect(const struct FsdetDetector *det,
                              const uint8_t *rgb,
                              uint32_t width,
                              uint32_t height,
                              const struct FsdetDetectOptions *options,
                              struct FsdetDetection *out,
                              size_t capacity,
                              size_t *out_count);

// Loads a dataset directory written by `fsdet gen-data`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum FsdetStatus fsdet_dataset_load(const char *path, struct FsdetDataset **out);

// Releases a dataset. NULL is ignored.
//
// # Safety
// `ds` must come from [`fsdet_dataset_load`] and not have been freed.
void fsdet_dataset_free(struct FsdetDataset *ds);

// Number of images in the dataset.
//
// # Safety
// `ds` must be a live handle or NULL (which yields 0).
size_t fsdet_dataset_len(const struct FsdetDataset *ds);

// Evaluates the detector on a dataset and returns the report as JSON.
// `shots` of 0 records no K in the report.
//
// # Safety
// Handles must be live, `split` NUL-terminated and `out_json` writable.
enum FsdetStatus fsdet_evaluate(const struct FsdetDetector *det,
                                const struct FsdetDataset *ds,
                                const char *split,
                                uint32_t shots,
                                uint64_t seed,
                                char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSDET_H */
