#ifndef COMPGEN_H
#define COMPGEN_H

/* Generated by cbindgen from compgen-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum CompgenStatus {
  CompgenStatus_Ok = 0,
  CompgenStatus_NullPointer = 1,
  CompgenStatus_InvalidArgument = 2,
  CompgenStatus_InvalidJson = 3,
  CompgenStatus_ShapeMismatch = 4,
  CompgenStatus_Infeasible = 5,
  CompgenStatus_NumericError = 6,
  CompgenStatus_IoError = 7,
  CompgenStatus_Utf8Error = 8,
  CompgenStatus_InternalError = 9,
} CompgenStatus;

// Opaque compiled-network handle.
typedef struct CompgenNet CompgenNet;

// Opaque teacher handle.
typedef struct CompgenTeacher CompgenTeacher;

// Family dimensions of a teacher handle.
typedef struct CompgenTeacherInfo {
  size_t module_count;
  size_t max_active;
  size_t input_dim;
  size_t hidden_dim;
  size_t output_dim;
  uint64_t family_seed;
} CompgenTeacherInfo;

// Compilation metadata for a constructed network.
typedef struct CompgenNetInfo {
  double epsilon;
  size_t knots;
  size_t hidden_neurons;
  double analytic_bound;
  size_t input_dim;
  size_t output_dim;
} CompgenNetInfo;

// Verification summary for a compiled network.
typedef struct CompgenVerifyReport {
  size_t samples;
  double sup_error;
  double mean_error;
  size_t neuron_count;
  double analytic_bound;
} CompgenVerifyReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message for this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length in bytes.
//
// # Safety
// `buf` must point to at least `cap` writable bytes, or be NULL (then only
// the required length is returned).
size_t compgen_last_error(char *buf, size_t cap);

// Static library version string; do not free.
const char *compgen_version(void);

// Release a string allocated by this library.
//
// # Safety
// `s` must have been returned through a `char**` out-parameter of this
// library and not freed before.
void compgen_string_free(char *s);

// Generate a teacher from a family-config JSON document
// (`{"module_count": .., "max_active": .., "input_dim": .., "hidden_dim": ..,
// "output_dim": .., "magnitude_grid": [..], "family_seed": ..}`).
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum CompgenStatus compgen_teacher_generate(const char *config_json, struct CompgenTeacher **out);

// Load a teacher from its JSON file contents.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum CompgenStatus compgen_teacher_from_json(const char *json, struct CompgenTeacher **out);

// Serialize a teacher to JSON; release via `compgen_string_free`.
//
// # Safety
// `teacher` must be a live handle from this library; `out_json` valid.
enum CompgenStatus compgen_teacher_to_json(const struct CompgenTeacher *teacher, char **out_json);

// Family dimensions of a teacher.
//
// # Safety
// Both pointers must be valid.
enum CompgenStatus compgen_teacher_info(const struct CompgenTeacher *teacher,
                                        struct CompgenTeacherInfo *out);

// Evaluate the composed task function. `magnitudes` has one entry per module
// (zero = inactive, nonzero entries must sit on the family's magnitude grid)
// and `out` receives `output_dim` values.
//
// # Safety
// `magnitudes`, `x` and `out` must point to buffers of the stated lengths.
enum CompgenStatus compgen_teacher_eval(const struct CompgenTeacher *teacher,
                                        const double *magnitudes,
                                        size_t magnitudes_len,
                                        const double *x,
                                        size_t x_len,
                                        double *out,
                                        size_t out_len);

// # Safety
// `teacher` must be a live handle; passing NULL is a no-op.
void compgen_teacher_free(struct CompgenTeacher *teacher);

// Compile a teacher into an explicit ReLU network meeting `epsilon` in the
// sup norm.
//
// # Safety
// `teacher` must be a live handle and `out` a valid pointer.
enum CompgenStatus compgen_construct_build(const struct CompgenTeacher *teacher,
                                           double epsilon,
                                           struct CompgenNet **out);

// Compilation metadata.
//
// # Safety
// Both pointers must be valid.
enum CompgenStatus compgen_net_info(const struct CompgenNet *net, struct CompgenNetInfo *out);

// Forward one input through the compiled network. The input is the
// concatenation of x (input_dim) and the magnitudes vector (module_count).
//
// # Safety
// `input` and `out` must point to buffers of the stated lengths.
enum CompgenStatus compgen_net_forward(const struct CompgenNet *net,
                                       const double *input,
                                       size_t input_len,
                                       double *out,
                                       size_t out_len);

// Sample (z, x) pairs and report the sup/mean deviation from the teacher.
//
// # Safety
// All handles must be live; `out` must be a valid pointer.
enum CompgenStatus compgen_net_verify(const struct CompgenNet *net,
                                      const struct CompgenTeacher *teacher,
                                      size_t samples,
                                      uint64_t seed,
                                      struct CompgenVerifyReport *out);

// # Safety
// `net` must be a live handle; passing NULL is a no-op.
void compgen_net_free(struct CompgenNet *net);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* COMPGEN_H */
