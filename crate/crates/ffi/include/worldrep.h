#ifndef WORLDREP_H
#define WORLDREP_H

/* Generated by cbindgen from worldrep-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum WrStatus {
  WrStatus_Ok = 0,
  WrStatus_NullPointer = 1,
  WrStatus_InvalidArgument = 2,
  WrStatus_Utf8 = 3,
  WrStatus_Io = 4,
  WrStatus_Parse = 5,
  WrStatus_Internal = 6,
} WrStatus;

typedef struct WrExample WrExample;

typedef struct WrModel WrModel;

typedef struct WrTokenizer WrTokenizer;

typedef struct WrWorld WrWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version string (static; do not free).
const char *wr_version(void);

// Copies the last error message for this thread into `buf` (truncating) and
// returns the full message length in bytes, or 0 when no error is recorded.
size_t wr_last_error_message(char *buf, size_t cap);

// Frees a string allocated by this library.
//
// # Safety
// `s` must have been returned by a `wr_*` function and not freed before.
void wr_string_free(char *s);

// Ingests a GeoNames-format TSV, keeping rows with population strictly
// above `min_population`. Ids are not assigned yet.
//
// # Safety
// `path` must be a valid NUL-terminated string, `out` a valid pointer.
enum WrStatus wr_world_ingest(const char *path, int64_t min_population, struct WrWorld **out);

// Loads a saved world file.
//
// # Safety
// `path` must be a valid NUL-terminated string, `out` a valid pointer.
enum WrStatus wr_world_load(const char *path, struct WrWorld **out);

// Saves the world (requires assigned ids).
//
// # Safety
// `world` must be a live handle; `path` a valid NUL-terminated string.
enum WrStatus wr_world_save(const struct WrWorld *world, const char *path);

// Assigns random ids from [0, 9999] in place.
//
// # Safety
// `world` must be a live handle.
enum WrStatus wr_world_assign_ids(struct WrWorld *world, uint64_t seed);

// Samples `count` atlantis cities (Gaussian in degrees around the center)
// and applies the update in place.
//
// # Safety
// `world` must be a live handle.
enum WrStatus wr_world_add_atlantis(struct WrWorld *world,
                                    size_t count,
                                    double center_lon,
                                    double center_lat,
                                    double std_deg,
                                    uint64_t seed);

// Number of cities, or -1 on a null handle.
//
// # Safety
// `world` must be a live handle or null.
int64_t wr_world_city_count(const struct WrWorld *world);

// Number of atlantis cities, or -1 on a null handle.
//
// # Safety
// `world` must be a live handle or null.
int64_t wr_world_atlantis_count(const struct WrWorld *world);

// # Safety
// `world` must be a live handle or null; it is invalid afterwards.
void wr_world_free(struct WrWorld *world);

// Name of compass direction `idx` in the fixed order
// N, NE, E, SE, S, SW, W, NW; null for an invalid index. Do not free.
const char *wr_compass_name(uint8_t idx);

// Name of task kind `idx` in the fixed order distance, triarea, angle,
// compass, inside, perimeter, crossing; null for an invalid index. Do not
// free.
const char *wr_task_name(uint8_t idx);

// Rounded Euclidean distance between two points in scaled units.
//
// # Safety
// `out` must be a valid pointer.
enum WrStatus wr_task_distance(int64_t ax, int64_t ay, int64_t bx, int64_t by, int64_t *out);

// Rounded triangle area (scaled units squared).
//
// # Safety
// `out` must be a valid pointer.
enum WrStatus wr_task_triarea(int64_t ax,
                              int64_t ay,
                              int64_t bx,
                              int64_t by,
                              int64_t cx,
                              int64_t cy,
                              int64_t *out);

// Interior angle at the middle vertex, rounded degrees in [0, 180].
//
// # Safety
// `out` must be a valid pointer.
enum WrStatus wr_task_angle(int64_t ax,
                            int64_t ay,
                            int64_t bx,
                            int64_t by,
                            int64_t cx,
                            int64_t cy,
                            int64_t *out);

// Compass sector of the bearing from a to b; see [`wr_compass_name`].
//
// # Safety
// `out` must be a valid pointer.
enum WrStatus wr_task_compass(int64_t ax, int64_t ay, int64_t bx, int64_t by, uint8_t *out);

// TRUE iff (px, py) lies in the convex hull of `n_pts` points given as
// x0,y0,x1,y1,... Requires at least 3 points.
//
// # Safety
// `pts` must point to `2 * n_pts` values; `out` must be valid.
enum WrStatus wr_task_inside(int64_t px, int64_t py, const int64_t *pts, size_t n_pts, bool *out);

// Rounded perimeter of the closed polygon in the given vertex order.
//
// # Safety
// `pts` must point to `2 * n_pts` values; `out` must be valid.
enum WrStatus wr_task_perimeter(const int64_t *pts, size_t n_pts, int64_t *out);

// TRUE iff closed segments (a, b) and (c, d) intersect.
//
// # Safety
// `out` must be a valid pointer.
enum WrStatus wr_task_crossing(int64_t ax,
                               int64_t ay,
                               int64_t bx,
                               int64_t by,
                               int64_t cx,
                               int64_t cy,
                               int64_t dx,
                               int64_t dy,
                               bool *out);

// Strict parse of one example line; prompt forms (`task(...)=`) parse with
// no answer.
//
// # Safety
// `text` must be a valid NUL-terminated string; `out` a valid pointer.
enum WrStatus wr_parse_example(const char *text, struct WrExample **out);

// Task kind index of a parsed example (see [`wr_task_name`]).
//
// # Safety
// `e` must be a live handle.
uint8_t wr_example_kind(const struct WrExample *e);

// Number of city ids in a parsed example.
//
// # Safety
// `e` must be a live handle.
size_t wr_example_id_count(const struct WrExample *e);

// Copies up to `cap` city ids into `buf`; returns the total id count.
//
// # Safety
// `e` must be a live handle; `buf` must hold `cap` entries.
size_t wr_example_ids(const struct WrExample *e, uint16_t *buf, size_t cap);

// Whether the example carries an answer (prompt forms do not).
//
// # Safety
// `e` must be a live handle.
bool wr_example_has_answer(const struct WrExample *e);

// The answer rendered as text ("769", "NE", "TRUE"); free with
// [`wr_string_free`]. Fails on prompt forms.
//
// # Safety
// `e` must be a live handle; `out` a valid pointer.
enum WrStatus wr_example_answer_text(const struct WrExample *e, char **out);

// # Safety
// `e` must be a live handle or null; it is invalid afterwards.
void wr_example_free(struct WrExample *e);

// Renders an example in the exact wire grammar. `answer` is the answer as
// text ("769", "NE", "TRUE"). Free the result with [`wr_string_free`].
//
// # Safety
// `ids` must point to `n_ids` entries; `answer` must be a valid string;
// `out` a valid pointer.
enum WrStatus wr_render_example(uint8_t kind,
                                const uint16_t *ids,
                                size_t n_ids,
                                const char *answer,
                                char **out);

// The fixed 101-token character tokenizer.
struct WrTokenizer *wr_tokenizer_new(void);

// Encodes `text` as BOS + characters + EOS. Writes up to `cap` ids and
// stores the full length in `out_len`; fails with `InvalidArgument` when
// `cap` is too small (with `out_len` still set).
//
// # Safety
// `tok` must be live; `text` a valid string; `out_ids` must hold `cap`
// entries; `out_len` must be valid.
enum WrStatus wr_tokenizer_encode(const struct WrTokenizer *tok,
                                  const char *text,
                                  uint32_t *out_ids,
                                  size_t cap,
                                  size_t *out_len);

// Decodes ids back to text (BOS skipped, stops at EOS). Free the result
// with [`wr_string_free`].
//
// # Safety
// `tok` must be live; `ids` must hold `len` entries; `out` must be valid.
enum WrStatus wr_tokenizer_decode(const struct WrTokenizer *tok,
                                  const uint32_t *ids,
                                  size_t len,
                                  char **out);

// # Safety
// `tok` must be a live handle or null; it is invalid afterwards.
void wr_tokenizer_free(struct WrTokenizer *tok);

// Writes a pretraining dataset (plus manifest) for the comma-separated
// task list, `rows_per_task` rows each. Policy: 0 exclude, 2 uniform.
//
// # Safety
// `world` must be live; `tasks_csv` and `out_path` valid strings.
enum WrStatus wr_sample_pretrain(const struct WrWorld *world,
                                 const char *tasks_csv,
                                 uint64_t rows_per_task,
                                 uint64_t seed,
                                 uint8_t policy,
                                 const char *out_path);

// Writes an evaluation set for one task. Condition: 0 standard, 1 atlantis.
//
// # Safety
// `world` must be live; `task` and `out_path` valid strings.
enum WrStatus wr_sample_eval(const struct WrWorld *world,
                             const char *task,
                             uint8_t condition,
                             uint64_t rows,
                             uint64_t seed,
                             const char *out_path);

// Normalized improvement. `error_kind` selects the log-ratio form used for
// error metrics; otherwise the affine accuracy form is used.
//
// # Safety
// `out` must be a valid pointer.
enum WrStatus wr_normalized_improvement(double value,
                                        double baseline_atlantis,
                                        double baseline_standard,
                                        bool error_kind,
                                        double *out);

// `NI(Dj u Dk) - max(NI(Dj), NI(Dk))`.
double wr_best_teacher_deviation(double ni_pair, double ni_j, double ni_k);

// Linear-kernel CKA between two row-major matrices over the same `n_rows`
// items (feature widths may differ).
//
// # Safety
// `x` must hold `n_rows * dx` floats, `y` `n_rows * dy`; `out` valid.
enum WrStatus wr_cka(const float *x,
                     const float *y,
                     size_t n_rows,
                     size_t dx,
                     size_t dy,
                     double *out);

// Loads a trained checkpoint (the tokenizer spec inside is verified).
//
// # Safety
// `path` must be a valid string; `out` a valid pointer.
enum WrStatus wr_model_load(const char *path, struct WrModel **out);

// Greedy completion of a text prompt (typically `task(...)=`), decoding
// until EOS or `max_new` tokens. Free the result with [`wr_string_free`].
//
// # Safety
// `model` must be live; `prompt` a valid string; `out` a valid pointer.
enum WrStatus wr_model_generate(const struct WrModel *model,
                                const char *prompt,
                                size_t max_new,
                                char **out);

// # Safety
// `model` must be a live handle or null; it is invalid afterwards.
void wr_model_free(struct WrModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WORLDREP_H */
