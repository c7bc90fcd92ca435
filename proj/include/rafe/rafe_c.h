/* C API for the rafe shared library.
 *
 * All functions return RAFE_OK (0) on success or a negative status code; the
 * message for the most recent failure on the calling thread is available via
 * rafe_last_error(). Objects are opaque handles created and destroyed here.
 * Strings returned through char** out-parameters are heap-allocated and must
 * be released with rafe_string_free().
 */
#ifndef RAFE_C_H
#define RAFE_C_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define RAFE_OK 0
#define RAFE_ERR_INVALID_ARGUMENT (-1)
#define RAFE_ERR_INVALID_STATE (-2)
#define RAFE_ERR_IO (-3)
#define RAFE_ERR_NOT_FOUND (-4)
#define RAFE_ERR_INTERNAL (-5)

typedef int rafe_status;

const char* rafe_version(void);
const char* rafe_last_error(void);
void rafe_string_free(char* s);

/* ---- Pipeline runs -------------------------------------------------- */

typedef struct rafe_run rafe_run;

/* config_path may be NULL (defaults apply); seed < 0 keeps the config seed. */
rafe_status rafe_run_open(const char* config_path, const char* out_dir, int64_t seed,
                          rafe_run** out);
void rafe_run_close(rafe_run* run);

/* Stages: world, index, teacher, split, sft, score, feedback-dpo,
 * feedback-kto, feedback-ppo, eval, sweep. args is a semicolon-separated
 * key=value list (e.g. "checkpoint=sft;mode=expand;order=ranked") or NULL. */
rafe_status rafe_run_stage(rafe_run* run, const char* stage, const char* args);

/* ---- Search index --------------------------------------------------- */

typedef struct rafe_index rafe_index;

rafe_status rafe_index_build_file(const char* documents_jsonl, const char* out_index_path);
rafe_status rafe_index_open(const char* index_path, rafe_index** out);
void rafe_index_close(rafe_index* index);
/* Result is a JSON array of {doc_id, score, rank}. */
rafe_status rafe_index_search(const rafe_index* index, const char* query, int k, char** json_out);

/* ---- Reports --------------------------------------------------------- */

/* Renders the side-by-side comparison of eval report JSON files; one of them
 * must be an OQR baseline. Outputs are optional (NULL skips writing). The
 * plain-text table is returned through table_out when non-NULL. */
rafe_status rafe_report_compare(const char* const* report_paths, size_t n_reports,
                                const char* csv_out_path, const char* text_out_path,
                                char** table_out);

#ifdef __cplusplus
}
#endif

#endif /* RAFE_C_H */
