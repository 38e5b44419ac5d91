/* C interface to the perturbcert library.
 *
 * All objects are opaque handles released with the matching *_destroy call.
 * Functions return PC_OK on success; on failure the status identifies the
 * error class and pc_last_error() returns a message owned by the calling
 * thread, valid until its next failing call. Strings handed out through
 * `char**` parameters are heap copies released with pc_string_free.
 *
 * Matrices are passed column-major: a d x s batch stores sample j at
 * offset j * d.
 */
#ifndef PERTURBCERT_PERTURBCERT_H
#define PERTURBCERT_PERTURBCERT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PC_API __declspec(dllexport)
#elif defined(__GNUC__)
#define PC_API __attribute__((visibility("default")))
#else
#define PC_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pc_status {
  PC_OK = 0,
  PC_ERR_INVALID_ARGUMENT = 1,
  PC_ERR_TANH_RANGE = 2,
  PC_ERR_RELU_BRANCH = 3,
  PC_ERR_RANK_DEFICIENT = 4,
  PC_ERR_ZERO_GRADIENT = 5,
  PC_ERR_NON_FINITE = 6,
  PC_ERR_DIVERGENCE = 7,
  PC_ERR_SVD = 8,
  PC_ERR_INTERNAL = 100
} pc_status;

typedef struct pc_network pc_network;
typedef struct pc_report pc_report;

PC_API const char* pc_version(void);
PC_API const char* pc_last_error(void);
PC_API const char* pc_status_name(pc_status status);
/* Non-zero for statuses that signal a numerical failure rather than bad input. */
PC_API int pc_status_is_numerical(pc_status status);

PC_API void pc_string_free(char* s);

/* Network handles. `activation` uses the text form, e.g. "leaky_relu:0.1". */
PC_API pc_status pc_network_from_json(const char* json, pc_network** out);
PC_API pc_status pc_network_init(const int64_t* dims, size_t n_dims, const char* activation,
                                 uint64_t seed, pc_network** out);
PC_API pc_status pc_network_to_json(const pc_network* net, char** out);
PC_API void pc_network_destroy(pc_network* net);
PC_API int pc_network_num_layers(const pc_network* net);
PC_API int64_t pc_network_input_dim(const pc_network* net);
PC_API int64_t pc_network_output_dim(const pc_network* net);

/* logits_out must hold output_dim * cols values. */
PC_API pc_status pc_network_forward(const pc_network* net, const double* x, size_t cols,
                                    double* logits_out);

PC_API pc_status pc_margin(const double* logits, size_t classes, size_t true_class,
                           double* gamma_out, size_t* runner_up_out);

PC_API pc_status pc_margin_lipschitz_check(double gamma, double lipschitz, double delta_norm,
                                           double p, double* rhs_out, int* satisfied_out);

/* Power-iteration estimate over all parameters of the listed 1-based layers
 * (n_layers == 0 selects every layer). */
PC_API pc_status pc_estimate_lipschitz(const pc_network* net, const double* x,
                                       const int* layers, size_t n_layers, int iterations,
                                       double epsilon, uint64_t seed, double* sigma_out,
                                       int* converged_out);

/* Runs one experiment command ("flip", "certify", ...) on a JSON config.
 * manifest_json may be NULL. */
PC_API pc_status pc_run_experiment(const char* command, const char* config_json,
                                   const char* manifest_json, pc_report** out);
/* format: "csv", "json" or "dat". */
PC_API pc_status pc_report_render(const pc_report* report, const char* format, char** out);
PC_API size_t pc_report_artifact_count(const pc_report* report);
PC_API pc_status pc_report_artifact(const pc_report* report, size_t index, char** name_out,
                                    char** json_out);
PC_API void pc_report_destroy(pc_report* report);

/* Git blob id of a byte buffer, as 40 lowercase hex characters. */
PC_API pc_status pc_content_hash(const void* bytes, size_t n, char** hex_out);

#ifdef __cplusplus
}
#endif

#endif /* PERTURBCERT_PERTURBCERT_H */
