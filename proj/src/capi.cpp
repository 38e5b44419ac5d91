#include "perturbcert/perturbcert.h"

#include <cstring>
#include <exception>
#include <iterator>
#include <new>
#include <string>

#include "perturbcert/errors.hpp"
#include "perturbcert/experiments.hpp"
#include "perturbcert/lipschitz.hpp"
#include "perturbcert/margin.hpp"
#include "perturbcert/network.hpp"

#ifndef PERTURBCERT_VERSION
#define PERTURBCERT_VERSION "0.0.0"
#endif

struct pc_network {
  perturbcert::Network net;
};

struct pc_report {
  perturbcert::Report report;
};

namespace {

thread_local std::string g_last_error;

pc_status status_of(perturbcert::ErrorCode c) {
  using perturbcert::ErrorCode;
  switch (c) {
    case ErrorCode::kInvalidArgument: return PC_ERR_INVALID_ARGUMENT;
    case ErrorCode::kTanhRange: return PC_ERR_TANH_RANGE;
    case ErrorCode::kReluBranch: return PC_ERR_RELU_BRANCH;
    case ErrorCode::kRankDeficientDownstream: return PC_ERR_RANK_DEFICIENT;
    case ErrorCode::kZeroGradient: return PC_ERR_ZERO_GRADIENT;
    case ErrorCode::kNonFiniteLoss: return PC_ERR_NON_FINITE;
    case ErrorCode::kDivergence: return PC_ERR_DIVERGENCE;
    case ErrorCode::kSvdNonConvergence: return PC_ERR_SVD;
  }
  return PC_ERR_INTERNAL;
}

pc_status fail(pc_status s, const char* msg) {
  g_last_error = msg;
  return s;
}

template <typename Fn>
pc_status guarded(Fn&& fn) {
  try {
    fn();
    return PC_OK;
  } catch (const perturbcert::Error& e) {
    return fail(status_of(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(PC_ERR_INVALID_ARGUMENT, e.what());
  } catch (const std::bad_alloc&) {
    return fail(PC_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(PC_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(PC_ERR_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(bool ok, const char* what) {
  if (!ok) throw perturbcert::InvalidArgument(what);
}

}  // namespace

extern "C" {

const char* pc_version(void) { return PERTURBCERT_VERSION; }

const char* pc_last_error(void) { return g_last_error.c_str(); }

const char* pc_status_name(pc_status status) {
  switch (status) {
    case PC_OK: return "ok";
    case PC_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case PC_ERR_TANH_RANGE: return "tanh_range";
    case PC_ERR_RELU_BRANCH: return "relu_branch";
    case PC_ERR_RANK_DEFICIENT: return "rank_deficient_downstream";
    case PC_ERR_ZERO_GRADIENT: return "zero_gradient";
    case PC_ERR_NON_FINITE: return "non_finite_loss";
    case PC_ERR_DIVERGENCE: return "divergence";
    case PC_ERR_SVD: return "svd_non_convergence";
    case PC_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

int pc_status_is_numerical(pc_status status) {
  return status != PC_OK && status != PC_ERR_INVALID_ARGUMENT && status != PC_ERR_INTERNAL;
}

void pc_string_free(char* s) { std::free(s); }

pc_status pc_network_from_json(const char* json, pc_network** out) {
  return guarded([&] {
    require(json != nullptr && out != nullptr, "null argument");
    *out = nullptr;
    auto doc = nlohmann::json::parse(json);
    *out = new pc_network{perturbcert::network_from_json(doc)};
  });
}

pc_status pc_network_init(const int64_t* dims, size_t n_dims, const char* activation,
                          uint64_t seed, pc_network** out) {
  return guarded([&] {
    require(dims != nullptr && activation != nullptr && out != nullptr, "null argument");
    *out = nullptr;
    std::vector<perturbcert::Index> d(dims, dims + n_dims);
    *out = new pc_network{perturbcert::init_network(
        d, perturbcert::Activation::parse(activation), seed)};
  });
}

pc_status pc_network_to_json(const pc_network* net, char** out) {
  return guarded([&] {
    require(net != nullptr && out != nullptr, "null argument");
    *out = dup_string(perturbcert::network_to_json(net->net).dump());
  });
}

void pc_network_destroy(pc_network* net) { delete net; }

int pc_network_num_layers(const pc_network* net) {
  return net == nullptr ? 0 : net->net.num_layers();
}

int64_t pc_network_input_dim(const pc_network* net) {
  return net == nullptr ? 0 : net->net.input_dim();
}

int64_t pc_network_output_dim(const pc_network* net) {
  return net == nullptr ? 0 : net->net.output_dim();
}

pc_status pc_network_forward(const pc_network* net, const double* x, size_t cols,
                             double* logits_out) {
  return guarded([&] {
    require(net != nullptr && x != nullptr && logits_out != nullptr, "null argument");
    const auto d = net->net.input_dim();
    const Eigen::Map<const perturbcert::Matrix> xm(x, d, static_cast<Eigen::Index>(cols));
    const perturbcert::Matrix y = perturbcert::forward(net->net, xm);
    std::memcpy(logits_out, y.data(), sizeof(double) * static_cast<size_t>(y.size()));
  });
}

pc_status pc_margin(const double* logits, size_t classes, size_t true_class,
                    double* gamma_out, size_t* runner_up_out) {
  return guarded([&] {
    require(logits != nullptr && gamma_out != nullptr, "null argument");
    const Eigen::Map<const perturbcert::Vector> v(logits, static_cast<Eigen::Index>(classes));
    const auto m = perturbcert::margin(v, static_cast<perturbcert::Index>(true_class));
    *gamma_out = m.gamma;
    if (runner_up_out != nullptr) *runner_up_out = static_cast<size_t>(m.runner_up);
  });
}

pc_status pc_margin_lipschitz_check(double gamma, double lipschitz, double delta_norm,
                                    double p, double* rhs_out, int* satisfied_out) {
  return guarded([&] {
    const auto b = perturbcert::margin_lipschitz_check(gamma, lipschitz, delta_norm, p);
    if (rhs_out != nullptr) *rhs_out = b.rhs;
    if (satisfied_out != nullptr) *satisfied_out = b.satisfied ? 1 : 0;
  });
}

pc_status pc_estimate_lipschitz(const pc_network* net, const double* x, const int* layers,
                                size_t n_layers, int iterations, double epsilon,
                                uint64_t seed, double* sigma_out, int* converged_out) {
  return guarded([&] {
    require(net != nullptr && x != nullptr && sigma_out != nullptr, "null argument");
    require(n_layers == 0 || layers != nullptr, "null layer list");
    const perturbcert::Vector xv =
        Eigen::Map<const perturbcert::Vector>(x, net->net.input_dim());
    const auto subset =
        n_layers == 0 ? perturbcert::ParamSubset::full(net->net)
                      : perturbcert::ParamSubset::layers(
                            net->net, std::vector<int>(layers, layers + n_layers));
    const auto e = perturbcert::estimate_lipschitz(net->net, xv, subset, iterations, epsilon, seed);
    *sigma_out = e.sigma_hat;
    if (converged_out != nullptr) *converged_out = e.converged ? 1 : 0;
  });
}

pc_status pc_run_experiment(const char* command, const char* config_json,
                            const char* manifest_json, pc_report** out) {
  return guarded([&] {
    require(command != nullptr && config_json != nullptr && out != nullptr, "null argument");
    *out = nullptr;
    nlohmann::json cfg;
    try {
      cfg = nlohmann::json::parse(config_json);
    } catch (const nlohmann::json::exception& e) {
      throw perturbcert::InvalidArgument(std::string("config is not valid JSON: ") + e.what());
    }
    const nlohmann::json manifest =
        manifest_json == nullptr ? nlohmann::json::object() : nlohmann::json::parse(manifest_json);
    *out = new pc_report{perturbcert::run_experiment(command, cfg, manifest)};
  });
}

pc_status pc_report_render(const pc_report* report, const char* format, char** out) {
  return guarded([&] {
    require(report != nullptr && format != nullptr && out != nullptr, "null argument");
    const std::string f = format;
    if (f == "csv") {
      *out = dup_string(perturbcert::render_csv(report->report));
    } else if (f == "json") {
      *out = dup_string(perturbcert::render_json(report->report));
    } else if (f == "dat") {
      *out = dup_string(perturbcert::render_dat(report->report));
    } else {
      throw perturbcert::InvalidArgument("unknown report format '" + f + "'");
    }
  });
}

size_t pc_report_artifact_count(const pc_report* report) {
  return report == nullptr ? 0 : report->report.artifacts.size();
}

pc_status pc_report_artifact(const pc_report* report, size_t index, char** name_out,
                             char** json_out) {
  return guarded([&] {
    require(report != nullptr && name_out != nullptr && json_out != nullptr, "null argument");
    require(index < report->report.artifacts.size(), "artifact index out of range");
    auto it = report->report.artifacts.begin();
    std::advance(it, static_cast<long>(index));
    *name_out = dup_string(it->first);
    try {
      *json_out = dup_string(it->second.dump());
    } catch (...) {
      std::free(*name_out);
      *name_out = nullptr;
      throw;
    }
  });
}

void pc_report_destroy(pc_report* report) { delete report; }

pc_status pc_content_hash(const void* bytes, size_t n, char** hex_out) {
  return guarded([&] {
    require((bytes != nullptr || n == 0) && hex_out != nullptr, "null argument");
    *hex_out = dup_string(perturbcert::git_blob_hash(
        std::string_view(static_cast<const char*>(bytes), n)));
  });
}

}  // extern "C"
