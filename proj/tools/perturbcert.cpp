// Command-line front end. Links only the C API.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "perturbcert/perturbcert.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ApiError : std::runtime_error {
  ApiError(pc_status s, const std::string& what) : std::runtime_error(what), status(s) {}
  pc_status status;
};

void check(pc_status s) {
  if (s != PC_OK) throw ApiError(s, pc_last_error());
}

struct StringDeleter {
  void operator()(char* p) const { pc_string_free(p); }
};
using CString = std::unique_ptr<char, StringDeleter>;

struct ReportDeleter {
  void operator()(pc_report* r) const { pc_report_destroy(r); }
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + p.string() + "'");
  out << data;
  if (!out) throw UsageError("write failed for '" + p.string() + "'");
}

std::string content_hash(const std::string& bytes) {
  char* out = nullptr;
  check(pc_content_hash(bytes.data(), bytes.size(), &out));
  return CString(out).get();
}

// UTC timestamp; SOURCE_DATE_EPOCH pins it for reproducible output.
std::string timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"); sde != nullptr && *sde != '\0') {
    t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string format = "csv";
};

// Loads the config, resolves "network_file" relative to the config file and
// applies the --seed override.
json load_config(const Options& opt) {
  json cfg = json::object();
  fs::path base = fs::current_path();
  if (!opt.config_path.empty()) {
    const std::string text = read_file(opt.config_path);
    try {
      cfg = json::parse(text);
    } catch (const json::exception& e) {
      throw UsageError("config '" + opt.config_path + "' is not valid JSON: " + e.what());
    }
    if (!cfg.is_object()) throw UsageError("config must be a JSON object");
    base = fs::path(opt.config_path).parent_path();
  }
  if (cfg.contains("network_file")) {
    if (!cfg.at("network_file").is_string()) throw UsageError("network_file must be a string");
    fs::path p = cfg.at("network_file").get<std::string>();
    if (p.is_relative()) p = base / p;
    try {
      json doc = json::parse(read_file(p));
      // Accept the artifact files this tool writes as well as bare networks.
      if (doc.is_object() && doc.contains("manifest") && doc.contains("content")) {
        doc = doc.at("content");
      }
      cfg["network"] = std::move(doc);
    } catch (const json::exception& e) {
      throw UsageError("network file '" + p.string() + "' is not valid JSON: " + e.what());
    }
    cfg.erase("network_file");
  }
  if (opt.seed) cfg["seed"] = *opt.seed;
  return cfg;
}

std::string render(const pc_report* rep, const char* fmt) {
  char* out = nullptr;
  check(pc_report_render(rep, fmt, &out));
  return CString(out).get();
}

int run(const std::string& command, const Options& opt) {
  const json cfg = load_config(opt);
  const std::string cfg_text = cfg.dump();
  json manifest = {
      {"command", command},
      {"config_path", opt.config_path},
      {"seed", cfg.value("seed", json(0))},
      {"input_hash", content_hash(cfg_text)},
      {"timestamp", timestamp()},
      {"version", pc_version()},
  };
  const std::string manifest_text = manifest.dump();

  pc_report* raw = nullptr;
  check(pc_run_experiment(command.c_str(), cfg_text.c_str(), manifest_text.c_str(), &raw));
  std::unique_ptr<pc_report, ReportDeleter> rep(raw);

  const std::string main = render(rep.get(), opt.format.c_str());
  if (opt.out_dir.empty()) {
    std::cout << main;
    return kExitOk;
  }

  const fs::path dir = opt.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create '" + dir.string() + "': " + ec.message());
  std::string stem = command;
  for (char& c : stem) {
    if (c == '-') c = '_';
  }
  std::vector<fs::path> written;
  written.push_back(dir / (stem + "." + opt.format));
  write_file(written.back(), main);
  written.push_back(dir / (stem + ".dat"));
  write_file(written.back(), render(rep.get(), "dat"));

  const size_t n = pc_report_artifact_count(rep.get());
  for (size_t i = 0; i < n; ++i) {
    char* name = nullptr;
    char* body = nullptr;
    check(pc_report_artifact(rep.get(), i, &name, &body));
    CString name_s(name);
    CString body_s(body);
    // Artifacts carry the manifest alongside the payload.
    json doc = {{"manifest", manifest}, {"content", json::parse(body_s.get())}};
    written.push_back(dir / (stem + "." + name_s.get() + ".json"));
    write_file(written.back(), doc.dump(2) + "\n");
  }
  for (const auto& p : written) std::cout << p.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Minimal weight perturbations, Lipschitz certificates and compression analyses"};
  app.set_version_flag("--version", std::string(pc_version()));
  app.require_subcommand(1);

  Options opt;
  std::string chosen;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "Train a classifier on the synthetic task and save it"},
      {"flip", "Closed-form and empirical class-flip perturbations per layer"},
      {"multilayer", "Group versus single-layer perturbation norms and the lower bound"},
      {"attack", "Compression-activated backdoor training and evaluation"},
      {"certify", "Margin-Lipschitz certification over a compression sweep"},
      {"lipschitz", "Finite-difference power-iteration Lipschitz estimates"},
      {"lowrank-analyze", "Margin change from discarded singular modes"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "Override the config seed");
    sub->add_option("--out", opt.out_dir, "Output directory (default: print to stdout)");
    sub->add_option("--format", opt.format, "Table format")
        ->check(CLI::IsMember({"csv", "json"}));
    sub->callback([&chosen, n = name] { chosen = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    return run(chosen, opt);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ApiError& e) {
    std::cerr << "error (" << pc_status_name(e.status) << "): " << e.what() << "\n";
    if (e.status == PC_ERR_INVALID_ARGUMENT) return kExitUsage;
    return pc_status_is_numerical(e.status) ? kExitNumerical : kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}
