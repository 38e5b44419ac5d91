#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace perturbcert {

/// Rectangular result table. Cells are JSON scalars (number, bool, string or
/// null for "not available").
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<nlohmann::json>> rows;
};

struct Report {
  std::string command;
  /// "perturbcert.<command>/v<N>"; bumped on any breaking column change.
  std::string schema;
  nlohmann::json manifest;
  Table table;
  /// Nested results that do not fit the table (audits, traces, settings).
  nlohmann::json details = nlohmann::json::object();
  /// Extra documents the front end should persist, e.g. {"network": {...}}.
  std::map<std::string, nlohmann::json> artifacts;
};

/// Commands: train, flip, multilayer, attack, certify, lipschitz,
/// lowrank-analyze. Configuration errors raise InvalidArgument; numerical
/// failures raise the matching perturbcert::Error subclass.
Report run_experiment(const std::string& command, const nlohmann::json& config,
                      const nlohmann::json& manifest);

std::vector<std::string> experiment_commands();

/// Two comment lines (schema, manifest) followed by a header and the rows.
std::string render_csv(const Report& r);
std::string render_json(const Report& r);
/// Whitespace-delimited table for plotting tools: booleans as 1/0, missing
/// values as nan, "#" comment header.
std::string render_dat(const Report& r);

/// Git blob id (SHA-1 of "blob <len>\0<bytes>") as lowercase hex.
std::string git_blob_hash(std::string_view bytes);

}  // namespace perturbcert
