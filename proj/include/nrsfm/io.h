#pragma once

// File helpers shared by the JSON containers and the CLI.

#include "nrsfm/optim.h"

#include <json.hpp>

#include <string>

namespace nrsfm::io {

// Writes to a temporary sibling and renames it over `path` on success, so a
// failed write never leaves a partial file behind.
void write_file_atomic(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

// Parses JSON, reporting malformed input as ValidationError with line, column
// and byte offset.
nlohmann::json parse_json(const std::string& text, const std::string& origin);
nlohmann::json read_json(const std::string& path);

// Versioned parameter container: {"format", "version", "kind", "header",
// "parameters": {name: {"shape": [...], "data": [...]}}}.
struct Checkpoint {
  std::string kind;
  nlohmann::json header;
  ad::ParameterSet params;
};

constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws ValidationError on a malformed file, a version mismatch or a kind
// other than `expected_kind`.
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind);

}  // namespace nrsfm::io
