#include "nrsfm/io.h"

#include "nrsfm/errors.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nrsfm::io {

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open '" + tmp + "' for writing");
    out << content;
    out.flush();
    if (!out) {
      out.close();
      std::remove(tmp.c_str());
      throw ValidationError("failed writing '" + tmp + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw ValidationError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json parse_json(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t offset = e.byte == 0 ? 0 : e.byte - 1;
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::ostringstream os;
    os << origin << ": parse error at line " << line << ", column " << col << " (byte " << offset << ")";
    throw ValidationError(os.str());
  }
}

nlohmann::json read_json(const std::string& path) { return parse_json(read_file(path), path); }

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format"] = "nrsfm-checkpoint";
  j["version"] = kCheckpointVersion;
  j["kind"] = ckpt.kind;
  j["header"] = ckpt.header;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : ckpt.params.all()) {
    params[name] = {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
  }
  j["parameters"] = std::move(params);
  write_file_atomic(path, j.dump());
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind) {
  const nlohmann::json j = read_json(path);
  auto fail = [&](const std::string& what) { throw ValidationError(path + ": " + what); };
  if (!j.is_object() || j.value("format", "") != "nrsfm-checkpoint") fail("not a checkpoint container");
  if (!j.contains("version") || !j["version"].is_number_integer()) fail("missing field 'version'");
  if (j["version"].get<int>() != kCheckpointVersion) {
    fail("unsupported checkpoint version " + j["version"].dump());
  }
  if (j.value("kind", "") != expected_kind) fail("field 'kind' is '" + j.value("kind", "") + "', expected '" + expected_kind + "'");
  if (!j.contains("parameters") || !j["parameters"].is_object()) fail("missing field 'parameters'");

  Checkpoint out;
  out.kind = expected_kind;
  out.header = j.value("header", nlohmann::json::object());
  try {
    for (const auto& [name, entry] : j["parameters"].items()) {
      auto shape = entry.at("shape").get<ad::Shape>();
      auto data = entry.at("data").get<std::vector<double>>();
      if (ad::shape_size(shape) != data.size()) fail("parameter '" + name + "' data does not match its shape");
      out.params.add(name, ad::Tensor(std::move(shape), std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed parameters: ") + e.what());
  }
  return out;
}

}  // namespace nrsfm::io
