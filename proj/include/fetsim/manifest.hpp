#pragma once

// Run manifests: every output directory carries a manifest.json with the
// resolved config, seed, build identifier and input digests, sufficient to
// regenerate the artifacts bit-identically.

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fetsim/common.hpp"

#ifndef FETSIM_BUILD_HASH
#define FETSIM_BUILD_HASH "unknown"
#endif

namespace fetsim {

// FNV-1a over the file bytes; stable content fingerprint for manifests.
inline std::string digest_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot digest missing file: " + path);
  uint64_t h = 1469598103934665603ULL;
  char buf[8192];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

struct RunManifest {
  std::string command;
  std::string config_text;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> input_digests;
  std::vector<std::string> outputs;

  void add_input(const std::string& path) { input_digests.emplace_back(path, digest_file(path)); }

  std::string to_json() const {
    nlohmann::json j;
    j["tool"] = "fetsim";
    j["manifest_version"] = 1;
    j["build"] = FETSIM_BUILD_HASH;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config_text;
    nlohmann::json inputs = nlohmann::json::object();
    for (const auto& [path, digest] : input_digests) inputs[path] = digest;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    return j.dump(2) + "\n";
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write manifest: " + path);
    out << to_json();
  }

  static RunManifest read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read manifest: " + path);
    nlohmann::json j;
    in >> j;
    RunManifest m;
    m.command = j.value("command", "");
    m.config_text = j.value("config", "");
    m.seed = j.value("seed", uint64_t{0});
    if (j.contains("inputs"))
      for (auto& [k, v] : j["inputs"].items()) m.input_digests.emplace_back(k, v.get<std::string>());
    if (j.contains("outputs"))
      for (auto& v : j["outputs"]) m.outputs.push_back(v.get<std::string>());
    return m;
  }
};

}  // namespace fetsim
