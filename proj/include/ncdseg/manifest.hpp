#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "ncdseg/error.hpp"
#include "ncdseg/rng.hpp"

namespace ncdseg {

inline constexpr const char* kToolVersion = "ncdseg 0.1.0";

inline uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot hash missing file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a(ss.str());
}

/// Everything needed to reproduce a run: the fully resolved configuration,
/// seeds, and digests of every input file. Written alongside every output.
struct RunManifest {
  std::string command;
  uint64_t seed = 0;
  std::map<std::string, std::string> config;       // resolved key -> value
  std::map<std::string, std::string> input_hashes; // path -> hex digest
  std::map<std::string, std::string> outputs;      // role -> path

  void add_input(const std::string& path) {
    std::ostringstream hex;
    hex << std::hex << file_digest(path);
    input_hashes[path] = hex.str();
  }

  std::string to_json() const {
    nlohmann::json j;
    j["tool"] = kToolVersion;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config;
    j["inputs"] = input_hashes;
    j["outputs"] = outputs;
    return j.dump(2);
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path);
    out << to_json() << '\n';
  }
};

}  // namespace ncdseg
