#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gridse {

// FNV-1a over a byte string; stable fingerprint for configs and inputs.
std::uint64_t fnv1a(const std::string& bytes);
std::uint64_t fnv1a_file(const std::string& path);

// Provenance sidecar written next to every CLI output. Timings live only
// here so the data products themselves stay byte-identical across reruns.
struct RunManifest {
    std::string command;
    std::string version;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::vector<std::pair<std::string, std::uint64_t>> inputs;  // path, content hash
    std::vector<std::string> outputs;
    double seconds = 0.0;
};

void write_manifest(const std::string& path, const RunManifest& manifest);

}  // namespace gridse
