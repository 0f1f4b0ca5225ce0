#include "gridse/run_manifest.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gridse/errors.hpp"
#include "gridse/version.hpp"

namespace gridse {

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path + " for hashing");
    std::ostringstream buf;
    buf << in.rdbuf();
    return fnv1a(buf.str());
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
    nlohmann::json doc;
    doc["command"] = manifest.command;
    doc["version"] = manifest.version.empty() ? kVersion : manifest.version;
    doc["seed"] = manifest.seed;
    doc["config_hash"] = manifest.config_hash;
    nlohmann::json inputs = nlohmann::json::array();
    for (const auto& [input_path, hash] : manifest.inputs) {
        inputs.push_back({{"path", input_path}, {"fnv1a", hash}});
    }
    doc["inputs"] = std::move(inputs);
    doc["outputs"] = manifest.outputs;
    doc["seconds"] = manifest.seconds;

    std::ofstream out(path);
    if (!out) throw InputError("cannot write manifest " + path);
    out << doc.dump(1) << "\n";
}

}  // namespace gridse
