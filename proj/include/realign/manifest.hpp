#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "realign/tensor.hpp"

namespace realign {

inline constexpr const char* kVersion = "0.1.0";

/// Run manifest: one key=value per line. Every output directory gets exactly
/// one; it is the only artifact allowed to carry wall-clock values, so
/// rerun comparisons exclude it.
struct RunManifest {
    std::vector<std::pair<std::string, std::string>> entries;

    void set(const std::string& key, const std::string& value) {
        entries.emplace_back(key, value);
    }

    void write(const std::filesystem::path& dir) const {
        std::ofstream f(dir / "manifest.txt", std::ios::trunc);
        if (!f) throw DataError("manifest: cannot write in " + dir.string());
        f << "version=" << kVersion << "\n";
        for (const auto& [k, v] : entries) f << k << "=" << v << "\n";
    }
};

inline std::map<std::string, std::string> read_kv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

/// Create (or validate) an output directory: an existing non-empty directory
/// requires force.
inline void prepare_out_dir(const std::filesystem::path& dir, bool force) {
    namespace fs = std::filesystem;
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw DataError("output path is not a directory: " + dir.string());
        if (!fs::is_empty(dir) && !force)
            throw DataError("output directory " + dir.string() +
                            " is not empty (use --force to overwrite)");
    } else {
        fs::create_directories(dir);
    }
}

}  // namespace realign
