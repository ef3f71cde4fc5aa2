#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "pgmfuse/common.hpp"
#include "pgmfuse/geometry.hpp"

namespace pgmfuse::cfg {

// Flat "key value" (or "key = value") text, '#' comments. Unknown keys are
// kept verbatim so callers can round-trip files they did not fully parse.
struct Config {
    std::map<std::string, std::string> kv;

    static Config load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return kv.count(key) != 0; }
    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;

    geometry::FovSpec fov() const;
};

}  // namespace pgmfuse::cfg
