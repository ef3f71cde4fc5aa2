#include "pgmfuse/config.hpp"

#include <fstream>
#include <sstream>

namespace pgmfuse::cfg {

Config Config::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    Config config;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream tok(line);
        std::string key;
        if (!(tok >> key)) continue;
        std::string value;
        tok >> value;
        if (value == "=") tok >> value;
        if (value.empty()) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": key '" + key + "' has no value");
        }
        config.kv[key] = value;
    }
    return config;
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
    const auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

int Config::get_int(const std::string& key, int fallback) const {
    const auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw FormatError("config key '" + key + "' is not an integer: " + it->second);
    }
}

double Config::get_double(const std::string& key, double fallback) const {
    const auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw FormatError("config key '" + key + "' is not a number: " + it->second);
    }
}

geometry::FovSpec Config::fov() const {
    geometry::FovSpec fov;
    fov.yaw_left = get_double("fov.yaw_left", fov.yaw_left);
    fov.yaw_right = get_double("fov.yaw_right", fov.yaw_right);
    fov.pitch_up = get_double("fov.pitch_up", fov.pitch_up);
    fov.pitch_down = get_double("fov.pitch_down", fov.pitch_down);
    return fov;
}

}  // namespace pgmfuse::cfg
