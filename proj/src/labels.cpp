#include "pgmfuse/labels.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>

#include "pgmfuse/kitti_io.hpp"
#include "pgmfuse/threading.hpp"

namespace pgmfuse::labels {

const std::array<const char*, kNumClasses> kClassNames = {
    "unlabeled",     "car",     "bicycle",  "motorcycle", "truck",
    "other-vehicle", "person",  "rider",    "road",       "sidewalk",
    "building",      "fence",   "vegetation", "terrain",  "pole",
    "traffic-sign"};

int class_index(const std::string& name) {
    for (int i = 0; i < kNumClasses; ++i) {
        if (name == kClassNames[i]) return i;
    }
    return -1;
}

namespace {

// SemanticKITTI raw ids. Name-for-name rows follow the official label set;
// the exceptions are bicyclist/motorcyclist -> rider, trunk -> vegetation,
// parking and other-ground -> unlabeled. moving-* ids fold into their static
// counterparts, mirroring the dataset's own learning map. Everything without
// a counterpart in the reduced set (bus, on-rails, lane-marking, ...) is
// unlabeled.
constexpr std::pair<std::uint16_t, std::uint16_t> kKittiRows[] = {
    {0, 0},    // unlabeled
    {1, 0},    // outlier
    {10, 1},   // car
    {11, 2},   // bicycle
    {13, 0},   // bus
    {15, 3},   // motorcycle
    {16, 0},   // on-rails
    {18, 4},   // truck
    {20, 5},   // other-vehicle
    {30, 6},   // person
    {31, 7},   // bicyclist -> rider
    {32, 7},   // motorcyclist -> rider
    {40, 8},   // road
    {44, 0},   // parking -> unlabeled
    {48, 9},   // sidewalk
    {49, 0},   // other-ground -> unlabeled
    {50, 10},  // building
    {51, 11},  // fence
    {52, 0},   // other-structure
    {60, 0},   // lane-marking
    {70, 12},  // vegetation
    {71, 12},  // trunk -> vegetation
    {72, 13},  // terrain
    {80, 14},  // pole
    {81, 15},  // traffic-sign
    {99, 0},   // other-object
    {252, 1},  // moving-car
    {253, 7},  // moving-bicyclist -> rider
    {254, 6},  // moving-person
    {255, 7},  // moving-motorcyclist -> rider
    {256, 0},  // moving-on-rails
    {257, 0},  // moving-bus
    {258, 4},  // moving-truck
    {259, 5},  // moving-other-vehicle
};

// CityScapes labelIds. Exceptions: sky -> unlabeled, train -> other-vehicle,
// wall -> building, traffic light -> pole.
constexpr std::pair<std::uint16_t, std::uint16_t> kCityScapesRows[] = {
    {0, 0},    // unlabeled
    {1, 0},    // ego vehicle
    {2, 0},    // rectification border
    {3, 0},    // out of roi
    {4, 0},    // static
    {5, 0},    // dynamic
    {6, 0},    // ground
    {7, 8},    // road
    {8, 9},    // sidewalk
    {9, 0},    // parking
    {10, 0},   // rail track
    {11, 10},  // building
    {12, 10},  // wall -> building
    {13, 11},  // fence
    {14, 0},   // guard rail
    {15, 0},   // bridge
    {16, 0},   // tunnel
    {17, 14},  // pole
    {18, 0},   // polegroup
    {19, 14},  // traffic light -> pole
    {20, 15},  // traffic sign
    {21, 12},  // vegetation
    {22, 13},  // terrain
    {23, 0},   // sky -> unlabeled
    {24, 6},   // person
    {25, 7},   // rider
    {26, 1},   // car
    {27, 4},   // truck
    {28, 0},   // bus
    {29, 0},   // caravan
    {30, 0},   // trailer
    {31, 5},   // train -> other-vehicle
    {32, 3},   // motorcycle
    {33, 2},   // bicycle
};

}  // namespace

ClassSpec ClassSpec::builtin() {
    ClassSpec spec;
    for (int i = 0; i < kNumClasses; ++i) spec.names[i] = kClassNames[i];
    for (const auto& [raw, reduced] : kKittiRows) spec.kitti_map[raw] = reduced;
    for (const auto& [raw, reduced] : kCityScapesRows) {
        spec.cityscapes_map[raw] = reduced;
    }
    return spec;
}

ClassMap read_class_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open class map " + path.string());
    ClassMap map;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream tok(line);
        long raw = 0;
        std::string name;
        if (!(tok >> raw)) continue;
        if (!(tok >> name)) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": missing reduced class name");
        }
        const int idx = class_index(name);
        if (idx < 0) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": unknown reduced class '" + name + "'");
        }
        if (raw < 0 || raw > 0xFFFF) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": raw id out of 16-bit range");
        }
        map[static_cast<std::uint16_t>(raw)] = static_cast<std::uint16_t>(idx);
    }
    return map;
}

void write_class_map(const std::filesystem::path& path, const ClassMap& map) {
    std::vector<std::pair<std::uint16_t, std::uint16_t>> rows(map.begin(), map.end());
    std::sort(rows.begin(), rows.end());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& [raw, reduced] : rows) {
        out << raw << '\t' << kClassNames[reduced] << '\n';
    }
}

std::vector<std::uint16_t> remap(std::span<const std::uint16_t> raw,
                                 const ClassMap& map, std::size_t* unknown_count) {
    std::vector<std::uint16_t> out(raw.size(), 0);
    std::size_t unknown = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto it = map.find(raw[i]);
        if (it == map.end()) {
            ++unknown;
        } else {
            out[i] = it->second;
        }
    }
    if (unknown_count) *unknown_count = unknown;
    return out;
}

void FrequencyCounter::add(std::span<const std::uint16_t> reduced_ids) {
    for (const std::uint16_t id : reduced_ids) {
        if (id >= kNumClasses) {
            throw ContractError("FrequencyCounter: id " + std::to_string(id) +
                                " is not a reduced class id");
        }
        ++counts[id];
    }
    total += reduced_ids.size();
}

void FrequencyCounter::merge(const FrequencyCounter& other) {
    for (int i = 0; i < kNumClasses; ++i) counts[i] += other.counts[i];
    total += other.total;
}

std::array<double, kNumClasses> FrequencyCounter::frequencies() const {
    std::array<double, kNumClasses> f{};
    if (total == 0) return f;
    for (int i = 0; i < kNumClasses; ++i) {
        f[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    }
    return f;
}

FrequencyCounter class_frequencies(const std::filesystem::path& root,
                                   const std::vector<std::string>& sequences,
                                   const ClassMap& map) {
    struct Task {
        std::filesystem::path label_path;
    };
    std::vector<Task> tasks;
    for (const auto& seq : sequences) {
        for (const auto& stem : io::list_scans(root, seq)) {
            auto path = io::sequence_dir(root, seq) / "labels" / (stem + ".label");
            if (!std::filesystem::exists(path)) {
                throw IoError("missing label file " + path.string());
            }
            tasks.push_back({std::move(path)});
        }
    }

    FrequencyCounter counter;
    std::mutex mu;
    threading::parallel_items(tasks.size(), [&](std::size_t i) {
        const auto records = io::read_labels(tasks[i].label_path);
        std::vector<std::uint16_t> raw(records.size());
        for (std::size_t k = 0; k < records.size(); ++k) raw[k] = records[k].semantic;
        const auto reduced = remap(raw, map);
        FrequencyCounter local;
        local.add(reduced);
        std::lock_guard lk(mu);  // integer merge, order-independent
        counter.merge(local);
    });
    return counter;
}

std::array<float, kNumClasses> loss_weights(
    const std::array<double, kNumClasses>& freqs, double eps) {
    std::array<float, kNumClasses> w{};
    for (int c = 1; c < kNumClasses; ++c) {
        const double shifted = freqs[c] + eps;
        if (shifted <= 1.0) {
            throw ContractError(
                "loss_weights: f_c + eps = " + std::to_string(shifted) +
                " for class " + kClassNames[c] +
                " gives a non-positive log; need eps > 1 - min(f_c)");
        }
        w[c] = static_cast<float>(1.0 / std::log(shifted));
    }
    w[0] = 0.0f;
    return w;
}

void write_stats(const std::filesystem::path& path,
                 const std::array<double, kNumClasses>& values) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    char buf[64];
    for (int i = 0; i < kNumClasses; ++i) {
        std::snprintf(buf, sizeof(buf), "%.12g", values[i]);
        out << kClassNames[i] << '\t' << buf << '\n';
    }
}

std::array<double, kNumClasses> read_stats(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open stats file " + path.string());
    std::array<double, kNumClasses> values{};
    std::string name;
    double value = 0;
    while (in >> name >> value) {
        const int idx = class_index(name);
        if (idx < 0) {
            throw FormatError(path.string() + ": unknown class '" + name + "'");
        }
        values[idx] = value;
    }
    return values;
}

}  // namespace pgmfuse::labels
