#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pgmfuse/common.hpp"

namespace pgmfuse::labels {

// Reduced label space: index 0 is unlabeled, indices 1..15 are scored.
constexpr int kNumClasses = 16;

extern const std::array<const char*, kNumClasses> kClassNames;

enum class Source { kSemanticKitti, kCityScapes };

using ClassMap = std::unordered_map<std::uint16_t, std::uint16_t>;

struct ClassSpec {
    std::array<std::string, kNumClasses> names;
    ClassMap kitti_map;       // raw SemanticKITTI id -> reduced id
    ClassMap cityscapes_map;  // raw CityScapes labelId -> reduced id

    const ClassMap& map_for(Source source) const {
        return source == Source::kSemanticKitti ? kitti_map : cityscapes_map;
    }

    // Compiled-in defaults; data/semantickitti_classmap.txt and
    // data/cityscapes_classmap.txt carry the same tables for external tools.
    static ClassSpec builtin();
};

// Index of a reduced class name, -1 if unknown.
int class_index(const std::string& name);

// One "raw_id<TAB>reduced_name" per line, '#' comments.
ClassMap read_class_map(const std::filesystem::path& path);
void write_class_map(const std::filesystem::path& path, const ClassMap& map);

// Element-wise table lookup; raw IDs absent from the map land in class 0 and
// are tallied in unknown_count when given.
std::vector<std::uint16_t> remap(std::span<const std::uint16_t> raw,
                                 const ClassMap& map,
                                 std::size_t* unknown_count = nullptr);

// Running per-class point counts; merge order cannot change the result.
struct FrequencyCounter {
    std::array<std::uint64_t, kNumClasses> counts{};
    std::uint64_t total = 0;

    void add(std::span<const std::uint16_t> reduced_ids);
    void merge(const FrequencyCounter& other);
    // f_c = count_c / total over all points including unlabeled; sums to 1.
    std::array<double, kNumClasses> frequencies() const;
};

// Scans every label file of the given sequences under the dataset root.
FrequencyCounter class_frequencies(const std::filesystem::path& root,
                                   const std::vector<std::string>& sequences,
                                   const ClassMap& map);

// w_c = 1 / ln(f_c + eps), w_unlabeled = 0. eps must satisfy
// min(f_c) + eps > 1 or the log goes non-positive.
std::array<float, kNumClasses> loss_weights(
    const std::array<double, kNumClasses>& freqs, double eps = 1.02);

// Fixture files: "name value" per line, in class order.
void write_stats(const std::filesystem::path& path,
                 const std::array<double, kNumClasses>& values);
std::array<double, kNumClasses> read_stats(const std::filesystem::path& path);

}  // namespace pgmfuse::labels
