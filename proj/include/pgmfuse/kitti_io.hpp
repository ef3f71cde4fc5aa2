#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pgmfuse/common.hpp"
#include "pgmfuse/pgm_frame.hpp"

// Parsers and writers for the SemanticKITTI on-disk conventions plus this
// project's own polar-grid file format. All readers are pure functions of the
// file contents; all multi-byte integers and floats are little-endian.

namespace pgmfuse::io {

struct Point {
    float x = 0, y = 0, z = 0, intensity = 0;
};

struct PointCloud {
    std::vector<Point> points;
    std::vector<std::uint16_t> labels;     // semantic IDs; empty or same count
    std::vector<std::uint16_t> instances;  // carried through untouched
    std::size_t dropped_nonfinite = 0;
    std::size_t clamped_intensity = 0;

    bool has_labels() const { return !labels.empty(); }
};

struct CalibrationSet {
    Eigen::Matrix<double, 3, 4> proj = Eigen::Matrix<double, 3, 4>::Zero();
    Eigen::Matrix<double, 3, 4> velo_to_cam = Eigen::Matrix<double, 3, 4>::Zero();
    int image_width = 0;   // filled in once the paired image is known
    int image_height = 0;
};

struct Image {
    int width = 0, height = 0;
    std::vector<float> data;  // height*width*3, RGB in [0,1]

    float at(int y, int x, int ch) const {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
    }
};

// Single-channel 8-bit raster of raw class IDs (ingested image label maps).
struct LabelImage {
    int width = 0, height = 0;
    std::vector<std::uint16_t> ids;  // height*width

    std::uint16_t at(int y, int x) const {
        return ids[static_cast<std::size_t>(y) * width + x];
    }
};

struct LabelRecord {
    std::uint16_t semantic = 0;
    std::uint16_t instance = 0;
};

struct SplitManifest {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
    // sequence id -> number of scans, filled by count_scans()
    std::vector<std::pair<std::string, std::size_t>> scan_counts;
};

// --- Velodyne scans (.bin): 4 little-endian float32 per point -------------

PointCloud read_scan(const std::filesystem::path& path);
void write_scan(const std::filesystem::path& path, const PointCloud& cloud);

// --- Labels (.label): u32 per point, low 16 bits semantic ------------------

// expected_points >= 0 enforces the companion scan's point count.
std::vector<LabelRecord> read_labels(const std::filesystem::path& path,
                                     std::ptrdiff_t expected_points = -1);
void write_labels(const std::filesystem::path& path,
                  const std::vector<LabelRecord>& records);

// --- Calibration (calib.txt): "KEY: 12 decimals" per line ------------------

CalibrationSet read_calib(const std::filesystem::path& path,
                          const std::string& proj_key = "P2",
                          const std::string& tr_key = "Tr");

// --- Camera images: PNG or binary PPM (P6), sniffed by magic ---------------

Image read_image(const std::filesystem::path& path);
void write_image_ppm(const std::filesystem::path& path, const Image& img);

// Grayscale PNG or binary PGM (P5) of raw per-pixel class IDs.
LabelImage read_label_image(const std::filesystem::path& path);
void write_label_image_pgm(const std::filesystem::path& path,
                           const LabelImage& img);

// --- Polar grid files (.pgmf) ----------------------------------------------
// magic "PGMF", u16 version=1, u32 h, u32 w, u32 c, u32 flags, then
// h*w*c float32 data, h*w u8 mask, h*w u32 labels, u32 CRC32 of the payload.

void write_pgm(const std::filesystem::path& path,
               const geometry::PgmFrame& frame);
geometry::PgmFrame read_pgm(const std::filesystem::path& path);

// --- Dataset layout: <root>/sequences/<NN>/{velodyne,labels,image_2,calib.txt}

SplitManifest default_split();
SplitManifest read_split(const std::filesystem::path& path);
void count_scans(const std::filesystem::path& root, SplitManifest& manifest);

std::filesystem::path sequence_dir(const std::filesystem::path& root,
                                   const std::string& seq);
// Sorted scan stems ("000000", "000001", ...) present in a sequence.
std::vector<std::string> list_scans(const std::filesystem::path& root,
                                    const std::string& seq);

}  // namespace pgmfuse::io
