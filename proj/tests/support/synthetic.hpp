#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "pgmfuse/geometry.hpp"
#include "pgmfuse/kitti_io.hpp"

// Analytic street scenes (ground bands, building/car boxes, pole cylinders)
// that can be sampled from the LiDAR origin or rendered through the camera.
// Scans, labels, images and calibration all describe the same geometry, so
// projection, colorization and label transfer stay mutually consistent.

namespace testsupport {

namespace geo = pgmfuse::geometry;
namespace kio = pgmfuse::io;

struct Material {
    std::uint16_t kitti_id = 0;
    std::uint16_t cityscapes_id = 0;
    float r = 0, g = 0, b = 0;
    float intensity = 0.3f;
};

struct Hit {
    double t = 0;
    int material = -1;
};

class Scene {
  public:
    explicit Scene(std::uint32_t seed);

    std::optional<Hit> raycast(const Eigen::Vector3d& origin,
                               const Eigen::Vector3d& dir) const;
    const Material& material(int index) const { return materials_[index]; }

    // shifts the dynamic objects (cars) forward, simulating ego/other motion
    void advance(double meters);

  private:
    struct Box {
        Eigen::Vector3d lo, hi;
        int mat;
        bool dynamic = false;
    };
    struct Cylinder {
        double x, y, r, z0, z1;
        int mat;
    };
    struct Band {
        double y0, y1;
        int mat;
    };

    std::vector<Material> materials_;
    std::vector<Box> boxes_;
    std::vector<Cylinder> cylinders_;
    std::vector<Band> bands_;  // on the ground plane
    double ground_z_ = -1.73;
};

struct FixtureOptions {
    int rows = 64;
    int cols = 512;
    geo::FovSpec fov;  // ray grid span; defaults match the projection defaults
    int image_width = 613;
    int image_height = 185;
    double range_noise = 0.02;
    bool rear_points = true;  // extra returns outside the front FoV
};

kio::CalibrationSet make_calib(int image_width, int image_height);

// One scan whose rays target the cell centers of (rows x cols) over the FoV,
// plus jitter. labels carry raw SemanticKITTI ids.
kio::PointCloud simulate_scan(const Scene& scene, const FixtureOptions& opt,
                              std::uint32_t seed);

kio::Image render_image(const Scene& scene, const kio::CalibrationSet& calib);

// Per-pixel raw CityScapes labelIds from the same camera.
kio::LabelImage render_image_labels(const Scene& scene,
                                    const kio::CalibrationSet& calib);

// Writes n_scans of a drifting scene in the dataset layout:
//   <root>/sequences/<seq>/{velodyne,labels,image_2,calib.txt}
// plus image label maps under <root>/image_labels/sequences/<seq>/.
void write_sequence(const std::filesystem::path& root, const std::string& seq,
                    int n_scans, const FixtureOptions& opt, std::uint32_t seed);

// Fresh directory under the system temp root, unique per call.
std::filesystem::path temp_dir(const std::string& tag);

}  // namespace testsupport
