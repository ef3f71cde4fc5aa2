#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pgmfuse/kitti_io.hpp"
#include "pgmfuse/pgm_frame.hpp"

namespace pgmfuse::geometry {

// Angular window kept from the 360 degree scan, degrees. Yaw is measured
// about +z from the +x (forward) axis, positive to the left; pitch positive
// above the horizon.
struct FovSpec {
    double yaw_left = 40.0;
    double yaw_right = -40.0;
    double pitch_up = 2.0;
    double pitch_down = -18.0;

    void validate() const;
};

// Number of scored classes; label channels are stored as id / kScoredClasses.
constexpr int kScoredClasses = 15;

// Spherical projection of a cloud onto an h x w polar grid with the 5 base
// channels [x, y, z, intensity, range]. Cell collisions keep the point with
// the smallest range (ties: lowest point index). cloud.labels, when present,
// must already be in the reduced class space.
PgmFrame spherical_project(const io::PointCloud& cloud, const FovSpec& fov,
                           int h, int w);

// Projects each masked cell's point into the camera and samples the nearest
// pixel into channels [r, g, b], growing the frame from 5 to 8 channels.
// Cells that land outside the image or behind the camera stay black and are
// counted in frame.uncolored. Channels 0-4, mask and labels are untouched.
PgmFrame colorize(const PgmFrame& frame, const io::Image& image,
                  const io::CalibrationSet& calib);

// Appends the two decision-fusion label channels, growing 8 -> 10 channels.
// l1/l2 hold reduced class IDs per cell; stored as id / kScoredClasses.
PgmFrame attach_label_channels(const PgmFrame& frame,
                               const std::vector<std::uint32_t>& l1,
                               const std::vector<std::uint32_t>& l2);

// Maps per-cell predictions back to original point indices. One entry per
// masked cell; points that never won a cell are absent (score them as 0).
std::vector<std::pair<std::int32_t, std::uint32_t>> backproject_predictions(
    const PgmFrame& frame, const std::vector<std::uint32_t>& pred);

// Camera-pixel lookup shared by colorize and label transfer. Returns false
// when the point is behind the camera or projects outside the image bounds.
bool project_to_pixel(const io::CalibrationSet& calib, double x, double y,
                      double z, int& px, int& py);

}  // namespace pgmfuse::geometry
