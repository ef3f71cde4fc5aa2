#include "pgmfuse/geometry.hpp"

#include <cmath>

namespace pgmfuse::geometry {

void FovSpec::validate() const {
    if (!(yaw_left > yaw_right) || !(pitch_up > pitch_down)) {
        throw ContractError("FovSpec: need yaw_left > yaw_right and "
                            "pitch_up > pitch_down");
    }
}

PgmFrame spherical_project(const io::PointCloud& cloud, const FovSpec& fov,
                           int h, int w) {
    if (h < 1 || w < 1) throw ContractError("spherical_project: h, w must be >= 1");
    fov.validate();

    const double yaw_left = deg_to_rad(fov.yaw_left);
    const double yaw_right = deg_to_rad(fov.yaw_right);
    const double pitch_up = deg_to_rad(fov.pitch_up);
    const double pitch_down = deg_to_rad(fov.pitch_down);
    const double inv_yaw_span = 1.0 / (yaw_left - yaw_right);
    const double inv_pitch_span = 1.0 / (pitch_up - pitch_down);

    PgmFrame frame(h, w, 5);
    frame.point_index.assign(static_cast<std::size_t>(h) * w, -1);

    const bool with_labels = cloud.has_labels();
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
        const io::Point& p = cloud.points[i];
        const double range = std::sqrt(static_cast<double>(p.x) * p.x +
                                       static_cast<double>(p.y) * p.y +
                                       static_cast<double>(p.z) * p.z);
        if (!(range > 0.0)) continue;
        const double yaw = std::atan2(static_cast<double>(p.y), static_cast<double>(p.x));
        const double pitch = std::asin(static_cast<double>(p.z) / range);
        if (yaw > yaw_left || yaw < yaw_right) continue;
        if (pitch > pitch_up || pitch < pitch_down) continue;

        int u = static_cast<int>(std::floor((yaw_left - yaw) * inv_yaw_span * w));
        int v = static_cast<int>(std::floor((pitch_up - pitch) * inv_pitch_span * h));
        u = std::clamp(u, 0, w - 1);
        v = std::clamp(v, 0, h - 1);

        const std::size_t cell = frame.cell(v, u);
        if (frame.mask[cell]) {
            // nearest range wins; first point wins ties (index order)
            const float incumbent = frame.data[cell * 5 + kChRange];
            if (!(static_cast<float>(range) < incumbent)) continue;
        }
        frame.mask[cell] = 1;
        frame.data[cell * 5 + kChX] = p.x;
        frame.data[cell * 5 + kChY] = p.y;
        frame.data[cell * 5 + kChZ] = p.z;
        frame.data[cell * 5 + kChIntensity] = p.intensity;
        frame.data[cell * 5 + kChRange] = static_cast<float>(range);
        frame.labels[cell] = with_labels ? cloud.labels[i] : 0u;
        frame.point_index[cell] = static_cast<std::int32_t>(i);
    }
    return frame;
}

bool project_to_pixel(const io::CalibrationSet& calib, double x, double y,
                      double z, int& px, int& py) {
    const Eigen::Vector4d pt(x, y, z, 1.0);
    const Eigen::Vector3d cam = calib.velo_to_cam * pt;
    const Eigen::Vector3d img =
        calib.proj * Eigen::Vector4d(cam.x(), cam.y(), cam.z(), 1.0);
    if (!(img.z() > 0.0)) return false;
    const double u = img.x() / img.z();
    const double v = img.y() / img.z();
    if (u < 0.0 || u >= calib.image_width || v < 0.0 || v >= calib.image_height) {
        return false;
    }
    px = std::min(static_cast<int>(std::lround(u)), calib.image_width - 1);
    py = std::min(static_cast<int>(std::lround(v)), calib.image_height - 1);
    return true;
}

PgmFrame colorize(const PgmFrame& frame, const io::Image& image,
                  const io::CalibrationSet& calib) {
    if (frame.c != 5) {
        throw ContractError("colorize: expected a 5-channel frame, got " +
                            std::to_string(frame.c) + " channels");
    }
    if (calib.image_width != image.width || calib.image_height != image.height) {
        throw ContractError("colorize: calibration image size " +
                            std::to_string(calib.image_width) + "x" +
                            std::to_string(calib.image_height) +
                            " does not match image " +
                            std::to_string(image.width) + "x" +
                            std::to_string(image.height));
    }

    PgmFrame out(frame.h, frame.w, 8);
    out.mask = frame.mask;
    out.labels = frame.labels;
    out.point_index = frame.point_index;

    for (int v = 0; v < frame.h; ++v) {
        for (int u = 0; u < frame.w; ++u) {
            const std::size_t cell = frame.cell(v, u);
            for (int ch = 0; ch < 5; ++ch) {
                out.data[cell * 8 + ch] = frame.data[cell * 5 + ch];
            }
            if (!frame.mask[cell]) continue;
            int px = 0, py = 0;
            if (project_to_pixel(calib, frame.data[cell * 5 + kChX],
                                 frame.data[cell * 5 + kChY],
                                 frame.data[cell * 5 + kChZ], px, py)) {
                out.data[cell * 8 + kChR] = image.at(py, px, 0);
                out.data[cell * 8 + kChG] = image.at(py, px, 1);
                out.data[cell * 8 + kChB] = image.at(py, px, 2);
            } else {
                ++out.uncolored;
            }
        }
    }
    return out;
}

PgmFrame attach_label_channels(const PgmFrame& frame,
                               const std::vector<std::uint32_t>& l1,
                               const std::vector<std::uint32_t>& l2) {
    if (frame.c != 8) {
        throw ContractError("attach_label_channels: expected an 8-channel "
                            "frame, got " + std::to_string(frame.c));
    }
    const std::size_t cells = static_cast<std::size_t>(frame.h) * frame.w;
    if (l1.size() != cells || l2.size() != cells) {
        throw ContractError("attach_label_channels: label map size does not "
                            "match the grid");
    }

    PgmFrame out(frame.h, frame.w, 10);
    out.mask = frame.mask;
    out.labels = frame.labels;
    out.point_index = frame.point_index;
    out.uncolored = frame.uncolored;

    const float inv = 1.0f / static_cast<float>(kScoredClasses);
    for (std::size_t cell = 0; cell < cells; ++cell) {
        for (int ch = 0; ch < 8; ++ch) {
            out.data[cell * 10 + ch] = frame.data[cell * 8 + ch];
        }
        if (!frame.mask[cell]) continue;
        out.data[cell * 10 + kChL1] = static_cast<float>(l1[cell]) * inv;
        out.data[cell * 10 + kChL2] = static_cast<float>(l2[cell]) * inv;
    }
    return out;
}

std::vector<std::pair<std::int32_t, std::uint32_t>> backproject_predictions(
    const PgmFrame& frame, const std::vector<std::uint32_t>& pred) {
    if (frame.point_index.empty()) {
        throw ContractError("backproject_predictions: frame has no point index");
    }
    const std::size_t cells = static_cast<std::size_t>(frame.h) * frame.w;
    if (pred.size() != cells) {
        throw ContractError("backproject_predictions: prediction map size "
                            "does not match the grid");
    }
    std::vector<std::pair<std::int32_t, std::uint32_t>> out;
    for (std::size_t cell = 0; cell < cells; ++cell) {
        if (!frame.mask[cell]) continue;
        out.emplace_back(frame.point_index[cell], pred[cell]);
    }
    return out;
}

}  // namespace pgmfuse::geometry
