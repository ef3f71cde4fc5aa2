#pragma once

#include <cstdint>
#include <vector>

#include "pgmfuse/common.hpp"

namespace pgmfuse::geometry {

// Polar grid frame: h x w cells, c feature channels per cell. Channel order
// is fixed: [x, y, z, intensity, range], then [r, g, b] once colorized, then
// [l1, l2] for decision-level fusion. Cells without a projected point have
// mask 0, all channels 0 and label 0.
struct PgmFrame {
    int h = 0, w = 0, c = 0;
    std::vector<float> data;           // h*w*c, row-major channel-last
    std::vector<std::uint8_t> mask;    // h*w, 1 = cell holds a point
    std::vector<std::uint32_t> labels; // h*w, reduced class IDs, 0 = unlabeled
    std::vector<std::int32_t> point_index;  // h*w, original point id, -1 = none;
                                            // in-memory only, not serialized
    std::size_t uncolored = 0;  // masked cells colorize could not reach

    PgmFrame() = default;
    PgmFrame(int h_, int w_, int c_)
        : h(h_), w(w_), c(c_),
          data(static_cast<std::size_t>(h_) * w_ * c_, 0.0f),
          mask(static_cast<std::size_t>(h_) * w_, 0),
          labels(static_cast<std::size_t>(h_) * w_, 0) {}

    std::size_t cell(int v, int u) const {
        return static_cast<std::size_t>(v) * w + u;
    }
    float& at(int v, int u, int ch) { return data[cell(v, u) * c + ch]; }
    float at(int v, int u, int ch) const { return data[cell(v, u) * c + ch]; }

    bool masked(int v, int u) const { return mask[cell(v, u)] != 0; }

    bool same_grid(const PgmFrame& o) const {
        return h == o.h && w == o.w && c == o.c;
    }
};

enum Channel : int {
    kChX = 0,
    kChY = 1,
    kChZ = 2,
    kChIntensity = 3,
    kChRange = 4,
    kChR = 5,
    kChG = 6,
    kChB = 7,
    kChL1 = 8,
    kChL2 = 9,
};

}  // namespace pgmfuse::geometry
