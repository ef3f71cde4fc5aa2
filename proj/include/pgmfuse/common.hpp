#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pgmfuse {

// Error taxonomy maps onto the CLI exit codes: IoError/FormatError/
// ConsistencyError -> 2, ContractError -> 2, NumericError -> 3.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Two related inputs disagree (e.g. scan/label point counts).
struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller violated an API precondition (shape mismatch, bad channel count).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf guard tripped or a numeric routine diverged.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

}  // namespace pgmfuse
