#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "pgmfuse/common.hpp"

namespace pgmfuse::nn {

// Dense (n, h, w, c) tensor, row-major channel-last. Weight tensors reuse the
// same container with the convention (kh, kw, c_in, c_out); vectors are
// (1, 1, 1, c). Channel-last keeps per-pixel channel slices contiguous, which
// is what the im2col/GEMM path wants.
template <typename Scalar>
struct Tensor {
    using MatrixType =
        Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapType = Eigen::Map<MatrixType>;
    using ConstMapType = Eigen::Map<const MatrixType>;

    int n = 0, h = 0, w = 0, c = 0;
    std::vector<Scalar> v;

    Tensor() = default;
    Tensor(int n_, int h_, int w_, int c_)
        : n(n_), h(h_), w(w_), c(c_),
          v(static_cast<std::size_t>(n_) * h_ * w_ * c_, Scalar(0)) {}

    static Tensor vector(int c_) { return Tensor(1, 1, 1, c_); }

    std::size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    Scalar& at(int in, int ih, int iw, int ic) {
        return v[((static_cast<std::size_t>(in) * h + ih) * w + iw) * c + ic];
    }
    Scalar at(int in, int ih, int iw, int ic) const {
        return v[((static_cast<std::size_t>(in) * h + ih) * w + iw) * c + ic];
    }

    Scalar* item(int in) { return v.data() + static_cast<std::size_t>(in) * h * w * c; }
    const Scalar* item(int in) const {
        return v.data() + static_cast<std::size_t>(in) * h * w * c;
    }

    bool same_shape(const Tensor& o) const {
        return n == o.n && h == o.h && w == o.w && c == o.c;
    }

    // Views the whole tensor as a (rows x cols) matrix; rows*cols must equal
    // size(). Used to hand conv weights and flattened activations to Eigen.
    MapType as_matrix(Eigen::Index rows, Eigen::Index cols) {
        return MapType(v.data(), rows, cols);
    }
    ConstMapType as_matrix(Eigen::Index rows, Eigen::Index cols) const {
        return ConstMapType(v.data(), rows, cols);
    }

    void fill(Scalar x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (const Scalar x : v) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out(n, h, w, c);
        for (std::size_t i = 0; i < v.size(); ++i) {
            out.v[i] = static_cast<Other>(v[i]);
        }
        return out;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename Scalar>
void fill_uniform(Tensor<Scalar>& t, std::mt19937& rng, Scalar lo, Scalar hi) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                static_cast<double>(hi));
    for (auto& x : t.v) x = static_cast<Scalar>(dist(rng));
}

// Kaiming-uniform fan-in init for a (kh, kw, c_in, c_out) conv weight.
template <typename Scalar>
void fill_kaiming_uniform(Tensor<Scalar>& t, std::mt19937& rng) {
    const double fan_in = static_cast<double>(t.n) * t.h * t.w;
    const double bound = std::sqrt(6.0 / (fan_in > 0 ? fan_in : 1.0));
    fill_uniform(t, rng, static_cast<Scalar>(-bound), static_cast<Scalar>(bound));
}

}  // namespace pgmfuse::nn
