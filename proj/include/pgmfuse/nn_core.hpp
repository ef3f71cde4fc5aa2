#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pgmfuse/tensor.hpp"
#include "pgmfuse/threading.hpp"

// Dense layer kernels shared by every model: forward and backward for 2-D
// convolution, width-wise transposed convolution, width-wise max pooling,
// batch normalization, ReLU, channel concatenation, the fire composites,
// weighted cross-entropy, and SGD with momentum. Everything is templated on
// the scalar so the gradient-check oracle can run the same code in double.
//
// Convolutions run as im2col + Eigen GEMM. Work is split into fixed chunks
// whose boundaries do not depend on the thread count, and every reduction
// happens in a fixed order, so results are bit-identical for any --threads.

namespace pgmfuse::nn {

struct Conv2dSpec {
    int kh = 3, kw = 3;
    int sh = 1, sw = 1;
    int ph = 1, pw = 1;

    int out_h(int h) const { return (h + 2 * ph - kh) / sh + 1; }
    int out_w(int w) const { return (w + 2 * pw - kw) / sw + 1; }
    // transposed-conv output size for the same geometry
    int deconv_out_h(int h) const { return (h - 1) * sh + kh - 2 * ph; }
    int deconv_out_w(int w) const { return (w - 1) * sw + kw - 2 * pw; }

    void check(int h, int w, const char* who) const {
        if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || ph < 0 || pw < 0) {
            throw ContractError(std::string(who) + ": bad kernel/stride/pad");
        }
        if (out_h(h) < 1 || out_w(w) < 1) {
            throw ContractError(std::string(who) + ": input " +
                                std::to_string(h) + "x" + std::to_string(w) +
                                " too small for kernel");
        }
    }
};

namespace detail {

// One im2col row: output position (oy, ox) gathers the kh*kw*c receptive
// field, zero-padded outside the input.
template <typename Scalar>
void im2col_row(const Scalar* x, int h, int w, int c, const Conv2dSpec& sp,
                int oy, int ox, Scalar* row) {
    for (int ky = 0; ky < sp.kh; ++ky) {
        const int iy = oy * sp.sh - sp.ph + ky;
        Scalar* dst = row + static_cast<std::size_t>(ky) * sp.kw * c;
        if (iy < 0 || iy >= h) {
            std::fill(dst, dst + static_cast<std::size_t>(sp.kw) * c, Scalar(0));
            continue;
        }
        for (int kx = 0; kx < sp.kw; ++kx) {
            const int ix = ox * sp.sw - sp.pw + kx;
            if (ix < 0 || ix >= w) {
                std::fill(dst + static_cast<std::size_t>(kx) * c,
                          dst + static_cast<std::size_t>(kx + 1) * c, Scalar(0));
            } else {
                const Scalar* src = x + (static_cast<std::size_t>(iy) * w + ix) * c;
                std::copy(src, src + c, dst + static_cast<std::size_t>(kx) * c);
            }
        }
    }
}

inline std::size_t row_chunk(std::size_t rows) {
    // keeps per-chunk im2col buffers around a few MB
    return rows < 512 ? rows : 512;
}

}  // namespace detail

// weight: (kh, kw, c_in, c_out) stored as Tensor(n=kh, h=kw, w=c_in, c=c_out);
// bias: (1,1,1,c_out) or empty.
template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                              const Tensor<Scalar>& bias, const Conv2dSpec& sp) {
    sp.check(x.h, x.w, "conv2d");
    if (weight.n != sp.kh || weight.h != sp.kw || weight.w != x.c) {
        throw ContractError("conv2d: weight shape (" + std::to_string(weight.n) +
                            "," + std::to_string(weight.h) + "," +
                            std::to_string(weight.w) + ",*) does not match kernel " +
                            std::to_string(sp.kh) + "x" + std::to_string(sp.kw) +
                            " over " + std::to_string(x.c) + " channels");
    }
    const int co = weight.c;
    const int oh = sp.out_h(x.h), ow = sp.out_w(x.w);
    const std::size_t kdim = static_cast<std::size_t>(sp.kh) * sp.kw * x.c;
    Tensor<Scalar> y(x.n, oh, ow, co);

    const auto wmat = weight.as_matrix(static_cast<Eigen::Index>(kdim), co);
    const std::size_t rows = static_cast<std::size_t>(oh) * ow;
    const std::size_t chunk = detail::row_chunk(rows);

    auto run_item = [&](int item, std::size_t r0, std::size_t r1) {
        thread_local std::vector<Scalar> patch;
        patch.resize((r1 - r0) * kdim);
        const Scalar* xi = x.item(item);
        for (std::size_t r = r0; r < r1; ++r) {
            detail::im2col_row(xi, x.h, x.w, x.c, sp, static_cast<int>(r / ow),
                               static_cast<int>(r % ow), patch.data() + (r - r0) * kdim);
        }
        typename Tensor<Scalar>::ConstMapType pm(patch.data(),
                                                 static_cast<Eigen::Index>(r1 - r0),
                                                 static_cast<Eigen::Index>(kdim));
        typename Tensor<Scalar>::MapType ym(y.item(item) + r0 * co,
                                            static_cast<Eigen::Index>(r1 - r0), co);
        ym.noalias() = pm * wmat;
        if (!bias.empty()) {
            const auto bm = bias.as_matrix(1, co);
            ym.rowwise() += bm.row(0);
        }
    };

    if (x.n > 1) {
        threading::parallel_items(static_cast<std::size_t>(x.n), [&](std::size_t i) {
            for (std::size_t r = 0; r < rows; r += chunk) {
                run_item(static_cast<int>(i), r, std::min(r + chunk, rows));
            }
        });
    } else {
        threading::parallel_chunks(rows, chunk, [&](std::size_t r0, std::size_t r1) {
            run_item(0, r0, r1);
        });
    }
    return y;
}

// dx = col2im(dy * W^T): scatter-add runs sequentially inside each item.
template <typename Scalar>
Tensor<Scalar> conv2d_backward_data(const Tensor<Scalar>& dy,
                                    const Tensor<Scalar>& weight,
                                    const Conv2dSpec& sp, int in_h, int in_w) {
    const int ci = weight.w, co = weight.c;
    const int oh = dy.h, ow = dy.w;
    const std::size_t kdim = static_cast<std::size_t>(sp.kh) * sp.kw * ci;
    Tensor<Scalar> dx(dy.n, in_h, in_w, ci);
    const auto wmat = weight.as_matrix(static_cast<Eigen::Index>(kdim), co);

    threading::parallel_items(static_cast<std::size_t>(dy.n), [&](std::size_t item) {
        thread_local std::vector<Scalar> grad_patch;
        const std::size_t rows = static_cast<std::size_t>(oh) * ow;
        const std::size_t chunk = detail::row_chunk(rows);
        grad_patch.resize(chunk * kdim);
        Scalar* dxi = dx.item(static_cast<int>(item));
        for (std::size_t r0 = 0; r0 < rows; r0 += chunk) {
            const std::size_t r1 = std::min(r0 + chunk, rows);
            typename Tensor<Scalar>::ConstMapType dym(
                dy.item(static_cast<int>(item)) + r0 * co,
                static_cast<Eigen::Index>(r1 - r0), co);
            typename Tensor<Scalar>::MapType gp(grad_patch.data(),
                                                static_cast<Eigen::Index>(r1 - r0),
                                                static_cast<Eigen::Index>(kdim));
            gp.noalias() = dym * wmat.transpose();
            // col2im scatter
            for (std::size_t r = r0; r < r1; ++r) {
                const int oy = static_cast<int>(r / ow), ox = static_cast<int>(r % ow);
                const Scalar* row = grad_patch.data() + (r - r0) * kdim;
                for (int ky = 0; ky < sp.kh; ++ky) {
                    const int iy = oy * sp.sh - sp.ph + ky;
                    if (iy < 0 || iy >= in_h) continue;
                    for (int kx = 0; kx < sp.kw; ++kx) {
                        const int ix = ox * sp.sw - sp.pw + kx;
                        if (ix < 0 || ix >= in_w) continue;
                        Scalar* dst = dxi + (static_cast<std::size_t>(iy) * in_w + ix) * ci;
                        const Scalar* src = row + (static_cast<std::size_t>(ky) * sp.kw + kx) * ci;
                        for (int ch = 0; ch < ci; ++ch) dst[ch] += src[ch];
                    }
                }
            }
        }
    });
    return dx;
}

// dW = sum over items of im2col(x)^T * dy, reduced in item order.
template <typename Scalar>
void conv2d_backward_weights(const Tensor<Scalar>& x, const Tensor<Scalar>& dy,
                             const Conv2dSpec& sp, Tensor<Scalar>& dweight,
                             Tensor<Scalar>& dbias) {
    const int ci = x.c, co = dy.c;
    const std::size_t kdim = static_cast<std::size_t>(sp.kh) * sp.kw * ci;
    dweight = Tensor<Scalar>(sp.kh, sp.kw, ci, co);
    dbias = Tensor<Scalar>::vector(co);

    std::vector<Tensor<Scalar>> partials(static_cast<std::size_t>(x.n));
    threading::parallel_items(static_cast<std::size_t>(x.n), [&](std::size_t item) {
        Tensor<Scalar>& part = partials[item];
        part = Tensor<Scalar>(sp.kh, sp.kw, ci, co);
        auto pw = part.as_matrix(static_cast<Eigen::Index>(kdim), co);
        thread_local std::vector<Scalar> patch;
        const std::size_t rows = static_cast<std::size_t>(dy.h) * dy.w;
        const std::size_t chunk = detail::row_chunk(rows);
        patch.resize(chunk * kdim);
        const Scalar* xi = x.item(static_cast<int>(item));
        for (std::size_t r0 = 0; r0 < rows; r0 += chunk) {
            const std::size_t r1 = std::min(r0 + chunk, rows);
            for (std::size_t r = r0; r < r1; ++r) {
                detail::im2col_row(xi, x.h, x.w, ci, sp, static_cast<int>(r / dy.w),
                                   static_cast<int>(r % dy.w),
                                   patch.data() + (r - r0) * kdim);
            }
            typename Tensor<Scalar>::ConstMapType pm(
                patch.data(), static_cast<Eigen::Index>(r1 - r0),
                static_cast<Eigen::Index>(kdim));
            typename Tensor<Scalar>::ConstMapType dym(
                dy.item(static_cast<int>(item)) + r0 * co,
                static_cast<Eigen::Index>(r1 - r0), co);
            pw.noalias() += pm.transpose() * dym;
        }
    });
    for (const auto& part : partials) {
        auto dwm = dweight.as_matrix(static_cast<Eigen::Index>(kdim), co);
        dwm += part.as_matrix(static_cast<Eigen::Index>(kdim), co);
    }
    // bias gradient accumulates in double, item-major order
    std::vector<double> bsum(static_cast<std::size_t>(co), 0.0);
    for (int item = 0; item < dy.n; ++item) {
        const Scalar* d = dy.item(item);
        const std::size_t rows = static_cast<std::size_t>(dy.h) * dy.w;
        for (std::size_t r = 0; r < rows; ++r) {
            for (int ch = 0; ch < co; ++ch) {
                bsum[ch] += static_cast<double>(d[r * co + ch]);
            }
        }
    }
    for (int ch = 0; ch < co; ++ch) dbias.v[ch] = static_cast<Scalar>(bsum[ch]);
}

// Transposed convolution along the same geometry. weight is stored as the
// weight of the adjoint convolution, shape (kh, kw, c_out, c_in): the conv
// that maps the deconv OUTPUT space back to its input space.
template <typename Scalar>
Tensor<Scalar> deconv2d_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                                const Tensor<Scalar>& bias, const Conv2dSpec& sp) {
    if (weight.n != sp.kh || weight.h != sp.kw || weight.c != x.c) {
        throw ContractError("deconv2d: weight shape does not match input");
    }
    const int oh = sp.deconv_out_h(x.h), ow = sp.deconv_out_w(x.w);
    if (oh < 1 || ow < 1) throw ContractError("deconv2d: degenerate output");
    Tensor<Scalar> y = conv2d_backward_data(x, weight, sp, oh, ow);
    if (!bias.empty()) {
        const int co = weight.w;
        threading::parallel_items(static_cast<std::size_t>(y.n), [&](std::size_t item) {
            Scalar* yi = y.item(static_cast<int>(item));
            const std::size_t rows = static_cast<std::size_t>(oh) * ow;
            for (std::size_t r = 0; r < rows; ++r) {
                for (int ch = 0; ch < co; ++ch) yi[r * co + ch] += bias.v[ch];
            }
        });
    }
    return y;
}

template <typename Scalar>
void deconv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                       const Conv2dSpec& sp, const Tensor<Scalar>& dy,
                       Tensor<Scalar>& dx, Tensor<Scalar>& dweight,
                       Tensor<Scalar>& dbias) {
    dx = conv2d_forward(dy, weight, Tensor<Scalar>(), sp);
    Tensor<Scalar> unused_bias;
    conv2d_backward_weights(dy, x, sp, dweight, unused_bias);
    // deconv bias lives on the output (big) side
    const int co = weight.w;
    dbias = Tensor<Scalar>::vector(co);
    std::vector<double> bsum(static_cast<std::size_t>(co), 0.0);
    for (int item = 0; item < dy.n; ++item) {
        const Scalar* d = dy.item(item);
        const std::size_t rows = static_cast<std::size_t>(dy.h) * dy.w;
        for (std::size_t r = 0; r < rows; ++r) {
            for (int ch = 0; ch < co; ++ch) {
                bsum[ch] += static_cast<double>(d[r * co + ch]);
            }
        }
    }
    for (int ch = 0; ch < co; ++ch) dbias.v[ch] = static_cast<Scalar>(bsum[ch]);
}

// Width-wise max pooling, kernel (1, k), stride (1, s). Keeps all rows: the
// vertical resolution of the polar grid survives the whole encoder.
template <typename Scalar>
Tensor<Scalar> maxpool_w_forward(const Tensor<Scalar>& x, int k, int s,
                                 std::vector<std::int32_t>* argmax = nullptr) {
    if (k < 1 || s < 1 || x.w < k) throw ContractError("maxpool_w: bad kernel");
    const int ow = (x.w - k) / s + 1;
    Tensor<Scalar> y(x.n, x.h, ow, x.c);
    if (argmax) argmax->assign(y.size(), 0);

    threading::parallel_items(static_cast<std::size_t>(x.n) * x.h, [&](std::size_t row) {
        const int item = static_cast<int>(row / x.h);
        const int iy = static_cast<int>(row % x.h);
        const Scalar* xr = x.item(item) + static_cast<std::size_t>(iy) * x.w * x.c;
        Scalar* yr = y.item(item) + static_cast<std::size_t>(iy) * ow * x.c;
        std::int32_t* ar =
            argmax ? argmax->data() +
                         (static_cast<std::size_t>(item) * x.h + iy) * ow * x.c
                   : nullptr;
        for (int ox = 0; ox < ow; ++ox) {
            for (int ch = 0; ch < x.c; ++ch) {
                Scalar best = xr[static_cast<std::size_t>(ox * s) * x.c + ch];
                int best_k = 0;
                for (int kk = 1; kk < k; ++kk) {
                    const Scalar v = xr[static_cast<std::size_t>(ox * s + kk) * x.c + ch];
                    if (v > best) {  // first max wins ties
                        best = v;
                        best_k = kk;
                    }
                }
                yr[static_cast<std::size_t>(ox) * x.c + ch] = best;
                if (ar) ar[static_cast<std::size_t>(ox) * x.c + ch] = best_k;
            }
        }
    });
    return y;
}

template <typename Scalar>
Tensor<Scalar> maxpool_w_backward(const Tensor<Scalar>& dy,
                                  const std::vector<std::int32_t>& argmax,
                                  int in_w, int k, int s) {
    (void)k;
    Tensor<Scalar> dx(dy.n, dy.h, in_w, dy.c);
    threading::parallel_items(static_cast<std::size_t>(dy.n) * dy.h, [&](std::size_t row) {
        const int item = static_cast<int>(row / dy.h);
        const int iy = static_cast<int>(row % dy.h);
        const Scalar* dr = dy.item(item) + static_cast<std::size_t>(iy) * dy.w * dy.c;
        Scalar* xr = dx.item(item) + static_cast<std::size_t>(iy) * in_w * dy.c;
        const std::int32_t* ar =
            argmax.data() + (static_cast<std::size_t>(item) * dy.h + iy) * dy.w * dy.c;
        for (int ox = 0; ox < dy.w; ++ox) {
            for (int ch = 0; ch < dy.c; ++ch) {
                const int ix = ox * s + ar[static_cast<std::size_t>(ox) * dy.c + ch];
                xr[static_cast<std::size_t>(ix) * dy.c + ch] +=
                    dr[static_cast<std::size_t>(ox) * dy.c + ch];
            }
        }
    });
    return dx;
}

template <typename Scalar>
Tensor<Scalar> relu_forward(const Tensor<Scalar>& x) {
    Tensor<Scalar> y = x;
    for (auto& v : y.v) v = v > Scalar(0) ? v : Scalar(0);
    return y;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx = dy;
    for (std::size_t i = 0; i < dx.v.size(); ++i) {
        if (!(y.v[i] > Scalar(0))) dx.v[i] = Scalar(0);
    }
    return dx;
}

template <typename Scalar>
struct BatchNormCache {
    Tensor<Scalar> xhat;
    std::vector<double> invstd;  // per channel
};

constexpr double kBatchNormEps = 1e-5;

// Training mode normalizes with batch statistics (double accumulation, fixed
// order) and updates running stats in place: r <- m*r + (1-m)*batch.
// Eval mode uses the running stats unchanged.
template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                 const Tensor<Scalar>& beta,
                                 Tensor<Scalar>& running_mean,
                                 Tensor<Scalar>& running_var, bool training,
                                 double momentum, BatchNormCache<Scalar>* cache) {
    const int c = x.c;
    if (gamma.size() != static_cast<std::size_t>(c) ||
        beta.size() != static_cast<std::size_t>(c)) {
        throw ContractError("batchnorm: gamma/beta length != channels");
    }
    const std::size_t per_item = static_cast<std::size_t>(x.h) * x.w;
    const std::size_t count = per_item * x.n;
    Tensor<Scalar> y(x.n, x.h, x.w, c);

    std::vector<double> mean(c, 0.0), var(c, 0.0);
    if (training) {
        for (std::size_t i = 0; i < count; ++i) {
            const Scalar* px = x.v.data() + i * c;
            for (int ch = 0; ch < c; ++ch) mean[ch] += static_cast<double>(px[ch]);
        }
        for (int ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(count);
        for (std::size_t i = 0; i < count; ++i) {
            const Scalar* px = x.v.data() + i * c;
            for (int ch = 0; ch < c; ++ch) {
                const double d = static_cast<double>(px[ch]) - mean[ch];
                var[ch] += d * d;
            }
        }
        for (int ch = 0; ch < c; ++ch) var[ch] /= static_cast<double>(count);
        for (int ch = 0; ch < c; ++ch) {
            running_mean.v[ch] = static_cast<Scalar>(
                momentum * static_cast<double>(running_mean.v[ch]) +
                (1.0 - momentum) * mean[ch]);
            running_var.v[ch] = static_cast<Scalar>(
                momentum * static_cast<double>(running_var.v[ch]) +
                (1.0 - momentum) * var[ch]);
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mean[ch] = static_cast<double>(running_mean.v[ch]);
            var[ch] = static_cast<double>(running_var.v[ch]);
        }
    }

    std::vector<double> invstd(c);
    for (int ch = 0; ch < c; ++ch) invstd[ch] = 1.0 / std::sqrt(var[ch] + kBatchNormEps);

    if (cache) {
        cache->xhat = Tensor<Scalar>(x.n, x.h, x.w, c);
        cache->invstd = invstd;
    }
    threading::parallel_chunks(count, 4096, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const Scalar* px = x.v.data() + i * c;
            Scalar* py = y.v.data() + i * c;
            for (int ch = 0; ch < c; ++ch) {
                const double xh = (static_cast<double>(px[ch]) - mean[ch]) * invstd[ch];
                if (cache) cache->xhat.v[i * c + ch] = static_cast<Scalar>(xh);
                py[ch] = static_cast<Scalar>(
                    static_cast<double>(gamma.v[ch]) * xh +
                    static_cast<double>(beta.v[ch]));
            }
        }
    });
    return y;
}

template <typename Scalar>
void batchnorm_backward(const BatchNormCache<Scalar>& cache,
                        const Tensor<Scalar>& gamma, const Tensor<Scalar>& dy,
                        Tensor<Scalar>& dx, Tensor<Scalar>& dgamma,
                        Tensor<Scalar>& dbeta) {
    const int c = dy.c;
    const std::size_t count = dy.size() / c;
    dx = Tensor<Scalar>(dy.n, dy.h, dy.w, c);
    dgamma = Tensor<Scalar>::vector(c);
    dbeta = Tensor<Scalar>::vector(c);

    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
        const Scalar* pd = dy.v.data() + i * c;
        const Scalar* ph = cache.xhat.v.data() + i * c;
        for (int ch = 0; ch < c; ++ch) {
            sum_dy[ch] += static_cast<double>(pd[ch]);
            sum_dy_xhat[ch] += static_cast<double>(pd[ch]) * static_cast<double>(ph[ch]);
        }
    }
    for (int ch = 0; ch < c; ++ch) {
        dbeta.v[ch] = static_cast<Scalar>(sum_dy[ch]);
        dgamma.v[ch] = static_cast<Scalar>(sum_dy_xhat[ch]);
    }
    const double n = static_cast<double>(count);
    threading::parallel_chunks(count, 4096, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const Scalar* pd = dy.v.data() + i * c;
            const Scalar* ph = cache.xhat.v.data() + i * c;
            Scalar* px = dx.v.data() + i * c;
            for (int ch = 0; ch < c; ++ch) {
                const double t = n * static_cast<double>(pd[ch]) - sum_dy[ch] -
                                 static_cast<double>(ph[ch]) * sum_dy_xhat[ch];
                px[ch] = static_cast<Scalar>(static_cast<double>(gamma.v[ch]) *
                                             cache.invstd[ch] * t / n);
            }
        }
    });
}

template <typename Scalar>
Tensor<Scalar> concat_forward(std::span<const Tensor<Scalar>* const> parts) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    int c_total = 0;
    for (const auto* p : parts) {
        if (p->n != parts[0]->n || p->h != parts[0]->h || p->w != parts[0]->w) {
            throw ContractError("concat: spatial shapes differ");
        }
        c_total += p->c;
    }
    Tensor<Scalar> y(parts[0]->n, parts[0]->h, parts[0]->w, c_total);
    const std::size_t cells = y.size() / c_total;
    threading::parallel_chunks(cells, 8192, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            Scalar* dst = y.v.data() + i * c_total;
            for (const auto* p : parts) {
                const Scalar* src = p->v.data() + i * p->c;
                std::copy(src, src + p->c, dst);
                dst += p->c;
            }
        }
    });
    return y;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> concat_backward(const Tensor<Scalar>& dy,
                                            std::span<const int> channels) {
    std::vector<Tensor<Scalar>> parts;
    int c_total = 0;
    for (const int c : channels) c_total += c;
    if (c_total != dy.c) throw ContractError("concat backward: channel sum mismatch");
    for (const int c : channels) parts.emplace_back(dy.n, dy.h, dy.w, c);
    const std::size_t cells = dy.size() / dy.c;
    threading::parallel_chunks(cells, 8192, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const Scalar* src = dy.v.data() + i * dy.c;
            for (auto& p : parts) {
                std::copy(src, src + p.c, p.v.data() + i * p.c);
                src += p.c;
            }
        }
    });
    return parts;
}

// --- fire composites ---------------------------------------------------------

template <typename Scalar>
struct FireParams {
    Tensor<Scalar> squeeze_w, squeeze_b;  // 1x1, c_in -> s1x1
    Tensor<Scalar> e1_w, e1_b;            // 1x1, s1x1 -> e1x1
    Tensor<Scalar> e3_w, e3_b;            // 3x3, s1x1 -> e3x3
};

// squeeze -> ReLU -> parallel 1x1 / 3x3 expands -> ReLU -> concat.
template <typename Scalar>
Tensor<Scalar> fire_forward(const Tensor<Scalar>& x, const FireParams<Scalar>& p) {
    const Conv2dSpec one{1, 1, 1, 1, 0, 0};
    const Conv2dSpec three{3, 3, 1, 1, 1, 1};
    const auto s = relu_forward(conv2d_forward(x, p.squeeze_w, p.squeeze_b, one));
    const auto e1 = relu_forward(conv2d_forward(s, p.e1_w, p.e1_b, one));
    const auto e3 = relu_forward(conv2d_forward(s, p.e3_w, p.e3_b, three));
    const std::array<const Tensor<Scalar>*, 2> parts{&e1, &e3};
    return concat_forward<Scalar>(parts);
}

// fire with the input added back in before a final ReLU; needs
// c_in == e1x1 + e3x3.
template <typename Scalar>
Tensor<Scalar> fire_residual_forward(const Tensor<Scalar>& x,
                                     const FireParams<Scalar>& p) {
    if (p.e1_w.c + p.e3_w.c != x.c) {
        throw ContractError("fire_residual: input channels (" +
                            std::to_string(x.c) + ") != e1x1 + e3x3 (" +
                            std::to_string(p.e1_w.c + p.e3_w.c) + ")");
    }
    const Conv2dSpec one{1, 1, 1, 1, 0, 0};
    const Conv2dSpec three{3, 3, 1, 1, 1, 1};
    const auto s = relu_forward(conv2d_forward(x, p.squeeze_w, p.squeeze_b, one));
    const auto e1 = conv2d_forward(s, p.e1_w, p.e1_b, one);
    const auto e3 = conv2d_forward(s, p.e3_w, p.e3_b, three);
    const std::array<const Tensor<Scalar>*, 2> parts{&e1, &e3};
    Tensor<Scalar> y = concat_forward<Scalar>(parts);
    for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += x.v[i];
    return relu_forward(y);
}

template <typename Scalar>
struct FireDeconvParams {
    FireParams<Scalar> fire;
    Tensor<Scalar> up_w, up_b;  // (1,4) stride (1,2) pad (0,1): exact 2x width
};

// squeeze -> ReLU -> width-wise x2 transposed conv -> expands -> ReLU -> concat.
template <typename Scalar>
Tensor<Scalar> fire_deconv_forward(const Tensor<Scalar>& x,
                                   const FireDeconvParams<Scalar>& p) {
    const Conv2dSpec one{1, 1, 1, 1, 0, 0};
    const Conv2dSpec three{3, 3, 1, 1, 1, 1};
    const Conv2dSpec up{1, 4, 1, 2, 0, 1};
    const auto s = relu_forward(conv2d_forward(x, p.fire.squeeze_w, p.fire.squeeze_b, one));
    const auto u = deconv2d_forward(s, p.up_w, p.up_b, up);
    const auto e1 = relu_forward(conv2d_forward(u, p.fire.e1_w, p.fire.e1_b, one));
    const auto e3 = relu_forward(conv2d_forward(u, p.fire.e3_w, p.fire.e3_b, three));
    const std::array<const Tensor<Scalar>*, 2> parts{&e1, &e3};
    return concat_forward<Scalar>(parts);
}

// --- loss ---------------------------------------------------------------------

template <typename Scalar>
struct LossResult {
    double loss = 0.0;
    Tensor<Scalar> dlogits;
};

// Per-cell softmax over all classes (unlabeled bin included); the loss
// averages -w_y * log softmax_y over cells whose target y != 0. Unlabeled
// cells contribute exactly zero loss and zero gradient.
template <typename Scalar>
LossResult<Scalar> weighted_ce_loss(const Tensor<Scalar>& logits,
                                    std::span<const std::uint32_t> target,
                                    std::span<const Scalar> weights) {
    const int c = logits.c;
    if (static_cast<int>(weights.size()) != c) {
        throw ContractError("weighted_ce_loss: weight vector length " +
                            std::to_string(weights.size()) + " != classes " +
                            std::to_string(c));
    }
    const std::size_t cells = logits.size() / c;
    if (target.size() != cells) {
        throw ContractError("weighted_ce_loss: target size mismatch");
    }

    LossResult<Scalar> out;
    out.dlogits = Tensor<Scalar>(logits.n, logits.h, logits.w, c);

    std::size_t labeled = 0;
    for (std::size_t i = 0; i < cells; ++i) {
        if (target[i] >= static_cast<std::uint32_t>(c)) {
            throw ContractError("weighted_ce_loss: target id " +
                                std::to_string(target[i]) + " out of range");
        }
        if (target[i] != 0) ++labeled;
    }
    if (labeled == 0) return out;

    const std::size_t chunk = 4096;
    const std::size_t n_chunks = (cells + chunk - 1) / chunk;
    std::vector<double> partial(n_chunks, 0.0);

    threading::parallel_chunks(cells, chunk, [&](std::size_t b, std::size_t e) {
        double local = 0.0;
        std::vector<double> prob(c);
        for (std::size_t i = b; i < e; ++i) {
            const std::uint32_t y = target[i];
            if (y == 0) continue;
            const Scalar* row = logits.v.data() + i * c;
            double maxv = static_cast<double>(row[0]);
            for (int ch = 1; ch < c; ++ch) {
                maxv = std::max(maxv, static_cast<double>(row[ch]));
            }
            double z = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                prob[ch] = std::exp(static_cast<double>(row[ch]) - maxv);
                z += prob[ch];
            }
            const double wy = static_cast<double>(weights[y]);
            local += -wy * (std::log(prob[y] / z));
            Scalar* drow = out.dlogits.v.data() + i * c;
            const double scale = wy / static_cast<double>(labeled);
            for (int ch = 0; ch < c; ++ch) {
                const double soft = prob[ch] / z;
                const double delta = ch == static_cast<int>(y) ? 1.0 : 0.0;
                drow[ch] = static_cast<Scalar>(scale * (soft - delta));
            }
        }
        partial[b / chunk] = local;
    });
    double total = 0.0;
    for (const double p : partial) total += p;
    out.loss = total / static_cast<double>(labeled);
    return out;
}

// Softmax over the channel axis, one distribution per cell.
template <typename Scalar>
Tensor<Scalar> softmax_cells(const Tensor<Scalar>& logits) {
    Tensor<Scalar> y(logits.n, logits.h, logits.w, logits.c);
    const int c = logits.c;
    const std::size_t cells = logits.size() / c;
    for (std::size_t i = 0; i < cells; ++i) {
        const Scalar* row = logits.v.data() + i * c;
        Scalar* dst = y.v.data() + i * c;
        double maxv = static_cast<double>(row[0]);
        for (int ch = 1; ch < c; ++ch) maxv = std::max(maxv, static_cast<double>(row[ch]));
        double z = 0.0;
        for (int ch = 0; ch < c; ++ch) z += std::exp(static_cast<double>(row[ch]) - maxv);
        for (int ch = 0; ch < c; ++ch) {
            dst[ch] = static_cast<Scalar>(std::exp(static_cast<double>(row[ch]) - maxv) / z);
        }
    }
    return y;
}

// Classic momentum: v <- m*v + g; p <- p - lr*v.
template <typename Scalar>
void sgd_momentum_step(Tensor<Scalar>& param, const Tensor<Scalar>& grad,
                       Tensor<Scalar>& velocity, double lr, double momentum) {
    if (!param.same_shape(grad) || !param.same_shape(velocity)) {
        throw ContractError("sgd_momentum_step: shape mismatch");
    }
    for (std::size_t i = 0; i < param.v.size(); ++i) {
        velocity.v[i] = static_cast<Scalar>(momentum * static_cast<double>(velocity.v[i]) +
                                            static_cast<double>(grad.v[i]));
        param.v[i] -= static_cast<Scalar>(lr * static_cast<double>(velocity.v[i]));
    }
}

}  // namespace pgmfuse::nn
