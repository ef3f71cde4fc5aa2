#include "pgmfuse/quantize.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pgmfuse/threading.hpp"

namespace pgmfuse::quantize {

using models::ModelGraph;
using models::ModelKind;
using models::NodeSpec;
using models::OpKind;

namespace {

constexpr float kScaleFloor = 1e-8f;

QuantParams asymmetric_params(float lo, float hi) {
    lo = std::min(lo, 0.0f);  // keep real zero exactly representable
    hi = std::max(hi, 0.0f);
    float scale = (hi - lo) / 255.0f;
    if (scale < kScaleFloor) scale = kScaleFloor;
    const long zp = std::lround(-static_cast<double>(lo) / scale);
    return {scale, static_cast<std::int32_t>(std::clamp(zp, 0L, 255L))};
}

}  // namespace

void ObserverState::widen(const std::string& site, float lo, float hi) {
    auto it = sites.find(site);
    if (it == sites.end()) {
        sites.emplace(site, std::make_pair(lo, hi));
    } else {
        it->second.first = std::min(it->second.first, lo);
        it->second.second = std::max(it->second.second, hi);
    }
}

// ---- batchnorm folding ---------------------------------------------------------

ModelGraph fold_batchnorm(const ModelGraph& graph) {
    ModelGraph out;
    out.kind = graph.kind;
    out.grid_h = graph.grid_h;
    out.grid_w = graph.grid_w;
    out.classes = graph.classes;

    std::vector<int> remap(graph.nodes.size(), -1);
    std::vector<int> param_remap(graph.params.size(), -1);

    auto copy_param = [&](int slot) {
        if (param_remap[slot] < 0) {
            out.params.push_back(graph.params[static_cast<std::size_t>(slot)]);
            param_remap[slot] = static_cast<int>(out.params.size()) - 1;
        }
        return param_remap[slot];
    };

    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        const NodeSpec& node = graph.nodes[i];
        if (node.kind == OpKind::kBatchNorm) {
            const int src = node.inputs[0];
            const NodeSpec& producer = graph.nodes[static_cast<std::size_t>(src)];
            if (producer.kind != OpKind::kConv && producer.kind != OpKind::kDeconv) {
                throw ContractError("fold_batchnorm: batchnorm '" + node.name +
                                    "' does not follow a convolution");
            }
            // y = gamma * (conv(x) - mean) * invstd + beta folds into the conv
            const auto& gamma = graph.params[node.gamma].t;
            const auto& beta = graph.params[node.beta].t;
            const auto& mean = graph.state[node.run_mean].t;
            const auto& var = graph.state[node.run_var].t;
            const int c = gamma.c;

            nn::TensorF& w = out.params[param_remap[producer.weight]].t;
            nn::TensorF& b = out.params[param_remap[producer.bias]].t;
            for (int ch = 0; ch < c; ++ch) {
                const double invstd = 1.0 / std::sqrt(
                    static_cast<double>(var.v[ch]) + nn::kBatchNormEps);
                const double g = static_cast<double>(gamma.v[ch]) * invstd;
                // conv weight (kh,kw,ci,co): out channel is the last axis
                for (std::size_t k = ch; k < w.v.size(); k += static_cast<std::size_t>(c)) {
                    w.v[k] = static_cast<float>(static_cast<double>(w.v[k]) * g);
                }
                b.v[ch] = static_cast<float>(
                    (static_cast<double>(b.v[ch]) - static_cast<double>(mean.v[ch])) * g +
                    static_cast<double>(beta.v[ch]));
            }
            remap[i] = remap[src];  // consumers read the folded conv
            continue;
        }
        NodeSpec copy = node;
        for (int& in : copy.inputs) in = remap[static_cast<std::size_t>(in)];
        if (copy.weight >= 0) copy.weight = copy_param(copy.weight);
        if (copy.bias >= 0) copy.bias = copy_param(copy.bias);
        out.nodes.push_back(std::move(copy));
        remap[i] = static_cast<int>(out.nodes.size()) - 1;
        if (node.kind == OpKind::kInput) out.inputs.push_back(remap[i]);
    }
    out.output = remap[static_cast<std::size_t>(graph.output)];
    return out;
}

// ---- calibration -----------------------------------------------------------------

ObserverState calibrate(ModelGraph& folded,
                        std::span<const geometry::PgmFrame> frames) {
    if (frames.empty()) throw ContractError("calibrate: no calibration frames");
    ObserverState obs;
    models::ForwardTape tape;
    for (const auto& frame : frames) {
        const geometry::PgmFrame* ptr = &frame;
        const auto inputs = models::make_inputs(
            folded.kind, std::span<const geometry::PgmFrame* const>(&ptr, 1));
        models::graph_forward(folded, inputs, models::RunMode::kEval, tape);
        for (std::size_t i = 0; i < folded.nodes.size(); ++i) {
            const NodeSpec& node = folded.nodes[i];
            const nn::TensorF& t = tape.out[i];
            if (node.kind == OpKind::kInput) {
                auto& chans = obs.input_sites[node.name];
                if (chans.empty()) {
                    chans.assign(static_cast<std::size_t>(t.c),
                                 {std::numeric_limits<float>::max(),
                                  std::numeric_limits<float>::lowest()});
                }
                const std::size_t cells = t.size() / t.c;
                for (std::size_t cell = 0; cell < cells; ++cell) {
                    const float* row = t.v.data() + cell * t.c;
                    for (int ch = 0; ch < t.c; ++ch) {
                        chans[ch].first = std::min(chans[ch].first, row[ch]);
                        chans[ch].second = std::max(chans[ch].second, row[ch]);
                    }
                }
            } else {
                float lo = t.v[0], hi = t.v[0];
                for (const float v : t.v) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                obs.widen(node.name, lo, hi);
            }
        }
    }
    return obs;
}

// ---- quantization -----------------------------------------------------------------

namespace {

// The uint8 tensor a node hands to consumers carries these params: conv,
// deconv and add requantize straight into a following ReLU's range when that
// ReLU is their only consumer (the ReLU then aliases the buffer).
struct QuantPlan {
    std::vector<int> fused_relu;     // per node: relu node id or -1
    std::vector<bool> is_alias;      // relu nodes that became identity
    std::vector<QuantParams> runtime;  // per node, ignoring per-channel inputs
};

QuantPlan plan_sites(const ModelGraph& folded,
                     const std::vector<QuantParams>& own_site) {
    const std::size_t n = folded.nodes.size();
    std::vector<std::vector<int>> consumers(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (const int in : folded.nodes[i].inputs) {
            consumers[static_cast<std::size_t>(in)].push_back(static_cast<int>(i));
        }
    }
    QuantPlan plan;
    plan.fused_relu.assign(n, -1);
    plan.is_alias.assign(n, false);
    plan.runtime.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
        const OpKind kind = folded.nodes[i].kind;
        if ((kind == OpKind::kConv || kind == OpKind::kDeconv || kind == OpKind::kAdd) &&
            consumers[i].size() == 1 &&
            folded.nodes[static_cast<std::size_t>(consumers[i][0])].kind == OpKind::kRelu) {
            plan.fused_relu[i] = consumers[i][0];
            plan.is_alias[static_cast<std::size_t>(consumers[i][0])] = true;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const NodeSpec& node = folded.nodes[i];
        switch (node.kind) {
            case OpKind::kConv:
            case OpKind::kDeconv:
            case OpKind::kAdd:
                plan.runtime[i] = plan.fused_relu[i] >= 0
                                      ? own_site[static_cast<std::size_t>(plan.fused_relu[i])]
                                      : own_site[i];
                break;
            case OpKind::kRelu:
            case OpKind::kMaxPoolW:
                plan.runtime[i] = plan.runtime[static_cast<std::size_t>(node.inputs[0])];
                break;
            case OpKind::kConcat:
            case OpKind::kInput:
                plan.runtime[i] = own_site[i];
                break;
            case OpKind::kBatchNorm:
                throw ContractError("quantize: graph still contains batchnorm");
        }
    }
    return plan;
}

}  // namespace

QuantizedModel quantize_checkpoint(const ModelGraph& original,
                                   const ObserverState& obs) {
    QuantizedModel model;
    model.graph = fold_batchnorm(original);
    ModelGraph& g = model.graph;

    for (const auto& p : original.params) {
        model.float_payload_bytes += p.t.size() * sizeof(float);
    }
    for (const auto& s : original.state) {
        model.float_payload_bytes += s.t.size() * sizeof(float);
    }

    // per-node sites from the observer
    std::vector<QuantParams> own_site(g.nodes.size());
    model.input_site.assign(g.nodes.size(), {});
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const NodeSpec& node = g.nodes[i];
        if (node.kind == OpKind::kInput) {
            const auto it = obs.input_sites.find(node.name);
            if (it == obs.input_sites.end()) {
                throw ContractError("quantize: observer has no range for input '" +
                                    node.name + "'");
            }
            for (const auto& [lo, hi] : it->second) {
                model.input_site[i].push_back(asymmetric_params(lo, hi));
            }
            continue;
        }
        const auto it = obs.sites.find(node.name);
        if (it == obs.sites.end()) {
            throw ContractError("quantize: observer has no range for site '" +
                                node.name + "'");
        }
        own_site[i] = asymmetric_params(it->second.first, it->second.second);
    }

    const QuantPlan plan = plan_sites(g, own_site);
    model.site = plan.runtime;

    model.qweight.assign(g.params.size(), {});
    model.weight_scale.assign(g.params.size(), 0.0f);
    model.qbias.assign(g.params.size(), {});
    model.bias_scale.assign(g.params.size(), 0.0f);

    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const NodeSpec& node = g.nodes[i];
        if (node.kind != OpKind::kConv && node.kind != OpKind::kDeconv) continue;
        const int src = node.inputs[0];
        const bool from_input = g.nodes[static_cast<std::size_t>(src)].kind == OpKind::kInput;

        // fold per-channel input scales into the weight before quantizing
        nn::TensorF w = g.params[node.weight].t;
        double acc_in_scale = 1.0;
        if (from_input) {
            const auto& chans = model.input_site[static_cast<std::size_t>(src)];
            const int ci = node.kind == OpKind::kConv ? w.w : w.c;
            if (static_cast<int>(chans.size()) != ci) {
                throw ContractError("quantize: input channel count mismatch");
            }
            // conv weight (kh,kw,ci,co): ci is axis 2; deconv (kh,kw,co,ci): axis 3
            if (node.kind == OpKind::kConv) {
                for (int kh = 0; kh < w.n; ++kh)
                    for (int kw = 0; kw < w.h; ++kw)
                        for (int c = 0; c < w.w; ++c)
                            for (int co = 0; co < w.c; ++co)
                                w.at(kh, kw, c, co) *= chans[c].scale;
            } else {
                for (std::size_t k = 0; k < w.v.size(); ++k) {
                    w.v[k] *= chans[k % chans.size()].scale;
                }
            }
        } else {
            acc_in_scale = plan.runtime[static_cast<std::size_t>(src)].scale;
        }

        float wmax = 0.0f;
        for (const float v : w.v) wmax = std::max(wmax, std::abs(v));
        float wscale = wmax / 127.0f;
        if (wscale < kScaleFloor) {
            wscale = kScaleFloor;
            ++model.degenerate_tensors;
        }
        auto& qw = model.qweight[node.weight];
        qw.resize(w.v.size());
        for (std::size_t k = 0; k < w.v.size(); ++k) {
            const long q = std::lround(w.v[k] / wscale);
            qw[k] = static_cast<std::int8_t>(std::clamp(q, -127L, 127L));
        }
        model.weight_scale[node.weight] = wscale;

        const double bscale = acc_in_scale * static_cast<double>(wscale);
        const auto& b = g.params[node.bias].t;
        auto& qb = model.qbias[node.bias];
        qb.resize(b.v.size());
        for (std::size_t k = 0; k < b.v.size(); ++k) {
            const double q = std::nearbyint(static_cast<double>(b.v[k]) / bscale);
            qb[k] = static_cast<std::int32_t>(std::clamp(
                q, static_cast<double>(std::numeric_limits<std::int32_t>::min()),
                static_cast<double>(std::numeric_limits<std::int32_t>::max())));
        }
        model.bias_scale[node.bias] = static_cast<float>(bscale);
    }

    for (const auto& qw : model.qweight) model.quant_payload_bytes += qw.size();
    for (const auto& qb : model.qbias) {
        model.quant_payload_bytes += qb.size() * sizeof(std::int32_t);
    }

    // zero the float params in the skeleton: the quantized file carries no
    // float weights
    for (auto& p : g.params) p.t.fill(0.0f);
    return model;
}

// ---- integer inference --------------------------------------------------------------

namespace {

struct QTensor {
    int n = 0, h = 0, w = 0, c = 0;
    std::vector<std::uint8_t> q;

    QTensor() = default;
    QTensor(int n_, int h_, int w_, int c_)
        : n(n_), h(h_), w(w_), c(c_),
          q(static_cast<std::size_t>(n_) * h_ * w_ * c_, 0) {}
};

using IntMatrix =
    Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::uint8_t requant_one(std::int64_t acc, double m, int zp) {
    const long q = std::lround(static_cast<double>(acc) * m) + zp;
    return static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
}

// int32 im2col with zero-point subtraction; padding contributes exact zeros.
void im2col_int(const std::uint8_t* x, int h, int w, int c,
                const nn::Conv2dSpec& sp, int oy, int ox,
                std::span<const std::int32_t> zp, std::int32_t* row) {
    for (int ky = 0; ky < sp.kh; ++ky) {
        const int iy = oy * sp.sh - sp.ph + ky;
        std::int32_t* dst = row + static_cast<std::size_t>(ky) * sp.kw * c;
        for (int kx = 0; kx < sp.kw; ++kx) {
            const int ix = ox * sp.sw - sp.pw + kx;
            std::int32_t* d = dst + static_cast<std::size_t>(kx) * c;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                std::fill(d, d + c, 0);
            } else {
                const std::uint8_t* src = x + (static_cast<std::size_t>(iy) * w + ix) * c;
                for (int ch = 0; ch < c; ++ch) {
                    d[ch] = static_cast<std::int32_t>(src[ch]) -
                            zp[static_cast<std::size_t>(zp.size() == 1 ? 0 : ch)];
                }
            }
        }
    }
}

struct QuantExec {
    const QuantizedModel& model;
    std::vector<QTensor> out;
    nn::TensorF head_logits;  // float logits of the output node
    std::vector<nn::TensorF>* capture = nullptr;  // dequantized, for reports

    explicit QuantExec(const QuantizedModel& m)
        : model(m), out(m.graph.nodes.size()) {}

    std::span<const std::int32_t> input_zps(int node, std::vector<std::int32_t>& buf) const {
        const auto& chans = model.input_site[static_cast<std::size_t>(node)];
        buf.resize(chans.size());
        for (std::size_t i = 0; i < chans.size(); ++i) buf[i] = chans[i].zero_point;
        return buf;
    }

    void conv_like(std::size_t i, bool deconv) {
        const NodeSpec& node = model.graph.nodes[i];
        const int src = node.inputs[0];
        const QTensor& x = out[static_cast<std::size_t>(src)];
        const auto& wq = model.qweight[node.weight];
        const auto& bq = model.qbias[node.bias];
        const nn::TensorF& wshape = model.graph.params[node.weight].t;
        const bool from_input =
            model.graph.nodes[static_cast<std::size_t>(src)].kind == OpKind::kInput;

        std::vector<std::int32_t> zpbuf;
        std::span<const std::int32_t> zps;
        if (from_input) {
            zps = input_zps(src, zpbuf);
        } else {
            zpbuf = {model.site[static_cast<std::size_t>(src)].zero_point};
            zps = zpbuf;
        }

        const double acc_scale = model.bias_scale[node.bias];
        const bool is_head = static_cast<int>(i) == model.graph.output;
        const QuantParams out_qp = model.site[i];
        const double m = acc_scale / out_qp.scale;

        if (!deconv) {
            const int ci = wshape.w, co = wshape.c;
            const int oh = node.conv.out_h(x.h), ow = node.conv.out_w(x.w);
            const std::size_t kdim = static_cast<std::size_t>(node.conv.kh) * node.conv.kw * ci;
            IntMatrix wm(static_cast<Eigen::Index>(kdim), co);
            for (std::size_t k = 0; k < wq.size(); ++k) {
                wm.data()[k] = static_cast<std::int32_t>(wq[k]);
            }
            QTensor y(x.n, oh, ow, co);
            if (is_head) head_logits = nn::TensorF(x.n, oh, ow, co);
            const std::size_t rows = static_cast<std::size_t>(oh) * ow;
            for (int item = 0; item < x.n; ++item) {
                const std::uint8_t* xi =
                    x.q.data() + static_cast<std::size_t>(item) * x.h * x.w * x.c;
                threading::parallel_chunks(rows, 512, [&](std::size_t r0, std::size_t r1) {
                    IntMatrix patch(static_cast<Eigen::Index>(r1 - r0),
                                    static_cast<Eigen::Index>(kdim));
                    for (std::size_t r = r0; r < r1; ++r) {
                        im2col_int(xi, x.h, x.w, x.c, node.conv,
                                   static_cast<int>(r / ow), static_cast<int>(r % ow),
                                   zps, patch.data() + (r - r0) * kdim);
                    }
                    IntMatrix acc = patch * wm;
                    for (std::size_t r = r0; r < r1; ++r) {
                        for (int ch = 0; ch < co; ++ch) {
                            const std::int64_t a =
                                static_cast<std::int64_t>(acc(static_cast<Eigen::Index>(r - r0), ch)) +
                                bq[static_cast<std::size_t>(ch)];
                            const std::size_t off =
                                (static_cast<std::size_t>(item) * rows + r) * co + ch;
                            if (is_head) {
                                head_logits.v[off] = static_cast<float>(
                                    static_cast<double>(a) * acc_scale);
                            } else {
                                y.q[off] = requant_one(a, m, out_qp.zero_point);
                            }
                        }
                    }
                });
            }
            out[i] = std::move(y);
        } else {
            // transposed conv: scatter-add int32 accumulators, then requantize
            const int co = wshape.w, ci = wshape.c;
            const int oh = node.conv.deconv_out_h(x.h), ow = node.conv.deconv_out_w(x.w);
            const std::size_t kdim = static_cast<std::size_t>(node.conv.kh) * node.conv.kw * co;
            IntMatrix wm(static_cast<Eigen::Index>(kdim), ci);
            for (std::size_t k = 0; k < wq.size(); ++k) {
                wm.data()[k] = static_cast<std::int32_t>(wq[k]);
            }
            QTensor y(x.n, oh, ow, co);
            const std::size_t out_cells = static_cast<std::size_t>(oh) * ow;
            const std::size_t in_rows = static_cast<std::size_t>(x.h) * x.w;
            std::vector<std::int64_t> acc(out_cells * co);
            for (int item = 0; item < x.n; ++item) {
                std::fill(acc.begin(), acc.end(), 0);
                const std::uint8_t* xi =
                    x.q.data() + static_cast<std::size_t>(item) * in_rows * ci;
                IntMatrix xm(static_cast<Eigen::Index>(in_rows), ci);
                for (std::size_t k = 0; k < in_rows * static_cast<std::size_t>(ci); ++k) {
                    xm.data()[k] = static_cast<std::int32_t>(xi[k]) - zps[0];
                }
                IntMatrix patch = xm * wm.transpose();  // in_rows x kdim
                for (std::size_t r = 0; r < in_rows; ++r) {
                    const int oy = static_cast<int>(r / x.w), ox = static_cast<int>(r % x.w);
                    for (int ky = 0; ky < node.conv.kh; ++ky) {
                        const int iy = oy * node.conv.sh - node.conv.ph + ky;
                        if (iy < 0 || iy >= oh) continue;
                        for (int kx = 0; kx < node.conv.kw; ++kx) {
                            const int ix = ox * node.conv.sw - node.conv.pw + kx;
                            if (ix < 0 || ix >= ow) continue;
                            const std::int32_t* src =
                                patch.data() + r * kdim +
                                (static_cast<std::size_t>(ky) * node.conv.kw + kx) * co;
                            std::int64_t* dst =
                                acc.data() + (static_cast<std::size_t>(iy) * ow + ix) * co;
                            for (int ch = 0; ch < co; ++ch) dst[ch] += src[ch];
                        }
                    }
                }
                for (std::size_t cell = 0; cell < out_cells; ++cell) {
                    for (int ch = 0; ch < co; ++ch) {
                        const std::int64_t a =
                            acc[cell * co + ch] + bq[static_cast<std::size_t>(ch)];
                        y.q[(static_cast<std::size_t>(item) * out_cells + cell) * co + ch] =
                            requant_one(a, m, out_qp.zero_point);
                    }
                }
            }
            out[i] = std::move(y);
        }
    }

    void run(std::span<const nn::TensorF> inputs) {
        std::size_t next_input = 0;
        for (std::size_t i = 0; i < model.graph.nodes.size(); ++i) {
            const NodeSpec& node = model.graph.nodes[i];
            switch (node.kind) {
                case OpKind::kInput: {
                    const nn::TensorF& x = inputs[next_input++];
                    QTensor q(x.n, x.h, x.w, x.c);
                    const auto& chans = model.input_site[i];
                    const std::size_t cells = x.size() / x.c;
                    for (std::size_t cell = 0; cell < cells; ++cell) {
                        for (int ch = 0; ch < x.c; ++ch) {
                            const QuantParams& qp = chans[static_cast<std::size_t>(ch)];
                            const long v = std::lround(
                                static_cast<double>(x.v[cell * x.c + ch]) / qp.scale) +
                                qp.zero_point;
                            q.q[cell * x.c + ch] =
                                static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
                        }
                    }
                    out[i] = std::move(q);
                    break;
                }
                case OpKind::kConv:
                    conv_like(i, false);
                    break;
                case OpKind::kDeconv:
                    conv_like(i, true);
                    break;
                case OpKind::kRelu: {
                    const QTensor& x = out[static_cast<std::size_t>(node.inputs[0])];
                    const int producer = node.inputs[0];
                    bool aliased = false;
                    // fused producers already requantized into this site
                    const OpKind pk = model.graph.nodes[static_cast<std::size_t>(producer)].kind;
                    if (pk == OpKind::kConv || pk == OpKind::kDeconv || pk == OpKind::kAdd) {
                        aliased = model.site[static_cast<std::size_t>(producer)].scale ==
                                      model.site[i].scale &&
                                  model.site[static_cast<std::size_t>(producer)].zero_point ==
                                      model.site[i].zero_point;
                    }
                    QTensor y = x;
                    if (!aliased) {
                        const std::uint8_t zp = static_cast<std::uint8_t>(
                            model.site[static_cast<std::size_t>(producer)].zero_point);
                        for (auto& v : y.q) v = std::max(v, zp);
                    }
                    out[i] = std::move(y);
                    break;
                }
                case OpKind::kMaxPoolW: {
                    const QTensor& x = out[static_cast<std::size_t>(node.inputs[0])];
                    const int ow = (x.w - node.pool_k) / node.pool_s + 1;
                    QTensor y(x.n, x.h, ow, x.c);
                    const std::size_t rows = static_cast<std::size_t>(x.n) * x.h;
                    for (std::size_t row = 0; row < rows; ++row) {
                        const std::uint8_t* xr = x.q.data() + row * x.w * x.c;
                        std::uint8_t* yr = y.q.data() + row * static_cast<std::size_t>(ow) * x.c;
                        for (int ox = 0; ox < ow; ++ox) {
                            for (int ch = 0; ch < x.c; ++ch) {
                                std::uint8_t best = xr[static_cast<std::size_t>(ox * node.pool_s) * x.c + ch];
                                for (int kk = 1; kk < node.pool_k; ++kk) {
                                    best = std::max(best,
                                                    xr[static_cast<std::size_t>(ox * node.pool_s + kk) * x.c + ch]);
                                }
                                yr[static_cast<std::size_t>(ox) * x.c + ch] = best;
                            }
                        }
                    }
                    out[i] = std::move(y);
                    break;
                }
                case OpKind::kConcat: {
                    const QuantParams out_qp = model.site[i];
                    int c_total = 0;
                    for (const int id : node.inputs) {
                        c_total += out[static_cast<std::size_t>(id)].c;
                    }
                    const QTensor& first = out[static_cast<std::size_t>(node.inputs[0])];
                    QTensor y(first.n, first.h, first.w, c_total);
                    const std::size_t cells = y.q.size() / c_total;
                    for (std::size_t cell = 0; cell < cells; ++cell) {
                        std::uint8_t* dst = y.q.data() + cell * c_total;
                        for (const int id : node.inputs) {
                            const QTensor& part = out[static_cast<std::size_t>(id)];
                            const QuantParams in_qp = model.site[static_cast<std::size_t>(id)];
                            const double m = static_cast<double>(in_qp.scale) / out_qp.scale;
                            const std::uint8_t* src = part.q.data() + cell * part.c;
                            for (int ch = 0; ch < part.c; ++ch) {
                                const long q = std::lround(
                                    (static_cast<double>(src[ch]) - in_qp.zero_point) * m) +
                                    out_qp.zero_point;
                                dst[ch] = static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
                            }
                            dst += part.c;
                        }
                    }
                    out[i] = std::move(y);
                    break;
                }
                case OpKind::kAdd: {
                    const QTensor& a = out[static_cast<std::size_t>(node.inputs[0])];
                    const QTensor& b = out[static_cast<std::size_t>(node.inputs[1])];
                    const QuantParams qa = model.site[static_cast<std::size_t>(node.inputs[0])];
                    const QuantParams qb = model.site[static_cast<std::size_t>(node.inputs[1])];
                    const QuantParams qo = model.site[i];
                    QTensor y(a.n, a.h, a.w, a.c);
                    for (std::size_t k = 0; k < y.q.size(); ++k) {
                        const double real =
                            static_cast<double>(qa.scale) * (static_cast<double>(a.q[k]) - qa.zero_point) +
                            static_cast<double>(qb.scale) * (static_cast<double>(b.q[k]) - qb.zero_point);
                        const long q = std::lround(real / qo.scale) + qo.zero_point;
                        y.q[k] = static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
                    }
                    out[i] = std::move(y);
                    break;
                }
                case OpKind::kBatchNorm:
                    throw ContractError("quantized graph contains batchnorm");
            }
            if (capture) {
                const std::size_t idx = i;
                if (static_cast<int>(idx) == model.graph.output) {
                    (*capture)[idx] = head_logits;
                } else {
                    const QTensor& t = out[idx];
                    const QuantParams qp = model.site[idx];
                    nn::TensorF f(t.n, t.h, t.w, t.c);
                    if (model.graph.nodes[idx].kind == OpKind::kInput) {
                        const auto& chans = model.input_site[idx];
                        const std::size_t cells = f.size() / f.c;
                        for (std::size_t cell = 0; cell < cells; ++cell) {
                            for (int ch = 0; ch < f.c; ++ch) {
                                const QuantParams& cq = chans[static_cast<std::size_t>(ch)];
                                f.v[cell * f.c + ch] = cq.scale *
                                    (static_cast<float>(t.q[cell * f.c + ch]) - cq.zero_point);
                            }
                        }
                    } else {
                        for (std::size_t k = 0; k < f.v.size(); ++k) {
                            f.v[k] = qp.scale * (static_cast<float>(t.q[k]) - qp.zero_point);
                        }
                    }
                    (*capture)[idx] = std::move(f);
                }
            }
        }
    }
};

}  // namespace

QuantInferResult infer_quantized(const QuantizedModel& model,
                                 const geometry::PgmFrame& frame) {
    const geometry::PgmFrame* ptr = &frame;
    const auto inputs = models::make_inputs(
        model.graph.kind, std::span<const geometry::PgmFrame* const>(&ptr, 1));

    const auto t0 = std::chrono::steady_clock::now();
    QuantExec exec(model);
    exec.run(inputs);
    const auto t1 = std::chrono::steady_clock::now();

    const nn::TensorF& logits = exec.head_logits;
    const std::size_t cells = static_cast<std::size_t>(logits.h) * logits.w;
    QuantInferResult result;
    result.labels.assign(cells, 0);
    for (std::size_t i = 0; i < cells; ++i) {
        if (!frame.mask[i]) continue;
        const float* row = logits.v.data() + i * logits.c;
        int best = 0;
        for (int ch = 1; ch < logits.c; ++ch) {
            if (row[ch] > row[best]) best = ch;
        }
        result.labels[i] = static_cast<std::uint32_t>(best);
    }
    result.elapsed_ms =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
    return result;
}

QuantTiming bench_quantized(const QuantizedModel& model,
                            const geometry::PgmFrame& frame, int runs) {
    if (runs < 1) runs = 1;
    std::vector<double> times;
    for (int i = 0; i < runs; ++i) {
        times.push_back(infer_quantized(model, frame).elapsed_ms);
    }
    std::sort(times.begin(), times.end());
    QuantTiming t;
    t.median_ms = times[times.size() / 2];
    double mean = 0.0;
    for (const double v : times) mean += v;
    mean /= static_cast<double>(times.size());
    double var = 0.0;
    for (const double v : times) var += (v - mean) * (v - mean);
    t.sigma_ms = std::sqrt(var / static_cast<double>(times.size()));
    return t;
}

std::vector<LayerError> per_layer_error(models::ModelGraph& folded,
                                        const QuantizedModel& model,
                                        const geometry::PgmFrame& frame) {
    const geometry::PgmFrame* ptr = &frame;
    const auto inputs = models::make_inputs(
        folded.kind, std::span<const geometry::PgmFrame* const>(&ptr, 1));

    models::ForwardTape tape;
    models::graph_forward(folded, inputs, models::RunMode::kEval, tape);

    std::vector<nn::TensorF> qout(model.graph.nodes.size());
    QuantExec exec(model);
    exec.capture = &qout;
    exec.run(inputs);

    std::vector<LayerError> errors;
    for (std::size_t i = 0; i < folded.nodes.size(); ++i) {
        const auto& a = tape.out[i];
        const auto& b = qout[i];
        if (a.empty() || b.empty() || a.v.size() != b.v.size()) continue;
        double sum = 0.0;
        for (std::size_t k = 0; k < a.v.size(); ++k) {
            sum += std::abs(static_cast<double>(a.v[k]) - static_cast<double>(b.v[k]));
        }
        errors.push_back({folded.nodes[i].name, sum / static_cast<double>(a.v.size())});
    }
    return errors;
}

// ---- serialization ---------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'F', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kQuantFlag = 0x80;

enum Dtype : std::uint8_t { kDtypeNone = 0, kDtypeI8 = 1, kDtypeI32 = 2, kDtypeF32 = 3 };

struct Writer {
    std::vector<char> buf;
    template <typename T>
    void put(T x) {
        const char* p = reinterpret_cast<const char*>(&x);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void raw(const void* p, std::size_t size) {
        const char* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + size);
    }
    void name(const std::string& s) {
        put(static_cast<std::uint16_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
};

}  // namespace

void save_quantized(const std::filesystem::path& path, const QuantizedModel& model) {
    const ModelGraph& g = model.graph;
    Writer w;

    const std::uint32_t entries =
        1 + static_cast<std::uint32_t>(g.params.size() + g.nodes.size());

    // meta: grid dims, classes, float payload byte count split into u16 halves
    {
        w.name("__meta__");
        w.put(static_cast<std::uint8_t>(1));
        w.put(static_cast<std::uint32_t>(6));
        w.put(static_cast<std::uint8_t>(kDtypeI32));
        w.put(1.0f);
        w.put(static_cast<std::int32_t>(0));
        const std::int32_t vals[6] = {
            g.grid_h,
            g.grid_w,
            g.classes,
            static_cast<std::int32_t>(model.float_payload_bytes & 0xFFFFFFFFull),
            static_cast<std::int32_t>(model.float_payload_bytes >> 32),
            static_cast<std::int32_t>(model.degenerate_tensors),
        };
        w.raw(vals, sizeof(vals));
    }
    for (std::size_t i = 0; i < g.params.size(); ++i) {
        const auto& t = g.params[i].t;
        if (!model.qweight[i].empty()) {
            w.name(g.params[i].name);
            w.put(static_cast<std::uint8_t>(4));
            w.put(static_cast<std::uint32_t>(t.n));
            w.put(static_cast<std::uint32_t>(t.h));
            w.put(static_cast<std::uint32_t>(t.w));
            w.put(static_cast<std::uint32_t>(t.c));
            w.put(static_cast<std::uint8_t>(kDtypeI8));
            w.put(model.weight_scale[i]);
            w.put(static_cast<std::int32_t>(0));
            w.raw(model.qweight[i].data(), model.qweight[i].size());
        } else if (!model.qbias[i].empty()) {
            w.name(g.params[i].name);
            w.put(static_cast<std::uint8_t>(4));
            w.put(static_cast<std::uint32_t>(t.n));
            w.put(static_cast<std::uint32_t>(t.h));
            w.put(static_cast<std::uint32_t>(t.w));
            w.put(static_cast<std::uint32_t>(t.c));
            w.put(static_cast<std::uint8_t>(kDtypeI32));
            w.put(model.bias_scale[i]);
            w.put(static_cast<std::int32_t>(0));
            w.raw(model.qbias[i].data(), model.qbias[i].size() * sizeof(std::int32_t));
        } else {
            throw ContractError("save_quantized: param '" + g.params[i].name +
                                "' was never quantized");
        }
    }
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const NodeSpec& node = g.nodes[i];
        if (node.kind == OpKind::kInput) {
            w.name("actc:" + node.name);
            const auto& chans = model.input_site[i];
            w.put(static_cast<std::uint8_t>(1));
            w.put(static_cast<std::uint32_t>(chans.size() * 2));
            w.put(static_cast<std::uint8_t>(kDtypeF32));
            w.put(1.0f);
            w.put(static_cast<std::int32_t>(0));
            for (const auto& qp : chans) w.put(qp.scale);
            for (const auto& qp : chans) w.put(static_cast<float>(qp.zero_point));
        } else {
            w.name("act:" + node.name);
            w.put(static_cast<std::uint8_t>(0));  // rank 0, no payload
            w.put(static_cast<std::uint8_t>(kDtypeNone));
            w.put(model.site[i].scale);
            w.put(model.site[i].zero_point);
        }
    }

    std::vector<char> header;
    header.insert(header.end(), kMagic, kMagic + 4);
    auto put_header = [&header](auto x) {
        const char* p = reinterpret_cast<const char*>(&x);
        header.insert(header.end(), p, p + sizeof(x));
    };
    put_header(kVersion);
    put_header(static_cast<std::uint8_t>(static_cast<std::uint8_t>(g.kind) | kQuantFlag));
    put_header(entries);

    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(w.buf.data()),
              static_cast<uInt>(w.buf.size())));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!out) throw IoError("short write on " + path.string());
}

QuantizedModel load_quantized(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open quantized checkpoint " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
    if (buf.size() < 15 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a PFCK container");
    }
    const char* p = buf.data() + 4;
    auto take = [&](auto& x) {
        std::memcpy(&x, p, sizeof(x));
        p += sizeof(x);
    };
    std::uint16_t version = 0;
    std::uint8_t kind_byte = 0;
    std::uint32_t entries = 0;
    take(version);
    take(kind_byte);
    take(entries);
    if (version != kVersion) {
        throw FormatError(path.string() + ": unsupported version");
    }
    if (!(kind_byte & kQuantFlag)) {
        throw FormatError(path.string() + ": not a quantized checkpoint");
    }
    const auto kind = static_cast<ModelKind>(kind_byte & 0x7F);
    if ((kind_byte & 0x7Fu) > static_cast<std::uint8_t>(ModelKind::kImage)) {
        throw FormatError(path.string() + ": unknown model kind");
    }

    const char* entries_begin = p;
    const char* end = buf.data() + buf.size() - 4;
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, end, 4);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(entries_begin),
              static_cast<uInt>(end - entries_begin)));
    if (crc != stored_crc) {
        throw FormatError(path.string() + ": CRC mismatch, file is corrupted");
    }

    struct Entry {
        std::string name;
        std::vector<std::uint32_t> dims;
        std::uint8_t dtype = kDtypeNone;
        float scale = 1.0f;
        std::int32_t zero_point = 0;
        std::vector<char> payload;
    };
    std::vector<Entry> raw;
    auto need = [&](std::size_t k) {
        if (static_cast<std::size_t>(end - p) < k) {
            throw FormatError(path.string() + ": truncated entry table");
        }
    };
    for (std::uint32_t i = 0; i < entries; ++i) {
        Entry e;
        std::uint16_t name_len = 0;
        need(2);
        take(name_len);
        need(name_len);
        e.name.assign(p, name_len);
        p += name_len;
        std::uint8_t rank = 0;
        need(1);
        take(rank);
        std::size_t count = 1;
        for (int d = 0; d < rank; ++d) {
            std::uint32_t dim = 0;
            need(4);
            take(dim);
            e.dims.push_back(dim);
            count *= dim;
        }
        if (rank == 0) count = 0;
        need(1 + 4 + 4);
        take(e.dtype);
        take(e.scale);
        take(e.zero_point);
        const std::size_t elem = e.dtype == kDtypeI8 ? 1 : e.dtype == kDtypeNone ? 0 : 4;
        need(count * elem);
        e.payload.assign(p, p + count * elem);
        p += count * elem;
        raw.push_back(std::move(e));
    }
    if (p != end) throw FormatError(path.string() + ": trailing bytes");

    const Entry* meta = nullptr;
    for (const auto& e : raw) {
        if (e.name == "__meta__") meta = &e;
    }
    if (!meta || meta->payload.size() != 6 * sizeof(std::int32_t)) {
        throw FormatError(path.string() + ": missing meta entry");
    }
    std::int32_t mvals[6];
    std::memcpy(mvals, meta->payload.data(), sizeof(mvals));

    models::BuildConfig cfg;
    cfg.grid_h = mvals[0];
    cfg.grid_w = mvals[1];
    cfg.classes = mvals[2];

    QuantizedModel model;
    model.graph = fold_batchnorm(models::build(kind, cfg));
    for (auto& prm : model.graph.params) prm.t.fill(0.0f);
    model.float_payload_bytes =
        (static_cast<std::uint64_t>(static_cast<std::uint32_t>(mvals[4])) << 32) |
        static_cast<std::uint32_t>(mvals[3]);
    model.degenerate_tensors = static_cast<std::size_t>(mvals[5]);

    ModelGraph& g = model.graph;
    model.qweight.assign(g.params.size(), {});
    model.weight_scale.assign(g.params.size(), 0.0f);
    model.qbias.assign(g.params.size(), {});
    model.bias_scale.assign(g.params.size(), 0.0f);
    model.site.assign(g.nodes.size(), {});
    model.input_site.assign(g.nodes.size(), {});

    auto find_entry = [&](const std::string& name) -> const Entry* {
        for (const auto& e : raw) {
            if (e.name == name) return &e;
        }
        return nullptr;
    };

    for (std::size_t i = 0; i < g.params.size(); ++i) {
        const Entry* e = find_entry(g.params[i].name);
        if (!e) {
            throw FormatError(path.string() + ": missing tensor '" +
                              g.params[i].name + "'");
        }
        const auto& t = g.params[i].t;
        if (e->dims.size() != 4 || static_cast<int>(e->dims[0]) != t.n ||
            static_cast<int>(e->dims[1]) != t.h || static_cast<int>(e->dims[2]) != t.w ||
            static_cast<int>(e->dims[3]) != t.c) {
            throw FormatError(path.string() + ": tensor '" + g.params[i].name +
                              "' has unexpected shape");
        }
        if (e->dtype == kDtypeI8) {
            model.qweight[i].resize(e->payload.size());
            std::memcpy(model.qweight[i].data(), e->payload.data(), e->payload.size());
            model.weight_scale[i] = e->scale;
            model.quant_payload_bytes += e->payload.size();
        } else if (e->dtype == kDtypeI32) {
            model.qbias[i].resize(e->payload.size() / sizeof(std::int32_t));
            std::memcpy(model.qbias[i].data(), e->payload.data(), e->payload.size());
            model.bias_scale[i] = e->scale;
            model.quant_payload_bytes += e->payload.size();
        } else {
            throw FormatError(path.string() + ": tensor '" + g.params[i].name +
                              "' has unexpected dtype");
        }
    }
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const NodeSpec& node = g.nodes[i];
        if (node.kind == OpKind::kInput) {
            const Entry* e = find_entry("actc:" + node.name);
            if (!e || e->dtype != kDtypeF32 || e->dims.size() != 1 || e->dims[0] % 2) {
                throw FormatError(path.string() + ": bad input site for '" +
                                  node.name + "'");
            }
            const std::size_t c = e->dims[0] / 2;
            std::vector<float> vals(e->dims[0]);
            std::memcpy(vals.data(), e->payload.data(), e->payload.size());
            for (std::size_t ch = 0; ch < c; ++ch) {
                model.input_site[i].push_back(
                    {vals[ch], static_cast<std::int32_t>(vals[c + ch])});
            }
        } else {
            const Entry* e = find_entry("act:" + node.name);
            if (!e) {
                throw FormatError(path.string() + ": missing site for '" +
                                  node.name + "'");
            }
            model.site[i] = {e->scale, e->zero_point};
        }
    }
    return model;
}

}  // namespace pgmfuse::quantize
