#include "pgmfuse/graph.hpp"

#include <array>

namespace pgmfuse::models {

const char* kind_name(ModelKind kind) {
    switch (kind) {
        case ModelKind::kLidar: return "lidar";
        case ModelKind::kEarly: return "early";
        case ModelKind::kMid: return "mid";
        case ModelKind::kLate: return "late";
        case ModelKind::kImage: return "image";
    }
    return "?";
}

ModelKind kind_from_name(const std::string& name) {
    for (const ModelKind k : {ModelKind::kLidar, ModelKind::kEarly, ModelKind::kMid,
                              ModelKind::kLate, ModelKind::kImage}) {
        if (name == kind_name(k)) return k;
    }
    throw ContractError("unknown model kind '" + name + "'");
}

std::vector<int> input_channels(ModelKind kind) {
    switch (kind) {
        case ModelKind::kLidar: return {5};
        case ModelKind::kEarly: return {8};
        case ModelKind::kMid: return {5, 3};
        case ModelKind::kLate: return {10};
        case ModelKind::kImage: return {3};
    }
    return {};
}

std::int64_t ModelGraph::param_count() const {
    std::int64_t total = 0;
    for (const auto& p : params) total += static_cast<std::int64_t>(p.t.size());
    return total;
}

const NamedTensor* ModelGraph::find_param(const std::string& name) const {
    for (const auto& p : params) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

const nn::TensorF& graph_forward(ModelGraph& graph,
                                 std::span<const nn::TensorF> inputs,
                                 RunMode mode, ForwardTape& tape) {
    if (inputs.size() != graph.inputs.size()) {
        throw ContractError("graph_forward: model expects " +
                            std::to_string(graph.inputs.size()) + " inputs, got " +
                            std::to_string(inputs.size()));
    }
    const std::size_t n = graph.nodes.size();
    tape.out.assign(n, {});
    tape.pool_argmax.assign(n, {});
    tape.bn_cache.assign(n, {});

    std::size_t next_input = 0;
    for (std::size_t i = 0; i < n; ++i) {
        NodeSpec& node = graph.nodes[i];
        auto in = [&](int slot) -> const nn::TensorF& {
            return tape.out[static_cast<std::size_t>(node.inputs[slot])];
        };
        switch (node.kind) {
            case OpKind::kInput: {
                const nn::TensorF& x = inputs[next_input++];
                tape.out[i] = x;
                break;
            }
            case OpKind::kConv:
                tape.out[i] = nn::conv2d_forward(in(0), graph.params[node.weight].t,
                                                 graph.params[node.bias].t, node.conv);
                break;
            case OpKind::kDeconv:
                tape.out[i] = nn::deconv2d_forward(in(0), graph.params[node.weight].t,
                                                   graph.params[node.bias].t, node.conv);
                break;
            case OpKind::kMaxPoolW:
                tape.out[i] = nn::maxpool_w_forward(in(0), node.pool_k, node.pool_s,
                                                    &tape.pool_argmax[i]);
                break;
            case OpKind::kBatchNorm:
                tape.out[i] = nn::batchnorm_forward(
                    in(0), graph.params[node.gamma].t, graph.params[node.beta].t,
                    graph.state[node.run_mean].t, graph.state[node.run_var].t,
                    mode == RunMode::kTrain, 0.99,
                    mode == RunMode::kTrain ? &tape.bn_cache[i] : nullptr);
                break;
            case OpKind::kRelu:
                tape.out[i] = nn::relu_forward(in(0));
                break;
            case OpKind::kConcat: {
                std::vector<const nn::TensorF*> parts;
                for (const int id : node.inputs) {
                    parts.push_back(&tape.out[static_cast<std::size_t>(id)]);
                }
                tape.out[i] = nn::concat_forward<float>(parts);
                break;
            }
            case OpKind::kAdd: {
                const nn::TensorF& a = in(0);
                const nn::TensorF& b = in(1);
                if (!a.same_shape(b)) {
                    throw ContractError("add node '" + node.name +
                                        "': operand shapes differ");
                }
                nn::TensorF y = a;
                for (std::size_t j = 0; j < y.v.size(); ++j) y.v[j] += b.v[j];
                tape.out[i] = std::move(y);
                break;
            }
        }
#ifndef NDEBUG
        if (!tape.out[i].all_finite()) {
            throw NumericError("non-finite values after node '" + node.name + "'");
        }
#endif
    }
    return tape.out[static_cast<std::size_t>(graph.output)];
}

std::vector<nn::TensorF> graph_backward(const ModelGraph& graph,
                                        const ForwardTape& tape,
                                        const nn::TensorF& dout) {
    const std::size_t n = graph.nodes.size();
    std::vector<nn::TensorF> dnode(n);
    std::vector<nn::TensorF> dparam(graph.params.size());

    auto accumulate = [](nn::TensorF& dst, nn::TensorF&& src) {
        if (dst.empty()) {
            dst = std::move(src);
            return;
        }
        for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
    };

    dnode[static_cast<std::size_t>(graph.output)] = dout;

    for (std::size_t ri = n; ri-- > 0;) {
        const NodeSpec& node = graph.nodes[ri];
        nn::TensorF& dy = dnode[ri];
        if (dy.empty()) continue;  // node did not influence the output
        auto in_val = [&](int slot) -> const nn::TensorF& {
            return tape.out[static_cast<std::size_t>(node.inputs[slot])];
        };
        auto din = [&](int slot) -> nn::TensorF& {
            return dnode[static_cast<std::size_t>(node.inputs[slot])];
        };
        switch (node.kind) {
            case OpKind::kInput:
                break;
            case OpKind::kConv: {
                nn::TensorF dw, db;
                nn::conv2d_backward_weights(in_val(0), dy, node.conv, dw, db);
                accumulate(dparam[node.weight], std::move(dw));
                accumulate(dparam[node.bias], std::move(db));
                accumulate(din(0),
                           nn::conv2d_backward_data(dy, graph.params[node.weight].t,
                                                    node.conv, in_val(0).h, in_val(0).w));
                break;
            }
            case OpKind::kDeconv: {
                nn::TensorF dx, dw, db;
                nn::deconv2d_backward(in_val(0), graph.params[node.weight].t,
                                      node.conv, dy, dx, dw, db);
                accumulate(dparam[node.weight], std::move(dw));
                accumulate(dparam[node.bias], std::move(db));
                accumulate(din(0), std::move(dx));
                break;
            }
            case OpKind::kMaxPoolW:
                accumulate(din(0),
                           nn::maxpool_w_backward(dy, tape.pool_argmax[ri],
                                                  in_val(0).w, node.pool_k, node.pool_s));
                break;
            case OpKind::kBatchNorm: {
                nn::TensorF dx, dgamma, dbeta;
                nn::batchnorm_backward(tape.bn_cache[ri], graph.params[node.gamma].t,
                                       dy, dx, dgamma, dbeta);
                accumulate(dparam[node.gamma], std::move(dgamma));
                accumulate(dparam[node.beta], std::move(dbeta));
                accumulate(din(0), std::move(dx));
                break;
            }
            case OpKind::kRelu:
                accumulate(din(0), nn::relu_backward(tape.out[ri], dy));
                break;
            case OpKind::kConcat: {
                std::vector<int> channels;
                for (const int id : node.inputs) {
                    channels.push_back(tape.out[static_cast<std::size_t>(id)].c);
                }
                auto parts = nn::concat_backward(dy, std::span<const int>(channels));
                for (std::size_t s = 0; s < parts.size(); ++s) {
                    accumulate(din(static_cast<int>(s)), std::move(parts[s]));
                }
                break;
            }
            case OpKind::kAdd: {
                accumulate(din(0), nn::TensorF(dy));
                accumulate(din(1), nn::TensorF(dy));
                break;
            }
        }
        dy = {};  // free as we go
    }

    // untouched params get zero gradients of the right shape
    for (std::size_t p = 0; p < dparam.size(); ++p) {
        if (dparam[p].empty()) {
            const auto& t = graph.params[p].t;
            dparam[p] = nn::TensorF(t.n, t.h, t.w, t.c);
        }
    }
    return dparam;
}

}  // namespace pgmfuse::models
