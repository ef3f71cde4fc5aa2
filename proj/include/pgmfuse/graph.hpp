#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pgmfuse/nn_core.hpp"

namespace pgmfuse::models {

enum class ModelKind : std::uint8_t {
    kLidar = 0,  // 5-channel polar grid
    kEarly = 1,  // 8 channels, rgb fused at the input
    kMid = 2,    // 5-channel grid + 3-channel image branch
    kLate = 3,   // 10 channels incl. the two decision channels
    kImage = 4,  // rgb-only helper model for decision-level fusion
};

const char* kind_name(ModelKind kind);
ModelKind kind_from_name(const std::string& name);

// Input channel counts per kind, in input-node order.
std::vector<int> input_channels(ModelKind kind);

enum class OpKind : std::uint8_t {
    kInput,
    kConv,
    kDeconv,
    kMaxPoolW,
    kBatchNorm,
    kRelu,
    kConcat,
    kAdd,
};

struct NamedTensor {
    std::string name;
    nn::TensorF t;
};

// One primitive layer. Composite blocks (fire, fire-residual, fire-deconv)
// are emitted as primitive runs by the builders in models.cpp.
struct NodeSpec {
    OpKind kind = OpKind::kInput;
    std::string name;
    std::vector<int> inputs;  // node ids, topological order guaranteed

    nn::Conv2dSpec conv;      // conv / deconv geometry
    int pool_k = 2, pool_s = 2;

    int weight = -1, bias = -1;    // param slots (conv/deconv)
    int gamma = -1, beta = -1;     // param slots (batchnorm)
    int run_mean = -1, run_var = -1;  // state slots (batchnorm)
};

struct ModelGraph {
    ModelKind kind = ModelKind::kLidar;
    int grid_h = 64, grid_w = 512;
    int classes = 16;

    std::vector<NodeSpec> nodes;
    std::vector<NamedTensor> params;  // trainable
    std::vector<NamedTensor> state;   // batchnorm running stats
    std::vector<int> inputs;          // input node ids
    int output = -1;

    std::int64_t param_count() const;
    const NamedTensor* find_param(const std::string& name) const;
};

enum class RunMode { kTrain, kEval };

struct ForwardTape {
    std::vector<nn::TensorF> out;  // per node
    std::vector<std::vector<std::int32_t>> pool_argmax;
    std::vector<nn::BatchNormCache<float>> bn_cache;
};

// Runs the graph in topological order. Train mode uses batch statistics and
// updates the graph's running stats in place. Throws NumericError if a node
// output stops being finite.
const nn::TensorF& graph_forward(ModelGraph& graph,
                                 std::span<const nn::TensorF> inputs,
                                 RunMode mode, ForwardTape& tape);

// Gradients for every param slot, same order as graph.params.
std::vector<nn::TensorF> graph_backward(const ModelGraph& graph,
                                        const ForwardTape& tape,
                                        const nn::TensorF& dout);

}  // namespace pgmfuse::models
