#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pgmfuse/models.hpp"

namespace pgmfuse::quantize {

struct QuantParams {
    float scale = 1.0f;
    std::int32_t zero_point = 0;  // uint8 range for activations, 0 for weights
};

// Min/max ranges collected by forward passes. Regular sites are per-tensor;
// model input nodes are observed per channel (their scales fold into the
// first conv's weights, keeping the accumulator scale uniform).
struct ObserverState {
    std::map<std::string, std::pair<float, float>> sites;
    std::map<std::string, std::vector<std::pair<float, float>>> input_sites;

    void widen(const std::string& site, float lo, float hi);
};

// Folds batchnorm running statistics into the preceding convolutions,
// producing an equivalent graph with no batchnorm nodes (eval semantics).
models::ModelGraph fold_batchnorm(const models::ModelGraph& graph);

// Float forward passes over the calibration frames, widening every site's
// range monotonically. The graph must already be folded.
ObserverState calibrate(models::ModelGraph& folded,
                        std::span<const geometry::PgmFrame> frames);

struct QuantizedModel {
    models::ModelGraph graph;  // folded skeleton; float params zeroed out

    // indexed by graph param slot; weight slots use int8, bias slots int32
    std::vector<std::vector<std::int8_t>> qweight;
    std::vector<float> weight_scale;
    std::vector<std::vector<std::int32_t>> qbias;
    std::vector<float> bias_scale;  // s_in * s_w

    std::vector<QuantParams> site;  // per node output
    std::vector<std::vector<QuantParams>> input_site;  // per node, per channel

    std::uint64_t float_payload_bytes = 0;  // original checkpoint tensor bytes
    std::uint64_t quant_payload_bytes = 0;  // int8/int32 payload bytes
    std::size_t degenerate_tensors = 0;     // min == max, scale floored

    double size_ratio() const {
        return quant_payload_bytes == 0
                   ? 0.0
                   : static_cast<double>(float_payload_bytes) /
                         static_cast<double>(quant_payload_bytes);
    }
};

// Weights: signed int8, per-tensor symmetric scale max|w|/127. Activations:
// asymmetric uint8 from observed ranges. Biases: int32 at scale s_in * s_w.
// float_payload_bytes reflects the unfolded graph's checkpoint tensors.
QuantizedModel quantize_checkpoint(const models::ModelGraph& original,
                                   const ObserverState& obs);

// Same container family as float checkpoints; the kind byte has bit 7 set
// and every entry carries a dtype byte plus (scale, zero_point).
void save_quantized(const std::filesystem::path& path, const QuantizedModel& model);
QuantizedModel load_quantized(const std::filesystem::path& path);

struct QuantInferResult {
    std::vector<std::uint32_t> labels;
    double elapsed_ms = 0.0;
};

// Integer-arithmetic forward pass: int32 accumulation, requantization to
// uint8 between layers, conv+relu fused. Deterministic for any --threads.
QuantInferResult infer_quantized(const QuantizedModel& model,
                                 const geometry::PgmFrame& frame);

struct QuantTiming {
    double median_ms = 0.0;
    double sigma_ms = 0.0;
};

QuantTiming bench_quantized(const QuantizedModel& model,
                            const geometry::PgmFrame& frame, int runs = 10);

// Mean absolute error between the float (folded) and quantized activations,
// per node, on one probe frame. Feeds the quantization report.
struct LayerError {
    std::string node;
    double mean_abs_error = 0.0;
};

std::vector<LayerError> per_layer_error(models::ModelGraph& folded,
                                        const QuantizedModel& model,
                                        const geometry::PgmFrame& frame);

}  // namespace pgmfuse::quantize
