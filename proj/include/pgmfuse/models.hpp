#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pgmfuse/geometry.hpp"
#include "pgmfuse/graph.hpp"
#include "pgmfuse/kitti_io.hpp"
#include "pgmfuse/labels.hpp"

namespace pgmfuse::models {

struct BuildConfig {
    int grid_h = 64;
    int grid_w = 512;
    int classes = 16;
    std::uint32_t seed = 1234;
};

// Constructs one of the five architectures. Encoder: conv1 (stride 1x2) ->
// pool -> fire2,3 -> pool -> fire4,5 -> pool -> fire6..9; decoder: four
// fire-deconvs with additive skips from conv1 / fire3 / fire5, then a 3x3
// head to 16 logits. Mid fusion runs a fire-residual image encoder beside
// the LiDAR encoder and fuses by concat + two fire modules. grid_w must be
// divisible by 16 (total encoder stride).
ModelGraph build(ModelKind kind, const BuildConfig& config);

// --- checkpoints -------------------------------------------------------------
// magic "PFCK", u16 version, u8 kind, u32 entry count, entries of
// (u16 name length, name, u8 rank, u32 dims..., float32 payload), u32 CRC32
// over all entry bytes. Params, batchnorm running stats and a meta entry all
// travel as entries.

struct CheckpointMeta {
    std::uint32_t epoch = 0;
    std::uint32_t seed = 0;
    std::uint32_t config_hash = 0;
    int grid_h = 64, grid_w = 512;
};

void save_checkpoint(const std::filesystem::path& path, const ModelGraph& graph,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    ModelGraph graph;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// --- data assembly -----------------------------------------------------------

// Stacks frames into the model's input tensors. Frames must carry at least
// the channels the kind consumes; extra channels are an error (slice at the
// data-preparation layer instead).
std::vector<nn::TensorF> make_inputs(ModelKind kind,
                                     std::span<const geometry::PgmFrame* const> frames);

// Flattened per-cell targets for a batch of frames (row-major, frame-major).
std::vector<std::uint32_t> make_targets(std::span<const geometry::PgmFrame* const> frames);

// --- training ----------------------------------------------------------------

struct TrainConfig {
    int epochs = 350;
    int batch = 64;
    double lr = 0.01;
    double momentum = 0.9;
    double lr_decay = 1.0;  // multiplied in per epoch
    std::uint32_t seed = 1234;
    double stop_miou = 2.0;  // early stop once val mIoU reaches this; >1 = never
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_miou = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> log;
    double best_val_miou = 0.0;
    int best_epoch = -1;
};

// Minibatch SGD on the weighted cross-entropy loss; after every epoch the
// model is scored on the validation frames (eval mode) and the checkpoint at
// checkpoint_path is rewritten whenever validation mIoU improves.
TrainResult train(ModelGraph& graph, std::span<const geometry::PgmFrame> train_frames,
                  std::span<const geometry::PgmFrame> val_frames,
                  const std::array<float, labels::kNumClasses>& class_weights,
                  const TrainConfig& config,
                  const std::optional<std::filesystem::path>& checkpoint_path,
                  const std::function<void(const EpochRecord&)>& on_epoch = nullptr);

// Metric log serialization: one "epoch loss val_miou" line per epoch.
std::string format_metric_log(const std::vector<EpochRecord>& log);

// --- inference ---------------------------------------------------------------

// Argmax class per cell, unmasked cells forced to 0. The frame must carry
// exactly the channels the model kind consumes.
std::vector<std::uint32_t> infer(ModelGraph& graph, const geometry::PgmFrame& frame);

// Raw logits for one frame (eval mode), used by calibration and benchmarks.
nn::TensorF infer_logits(ModelGraph& graph, const geometry::PgmFrame& frame);

// --- decision-level fusion -----------------------------------------------------

// Assembles the 10-channel late-fusion frame for one scan: channels 0..7 from
// projection + colorization, l2 from the LiDAR-space model, l1 by sampling a
// reduced-space image label map at each masked cell's camera pixel (cells
// without a valid projection keep l1 = 0). upstream must be a lidar or early
// kind model.
geometry::PgmFrame late_fusion_prepare(const io::PointCloud& cloud,
                                       const io::Image& image,
                                       const io::CalibrationSet& calib,
                                       ModelGraph& upstream,
                                       const io::LabelImage& reduced_image_labels,
                                       const geometry::FovSpec& fov, int h, int w);

}  // namespace pgmfuse::models
