#include "pgmfuse/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "pgmfuse/config.hpp"
#include "pgmfuse/evaluate.hpp"
#include "pgmfuse/geometry.hpp"
#include "pgmfuse/kitti_io.hpp"
#include "pgmfuse/labels.hpp"
#include "pgmfuse/models.hpp"
#include "pgmfuse/quantize.hpp"
#include "pgmfuse/threading.hpp"

namespace pgmfuse::cli {
namespace fs = std::filesystem;

namespace {

struct Common {
    cfg::Config config;
    std::string root;
    std::string out;
    int grid_h = 64;
    int grid_w = 512;
    double eps = 1.02;
    std::uint32_t seed = 1234;
    int threads = 0;  // 0 = all cores
    std::string proj_key = "P2";
    std::string kitti_map_path;
    std::string cityscapes_map_path;

    geometry::FovSpec fov;
    labels::ClassSpec classes = labels::ClassSpec::builtin();

    void finalize() {
        threading::set_thread_count(
            threads > 0 ? threads
                        : static_cast<int>(std::thread::hardware_concurrency()));
        if (!kitti_map_path.empty()) {
            classes.kitti_map = labels::read_class_map(kitti_map_path);
        }
        if (!cityscapes_map_path.empty()) {
            classes.cityscapes_map = labels::read_class_map(cityscapes_map_path);
        }
    }
};

// Config file values become flag defaults; explicit flags win.
void apply_config(Common& common) {
    const cfg::Config& c = common.config;
    common.root = c.get("root", common.root);
    common.out = c.get("out", common.out);
    common.grid_h = c.get_int("grid.h", common.grid_h);
    common.grid_w = c.get_int("grid.w", common.grid_w);
    common.eps = c.get_double("eps", common.eps);
    common.seed = static_cast<std::uint32_t>(c.get_int("seed", static_cast<int>(common.seed)));
    common.threads = c.get_int("threads", common.threads);
    common.proj_key = c.get("proj_key", common.proj_key);
    common.kitti_map_path = c.get("classmap.kitti", common.kitti_map_path);
    common.cityscapes_map_path = c.get("classmap.cityscapes", common.cityscapes_map_path);
    common.fov = c.fov();
}

void add_common_flags(CLI::App* app, Common& common) {
    app->add_option("--root", common.root, "dataset root (contains sequences/)")
        ->capture_default_str();
    app->add_option("--out", common.out, "output directory or file")
        ->capture_default_str();
    app->add_option("--grid-h", common.grid_h, "polar grid rows")->capture_default_str();
    app->add_option("--grid-w", common.grid_w, "polar grid columns")->capture_default_str();
    app->add_option("--seed", common.seed, "RNG seed recorded in artifacts")
        ->capture_default_str();
    app->add_option("--threads", common.threads, "worker threads, 0 = all cores")
        ->capture_default_str();
}

std::vector<std::string> resolve_sequences(const Common& common,
                                           const std::vector<std::string>& seqs,
                                           const std::string& split,
                                           const std::string& split_file) {
    if (!seqs.empty()) return seqs;
    io::SplitManifest manifest =
        split_file.empty() ? io::default_split() : io::read_split(split_file);
    if (split == "train") return manifest.train;
    if (split == "val") return manifest.val;
    if (split == "test") return manifest.test;
    throw ContractError("unknown split '" + split + "' (want train|val|test)");
}

// Scan -> 5-channel frame with reduced labels attached when present.
geometry::PgmFrame project_scan(const Common& common, const fs::path& seq_dir,
                                const std::string& stem) {
    io::PointCloud cloud = io::read_scan(seq_dir / "velodyne" / (stem + ".bin"));
    const fs::path label_path = seq_dir / "labels" / (stem + ".label");
    if (fs::exists(label_path)) {
        const auto records = io::read_labels(
            label_path, static_cast<std::ptrdiff_t>(cloud.points.size() +
                                                    cloud.dropped_nonfinite));
        std::vector<std::uint16_t> raw;
        raw.reserve(records.size());
        for (const auto& r : records) raw.push_back(r.semantic);
        // dropped non-finite points lost their labels with them
        if (cloud.dropped_nonfinite == 0) {
            cloud.labels = labels::remap(raw, common.classes.kitti_map);
        }
    }
    return geometry::spherical_project(cloud, common.fov, common.grid_h, common.grid_w);
}

io::CalibrationSet load_calib_for_image(const Common& common, const fs::path& seq_dir,
                                        const io::Image& image) {
    io::CalibrationSet calib = io::read_calib(seq_dir / "calib.txt", common.proj_key);
    calib.image_width = image.width;
    calib.image_height = image.height;
    return calib;
}

fs::path find_image(const fs::path& seq_dir, const std::string& stem) {
    for (const char* ext : {".png", ".ppm"}) {
        const fs::path p = seq_dir / "image_2" / (stem + ext);
        if (fs::exists(p)) return p;
    }
    throw IoError("no image for scan " + stem + " under " +
                  (seq_dir / "image_2").string());
}

fs::path find_label_image(const fs::path& dir, const std::string& seq,
                          const std::string& stem) {
    for (const fs::path base : {dir / "sequences" / seq, dir / seq, dir}) {
        for (const char* ext : {".png", ".pgm"}) {
            const fs::path p = base / (stem + ext);
            if (fs::exists(p)) return p;
        }
    }
    throw IoError("no image label map for scan " + stem + " under " + dir.string());
}

// ---- project / colorize -------------------------------------------------------

int cmd_project(const Common& common, const std::vector<std::string>& seqs,
                const std::string& split, const std::string& split_file,
                bool with_color) {
    if (common.root.empty()) throw ContractError("--root is required");
    if (common.out.empty()) throw ContractError("--out is required");
    const auto sequences = resolve_sequences(common, seqs, split, split_file);
    std::size_t written = 0;
    for (const auto& seq : sequences) {
        const fs::path seq_dir = io::sequence_dir(common.root, seq);
        const auto stems = io::list_scans(common.root, seq);
        const fs::path out_dir = fs::path(common.out) / "sequences" / seq / "pgm";
        fs::create_directories(out_dir);
        for (const auto& stem : stems) {
            geometry::PgmFrame frame = project_scan(common, seq_dir, stem);
            if (with_color) {
                const io::Image image = io::read_image(find_image(seq_dir, stem));
                const io::CalibrationSet calib =
                    load_calib_for_image(common, seq_dir, image);
                frame = geometry::colorize(frame, image, calib);
            }
            io::write_pgm(out_dir / (stem + ".pgmf"), frame);
            ++written;
        }
    }
    std::cout << "wrote " << written << " pgm file(s) under " << common.out << "\n";
    return 0;
}

// ---- stats ----------------------------------------------------------------------

int cmd_stats(const Common& common, const std::string& split,
              const std::string& split_file) {
    if (common.root.empty()) throw ContractError("--root is required");
    if (common.out.empty()) throw ContractError("--out is required");
    const auto sequences = resolve_sequences(common, {}, split, split_file);
    const auto counter =
        labels::class_frequencies(common.root, sequences, common.classes.kitti_map);
    const auto freqs = counter.frequencies();
    const auto weights = labels::loss_weights(freqs, common.eps);

    fs::create_directories(common.out);
    labels::write_stats(fs::path(common.out) / "frequencies.txt", freqs);
    std::array<double, labels::kNumClasses> wd{};
    for (int i = 0; i < labels::kNumClasses; ++i) wd[i] = weights[i];
    labels::write_stats(fs::path(common.out) / "weights.txt", wd);
    std::cout << "counted " << counter.total << " points over " << sequences.size()
              << " sequence(s); wrote frequencies.txt and weights.txt\n";
    return 0;
}

// ---- frame loading for train/eval ------------------------------------------------

geometry::PgmFrame slice_frame(const geometry::PgmFrame& frame, int channels) {
    if (frame.c == channels) return frame;
    if (frame.c < channels) {
        throw ContractError("frame has " + std::to_string(frame.c) +
                            " channels, need " + std::to_string(channels));
    }
    geometry::PgmFrame out(frame.h, frame.w, channels);
    out.mask = frame.mask;
    out.labels = frame.labels;
    out.point_index = frame.point_index;
    const std::size_t cells = static_cast<std::size_t>(frame.h) * frame.w;
    for (std::size_t i = 0; i < cells; ++i) {
        for (int ch = 0; ch < channels; ++ch) {
            out.data[i * channels + ch] = frame.data[i * frame.c + ch];
        }
    }
    return out;
}

std::vector<geometry::PgmFrame> load_pgm_frames(const Common& common,
                                                const std::string& data_dir,
                                                const std::vector<std::string>& seqs,
                                                int want_channels, int limit) {
    std::vector<geometry::PgmFrame> frames;
    for (const auto& seq : seqs) {
        const fs::path dir = fs::path(data_dir) / "sequences" / seq / "pgm";
        if (!fs::is_directory(dir)) {
            throw IoError("no pgm directory " + dir.string() +
                          " (run `pgmfuse project`/`colorize` first)");
        }
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.path().extension() == ".pgmf") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            frames.push_back(slice_frame(io::read_pgm(f), want_channels));
            if (limit > 0 && static_cast<int>(frames.size()) >= limit) return frames;
        }
    }
    if (frames.empty()) throw IoError("no .pgmf frames found");
    return frames;
}

int frame_channels_for(models::ModelKind kind) {
    switch (kind) {
        case models::ModelKind::kLidar: return 5;
        case models::ModelKind::kLate: return 10;
        default: return 8;
    }
}

// Builds the 10-channel decision-fusion frames straight from the raw dataset.
std::vector<geometry::PgmFrame> load_late_frames(const Common& common,
                                                 const std::vector<std::string>& seqs,
                                                 const std::string& lidar_ckpt,
                                                 const std::string& image_labels_dir,
                                                 int limit) {
    if (common.root.empty()) throw ContractError("--root is required for kind late");
    if (lidar_ckpt.empty()) throw ContractError("--lidar-ckpt is required for kind late");
    if (image_labels_dir.empty()) {
        throw ContractError("--image-labels is required for kind late");
    }
    auto loaded = models::load_checkpoint(lidar_ckpt);
    std::vector<geometry::PgmFrame> frames;
    for (const auto& seq : seqs) {
        const fs::path seq_dir = io::sequence_dir(common.root, seq);
        for (const auto& stem : io::list_scans(common.root, seq)) {
            io::PointCloud cloud = io::read_scan(seq_dir / "velodyne" / (stem + ".bin"));
            const fs::path label_path = seq_dir / "labels" / (stem + ".label");
            if (fs::exists(label_path) && cloud.dropped_nonfinite == 0) {
                const auto records = io::read_labels(
                    label_path, static_cast<std::ptrdiff_t>(cloud.points.size()));
                std::vector<std::uint16_t> raw;
                for (const auto& r : records) raw.push_back(r.semantic);
                cloud.labels = labels::remap(raw, common.classes.kitti_map);
            }
            const io::Image image = io::read_image(find_image(seq_dir, stem));
            const io::CalibrationSet calib = load_calib_for_image(common, seq_dir, image);
            io::LabelImage raw_map =
                io::read_label_image(find_label_image(image_labels_dir, seq, stem));
            const auto reduced =
                labels::remap(raw_map.ids, common.classes.cityscapes_map);
            io::LabelImage reduced_map;
            reduced_map.width = raw_map.width;
            reduced_map.height = raw_map.height;
            reduced_map.ids = reduced;
            frames.push_back(models::late_fusion_prepare(
                cloud, image, calib, loaded.graph, reduced_map, common.fov,
                common.grid_h, common.grid_w));
            if (limit > 0 && static_cast<int>(frames.size()) >= limit) return frames;
        }
    }
    if (frames.empty()) throw IoError("no scans found for late-fusion preparation");
    return frames;
}

// ---- train ------------------------------------------------------------------------

int cmd_train(const Common& common, const std::string& kind_name,
              const std::string& data_dir, const std::vector<std::string>& train_seqs,
              const std::vector<std::string>& val_seqs, const std::string& weights_path,
              models::TrainConfig train_config, const std::string& log_path,
              const std::string& lidar_ckpt, const std::string& image_labels_dir,
              int limit) {
    const auto kind = models::kind_from_name(kind_name);
    if (common.out.empty()) throw ContractError("--out (checkpoint path) is required");
    if (train_config.batch <= 0) {
        train_config.batch = kind == models::ModelKind::kMid ? 32 : 64;
    }

    std::vector<geometry::PgmFrame> train_frames, val_frames;
    if (kind == models::ModelKind::kLate) {
        train_frames =
            load_late_frames(common, train_seqs, lidar_ckpt, image_labels_dir, limit);
        val_frames = val_seqs.empty()
                         ? train_frames
                         : load_late_frames(common, val_seqs, lidar_ckpt,
                                            image_labels_dir, limit);
    } else {
        const int want = frame_channels_for(kind);
        if (data_dir.empty()) {
            throw ContractError("--data (pgm tree) is required for kind " +
                                std::string(models::kind_name(kind)));
        }
        train_frames = load_pgm_frames(common, data_dir, train_seqs, want, limit);
        val_frames = val_seqs.empty()
                         ? train_frames
                         : load_pgm_frames(common, data_dir, val_seqs, want, limit);
    }

    std::array<float, labels::kNumClasses> weights{};
    if (!weights_path.empty()) {
        const auto stats = labels::read_stats(weights_path);
        for (int i = 0; i < labels::kNumClasses; ++i) {
            weights[i] = static_cast<float>(stats[i]);
        }
        weights[0] = 0.0f;
    } else {
        labels::FrequencyCounter counter;
        for (const auto& f : train_frames) {
            std::vector<std::uint16_t> ids;
            ids.reserve(f.labels.size());
            for (const std::uint32_t id : f.labels) {
                ids.push_back(static_cast<std::uint16_t>(id));
            }
            counter.add(ids);
        }
        weights = labels::loss_weights(counter.frequencies(), common.eps);
    }

    models::BuildConfig build_cfg;
    build_cfg.grid_h = train_frames[0].h;
    build_cfg.grid_w = train_frames[0].w;
    build_cfg.seed = common.seed;
    models::ModelGraph graph = models::build(kind, build_cfg);
    train_config.seed = common.seed;

    std::cout << models::kind_name(kind) << ": " << graph.param_count()
              << " parameters, " << train_frames.size() << " train / "
              << val_frames.size() << " val frames\n";

    const auto result = models::train(
        graph, train_frames, val_frames, weights, train_config, fs::path(common.out),
        [](const models::EpochRecord& rec) {
            std::cout << rec.epoch << " " << rec.train_loss << " " << rec.val_miou
                      << std::endl;
        });

    if (!log_path.empty()) {
        std::ofstream log(log_path, std::ios::trunc);
        if (!log) throw IoError("cannot open metric log " + log_path);
        log << models::format_metric_log(result.log);
    }
    std::cout << "best val mIoU " << result.best_val_miou << " at epoch "
              << result.best_epoch << "; checkpoint " << common.out << "\n";
    return 0;
}

// ---- infer ------------------------------------------------------------------------

int cmd_infer(const Common& common, const std::string& ckpt_path,
              const std::vector<std::string>& seqs, const std::string& split,
              const std::string& split_file, const std::string& lidar_ckpt,
              const std::string& image_labels_dir, int limit) {
    if (common.root.empty()) throw ContractError("--root is required");
    if (common.out.empty()) throw ContractError("--out is required");
    auto loaded = models::load_checkpoint(ckpt_path);
    const auto kind = loaded.graph.kind;
    const auto sequences = resolve_sequences(common, seqs, split, split_file);

    std::optional<models::LoadedCheckpoint> upstream;
    if (kind == models::ModelKind::kLate) {
        if (lidar_ckpt.empty()) {
            throw ContractError("--lidar-ckpt is required for late-fusion inference");
        }
        upstream = models::load_checkpoint(lidar_ckpt);
    }

    std::size_t written = 0;
    for (const auto& seq : sequences) {
        const fs::path seq_dir = io::sequence_dir(common.root, seq);
        const fs::path out_dir = fs::path(common.out) / "sequences" / seq / "predictions";
        fs::create_directories(out_dir);
        int done = 0;
        for (const auto& stem : io::list_scans(common.root, seq)) {
            io::PointCloud cloud = io::read_scan(seq_dir / "velodyne" / (stem + ".bin"));
            geometry::PgmFrame frame = geometry::spherical_project(
                cloud, common.fov, loaded.graph.grid_h, loaded.graph.grid_w);
            if (kind != models::ModelKind::kLidar) {
                const io::Image image = io::read_image(find_image(seq_dir, stem));
                const io::CalibrationSet calib =
                    load_calib_for_image(common, seq_dir, image);
                if (kind == models::ModelKind::kLate) {
                    io::LabelImage raw_map = io::read_label_image(
                        find_label_image(image_labels_dir, seq, stem));
                    const auto reduced =
                        labels::remap(raw_map.ids, common.classes.cityscapes_map);
                    io::LabelImage reduced_map{raw_map.width, raw_map.height, reduced};
                    frame = models::late_fusion_prepare(
                        cloud, image, calib, upstream->graph, reduced_map, common.fov,
                        loaded.graph.grid_h, loaded.graph.grid_w);
                } else {
                    frame = geometry::colorize(frame, image, calib);
                }
            }
            const auto pred = models::infer(loaded.graph, frame);
            const auto point_pred = geometry::backproject_predictions(frame, pred);
            std::vector<io::LabelRecord> records(cloud.points.size());
            for (const auto& [idx, cls] : point_pred) {
                records[static_cast<std::size_t>(idx)].semantic =
                    static_cast<std::uint16_t>(cls);
            }
            io::write_labels(out_dir / (stem + ".label"), records);
            ++written;
            if (limit > 0 && ++done >= limit) break;
        }
    }
    std::cout << "wrote " << written << " prediction file(s) under " << common.out
              << "\n";
    return 0;
}

// ---- eval -------------------------------------------------------------------------

int cmd_eval(const Common& common, const std::string& ckpt_path,
             const std::string& pred_dir, const std::vector<std::string>& seqs,
             const std::string& split, const std::string& split_file, bool points_mode,
             const std::string& image_labels_dir, const std::string& lidar_ckpt,
             int limit) {
    if (common.root.empty()) throw ContractError("--root is required");
    const auto sequences = resolve_sequences(common, seqs, split, split_file);
    evaluate::ConfusionMatrix cm;

    if (!pred_dir.empty()) {
        // point-wise comparison of prediction label files against ground truth
        for (const auto& seq : sequences) {
            const fs::path seq_dir = io::sequence_dir(common.root, seq);
            int done = 0;
            for (const auto& stem : io::list_scans(common.root, seq)) {
                const auto truth_records =
                    io::read_labels(seq_dir / "labels" / (stem + ".label"));
                const auto pred_records = io::read_labels(
                    fs::path(pred_dir) / "sequences" / seq / "predictions" /
                        (stem + ".label"),
                    static_cast<std::ptrdiff_t>(truth_records.size()));
                std::vector<std::uint16_t> raw;
                for (const auto& r : truth_records) raw.push_back(r.semantic);
                const auto truth = labels::remap(raw, common.classes.kitti_map);
                std::vector<std::uint32_t> t32(truth.begin(), truth.end());
                std::vector<std::uint32_t> p32;
                for (const auto& r : pred_records) p32.push_back(r.semantic);
                evaluate::accumulate(cm, t32, p32);
                if (limit > 0 && ++done >= limit) break;
            }
        }
    } else if (!ckpt_path.empty()) {
        auto loaded = models::load_checkpoint(ckpt_path);
        const auto kind = loaded.graph.kind;
        std::optional<models::LoadedCheckpoint> upstream;
        if (kind == models::ModelKind::kLate && !lidar_ckpt.empty()) {
            upstream = models::load_checkpoint(lidar_ckpt);
        }
        for (const auto& seq : sequences) {
            const fs::path seq_dir = io::sequence_dir(common.root, seq);
            int done = 0;
            for (const auto& stem : io::list_scans(common.root, seq)) {
                io::PointCloud cloud =
                    io::read_scan(seq_dir / "velodyne" / (stem + ".bin"));
                const auto records = io::read_labels(
                    seq_dir / "labels" / (stem + ".label"),
                    cloud.dropped_nonfinite == 0
                        ? static_cast<std::ptrdiff_t>(cloud.points.size())
                        : -1);
                std::vector<std::uint16_t> raw;
                for (const auto& r : records) raw.push_back(r.semantic);
                const auto reduced = labels::remap(raw, common.classes.kitti_map);
                if (cloud.dropped_nonfinite == 0) cloud.labels = reduced;

                geometry::PgmFrame frame = geometry::spherical_project(
                    cloud, common.fov, loaded.graph.grid_h, loaded.graph.grid_w);
                if (kind == models::ModelKind::kLate) {
                    const io::Image image = io::read_image(find_image(seq_dir, stem));
                    const io::CalibrationSet calib =
                        load_calib_for_image(common, seq_dir, image);
                    io::LabelImage raw_map = io::read_label_image(
                        find_label_image(image_labels_dir, seq, stem));
                    const auto red =
                        labels::remap(raw_map.ids, common.classes.cityscapes_map);
                    io::LabelImage reduced_map{raw_map.width, raw_map.height, red};
                    frame = models::late_fusion_prepare(
                        cloud, image, calib, upstream->graph, reduced_map, common.fov,
                        loaded.graph.grid_h, loaded.graph.grid_w);
                } else if (kind != models::ModelKind::kLidar) {
                    const io::Image image = io::read_image(find_image(seq_dir, stem));
                    const io::CalibrationSet calib =
                        load_calib_for_image(common, seq_dir, image);
                    frame = geometry::colorize(frame, image, calib);
                }
                const auto pred = models::infer(loaded.graph, frame);
                if (points_mode) {
                    std::vector<std::uint32_t> point_pred(cloud.points.size(), 0);
                    for (const auto& [idx, cls] :
                         geometry::backproject_predictions(frame, pred)) {
                        point_pred[static_cast<std::size_t>(idx)] = cls;
                    }
                    std::vector<std::uint32_t> t32(reduced.begin(), reduced.end());
                    t32.resize(point_pred.size(), 0);
                    evaluate::accumulate(cm, t32, point_pred);
                } else {
                    evaluate::accumulate(cm, frame.labels, pred, frame.mask);
                }
                if (limit > 0 && ++done >= limit) break;
            }
        }
    } else {
        throw ContractError("eval needs either --ckpt or --pred");
    }

    const auto scores = evaluate::miou(cm);
    std::cout << evaluate::format_report(scores);
    if (!common.out.empty()) {
        std::ofstream out(common.out, std::ios::trunc);
        if (!out) throw IoError("cannot open " + common.out + " for writing");
        out << evaluate::format_report_tsv(scores);
    }
    return 0;
}

// ---- quantize ----------------------------------------------------------------------

int cmd_quantize(const Common& common, const std::string& ckpt_path,
                 const std::string& data_dir, const std::vector<std::string>& seqs,
                 int calib_frames, const std::string& report_path) {
    if (common.out.empty()) throw ContractError("--out (quantized path) is required");
    auto loaded = models::load_checkpoint(ckpt_path);
    const int want = frame_channels_for(loaded.graph.kind);
    const auto frames =
        load_pgm_frames(common, data_dir, seqs, want, calib_frames);

    models::ModelGraph folded = quantize::fold_batchnorm(loaded.graph);
    const auto obs = quantize::calibrate(folded, frames);
    const auto qmodel = quantize::quantize_checkpoint(loaded.graph, obs);
    quantize::save_quantized(common.out, qmodel);

    std::ostringstream report;
    report << "float payload bytes\t" << qmodel.float_payload_bytes << "\n"
           << "quantized payload bytes\t" << qmodel.quant_payload_bytes << "\n"
           << "size ratio\t" << qmodel.size_ratio() << "\n"
           << "degenerate tensors\t" << qmodel.degenerate_tensors << "\n";
    for (const auto& err : quantize::per_layer_error(folded, qmodel, frames[0])) {
        report << "layer_abs_err:" << err.node << "\t" << err.mean_abs_error << "\n";
    }
    std::cout << report.str();
    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::trunc);
        if (!out) throw IoError("cannot open " + report_path + " for writing");
        out << report.str();
    }
    std::cout << "wrote quantized checkpoint " << common.out << "\n";
    return 0;
}

// ---- bench -------------------------------------------------------------------------

int cmd_bench(const Common& common, const std::string& kind_name,
              const std::string& ckpt_path, const std::string& qckpt_path, int runs) {
    models::ModelGraph graph = [&] {
        if (!ckpt_path.empty()) return models::load_checkpoint(ckpt_path).graph;
        models::BuildConfig cfg;
        cfg.grid_h = common.grid_h;
        cfg.grid_w = common.grid_w;
        cfg.seed = common.seed;
        return models::build(models::kind_from_name(kind_name), cfg);
    }();

    // synthetic but plausible frame: every cell masked, smooth channel values
    geometry::PgmFrame frame(graph.grid_h, graph.grid_w, frame_channels_for(graph.kind));
    std::mt19937 rng(common.seed);
    std::uniform_real_distribution<float> dist(0.1f, 1.0f);
    for (std::size_t cell = 0; cell < frame.mask.size(); ++cell) {
        frame.mask[cell] = 1;
        for (int ch = 0; ch < frame.c; ++ch) frame.data[cell * frame.c + ch] = dist(rng);
    }

    std::vector<double> times;
    for (int i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        models::infer(graph, frame);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    double mean = 0.0;
    for (const double t : times) mean += t;
    mean /= static_cast<double>(times.size());
    double var = 0.0;
    for (const double t : times) var += (t - mean) * (t - mean);
    const double sigma = std::sqrt(var / static_cast<double>(times.size()));

    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s %d x %d: %.1f +- %.1f ms (%d runs), %lld parameters\n",
                  models::kind_name(graph.kind), graph.grid_h, graph.grid_w, median,
                  sigma, runs, static_cast<long long>(graph.param_count()));
    std::cout << buf;

    if (!qckpt_path.empty()) {
        const auto qmodel = quantize::load_quantized(qckpt_path);
        const auto t = quantize::bench_quantized(qmodel, frame, runs);
        std::snprintf(buf, sizeof(buf), "%s int8: %.1f +- %.1f ms (%d runs), %.2fx smaller\n",
                      models::kind_name(qmodel.graph.kind), t.median_ms, t.sigma_ms,
                      runs, qmodel.size_ratio());
        std::cout << buf;
    }
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"pgmfuse: polar-grid LiDAR-camera fusion pipeline"};
    app.require_subcommand(1);

    Common common;
    std::string config_path;
    app.add_option("--config", config_path, "flat key-value config file");

    // config file first, flags override
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                common.config = cfg::Config::load(argv[i + 1]);
                apply_config(common);
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 2;
            }
        }
    }

    std::vector<std::string> seqs, train_seqs, val_seqs;
    std::string split = "train", split_file;
    std::string kind = "lidar", ckpt, lidar_ckpt, image_labels_dir, qckpt;
    std::string data_dir, weights_path, log_path, pred_dir, report_path;
    bool points_mode = false;
    int runs = 10, calib_frames = 8, limit = 0;
    models::TrainConfig train_config;
    train_config.batch = 0;  // resolved per kind

    auto* project = app.add_subcommand("project", "write 5-channel polar grid files");
    add_common_flags(project, common);
    project->add_option("--seq", seqs, "sequence ids (default: --split)");
    project->add_option("--split", split, "train|val|test")->capture_default_str();
    project->add_option("--split-file", split_file, "split manifest file");

    auto* colorize = app.add_subcommand("colorize", "write 8-channel colorized grid files");
    add_common_flags(colorize, common);
    colorize->add_option("--seq", seqs, "sequence ids (default: --split)");
    colorize->add_option("--split", split, "train|val|test")->capture_default_str();
    colorize->add_option("--split-file", split_file, "split manifest file");

    auto* stats = app.add_subcommand("stats", "class frequencies and loss weights");
    add_common_flags(stats, common);
    stats->add_option("--split", split, "train|val|test")->capture_default_str();
    stats->add_option("--split-file", split_file, "split manifest file");
    stats->add_option("--eps", common.eps, "loss weight smoothing")->capture_default_str();

    auto* train = app.add_subcommand("train", "train a fusion model");
    add_common_flags(train, common);
    train->add_option("--kind", kind, "lidar|early|mid|late|image")->capture_default_str();
    train->add_option("--data", data_dir, "pgm tree from project/colorize");
    train->add_option("--train-seq", train_seqs, "training sequence ids")->required();
    train->add_option("--val-seq", val_seqs, "validation sequence ids (default: train)");
    train->add_option("--weights", weights_path, "loss-weight fixture from `stats`");
    train->add_option("--epochs", train_config.epochs, "max epochs")->capture_default_str();
    train->add_option("--batch", train_config.batch, "batch size (0: 64, mid 32)");
    train->add_option("--lr", train_config.lr, "learning rate")->capture_default_str();
    train->add_option("--momentum", train_config.momentum, "SGD momentum")
        ->capture_default_str();
    train->add_option("--lr-decay", train_config.lr_decay, "per-epoch lr factor")
        ->capture_default_str();
    train->add_option("--stop-miou", train_config.stop_miou,
                      "stop once val mIoU reaches this");
    train->add_option("--log", log_path, "metric log output path");
    train->add_option("--lidar-ckpt", lidar_ckpt, "upstream model (kind late)");
    train->add_option("--image-labels", image_labels_dir,
                      "image label maps (kind late)");
    train->add_option("--limit", limit, "use at most N frames");

    auto* infer = app.add_subcommand("infer", "write per-point prediction labels");
    add_common_flags(infer, common);
    infer->add_option("--ckpt", ckpt, "model checkpoint")->required();
    infer->add_option("--seq", seqs, "sequence ids (default: --split)");
    infer->add_option("--split", split, "train|val|test")->capture_default_str();
    infer->add_option("--split-file", split_file, "split manifest file");
    infer->add_option("--lidar-ckpt", lidar_ckpt, "upstream model (kind late)");
    infer->add_option("--image-labels", image_labels_dir, "image label maps (kind late)");
    infer->add_option("--limit", limit, "at most N scans per sequence");

    auto* eval = app.add_subcommand("eval", "score predictions or a checkpoint");
    add_common_flags(eval, common);
    eval->add_option("--ckpt", ckpt, "model checkpoint to run");
    eval->add_option("--pred", pred_dir, "prediction tree from `infer`");
    eval->add_option("--seq", seqs, "sequence ids (default: --split)");
    eval->add_option("--split", split, "train|val|test")->capture_default_str();
    eval->add_option("--split-file", split_file, "split manifest file");
    eval->add_flag("--points", points_mode, "score back-projected points, not cells");
    eval->add_option("--lidar-ckpt", lidar_ckpt, "upstream model (kind late)");
    eval->add_option("--image-labels", image_labels_dir, "image label maps (kind late)");
    eval->add_option("--limit", limit, "at most N scans per sequence");

    auto* quant = app.add_subcommand("quantize", "post-training int8 quantization");
    add_common_flags(quant, common);
    quant->add_option("--ckpt", ckpt, "float checkpoint")->required();
    quant->add_option("--data", data_dir, "pgm tree for calibration")->required();
    quant->add_option("--seq", seqs, "calibration sequence ids")->required();
    quant->add_option("--calib-frames", calib_frames, "calibration frame count")
        ->capture_default_str();
    quant->add_option("--report", report_path, "quantization report path");

    auto* bench = app.add_subcommand("bench", "forward-pass latency");
    add_common_flags(bench, common);
    bench->add_option("--kind", kind, "lidar|early|mid|late|image")->capture_default_str();
    bench->add_option("--ckpt", ckpt, "bench a trained checkpoint instead");
    bench->add_option("--qckpt", qckpt, "also bench a quantized checkpoint");
    bench->add_option("--runs", runs, "timing runs")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        common.finalize();
        if (project->parsed()) return cmd_project(common, seqs, split, split_file, false);
        if (colorize->parsed()) return cmd_project(common, seqs, split, split_file, true);
        if (stats->parsed()) return cmd_stats(common, split, split_file);
        if (train->parsed()) {
            return cmd_train(common, kind, data_dir, train_seqs, val_seqs, weights_path,
                             train_config, log_path, lidar_ckpt, image_labels_dir, limit);
        }
        if (infer->parsed()) {
            return cmd_infer(common, ckpt, seqs, split, split_file, lidar_ckpt,
                             image_labels_dir, limit);
        }
        if (eval->parsed()) {
            return cmd_eval(common, ckpt, pred_dir, seqs, split, split_file, points_mode,
                            image_labels_dir, lidar_ckpt, limit);
        }
        if (quant->parsed()) {
            return cmd_quantize(common, ckpt, data_dir, seqs, calib_frames, report_path);
        }
        if (bench->parsed()) return cmd_bench(common, kind, ckpt, qckpt, runs);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace pgmfuse::cli
