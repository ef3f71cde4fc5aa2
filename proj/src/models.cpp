#include "pgmfuse/models.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "pgmfuse/evaluate.hpp"

namespace pgmfuse::models {
namespace {

// ---- graph construction ------------------------------------------------------

struct Builder {
    ModelGraph g;
    std::mt19937 rng;
    std::vector<int> node_channels;

    explicit Builder(std::uint32_t seed) : rng(seed) {}

    int push(NodeSpec node, int out_channels) {
        g.nodes.push_back(std::move(node));
        node_channels.push_back(out_channels);
        return static_cast<int>(g.nodes.size()) - 1;
    }

    int channels(int node) const { return node_channels[static_cast<std::size_t>(node)]; }

    int param(const std::string& name, nn::TensorF t) {
        g.params.push_back({name, std::move(t)});
        return static_cast<int>(g.params.size()) - 1;
    }

    int state(const std::string& name, nn::TensorF t) {
        g.state.push_back({name, std::move(t)});
        return static_cast<int>(g.state.size()) - 1;
    }

    int input(const std::string& name, int c) {
        NodeSpec n;
        n.kind = OpKind::kInput;
        n.name = name;
        const int id = push(std::move(n), c);
        g.inputs.push_back(id);
        return id;
    }

    int conv(const std::string& name, int in, int co, const nn::Conv2dSpec& spec) {
        nn::TensorF w(spec.kh, spec.kw, channels(in), co);
        nn::fill_kaiming_uniform(w, rng);
        NodeSpec n;
        n.kind = OpKind::kConv;
        n.name = name;
        n.inputs = {in};
        n.conv = spec;
        n.weight = param(name + ".w", std::move(w));
        n.bias = param(name + ".b", nn::TensorF::vector(co));
        return push(std::move(n), co);
    }

    int deconv(const std::string& name, int in, int co, const nn::Conv2dSpec& spec) {
        // weight stored as the adjoint conv's weight: (kh, kw, c_out, c_in)
        nn::TensorF w(spec.kh, spec.kw, co, channels(in));
        nn::fill_kaiming_uniform(w, rng);
        NodeSpec n;
        n.kind = OpKind::kDeconv;
        n.name = name;
        n.inputs = {in};
        n.conv = spec;
        n.weight = param(name + ".w", std::move(w));
        n.bias = param(name + ".b", nn::TensorF::vector(co));
        return push(std::move(n), co);
    }

    int bn(const std::string& name, int in) {
        const int c = channels(in);
        nn::TensorF gamma = nn::TensorF::vector(c);
        gamma.fill(1.0f);
        nn::TensorF run_var = nn::TensorF::vector(c);
        run_var.fill(1.0f);
        NodeSpec n;
        n.kind = OpKind::kBatchNorm;
        n.name = name;
        n.inputs = {in};
        n.gamma = param(name + ".g", std::move(gamma));
        n.beta = param(name + ".b", nn::TensorF::vector(c));
        n.run_mean = state(name + ".rm", nn::TensorF::vector(c));
        n.run_var = state(name + ".rv", std::move(run_var));
        return push(std::move(n), c);
    }

    int relu(const std::string& name, int in) {
        NodeSpec n;
        n.kind = OpKind::kRelu;
        n.name = name;
        n.inputs = {in};
        return push(std::move(n), channels(in));
    }

    int pool(const std::string& name, int in) {
        NodeSpec n;
        n.kind = OpKind::kMaxPoolW;
        n.name = name;
        n.inputs = {in};
        return push(std::move(n), channels(in));
    }

    int concat(const std::string& name, std::vector<int> in) {
        int c = 0;
        for (const int id : in) c += channels(id);
        NodeSpec n;
        n.kind = OpKind::kConcat;
        n.name = name;
        n.inputs = std::move(in);
        return push(std::move(n), c);
    }

    int add(const std::string& name, int a, int b) {
        NodeSpec n;
        n.kind = OpKind::kAdd;
        n.name = name;
        n.inputs = {a, b};
        return push(std::move(n), channels(a));
    }

    int conv_bn_relu(const std::string& name, int in, int co,
                     const nn::Conv2dSpec& spec) {
        const int c = conv(name, in, co, spec);
        const int b = bn(name + ".bn", c);
        return relu(name + ".relu", b);
    }

    // squeeze -> expand fire block; residual adds the input back before the
    // final ReLU (requires in channels == e1 + e3).
    int fire(const std::string& name, int in, int s1, int e1, int e3,
             bool residual = false) {
        const nn::Conv2dSpec one{1, 1, 1, 1, 0, 0};
        const nn::Conv2dSpec three{3, 3, 1, 1, 1, 1};
        if (residual && channels(in) != e1 + e3) {
            throw ContractError("fire residual '" + name + "': input channels " +
                                std::to_string(channels(in)) + " != e1+e3 " +
                                std::to_string(e1 + e3));
        }
        const int sq = conv_bn_relu(name + ".sq", in, s1, one);
        if (residual) {
            const int b1 = bn(name + ".e1.bn", conv(name + ".e1", sq, e1, one));
            const int b3 = bn(name + ".e3.bn", conv(name + ".e3", sq, e3, three));
            const int cat = concat(name + ".cat", {b1, b3});
            return relu(name + ".relu", add(name + ".add", cat, in));
        }
        const int r1 = relu(name + ".e1.relu", bn(name + ".e1.bn", conv(name + ".e1", sq, e1, one)));
        const int r3 = relu(name + ".e3.relu", bn(name + ".e3.bn", conv(name + ".e3", sq, e3, three)));
        return concat(name + ".cat", {r1, r3});
    }

    // fire with a width-wise x2 transposed conv between squeeze and expand.
    int fire_deconv(const std::string& name, int in, int s1, int e1, int e3) {
        const nn::Conv2dSpec one{1, 1, 1, 1, 0, 0};
        const nn::Conv2dSpec three{3, 3, 1, 1, 1, 1};
        const nn::Conv2dSpec up{1, 4, 1, 2, 0, 1};
        const int sq = conv_bn_relu(name + ".sq", in, s1, one);
        const int u = deconv(name + ".up", sq, s1, up);
        const int r1 = relu(name + ".e1.relu", bn(name + ".e1.bn", conv(name + ".e1", u, e1, one)));
        const int r3 = relu(name + ".e3.relu", bn(name + ".e3.bn", conv(name + ".e3", u, e3, three)));
        return concat(name + ".cat", {r1, r3});
    }
};

struct EncoderTaps {
    int conv1 = -1;  // 64 ch @ w/2
    int fire3 = -1;  // 128 ch @ w/4
    int fire5 = -1;  // 256 ch @ w/8
    int out = -1;    // 512 ch @ w/16
};

EncoderTaps emit_encoder(Builder& b, int in, const std::string& prefix) {
    const nn::Conv2dSpec conv1_spec{3, 3, 1, 2, 1, 1};
    EncoderTaps taps;
    taps.conv1 = b.conv_bn_relu(prefix + ".conv1", in, 64, conv1_spec);
    int x = b.pool(prefix + ".pool1", taps.conv1);
    x = b.fire(prefix + ".fire2", x, 16, 64, 64);
    taps.fire3 = b.fire(prefix + ".fire3", x, 16, 64, 64);
    x = b.pool(prefix + ".pool3", taps.fire3);
    x = b.fire(prefix + ".fire4", x, 32, 128, 128);
    taps.fire5 = b.fire(prefix + ".fire5", x, 32, 128, 128);
    x = b.pool(prefix + ".pool5", taps.fire5);
    x = b.fire(prefix + ".fire6", x, 48, 192, 192);
    x = b.fire(prefix + ".fire7", x, 48, 192, 192);
    x = b.fire(prefix + ".fire8", x, 64, 256, 256);
    taps.out = b.fire(prefix + ".fire9", x, 64, 256, 256);
    return taps;
}

// Image branch for mid fusion: same downsampling ladder, with residual fire
// blocks wherever channel counts carry over.
int emit_image_encoder(Builder& b, int in, const std::string& prefix) {
    const nn::Conv2dSpec conv1_spec{3, 3, 1, 2, 1, 1};
    int x = b.conv_bn_relu(prefix + ".conv1", in, 64, conv1_spec);
    x = b.pool(prefix + ".pool1", x);
    x = b.fire(prefix + ".fire2", x, 16, 64, 64);
    x = b.fire(prefix + ".fire3", x, 16, 64, 64, /*residual=*/true);
    x = b.pool(prefix + ".pool3", x);
    x = b.fire(prefix + ".fire4", x, 32, 128, 128);
    x = b.fire(prefix + ".fire5", x, 32, 128, 128, /*residual=*/true);
    x = b.pool(prefix + ".pool5", x);
    x = b.fire(prefix + ".fire6", x, 48, 192, 192);
    x = b.fire(prefix + ".fire7", x, 48, 192, 192, /*residual=*/true);
    x = b.fire(prefix + ".fire8", x, 64, 256, 256);
    x = b.fire(prefix + ".fire9", x, 64, 256, 256, /*residual=*/true);
    return x;
}

void emit_decoder(Builder& b, int in, const EncoderTaps& taps, int classes) {
    const nn::Conv2dSpec head_spec{3, 3, 1, 1, 1, 1};
    int x = b.fire_deconv("dec.fd10", in, 64, 128, 128);
    x = b.add("dec.skip10", x, taps.fire5);
    x = b.fire_deconv("dec.fd11", x, 32, 64, 64);
    x = b.add("dec.skip11", x, taps.fire3);
    x = b.fire_deconv("dec.fd12", x, 16, 32, 32);
    x = b.add("dec.skip12", x, taps.conv1);
    x = b.fire_deconv("dec.fd13", x, 16, 32, 32);
    b.g.output = b.conv("head", x, classes, head_spec);
}

}  // namespace

ModelGraph build(ModelKind kind, const BuildConfig& config) {
    if (config.grid_w % 16 != 0 || config.grid_w < 16) {
        throw ContractError("build: grid width " + std::to_string(config.grid_w) +
                            " must be a positive multiple of 16 (total stride)");
    }
    if (config.grid_h < 1) throw ContractError("build: grid height must be >= 1");

    Builder b(config.seed);
    b.g.kind = kind;
    b.g.grid_h = config.grid_h;
    b.g.grid_w = config.grid_w;
    b.g.classes = config.classes;

    const auto chans = input_channels(kind);
    if (kind == ModelKind::kMid) {
        const int in_pgm = b.input("in_pgm", chans[0]);
        const int in_img = b.input("in_img", chans[1]);
        const EncoderTaps taps = emit_encoder(b, in_pgm, "enc");
        const int img = emit_image_encoder(b, in_img, "img");
        int x = b.concat("fuse.cat", {taps.out, img});
        x = b.fire("fuse.fire1", x, 64, 256, 256);
        x = b.fire("fuse.fire2", x, 64, 256, 256);
        emit_decoder(b, x, taps, config.classes);
    } else {
        const int in = b.input("in", chans[0]);
        const EncoderTaps taps = emit_encoder(b, in, "enc");
        emit_decoder(b, taps.out, taps, config.classes);
    }
    return std::move(b.g);
}

// ---- checkpoint serialization -------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'P', 'F', 'C', 'K'};
constexpr std::uint16_t kCkptVersion = 1;
constexpr const char* kMetaEntry = "__meta__";

struct EntryWriter {
    std::vector<char> buf;

    template <typename T>
    void put(T x) {
        const char* p = reinterpret_cast<const char*>(&x);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void name(const std::string& s) {
        if (s.size() > 0xFFFF) throw ContractError("entry name too long");
        put(static_cast<std::uint16_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void tensor(const nn::TensorF& t) {
        put(static_cast<std::uint8_t>(4));
        put(static_cast<std::uint32_t>(t.n));
        put(static_cast<std::uint32_t>(t.h));
        put(static_cast<std::uint32_t>(t.w));
        put(static_cast<std::uint32_t>(t.c));
        const char* p = reinterpret_cast<const char*>(t.v.data());
        buf.insert(buf.end(), p, p + t.v.size() * sizeof(float));
    }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelGraph& graph,
                     const CheckpointMeta& meta) {
    EntryWriter w;
    w.buf.reserve(64 + graph.param_count() * sizeof(float));

    const std::uint32_t entry_count =
        static_cast<std::uint32_t>(graph.params.size() + graph.state.size() + 1);

    std::vector<char> header;
    header.insert(header.end(), kCkptMagic, kCkptMagic + 4);
    auto put_header = [&header](auto x) {
        const char* p = reinterpret_cast<const char*>(&x);
        header.insert(header.end(), p, p + sizeof(x));
    };
    put_header(kCkptVersion);
    put_header(static_cast<std::uint8_t>(graph.kind));
    put_header(entry_count);

    // meta entry first: epoch, seed halves, config-hash halves, grid dims,
    // all exactly representable in float32
    {
        w.name(kMetaEntry);
        w.put(static_cast<std::uint8_t>(1));
        w.put(static_cast<std::uint32_t>(7));
        const float vals[7] = {
            static_cast<float>(meta.epoch),
            static_cast<float>(meta.seed & 0xFFFFu),
            static_cast<float>(meta.seed >> 16),
            static_cast<float>(meta.config_hash & 0xFFFFu),
            static_cast<float>(meta.config_hash >> 16),
            static_cast<float>(meta.grid_h),
            static_cast<float>(meta.grid_w),
        };
        const char* p = reinterpret_cast<const char*>(vals);
        w.buf.insert(w.buf.end(), p, p + sizeof(vals));
    }
    for (const auto& param : graph.params) {
        w.name(param.name);
        w.tensor(param.t);
    }
    for (const auto& st : graph.state) {
        w.name(st.name);
        w.tensor(st.t);
    }

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

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());

    if (buf.size() < 4 + 2 + 1 + 4 + 4 || std::memcmp(buf.data(), kCkptMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a PFCK checkpoint");
    }
    const char* p = buf.data() + 4;
    auto take = [&](auto& x) {
        std::memcpy(&x, p, sizeof(x));
        p += sizeof(x);
    };
    std::uint16_t version = 0;
    std::uint8_t kind_byte = 0;
    std::uint32_t entry_count = 0;
    take(version);
    take(kind_byte);
    take(entry_count);
    if (version != kCkptVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(version));
    }
    if (kind_byte > static_cast<std::uint8_t>(ModelKind::kImage)) {
        throw FormatError(path.string() + ": unknown model kind byte " +
                          std::to_string(kind_byte));
    }

    const char* entries_begin = p;
    const char* end = buf.data() + buf.size() - 4;
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, end, 4);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(entries_begin),
              static_cast<uInt>(end - entries_begin)));
    if (crc != stored_crc) {
        throw FormatError(path.string() + ": CRC mismatch, checkpoint is corrupted");
    }

    struct RawEntry {
        std::string name;
        std::vector<std::uint32_t> dims;
        std::vector<float> payload;
    };
    std::vector<RawEntry> raw;
    for (std::uint32_t i = 0; i < entry_count; ++i) {
        auto need = [&](std::size_t k) {
            if (static_cast<std::size_t>(end - p) < k) {
                throw FormatError(path.string() + ": truncated entry table");
            }
        };
        RawEntry e;
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
        need(count * sizeof(float));
        e.payload.resize(count);
        std::memcpy(e.payload.data(), p, count * sizeof(float));
        p += count * sizeof(float);
        raw.push_back(std::move(e));
    }
    if (p != end) {
        throw FormatError(path.string() + ": trailing bytes after entries");
    }

    LoadedCheckpoint result;
    const RawEntry* meta_entry = nullptr;
    for (const auto& e : raw) {
        if (e.name == kMetaEntry) meta_entry = &e;
    }
    if (!meta_entry || meta_entry->payload.size() != 7) {
        throw FormatError(path.string() + ": missing meta entry");
    }
    const auto& m = meta_entry->payload;
    result.meta.epoch = static_cast<std::uint32_t>(m[0]);
    result.meta.seed = static_cast<std::uint32_t>(m[1]) |
                       (static_cast<std::uint32_t>(m[2]) << 16);
    result.meta.config_hash = static_cast<std::uint32_t>(m[3]) |
                              (static_cast<std::uint32_t>(m[4]) << 16);
    result.meta.grid_h = static_cast<int>(m[5]);
    result.meta.grid_w = static_cast<int>(m[6]);

    BuildConfig cfg;
    cfg.grid_h = result.meta.grid_h;
    cfg.grid_w = result.meta.grid_w;
    cfg.seed = result.meta.seed;
    result.graph = build(static_cast<ModelKind>(kind_byte), cfg);

    std::int64_t loaded_param_elems = 0;
    auto restore = [&](NamedTensor& dst) {
        for (const auto& e : raw) {
            if (e.name != dst.name) continue;
            if (e.dims.size() != 4 ||
                e.payload.size() != dst.t.size() ||
                static_cast<int>(e.dims[0]) != dst.t.n ||
                static_cast<int>(e.dims[1]) != dst.t.h ||
                static_cast<int>(e.dims[2]) != dst.t.w ||
                static_cast<int>(e.dims[3]) != dst.t.c) {
                throw FormatError(path.string() + ": tensor '" + dst.name +
                                  "' has unexpected shape");
            }
            std::copy(e.payload.begin(), e.payload.end(), dst.t.v.begin());
            return true;
        }
        return false;
    };
    for (auto& param : result.graph.params) {
        if (!restore(param)) {
            throw FormatError(path.string() + ": missing tensor '" + param.name + "'");
        }
        loaded_param_elems += static_cast<std::int64_t>(param.t.size());
    }
    for (auto& st : result.graph.state) {
        if (!restore(st)) {
            throw FormatError(path.string() + ": missing tensor '" + st.name + "'");
        }
    }
    if (loaded_param_elems != result.graph.param_count()) {
        throw FormatError(path.string() + ": parameter count mismatch after load");
    }
    return result;
}

// ---- data assembly ------------------------------------------------------------

namespace {

int required_frame_channels(ModelKind kind) {
    switch (kind) {
        case ModelKind::kLidar: return 5;
        case ModelKind::kEarly: return 8;
        case ModelKind::kMid: return 8;
        case ModelKind::kImage: return 8;
        case ModelKind::kLate: return 10;
    }
    return 0;
}

void copy_channels(const geometry::PgmFrame& frame, int ch_begin, int ch_count,
                   float* dst) {
    const std::size_t cells = static_cast<std::size_t>(frame.h) * frame.w;
    for (std::size_t i = 0; i < cells; ++i) {
        const float* src = frame.data.data() + i * frame.c + ch_begin;
        std::copy(src, src + ch_count, dst + i * ch_count);
    }
}

}  // namespace

std::vector<nn::TensorF> make_inputs(ModelKind kind,
                                     std::span<const geometry::PgmFrame* const> frames) {
    if (frames.empty()) throw ContractError("make_inputs: no frames");
    const int need = required_frame_channels(kind);
    const int h = frames[0]->h, w = frames[0]->w;
    for (const auto* f : frames) {
        if (f->c != need) {
            throw ContractError("make_inputs: model kind '" +
                                std::string(kind_name(kind)) + "' needs " +
                                std::to_string(need) + "-channel frames, got " +
                                std::to_string(f->c));
        }
        if (f->h != h || f->w != w) {
            throw ContractError("make_inputs: frames have mixed grid sizes");
        }
    }
    const int n = static_cast<int>(frames.size());
    std::vector<nn::TensorF> inputs;
    if (kind == ModelKind::kMid) {
        inputs.emplace_back(n, h, w, 5);
        inputs.emplace_back(n, h, w, 3);
        for (int i = 0; i < n; ++i) {
            copy_channels(*frames[i], 0, 5, inputs[0].item(i));
            copy_channels(*frames[i], geometry::kChR, 3, inputs[1].item(i));
        }
    } else if (kind == ModelKind::kImage) {
        inputs.emplace_back(n, h, w, 3);
        for (int i = 0; i < n; ++i) {
            copy_channels(*frames[i], geometry::kChR, 3, inputs[0].item(i));
        }
    } else {
        inputs.emplace_back(n, h, w, need);
        for (int i = 0; i < n; ++i) {
            copy_channels(*frames[i], 0, need, inputs[0].item(i));
        }
    }
    return inputs;
}

std::vector<std::uint32_t> make_targets(
    std::span<const geometry::PgmFrame* const> frames) {
    std::vector<std::uint32_t> targets;
    for (const auto* f : frames) {
        targets.insert(targets.end(), f->labels.begin(), f->labels.end());
    }
    return targets;
}

// ---- training -----------------------------------------------------------------

namespace {

std::uint32_t fnv1a(const std::string& s) {
    std::uint32_t h = 2166136261u;
    for (const unsigned char c : s) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

std::vector<std::uint32_t> argmax_labels(const nn::TensorF& logits,
                                         const geometry::PgmFrame& frame, int item) {
    const int c = logits.c;
    const std::size_t cells = static_cast<std::size_t>(logits.h) * logits.w;
    std::vector<std::uint32_t> out(cells, 0);
    const float* base = logits.item(item);
    for (std::size_t i = 0; i < cells; ++i) {
        if (!frame.mask[i]) continue;
        const float* row = base + i * c;
        int best = 0;
        for (int ch = 1; ch < c; ++ch) {
            if (row[ch] > row[best]) best = ch;  // ties to lowest index
        }
        out[i] = static_cast<std::uint32_t>(best);
    }
    return out;
}

double validation_miou(ModelGraph& graph,
                       std::span<const geometry::PgmFrame> frames, int batch) {
    evaluate::ConfusionMatrix cm;
    ForwardTape tape;
    for (std::size_t begin = 0; begin < frames.size();
         begin += static_cast<std::size_t>(batch)) {
        const std::size_t end =
            std::min(frames.size(), begin + static_cast<std::size_t>(batch));
        std::vector<const geometry::PgmFrame*> ptrs;
        for (std::size_t i = begin; i < end; ++i) ptrs.push_back(&frames[i]);
        const auto inputs = make_inputs(graph.kind, ptrs);
        const nn::TensorF& logits = graph_forward(graph, inputs, RunMode::kEval, tape);
        for (std::size_t i = begin; i < end; ++i) {
            const auto pred = argmax_labels(logits, frames[i], static_cast<int>(i - begin));
            evaluate::accumulate(cm, frames[i].labels, pred, frames[i].mask);
        }
    }
    return evaluate::miou(cm).miou;
}

}  // namespace

TrainResult train(ModelGraph& graph, std::span<const geometry::PgmFrame> train_frames,
                  std::span<const geometry::PgmFrame> val_frames,
                  const std::array<float, labels::kNumClasses>& class_weights,
                  const TrainConfig& config,
                  const std::optional<std::filesystem::path>& checkpoint_path,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    if (train_frames.empty()) throw ContractError("train: no training frames");
    if (graph.classes != labels::kNumClasses) {
        throw ContractError("train: graph class count mismatch");
    }

    std::ostringstream cfg_text;
    cfg_text << kind_name(graph.kind) << ' ' << graph.grid_h << 'x' << graph.grid_w
             << " e" << config.epochs << " b" << config.batch << " lr" << config.lr
             << " m" << config.momentum << " d" << config.lr_decay << " s"
             << config.seed;
    const std::uint32_t config_hash = fnv1a(cfg_text.str());

    std::vector<nn::TensorF> velocity;
    velocity.reserve(graph.params.size());
    for (const auto& p : graph.params) {
        velocity.emplace_back(p.t.n, p.t.h, p.t.w, p.t.c);
    }

    const std::span<const float> weights(class_weights.data(), class_weights.size());
    std::mt19937 shuffle_rng(config.seed);
    std::vector<std::size_t> order(train_frames.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult result;
    double lr = config.lr;
    ForwardTape tape;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t loss_frames = 0;
        for (std::size_t begin = 0; begin < order.size();
             begin += static_cast<std::size_t>(config.batch)) {
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(config.batch));
            std::vector<const geometry::PgmFrame*> ptrs;
            for (std::size_t i = begin; i < end; ++i) {
                ptrs.push_back(&train_frames[order[i]]);
            }
            const auto inputs = make_inputs(graph.kind, ptrs);
            std::vector<std::uint32_t> targets = make_targets(ptrs);

            const nn::TensorF& logits =
                graph_forward(graph, inputs, RunMode::kTrain, tape);
            auto loss = nn::weighted_ce_loss(logits, targets, weights);
            if (!std::isfinite(loss.loss)) {
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch));
            }
            loss_sum += loss.loss * static_cast<double>(ptrs.size());
            loss_frames += ptrs.size();

            const auto grads = graph_backward(graph, tape, loss.dlogits);
            for (std::size_t p = 0; p < graph.params.size(); ++p) {
                nn::sgd_momentum_step(graph.params[p].t, grads[p], velocity[p], lr,
                                      config.momentum);
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(loss_frames);
        rec.val_miou = val_frames.empty()
                           ? 0.0
                           : validation_miou(graph, val_frames, config.batch);
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (rec.val_miou > result.best_val_miou || result.best_epoch < 0) {
            result.best_val_miou = rec.val_miou;
            result.best_epoch = epoch;
            if (checkpoint_path) {
                CheckpointMeta meta;
                meta.epoch = static_cast<std::uint32_t>(epoch);
                meta.seed = config.seed;
                meta.config_hash = config_hash;
                meta.grid_h = graph.grid_h;
                meta.grid_w = graph.grid_w;
                save_checkpoint(*checkpoint_path, graph, meta);
            }
        }
        if (rec.val_miou >= config.stop_miou) break;
        lr *= config.lr_decay;
    }
    return result;
}

std::string format_metric_log(const std::vector<EpochRecord>& log) {
    std::ostringstream out;
    char buf[96];
    for (const auto& rec : log) {
        std::snprintf(buf, sizeof(buf), "%d %.6f %.6f\n", rec.epoch, rec.train_loss,
                      rec.val_miou);
        out << buf;
    }
    return out.str();
}

// ---- inference ------------------------------------------------------------------

nn::TensorF infer_logits(ModelGraph& graph, const geometry::PgmFrame& frame) {
    const geometry::PgmFrame* ptr = &frame;
    const auto inputs = make_inputs(graph.kind, std::span<const geometry::PgmFrame* const>(&ptr, 1));
    ForwardTape tape;
    graph_forward(graph, inputs, RunMode::kEval, tape);
    return std::move(tape.out[static_cast<std::size_t>(graph.output)]);
}

std::vector<std::uint32_t> infer(ModelGraph& graph, const geometry::PgmFrame& frame) {
    if (frame.h != graph.grid_h || frame.w != graph.grid_w) {
        throw ContractError("infer: frame grid " + std::to_string(frame.h) + "x" +
                            std::to_string(frame.w) + " does not match model " +
                            std::to_string(graph.grid_h) + "x" +
                            std::to_string(graph.grid_w));
    }
    const nn::TensorF logits = infer_logits(graph, frame);
    return argmax_labels(logits, frame, 0);
}

// ---- decision-level fusion -------------------------------------------------------

geometry::PgmFrame late_fusion_prepare(const io::PointCloud& cloud,
                                       const io::Image& image,
                                       const io::CalibrationSet& calib,
                                       ModelGraph& upstream,
                                       const io::LabelImage& reduced_image_labels,
                                       const geometry::FovSpec& fov, int h, int w) {
    if (upstream.kind != ModelKind::kLidar && upstream.kind != ModelKind::kEarly) {
        throw ContractError("late_fusion_prepare: upstream model must be the "
                            "lidar or early kind");
    }
    if (reduced_image_labels.width != image.width ||
        reduced_image_labels.height != image.height) {
        throw ContractError("late_fusion_prepare: label map size does not match image");
    }

    const geometry::PgmFrame frame5 = geometry::spherical_project(cloud, fov, h, w);
    const geometry::PgmFrame frame8 = geometry::colorize(frame5, image, calib);

    const std::vector<std::uint32_t> l2 =
        upstream.kind == ModelKind::kLidar ? infer(upstream, frame5)
                                           : infer(upstream, frame8);

    const std::size_t cells = static_cast<std::size_t>(h) * w;
    std::vector<std::uint32_t> l1(cells, 0);
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            const std::size_t cell = frame8.cell(v, u);
            if (!frame8.mask[cell]) continue;
            int px = 0, py = 0;
            if (!geometry::project_to_pixel(calib, frame8.at(v, u, geometry::kChX),
                                            frame8.at(v, u, geometry::kChY),
                                            frame8.at(v, u, geometry::kChZ), px, py)) {
                continue;  // no projection: l1 stays 0
            }
            const std::uint16_t id = reduced_image_labels.at(py, px);
            if (id >= labels::kNumClasses) {
                throw ContractError("late_fusion_prepare: label map carries id " +
                                    std::to_string(id) +
                                    "; expected reduced-space ids < 16");
            }
            l1[cell] = id;
        }
    }
    return geometry::attach_label_channels(frame8, l1, l2);
}

}  // namespace pgmfuse::models
