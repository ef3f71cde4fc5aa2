#include "pgmfuse/kitti_io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pgmfuse::io {
namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need swaps");

std::vector<char> read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<char> buf(static_cast<std::size_t>(size));
    if (size > 0 && !in.read(buf.data(), size)) {
        throw IoError("short read on " + path.string());
    }
    return buf;
}

void write_all(const fs::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("short write on " + path.string());
}

struct ByteWriter {
    std::vector<char> buf;

    void raw(const void* p, std::size_t size) {
        const char* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + size);
    }
    template <typename T>
    void put(T x) {
        raw(&x, sizeof(T));
    }
};

struct ByteReader {
    const char* p;
    const char* end;
    const fs::path& path;

    void raw(void* out, std::size_t size) {
        if (static_cast<std::size_t>(end - p) < size) {
            throw FormatError("truncated file " + path.string());
        }
        std::memcpy(out, p, size);
        p += size;
    }
    template <typename T>
    T get() {
        T x;
        raw(&x, sizeof(T));
        return x;
    }
    std::size_t remaining() const { return static_cast<std::size_t>(end - p); }
};

}  // namespace

// --- scans ------------------------------------------------------------------

PointCloud read_scan(const fs::path& path) {
    const auto buf = read_all(path);
    if (buf.size() % 16 != 0) {
        throw FormatError("scan " + path.string() + " size " +
                          std::to_string(buf.size()) +
                          " is not a multiple of 16 bytes (stray bytes at offset " +
                          std::to_string(buf.size() - buf.size() % 16) + ")");
    }
    PointCloud cloud;
    const std::size_t n = buf.size() / 16;
    cloud.points.reserve(n);
    const float* f = reinterpret_cast<const float*>(buf.data());
    for (std::size_t i = 0; i < n; ++i) {
        Point p{f[4 * i], f[4 * i + 1], f[4 * i + 2], f[4 * i + 3]};
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
            !std::isfinite(p.intensity)) {
            ++cloud.dropped_nonfinite;
            continue;
        }
        if (p.intensity < 0.0f || p.intensity > 1.0f) {
            p.intensity = std::clamp(p.intensity, 0.0f, 1.0f);
            ++cloud.clamped_intensity;
        }
        cloud.points.push_back(p);
    }
    return cloud;
}

void write_scan(const fs::path& path, const PointCloud& cloud) {
    ByteWriter w;
    w.buf.reserve(cloud.points.size() * 16);
    for (const Point& p : cloud.points) {
        w.put(p.x);
        w.put(p.y);
        w.put(p.z);
        w.put(p.intensity);
    }
    write_all(path, w.buf.data(), w.buf.size());
}

// --- labels -----------------------------------------------------------------

std::vector<LabelRecord> read_labels(const fs::path& path,
                                     std::ptrdiff_t expected_points) {
    const auto buf = read_all(path);
    if (buf.size() % 4 != 0) {
        throw FormatError("label file " + path.string() + " size " +
                          std::to_string(buf.size()) +
                          " is not a multiple of 4 bytes");
    }
    const std::size_t n = buf.size() / 4;
    if (expected_points >= 0 && n != static_cast<std::size_t>(expected_points)) {
        throw ConsistencyError("label file " + path.string() + " has " +
                               std::to_string(n) + " entries but the scan has " +
                               std::to_string(expected_points) + " points");
    }
    std::vector<LabelRecord> out(n);
    const std::uint32_t* words = reinterpret_cast<const std::uint32_t*>(buf.data());
    for (std::size_t i = 0; i < n; ++i) {
        out[i].semantic = static_cast<std::uint16_t>(words[i] & 0xFFFFu);
        out[i].instance = static_cast<std::uint16_t>(words[i] >> 16);
    }
    return out;
}

void write_labels(const fs::path& path, const std::vector<LabelRecord>& records) {
    ByteWriter w;
    w.buf.reserve(records.size() * 4);
    for (const LabelRecord& r : records) {
        const std::uint32_t word =
            static_cast<std::uint32_t>(r.semantic) |
            (static_cast<std::uint32_t>(r.instance) << 16);
        w.put(word);
    }
    write_all(path, w.buf.data(), w.buf.size());
}

// --- calibration ------------------------------------------------------------

CalibrationSet read_calib(const fs::path& path, const std::string& proj_key,
                          const std::string& tr_key) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());

    CalibrationSet calib;
    bool have_proj = false, have_tr = false;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        const std::string key = line.substr(0, colon);
        if (key != proj_key && key != tr_key) continue;

        std::istringstream vals(line.substr(colon + 1));
        Eigen::Matrix<double, 3, 4> m;
        for (int i = 0; i < 12; ++i) {
            std::string tok;
            if (!(vals >> tok)) {
                throw FormatError(path.string() + ":" + std::to_string(line_no) +
                                  ": key " + key + " has fewer than 12 values");
            }
            try {
                std::size_t used = 0;
                m(i / 4, i % 4) = std::stod(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw FormatError(path.string() + ":" + std::to_string(line_no) +
                                  ": non-numeric token '" + tok + "'");
            }
        }
        if (key == proj_key) {
            calib.proj = m;
            have_proj = true;
        } else {
            calib.velo_to_cam = m;
            have_tr = true;
        }
    }
    if (!have_proj) {
        throw FormatError(path.string() + ": missing calibration key " + proj_key);
    }
    if (!have_tr) {
        throw FormatError(path.string() + ": missing calibration key " + tr_key);
    }
    if (calib.proj(0, 0) == 0.0 || calib.proj(1, 1) == 0.0) {
        throw FormatError(path.string() + ": projection matrix " + proj_key +
                          " has zero focal entries");
    }
    const double det = calib.velo_to_cam.block<3, 3>(0, 0).determinant();
    if (std::abs(det - 1.0) > 1e-3) {
        throw FormatError(path.string() + ": rotation part of " + tr_key +
                          " has determinant " + std::to_string(det) +
                          ", expected 1");
    }
    return calib;
}

// --- images -----------------------------------------------------------------

namespace {

bool has_magic(const std::vector<char>& buf, const char* magic, std::size_t n) {
    return buf.size() >= n && std::memcmp(buf.data(), magic, n) == 0;
}

struct PngReadCtx {
    const char* p;
    std::size_t left;
};

void png_mem_read(png_structp png, png_bytep out, png_size_t want) {
    auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
    if (ctx->left < want) {
        png_error(png, "unexpected end of PNG stream");
    }
    std::memcpy(out, ctx->p, want);
    ctx->p += want;
    ctx->left -= want;
}

// Decodes a PNG into 8-bit rows with the requested channel count (3 = RGB,
// 1 = gray). Throws FormatError on anything libpng rejects.
std::vector<std::uint8_t> decode_png(const std::vector<char>& buf,
                                     const fs::path& path, int want_channels,
                                     int& width, int& height) {
    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng init failed");
    }
    std::vector<std::uint8_t> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("cannot decode PNG " + path.string());
    }
    PngReadCtx ctx{buf.data(), buf.size()};
    png_set_read_fn(png, &ctx, png_mem_read);
    png_read_info(png, info);

    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (want_channels == 3) {
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
            png_set_gray_to_rgb(png);
        }
    } else {
        if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
            color == PNG_COLOR_TYPE_PALETTE) {
            png_set_rgb_to_gray_fixed(png, 1, -1, -1);
        }
    }
    png_read_update_info(png, info);

    pixels.resize(static_cast<std::size_t>(width) * height * want_channels);
    rows.resize(height);
    for (int y = 0; y < height; ++y) {
        rows[y] = pixels.data() + static_cast<std::size_t>(y) * width * want_channels;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

// Binary netpbm header: returns pixel data offset, fills dims and maxval.
std::size_t parse_pnm_header(const std::vector<char>& buf, const fs::path& path,
                             int& width, int& height, int& maxval) {
    std::size_t i = 2;  // past magic
    auto skip_ws = [&] {
        while (i < buf.size()) {
            if (buf[i] == '#') {
                while (i < buf.size() && buf[i] != '\n') ++i;
            } else if (std::isspace(static_cast<unsigned char>(buf[i]))) {
                ++i;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> int {
        skip_ws();
        int v = 0;
        bool any = false;
        while (i < buf.size() && std::isdigit(static_cast<unsigned char>(buf[i]))) {
            v = v * 10 + (buf[i] - '0');
            ++i;
            any = true;
        }
        if (!any) throw FormatError("bad netpbm header in " + path.string());
        return v;
    };
    width = read_int();
    height = read_int();
    maxval = read_int();
    if (i >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[i]))) {
        throw FormatError("bad netpbm header in " + path.string());
    }
    return i + 1;
}

}  // namespace

Image read_image(const fs::path& path) {
    const auto buf = read_all(path);
    Image img;
    if (has_magic(buf, "\x89PNG", 4)) {
        const auto pixels = decode_png(buf, path, 3, img.width, img.height);
        img.data.resize(pixels.size());
        for (std::size_t i = 0; i < pixels.size(); ++i) {
            img.data[i] = static_cast<float>(pixels[i]) / 255.0f;
        }
        return img;
    }
    if (has_magic(buf, "P6", 2)) {
        int maxval = 0;
        const std::size_t off = parse_pnm_header(buf, path, img.width, img.height, maxval);
        if (maxval != 255) {
            throw FormatError(path.string() + ": only 8-bit PPM supported");
        }
        const std::size_t need = static_cast<std::size_t>(img.width) * img.height * 3;
        if (buf.size() - off < need) {
            throw FormatError(path.string() + ": truncated PPM pixel data");
        }
        img.data.resize(need);
        const auto* px = reinterpret_cast<const std::uint8_t*>(buf.data() + off);
        for (std::size_t i = 0; i < need; ++i) {
            img.data[i] = static_cast<float>(px[i]) / 255.0f;
        }
        return img;
    }
    throw FormatError(path.string() + ": not a PNG or binary PPM image");
}

void write_image_ppm(const fs::path& path, const Image& img) {
    std::string header = "P6\n" + std::to_string(img.width) + " " +
                         std::to_string(img.height) + "\n255\n";
    std::vector<char> out(header.begin(), header.end());
    out.reserve(out.size() + img.data.size());
    for (const float v : img.data) {
        const float clamped = std::clamp(v, 0.0f, 1.0f);
        out.push_back(static_cast<char>(
            static_cast<std::uint8_t>(std::lround(clamped * 255.0f))));
    }
    write_all(path, out.data(), out.size());
}

LabelImage read_label_image(const fs::path& path) {
    const auto buf = read_all(path);
    LabelImage img;
    if (has_magic(buf, "\x89PNG", 4)) {
        const auto pixels = decode_png(buf, path, 1, img.width, img.height);
        img.ids.assign(pixels.begin(), pixels.end());
        return img;
    }
    if (has_magic(buf, "P5", 2)) {
        int maxval = 0;
        const std::size_t off = parse_pnm_header(buf, path, img.width, img.height, maxval);
        const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
        const int bytes = maxval > 255 ? 2 : 1;
        if (buf.size() - off < n * bytes) {
            throw FormatError(path.string() + ": truncated PGM pixel data");
        }
        img.ids.resize(n);
        const auto* px = reinterpret_cast<const std::uint8_t*>(buf.data() + off);
        for (std::size_t i = 0; i < n; ++i) {
            // 2-byte netpbm samples are big-endian
            img.ids[i] = bytes == 1 ? px[i]
                                    : static_cast<std::uint16_t>(px[2 * i] << 8 |
                                                                 px[2 * i + 1]);
        }
        return img;
    }
    throw FormatError(path.string() + ": not a PNG or binary PGM label image");
}

void write_label_image_pgm(const fs::path& path, const LabelImage& img) {
    std::string header = "P5\n" + std::to_string(img.width) + " " +
                         std::to_string(img.height) + "\n255\n";
    std::vector<char> out(header.begin(), header.end());
    out.reserve(out.size() + img.ids.size());
    for (const std::uint16_t id : img.ids) {
        if (id > 255) {
            throw ContractError("label id " + std::to_string(id) +
                                " does not fit an 8-bit PGM");
        }
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(id)));
    }
    write_all(path, out.data(), out.size());
}

// --- polar grid files --------------------------------------------------------

namespace {
constexpr char kPgmMagic[4] = {'P', 'G', 'M', 'F'};
constexpr std::uint16_t kPgmVersion = 1;
}  // namespace

void write_pgm(const fs::path& path, const geometry::PgmFrame& frame) {
    if (frame.h <= 0 || frame.w <= 0 || frame.c <= 0) {
        throw ContractError("write_pgm: empty frame");
    }
    const std::size_t cells = static_cast<std::size_t>(frame.h) * frame.w;
    if (frame.data.size() != cells * frame.c || frame.mask.size() != cells ||
        frame.labels.size() != cells) {
        throw ContractError("write_pgm: frame buffers disagree with dimensions");
    }

    ByteWriter w;
    w.raw(kPgmMagic, 4);
    w.put(kPgmVersion);
    w.put(static_cast<std::uint32_t>(frame.h));
    w.put(static_cast<std::uint32_t>(frame.w));
    w.put(static_cast<std::uint32_t>(frame.c));
    w.put(static_cast<std::uint32_t>(0));  // flags, reserved

    const std::size_t payload_start = w.buf.size();
    w.raw(frame.data.data(), frame.data.size() * sizeof(float));
    w.raw(frame.mask.data(), frame.mask.size());
    w.raw(frame.labels.data(), frame.labels.size() * sizeof(std::uint32_t));

    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(w.buf.data() + payload_start),
              static_cast<uInt>(w.buf.size() - payload_start)));
    w.put(crc);
    write_all(path, w.buf.data(), w.buf.size());
}

geometry::PgmFrame read_pgm(const fs::path& path) {
    const auto buf = read_all(path);
    ByteReader r{buf.data(), buf.data() + buf.size(), path};

    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kPgmMagic, 4) != 0) {
        throw FormatError(path.string() + ": bad magic, not a PGMF file");
    }
    const auto version = r.get<std::uint16_t>();
    if (version != kPgmVersion) {
        throw FormatError(path.string() + ": unsupported PGMF version " +
                          std::to_string(version));
    }
    const auto h = r.get<std::uint32_t>();
    const auto w = r.get<std::uint32_t>();
    const auto c = r.get<std::uint32_t>();
    r.get<std::uint32_t>();  // flags
    if (h == 0 || w == 0 || c == 0 || h > 1u << 16 || w > 1u << 16 || c > 64) {
        throw FormatError(path.string() + ": implausible dimensions " +
                          std::to_string(h) + "x" + std::to_string(w) + "x" +
                          std::to_string(c));
    }

    const std::size_t cells = static_cast<std::size_t>(h) * w;
    const std::size_t payload_bytes =
        cells * c * sizeof(float) + cells + cells * sizeof(std::uint32_t);
    if (r.remaining() != payload_bytes + sizeof(std::uint32_t)) {
        throw FormatError(path.string() + ": payload size mismatch, have " +
                          std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(payload_bytes + 4));
    }
    const char* payload = r.p;

    geometry::PgmFrame frame(static_cast<int>(h), static_cast<int>(w),
                             static_cast<int>(c));
    r.raw(frame.data.data(), cells * c * sizeof(float));
    r.raw(frame.mask.data(), cells);
    r.raw(frame.labels.data(), cells * sizeof(std::uint32_t));

    const auto stored_crc = r.get<std::uint32_t>();
    const auto crc = static_cast<std::uint32_t>(crc32(
        0L, reinterpret_cast<const Bytef*>(payload), static_cast<uInt>(payload_bytes)));
    if (crc != stored_crc) {
        throw FormatError(path.string() + ": CRC mismatch, file is corrupted");
    }
    return frame;
}

// --- dataset layout -----------------------------------------------------------

SplitManifest default_split() {
    SplitManifest m;
    m.train = {"00", "01", "02", "03", "04", "05", "06", "09", "10"};
    m.val = {"07"};
    m.test = {"08"};
    return m;
}

SplitManifest read_split(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split manifest " + path.string());
    SplitManifest m;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream tok(line);
        std::string bucket;
        if (!(tok >> bucket)) continue;
        std::vector<std::string>* dst = nullptr;
        if (bucket == "train") dst = &m.train;
        else if (bucket == "val") dst = &m.val;
        else if (bucket == "test") dst = &m.test;
        else {
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": unknown split bucket '" + bucket + "'");
        }
        std::string seq;
        while (tok >> seq) dst->push_back(seq);
    }
    // disjointness
    auto all = m.train;
    all.insert(all.end(), m.val.begin(), m.val.end());
    all.insert(all.end(), m.test.begin(), m.test.end());
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
        throw FormatError(path.string() + ": train/val/test share a sequence");
    }
    return m;
}

void count_scans(const fs::path& root, SplitManifest& manifest) {
    manifest.scan_counts.clear();
    auto count_one = [&](const std::string& seq) {
        manifest.scan_counts.emplace_back(seq, list_scans(root, seq).size());
    };
    for (const auto& s : manifest.train) count_one(s);
    for (const auto& s : manifest.val) count_one(s);
    for (const auto& s : manifest.test) count_one(s);
}

fs::path sequence_dir(const fs::path& root, const std::string& seq) {
    return root / "sequences" / seq;
}

std::vector<std::string> list_scans(const fs::path& root, const std::string& seq) {
    const fs::path dir = sequence_dir(root, seq) / "velodyne";
    std::vector<std::string> stems;
    if (!fs::is_directory(dir)) return stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".bin") {
            stems.push_back(entry.path().stem().string());
        }
    }
    std::sort(stems.begin(), stems.end());
    return stems;
}

}  // namespace pgmfuse::io
