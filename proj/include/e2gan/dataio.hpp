#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include <png.h>

#include "e2gan/lora.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// PNG images (8-bit RGB) and [-1,1] float conversion
// ---------------------------------------------------------------------------

struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> rgb;  // H x W x 3
};

inline ImageU8 read_png_rgb8(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG '" + path + "': " + image.message);
    image.format = PNG_FORMAT_RGB;
    ImageU8 out;
    out.width = static_cast<int>(image.width);
    out.height = static_cast<int>(image.height);
    out.rgb.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
        png_image_free(&image);
        throw IoError("cannot decode PNG '" + path + "': " + image.message);
    }
    return out;
}

inline void write_png_rgb8(const std::string& path, const ImageU8& img) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.rgb.data(), 0, nullptr))
        throw IoError("cannot write PNG '" + path + "': " + image.message);
}

// u8 -> float as (p - 127.5) / 127.5. This exact form guarantees that
// inverting the byte (255 - p) negates the float bit-for-bit.
inline float float_from_u8(unsigned char p) {
    return (static_cast<float>(p) - 127.5f) / 127.5f;
}

inline unsigned char u8_from_float(float f) {
    const long v = std::lround((f + 1.0f) * 127.5f);
    return static_cast<unsigned char>(std::clamp(v, 0l, 255l));
}

inline Tensor<float> image_to_tensor(const ImageU8& img) {
    Tensor<float> t({3, img.height, img.width});
    for (int h = 0; h < img.height; ++h)
        for (int w = 0; w < img.width; ++w)
            for (int c = 0; c < 3; ++c)
                t.at3(c, h, w) = float_from_u8(img.rgb[static_cast<size_t>((h * img.width + w) * 3 + c)]);
    return t;
}

inline ImageU8 tensor_to_image(const Tensor<float>& t) {
    if (t.rank() != 3 || t.dim(0) != 3)
        throw ShapeError("tensor_to_image expects [3,H,W], got " + t.shape_str());
    ImageU8 img;
    img.height = static_cast<int>(t.dim(1));
    img.width = static_cast<int>(t.dim(2));
    img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
    for (int h = 0; h < img.height; ++h)
        for (int w = 0; w < img.width; ++w)
            for (int c = 0; c < 3; ++c)
                img.rgb[static_cast<size_t>((h * img.width + w) * 3 + c)] =
                    u8_from_float(t.at3(c, h, w));
    return img;
}

// Bilinear resize with half-pixel centers (src = (dst + 0.5) * scale - 0.5).
inline Tensor<float> bilinear_resize(const Tensor<float>& src, int out_h, int out_w) {
    const int64_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
    if (H == out_h && W == out_w) return src;
    Tensor<float> dst({C, out_h, out_w});
    const double sy = static_cast<double>(H) / out_h;
    const double sx = static_cast<double>(W) / out_w;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < out_h; ++y) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, H - 1);
            const double wy = fy - y0;
            for (int64_t x = 0; x < out_w; ++x) {
                const double fx =
                    std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, W - 1);
                const double wx = fx - x0;
                const double v = (1 - wy) * ((1 - wx) * src.at3(c, y0, x0) + wx * src.at3(c, y0, x1)) +
                                 wy * ((1 - wx) * src.at3(c, y1, x0) + wx * src.at3(c, y1, x1));
                dst.at3(c, y, x) = static_cast<float>(v);
            }
        }
    return dst;
}

// Rec.601 luma over a [-1,1] float image, averaged over pixels.
inline double mean_luminance(const Tensor<float>& img) {
    const int64_t plane = img.dim(1) * img.dim(2);
    double acc = 0;
    for (int64_t i = 0; i < plane; ++i)
        acc += 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
    return acc / static_cast<double>(plane);
}

// ---------------------------------------------------------------------------
// Concept datasets
// ---------------------------------------------------------------------------

struct SplitIndices {
    std::vector<int> train, val, test;
};

// 80/10/10 with floor on val and test, remainder to train; membership is a
// deterministic shuffle from split_seed.
inline SplitIndices make_splits(int n, uint64_t split_seed) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    RandomEngine rng(split_seed);
    rng.shuffle(order);
    const int n_val = n / 10;
    const int n_test = n / 10;
    const int n_train = n - n_val - n_test;
    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + n_train);
    s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    s.test.assign(order.begin() + n_train + n_val, order.end());
    return s;
}

// Deterministic stand-in text encoder: a prompt hashes to a fixed unit
// vector of the requested dimension.
inline std::vector<float> toy_text_embedding(const std::string& prompt, int dim) {
    RandomEngine rng(fnv1a64("text:" + prompt));
    std::vector<float> v(static_cast<size_t>(dim));
    double norm2 = 0;
    for (auto& x : v) {
        x = static_cast<float>(rng.normal());
        norm2 += static_cast<double>(x) * x;
    }
    const float inv = norm2 > 0 ? static_cast<float>(1.0 / std::sqrt(norm2)) : 1.0f;
    for (auto& x : v) x *= inv;
    return v;
}

struct ConceptRecord {
    std::string name;
    std::string prompt;
    std::vector<float> text_embedding;  // derived from the prompt when empty
    std::vector<Tensor<float>> sources;  // [3,R,R] each, in [-1,1]
    std::vector<Tensor<float>> edited;
    std::vector<std::string> pair_ids;
    SplitIndices splits;
    int resolution = 0;

    int size() const { return static_cast<int>(sources.size()); }

    const std::vector<float>& embedding_for_dim(int dim) {
        if (static_cast<int>(text_embedding.size()) != dim)
            text_embedding = toy_text_embedding(prompt, dim);
        return text_embedding;
    }

    // Keeps only the listed pair ids in the train split (coreset reduction).
    void restrict_train_to(const std::vector<std::string>& ids) {
        std::map<std::string, int> index_of;
        for (int i = 0; i < size(); ++i) index_of[pair_ids[static_cast<size_t>(i)]] = i;
        std::vector<int> keep;
        for (const auto& id : ids) {
            auto it = index_of.find(id);
            if (it == index_of.end())
                throw ConfigError("coreset id '" + id + "' not present in concept '" + name + "'");
            keep.push_back(it->second);
        }
        std::vector<int> train_set = splits.train;
        std::sort(train_set.begin(), train_set.end());
        std::vector<int> new_train;
        for (int i : keep)
            if (std::binary_search(train_set.begin(), train_set.end(), i)) new_train.push_back(i);
        splits.train = new_train;
    }
};

// ---------------------------------------------------------------------------
// Dataset manifests (JSON with paths relative to the manifest)
// ---------------------------------------------------------------------------

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw IoError("malformed JSON in '" + path + "': " + e.what());
    }
    return j;
}

inline void write_text_file_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, target);
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

inline ConceptRecord load_concept_dataset(const std::string& manifest_path, int resolution) {
    namespace fs = std::filesystem;
    const nlohmann::json j = read_json_file(manifest_path);
    reject_unknown_keys(j, {"concept_name", "prompt_text", "split_seed", "pairs"},
                        "manifest '" + manifest_path + "'");
    ConceptRecord rec;
    try {
        rec.name = j.at("concept_name").get<std::string>();
        rec.prompt = j.at("prompt_text").get<std::string>();
        rec.resolution = resolution;
        const uint64_t split_seed = j.at("split_seed").get<uint64_t>();
        const fs::path base = fs::path(manifest_path).parent_path();
        for (const auto& pair : j.at("pairs")) {
            const std::string sp = (base / pair.at("source").get<std::string>()).string();
            const std::string ep = (base / pair.at("edited").get<std::string>()).string();
            for (const auto& p : {sp, ep})
                if (!fs::exists(p)) throw IoError("dataset file missing: '" + p + "'");
            Tensor<float> s = image_to_tensor(read_png_rgb8(sp));
            Tensor<float> e = image_to_tensor(read_png_rgb8(ep));
            rec.sources.push_back(bilinear_resize(s, resolution, resolution));
            rec.edited.push_back(bilinear_resize(e, resolution, resolution));
            rec.pair_ids.push_back(pair.at("source").get<std::string>());
        }
        if (rec.sources.empty()) throw ConfigError("manifest '" + manifest_path + "' has no pairs");
        rec.splits = make_splits(rec.size(), split_seed);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest '" + manifest_path + "': " + e.what());
    }
    return rec;
}

// Materializes a record as PNG pairs plus a manifest; returns the manifest path.
inline std::string write_concept_dataset(const ConceptRecord& rec, const std::string& dir,
                                         uint64_t split_seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json pairs = nlohmann::json::array();
    for (int i = 0; i < rec.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%04d", i);
        const std::string sname = "src_" + std::string(buf) + ".png";
        const std::string ename = "edit_" + std::string(buf) + ".png";
        write_png_rgb8((fs::path(dir) / sname).string(),
                       tensor_to_image(rec.sources[static_cast<size_t>(i)]));
        write_png_rgb8((fs::path(dir) / ename).string(),
                       tensor_to_image(rec.edited[static_cast<size_t>(i)]));
        pairs.push_back({{"source", sname}, {"edited", ename}});
    }
    const nlohmann::json manifest = {{"concept_name", rec.name},
                                     {"prompt_text", rec.prompt},
                                     {"split_seed", split_seed},
                                     {"pairs", pairs}};
    const std::string path = (fs::path(dir) / "manifest.json").string();
    write_text_file_atomic(path, manifest.dump(2) + "\n");
    return path;
}

// Coreset manifests: the ids selected by clustering-based data reduction.
inline void write_coreset_manifest(const std::string& path, const std::vector<std::string>& ids) {
    const nlohmann::json j = {{"k", ids.size()}, {"ids", ids}};
    write_text_file_atomic(path, j.dump(2) + "\n");
}

inline std::vector<std::string> read_coreset_manifest(const std::string& path) {
    const nlohmann::json j = read_json_file(path);
    reject_unknown_keys(j, {"k", "ids"}, "coreset manifest '" + path + "'");
    std::vector<std::string> ids = j.at("ids").get<std::vector<std::string>>();
    if (ids.size() != j.at("k").get<size_t>())
        throw IoError("coreset manifest '" + path + "': k does not match ids length");
    return ids;
}

// ---------------------------------------------------------------------------
// Synthetic paired tasks: procedurally drawn source images plus a
// deterministic pixel transform, the desk-scale substitute for externally
// produced paired data.
// ---------------------------------------------------------------------------

enum class SynthTask { invert, hue_shift, blur, posterize };

inline const char* to_string(SynthTask t) {
    switch (t) {
        case SynthTask::invert: return "invert";
        case SynthTask::hue_shift: return "hue_shift";
        case SynthTask::blur: return "blur";
        case SynthTask::posterize: return "posterize";
    }
    return "?";
}

inline SynthTask synth_task_from_string(const std::string& s) {
    if (s == "invert") return SynthTask::invert;
    if (s == "hue_shift") return SynthTask::hue_shift;
    if (s == "blur") return SynthTask::blur;
    if (s == "posterize") return SynthTask::posterize;
    throw ConfigError("unknown synthetic task '" + s + "'");
}

namespace detail_synth {

// Random colored shapes over a two-color gradient. Channel values stay in
// [60, 195] so the hue rotation below never clips.
inline ImageU8 draw_source(int res, RandomEngine& rng) {
    ImageU8 img;
    img.width = img.height = res;
    img.rgb.resize(static_cast<size_t>(res) * res * 3);
    auto color = [&] {
        return std::array<int, 3>{60 + static_cast<int>(rng.uniform_index(136)),
                                  60 + static_cast<int>(rng.uniform_index(136)),
                                  60 + static_cast<int>(rng.uniform_index(136))};
    };
    const auto c0 = color();
    const auto c1 = color();
    const bool horizontal = rng.uniform() < 0.5;
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const double t = static_cast<double>(horizontal ? x : y) / (res - 1);
            for (int c = 0; c < 3; ++c)
                img.rgb[static_cast<size_t>((y * res + x) * 3 + c)] =
                    static_cast<unsigned char>(std::lround(c0[static_cast<size_t>(c)] +
                                                           t * (c1[static_cast<size_t>(c)] -
                                                                c0[static_cast<size_t>(c)])));
        }
    const int n_shapes = 2 + static_cast<int>(rng.uniform_index(3));
    for (int s = 0; s < n_shapes; ++s) {
        const auto col = color();
        const bool circle = rng.uniform() < 0.5;
        const int cx = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(res)));
        const int cy = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(res)));
        const int r = res / 8 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(res / 4)));
        for (int y = std::max(0, cy - r); y <= std::min(res - 1, cy + r); ++y)
            for (int x = std::max(0, cx - r); x <= std::min(res - 1, cx + r); ++x) {
                if (circle && (x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r) continue;
                for (int c = 0; c < 3; ++c)
                    img.rgb[static_cast<size_t>((y * res + x) * 3 + c)] =
                        static_cast<unsigned char>(col[static_cast<size_t>(c)]);
            }
    }
    return img;
}

// Rotates the chroma component around the luma axis. The luma weights sum
// to exactly 1, so mean luminance is preserved up to quantization.
inline ImageU8 hue_rotate(const ImageU8& src, double theta) {
    constexpr double wr = 0.299, wg = 0.587, wb = 0.114;
    // Orthonormal basis of the plane { d : w . d = 0 }.
    static const auto basis = [] {
        std::array<double, 3> u{wg, -wr, 0.0};
        double nu = std::sqrt(u[0] * u[0] + u[1] * u[1]);
        u = {u[0] / nu, u[1] / nu, 0.0};
        const std::array<double, 3> w{wr, wg, wb};
        std::array<double, 3> v{w[1] * u[2] - w[2] * u[1], w[2] * u[0] - w[0] * u[2],
                                w[0] * u[1] - w[1] * u[0]};
        double nv = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        v = {v[0] / nv, v[1] / nv, v[2] / nv};
        return std::pair{u, v};
    }();
    const auto& [u, v] = basis;
    ImageU8 out = src;
    const double ct = std::cos(theta), st = std::sin(theta);
    const size_t n = src.rgb.size() / 3;
    for (size_t i = 0; i < n; ++i) {
        const double r = src.rgb[3 * i + 0] / 255.0;
        const double g = src.rgb[3 * i + 1] / 255.0;
        const double b = src.rgb[3 * i + 2] / 255.0;
        const double y = wr * r + wg * g + wb * b;
        const double d[3] = {r - y, g - y, b - y};
        const double a0 = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
        const double a1 = d[0] * v[0] + d[1] * v[1] + d[2] * v[2];
        const double b0 = a0 * ct - a1 * st;
        const double b1 = a0 * st + a1 * ct;
        for (int c = 0; c < 3; ++c) {
            const double val = y + b0 * u[static_cast<size_t>(c)] + b1 * v[static_cast<size_t>(c)];
            out.rgb[3 * i + static_cast<size_t>(c)] = static_cast<unsigned char>(
                std::clamp(std::lround(val * 255.0), 0l, 255l));
        }
    }
    return out;
}

inline ImageU8 box_blur3(const ImageU8& src) {
    ImageU8 out = src;
    const int H = src.height, W = src.width;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                int sum = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = std::clamp(y + dy, 0, H - 1);
                        const int xx = std::clamp(x + dx, 0, W - 1);
                        sum += src.rgb[static_cast<size_t>((yy * W + xx) * 3 + c)];
                    }
                out.rgb[static_cast<size_t>((y * W + x) * 3 + c)] =
                    static_cast<unsigned char>((sum + 4) / 9);
            }
    return out;
}

inline ImageU8 posterize4(const ImageU8& src) {
    ImageU8 out = src;
    for (auto& p : out.rgb) p = static_cast<unsigned char>((p / 64) * 85);
    return out;
}

inline ImageU8 invert(const ImageU8& src) {
    ImageU8 out = src;
    for (auto& p : out.rgb) p = static_cast<unsigned char>(255 - p);
    return out;
}

}  // namespace detail_synth

inline ConceptRecord synth_paired_task(SynthTask task, int n, int resolution, uint64_t seed) {
    if (n < 2) throw ConfigError("synthetic task needs at least 2 pairs");
    ConceptRecord rec;
    rec.name = to_string(task);
    rec.prompt = to_string(task);
    rec.resolution = resolution;
    RandomEngine rng(seed);
    for (int i = 0; i < n; ++i) {
        const ImageU8 src = detail_synth::draw_source(resolution, rng);
        ImageU8 ed;
        switch (task) {
            case SynthTask::invert: ed = detail_synth::invert(src); break;
            case SynthTask::hue_shift: ed = detail_synth::hue_rotate(src, 1.1); break;
            case SynthTask::blur: ed = detail_synth::box_blur3(src); break;
            case SynthTask::posterize: ed = detail_synth::posterize4(src); break;
        }
        rec.sources.push_back(image_to_tensor(src));
        rec.edited.push_back(image_to_tensor(ed));
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_%04d", to_string(task), i);
        rec.pair_ids.emplace_back(buf);
    }
    rec.splits = make_splits(n, seed);
    return rec;
}

// ---------------------------------------------------------------------------
// Checkpoint container: a single file with a JSON header plus raw
// little-endian tensor blobs, name-sorted. Round trips are byte-exact.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr char kCheckpointMagic[9] = "E2GANCK1";

struct TensorBlob {
    std::string dtype;  // "f32" | "f64"
    std::vector<int64_t> shape;
    std::vector<unsigned char> bytes;
};

template <typename T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else static_assert(sizeof(T) == 0, "unsupported checkpoint scalar type");
}

template <typename T>
TensorBlob to_blob(const Tensor<T>& t) {
    TensorBlob b;
    b.dtype = dtype_name<T>();
    b.shape = t.shape();
    b.bytes.resize(static_cast<size_t>(t.numel()) * sizeof(T));
    std::memcpy(b.bytes.data(), t.data(), b.bytes.size());
    return b;
}

template <typename T>
Tensor<T> from_blob(const TensorBlob& b, const std::string& name) {
    if (b.dtype != dtype_name<T>())
        throw IntegrityError("tensor '" + name + "' has dtype " + b.dtype + ", expected " +
                             dtype_name<T>());
    Tensor<T> t(b.shape);
    if (b.bytes.size() != static_cast<size_t>(t.numel()) * sizeof(T))
        throw IntegrityError("tensor '" + name + "' byte size mismatch");
    std::memcpy(t.data(), b.bytes.data(), b.bytes.size());
    return t;
}

struct Checkpoint {
    enum class Kind { base_full, concept_delta };

    Kind kind = Kind::base_full;
    int format_version = kCheckpointFormatVersion;
    nlohmann::json metadata;  // config snapshot; rank spec + prompt for deltas
    std::map<std::string, TensorBlob> tensors;

    static const char* kind_name(Kind k) {
        return k == Kind::base_full ? "base_full" : "concept_delta";
    }
    static Kind kind_from_string(const std::string& s) {
        if (s == "base_full") return Kind::base_full;
        if (s == "concept_delta") return Kind::concept_delta;
        throw IntegrityError("unknown checkpoint kind '" + s + "'");
    }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    namespace fs = std::filesystem;
    nlohmann::json header;
    header["kind"] = Checkpoint::kind_name(ckpt.kind);
    header["metadata"] = ckpt.metadata;
    nlohmann::json tens = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto& [name, blob] : ckpt.tensors) {
        tens[name] = {{"dtype", blob.dtype},
                      {"shape", blob.shape},
                      {"offset", offset},
                      {"bytes", blob.bytes.size()},
                      {"crc32", crc32(blob.bytes.data(), blob.bytes.size())}};
        offset += blob.bytes.size();
    }
    header["tensors"] = tens;
    const std::string hj = header.dump();

    std::string out;
    out.reserve(20 + hj.size() + offset);
    out.append(kCheckpointMagic, 8);
    auto put_u32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    };
    put_u32(static_cast<uint32_t>(ckpt.format_version));
    put_u32(static_cast<uint32_t>(hj.size()));
    put_u32(crc32(hj.data(), hj.size()));
    out.append(hj);
    for (const auto& [name, blob] : ckpt.tensors)
        out.append(reinterpret_cast<const char*>(blob.bytes.data()), blob.bytes.size());

    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint '" + path + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("short write to checkpoint '" + path + "'");
    }
    fs::rename(tmp, target);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (data.size() < 20 || data.compare(0, 8, kCheckpointMagic, 8) != 0)
        throw IntegrityError("'" + path + "' is not a checkpoint file");
    auto get_u32 = [&](size_t at) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(data[at + static_cast<size_t>(i)]))
                 << (8 * i);
        return v;
    };
    const uint32_t version = get_u32(8);
    if (version != static_cast<uint32_t>(kCheckpointFormatVersion))
        throw IntegrityError("checkpoint '" + path + "' has format version " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointFormatVersion) +
                             "; re-export it with a matching tool version");
    const uint32_t hlen = get_u32(12);
    const uint32_t hcrc = get_u32(16);
    if (data.size() < 20 + hlen) throw IntegrityError("checkpoint '" + path + "' is truncated");
    const std::string hj = data.substr(20, hlen);
    if (crc32(hj.data(), hj.size()) != hcrc)
        throw IntegrityError("checkpoint '" + path + "': header checksum mismatch");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hj);
    } catch (const std::exception& e) {
        throw IntegrityError("checkpoint '" + path + "': bad header: " + e.what());
    }
    Checkpoint ckpt;
    ckpt.format_version = static_cast<int>(version);
    ckpt.kind = Checkpoint::kind_from_string(header.at("kind").get<std::string>());
    ckpt.metadata = header.at("metadata");
    const size_t base = 20 + hlen;
    for (const auto& [name, tj] : header.at("tensors").items()) {
        TensorBlob blob;
        blob.dtype = tj.at("dtype").get<std::string>();
        blob.shape = tj.at("shape").get<std::vector<int64_t>>();
        const uint64_t off = tj.at("offset").get<uint64_t>();
        const uint64_t nbytes = tj.at("bytes").get<uint64_t>();
        if (base + off + nbytes > data.size())
            throw IntegrityError("checkpoint '" + path + "': tensor '" + name +
                                 "' extends past end of file");
        blob.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(base + off),
                          data.begin() + static_cast<std::ptrdiff_t>(base + off + nbytes));
        if (crc32(blob.bytes.data(), blob.bytes.size()) != tj.at("crc32").get<uint32_t>())
            throw IntegrityError("checkpoint '" + path + "': tensor '" + name +
                                 "' checksum mismatch");
        ckpt.tensors[name] = std::move(blob);
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint
// ---------------------------------------------------------------------------

template <typename T>
Checkpoint make_base_checkpoint(const Generator<T>& gen, const Discriminator<T>* disc) {
    Checkpoint ckpt;
    ckpt.kind = Checkpoint::Kind::base_full;
    ckpt.metadata = {{"generator_config", gen.config().to_json()},
                     {"dtype", dtype_name<T>()}};
    gen.visit_params([&](const std::string& n, const Var<T>& v) {
        ckpt.tensors["g." + n] = to_blob(v.val());
    });
    if (disc)
        disc->visit_params([&](const std::string& n, const Var<T>& v) {
            ckpt.tensors["d." + n] = to_blob(v.val());
        });
    return ckpt;
}

inline bool checkpoint_has_discriminator(const Checkpoint& ckpt) {
    for (const auto& [name, blob] : ckpt.tensors)
        if (name.rfind("d.", 0) == 0) return true;
    return false;
}

template <typename T>
GeneratorConfig checkpoint_generator_config(const Checkpoint& ckpt) {
    const auto& meta = ckpt.kind == Checkpoint::Kind::base_full
                           ? ckpt.metadata.at("generator_config")
                           : ckpt.metadata.at("base_config");
    return GeneratorConfig::from_json(meta);
}

template <typename T>
Generator<T> generator_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != Checkpoint::Kind::base_full)
        throw IntegrityError("expected a base_full checkpoint");
    GeneratorConfig cfg = GeneratorConfig::from_json(ckpt.metadata.at("generator_config"));
    Generator<T> gen = build_generator<T>(cfg, 0);
    std::map<std::string, Tensor<T>> state;
    for (const auto& [name, blob] : ckpt.tensors)
        if (name.rfind("g.", 0) == 0) state[name.substr(2)] = from_blob<T>(blob, name);
    gen.load_state(state);
    return gen;
}

template <typename T>
Discriminator<T> discriminator_from_checkpoint(const Checkpoint& ckpt) {
    if (!checkpoint_has_discriminator(ckpt))
        throw IntegrityError("checkpoint has no discriminator tensors");
    GeneratorConfig cfg = GeneratorConfig::from_json(ckpt.metadata.at("generator_config"));
    Discriminator<T> d = build_discriminator<T>(cfg, 0);
    std::map<std::string, Tensor<T>> state;
    for (const auto& [name, blob] : ckpt.tensors)
        if (name.rfind("d.", 0) == 0) state[name.substr(2)] = from_blob<T>(blob, name);
    d.load_state(state);
    return d;
}

template <typename T>
Checkpoint make_delta_checkpoint(const AdaptedGenerator<T>& adapted, const std::string& prompt) {
    Checkpoint ckpt;
    ckpt.kind = Checkpoint::Kind::concept_delta;
    ckpt.metadata = {{"base_config", adapted.base.config().to_json()},
                     {"rank_spec", adapted.spec.to_json()},
                     {"prompt", prompt},
                     {"dtype", dtype_name<T>()}};
    for (const auto& [id, a] : adapted.adapters.items) {
        ckpt.tensors["lora." + id + ".A"] = to_blob(a.A.val());
        ckpt.tensors["lora." + id + ".B"] = to_blob(a.B.val());
    }
    return ckpt;
}

// Reconstructs the adapted generator from a base checkpoint plus a concept
// delta. The delta records the base configuration; a mismatch is an error.
template <typename T>
AdaptedGenerator<T> apply_delta(const Checkpoint& base, const Checkpoint& delta) {
    if (base.kind != Checkpoint::Kind::base_full)
        throw IntegrityError("apply_delta: first argument must be a base_full checkpoint");
    if (delta.kind != Checkpoint::Kind::concept_delta)
        throw IntegrityError("apply_delta: second argument must be a concept_delta checkpoint");
    const auto base_cfg = base.metadata.at("generator_config");
    const auto delta_cfg = delta.metadata.at("base_config");
    if (base_cfg != delta_cfg)
        throw IntegrityError("apply_delta: delta was trained against a different base config: " +
                             delta_cfg.dump() + " vs " + base_cfg.dump());

    AdaptedGenerator<T> out;
    out.base = generator_from_checkpoint<T>(base);
    out.base.set_all_trainable(false);
    out.spec = RankSpec::from_json(delta.metadata.at("rank_spec"));

    const auto descriptors = describe_layers(out.base);
    std::map<std::string, LayerDescriptor> by_id;
    for (const auto& d : descriptors) by_id[d.layer_id] = d;

    for (const auto& [id, rank] : out.spec.ranks) {
        const std::string an = "lora." + id + ".A";
        const std::string bn = "lora." + id + ".B";
        if (!delta.tensors.count(an) || !delta.tensors.count(bn))
            throw IntegrityError("delta is missing tensors for layer '" + id + "'");
        LoRAAdapter<T> a;
        a.layer_id = id;
        a.A = Var<T>(from_blob<T>(delta.tensors.at(an), an), true);
        a.B = Var<T>(from_blob<T>(delta.tensors.at(bn), bn), true);
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw IntegrityError("delta layer '" + id + "' does not exist in the base generator");
        const auto& d = it->second;
        const bool is_conv = d.kind == LayerKind::conv || d.kind == LayerKind::transpose_conv;
        const std::vector<int64_t> want_a =
            is_conv ? std::vector<int64_t>{d.in_channels, rank, d.kh, d.kw}
                    : std::vector<int64_t>{rank, d.in_channels};
        const std::vector<int64_t> want_b =
            is_conv ? std::vector<int64_t>{rank, d.out_channels, 1, 1}
                    : std::vector<int64_t>{d.out_channels, rank};
        if (a.A.val().shape() != want_a || a.B.val().shape() != want_b)
            throw IntegrityError("delta factors for layer '" + id + "' have unexpected shapes " +
                                 a.A.val().shape_str() + " / " + a.B.val().shape_str());
        out.adapters.items[id] = std::move(a);
    }
    return out;
}

}  // namespace e2gan
