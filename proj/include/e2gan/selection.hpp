#pragma once

#include <cstdio>
#include <set>
#include <memory>

#include "e2gan/dataio.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// Embedding sets and clustering
// ---------------------------------------------------------------------------

struct EmbeddingSet {
    std::vector<std::vector<double>> vectors;  // N x d
    std::vector<std::string> ids;

    int64_t n() const { return static_cast<int64_t>(vectors.size()); }
    int64_t dim() const { return vectors.empty() ? 0 : static_cast<int64_t>(vectors[0].size()); }

    void validate() const {
        if (vectors.empty()) throw ConfigError("embedding set is empty");
        if (vectors.size() != ids.size())
            throw ConfigError("embedding set: ids and vectors differ in length");
        const size_t d = vectors[0].size();
        std::set<std::string> seen;
        for (size_t i = 0; i < vectors.size(); ++i) {
            if (vectors[i].size() != d)
                throw ConfigError("embedding set: inconsistent dimension at item " +
                                  std::to_string(i));
            for (double v : vectors[i])
                if (!std::isfinite(v))
                    throw ConfigError("embedding set: non-finite value in '" + ids[i] + "'");
            if (!seen.insert(ids[i]).second)
                throw ConfigError("embedding set: duplicate id '" + ids[i] + "'");
        }
    }
};

struct ClusterModel {
    std::vector<std::vector<double>> centroids;  // K x d
    std::vector<int> assignments;                // length N
    double inertia = 0;
};

namespace detail_cluster {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

// k-means++ style seeding: first centroid uniform, the rest sampled with
// probability proportional to squared distance from the nearest chosen one.
// Falls back to the first unchosen index when all remaining weights vanish
// (duplicate points).
inline std::vector<size_t> seed_centroids(const EmbeddingSet& emb, int K, RandomEngine& rng) {
    const size_t n = static_cast<size_t>(emb.n());
    std::vector<size_t> chosen;
    std::vector<bool> used(n, false);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    size_t first = static_cast<size_t>(rng.uniform_index(n));
    chosen.push_back(first);
    used[first] = true;
    for (int k = 1; k < K; ++k) {
        double total = 0;
        for (size_t i = 0; i < n; ++i) {
            if (used[i]) {
                d2[i] = 0;
                continue;
            }
            d2[i] = std::min(d2[i], sq_dist(emb.vectors[i], emb.vectors[chosen.back()]));
            total += d2[i];
        }
        size_t pick = n;
        if (total > 0) {
            const double target = rng.uniform() * total;
            double acc = 0;
            for (size_t i = 0; i < n; ++i) {
                if (used[i]) continue;
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        }
        if (pick == n)
            for (size_t i = 0; i < n; ++i)
                if (!used[i]) {
                    pick = i;
                    break;
                }
        chosen.push_back(pick);
        used[pick] = true;
    }
    return chosen;
}

}  // namespace detail_cluster

// Lloyd iterations until the assignment fixpoint or max_iters. Empty
// clusters are re-seeded to the point farthest from its current centroid.
inline ClusterModel kmeans(const EmbeddingSet& emb, int K, uint64_t seed, int max_iters = 100) {
    emb.validate();
    const int64_t n = emb.n();
    if (K < 1 || K > n)
        throw ConfigError("kmeans: K=" + std::to_string(K) + " out of range for N=" +
                          std::to_string(n));
    if (max_iters < 1) throw ConfigError("kmeans: max_iters must be >= 1");
    RandomEngine rng(seed);
    ClusterModel model;
    for (size_t i : detail_cluster::seed_centroids(emb, K, rng))
        model.centroids.push_back(emb.vectors[i]);
    model.assignments.assign(static_cast<size_t>(n), 0);
    const size_t d = static_cast<size_t>(emb.dim());

    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = iter == 0;
        double inertia = 0;
        for (int64_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) {
                const double dist =
                    detail_cluster::sq_dist(emb.vectors[static_cast<size_t>(i)],
                                            model.centroids[static_cast<size_t>(k)]);
                if (dist < bd) {
                    bd = dist;
                    best = k;
                }
            }
            if (model.assignments[static_cast<size_t>(i)] != best) changed = true;
            model.assignments[static_cast<size_t>(i)] = best;
            inertia += bd;
        }
        model.inertia = inertia;
        if (!changed) break;

        std::vector<std::vector<double>> sums(static_cast<size_t>(K),
                                              std::vector<double>(d, 0.0));
        std::vector<int64_t> counts(static_cast<size_t>(K), 0);
        for (int64_t i = 0; i < n; ++i) {
            const int k = model.assignments[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(k)];
            for (size_t j = 0; j < d; ++j)
                sums[static_cast<size_t>(k)][j] += emb.vectors[static_cast<size_t>(i)][j];
        }
        for (int k = 0; k < K; ++k) {
            if (counts[static_cast<size_t>(k)] > 0) {
                for (size_t j = 0; j < d; ++j)
                    model.centroids[static_cast<size_t>(k)][j] =
                        sums[static_cast<size_t>(k)][j] /
                        static_cast<double>(counts[static_cast<size_t>(k)]);
            } else {
                // Farthest-point re-seeding.
                int64_t far = 0;
                double fd = -1;
                for (int64_t i = 0; i < n; ++i) {
                    const double dist = detail_cluster::sq_dist(
                        emb.vectors[static_cast<size_t>(i)],
                        model.centroids[static_cast<size_t>(
                            model.assignments[static_cast<size_t>(i)])]);
                    if (dist > fd) {
                        fd = dist;
                        far = i;
                    }
                }
                model.centroids[static_cast<size_t>(k)] = emb.vectors[static_cast<size_t>(far)];
            }
        }
    }
    return model;
}

// One representative per cluster: the member nearest its centroid, ties
// broken by lowest item index.
inline std::vector<std::string> select_coreset(const EmbeddingSet& emb, int K, uint64_t seed) {
    const ClusterModel model = kmeans(emb, K, seed);
    std::vector<int64_t> best_idx(static_cast<size_t>(K), -1);
    std::vector<double> best_d(static_cast<size_t>(K), std::numeric_limits<double>::infinity());
    for (int64_t i = 0; i < emb.n(); ++i) {
        const int k = model.assignments[static_cast<size_t>(i)];
        const double dist = detail_cluster::sq_dist(emb.vectors[static_cast<size_t>(i)],
                                                    model.centroids[static_cast<size_t>(k)]);
        if (dist < best_d[static_cast<size_t>(k)]) {
            best_d[static_cast<size_t>(k)] = dist;
            best_idx[static_cast<size_t>(k)] = i;
        }
    }
    std::vector<std::string> out;
    for (int k = 0; k < K; ++k) {
        if (best_idx[static_cast<size_t>(k)] < 0)
            throw ConfigError("coreset selection produced an empty cluster");
        out.push_back(emb.ids[static_cast<size_t>(best_idx[static_cast<size_t>(k)])]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

class Embedder {
public:
    virtual ~Embedder() = default;
    // img is a [3,H,W] float image in [-1,1].
    virtual std::vector<double> embed(const Tensor<float>& img) = 0;
    virtual std::string name() const = 0;
};

// Fixed-length pixel-statistics embedding: 3 channel means plus per-channel
// means over a 4x4 grid (d = 3 + 3*16 = 51).
class ToyPixelEmbedder final : public Embedder {
public:
    static constexpr int kDim = 51;

    std::vector<double> embed(const Tensor<float>& img) override {
        if (img.rank() != 3 || img.dim(0) != 3)
            throw ShapeError("toy embedder expects [3,H,W], got " + img.shape_str());
        const int64_t H = img.dim(1), W = img.dim(2);
        std::vector<double> v;
        v.reserve(kDim);
        for (int64_t c = 0; c < 3; ++c) {
            double acc = 0;
            for (int64_t i = 0; i < H * W; ++i) acc += img[c * H * W + i];
            v.push_back(acc / static_cast<double>(H * W));
        }
        for (int64_t gy = 0; gy < 4; ++gy)
            for (int64_t gx = 0; gx < 4; ++gx) {
                const int64_t y0 = gy * H / 4, y1 = (gy + 1) * H / 4;
                const int64_t x0 = gx * W / 4, x1 = (gx + 1) * W / 4;
                for (int64_t c = 0; c < 3; ++c) {
                    double acc = 0;
                    int64_t cnt = 0;
                    for (int64_t y = y0; y < y1; ++y)
                        for (int64_t x = x0; x < x1; ++x) {
                            acc += img.at3(c, y, x);
                            ++cnt;
                        }
                    v.push_back(cnt > 0 ? acc / static_cast<double>(cnt) : 0.0);
                }
            }
        return v;
    }

    std::string name() const override { return "toy_pixels"; }
};

// Delegates to an external command: the image is written as a temporary PNG,
// the command is run with the path appended, and its stdout is parsed as
// whitespace-separated floats. Results are cached on disk keyed by image
// content hash + command. Failures are reported, never silently bypassed.
class ExternalEmbedder final : public Embedder {
public:
    ExternalEmbedder(std::string command, std::string cache_dir)
        : command_(std::move(command)), cache_dir_(std::move(cache_dir)) {
        if (command_.empty()) throw ConfigError("external embedder needs a command");
    }

    std::vector<double> embed(const Tensor<float>& img) override {
        namespace fs = std::filesystem;
        const uint64_t content =
            fnv1a64(img.data(), static_cast<size_t>(img.numel()) * sizeof(float),
                    fnv1a64(command_));
        char key[32];
        std::snprintf(key, sizeof(key), "%016llx", static_cast<unsigned long long>(content));
        fs::path cache_file;
        if (!cache_dir_.empty()) {
            fs::create_directories(cache_dir_);
            cache_file = fs::path(cache_dir_) / (std::string(key) + ".vec");
            if (fs::exists(cache_file)) return read_vec(cache_file.string());
        }

        const fs::path tmp_png =
            fs::temp_directory_path() / ("e2gan_embed_" + std::string(key) + ".png");
        write_png_rgb8(tmp_png.string(), tensor_to_image(img));
        const std::string cmd = command_ + " " + tmp_png.string();
        std::string output;
        FILE* pipe = popen(cmd.c_str(), "r");
        if (!pipe) {
            fs::remove(tmp_png);
            throw EmbedderError("cannot launch embedding command '" + command_ + "'");
        }
        char buf[4096];
        size_t got;
        while ((got = fread(buf, 1, sizeof(buf), pipe)) > 0) output.append(buf, got);
        const int status = pclose(pipe);
        fs::remove(tmp_png);
        if (status != 0)
            throw EmbedderError("embedding command '" + command_ + "' exited with status " +
                                std::to_string(status));
        std::vector<double> v = parse_floats(output);
        if (v.empty())
            throw EmbedderError("embedding command '" + command_ + "' produced no values");
        if (!cache_file.empty()) {
            std::string text;
            for (double x : v) {
                char num[64];
                std::snprintf(num, sizeof(num), "%.17g\n", x);
                text += num;
            }
            write_text_file_atomic(cache_file.string(), text);
        }
        return v;
    }

    std::string name() const override { return "external"; }

private:
    static std::vector<double> read_vec(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read embedding cache '" + path + "'");
        std::vector<double> v;
        double x;
        while (in >> x) v.push_back(x);
        if (v.empty()) throw IoError("empty embedding cache file '" + path + "'");
        return v;
    }

    static std::vector<double> parse_floats(const std::string& s) {
        std::istringstream in(s);
        std::vector<double> v;
        double x;
        while (in >> x) v.push_back(x);
        return v;
    }

    std::string command_;
    std::string cache_dir_;
};

enum class EmbedderKind { toy_pixels, external };

inline EmbedderKind embedder_kind_from_string(const std::string& s) {
    if (s == "toy_pixels") return EmbedderKind::toy_pixels;
    if (s == "external") return EmbedderKind::external;
    throw ConfigError("unknown embedder kind '" + s + "'");
}

inline std::shared_ptr<Embedder> builtin_embedder(EmbedderKind kind,
                                                  const std::string& command = "",
                                                  const std::string& cache_dir = "") {
    switch (kind) {
        case EmbedderKind::toy_pixels: return std::make_shared<ToyPixelEmbedder>();
        case EmbedderKind::external:
            return std::make_shared<ExternalEmbedder>(command, cache_dir);
    }
    throw ConfigError("unknown embedder kind");
}

// ---------------------------------------------------------------------------
// Concept-level selection
// ---------------------------------------------------------------------------

// Arithmetic mean of per-image embeddings.
inline std::vector<double> concept_embedding(const std::vector<Tensor<float>>& images,
                                             Embedder& extractor) {
    if (images.empty()) throw ConfigError("concept_embedding: no images");
    std::vector<double> mean;
    for (size_t i = 0; i < images.size(); ++i) {
        std::vector<double> v;
        try {
            v = extractor.embed(images[i]);
        } catch (const std::exception& e) {
            throw EmbedderError("embedding failed for image " + std::to_string(i) + ": " +
                                e.what());
        }
        if (mean.empty()) mean.assign(v.size(), 0.0);
        if (v.size() != mean.size())
            throw EmbedderError("embedding dimension changed across images");
        for (size_t j = 0; j < v.size(); ++j) mean[j] += v[j];
    }
    for (auto& x : mean) x /= static_cast<double>(images.size());
    return mean;
}

// Representative concepts for base-model construction: cluster the concept
// embeddings, pick each cluster's nearest-to-centroid concept.
inline std::vector<std::string> select_base_concepts(const std::vector<ConceptRecord*>& concepts,
                                                     int K, Embedder& extractor, uint64_t seed) {
    if (concepts.empty()) throw ConfigError("select_base_concepts: no concepts");
    if (K > static_cast<int>(concepts.size()))
        throw ConfigError("select_base_concepts: K exceeds concept count");
    EmbeddingSet emb;
    for (const ConceptRecord* rec : concepts) {
        emb.vectors.push_back(concept_embedding(rec->sources, extractor));
        emb.ids.push_back(rec->name);
    }
    return select_coreset(emb, K, seed);
}

// Embeds a concept's train-split images for coreset data reduction,
// optionally L2-normalizing each vector first.
inline EmbeddingSet embed_train_split(ConceptRecord& rec, Embedder& extractor,
                                      bool l2_normalize = false) {
    EmbeddingSet emb;
    for (int idx : rec.splits.train) {
        std::vector<double> v = extractor.embed(rec.sources[static_cast<size_t>(idx)]);
        if (l2_normalize) {
            double n2 = 0;
            for (double x : v) n2 += x * x;
            if (n2 > 0)
                for (double& x : v) x /= std::sqrt(n2);
        }
        emb.vectors.push_back(std::move(v));
        emb.ids.push_back(rec.pair_ids[static_cast<size_t>(idx)]);
    }
    return emb;
}

}  // namespace e2gan
