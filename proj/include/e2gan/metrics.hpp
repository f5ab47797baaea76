#pragma once

#include <Eigen/Dense>

#include "e2gan/selection.hpp"
#include "e2gan/trainer.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian summaries
// ---------------------------------------------------------------------------

struct GaussianSummary {
    std::vector<double> mean;  // [d]
    std::vector<double> cov;   // [d*d] row-major, symmetric PSD
    int64_t sample_count = 0;

    int64_t dim() const { return static_cast<int64_t>(mean.size()); }

    void validate() const {
        const int64_t d = dim();
        if (static_cast<int64_t>(cov.size()) != d * d)
            throw ConfigError("gaussian summary: covariance size does not match dimension");
        if (sample_count < 2) throw ConfigError("gaussian summary needs sample_count >= 2");
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = i + 1; j < d; ++j)
                if (std::abs(cov[static_cast<size_t>(i * d + j)] -
                             cov[static_cast<size_t>(j * d + i)]) > 1e-8)
                    throw ConfigError("gaussian summary: covariance asymmetric beyond 1e-8 at (" +
                                      std::to_string(i) + "," + std::to_string(j) + ")");
    }
};

// Unbiased mean/covariance fit; rows are the embedding vectors.
inline GaussianSummary fit_gaussian(const std::vector<std::vector<double>>& rows) {
    if (rows.size() < 2) throw ConfigError("fit_gaussian needs at least 2 samples");
    const int64_t n = static_cast<int64_t>(rows.size());
    const int64_t d = static_cast<int64_t>(rows[0].size());
    GaussianSummary g;
    g.sample_count = n;
    g.mean.assign(static_cast<size_t>(d), 0.0);
    for (const auto& r : rows) {
        if (static_cast<int64_t>(r.size()) != d)
            throw ConfigError("fit_gaussian: inconsistent dimensions");
        for (int64_t j = 0; j < d; ++j) g.mean[static_cast<size_t>(j)] += r[static_cast<size_t>(j)];
    }
    for (auto& m : g.mean) m /= static_cast<double>(n);
    g.cov.assign(static_cast<size_t>(d * d), 0.0);
    for (const auto& r : rows)
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < d; ++j)
                g.cov[static_cast<size_t>(i * d + j)] +=
                    (r[static_cast<size_t>(i)] - g.mean[static_cast<size_t>(i)]) *
                    (r[static_cast<size_t>(j)] - g.mean[static_cast<size_t>(j)]);
    for (auto& c : g.cov) c /= static_cast<double>(n - 1);
    return g;
}

// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}); the matrix square root is
// taken on the symmetrized product S1^{1/2} S2 S1^{1/2} via eigendecomposition
// with eigenvalues below 1e-10 clamped to zero.
inline double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
    a.validate();
    b.validate();
    const int64_t d = a.dim();
    if (d != b.dim())
        throw ConfigError("frechet_distance: dimension mismatch " + std::to_string(d) + " vs " +
                          std::to_string(b.dim()));
    using Mat = Eigen::MatrixXd;
    Mat s1 = Eigen::Map<const Mat>(a.cov.data(), d, d);
    Mat s2 = Eigen::Map<const Mat>(b.cov.data(), d, d);
    s1 = ((s1 + s1.transpose()) / 2).eval();
    s2 = ((s2 + s2.transpose()) / 2).eval();

    Eigen::SelfAdjointEigenSolver<Mat> es1(s1);
    Eigen::VectorXd l1 = es1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Mat root1 = es1.eigenvectors() * l1.asDiagonal() * es1.eigenvectors().transpose();
    Mat prod = root1 * s2 * root1;
    prod = ((prod + prod.transpose()) / 2).eval();
    Eigen::SelfAdjointEigenSolver<Mat> es2(prod);
    double tr_sqrt = 0;
    for (int64_t i = 0; i < d; ++i) {
        double lam = es2.eigenvalues()[i];
        if (lam < 1e-10) lam = 0;
        tr_sqrt += std::sqrt(lam);
    }
    double mean_sq = 0;
    for (int64_t i = 0; i < d; ++i) {
        const double dm = a.mean[static_cast<size_t>(i)] - b.mean[static_cast<size_t>(i)];
        mean_sq += dm * dm;
    }
    const double result = mean_sq + s1.trace() + s2.trace() - 2 * tr_sqrt;
    if (!std::isfinite(result))
        throw ConfigError("frechet_distance: non-finite result (mean_sq=" +
                          std::to_string(mean_sq) + ", tr1=" + std::to_string(s1.trace()) +
                          ", tr2=" + std::to_string(s2.trace()) + ", tr_sqrt=" +
                          std::to_string(tr_sqrt) + "); covariances may be ill-conditioned");
    return result;
}

// Desk-scale Frechet score with a pluggable embedder. Values depend entirely
// on the embedder; they are not comparable to published large-scale numbers.
inline double fid_score(const std::vector<Tensor<float>>& generated,
                        const std::vector<Tensor<float>>& reference, Embedder& extractor) {
    if (generated.size() < 2 || reference.size() < 2)
        throw ConfigError("fid_score needs at least 2 images on each side");
    std::vector<std::vector<double>> ge, re;
    for (const auto& img : generated) ge.push_back(extractor.embed(img));
    for (const auto& img : reference) re.push_back(extractor.embed(img));
    return frechet_distance(fit_gaussian(ge), fit_gaussian(re));
}

// ---------------------------------------------------------------------------
// Parameter and FLOP accounting over layer descriptors
// ---------------------------------------------------------------------------

inline std::map<LayerGroup, int64_t> count_params(const std::vector<LayerDescriptor>& layers) {
    std::map<LayerGroup, int64_t> out{{LayerGroup::SL, 0},
                                      {LayerGroup::RB, 0},
                                      {LayerGroup::TB, 0},
                                      {LayerGroup::other, 0}};
    for (const auto& d : layers) out[d.group] += d.param_count();
    return out;
}

inline int64_t count_params_total(const std::vector<LayerDescriptor>& layers) {
    int64_t n = 0;
    for (const auto& d : layers) n += d.param_count();
    return n;
}

// FLOPs for one forward pass at the given input resolution, with the
// convention 1 multiply-add = 2 FLOPs. Convolutions cost
// 2*H_out*W_out*in*out*kh*kw; transpose convolutions are charged at their
// input spatial size (the equivalent-convolution cost). Token-wise linears
// inside a transformer block are charged per token, attention adds
// 2*(2*n^2*d) for the score and value matmuls, and normalizations are not
// counted. Spatial size is propagated through strides; a pool/unpool
// sandwich (which has no conv descriptors) halves the token grid implicitly.
inline int64_t count_flops(const std::vector<LayerDescriptor>& layers, int64_t resolution) {
    if (resolution < 1) throw ConfigError("count_flops: resolution must be >= 1");
    std::set<std::string> ids;
    for (const auto& d : layers) ids.insert(d.layer_id);
    auto tb_block_of = [](const std::string& id) -> std::string {
        if (id.rfind("tb.", 0) != 0) return "";
        const auto second_dot = id.find('.', 3);
        return second_dot == std::string::npos ? "" : id.substr(0, second_dot);
    };

    int64_t size = resolution;
    int64_t flops = 0;
    for (const auto& d : layers) {
        switch (d.kind) {
            case LayerKind::conv: {
                const int64_t out_size = size / d.stride;
                flops += 2 * out_size * out_size * d.in_channels * d.out_channels * d.kh * d.kw;
                size = out_size;
                break;
            }
            case LayerKind::transpose_conv: {
                flops += 2 * size * size * d.in_channels * d.out_channels * d.kh * d.kw;
                size = size * d.stride;
                break;
            }
            case LayerKind::attention_proj:
            case LayerKind::linear: {
                const std::string block = tb_block_of(d.layer_id);
                if (!block.empty()) {
                    // Token grid inside this transformer block.
                    const bool conv_sandwich = ids.count(block + ".halve") > 0;
                    const int64_t side = conv_sandwich ? size : size / 2;
                    const int64_t tokens = side * side;
                    flops += 2 * tokens * d.in_channels * d.out_channels;
                    if (d.kind == LayerKind::attention_proj &&
                        d.layer_id.size() >= 2 &&
                        d.layer_id.compare(d.layer_id.size() - 2, 2, ".q") == 0)
                        flops += 4 * tokens * tokens * d.out_channels;
                } else {
                    flops += 2 * d.in_channels * d.out_channels;
                }
                break;
            }
            case LayerKind::norm: break;
        }
    }
    return flops;
}

// ---------------------------------------------------------------------------
// Training cost estimation
// ---------------------------------------------------------------------------

struct CostReport {
    int64_t total_params = 0;
    int64_t trainable_params = 0;
    int64_t flops_per_image = 0;
    int64_t stored_bytes_per_concept = 0;
    int64_t train_flops_total = 0;
    int64_t iteration_count = 0;

    void validate() const {
        if (trainable_params > total_params)
            throw ConfigError("cost report: trainable_params exceeds total_params");
        if (total_params < 0 || trainable_params < 0 || flops_per_image < 0 ||
            stored_bytes_per_concept < 0 || train_flops_total < 0 || iteration_count < 0)
            throw ConfigError("cost report: negative field");
    }

    nlohmann::json to_json() const {
        return {{"total_params", total_params},
                {"trainable_params", trainable_params},
                {"flops_per_image", flops_per_image},
                {"stored_bytes_per_concept", stored_bytes_per_concept},
                {"train_flops_total", train_flops_total},
                {"iteration_count", iteration_count}};
    }
};

// Estimates end-to-end training cost. Per-sample step cost is modeled as
// 3 x (generator FLOPs + 2 x discriminator FLOPs): one forward plus a 2x
// backward heuristic, with the discriminator evaluated on both the real and
// the generated pair. This is a documented estimate, not a measurement.
inline CostReport training_cost_report(const TrainConfig& train_cfg,
                                       const GeneratorConfig& gen_cfg, const RankSpec* spec,
                                       int64_t dataset_size) {
    gen_cfg.validate();
    train_cfg.validate();
    if (dataset_size < 1) throw ConfigError("training_cost_report: dataset_size must be >= 1");
    const Generator<float> gen = build_generator<float>(gen_cfg, 0);
    const Discriminator<float> disc = build_discriminator<float>(gen_cfg, 0);
    const auto gd = describe_layers(gen);
    const auto dd = describe_layers(disc);

    CostReport r;
    r.total_params = count_params_total(gd);
    const int64_t g_flops = count_flops(gd, gen_cfg.image_resolution);
    const int64_t d_flops = count_flops(dd, gen_cfg.image_resolution);
    r.flops_per_image = g_flops;
    r.iteration_count =
        static_cast<int64_t>(train_cfg.epochs) *
        ((dataset_size + train_cfg.batch_size - 1) / train_cfg.batch_size);

    if (train_cfg.mode == TrainMode::finetune) {
        if (!spec) throw ConfigError("finetune cost report requires a rank spec");
        std::vector<LayerDescriptor> crucial;
        for (const auto& d : gd)
            if (d.group == LayerGroup::SL || d.group == LayerGroup::TB) crucial.push_back(d);
        r.trainable_params = lora_param_count(*spec, crucial);
        // 4 bytes per factor value plus a bounded metadata estimate.
        r.stored_bytes_per_concept =
            4 * r.trainable_params + 96 * static_cast<int64_t>(spec->ranks.size()) + 1024;
    } else {
        r.trainable_params = r.total_params;
        r.stored_bytes_per_concept = 4 * r.total_params + 1024;
    }

    const int64_t per_sample = train_cfg.mode == TrainMode::autoencoder
                                   ? 3 * g_flops
                                   : 3 * (g_flops + 2 * d_flops);
    r.train_flops_total = r.iteration_count * train_cfg.batch_size * per_sample;
    r.validate();
    return r;
}

}  // namespace e2gan
