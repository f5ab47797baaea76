#include <catch2/catch_amalgamated.hpp>

#include "e2gan/metrics.hpp"
#include "test_support.hpp"

using namespace e2gan;

namespace {

GaussianSummary diag_gaussian(std::vector<double> mean, std::vector<double> var) {
    GaussianSummary g;
    g.mean = std::move(mean);
    const int64_t d = static_cast<int64_t>(g.mean.size());
    g.cov.assign(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < d; ++i) g.cov[static_cast<size_t>(i * d + i)] = var[static_cast<size_t>(i)];
    g.sample_count = 100;
    return g;
}

// Test-only embedder: the image pixels are the embedding.
struct RawPixelEmbedder final : Embedder {
    std::vector<double> embed(const Tensor<float>& img) override {
        std::vector<double> v(static_cast<size_t>(img.numel()));
        for (int64_t i = 0; i < img.numel(); ++i) v[static_cast<size_t>(i)] = img[i];
        return v;
    }
    std::string name() const override { return "raw"; }
};

}  // namespace

TEST_CASE("frechet distance closed forms") {
    SECTION("identical summaries give zero") {
        RandomEngine rng(3);
        // Random PSD covariance A A^T + I.
        const int d = 4;
        std::vector<double> a(d * d);
        for (auto& v : a) v = rng.normal();
        GaussianSummary g;
        g.mean = {1, -2, 3, 0.5};
        g.cov.assign(d * d, 0.0);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                double acc = i == j ? 1.0 : 0.0;
                for (int k = 0; k < d; ++k)
                    acc += a[static_cast<size_t>(i * d + k)] * a[static_cast<size_t>(j * d + k)];
                g.cov[static_cast<size_t>(i * d + j)] = acc;
            }
        g.sample_count = 64;
        CHECK(std::abs(frechet_distance(g, g)) <= 1e-8);
    }
    SECTION("1-D standard normal vs unit-variance shifted by 1 gives exactly 1") {
        const auto a = diag_gaussian({0.0}, {1.0});
        const auto b = diag_gaussian({1.0}, {1.0});
        CHECK_THAT(frechet_distance(a, b), Catch::Matchers::WithinAbs(1.0, 1e-8));
    }
    SECTION("equal covariance reduces to the squared mean shift") {
        RandomEngine rng(5);
        const int d = 6;
        std::vector<double> a(static_cast<size_t>(d * d));
        for (auto& v : a) v = rng.normal(0, 0.5);
        std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                double acc = i == j ? 0.5 : 0.0;
                for (int k = 0; k < d; ++k)
                    acc += a[static_cast<size_t>(i * d + k)] * a[static_cast<size_t>(j * d + k)];
                cov[static_cast<size_t>(i * d + j)] = acc;
            }
        GaussianSummary g1, g2;
        g1.cov = g2.cov = cov;
        g1.sample_count = g2.sample_count = 10;
        double want = 0;
        for (int i = 0; i < d; ++i) {
            g1.mean.push_back(0.3 * i);
            g2.mean.push_back(0.3 * i + (i % 2 ? 0.7 : -0.4));
            const double diff = g1.mean.back() - g2.mean.back();
            want += diff * diff;
        }
        CHECK_THAT(frechet_distance(g1, g2), Catch::Matchers::WithinAbs(want, 1e-6));
    }
    SECTION("symmetry and non-negativity") {
        const auto a = diag_gaussian({0.0, 1.0}, {1.0, 2.0});
        const auto b = diag_gaussian({0.5, -1.0}, {0.3, 1.5});
        const double ab = frechet_distance(a, b);
        const double ba = frechet_distance(b, a);
        CHECK(ab >= 0.0);
        CHECK_THAT(ab, Catch::Matchers::WithinAbs(ba, 1e-8));
    }
    SECTION("input validation") {
        const auto a = diag_gaussian({0.0}, {1.0});
        const auto b = diag_gaussian({0.0, 0.0}, {1.0, 1.0});
        REQUIRE_THROWS_AS(frechet_distance(a, b), ConfigError);
        GaussianSummary bad = diag_gaussian({0.0, 0.0}, {1.0, 1.0});
        bad.cov[1] = 0.5;  // asymmetric beyond 1e-8
        REQUIRE_THROWS_AS(frechet_distance(bad, b), ConfigError);
        GaussianSummary few = diag_gaussian({0.0}, {1.0});
        few.sample_count = 1;
        REQUIRE_THROWS_AS(frechet_distance(few, few), ConfigError);
    }
}

TEST_CASE("gaussian fitting uses the unbiased covariance") {
    const std::vector<std::vector<double>> rows = {{0.0, 1.0}, {2.0, 3.0}, {4.0, 5.0}};
    const auto g = fit_gaussian(rows);
    CHECK(g.sample_count == 3);
    CHECK_THAT(g.mean[0], Catch::Matchers::WithinAbs(2.0, 1e-12));
    CHECK_THAT(g.mean[1], Catch::Matchers::WithinAbs(3.0, 1e-12));
    // Var over {0,2,4} with n-1 divisor is 4.
    CHECK_THAT(g.cov[0], Catch::Matchers::WithinAbs(4.0, 1e-12));
    CHECK_THAT(g.cov[3], Catch::Matchers::WithinAbs(4.0, 1e-12));
    REQUIRE_THROWS_AS(fit_gaussian({{1.0}}), ConfigError);
}

TEST_CASE("fid score") {
    RawPixelEmbedder raw;
    RandomEngine rng(7);

    SECTION("a set against itself scores zero") {
        std::vector<Tensor<float>> set;
        for (int i = 0; i < 8; ++i) set.push_back(Tensor<float>::randn({3, 2, 2}, rng));
        CHECK(std::abs(fid_score(set, set, raw)) < 1e-6);
    }
    SECTION("sampled sets match the closed form of their generating Gaussians") {
        // d = 3 diagonal Gaussians; images are [3,1,1] so the raw embedder
        // returns the draws themselves. Closed form:
        // ||m1-m2||^2 + sum (s1-s2)^2 over the diagonal.
        const std::vector<double> m1 = {0, 0, 0}, s1 = {1.0, 1.0, 1.0};
        const std::vector<double> m2 = {2, 1, 0}, s2 = {0.5, 0.5, 0.5};
        double want = 0;
        for (int i = 0; i < 3; ++i) {
            want += (m1[static_cast<size_t>(i)] - m2[static_cast<size_t>(i)]) *
                    (m1[static_cast<size_t>(i)] - m2[static_cast<size_t>(i)]);
            want += (s1[static_cast<size_t>(i)] - s2[static_cast<size_t>(i)]) *
                    (s1[static_cast<size_t>(i)] - s2[static_cast<size_t>(i)]);
        }
        std::vector<Tensor<float>> a, b;
        for (int n = 0; n < 1000; ++n) {
            Tensor<float> ia({3, 1, 1}), ib({3, 1, 1});
            for (int i = 0; i < 3; ++i) {
                ia[i] = static_cast<float>(rng.normal(m1[static_cast<size_t>(i)],
                                                      s1[static_cast<size_t>(i)]));
                ib[i] = static_cast<float>(rng.normal(m2[static_cast<size_t>(i)],
                                                      s2[static_cast<size_t>(i)]));
            }
            a.push_back(ia);
            b.push_back(ib);
        }
        const double got = fid_score(a, b, raw);
        CHECK(std::abs(got - want) < 0.1 * want);
    }
    SECTION("permuting either list leaves the score unchanged") {
        std::vector<Tensor<float>> a, b;
        for (int i = 0; i < 12; ++i) {
            a.push_back(Tensor<float>::randn({3, 2, 2}, rng));
            b.push_back(Tensor<float>::randn({3, 2, 2}, rng));
        }
        const double base = fid_score(a, b, raw);
        std::vector<Tensor<float>> ap(a.rbegin(), a.rend());
        std::vector<Tensor<float>> bp(b.rbegin(), b.rend());
        CHECK_THAT(fid_score(ap, b, raw), Catch::Matchers::WithinAbs(base, 1e-9));
        CHECK_THAT(fid_score(a, bp, raw), Catch::Matchers::WithinAbs(base, 1e-9));
    }
    SECTION("fewer than two images is an error") {
        std::vector<Tensor<float>> one = {Tensor<float>::randn({3, 2, 2}, rng)};
        std::vector<Tensor<float>> two = {Tensor<float>::randn({3, 2, 2}, rng),
                                          Tensor<float>::randn({3, 2, 2}, rng)};
        REQUIRE_THROWS_AS(fid_score(one, two, raw), ConfigError);
        REQUIRE_THROWS_AS(fid_score(two, one, raw), ConfigError);
    }
}

TEST_CASE("parameter counting") {
    SECTION("single conv (3,64,7,7) with bias costs 9472") {
        LayerDescriptor d{"c", LayerKind::conv, 3, 64, 7, 7, 1, LayerGroup::SL};
        CHECK(d.param_count() == 9472);
    }
    SECTION("default generator total lands within 15% of the published 7.1M") {
        GeneratorConfig cfg;
        const auto gen = build_generator<float>(cfg, 0);
        const int64_t total = count_params_total(describe_layers(gen));
        CHECK(static_cast<double>(total) > 0.85 * 7.1e6);
        CHECK(static_cast<double>(total) < 1.15 * 7.1e6);
    }
    SECTION("TB group is smaller than RB group at the default size") {
        GeneratorConfig cfg;
        const auto gen = build_generator<float>(cfg, 0);
        const auto groups = count_params(describe_layers(gen));
        CHECK(groups.at(LayerGroup::TB) < groups.at(LayerGroup::RB));
    }
    SECTION("descriptor totals equal the model's own enumeration exactly") {
        GeneratorConfig cfg = e2gan::testing::micro_config();
        const auto gen = build_generator<float>(cfg, 0);
        CHECK(count_params_total(describe_layers(gen)) == gen.total_param_count());
        const auto disc = build_discriminator<float>(cfg, 0);
        CHECK(count_params_total(describe_layers(disc)) == disc.total_param_count());
        GeneratorConfig full;
        const auto gen_full = build_generator<float>(full, 0);
        CHECK(count_params_total(describe_layers(gen_full)) == gen_full.total_param_count());
    }
    SECTION("counting is additive over descriptor lists") {
        GeneratorConfig cfg = e2gan::testing::micro_config();
        const auto gen = build_generator<float>(cfg, 0);
        const auto ds = describe_layers(gen);
        const auto half = std::vector<LayerDescriptor>(ds.begin(), ds.begin() + 3);
        const auto rest = std::vector<LayerDescriptor>(ds.begin() + 3, ds.end());
        CHECK(count_params_total(half) + count_params_total(rest) == count_params_total(ds));
    }
}

TEST_CASE("flop counting") {
    SECTION("a 1x1 conv with one channel on a 1x1 output costs 2 FLOPs") {
        std::vector<LayerDescriptor> ds = {
            {"c", LayerKind::conv, 1, 1, 1, 1, 1, LayerGroup::other}};
        CHECK(count_flops(ds, 1) == 2);
    }
    SECTION("default generator at 256 lands within 20% of the published 23.6G") {
        GeneratorConfig cfg;
        const auto gen = build_generator<float>(cfg, 0);
        const double flops = static_cast<double>(count_flops(describe_layers(gen), 256));
        CHECK(flops > 0.8 * 23.6e9);
        CHECK(flops < 1.2 * 23.6e9);
    }
    SECTION("doubling the resolution roughly quadruples conv-dominated FLOPs") {
        GeneratorConfig cfg;
        const auto gen = build_generator<float>(cfg, 0);
        const auto ds = describe_layers(gen);
        const double ratio = static_cast<double>(count_flops(ds, 256)) /
                             static_cast<double>(count_flops(ds, 128));
        CHECK(ratio > 0.9 * 4.0);
        CHECK(ratio < 1.1 * 4.0);
    }
    SECTION("deterministic and pure") {
        GeneratorConfig cfg = e2gan::testing::micro_config();
        const auto gen = build_generator<float>(cfg, 0);
        const auto ds = describe_layers(gen);
        CHECK(count_flops(ds, 16) == count_flops(ds, 16));
    }
    SECTION("pool-sandwich configurations still track the halved token grid") {
        GeneratorConfig conv_cfg = e2gan::testing::micro_config(32);
        GeneratorConfig pool_cfg = e2gan::testing::micro_config(32);
        pool_cfg.tb_sandwich = TbSandwich::pool_unpool;
        const auto conv_gen = build_generator<float>(conv_cfg, 0);
        const auto pool_gen = build_generator<float>(pool_cfg, 0);
        // The pool variant drops the sandwich convs but keeps attention cost
        // at the same halved grid, so it must be strictly cheaper.
        CHECK(count_flops(describe_layers(pool_gen), 32) <
              count_flops(describe_layers(conv_gen), 32));
    }
}

TEST_CASE("training cost report") {
    GeneratorConfig cfg;  // full size
    TrainConfig tc;
    tc.epochs = 100;
    tc.batch_size = 4;

    const auto gen = build_generator<float>(cfg, 0);
    RankSpec spec;
    spec.thresholds = default_thresholds(gen);
    for (const auto& [id, tau] : spec.thresholds) spec.ranks[id] = std::min(tau, 8);

    SECTION("fine-tune accounting uses the lora parameter arithmetic") {
        TrainConfig ft = tc;
        ft.mode = TrainMode::finetune;
        const auto report = training_cost_report(ft, cfg, &spec, 400);
        std::vector<LayerDescriptor> crucial;
        for (const auto& d : describe_layers(gen))
            if (d.group == LayerGroup::SL || d.group == LayerGroup::TB) crucial.push_back(d);
        CHECK(report.trainable_params == lora_param_count(spec, crucial));
        CHECK(report.stored_bytes_per_concept >= 4 * report.trainable_params);
        CHECK(report.stored_bytes_per_concept < 4 * report.trainable_params + 10 * 1024);
    }
    SECTION("selecting 400 of 800 samples exactly halves the iteration count") {
        const auto full = training_cost_report(tc, cfg, nullptr, 800);
        const auto reduced = training_cost_report(tc, cfg, nullptr, 400);
        CHECK(full.iteration_count == 2 * reduced.iteration_count);
        CHECK(full.train_flops_total == 2 * reduced.train_flops_total);
    }
    SECTION("full fine-tune vs lora trainable ratio exceeds 50x") {
        TrainConfig ft = tc;
        ft.mode = TrainMode::finetune;
        const auto lora_report = training_cost_report(ft, cfg, &spec, 400);
        const auto full_report = training_cost_report(tc, cfg, nullptr, 400);
        CHECK(static_cast<double>(full_report.trainable_params) /
                  static_cast<double>(lora_report.trainable_params) >
              50.0);
    }
    SECTION("autoencoder mode drops the discriminator cost") {
        TrainConfig ae = tc;
        ae.mode = TrainMode::autoencoder;
        const auto with_d = training_cost_report(tc, cfg, nullptr, 100);
        const auto without_d = training_cost_report(ae, cfg, nullptr, 100);
        CHECK(without_d.train_flops_total < with_d.train_flops_total);
    }
    SECTION("report JSON round-trips its fields") {
        const auto report = training_cost_report(tc, cfg, nullptr, 128);
        const auto j = report.to_json();
        CHECK(j.at("total_params").get<int64_t>() == report.total_params);
        CHECK(j.at("train_flops_total").get<int64_t>() == report.train_flops_total);
        CHECK(j.at("iteration_count").get<int64_t>() == report.iteration_count);
    }
}
