#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "e2gan/trainer.hpp"
#include "test_support.hpp"

using namespace e2gan;
using e2gan::testing::bit_identical;
using e2gan::testing::max_abs_diff;
using e2gan::testing::micro_config;

namespace {

RankSpec uniform_spec(const Generator<float>& gen, int rank_cap) {
    RankSpec spec;
    spec.thresholds = default_thresholds(gen);
    for (const auto& [id, tau] : spec.thresholds)
        spec.ranks[id] = std::min(tau, rank_cap);
    return spec;
}

template <typename T>
RankSpec uniform_spec_t(const Generator<T>& gen, int rank_cap) {
    RankSpec spec;
    spec.thresholds = default_thresholds(gen);
    for (const auto& [id, tau] : spec.thresholds) spec.ranks[id] = std::min(tau, rank_cap);
    return spec;
}

}  // namespace

TEST_CASE("crucial layers are the sampling and transformer projections") {
    GeneratorConfig cfg;  // full-size defaults
    const auto gen = build_generator<float>(cfg, 1);
    const auto ids = crucial_layers(gen);
    REQUIRE(ids.size() == 13);  // 8 sampling convs + q,k,v + 2 feed-forward
    int sl = 0, tb = 0;
    std::map<std::string, LayerGroup> group_of;
    for (const auto& d : describe_layers(gen)) group_of[d.layer_id] = d.group;
    for (const auto& id : ids) {
        REQUIRE(group_of.count(id));
        if (group_of[id] == LayerGroup::SL) ++sl;
        if (group_of[id] == LayerGroup::TB) ++tb;
    }
    CHECK(sl == 8);
    CHECK(tb == 5);
    CHECK(crucial_layers(gen) == ids);  // repeated calls identical

    GeneratorConfig no_tb = micro_config();
    no_tb.num_transformer_blocks = 0;
    const auto gen2 = build_generator<float>(no_tb, 1);
    const auto ids2 = crucial_layers(gen2);
    REQUIRE(ids2.size() == 8);
    for (const auto& id : ids2) CHECK(group_of.count(id));  // same SL naming scheme
}

TEST_CASE("injection is exact identity at initialization") {
    GeneratorConfig cfg = micro_config();
    const auto gen = build_generator<float>(cfg, 3);
    const RankSpec spec = uniform_spec(gen, 4);
    const auto adapted = inject_lora(gen, spec, 99);

    RandomEngine rng(55);
    NoGradGuard ng;
    for (int trial = 0; trial < 4; ++trial) {
        const auto x = Tensor<float>::randn({1, 3, 16, 16}, rng, 0.f, 0.5f);
        const auto z = Tensor<float>::randn({1, cfg.noise_dim}, rng);
        const auto c = Tensor<float>::randn({1, cfg.text_embed_dim}, rng);
        CHECK(max_abs_diff(gen.forward(x, z, c).val(), adapted.forward(x, z, c).val()) == 0.0);
    }
}

TEST_CASE("injection validates the rank spec key set") {
    GeneratorConfig cfg = micro_config();
    const auto gen = build_generator<float>(cfg, 3);
    RankSpec spec = uniform_spec(gen, 2);
    spec.ranks.erase("down.1");
    spec.thresholds.erase("down.1");
    REQUIRE_THROWS_MATCHES(
        inject_lora(gen, spec, 0), InjectionError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("down.1") &&
                                        Catch::Matchers::ContainsSubstring("missing")));

    RankSpec extra = uniform_spec(gen, 2);
    extra.ranks["rb.0.conv0"] = 1;
    extra.thresholds["rb.0.conv0"] = 4;
    REQUIRE_THROWS_MATCHES(
        inject_lora(gen, extra, 0), InjectionError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("rb.0.conv0") &&
                                        Catch::Matchers::ContainsSubstring("extra")));
}

TEST_CASE("trainable parameters of an adapted model are the factors only") {
    GeneratorConfig cfg = micro_config();
    const auto gen = build_generator<float>(cfg, 3);
    auto adapted = inject_lora(gen, uniform_spec(gen, 2), 7);
    auto params = adapted.trainable_params();
    REQUIRE(params.size() == 2 * adapted.adapters.items.size());
    for (auto* p : params) CHECK(p->requires_grad());
    adapted.base.visit_params(
        [&](const std::string&, const Var<float>& v) { CHECK_FALSE(v.requires_grad()); });
    int64_t manual = 0;
    for (const auto& [id, a] : adapted.adapters.items)
        manual += a.A.val().numel() + a.B.val().numel();
    CHECK(adapted.trainable_param_count() == manual);
}

TEST_CASE("training an adapted model never touches frozen base tensors") {
    GeneratorConfig cfg = micro_config();
    const auto gen = build_generator<float>(cfg, 3);
    auto adapted = inject_lora(gen, uniform_spec(gen, 2), 7);
    std::map<std::string, uint64_t> before;
    adapted.base.visit_params([&](const std::string& n, const Var<float>& v) {
        before[n] = tensor_checksum(v.val());
    });

    Adam<float> opt(adapted.trainable_params(), 1e-2);
    RandomEngine rng(9);
    for (int step = 0; step < 3; ++step) {
        const auto x = Tensor<float>::randn({1, 3, 16, 16}, rng, 0.f, 0.5f);
        const auto z = Tensor<float>::randn({1, cfg.noise_dim}, rng);
        const auto c = Tensor<float>::randn({1, cfg.text_embed_dim}, rng);
        Var<float> loss = ops::mean_all(ops::abs_op(adapted.forward(x, z, c)));
        opt.zero_grad();
        backward(loss);
        REQUIRE(opt.step() > 0);
    }
    adapted.base.visit_params([&](const std::string& n, const Var<float>& v) {
        CHECK(before.at(n) == tensor_checksum(v.val()));
    });
}

TEST_CASE("merged dense model matches the adapted model") {
    GeneratorConfig cfg = micro_config();
    const auto gen = build_generator<float>(cfg, 3);
    auto adapted = inject_lora(gen, uniform_spec(gen, 4), 7);
    // Randomize both factors so the delta is nonzero.
    RandomEngine arng(101);
    for (auto& [id, a] : adapted.adapters.items) {
        for (auto& v : a.A.mutable_val().vec()) v = static_cast<float>(arng.normal(0, 0.05));
        for (auto& v : a.B.mutable_val().vec()) v = static_cast<float>(arng.normal(0, 0.05));
    }
    const auto merged = merge_lora(adapted);
    RandomEngine rng(11);
    NoGradGuard ng;
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto x = Tensor<float>::randn({2, 3, 16, 16}, rng, 0.f, 0.5f);
        const auto z = Tensor<float>::randn({2, cfg.noise_dim}, rng);
        const auto c = Tensor<float>::randn({2, cfg.text_embed_dim}, rng);
        worst = std::max(worst, max_abs_diff(merged.forward(x, z, c).val(),
                                             adapted.forward(x, z, c).val()));
    }
    CHECK(worst <= 1e-5);

    SECTION("zero factors merge to bit-identical weights") {
        auto zero_adapted = inject_lora(gen, uniform_spec(gen, 4), 7);
        for (auto& [id, a] : zero_adapted.adapters.items)
            for (auto& v : a.B.mutable_val().vec()) v = 0.f;  // B is already zero
        const auto merged0 = merge_lora(zero_adapted);
        const auto sa = gen.state();
        const auto sb = merged0.state();
        for (const auto& [name, t] : sa) CHECK(bit_identical(t, sb.at(name)));
    }
}

TEST_CASE("full-rank factors reconstruct an arbitrary dense delta") {
    // rank r = min(in*kh*kw, out) can represent any delta: fit the factor
    // pair to a random target by least squares and merge; the reconstruction
    // oracle is exact linear algebra.
    GeneratorConfig cfg = micro_config();
    auto gen = build_generator<double>(cfg, 5);
    const auto descriptors = describe_layers(gen);
    RandomEngine rng(303);

    for (const std::string target_id : {std::string("down.1"), std::string("tb.0.ff2"),
                                        std::string("up.1")}) {
        const LayerDescriptor* d = nullptr;
        for (const auto& x : descriptors)
            if (x.layer_id == target_id) d = &x;
        REQUIRE(d != nullptr);
        const bool is_conv =
            d->kind == LayerKind::conv || d->kind == LayerKind::transpose_conv;
        const int64_t p = is_conv ? d->in_channels * d->kh * d->kw : d->in_channels;
        const int64_t q = d->out_channels;
        const int64_t r = std::min(p, q);

        // Random target delta, flattened to [p, q].
        Eigen::MatrixXd M(p, q);
        for (int64_t i = 0; i < p; ++i)
            for (int64_t j = 0; j < q; ++j) M(i, j) = rng.normal(0, 0.05);

        // Least-squares fit with one factor held full-rank.
        Eigen::MatrixXd A, B;
        if (r == q) {
            B = Eigen::MatrixXd::Zero(r, q);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < q; ++j) B(i, j) = rng.normal(0, 1.0);
            A = M * B.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(q, q));
        } else {
            A = Eigen::MatrixXd::Zero(p, r);
            for (int64_t i = 0; i < p; ++i)
                for (int64_t j = 0; j < r; ++j) A(i, j) = rng.normal(0, 1.0);
            B = A.colPivHouseholderQr().solve(M);
        }
        REQUIRE((A * B - M).cwiseAbs().maxCoeff() < 1e-9);

        RankSpec spec = uniform_spec_t(gen, 1);
        spec.ranks[target_id] = static_cast<int>(r);
        spec.thresholds[target_id] = static_cast<int>(r);
        auto adapted = inject_lora(gen, spec, 1);
        auto& ad = adapted.adapters.items.at(target_id);
        if (is_conv) {
            // A factor layout [in, r, kh, kw] flattened from rows (a,u,v).
            for (int64_t a = 0; a < d->in_channels; ++a)
                for (int64_t j = 0; j < r; ++j)
                    for (int64_t u = 0; u < d->kh; ++u)
                        for (int64_t v = 0; v < d->kw; ++v)
                            ad.A.mutable_val().at4(a, j, u, v) =
                                A((a * d->kh + u) * d->kw + v, j);
            for (int64_t j = 0; j < r; ++j)
                for (int64_t o = 0; o < q; ++o) ad.B.mutable_val().at4(j, o, 0, 0) = B(j, o);
        } else {
            for (int64_t j = 0; j < r; ++j)
                for (int64_t i = 0; i < p; ++i) ad.A.mutable_val().at2(j, i) = A(i, j);
            for (int64_t o = 0; o < q; ++o)
                for (int64_t j = 0; j < r; ++j) ad.B.mutable_val().at2(o, j) = B(j, o);
        }
        // Zero every other adapter's delta so only the target layer differs.
        for (auto& [id, a] : adapted.adapters.items)
            if (id != target_id)
                for (auto& v : a.B.mutable_val().vec()) v = 0.0;

        auto merged = merge_lora(adapted);
        auto info = merged.find_weight_layer(target_id);
        REQUIRE(info.has_value());
        auto base_info = gen.find_weight_layer(target_id);
        double worst = 0;
        const auto& wm = info->weight->val();
        const auto& wb = base_info->weight->val();
        if (is_conv) {
            for (int64_t a = 0; a < d->in_channels; ++a)
                for (int64_t o = 0; o < q; ++o)
                    for (int64_t u = 0; u < d->kh; ++u)
                        for (int64_t v = 0; v < d->kw; ++v)
                            worst = std::max(worst,
                                             std::abs(wm.at4(a, o, u, v) - wb.at4(a, o, u, v) -
                                                      M((a * d->kh + u) * d->kw + v, o)));
        } else {
            for (int64_t o = 0; o < q; ++o)
                for (int64_t i = 0; i < p; ++i)
                    worst = std::max(worst, std::abs(wm.at2(o, i) - wb.at2(o, i) - M(i, o)));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("lora parameter arithmetic") {
    SECTION("single conv [3,64,7,7] at rank 1 costs 3*49 + 64 = 211") {
        LayerDescriptor d{"c", LayerKind::conv, 3, 64, 7, 7, 1, LayerGroup::SL};
        CHECK(lora_layer_param_count(d, 1) == 211);
    }
    SECTION("single linear [256,256] at rank 1 costs 256 + 256 = 512") {
        LayerDescriptor d{"l", LayerKind::linear, 256, 256, 0, 0, 1, LayerGroup::TB};
        CHECK(lora_layer_param_count(d, 1) == 512);
    }
    SECTION("searched ranks over the default crucial layers match the hand-summed budget") {
        // Hand summation, frozen before the implementation existed:
        //   down: [3,64,7,7]r1=211  [64,128,3,3]r4=2816
        //         [128,256,3,3]r8=11264  [256,256,3,3]r8=20480
        //   up:   [256,256]r8=20480  [256,128]r8=19456
        //         [128,64]r4=4864   [64,3,7,7]r1=3139
        //   tb:   q,k,v r1 = 3*512  ff1 r1 = 2304  ff2 r1 = 1280
        //   total = 87830
        // The published storage figure for this scheme is 0.092M; the gap is
        // documented in the README (the exact extra layers are unstated).
        GeneratorConfig cfg;
        const auto gen = build_generator<float>(cfg, 1);
        RankSpec spec;
        spec.thresholds = default_thresholds(gen);
        for (const auto& [id, tau] : spec.thresholds) spec.ranks[id] = std::min(tau, 8);
        std::vector<LayerDescriptor> crucial;
        for (const auto& d : describe_layers(gen))
            if (d.group == LayerGroup::SL || d.group == LayerGroup::TB) crucial.push_back(d);
        REQUIRE(crucial.size() == 13);
        CHECK(lora_param_count(spec, crucial) == 87830);
    }
    SECTION("strictly monotone in every rank") {
        GeneratorConfig cfg = micro_config();
        const auto gen = build_generator<float>(cfg, 1);
        std::vector<LayerDescriptor> crucial;
        for (const auto& d : describe_layers(gen))
            if (d.group == LayerGroup::SL || d.group == LayerGroup::TB) crucial.push_back(d);
        RankSpec spec;
        for (const auto& d : crucial) {
            spec.ranks[d.layer_id] = 2;
            spec.thresholds[d.layer_id] = 64;
        }
        const int64_t base_count = lora_param_count(spec, crucial);
        for (const auto& d : crucial) {
            RankSpec bump = spec;
            bump.ranks[d.layer_id] = 3;
            CHECK(lora_param_count(bump, crucial) > base_count);
        }
    }
}

TEST_CASE("searched-spec trainable fraction on the full-size generator is below 2%") {
    GeneratorConfig cfg;
    const auto gen = build_generator<float>(cfg, 1);
    RankSpec spec;
    spec.thresholds = default_thresholds(gen);
    for (const auto& [id, tau] : spec.thresholds) spec.ranks[id] = std::min(tau, 8);
    std::vector<LayerDescriptor> crucial;
    for (const auto& d : describe_layers(gen))
        if (d.group == LayerGroup::SL || d.group == LayerGroup::TB) crucial.push_back(d);
    const double fraction = static_cast<double>(lora_param_count(spec, crucial)) /
                            static_cast<double>(gen.total_param_count());
    CHECK(fraction < 0.02);
    CHECK(fraction > 0.005);  // sanity: the budget is tiny but not degenerate
}

TEST_CASE("rank spec validation") {
    RankSpec spec;
    spec.ranks["a"] = 4;
    spec.thresholds["a"] = 2;
    REQUIRE_THROWS_AS(spec.validate(), ConfigError);
    spec.ranks["a"] = 2;
    REQUIRE_NOTHROW(spec.validate());
    spec.ranks["b"] = 1;
    REQUIRE_THROWS_AS(spec.validate(), ConfigError);

    RankSpec io;
    io.ranks = {{"x", 2}, {"y", 8}};
    io.thresholds = {{"x", 4}, {"y", 16}};
    const RankSpec back = RankSpec::from_json(io.to_json());
    CHECK(back.ranks == io.ranks);
    CHECK(back.thresholds == io.thresholds);
}

TEST_CASE("adapter growth keeps the composed delta and retains trained slices") {
    GeneratorConfig cfg = micro_config();
    const auto gen = build_generator<double>(cfg, 3);
    auto adapted = inject_lora(gen, uniform_spec_t(gen, 2), 7);
    // Pretend training happened: nonzero factors.
    RandomEngine arng(5);
    for (auto& [id, a] : adapted.adapters.items) {
        for (auto& v : a.A.mutable_val().vec()) v = arng.normal(0, 0.05);
        for (auto& v : a.B.mutable_val().vec()) v = arng.normal(0, 0.05);
    }
    RandomEngine rng(6);
    const auto x = Tensor<double>::randn({1, 3, 16, 16}, rng, 0.0, 0.5);
    const auto z = Tensor<double>::randn({1, cfg.noise_dim}, rng);
    const auto c = Tensor<double>::randn({1, cfg.text_embed_dim}, rng);
    NoGradGuard ng;
    const auto before = adapted.forward(x, z, c).val();

    RandomEngine grow_rng(8);
    for (auto& [id, a] : adapted.adapters.items) {
        const auto old_a = a.A.val();
        detail_lora::grow_adapter(a, static_cast<int>(a.rank()) * 2, grow_rng);
        CHECK(a.rank() == (old_a.rank() == 4 ? old_a.dim(1) : old_a.dim(0)) * 2);
    }
    const auto after = adapted.forward(x, z, c).val();
    // New B slices are zero, so the function is unchanged at the growth point.
    CHECK(e2gan::testing::max_abs_diff(before.cast<float>(), after.cast<float>()) == 0.0);
}
