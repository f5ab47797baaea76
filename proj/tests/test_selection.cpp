#include <catch2/catch_amalgamated.hpp>

#include "e2gan/selection.hpp"
#include "test_support.hpp"

using namespace e2gan;

namespace {

// Two well-separated planar blobs with known means.
EmbeddingSet two_blobs(int per_blob, uint64_t seed) {
    RandomEngine rng(seed);
    EmbeddingSet emb;
    const double means[2][2] = {{0.0, 0.0}, {10.0, 10.0}};
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < per_blob; ++i) {
            emb.vectors.push_back(
                {means[b][0] + rng.normal(0, 0.3), means[b][1] + rng.normal(0, 0.3)});
            emb.ids.push_back("b" + std::to_string(b) + "_" + std::to_string(i));
        }
    return emb;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

}  // namespace

TEST_CASE("kmeans") {
    SECTION("K = N puts every point in its own cluster with zero inertia") {
        EmbeddingSet emb = two_blobs(3, 1);
        const auto model = kmeans(emb, static_cast<int>(emb.n()), 7);
        CHECK(model.inertia == 0.0);
        std::set<int> used(model.assignments.begin(), model.assignments.end());
        CHECK(used.size() == static_cast<size_t>(emb.n()));
    }
    SECTION("two separable blobs: centroids land within 0.1 of the blob means") {
        EmbeddingSet emb = two_blobs(100, 2);
        const auto model = kmeans(emb, 2, 3);
        // Match centroids to blob means by distance.
        const std::vector<std::vector<double>> want = {{0, 0}, {10, 10}};
        for (const auto& mean : want) {
            double best = 1e30;
            for (const auto& c : model.centroids) best = std::min(best, sq_dist(c, mean));
            CHECK(std::sqrt(best) < 0.1);
        }
    }
    SECTION("determinism under a fixed seed") {
        EmbeddingSet emb = two_blobs(50, 4);
        const auto a = kmeans(emb, 5, 11);
        const auto b = kmeans(emb, 5, 11);
        CHECK(a.assignments == b.assignments);
        CHECK(a.inertia == b.inertia);
    }
    SECTION("inertia is non-increasing across Lloyd iterations") {
        // Deterministic seeding makes an m-iteration run a prefix of an
        // (m+1)-iteration run, so the iteration curve is observable through
        // max_iters.
        EmbeddingSet emb = two_blobs(60, 5);
        double prev = std::numeric_limits<double>::infinity();
        for (int iters = 1; iters <= 8; ++iters) {
            const auto model = kmeans(emb, 6, 13, iters);
            CHECK(model.inertia <= prev + 1e-9);
            prev = model.inertia;
        }
    }
    SECTION("centroids equal their members' means at convergence") {
        EmbeddingSet emb = two_blobs(40, 6);
        const auto model = kmeans(emb, 3, 17);
        const size_t d = 2;
        std::vector<std::vector<double>> sums(3, std::vector<double>(d, 0.0));
        std::vector<int> counts(3, 0);
        for (int64_t i = 0; i < emb.n(); ++i) {
            const int k = model.assignments[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(k)];
            for (size_t j = 0; j < d; ++j)
                sums[static_cast<size_t>(k)][j] += emb.vectors[static_cast<size_t>(i)][j];
        }
        for (int k = 0; k < 3; ++k) {
            if (counts[static_cast<size_t>(k)] == 0) continue;
            for (size_t j = 0; j < d; ++j)
                CHECK_THAT(model.centroids[static_cast<size_t>(k)][j],
                           Catch::Matchers::WithinAbs(
                               sums[static_cast<size_t>(k)][j] / counts[static_cast<size_t>(k)],
                               1e-6));
        }
    }
    SECTION("K out of range and invalid inputs") {
        EmbeddingSet emb = two_blobs(3, 1);
        REQUIRE_THROWS_AS(kmeans(emb, 7, 1), ConfigError);
        REQUIRE_THROWS_AS(kmeans(emb, 0, 1), ConfigError);
        EmbeddingSet dup = emb;
        dup.ids[1] = dup.ids[0];
        REQUIRE_THROWS_AS(kmeans(dup, 2, 1), ConfigError);
    }
    SECTION("duplicate points exercise the degenerate-seeding fallback") {
        EmbeddingSet emb;
        for (int i = 0; i < 5; ++i) {
            emb.vectors.push_back({1.0, 2.0});
            emb.ids.push_back("p" + std::to_string(i));
        }
        const auto model = kmeans(emb, 3, 23);
        CHECK(model.inertia == 0.0);
        for (int a : model.assignments) {
            CHECK(a >= 0);
            CHECK(a < 3);
        }
    }
}

TEST_CASE("coreset selection") {
    SECTION("K = N returns every id") {
        EmbeddingSet emb = two_blobs(4, 3);
        auto ids = select_coreset(emb, static_cast<int>(emb.n()), 5);
        std::set<std::string> got(ids.begin(), ids.end());
        CHECK(got.size() == static_cast<size_t>(emb.n()));
        for (const auto& id : emb.ids) CHECK(got.count(id) == 1);
    }
    SECTION("blob picks match the exhaustive nearest-to-centroid scan") {
        EmbeddingSet emb = two_blobs(100, 8);
        const int K = 2;
        const uint64_t seed = 31;
        const auto picked = select_coreset(emb, K, seed);
        REQUIRE(picked.size() == 2);

        // Independent oracle: rerun the clustering, then brute-force scan
        // every member of every cluster.
        const auto model = kmeans(emb, K, seed);
        std::vector<int64_t> best(static_cast<size_t>(K), -1);
        std::vector<double> bd(static_cast<size_t>(K), 1e30);
        for (int64_t i = 0; i < emb.n(); ++i) {
            const int k = model.assignments[static_cast<size_t>(i)];
            const double dist = sq_dist(emb.vectors[static_cast<size_t>(i)],
                                        model.centroids[static_cast<size_t>(k)]);
            if (dist < bd[static_cast<size_t>(k)]) {
                bd[static_cast<size_t>(k)] = dist;
                best[static_cast<size_t>(k)] = i;
            }
        }
        for (int k = 0; k < K; ++k)
            CHECK(picked[static_cast<size_t>(k)] == emb.ids[static_cast<size_t>(best[static_cast<size_t>(k)])]);
        // Selected points sit inside their own blob.
        CHECK(picked[0].substr(0, 2) != picked[1].substr(0, 2));
    }
    SECTION("exact distance ties break toward the lower item index") {
        EmbeddingSet emb;
        emb.vectors = {{0.0, 0.0}, {2.0, 0.0}};
        emb.ids = {"first", "second"};
        // One cluster: centroid (1,0), both points exactly distance 1 away.
        const auto picked = select_coreset(emb, 1, 3);
        REQUIRE(picked.size() == 1);
        CHECK(picked[0] == "first");
    }
}

TEST_CASE("toy pixel embedder") {
    ToyPixelEmbedder toy;
    SECTION("dimension is 3 + 3*16 = 51") {
        const Tensor<float> img({3, 16, 16});
        CHECK(toy.embed(img).size() == 51);
    }
    SECTION("zero image embeds to all zeros") {
        const Tensor<float> img({3, 8, 8});
        for (double v : toy.embed(img)) CHECK(v == 0.0);
    }
    SECTION("bit-identical images embed identically") {
        RandomEngine rng(5);
        const auto img = Tensor<float>::randn({3, 12, 12}, rng);
        const Tensor<float> copy = img;
        CHECK(toy.embed(img) == toy.embed(copy));
    }
    SECTION("channel means occupy the first three slots") {
        Tensor<float> img({3, 4, 4});
        for (int64_t i = 0; i < 16; ++i) {
            img[i] = 1.0f;           // R
            img[16 + i] = -0.5f;     // G
            img[32 + i] = 0.25f;     // B
        }
        const auto v = toy.embed(img);
        CHECK_THAT(v[0], Catch::Matchers::WithinAbs(1.0, 1e-7));
        CHECK_THAT(v[1], Catch::Matchers::WithinAbs(-0.5, 1e-7));
        CHECK_THAT(v[2], Catch::Matchers::WithinAbs(0.25, 1e-7));
    }
}

TEST_CASE("external embedder") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "e2gan_embed_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path script = dir / "embed.sh";
    {
        std::ofstream out(script);
        out << "#!/bin/sh\necho '1.5 2.5 3.5'\n";
    }
    RandomEngine rng(9);
    const auto img = Tensor<float>::randn({3, 8, 8}, rng);

    SECTION("delegates to the command and caches by content") {
        ExternalEmbedder ext("/bin/sh " + script.string(), (dir / "cache").string());
        const auto v = ext.embed(img);
        REQUIRE(v == std::vector<double>{1.5, 2.5, 3.5});
        // Rewrite the script; the cached vector must win for the same image.
        {
            std::ofstream out(script);
            out << "#!/bin/sh\necho '9 9 9'\n";
        }
        CHECK(ext.embed(img) == std::vector<double>{1.5, 2.5, 3.5});
        // A different image bypasses the cache and sees the new script.
        const auto img2 = Tensor<float>::randn({3, 8, 8}, rng);
        CHECK(ext.embed(img2) == std::vector<double>{9, 9, 9});
    }
    SECTION("an unreachable command is a hard error, never a silent fallback") {
        ExternalEmbedder ext("/nonexistent/616c6c source", (dir / "cache2").string());
        REQUIRE_THROWS_AS(ext.embed(img), EmbedderError);
    }
    SECTION("a command with no output is an error") {
        const fs::path empty_script = dir / "empty.sh";
        {
            std::ofstream out(empty_script);
            out << "#!/bin/sh\nexit 0\n";
        }
        ExternalEmbedder ext("/bin/sh " + empty_script.string(), "");
        REQUIRE_THROWS_AS(ext.embed(img), EmbedderError);
    }
    fs::remove_all(dir);
}

TEST_CASE("concept embedding is the mean of image embeddings") {
    ToyPixelEmbedder toy;
    RandomEngine rng(13);
    std::vector<Tensor<float>> images;
    for (int i = 0; i < 3; ++i) images.push_back(Tensor<float>::randn({3, 8, 8}, rng));

    SECTION("a single image returns its own embedding") {
        CHECK(concept_embedding({images[0]}, toy) == toy.embed(images[0]));
    }
    SECTION("two images average elementwise") {
        const auto u = toy.embed(images[0]);
        const auto v = toy.embed(images[1]);
        const auto m = concept_embedding({images[0], images[1]}, toy);
        for (size_t i = 0; i < m.size(); ++i)
            CHECK_THAT(m[i], Catch::Matchers::WithinAbs((u[i] + v[i]) / 2.0, 1e-12));
    }
    SECTION("permutation leaves the mean unchanged") {
        const auto a = concept_embedding({images[0], images[1], images[2]}, toy);
        const auto b = concept_embedding({images[2], images[0], images[1]}, toy);
        for (size_t i = 0; i < a.size(); ++i)
            CHECK_THAT(a[i], Catch::Matchers::WithinAbs(b[i], 1e-12));
    }
    SECTION("empty list is an error") {
        REQUIRE_THROWS_AS(concept_embedding({}, toy), ConfigError);
    }
}

TEST_CASE("representative concept selection finds one concept per group") {
    // Three groups of synthetic concepts with distinct pixel statistics:
    // bright, dark and mid-gray images.
    ToyPixelEmbedder toy;
    std::vector<ConceptRecord> records;
    const float levels[3] = {0.8f, -0.8f, 0.0f};
    for (int g = 0; g < 3; ++g)
        for (int i = 0; i < 3; ++i) {
            ConceptRecord rec;
            rec.name = "g" + std::to_string(g) + "_c" + std::to_string(i);
            rec.prompt = rec.name;
            rec.resolution = 8;
            RandomEngine rng(static_cast<uint64_t>(g * 10 + i));
            for (int k = 0; k < 4; ++k) {
                Tensor<float> img({3, 8, 8});
                for (int64_t t = 0; t < img.numel(); ++t)
                    img[t] = levels[g] + static_cast<float>(rng.normal(0, 0.02));
                rec.sources.push_back(img);
                rec.edited.push_back(img);
                rec.pair_ids.push_back(rec.name + "_" + std::to_string(k));
            }
            rec.splits = make_splits(4, 1);
            records.push_back(std::move(rec));
        }
    std::vector<ConceptRecord*> recs;
    for (auto& r : records) recs.push_back(&r);

    const auto picked = select_base_concepts(recs, 3, toy, 77);
    REQUIRE(picked.size() == 3);
    std::set<char> groups;
    for (const auto& name : picked) groups.insert(name[1]);
    CHECK(groups == std::set<char>{'0', '1', '2'});
    CHECK(select_base_concepts(recs, 3, toy, 77) == picked);  // deterministic

    SECTION("K equal to the concept count selects everything") {
        const auto all = select_base_concepts(recs, static_cast<int>(recs.size()), toy, 3);
        CHECK(all.size() == recs.size());
    }
    SECTION("K larger than the concept count is rejected") {
        REQUIRE_THROWS_AS(select_base_concepts(recs, 10, toy, 3), ConfigError);
    }
}

TEST_CASE("train-split embedding with optional normalization") {
    auto rec = synth_paired_task(SynthTask::invert, 10, 16, 3);
    ToyPixelEmbedder toy;
    const auto raw = embed_train_split(rec, toy, false);
    CHECK(raw.n() == static_cast<int64_t>(rec.splits.train.size()));
    const auto normed = embed_train_split(rec, toy, true);
    for (const auto& v : normed.vectors) {
        double n2 = 0;
        for (double x : v) n2 += x * x;
        CHECK_THAT(n2, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}
