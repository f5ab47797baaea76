#pragma once

#include <functional>
#include <limits>

#include "e2gan/trainer.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// Per-concept doubling rank schedule with periodic score evaluation; the
// global result is the elementwise maximum across probe concepts.
// ---------------------------------------------------------------------------

template <typename T>
struct SearchEvalContext {
    AdaptedGenerator<T>& model;
    ConceptRecord& concept_rec;
    int round;
    const std::map<std::string, int>& ranks;
    int text_dim;
    int noise_dim;
};

template <typename T>
struct SearchConfig {
    int epochs_per_round = 10;
    std::map<std::string, int> thresholds;  // filled from defaults when empty
    std::vector<ConceptRecord*> probe_concepts;
    // Lower is better. Defaults to mean L1 on the concept's test split.
    std::function<double(SearchEvalContext<T>&)> scorer;
    // Trains the adapters for `epochs` epochs; replaceable by a stub so the
    // schedule logic can be tested without any real training.
    std::function<void(AdaptedGenerator<T>&, ConceptRecord&, int epochs, int round)> train_hook;
    TrainConfig train_cfg;
    LossConfig<T> loss_cfg;
    uint64_t seed = 0;

    void validate_common() const {
        if (epochs_per_round < 1) throw ConfigError("epochs_per_round must be >= 1");
        for (const auto& [id, tau] : thresholds)
            if (tau < 1) throw ConfigError("threshold for '" + id + "' must be >= 1");
    }

    void validate() const {
        validate_common();
        if (probe_concepts.empty()) throw ConfigError("rank search needs at least one concept");
    }
};

// One schedule update: every rank doubles, capped at its threshold.
inline std::map<std::string, int> rank_schedule_step(const std::map<std::string, int>& ranks,
                                                     const std::map<std::string, int>& thresholds) {
    if (ranks.size() != thresholds.size())
        throw ConfigError("rank_schedule_step: ranks and thresholds cover different layers");
    std::map<std::string, int> out;
    for (const auto& [id, r] : ranks) {
        auto it = thresholds.find(id);
        if (it == thresholds.end())
            throw ConfigError("rank_schedule_step: no threshold for layer '" + id + "'");
        if (r > it->second)
            throw ConfigError("rank_schedule_step: rank exceeds threshold for '" + id + "'");
        out[id] = std::min(2 * r, it->second);
    }
    return out;
}

// Per-layer maximum of two rank vectors (the cross-concept aggregation rule).
inline std::map<std::string, int> elementwise_max_ranks(const std::map<std::string, int>& a,
                                                        const std::map<std::string, int>& b) {
    if (a.size() != b.size())
        throw ConfigError("elementwise_max_ranks: vectors cover different layers");
    std::map<std::string, int> out;
    for (const auto& [id, r] : a) {
        auto it = b.find(id);
        if (it == b.end())
            throw ConfigError("elementwise_max_ranks: no entry for layer '" + id + "'");
        out[id] = std::max(r, it->second);
    }
    return out;
}

struct RankSearchTraceRecord {
    std::string concept_name;
    int round = 0;
    std::map<std::string, int> ranks;
    double score = 0;

    nlohmann::json to_json() const {
        nlohmann::json jr = nlohmann::json::object();
        for (const auto& [id, r] : ranks) jr[id] = r;
        return {{"concept", concept_name}, {"round", round}, {"ranks", jr}, {"score", score}};
    }
};

inline void write_rank_search_trace(const std::string& path,
                                    const std::vector<RankSearchTraceRecord>& trace) {
    std::string out;
    for (const auto& r : trace) out += r.to_json().dump() + "\n";
    write_text_file_atomic(path, out);
}

inline int max_search_rounds(const std::map<std::string, int>& thresholds) {
    int max_tau = 1;
    for (const auto& [id, tau] : thresholds) max_tau = std::max(max_tau, tau);
    int rounds = 1;
    for (int v = 1; v < max_tau; v *= 2) ++rounds;
    return rounds;  // 1 + ceil(log2(max tau))
}

namespace detail_search {

template <typename T>
std::map<std::string, int> resolved_thresholds(const Generator<T>& gen,
                                               const std::map<std::string, int>& given) {
    if (given.empty()) return default_thresholds(gen);
    const auto crucial = crucial_layers(gen);
    for (const auto& id : crucial)
        if (!given.count(id))
            throw ConfigError("rank search thresholds do not cover layer '" + id + "'");
    if (given.size() != crucial.size())
        throw ConfigError("rank search thresholds name layers outside the crucial set");
    return given;
}

}  // namespace detail_search

// Search for a single concept. Ranks start at 1 and are upscaled at the top
// of every round (so the first trained vector is already one doubling in);
// the loop stops when the score strictly worsens or all ranks have reached
// their thresholds, and the ranks from the best observed score are returned.
template <typename T>
std::map<std::string, int> search_concept_rank(const Checkpoint& base, ConceptRecord& concept_rec,
                                               const SearchConfig<T>& cfg,
                                               std::vector<RankSearchTraceRecord>* trace = nullptr) {
    cfg.validate_common();
    Generator<T> gen = generator_from_checkpoint<T>(base);
    const GeneratorConfig& gcfg = gen.config();
    const auto thresholds = detail_search::resolved_thresholds(gen, cfg.thresholds);

    std::map<std::string, int> ranks;
    for (const auto& [id, tau] : thresholds) ranks[id] = 1;

    RankSpec spec{ranks, thresholds};
    const uint64_t concept_seed =
        detail_train::derive_seed(cfg.seed, ("search:" + concept_rec.name).c_str());
    AdaptedGenerator<T> adapted = inject_lora(gen, spec, concept_seed);
    adapted.cross_attention = !cfg.train_cfg.disable_cross_attention;
    RandomEngine grow_rng(detail_train::derive_seed(concept_seed, "grow"));

    // Default training hook keeps one discriminator alive across rounds so
    // each round continues from the previous adversarial state.
    Discriminator<T> disc = build_discriminator<T>(gcfg, concept_seed + 1);
    auto train_round = [&](AdaptedGenerator<T>& model, ConceptRecord& rec, int epochs,
                           int round) {
        if (cfg.train_hook) {
            cfg.train_hook(model, rec, epochs, round);
            return;
        }
        TrainConfig tc = cfg.train_cfg;
        tc.epochs = epochs;
        tc.seed = detail_train::derive_seed(concept_seed, ("round:" + std::to_string(round)).c_str());
        detail_train::gan_training_loop(model, disc, {&rec}, tc, cfg.loss_cfg,
                                        gcfg.text_embed_dim, gcfg.noise_dim);
    };
    auto evaluate = [&](int round) -> double {
        double score = 0;
        try {
            if (cfg.scorer) {
                SearchEvalContext<T> ctx{adapted, concept_rec, round, ranks,
                                         gcfg.text_embed_dim, gcfg.noise_dim};
                score = cfg.scorer(ctx);
            } else {
                score = mean_l1_on_split<T>(adapted, concept_rec, concept_rec.splits.test,
                                            gcfg.text_embed_dim, gcfg.noise_dim);
            }
        } catch (const std::exception& e) {
            throw SearchError("scorer failed for concept '" + concept_rec.name + "' at round " +
                              std::to_string(round) + ": " + e.what());
        }
        if (!std::isfinite(score))
            throw SearchError("scorer returned a non-finite value for concept '" + concept_rec.name +
                              "' at round " + std::to_string(round));
        return score;
    };

    const int round_cap = max_search_rounds(thresholds);
    double prev_score = std::numeric_limits<double>::infinity();
    double last_score = std::numeric_limits<double>::infinity();
    double best_score = std::numeric_limits<double>::infinity();
    std::map<std::string, int> best_ranks = ranks;

    for (int round = 1; round <= round_cap; ++round) {
        if (round > 1) {
            bool saturated = true;
            for (const auto& [id, r] : ranks)
                if (r < thresholds.at(id)) saturated = false;
            if (saturated) break;
            if (last_score > prev_score) break;  // strictly worse: stop; ties continue
        }
        ranks = rank_schedule_step(ranks, thresholds);
        for (auto& [id, a] : adapted.adapters.items)
            detail_lora::grow_adapter(a, ranks.at(id), grow_rng);
        adapted.spec.ranks = ranks;

        train_round(adapted, concept_rec, cfg.epochs_per_round, round);
        const double score = evaluate(round);
        prev_score = last_score;
        last_score = score;
        if (trace) trace->push_back({concept_rec.name, round, ranks, score});
        if (score < best_score) {
            best_score = score;
            best_ranks = ranks;
        }
    }
    return best_ranks;
}

template <typename T>
struct GlobalSearchResult {
    RankSpec spec;
    std::vector<RankSearchTraceRecord> trace;
    std::map<std::string, std::map<std::string, int>> per_concept;
};

// Runs the per-concept search for every probe concept and aggregates by
// elementwise maximum.
template <typename T>
GlobalSearchResult<T> search_global_rank(const Checkpoint& base, const SearchConfig<T>& cfg) {
    cfg.validate();
    Generator<T> gen = generator_from_checkpoint<T>(base);
    const auto thresholds = detail_search::resolved_thresholds(gen, cfg.thresholds);

    GlobalSearchResult<T> out;
    std::map<std::string, int> best;
    for (const auto& [id, tau] : thresholds) best[id] = 1;
    for (ConceptRecord* probe : cfg.probe_concepts) {
        std::map<std::string, int> r;
        try {
            r = search_concept_rank(base, *probe, cfg, &out.trace);
        } catch (const SearchError&) {
            throw;
        } catch (const std::exception& e) {
            throw SearchError("rank search failed for concept '" + probe->name +
                              "': " + e.what());
        }
        best = elementwise_max_ranks(best, r);
        out.per_concept[probe->name] = r;
    }
    out.spec.ranks = best;
    out.spec.thresholds = thresholds;
    out.spec.validate();
    return out;
}

}  // namespace e2gan
