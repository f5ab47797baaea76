#pragma once

#include <cstdlib>

#include "e2gan/metrics.hpp"
#include "e2gan/rank_search.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// Run configuration: one JSON file drives every CLI command. Unknown keys
// are rejected; every default is resolvable so the effective configuration
// can be echoed next to the outputs.
// ---------------------------------------------------------------------------

struct SynthSpec {
    SynthTask task = SynthTask::invert;
    int n = 64;
    int resolution = 32;
    uint64_t seed = 0;
};

struct ConceptSpec {
    std::string name;
    std::string manifest;          // dataset manifest path (exclusive with synth)
    bool has_synth = false;
    SynthSpec synth;
    std::string coreset_manifest;  // optional training-data reduction
};

struct SearchSettings {
    int epochs_per_round = 10;
    std::map<std::string, int> thresholds;  // empty = size-based defaults
    std::vector<std::string> probe_concepts;
    std::string scorer = "l1";  // "l1" | "fid" | "scripted"
    std::vector<double> scripted_scores;
};

struct SelectionSettings {
    int k = 400;
    std::string embedder = "toy_pixels";
    std::string embedder_command;
    std::string cache_dir;
    bool l2_normalize = false;
    std::string concept_name;  // defaults to the first configured concept
};

struct EvalSettings {
    std::string embedder = "toy_pixels";
    std::string embedder_command;
};

struct RunConfig {
    uint64_t seed = 1;
    GeneratorConfig generator;
    TrainConfig train;
    LossConfig<float> loss;
    SearchSettings search;
    SelectionSettings selection;
    EvalSettings eval;
    std::vector<ConceptSpec> concepts;

    const ConceptSpec& concept_spec(const std::string& name) const {
        for (const auto& c : concepts)
            if (c.name == name) return c;
        throw ConfigError("concept '" + name + "' is not defined in the configuration");
    }
};

namespace detail_config {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

inline GeneratorConfig parse_generator(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"base_channels", "num_resnet_blocks", "num_transformer_blocks",
                         "tb_position", "tb_sandwich", "attention_dim", "ffn_inner",
                         "text_embed_dim", "noise_dim", "use_cross_attention",
                         "image_resolution"},
                        "generator config");
    GeneratorConfig c;
    c.base_channels = get_or(j, "base_channels", c.base_channels);
    c.num_resnet_blocks = get_or(j, "num_resnet_blocks", c.num_resnet_blocks);
    c.num_transformer_blocks = get_or(j, "num_transformer_blocks", c.num_transformer_blocks);
    if (j.contains("tb_position"))
        c.tb_position = tb_position_from_string(j.at("tb_position").get<std::string>());
    if (j.contains("tb_sandwich"))
        c.tb_sandwich = tb_sandwich_from_string(j.at("tb_sandwich").get<std::string>());
    c.attention_dim = get_or(j, "attention_dim", 4 * c.base_channels);
    c.ffn_inner = get_or(j, "ffn_inner", c.ffn_inner);
    c.text_embed_dim = get_or(j, "text_embed_dim", c.text_embed_dim);
    c.noise_dim = get_or(j, "noise_dim", c.noise_dim);
    c.use_cross_attention = get_or(j, "use_cross_attention", c.use_cross_attention);
    c.image_resolution = get_or(j, "image_resolution", c.image_resolution);
    c.validate();
    return c;
}

inline TrainConfig parse_train(const nlohmann::json& j, uint64_t seed) {
    reject_unknown_keys(j,
                        {"lr", "adam_beta1", "adam_beta2", "epochs", "batch_size", "mode",
                         "freeze_groups", "disable_cross_attention"},
                        "train config");
    TrainConfig c;
    c.lr = get_or(j, "lr", c.lr);
    c.adam_beta1 = get_or(j, "adam_beta1", c.adam_beta1);
    c.adam_beta2 = get_or(j, "adam_beta2", c.adam_beta2);
    c.epochs = get_or(j, "epochs", c.epochs);
    c.batch_size = get_or(j, "batch_size", c.batch_size);
    if (j.contains("mode")) c.mode = train_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("freeze_groups"))
        for (const auto& g : j.at("freeze_groups"))
            c.freeze_groups.insert(layer_group_from_string(g.get<std::string>()));
    c.disable_cross_attention = get_or(j, "disable_cross_attention", c.disable_cross_attention);
    c.seed = seed;
    c.validate();
    return c;
}

inline ConceptSpec parse_concept(const nlohmann::json& j, size_t index) {
    const std::string where = "concepts[" + std::to_string(index) + "]";
    reject_unknown_keys(j, {"name", "manifest", "synth", "coreset_manifest"}, where);
    ConceptSpec c;
    c.name = get_or<std::string>(j, "name", "");
    if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        reject_unknown_keys(s, {"task", "n", "resolution", "seed"}, where + ".synth");
        c.has_synth = true;
        c.synth.task = synth_task_from_string(s.at("task").get<std::string>());
        c.synth.n = get_or(s, "n", c.synth.n);
        c.synth.resolution = get_or(s, "resolution", c.synth.resolution);
        c.synth.seed = get_or<uint64_t>(s, "seed", c.synth.seed);
        if (c.name.empty()) c.name = to_string(c.synth.task);
    }
    if (j.contains("coreset_manifest"))
        c.coreset_manifest = j.at("coreset_manifest").get<std::string>();
    if (c.manifest.empty() == !c.has_synth)
        throw ConfigError(where + " must define exactly one of 'manifest' or 'synth'");
    if (c.name.empty()) throw ConfigError(where + " needs a name");
    return c;
}

}  // namespace detail_config

inline RunConfig parse_run_config(const nlohmann::json& j) {
    reject_unknown_keys(
        j, {"seed", "generator", "train", "loss", "search", "selection", "eval", "concepts"},
        "run config");
    RunConfig cfg;
    cfg.seed = detail_config::get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.generator = detail_config::parse_generator(
        j.contains("generator") ? j.at("generator") : nlohmann::json::object());
    cfg.train = detail_config::parse_train(
        j.contains("train") ? j.at("train") : nlohmann::json::object(), cfg.seed);
    if (j.contains("loss")) {
        reject_unknown_keys(j.at("loss"), {"lambda_l1", "gan_mode"}, "loss config");
        cfg.loss.lambda_l1 =
            detail_config::get_or(j.at("loss"), "lambda_l1", cfg.loss.lambda_l1);
        if (j.at("loss").contains("gan_mode") &&
            j.at("loss").at("gan_mode").get<std::string>() != "bce_logits")
            throw ConfigError("gan_mode must be 'bce_logits'");
        cfg.loss.validate();
    }
    if (j.contains("search")) {
        const auto& s = j.at("search");
        reject_unknown_keys(
            s, {"epochs_per_round", "thresholds", "probe_concepts", "scorer", "scripted_scores"},
            "search config");
        cfg.search.epochs_per_round =
            detail_config::get_or(s, "epochs_per_round", cfg.search.epochs_per_round);
        if (s.contains("thresholds"))
            for (const auto& [id, tau] : s.at("thresholds").items())
                cfg.search.thresholds[id] = tau.get<int>();
        if (s.contains("probe_concepts"))
            cfg.search.probe_concepts = s.at("probe_concepts").get<std::vector<std::string>>();
        cfg.search.scorer = detail_config::get_or<std::string>(s, "scorer", cfg.search.scorer);
        if (cfg.search.scorer != "l1" && cfg.search.scorer != "fid" &&
            cfg.search.scorer != "scripted")
            throw ConfigError("search.scorer must be one of l1, fid, scripted");
        if (s.contains("scripted_scores"))
            cfg.search.scripted_scores = s.at("scripted_scores").get<std::vector<double>>();
        if (cfg.search.scorer == "scripted" && cfg.search.scripted_scores.empty())
            throw ConfigError("scripted scorer needs search.scripted_scores");
    }
    if (j.contains("selection")) {
        const auto& s = j.at("selection");
        reject_unknown_keys(
            s, {"k", "embedder", "embedder_command", "cache_dir", "l2_normalize", "concept"},
            "selection config");
        cfg.selection.k = detail_config::get_or(s, "k", cfg.selection.k);
        cfg.selection.embedder =
            detail_config::get_or<std::string>(s, "embedder", cfg.selection.embedder);
        cfg.selection.embedder_command =
            detail_config::get_or<std::string>(s, "embedder_command", "");
        cfg.selection.cache_dir = detail_config::get_or<std::string>(s, "cache_dir", "");
        cfg.selection.l2_normalize =
            detail_config::get_or(s, "l2_normalize", cfg.selection.l2_normalize);
        cfg.selection.concept_name = detail_config::get_or<std::string>(s, "concept", "");
    }
    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        reject_unknown_keys(s, {"embedder", "embedder_command"}, "eval config");
        cfg.eval.embedder = detail_config::get_or<std::string>(s, "embedder", cfg.eval.embedder);
        cfg.eval.embedder_command =
            detail_config::get_or<std::string>(s, "embedder_command", "");
    }
    if (j.contains("concepts")) {
        size_t idx = 0;
        for (const auto& cj : j.at("concepts"))
            cfg.concepts.push_back(detail_config::parse_concept(cj, idx++));
    }
    if (cfg.selection.cache_dir.empty())
        if (const char* env = std::getenv("E2GAN_CACHE_DIR")) cfg.selection.cache_dir = env;
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    return parse_run_config(read_json_file(path));
}

// Fully resolved configuration, echoed next to every command's outputs.
inline nlohmann::json resolved_config_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["generator"] = cfg.generator.to_json();
    nlohmann::json freeze = nlohmann::json::array();
    for (const auto& g : cfg.train.freeze_groups) freeze.push_back(to_string(g));
    j["train"] = {{"lr", cfg.train.lr},
                  {"adam_beta1", cfg.train.adam_beta1},
                  {"adam_beta2", cfg.train.adam_beta2},
                  {"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"mode", to_string(cfg.train.mode)},
                  {"freeze_groups", freeze},
                  {"disable_cross_attention", cfg.train.disable_cross_attention}};
    j["loss"] = {{"lambda_l1", cfg.loss.lambda_l1}, {"gan_mode", "bce_logits"}};
    nlohmann::json thresholds = nlohmann::json::object();
    for (const auto& [id, tau] : cfg.search.thresholds) thresholds[id] = tau;
    j["search"] = {{"epochs_per_round", cfg.search.epochs_per_round},
                   {"thresholds", thresholds},
                   {"probe_concepts", cfg.search.probe_concepts},
                   {"scorer", cfg.search.scorer},
                   {"scripted_scores", cfg.search.scripted_scores}};
    j["selection"] = {{"k", cfg.selection.k},
                      {"embedder", cfg.selection.embedder},
                      {"embedder_command", cfg.selection.embedder_command},
                      {"cache_dir", cfg.selection.cache_dir},
                      {"l2_normalize", cfg.selection.l2_normalize},
                      {"concept", cfg.selection.concept_name}};
    j["eval"] = {{"embedder", cfg.eval.embedder},
                 {"embedder_command", cfg.eval.embedder_command}};
    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& c : cfg.concepts) {
        nlohmann::json cj{{"name", c.name}};
        if (!c.manifest.empty()) cj["manifest"] = c.manifest;
        if (c.has_synth)
            cj["synth"] = {{"task", to_string(c.synth.task)},
                           {"n", c.synth.n},
                           {"resolution", c.synth.resolution},
                           {"seed", c.synth.seed}};
        if (!c.coreset_manifest.empty()) cj["coreset_manifest"] = c.coreset_manifest;
        concepts.push_back(cj);
    }
    j["concepts"] = concepts;
    return j;
}

// Materializes a configured concept (manifest load or synthetic generation),
// applying any configured coreset restriction.
inline ConceptRecord load_concept(const ConceptSpec& spec, const GeneratorConfig& gen_cfg) {
    ConceptRecord rec;
    if (spec.has_synth) {
        if (spec.synth.resolution != gen_cfg.image_resolution)
            throw ConfigError("concept '" + spec.name + "': synth resolution " +
                              std::to_string(spec.synth.resolution) +
                              " does not match generator resolution " +
                              std::to_string(gen_cfg.image_resolution));
        rec = synth_paired_task(spec.synth.task, spec.synth.n, spec.synth.resolution,
                                spec.synth.seed);
        rec.name = spec.name;
    } else {
        rec = load_concept_dataset(spec.manifest, gen_cfg.image_resolution);
        rec.name = spec.name.empty() ? rec.name : spec.name;
    }
    if (!spec.coreset_manifest.empty())
        rec.restrict_train_to(read_coreset_manifest(spec.coreset_manifest));
    return rec;
}

}  // namespace e2gan
