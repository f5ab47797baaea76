#pragma once

#include <algorithm>
#include <sstream>

#include "e2gan/model.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// Rank specification: per-crucial-layer rank and upper threshold.
// ---------------------------------------------------------------------------

struct RankSpec {
    std::map<std::string, int> ranks;
    std::map<std::string, int> thresholds;

    void validate() const {
        if (ranks.size() != thresholds.size())
            throw ConfigError("rank spec: ranks and thresholds must cover the same layers");
        for (const auto& [id, r] : ranks) {
            auto it = thresholds.find(id);
            if (it == thresholds.end())
                throw ConfigError("rank spec: no threshold for layer '" + id + "'");
            if (r < 1) throw ConfigError("rank spec: rank for '" + id + "' must be >= 1");
            if (it->second < 1)
                throw ConfigError("rank spec: threshold for '" + id + "' must be >= 1");
            if (r > it->second)
                throw ConfigError("rank spec: rank " + std::to_string(r) + " exceeds threshold " +
                                  std::to_string(it->second) + " for layer '" + id + "'");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json jr = nlohmann::json::object();
        nlohmann::json jt = nlohmann::json::object();
        for (const auto& [id, r] : ranks) jr[id] = r;
        for (const auto& [id, t] : thresholds) jt[id] = t;
        return {{"ranks", jr}, {"thresholds", jt}};
    }

    static RankSpec from_json(const nlohmann::json& j) {
        RankSpec s;
        for (const auto& [id, r] : j.at("ranks").items()) s.ranks[id] = r.get<int>();
        for (const auto& [id, t] : j.at("thresholds").items()) s.thresholds[id] = t.get<int>();
        s.validate();
        return s;
    }
};

// ---------------------------------------------------------------------------
// Crucial layers: the sampling convs and the transformer projections /
// feed-forward, i.e. everything tagged SL or TB. ResNet-block convs are
// excluded unless explicitly requested for ablations.
// ---------------------------------------------------------------------------

inline std::vector<std::string> crucial_layer_ids(const std::vector<LayerDescriptor>& layers,
                                                  bool include_rb = false) {
    std::vector<std::string> out;
    for (const auto& d : layers) {
        if (d.group == LayerGroup::SL || d.group == LayerGroup::TB ||
            (include_rb && d.group == LayerGroup::RB))
            out.push_back(d.layer_id);
    }
    return out;
}

template <typename T>
std::vector<std::string> crucial_layers(const Generator<T>& gen, bool include_rb = false) {
    return crucial_layer_ids(describe_layers(gen), include_rb);
}

// Default rank thresholds, tied to weight size: 1, 4, 16, 32 through the
// sampling stack depth (mirrored on the way up), 1 for transformer layers.
template <typename T>
std::map<std::string, int> default_thresholds(const Generator<T>& gen, bool include_rb = false) {
    static constexpr int kSamplingTau[4] = {1, 4, 16, 32};
    std::map<std::string, int> tau;
    for (const auto& id : crucial_layers(gen, include_rb)) {
        if (id.rfind("down.", 0) == 0) {
            tau[id] = kSamplingTau[id[5] - '0'];
        } else if (id.rfind("up.", 0) == 0) {
            tau[id] = kSamplingTau[3 - (id[3] - '0')];
        } else {
            tau[id] = 1;
        }
    }
    return tau;
}

// ---------------------------------------------------------------------------
// Parameter accounting. Pure arithmetic over descriptors:
//   conv/transpose conv: in*r*kh*kw + r*out     linear: r*in + out*r
// ---------------------------------------------------------------------------

inline int64_t lora_layer_param_count(const LayerDescriptor& d, int rank) {
    switch (d.kind) {
        case LayerKind::conv:
        case LayerKind::transpose_conv:
            return d.in_channels * rank * d.kh * d.kw + rank * d.out_channels;
        case LayerKind::linear:
        case LayerKind::attention_proj: return rank * d.in_channels + d.out_channels * rank;
        case LayerKind::norm:
            throw ConfigError("norm layer '" + d.layer_id + "' cannot carry a LoRA adapter");
    }
    return 0;
}

inline int64_t lora_param_count(const RankSpec& spec, const std::vector<LayerDescriptor>& layers) {
    spec.validate();
    int64_t total = 0;
    for (const auto& d : layers) {
        auto it = spec.ranks.find(d.layer_id);
        if (it == spec.ranks.end())
            throw ConfigError("rank spec does not cover layer '" + d.layer_id + "'");
        total += lora_layer_param_count(d, it->second);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Injection
// ---------------------------------------------------------------------------

namespace detail_lora {

template <typename T>
LoRAAdapter<T> make_adapter(const LayerDescriptor& d, int rank, RandomEngine& rng) {
    LoRAAdapter<T> a;
    a.layer_id = d.layer_id;
    if (d.kind == LayerKind::conv || d.kind == LayerKind::transpose_conv) {
        a.A = Var<T>(Tensor<T>::randn({d.in_channels, rank, d.kh, d.kw}, rng, T(0), T(0.02)),
                     true);
        a.B = Var<T>(Tensor<T>::zeros({rank, d.out_channels, 1, 1}), true);
    } else {
        a.A = Var<T>(Tensor<T>::randn({rank, d.in_channels}, rng, T(0), T(0.02)), true);
        a.B = Var<T>(Tensor<T>::zeros({d.out_channels, rank}), true);
    }
    return a;
}

// Extends an adapter to a larger rank. Existing factor slices are kept (the
// training already invested in them); new A slices are freshly sampled and
// new B slices start at zero, so the composed delta is unchanged at the
// moment of growth.
template <typename T>
void grow_adapter(LoRAAdapter<T>& a, int new_rank, RandomEngine& rng) {
    const int64_t r = a.rank();
    if (new_rank <= r) return;
    if (a.A.val().rank() == 4) {
        const auto& as = a.A.val().shape();
        Tensor<T> na = Tensor<T>::randn({as[0], new_rank, as[2], as[3]}, rng, T(0), T(0.02));
        for (int64_t i = 0; i < as[0]; ++i)
            for (int64_t j = 0; j < r; ++j)
                for (int64_t u = 0; u < as[2]; ++u)
                    for (int64_t vv = 0; vv < as[3]; ++vv)
                        na.at4(i, j, u, vv) = a.A.val().at4(i, j, u, vv);
        const auto& bs = a.B.val().shape();
        Tensor<T> nb = Tensor<T>::zeros({new_rank, bs[1], 1, 1});
        for (int64_t j = 0; j < r; ++j)
            for (int64_t o = 0; o < bs[1]; ++o) nb.at4(j, o, 0, 0) = a.B.val().at4(j, o, 0, 0);
        a.A = Var<T>(std::move(na), true);
        a.B = Var<T>(std::move(nb), true);
    } else {
        const auto& as = a.A.val().shape();
        Tensor<T> na = Tensor<T>::randn({new_rank, as[1]}, rng, T(0), T(0.02));
        for (int64_t j = 0; j < r; ++j)
            for (int64_t i = 0; i < as[1]; ++i) na.at2(j, i) = a.A.val().at2(j, i);
        const auto& bs = a.B.val().shape();
        Tensor<T> nb = Tensor<T>::zeros({bs[0], new_rank});
        for (int64_t o = 0; o < bs[0]; ++o)
            for (int64_t j = 0; j < r; ++j) nb.at2(o, j) = a.B.val().at2(o, j);
        a.A = Var<T>(std::move(na), true);
        a.B = Var<T>(std::move(nb), true);
    }
}

}  // namespace detail_lora

// A frozen base generator plus trainable factor pairs on its crucial layers.
template <typename T>
struct AdaptedGenerator {
    Generator<T> base;
    AdapterSet<T> adapters;
    RankSpec spec;
    bool cross_attention = true;

    Var<T> forward(const Var<T>& x, const Var<T>& z, const Var<T>& c) const {
        return base.forward(x, z, c, &adapters, cross_attention);
    }
    Var<T> forward(const Tensor<T>& x, const Tensor<T>& z, const Tensor<T>& c) const {
        return base.forward(x, z, c, &adapters, cross_attention);
    }

    std::vector<Var<T>*> trainable_params() {
        std::vector<Var<T>*> out;
        for (auto& [id, a] : adapters.items) {
            out.push_back(&a.A);
            out.push_back(&a.B);
        }
        return out;
    }

    int64_t trainable_param_count() const {
        int64_t n = 0;
        for (const auto& [id, a] : adapters.items) n += a.A.val().numel() + a.B.val().numel();
        return n;
    }
};

// Attaches zero-delta adapters per the rank spec and freezes the base. The
// spec's key set must equal the crucial-layer set exactly.
template <typename T>
AdaptedGenerator<T> inject_lora(const Generator<T>& gen, const RankSpec& spec, uint64_t seed,
                                bool include_rb = false) {
    spec.validate();
    const auto descriptors = describe_layers(gen);
    const auto crucial = crucial_layer_ids(descriptors, include_rb);

    std::vector<std::string> missing, extra;
    for (const auto& id : crucial)
        if (!spec.ranks.count(id)) missing.push_back(id);
    {
        std::vector<std::string> sorted_crucial = crucial;
        std::sort(sorted_crucial.begin(), sorted_crucial.end());
        for (const auto& [id, r] : spec.ranks)
            if (!std::binary_search(sorted_crucial.begin(), sorted_crucial.end(), id))
                extra.push_back(id);
    }
    if (!missing.empty() || !extra.empty()) {
        std::ostringstream os;
        os << "rank spec does not match crucial layers;";
        if (!missing.empty()) {
            os << " missing:";
            for (const auto& id : missing) os << ' ' << id;
        }
        if (!extra.empty()) {
            os << " extra:";
            for (const auto& id : extra) os << ' ' << id;
        }
        throw InjectionError(os.str());
    }

    AdaptedGenerator<T> out;
    out.base = gen.clone();
    out.base.set_all_trainable(false);
    out.spec = spec;
    RandomEngine rng(seed);
    std::map<std::string, LayerDescriptor> by_id;
    for (const auto& d : descriptors) by_id[d.layer_id] = d;
    // Deterministic creation order: the crucial list order, not map order.
    for (const auto& id : crucial)
        out.adapters.items[id] =
            detail_lora::make_adapter<T>(by_id.at(id), spec.ranks.at(id), rng);
    return out;
}

// ---------------------------------------------------------------------------
// Merging: fold each adapter into a dense weight.
//   conv delta:  dW[a,b,u,v] = sum_j B[j,b] * A[a,j,u,v]   ([in,out,kh,kw])
//   linear delta: dW = B * A                               ([out,in])
// ---------------------------------------------------------------------------

template <typename T>
Generator<T> merge_lora(const AdaptedGenerator<T>& adapted) {
    Generator<T> merged = adapted.base.clone();
    merged.set_all_trainable(true);
    for (const auto& [id, a] : adapted.adapters.items) {
        auto info = merged.find_weight_layer(id);
        if (!info) throw InjectionError("merge: layer '" + id + "' not found in generator");
        Tensor<T>& w = info->weight->mutable_val();
        if (info->kind == LayerKind::conv || info->kind == LayerKind::transpose_conv) {
            const int64_t r = a.A.val().dim(1);
            for (int64_t i = 0; i < info->in; ++i)
                for (int64_t o = 0; o < info->out; ++o)
                    for (int64_t u = 0; u < info->kh; ++u)
                        for (int64_t vv = 0; vv < info->kw; ++vv) {
                            T acc = T(0);
                            for (int64_t j = 0; j < r; ++j)
                                acc += a.B.val().at4(j, o, 0, 0) * a.A.val().at4(i, j, u, vv);
                            w.at4(i, o, u, vv) += acc;
                        }
        } else {
            const int64_t r = a.A.val().dim(0);
            for (int64_t o = 0; o < info->out; ++o)
                for (int64_t i = 0; i < info->in; ++i) {
                    T acc = T(0);
                    for (int64_t j = 0; j < r; ++j)
                        acc += a.B.val().at2(o, j) * a.A.val().at2(j, i);
                    w.at2(o, i) += acc;
                }
        }
    }
    return merged;
}

}  // namespace e2gan
