#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "e2gan/ops.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class TbPosition { before_rb1, after_rb1, after_rb2, after_rb3 };
enum class TbSandwich { conv_transpose, pool_unpool };

inline const char* to_string(TbPosition p) {
    switch (p) {
        case TbPosition::before_rb1: return "before_rb1";
        case TbPosition::after_rb1: return "after_rb1";
        case TbPosition::after_rb2: return "after_rb2";
        case TbPosition::after_rb3: return "after_rb3";
    }
    return "?";
}

inline TbPosition tb_position_from_string(const std::string& s) {
    if (s == "before_rb1") return TbPosition::before_rb1;
    if (s == "after_rb1") return TbPosition::after_rb1;
    if (s == "after_rb2") return TbPosition::after_rb2;
    if (s == "after_rb3") return TbPosition::after_rb3;
    throw ConfigError("unknown tb_position '" + s + "'");
}

inline const char* to_string(TbSandwich s) {
    return s == TbSandwich::conv_transpose ? "conv_transpose" : "pool_unpool";
}

inline TbSandwich tb_sandwich_from_string(const std::string& s) {
    if (s == "conv_transpose") return TbSandwich::conv_transpose;
    if (s == "pool_unpool") return TbSandwich::pool_unpool;
    throw ConfigError("unknown tb_sandwich '" + s + "'");
}

struct GeneratorConfig {
    int base_channels = 64;
    int num_resnet_blocks = 3;
    int num_transformer_blocks = 1;
    TbPosition tb_position = TbPosition::after_rb2;
    TbSandwich tb_sandwich = TbSandwich::conv_transpose;
    int attention_dim = 256;
    int ffn_inner = 1024;
    int text_embed_dim = 768;
    int noise_dim = 64;
    bool use_cross_attention = true;
    int image_resolution = 256;

    // Number of ResNet blocks preceding the transformer block(s).
    int tb_position_index() const { return static_cast<int>(tb_position); }

    int bottleneck_channels() const { return 4 * base_channels; }

    void validate() const {
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
        if (num_resnet_blocks < 1) throw ConfigError("num_resnet_blocks must be >= 1");
        if (num_transformer_blocks < 0 || num_transformer_blocks > 2)
            throw ConfigError("num_transformer_blocks must be in {0, 1, 2}");
        if (tb_position_index() > num_resnet_blocks)
            throw ConfigError("tb_position index must be <= num_resnet_blocks");
        if (attention_dim != bottleneck_channels())
            throw ConfigError(
                "attention_dim must equal the bottleneck channel count (4 x base_channels)");
        if (ffn_inner < 1) throw ConfigError("ffn_inner must be >= 1");
        if (text_embed_dim < 1) throw ConfigError("text_embed_dim must be >= 1");
        if (noise_dim < 0) throw ConfigError("noise_dim must be >= 0");
        if (image_resolution < 8 || image_resolution % 8 != 0)
            throw ConfigError("image_resolution must be a positive multiple of 8");
        if (num_transformer_blocks > 0 && image_resolution % 16 != 0)
            throw ConfigError(
                "image_resolution must be a multiple of 16 when transformer blocks are present");
    }

    nlohmann::json to_json() const {
        return {{"base_channels", base_channels},
                {"num_resnet_blocks", num_resnet_blocks},
                {"num_transformer_blocks", num_transformer_blocks},
                {"tb_position", to_string(tb_position)},
                {"tb_sandwich", to_string(tb_sandwich)},
                {"attention_dim", attention_dim},
                {"ffn_inner", ffn_inner},
                {"text_embed_dim", text_embed_dim},
                {"noise_dim", noise_dim},
                {"use_cross_attention", use_cross_attention},
                {"image_resolution", image_resolution}};
    }

    static GeneratorConfig from_json(const nlohmann::json& j) {
        GeneratorConfig c;
        c.base_channels = j.at("base_channels").get<int>();
        c.num_resnet_blocks = j.at("num_resnet_blocks").get<int>();
        c.num_transformer_blocks = j.at("num_transformer_blocks").get<int>();
        c.tb_position = tb_position_from_string(j.at("tb_position").get<std::string>());
        c.tb_sandwich = tb_sandwich_from_string(j.at("tb_sandwich").get<std::string>());
        c.attention_dim = j.at("attention_dim").get<int>();
        c.ffn_inner = j.at("ffn_inner").get<int>();
        c.text_embed_dim = j.at("text_embed_dim").get<int>();
        c.noise_dim = j.at("noise_dim").get<int>();
        c.use_cross_attention = j.at("use_cross_attention").get<bool>();
        c.image_resolution = j.at("image_resolution").get<int>();
        return c;
    }

    bool operator==(const GeneratorConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Layer descriptors
// ---------------------------------------------------------------------------

enum class LayerKind { conv, transpose_conv, linear, norm, attention_proj };
enum class LayerGroup { SL, RB, TB, other };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::transpose_conv: return "transpose_conv";
        case LayerKind::linear: return "linear";
        case LayerKind::norm: return "norm";
        case LayerKind::attention_proj: return "attention_proj";
    }
    return "?";
}

inline const char* to_string(LayerGroup g) {
    switch (g) {
        case LayerGroup::SL: return "SL";
        case LayerGroup::RB: return "RB";
        case LayerGroup::TB: return "TB";
        case LayerGroup::other: return "other";
    }
    return "?";
}

inline LayerGroup layer_group_from_string(const std::string& s) {
    if (s == "SL") return LayerGroup::SL;
    if (s == "RB") return LayerGroup::RB;
    if (s == "TB") return LayerGroup::TB;
    if (s == "other") return LayerGroup::other;
    throw ConfigError("unknown layer group '" + s + "'");
}

struct LayerDescriptor {
    std::string layer_id;
    LayerKind kind = LayerKind::conv;
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    int64_t kh = 0;  // 0 means no kernel (linear / norm)
    int64_t kw = 0;
    int64_t stride = 1;
    LayerGroup group = LayerGroup::other;

    int64_t weight_param_count() const {
        switch (kind) {
            case LayerKind::conv:
            case LayerKind::transpose_conv: return in_channels * out_channels * kh * kw;
            case LayerKind::linear:
            case LayerKind::attention_proj: return in_channels * out_channels;
            case LayerKind::norm: return in_channels;  // gamma; beta counted separately
        }
        return 0;
    }

    // Weight + bias (or gamma + beta for norms).
    int64_t param_count() const {
        if (kind == LayerKind::norm) return 2 * in_channels;
        return weight_param_count() + out_channels;
    }
};

// ---------------------------------------------------------------------------
// Parameterized layers
// ---------------------------------------------------------------------------

namespace layers {

template <typename T>
struct Conv2d {
    std::string id;
    int64_t in_ch = 0, out_ch = 0, kh = 0, kw = 0, stride = 1, pad = 0;
    Var<T> w, b;

    void init(RandomEngine& rng, T stddev = T(0.02)) {
        w = Var<T>(Tensor<T>::randn({in_ch, out_ch, kh, kw}, rng, T(0), stddev), true);
        b = Var<T>(Tensor<T>::zeros({out_ch}), true);
    }
    LayerDescriptor describe(LayerGroup g) const {
        return {id, LayerKind::conv, in_ch, out_ch, kh, kw, stride, g};
    }
};

template <typename T>
struct ConvTranspose2d {
    std::string id;
    int64_t in_ch = 0, out_ch = 0, kh = 0, kw = 0, stride = 1, pad = 0, out_pad = 0;
    Var<T> w, b;

    void init(RandomEngine& rng, T stddev = T(0.02)) {
        w = Var<T>(Tensor<T>::randn({in_ch, out_ch, kh, kw}, rng, T(0), stddev), true);
        b = Var<T>(Tensor<T>::zeros({out_ch}), true);
    }
    LayerDescriptor describe(LayerGroup g) const {
        return {id, LayerKind::transpose_conv, in_ch, out_ch, kh, kw, stride, g};
    }
};

template <typename T>
struct Linear {
    std::string id;
    int64_t in = 0, out = 0;
    Var<T> w, b;  // w stored [out, in]

    void init(RandomEngine& rng, T stddev = T(0.02)) {
        w = Var<T>(Tensor<T>::randn({out, in}, rng, T(0), stddev), true);
        b = Var<T>(Tensor<T>::zeros({out}), true);
    }
    LayerDescriptor describe(LayerGroup g, LayerKind kind = LayerKind::linear) const {
        return {id, kind, in, out, 0, 0, 1, g};
    }
};

// Affine normalization parameters; spatial (instance) or token (layer) use.
template <typename T>
struct Norm {
    std::string id;
    int64_t ch = 0;
    Var<T> gamma, beta;

    void init() {
        gamma = Var<T>(Tensor<T>::full({ch}, T(1)), true);
        beta = Var<T>(Tensor<T>::zeros({ch}), true);
    }
    LayerDescriptor describe(LayerGroup g) const {
        return {id, LayerKind::norm, ch, ch, 0, 0, 1, g};
    }
};

}  // namespace layers

// ---------------------------------------------------------------------------
// LoRA adapter attachment points (factor pairs consumed by the forward pass;
// construction, merging and accounting live in lora.hpp)
// ---------------------------------------------------------------------------

template <typename T>
struct LoRAAdapter {
    std::string layer_id;
    // conv/transpose_conv: A [in, r, kh, kw], B [r, out, 1, 1]
    // linear:              A [r, in],         B [out, r]
    Var<T> A, B;

    int64_t rank() const {
        return A.val().rank() == 4 ? A.val().dim(1) : A.val().dim(0);
    }
};

template <typename T>
struct AdapterSet {
    std::map<std::string, LoRAAdapter<T>> items;

    const LoRAAdapter<T>* find(const std::string& id) const {
        auto it = items.find(id);
        return it == items.end() ? nullptr : &it->second;
    }
};

namespace layers {

// Forward helpers: base layer output plus, when an adapter is attached, the
// low-rank delta path sharing the base layer's geometry.

template <typename T>
Var<T> apply(const Conv2d<T>& L, const Var<T>& x, const AdapterSet<T>* ad) {
    Var<T> y = ops::conv2d(x, L.w, L.b, L.stride, L.pad);
    if (ad)
        if (const auto* d = ad->find(L.id)) {
            Var<T> t = ops::conv2d(x, d->A, Var<T>{}, L.stride, L.pad);
            y = ops::add(y, ops::conv2d(t, d->B, Var<T>{}, 1, 0));
        }
    return y;
}

template <typename T>
Var<T> apply(const ConvTranspose2d<T>& L, const Var<T>& x, const AdapterSet<T>* ad) {
    Var<T> y = ops::conv_transpose2d(x, L.w, L.b, L.stride, L.pad, L.out_pad);
    if (ad)
        if (const auto* d = ad->find(L.id)) {
            Var<T> t = ops::conv_transpose2d(x, d->A, Var<T>{}, L.stride, L.pad, L.out_pad);
            y = ops::add(y, ops::conv2d(t, d->B, Var<T>{}, 1, 0));
        }
    return y;
}

template <typename T>
Var<T> apply(const Linear<T>& L, const Var<T>& x, const AdapterSet<T>* ad) {
    Var<T> y = ops::linear(x, L.w, L.b);
    if (ad)
        if (const auto* d = ad->find(L.id)) {
            y = ops::add(y, ops::linear(ops::linear(x, d->A, Var<T>{}), d->B, Var<T>{}));
        }
    return y;
}

}  // namespace layers

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

template <typename T>
class Generator {
public:
    Generator() = default;
    Generator(const Generator&) = delete;
    Generator& operator=(const Generator&) = delete;
    Generator(Generator&&) = default;
    Generator& operator=(Generator&&) = default;

    struct ResBlock {
        layers::Conv2d<T> conv0, conv1;
        layers::Norm<T> norm0, norm1;
    };

    struct TransformerBlock {
        bool conv_sandwich = true;
        layers::Conv2d<T> halve;
        layers::Norm<T> halve_norm;
        layers::Norm<T> ln1;
        layers::Linear<T> q, k, v;
        bool has_text_proj = false;
        layers::Linear<T> text_proj;
        layers::Norm<T> ln2;
        layers::Linear<T> ff1, ff2;
        layers::ConvTranspose2d<T> restore;
        layers::Norm<T> restore_norm;
    };

    static Generator build(const GeneratorConfig& cfg, uint64_t seed) {
        cfg.validate();
        Generator g;
        g.cfg_ = cfg;
        RandomEngine rng(seed);
        const int64_t C = cfg.base_channels;
        const int64_t bott = cfg.bottleneck_channels();

        const int64_t down_out[4] = {C, 2 * C, 4 * C, bott};
        int64_t in = 3;
        for (int i = 0; i < 4; ++i) {
            layers::Conv2d<T> conv;
            conv.id = "down." + std::to_string(i);
            conv.in_ch = in;
            conv.out_ch = down_out[i];
            conv.kh = conv.kw = (i == 0) ? 7 : 3;
            conv.stride = (i == 0) ? 1 : 2;
            conv.pad = (i == 0) ? 3 : 1;
            conv.init(rng);
            layers::Norm<T> norm;
            norm.id = conv.id + ".norm";
            norm.ch = conv.out_ch;
            norm.init();
            in = conv.out_ch;
            g.down_.push_back(std::move(conv));
            g.down_norms_.push_back(std::move(norm));
        }

        if (cfg.noise_dim > 0) {
            layers::Linear<T> np;
            np.id = "noise_proj";
            np.in = cfg.noise_dim;
            np.out = bott;
            np.init(rng);
            g.noise_proj_ = std::move(np);
        }

        for (int i = 0; i < cfg.num_resnet_blocks; ++i) {
            ResBlock rb;
            const std::string base = "rb." + std::to_string(i);
            rb.conv0.id = base + ".conv0";
            rb.conv0.in_ch = rb.conv0.out_ch = bott;
            rb.conv0.kh = rb.conv0.kw = 3;
            rb.conv0.stride = 1;
            rb.conv0.pad = 1;
            rb.conv0.init(rng);
            rb.norm0.id = base + ".norm0";
            rb.norm0.ch = bott;
            rb.norm0.init();
            rb.conv1 = rb.conv0;
            rb.conv1.id = base + ".conv1";
            rb.conv1.init(rng);
            rb.norm1.id = base + ".norm1";
            rb.norm1.ch = bott;
            rb.norm1.init();
            g.rbs_.push_back(std::move(rb));
        }

        for (int i = 0; i < cfg.num_transformer_blocks; ++i) {
            TransformerBlock tb;
            const std::string base = "tb." + std::to_string(i);
            tb.conv_sandwich = cfg.tb_sandwich == TbSandwich::conv_transpose;
            if (tb.conv_sandwich) {
                tb.halve.id = base + ".halve";
                tb.halve.in_ch = tb.halve.out_ch = bott;
                tb.halve.kh = tb.halve.kw = 3;
                tb.halve.stride = 2;
                tb.halve.pad = 1;
                tb.halve.init(rng);
                tb.halve_norm.id = base + ".halve.norm";
                tb.halve_norm.ch = bott;
                tb.halve_norm.init();
            }
            tb.ln1.id = base + ".ln1";
            tb.ln1.ch = bott;
            tb.ln1.init();
            for (auto [proj, name] : {std::pair<layers::Linear<T>*, const char*>{&tb.q, "q"},
                                      {&tb.k, "k"},
                                      {&tb.v, "v"}}) {
                proj->id = base + ".attn." + name;
                proj->in = proj->out = bott;
                proj->init(rng);
            }
            if (cfg.use_cross_attention) {
                tb.has_text_proj = true;
                tb.text_proj.id = base + ".text_proj";
                tb.text_proj.in = cfg.text_embed_dim;
                tb.text_proj.out = bott;
                tb.text_proj.init(rng);
            }
            tb.ln2.id = base + ".ln2";
            tb.ln2.ch = bott;
            tb.ln2.init();
            tb.ff1.id = base + ".ff1";
            tb.ff1.in = bott;
            tb.ff1.out = 2 * cfg.ffn_inner;
            tb.ff1.init(rng);
            tb.ff2.id = base + ".ff2";
            tb.ff2.in = cfg.ffn_inner;
            tb.ff2.out = bott;
            tb.ff2.init(rng);
            if (tb.conv_sandwich) {
                tb.restore.id = base + ".restore";
                tb.restore.in_ch = tb.restore.out_ch = bott;
                tb.restore.kh = tb.restore.kw = 3;
                tb.restore.stride = 2;
                tb.restore.pad = 1;
                tb.restore.out_pad = 1;
                tb.restore.init(rng);
                tb.restore_norm.id = base + ".restore.norm";
                tb.restore_norm.ch = bott;
                tb.restore_norm.init();
            }
            g.tbs_.push_back(std::move(tb));
        }

        const int64_t up_out[4] = {bott, 2 * C, C, 3};
        in = bott;
        for (int i = 0; i < 3; ++i) {
            layers::ConvTranspose2d<T> up;
            up.id = "up." + std::to_string(i);
            up.in_ch = in;
            up.out_ch = up_out[i];
            up.kh = up.kw = 3;
            up.stride = 2;
            up.pad = 1;
            up.out_pad = 1;
            up.init(rng);
            layers::Norm<T> norm;
            norm.id = up.id + ".norm";
            norm.ch = up.out_ch;
            norm.init();
            in = up.out_ch;
            g.up_.push_back(std::move(up));
            g.up_norms_.push_back(std::move(norm));
        }
        g.out_conv_.id = "up.3";
        g.out_conv_.in_ch = C;
        g.out_conv_.out_ch = 3;
        g.out_conv_.kh = g.out_conv_.kw = 7;
        g.out_conv_.stride = 1;
        g.out_conv_.pad = 3;
        g.out_conv_.init(rng);
        return g;
    }

    const GeneratorConfig& config() const { return cfg_; }

    // x: [B,3,R,R] in [-1,1]; z: [B,noise_dim]; c: [B,text_embed_dim].
    // Output matches x's shape, tanh-bounded. `adapters` attaches low-rank
    // deltas by layer id; `cross_attention` can disable text conditioning at
    // call time (used by the corresponding training ablation).
    Var<T> forward(const Var<T>& x, const Var<T>& z, const Var<T>& c,
                   const AdapterSet<T>* adapters = nullptr,
                   bool cross_attention = true) const {
        check_inputs(x.val(), z.val(), c.val());
        Var<T> h = x;
        for (size_t i = 0; i < down_.size(); ++i) {
            h = layers::apply(down_[i], h, adapters);
            h = ops::instance_norm2d(h, down_norms_[i].gamma, down_norms_[i].beta);
            h = ops::relu(h);
        }
        if (noise_proj_) {
            Var<T> zn = layers::apply(*noise_proj_, z, adapters);
            h = ops::add_channel_vec(h, zn);
        }
        const int tb_at = cfg_.tb_position_index();
        for (int i = 0; i <= cfg_.num_resnet_blocks; ++i) {
            if (i == tb_at)
                for (const auto& tb : tbs_) h = forward_tb(tb, h, c, adapters, cross_attention);
            if (i < cfg_.num_resnet_blocks) h = forward_rb(rbs_[static_cast<size_t>(i)], h, adapters);
        }
        for (size_t i = 0; i < up_.size(); ++i) {
            h = layers::apply(up_[i], h, adapters);
            h = ops::instance_norm2d(h, up_norms_[i].gamma, up_norms_[i].beta);
            h = ops::relu(h);
        }
        h = layers::apply(out_conv_, h, adapters);
        return ops::tanh_act(h);
    }

    Var<T> forward(const Tensor<T>& x, const Tensor<T>& z, const Tensor<T>& c,
                   const AdapterSet<T>* adapters = nullptr, bool cross_attention = true) const {
        return forward(ops::constant(x), ops::constant(z), ops::constant(c), adapters,
                       cross_attention);
    }

    // Visits every parameter as (name, var); order is the forward order, so
    // enumeration, checkpoints and clones are all deterministic.
    template <typename Fn>
    void visit_params(Fn&& fn) {
        for (size_t i = 0; i < down_.size(); ++i) {
            visit_layer(down_[i], fn);
            visit_norm(down_norms_[i], fn);
        }
        if (noise_proj_) visit_layer(*noise_proj_, fn);
        const int tb_at = cfg_.tb_position_index();
        for (int i = 0; i <= cfg_.num_resnet_blocks; ++i) {
            if (i == tb_at)
                for (auto& tb : tbs_) visit_tb(tb, fn);
            if (i < cfg_.num_resnet_blocks) {
                auto& rb = rbs_[static_cast<size_t>(i)];
                visit_layer(rb.conv0, fn);
                visit_norm(rb.norm0, fn);
                visit_layer(rb.conv1, fn);
                visit_norm(rb.norm1, fn);
            }
        }
        for (size_t i = 0; i < up_.size(); ++i) {
            visit_layer(up_[i], fn);
            visit_norm(up_norms_[i], fn);
        }
        visit_layer(out_conv_, fn);
    }

    template <typename Fn>
    void visit_params(Fn&& fn) const {
        const_cast<Generator*>(this)->visit_params([&](const std::string& n, Var<T>& v) {
            fn(n, static_cast<const Var<T>&>(v));
        });
    }

    std::vector<Var<T>*> trainable_params() {
        std::vector<Var<T>*> out;
        visit_params([&](const std::string&, Var<T>& v) {
            if (v.requires_grad()) out.push_back(&v);
        });
        return out;
    }

    int64_t total_param_count() const {
        int64_t n = 0;
        visit_params([&](const std::string&, const Var<T>& v) { n += v.val().numel(); });
        return n;
    }

    void set_all_trainable(bool trainable) {
        visit_params([&](const std::string&, Var<T>& v) { v.set_requires_grad(trainable); });
    }

    std::map<std::string, Tensor<T>> state() const {
        std::map<std::string, Tensor<T>> s;
        visit_params([&](const std::string& n, const Var<T>& v) { s[n] = v.val(); });
        return s;
    }

    void load_state(const std::map<std::string, Tensor<T>>& s) {
        visit_params([&](const std::string& n, Var<T>& v) {
            auto it = s.find(n);
            if (it == s.end()) throw IntegrityError("missing tensor '" + n + "' in state");
            if (it->second.shape() != v.val().shape())
                throw ShapeError("tensor '" + n + "': expected " + v.val().shape_str() +
                                 ", got " + it->second.shape_str());
            v.mutable_val() = it->second;
        });
    }

    Generator clone() const {
        Generator g = build(cfg_, 0);
        g.load_state(state());
        return g;
    }

    std::vector<LayerDescriptor> describe() const {
        std::vector<LayerDescriptor> out;
        for (size_t i = 0; i < down_.size(); ++i) {
            out.push_back(down_[i].describe(LayerGroup::SL));
            out.push_back(down_norms_[i].describe(LayerGroup::other));
        }
        if (noise_proj_) out.push_back(noise_proj_->describe(LayerGroup::other));
        const int tb_at = cfg_.tb_position_index();
        for (int i = 0; i <= cfg_.num_resnet_blocks; ++i) {
            if (i == tb_at)
                for (const auto& tb : tbs_) describe_tb(tb, out);
            if (i < cfg_.num_resnet_blocks) {
                const auto& rb = rbs_[static_cast<size_t>(i)];
                out.push_back(rb.conv0.describe(LayerGroup::RB));
                out.push_back(rb.norm0.describe(LayerGroup::other));
                out.push_back(rb.conv1.describe(LayerGroup::RB));
                out.push_back(rb.norm1.describe(LayerGroup::other));
            }
        }
        for (size_t i = 0; i < up_.size(); ++i) {
            out.push_back(up_[i].describe(LayerGroup::SL));
            out.push_back(up_norms_[i].describe(LayerGroup::other));
        }
        out.push_back(out_conv_.describe(LayerGroup::SL));
        return out;
    }

    // Geometry lookup for LoRA construction and merging.
    struct LayerInfo {
        LayerKind kind;
        int64_t in = 0, out = 0, kh = 0, kw = 0;
        Var<T>* weight = nullptr;
    };

    std::optional<LayerInfo> find_weight_layer(const std::string& id) {
        std::optional<LayerInfo> res;
        auto probe_conv = [&](layers::Conv2d<T>& L) {
            if (L.id == id) res = LayerInfo{LayerKind::conv, L.in_ch, L.out_ch, L.kh, L.kw, &L.w};
        };
        auto probe_convt = [&](layers::ConvTranspose2d<T>& L) {
            if (L.id == id)
                res = LayerInfo{LayerKind::transpose_conv, L.in_ch, L.out_ch, L.kh, L.kw, &L.w};
        };
        auto probe_linear = [&](layers::Linear<T>& L) {
            if (L.id == id) res = LayerInfo{LayerKind::linear, L.in, L.out, 0, 0, &L.w};
        };
        for (auto& l : down_) probe_conv(l);
        if (noise_proj_) probe_linear(*noise_proj_);
        for (auto& rb : rbs_) {
            probe_conv(rb.conv0);
            probe_conv(rb.conv1);
        }
        for (auto& tb : tbs_) {
            if (tb.conv_sandwich) {
                probe_conv(tb.halve);
                probe_convt(tb.restore);
            }
            probe_linear(tb.q);
            probe_linear(tb.k);
            probe_linear(tb.v);
            if (tb.has_text_proj) probe_linear(tb.text_proj);
            probe_linear(tb.ff1);
            probe_linear(tb.ff2);
        }
        for (auto& l : up_) probe_convt(l);
        probe_conv(out_conv_);
        return res;
    }

private:
    void check_inputs(const Tensor<T>& x, const Tensor<T>& z, const Tensor<T>& c) const {
        if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.image_resolution ||
            x.dim(3) != cfg_.image_resolution)
            throw ShapeError("generator input: expected [B,3," +
                             std::to_string(cfg_.image_resolution) + "," +
                             std::to_string(cfg_.image_resolution) + "], got " + x.shape_str());
        if (cfg_.noise_dim > 0) {
            if (z.rank() != 2 || z.dim(0) != x.dim(0) || z.dim(1) != cfg_.noise_dim)
                throw ShapeError("noise: expected [" + std::to_string(x.dim(0)) + "," +
                                 std::to_string(cfg_.noise_dim) + "], got " + z.shape_str());
        }
        if (cfg_.use_cross_attention && !tbs_.empty()) {
            if (c.rank() != 2 || c.dim(0) != x.dim(0) || c.dim(1) != cfg_.text_embed_dim)
                throw ShapeError("text embedding: expected [" + std::to_string(x.dim(0)) + "," +
                                 std::to_string(cfg_.text_embed_dim) + "], got " + c.shape_str());
        }
    }

    Var<T> forward_rb(const ResBlock& rb, const Var<T>& h, const AdapterSet<T>* ad) const {
        Var<T> t = layers::apply(rb.conv0, h, ad);
        t = ops::instance_norm2d(t, rb.norm0.gamma, rb.norm0.beta);
        t = ops::relu(t);
        t = layers::apply(rb.conv1, t, ad);
        t = ops::instance_norm2d(t, rb.norm1.gamma, rb.norm1.beta);
        return ops::add(h, t);
    }

    Var<T> forward_tb(const TransformerBlock& tb, const Var<T>& h, const Var<T>& c,
                      const AdapterSet<T>* ad, bool cross_attention) const {
        const int64_t H = h.val().dim(2), W = h.val().dim(3);
        Var<T> s;
        std::shared_ptr<Tensor<int64_t>> pool_idx;
        if (tb.conv_sandwich) {
            s = layers::apply(tb.halve, h, ad);
            s = ops::instance_norm2d(s, tb.halve_norm.gamma, tb.halve_norm.beta);
            s = ops::relu(s);
        } else {
            s = ops::max_pool2x2(h, pool_idx);
        }
        const int64_t H2 = s.val().dim(2), W2 = s.val().dim(3);
        Var<T> tokens = ops::to_tokens(s);
        Var<T> t = ops::layer_norm_lastdim(tokens, tb.ln1.gamma, tb.ln1.beta);
        Var<T> q = layers::apply(tb.q, t, ad);
        Var<T> kv_src = t;
        if (tb.has_text_proj && cross_attention) {
            // The projected prompt embedding joins the key/value sequence as
            // one extra token; queries come from image tokens only.
            Var<T> tok = layers::apply(tb.text_proj, c, ad);
            tok = ops::reshape(tok, {c.val().dim(0), int64_t(1), tok.val().dim(1)});
            kv_src = ops::concat_rows(t, tok);
        }
        Var<T> k = layers::apply(tb.k, kv_src, ad);
        Var<T> v = layers::apply(tb.v, kv_src, ad);
        const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(cfg_.attention_dim));
        Var<T> scores = ops::scale(ops::bmm_nt(q, k), inv_sqrt_d);
        Var<T> ctx = ops::bmm(ops::softmax_lastdim(scores), v);
        tokens = ops::add(tokens, ctx);
        Var<T> f = ops::layer_norm_lastdim(tokens, tb.ln2.gamma, tb.ln2.beta);
        Var<T> ff = layers::apply(tb.ff1, f, ad);
        Var<T> value_half = ops::slice_last(ff, 0, cfg_.ffn_inner);
        Var<T> gate_half = ops::slice_last(ff, cfg_.ffn_inner, cfg_.ffn_inner);
        Var<T> gated = ops::mul(value_half, ops::silu(gate_half));
        tokens = ops::add(tokens, layers::apply(tb.ff2, gated, ad));
        Var<T> s2 = ops::from_tokens(tokens, H2, W2);
        if (tb.conv_sandwich) {
            Var<T> r = layers::apply(tb.restore, s2, ad);
            r = ops::instance_norm2d(r, tb.restore_norm.gamma, tb.restore_norm.beta);
            return ops::relu(r);
        }
        return ops::max_unpool2x2(s2, pool_idx, H, W);
    }

    template <typename Fn>
    static void visit_layer(layers::Conv2d<T>& l, Fn&& fn) {
        fn(l.id + ".w", l.w);
        fn(l.id + ".b", l.b);
    }
    template <typename Fn>
    static void visit_layer(layers::ConvTranspose2d<T>& l, Fn&& fn) {
        fn(l.id + ".w", l.w);
        fn(l.id + ".b", l.b);
    }
    template <typename Fn>
    static void visit_layer(layers::Linear<T>& l, Fn&& fn) {
        fn(l.id + ".w", l.w);
        fn(l.id + ".b", l.b);
    }
    template <typename Fn>
    static void visit_norm(layers::Norm<T>& l, Fn&& fn) {
        fn(l.id + ".gamma", l.gamma);
        fn(l.id + ".beta", l.beta);
    }

    template <typename Fn>
    static void visit_tb(TransformerBlock& tb, Fn&& fn) {
        if (tb.conv_sandwich) {
            visit_layer(tb.halve, fn);
            visit_norm(tb.halve_norm, fn);
        }
        visit_norm(tb.ln1, fn);
        visit_layer(tb.q, fn);
        visit_layer(tb.k, fn);
        visit_layer(tb.v, fn);
        if (tb.has_text_proj) visit_layer(tb.text_proj, fn);
        visit_norm(tb.ln2, fn);
        visit_layer(tb.ff1, fn);
        visit_layer(tb.ff2, fn);
        if (tb.conv_sandwich) {
            visit_layer(tb.restore, fn);
            visit_norm(tb.restore_norm, fn);
        }
    }

    static void describe_tb(const TransformerBlock& tb, std::vector<LayerDescriptor>& out) {
        if (tb.conv_sandwich) {
            out.push_back(tb.halve.describe(LayerGroup::other));
            out.push_back(tb.halve_norm.describe(LayerGroup::other));
        }
        out.push_back(tb.ln1.describe(LayerGroup::other));
        out.push_back(tb.q.describe(LayerGroup::TB, LayerKind::attention_proj));
        out.push_back(tb.k.describe(LayerGroup::TB, LayerKind::attention_proj));
        out.push_back(tb.v.describe(LayerGroup::TB, LayerKind::attention_proj));
        if (tb.has_text_proj) out.push_back(tb.text_proj.describe(LayerGroup::other));
        out.push_back(tb.ln2.describe(LayerGroup::other));
        out.push_back(tb.ff1.describe(LayerGroup::TB));
        out.push_back(tb.ff2.describe(LayerGroup::TB));
        if (tb.conv_sandwich) {
            out.push_back(tb.restore.describe(LayerGroup::other));
            out.push_back(tb.restore_norm.describe(LayerGroup::other));
        }
    }

    GeneratorConfig cfg_;
    std::vector<layers::Conv2d<T>> down_;
    std::vector<layers::Norm<T>> down_norms_;
    std::optional<layers::Linear<T>> noise_proj_;
    std::vector<ResBlock> rbs_;
    std::vector<TransformerBlock> tbs_;
    std::vector<layers::ConvTranspose2d<T>> up_;
    std::vector<layers::Norm<T>> up_norms_;
    layers::Conv2d<T> out_conv_;
};

template <typename T>
Generator<T> build_generator(const GeneratorConfig& cfg, uint64_t seed) {
    return Generator<T>::build(cfg, seed);
}

template <typename T>
std::vector<LayerDescriptor> describe_layers(const Generator<T>& gen) {
    return gen.describe();
}

// ---------------------------------------------------------------------------
// Conditional patch discriminator on channel-concatenated (source, candidate)
// pairs. Three stride-2 convs then two stride-1 convs; the logit grid has
// spatial extent resolution / 8.
// ---------------------------------------------------------------------------

template <typename T>
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const Discriminator&) = delete;
    Discriminator& operator=(const Discriminator&) = delete;
    Discriminator(Discriminator&&) = default;
    Discriminator& operator=(Discriminator&&) = default;

    static constexpr int kDownsampleFactor = 8;

    static Discriminator build(const GeneratorConfig& cfg, uint64_t seed) {
        if (cfg.image_resolution % kDownsampleFactor != 0)
            throw ConfigError("image_resolution must be divisible by 8 for the discriminator");
        Discriminator d;
        d.resolution_ = cfg.image_resolution;
        RandomEngine rng(seed);
        const int64_t C = cfg.base_channels;
        const int64_t chans[6] = {6, C, 2 * C, 4 * C, 8 * C, 1};
        for (int i = 0; i < 5; ++i) {
            layers::Conv2d<T> conv;
            conv.id = "disc." + std::to_string(i);
            conv.in_ch = chans[i];
            conv.out_ch = chans[i + 1];
            conv.kh = conv.kw = (i < 3) ? 4 : 3;
            conv.stride = (i < 3) ? 2 : 1;
            conv.pad = 1;
            conv.init(rng);
            d.convs_.push_back(std::move(conv));
            if (i >= 1 && i <= 3) {
                layers::Norm<T> norm;
                norm.id = "disc." + std::to_string(i) + ".norm";
                norm.ch = chans[i + 1];
                norm.init();
                d.norms_.push_back(std::move(norm));
            }
        }
        return d;
    }

    // source and candidate are [B,3,R,R]; output logits [B,1,R/8,R/8].
    Var<T> forward(const Var<T>& source, const Var<T>& candidate) const {
        require_same_shape(source.val(), candidate.val(), "discriminator inputs");
        if (source.val().rank() != 4 || source.val().dim(1) != 3 ||
            source.val().dim(2) != resolution_)
            throw ShapeError("discriminator input: expected [B,3," + std::to_string(resolution_) +
                             "," + std::to_string(resolution_) + "], got " +
                             source.val().shape_str());
        Var<T> h = ops::concat_channels(source, candidate);
        size_t norm_idx = 0;
        for (size_t i = 0; i < convs_.size(); ++i) {
            h = ops::conv2d(h, convs_[i].w, convs_[i].b, convs_[i].stride, convs_[i].pad);
            if (i + 1 == convs_.size()) break;  // raw logits
            if (i >= 1) {
                h = ops::instance_norm2d(h, norms_[norm_idx].gamma, norms_[norm_idx].beta);
                ++norm_idx;
            }
            h = ops::leaky_relu(h, T(0.2));
        }
        return h;
    }

    Var<T> forward(const Tensor<T>& source, const Tensor<T>& candidate) const {
        return forward(ops::constant(source), ops::constant(candidate));
    }

    template <typename Fn>
    void visit_params(Fn&& fn) {
        size_t norm_idx = 0;
        for (size_t i = 0; i < convs_.size(); ++i) {
            fn(convs_[i].id + ".w", convs_[i].w);
            fn(convs_[i].id + ".b", convs_[i].b);
            if (i >= 1 && i <= 3) {
                fn(norms_[norm_idx].id + ".gamma", norms_[norm_idx].gamma);
                fn(norms_[norm_idx].id + ".beta", norms_[norm_idx].beta);
                ++norm_idx;
            }
        }
    }

    template <typename Fn>
    void visit_params(Fn&& fn) const {
        const_cast<Discriminator*>(this)->visit_params([&](const std::string& n, Var<T>& v) {
            fn(n, static_cast<const Var<T>&>(v));
        });
    }

    std::vector<Var<T>*> trainable_params() {
        std::vector<Var<T>*> out;
        visit_params([&](const std::string&, Var<T>& v) {
            if (v.requires_grad()) out.push_back(&v);
        });
        return out;
    }

    int64_t total_param_count() const {
        int64_t n = 0;
        visit_params([&](const std::string&, const Var<T>& v) { n += v.val().numel(); });
        return n;
    }

    std::map<std::string, Tensor<T>> state() const {
        std::map<std::string, Tensor<T>> s;
        visit_params([&](const std::string& n, const Var<T>& v) { s[n] = v.val(); });
        return s;
    }

    void load_state(const std::map<std::string, Tensor<T>>& s) {
        visit_params([&](const std::string& n, Var<T>& v) {
            auto it = s.find(n);
            if (it == s.end()) throw IntegrityError("missing tensor '" + n + "' in state");
            if (it->second.shape() != v.val().shape())
                throw ShapeError("tensor '" + n + "': expected " + v.val().shape_str() +
                                 ", got " + it->second.shape_str());
            v.mutable_val() = it->second;
        });
    }

    std::vector<LayerDescriptor> describe() const {
        std::vector<LayerDescriptor> out;
        size_t norm_idx = 0;
        for (size_t i = 0; i < convs_.size(); ++i) {
            out.push_back(convs_[i].describe(LayerGroup::other));
            if (i >= 1 && i <= 3) {
                out.push_back(norms_[norm_idx].describe(LayerGroup::other));
                ++norm_idx;
            }
        }
        return out;
    }

    int resolution() const { return resolution_; }

private:
    int resolution_ = 0;
    std::vector<layers::Conv2d<T>> convs_;
    std::vector<layers::Norm<T>> norms_;
};

template <typename T>
Discriminator<T> build_discriminator(const GeneratorConfig& cfg, uint64_t seed) {
    return Discriminator<T>::build(cfg, seed);
}

template <typename T>
std::vector<LayerDescriptor> describe_layers(const Discriminator<T>& d) {
    return d.describe();
}

}  // namespace e2gan
