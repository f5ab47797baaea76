#pragma once

#include <cmath>
#include <set>

#include "e2gan/dataio.hpp"

namespace e2gan {

// ---------------------------------------------------------------------------
// Loss configuration and loss terms
// ---------------------------------------------------------------------------

enum class GanMode { bce_logits };

template <typename T>
struct LossConfig {
    T lambda_l1 = T(100);
    GanMode gan_mode = GanMode::bce_logits;

    void validate() const {
        if (lambda_l1 < T(0)) throw ConfigError("lambda_l1 must be >= 0");
    }
};

// Mean absolute difference over all elements.
template <typename T>
Var<T> l1_term(const Var<T>& generated, const Var<T>& target) {
    require_same_shape(generated.val(), target.val(), "l1_term");
    return ops::mean_all(ops::abs_op(ops::sub(generated, target)));
}

template <typename T>
T l1_term(const Tensor<T>& generated, const Tensor<T>& target) {
    require_same_shape(generated, target, "l1_term");
    T acc = T(0);
    for (int64_t i = 0; i < generated.numel(); ++i) acc += std::abs(generated[i] - target[i]);
    return acc / static_cast<T>(generated.numel());
}

// -mean log sigmoid(real) - mean log(1 - sigmoid(fake)); the discriminator
// minimizes this (the maximized objective with its sign flipped).
template <typename T>
Var<T> gan_loss_discriminator(const Var<T>& real_logits, const Var<T>& fake_logits) {
    require_same_shape(real_logits.val(), fake_logits.val(), "gan_loss_discriminator");
    Var<T> lr = ops::mean_all(ops::softplus(ops::neg(real_logits)));
    Var<T> lf = ops::mean_all(ops::softplus(fake_logits));
    return ops::add(lr, lf);
}

template <typename T>
T gan_loss_discriminator(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
    T acc = T(0);
    for (int64_t i = 0; i < real_logits.numel(); ++i)
        acc += ops::softplus_scalar(-real_logits[i]);
    T accf = T(0);
    for (int64_t i = 0; i < fake_logits.numel(); ++i) accf += ops::softplus_scalar(fake_logits[i]);
    return acc / static_cast<T>(real_logits.numel()) + accf / static_cast<T>(fake_logits.numel());
}

// Non-saturating generator objective: -mean log sigmoid(fake).
template <typename T>
Var<T> gan_loss_generator(const Var<T>& fake_logits) {
    return ops::mean_all(ops::softplus(ops::neg(fake_logits)));
}

template <typename T>
T gan_loss_generator(const Tensor<T>& fake_logits) {
    T acc = T(0);
    for (int64_t i = 0; i < fake_logits.numel(); ++i)
        acc += ops::softplus_scalar(-fake_logits[i]);
    return acc / static_cast<T>(fake_logits.numel());
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Var<T>*> params, double lr, double beta1 = 0.5, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto* p : params_) {
            m_.emplace_back(p->val().shape());
            v_.emplace_back(p->val().shape());
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    size_t param_count() const { return params_.size(); }

    // One Adam update over all managed parameters; returns the summed |delta|
    // applied, which is zero iff nothing moved.
    double step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        double applied = 0;
        for (size_t i = 0; i < params_.size(); ++i) {
            Var<T>* p = params_[i];
            if (!p->has_grad()) continue;
            const Tensor<T>& g = p->grad();
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            Tensor<T>& w = p->mutable_val();
            for (int64_t k = 0; k < g.numel(); ++k) {
                const double gk = static_cast<double>(g[k]);
                m[k] = static_cast<T>(beta1_ * m[k] + (1.0 - beta1_) * gk);
                v[k] = static_cast<T>(beta2_ * v[k] + (1.0 - beta2_) * gk * gk);
                const double mhat = static_cast<double>(m[k]) / bc1;
                const double vhat = static_cast<double>(v[k]) / bc2;
                const double delta = -lr_ * mhat / (std::sqrt(vhat) + eps_);
                w[k] = static_cast<T>(w[k] + delta);
                applied += std::abs(delta);
            }
        }
        return applied;
    }

private:
    std::vector<Var<T>*> params_;
    std::vector<Tensor<T>> m_, v_;
    double lr_ = 2e-4, beta1_ = 0.5, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
};

template <typename T>
double grad_l2_norm(const std::vector<Var<T>*>& params) {
    double acc = 0;
    for (auto* p : params)
        if (p->has_grad())
            for (int64_t i = 0; i < p->grad().numel(); ++i) {
                const double g = static_cast<double>(p->grad()[i]);
                acc += g * g;
            }
    return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

enum class TrainMode { base, finetune, autoencoder };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::base: return "base";
        case TrainMode::finetune: return "finetune";
        case TrainMode::autoencoder: return "autoencoder";
    }
    return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
    if (s == "base") return TrainMode::base;
    if (s == "finetune") return TrainMode::finetune;
    if (s == "autoencoder") return TrainMode::autoencoder;
    throw ConfigError("unknown train mode '" + s + "'");
}

struct TrainConfig {
    double lr = 2e-4;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    int epochs = 100;
    int batch_size = 4;
    uint64_t seed = 0;
    TrainMode mode = TrainMode::base;
    std::set<LayerGroup> freeze_groups;
    bool disable_cross_attention = false;

    void validate() const {
        if (lr <= 0) throw ConfigError("lr must be > 0");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

template <typename T>
struct Batch {
    Tensor<T> x;       // [B,3,R,R] sources
    Tensor<T> target;  // [B,3,R,R] edited references
    Tensor<T> c;       // [B,text_dim]
};

template <typename T>
Batch<T> assemble_batch(std::vector<ConceptRecord*> recs,
                        const std::vector<std::pair<int, int>>& items, int text_dim) {
    const int B = static_cast<int>(items.size());
    const int R = recs.at(0)->resolution;
    Batch<T> b;
    b.x = Tensor<T>({B, 3, R, R});
    b.target = Tensor<T>({B, 3, R, R});
    b.c = Tensor<T>({B, text_dim});
    for (int i = 0; i < B; ++i) {
        ConceptRecord* rec = recs.at(static_cast<size_t>(items[static_cast<size_t>(i)].first));
        const int s = items[static_cast<size_t>(i)].second;
        const auto& src = rec->sources[static_cast<size_t>(s)];
        const auto& ed = rec->edited[static_cast<size_t>(s)];
        const int64_t plane = 3ll * R * R;
        for (int64_t k = 0; k < plane; ++k) {
            b.x[i * plane + k] = static_cast<T>(src[k]);
            b.target[i * plane + k] = static_cast<T>(ed[k]);
        }
        const auto& emb = rec->embedding_for_dim(text_dim);
        for (int k = 0; k < text_dim; ++k) b.c.at2(i, k) = static_cast<T>(emb[static_cast<size_t>(k)]);
    }
    return b;
}

// Adapter-free view over a dense generator so the training loop can treat
// full models and LoRA-adapted models uniformly.
template <typename T>
struct TrainableGenerator {
    Generator<T>* gen = nullptr;
    bool cross_attention = true;

    Var<T> forward(const Var<T>& x, const Var<T>& z, const Var<T>& c) const {
        return gen->forward(x, z, c, nullptr, cross_attention);
    }
    Var<T> forward(const Tensor<T>& x, const Tensor<T>& z, const Tensor<T>& c) const {
        return gen->forward(x, z, c, nullptr, cross_attention);
    }
    std::vector<Var<T>*> trainable_params() { return gen->trainable_params(); }
};

// ---------------------------------------------------------------------------
// One alternating update
// ---------------------------------------------------------------------------

struct StepReport {
    double loss_d = 0;
    double loss_g = 0;
    double loss_g_gan = 0;
    double loss_l1 = 0;
    double grad_norm_g = 0;
    double grad_norm_d = 0;
    double param_delta_g = 0;
    double param_delta_d = 0;
};

template <typename T, typename GenLike>
StepReport training_step(GenLike& G, Discriminator<T>& D, const Batch<T>& batch,
                         const Tensor<T>& z, const LossConfig<T>& loss_cfg, Adam<T>& opt_g,
                         Adam<T>& opt_d) {
    StepReport rep;
    Var<T> x = ops::constant(batch.x);
    Var<T> target = ops::constant(batch.target);
    Var<T> cvar = ops::constant(batch.c);
    Var<T> zvar = ops::constant(z);

    // Discriminator phase: generator output detached.
    Var<T> fake = G.forward(x, zvar, cvar);
    Var<T> fake_det = ops::detach(fake);
    Var<T> real_logits = D.forward(x, target);
    Var<T> fake_logits = D.forward(x, fake_det);
    Var<T> loss_d = gan_loss_discriminator(real_logits, fake_logits);
    rep.loss_d = static_cast<double>(loss_d.val()[0]);
    opt_d.zero_grad();
    backward(loss_d);
    auto d_params = D.trainable_params();
    rep.grad_norm_d = grad_l2_norm(d_params);
    rep.param_delta_d = opt_d.step();

    // Generator phase against the updated discriminator.
    Var<T> fake_logits2 = D.forward(x, fake);
    Var<T> gan_g = gan_loss_generator(fake_logits2);
    Var<T> l1 = l1_term(fake, target);
    Var<T> loss_g = ops::add(gan_g, ops::scale(l1, loss_cfg.lambda_l1));
    rep.loss_g_gan = static_cast<double>(gan_g.val()[0]);
    rep.loss_l1 = static_cast<double>(l1.val()[0]);
    rep.loss_g = static_cast<double>(loss_g.val()[0]);
    opt_g.zero_grad();
    backward(loss_g);
    auto g_params = G.trainable_params();
    rep.grad_norm_g = grad_l2_norm(g_params);
    rep.param_delta_g = opt_g.step();
    // Backward through D left gradients on its parameters; drop them.
    opt_d.zero_grad();

    if (!std::isfinite(rep.loss_d) || !std::isfinite(rep.loss_g))
        throw TrainError("non-finite loss (d=" + std::to_string(rep.loss_d) +
                         ", g=" + std::to_string(rep.loss_g) + ", gan=" +
                         std::to_string(rep.loss_g_gan) + ", l1=" + std::to_string(rep.loss_l1) +
                         ")");
    return rep;
}

// ---------------------------------------------------------------------------
// Epoch-level drivers
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double loss_d = 0;
    double loss_g = 0;
    double loss_g_gan = 0;
    double loss_l1 = 0;
    double grad_norm_g = 0;
    double grad_norm_d = 0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},          {"loss_d", loss_d},
                {"loss_g", loss_g},        {"loss_g_gan", loss_g_gan},
                {"loss_l1", loss_l1},      {"grad_norm_g", grad_norm_g},
                {"grad_norm_d", grad_norm_d}};
    }
};

struct TrainResult {
    std::vector<EpochRecord> log;
    int64_t iteration_count = 0;
    int64_t trainable_params = 0;
};

inline void write_train_log(const std::string& path, const TrainResult& result) {
    std::string out;
    for (const auto& r : result.log) out += r.to_json().dump() + "\n";
    write_text_file_atomic(path, out);
}

namespace detail_train {

inline uint64_t derive_seed(uint64_t seed, const char* salt) {
    return fnv1a64(salt, std::strlen(salt), seed ^ 0x9E3779B97F4A7C15ull);
}

template <typename T, typename GenLike>
TrainResult gan_training_loop(GenLike& G, Discriminator<T>& D,
                              std::vector<ConceptRecord*> concepts, const TrainConfig& cfg,
                              const LossConfig<T>& loss_cfg, int text_dim, int noise_dim) {
    std::vector<std::pair<int, int>> items;
    for (size_t ci = 0; ci < concepts.size(); ++ci)
        for (int s : concepts[ci]->splits.train) items.emplace_back(static_cast<int>(ci), s);
    if (items.empty()) throw TrainError("empty training dataset");

    Adam<T> opt_g(G.trainable_params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    Adam<T> opt_d(D.trainable_params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    RandomEngine shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    RandomEngine z_rng(derive_seed(cfg.seed, "noise"));

    const int64_t iters_per_epoch =
        (static_cast<int64_t>(items.size()) + cfg.batch_size - 1) / cfg.batch_size;
    TrainResult result;
    result.iteration_count = iters_per_epoch * cfg.epochs;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(items);
        EpochRecord er;
        er.epoch = epoch;
        int64_t steps = 0;
        for (size_t off = 0; off < items.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t hi = std::min(items.size(), off + static_cast<size_t>(cfg.batch_size));
            std::vector<std::pair<int, int>> chunk(items.begin() + static_cast<std::ptrdiff_t>(off),
                                                   items.begin() + static_cast<std::ptrdiff_t>(hi));
            Batch<T> batch = assemble_batch<T>(concepts, chunk, text_dim);
            Tensor<T> z({static_cast<int64_t>(chunk.size()), noise_dim});
            for (auto& v : z.vec()) v = static_cast<T>(z_rng.normal());
            StepReport rep;
            try {
                rep = training_step(G, D, batch, z, loss_cfg, opt_g, opt_d);
            } catch (const TrainError& e) {
                throw TrainError("epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(steps) + ": " + e.what());
            }
            er.loss_d += rep.loss_d;
            er.loss_g += rep.loss_g;
            er.loss_g_gan += rep.loss_g_gan;
            er.loss_l1 += rep.loss_l1;
            er.grad_norm_g += rep.grad_norm_g;
            er.grad_norm_d += rep.grad_norm_d;
            ++steps;
        }
        const double inv = steps > 0 ? 1.0 / static_cast<double>(steps) : 0.0;
        er.loss_d *= inv;
        er.loss_g *= inv;
        er.loss_g_gan *= inv;
        er.loss_l1 *= inv;
        er.grad_norm_g *= inv;
        er.grad_norm_d *= inv;
        result.log.push_back(er);
    }
    return result;
}

template <typename T>
int64_t count_trainables(std::vector<Var<T>*> params) {
    int64_t n = 0;
    for (auto* p : params) n += p->val().numel();
    return n;
}

}  // namespace detail_train

// Structural part of the generator a layer belongs to, used by the
// group-freezing ablation. Unlike the descriptor group tags (which keep the
// crucial-layer set narrow), this partition covers whole blocks: sampling
// stacks with the bottleneck noise projection, ResNet blocks with their
// norms, and the complete transformer block including its sandwich and text
// projection. The three parts cover every generator parameter.
inline LayerGroup structural_group(const std::string& layer_id) {
    if (layer_id.rfind("rb.", 0) == 0) return LayerGroup::RB;
    if (layer_id.rfind("tb.", 0) == 0) return LayerGroup::TB;
    if (layer_id.rfind("down.", 0) == 0 || layer_id.rfind("up.", 0) == 0 ||
        layer_id == "noise_proj")
        return LayerGroup::SL;
    return LayerGroup::other;
}

// Marks every parameter inside the given structural parts as frozen.
template <typename T>
void freeze_layer_groups(Generator<T>& gen, const std::set<LayerGroup>& groups) {
    if (groups.empty()) return;
    gen.visit_params([&](const std::string& name, Var<T>& v) {
        const auto dot = name.rfind('.');
        const std::string layer_id = name.substr(0, dot);
        if (groups.count(structural_group(layer_id))) v.set_requires_grad(false);
    });
}

// Structural per-part parameter counts (the freezing-study bookkeeping).
template <typename T>
std::map<LayerGroup, int64_t> structural_param_counts(const Generator<T>& gen) {
    std::map<LayerGroup, int64_t> counts{{LayerGroup::SL, 0},
                                         {LayerGroup::RB, 0},
                                         {LayerGroup::TB, 0},
                                         {LayerGroup::other, 0}};
    gen.visit_params([&](const std::string& name, const Var<T>& v) {
        const auto dot = name.rfind('.');
        counts[structural_group(name.substr(0, dot))] += v.val().numel();
    });
    return counts;
}

template <typename T>
struct TrainOutput {
    Checkpoint checkpoint;
    TrainResult result;
};

// Base-model training over a shuffled union of all concepts' train pairs;
// every sample carries its own concept embedding.
template <typename T>
TrainOutput<T> train_base(std::vector<ConceptRecord*> concepts, const GeneratorConfig& gen_cfg,
                          const TrainConfig& train_cfg, const LossConfig<T>& loss_cfg) {
    gen_cfg.validate();
    train_cfg.validate();
    loss_cfg.validate();
    if (concepts.empty()) throw TrainError("train_base: no concepts given");
    Generator<T> G = build_generator<T>(gen_cfg, train_cfg.seed);
    Discriminator<T> D = build_discriminator<T>(gen_cfg, train_cfg.seed + 1);
    freeze_layer_groups(G, train_cfg.freeze_groups);
    TrainableGenerator<T> view{&G, !train_cfg.disable_cross_attention};
    TrainOutput<T> out;
    out.result = detail_train::gan_training_loop(view, D, concepts, train_cfg, loss_cfg,
                                                 gen_cfg.text_embed_dim, gen_cfg.noise_dim);
    out.result.trainable_params = detail_train::count_trainables(G.trainable_params());
    out.checkpoint = make_base_checkpoint(G, &D);
    return out;
}

// LoRA fine-tuning to a new concept: base weights frozen, adapters plus a
// freshly initialized discriminator are trained; the returned delta holds
// only the factor tensors, the rank spec and the prompt.
template <typename T>
TrainOutput<T> finetune_concept(const Checkpoint& base, ConceptRecord& concept_rec,
                                const RankSpec& spec, const TrainConfig& train_cfg,
                                const LossConfig<T>& loss_cfg) {
    train_cfg.validate();
    loss_cfg.validate();
    Generator<T> gen = generator_from_checkpoint<T>(base);
    const GeneratorConfig& cfg = gen.config();
    AdaptedGenerator<T> adapted = inject_lora(gen, spec, train_cfg.seed);
    adapted.cross_attention = !train_cfg.disable_cross_attention;
    Discriminator<T> D = build_discriminator<T>(cfg, train_cfg.seed + 1);
    TrainOutput<T> out;
    out.result = detail_train::gan_training_loop(adapted, D, {&concept_rec}, train_cfg, loss_cfg,
                                                 cfg.text_embed_dim, cfg.noise_dim);
    out.result.trainable_params = adapted.trainable_param_count();
    out.checkpoint = make_delta_checkpoint(adapted, concept_rec.prompt);
    return out;
}

template <typename T>
struct FreezeAblationOutput {
    Checkpoint checkpoint;
    TrainResult result;
    std::map<LayerGroup, int64_t> group_param_counts;
};

// Fine-tunes everything except the named group, the per-part freezing study.
template <typename T>
FreezeAblationOutput<T> freeze_groups_ablation(const Checkpoint& base, ConceptRecord& concept_rec,
                                               LayerGroup group, const TrainConfig& train_cfg,
                                               const LossConfig<T>& loss_cfg) {
    train_cfg.validate();
    Generator<T> G = generator_from_checkpoint<T>(base);
    const GeneratorConfig cfg = G.config();
    freeze_layer_groups(G, {group});
    Discriminator<T> D = checkpoint_has_discriminator(base)
                             ? discriminator_from_checkpoint<T>(base)
                             : build_discriminator<T>(cfg, train_cfg.seed + 1);
    TrainableGenerator<T> view{&G, !train_cfg.disable_cross_attention};
    FreezeAblationOutput<T> out;
    out.result = detail_train::gan_training_loop(view, D, {&concept_rec}, train_cfg, loss_cfg,
                                                 cfg.text_embed_dim, cfg.noise_dim);
    out.result.trainable_params = detail_train::count_trainables(G.trainable_params());
    out.group_param_counts = structural_param_counts(G);
    out.checkpoint = make_base_checkpoint(G, &D);
    return out;
}

// Reconstruction pretraining: generator alone, L1 only, zero noise and a
// zero text embedding; the checkpoint contains no discriminator.
template <typename T>
TrainOutput<T> pretrain_autoencoder(const std::vector<Tensor<float>>& images,
                                    const GeneratorConfig& gen_cfg,
                                    const TrainConfig& train_cfg) {
    gen_cfg.validate();
    train_cfg.validate();
    if (images.empty()) throw TrainError("pretrain_autoencoder: no images");
    Generator<T> G = build_generator<T>(gen_cfg, train_cfg.seed);
    Adam<T> opt(G.trainable_params(), train_cfg.lr, train_cfg.adam_beta1, train_cfg.adam_beta2);
    RandomEngine shuffle_rng(detail_train::derive_seed(train_cfg.seed, "shuffle"));
    std::vector<int> order(images.size());
    for (size_t i = 0; i < images.size(); ++i) order[i] = static_cast<int>(i);

    const int64_t iters_per_epoch =
        (static_cast<int64_t>(images.size()) + train_cfg.batch_size - 1) / train_cfg.batch_size;
    TrainOutput<T> out;
    out.result.iteration_count = iters_per_epoch * train_cfg.epochs;
    const int R = gen_cfg.image_resolution;

    for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        EpochRecord er;
        er.epoch = epoch;
        int64_t steps = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(train_cfg.batch_size)) {
            const size_t hi =
                std::min(order.size(), off + static_cast<size_t>(train_cfg.batch_size));
            const int B = static_cast<int>(hi - off);
            Tensor<T> x({B, 3, R, R});
            const int64_t plane = 3ll * R * R;
            for (int i = 0; i < B; ++i) {
                const auto& img = images[static_cast<size_t>(order[off + static_cast<size_t>(i)])];
                for (int64_t k = 0; k < plane; ++k) x[i * plane + k] = static_cast<T>(img[k]);
            }
            Tensor<T> z({B, gen_cfg.noise_dim});
            Tensor<T> c({B, gen_cfg.text_embed_dim});
            Var<T> xv = ops::constant(x);
            Var<T> recon = G.forward(xv, ops::constant(z), ops::constant(c));
            Var<T> loss = l1_term(recon, xv);
            opt.zero_grad();
            backward(loss);
            er.grad_norm_g += grad_l2_norm(G.trainable_params());
            opt.step();
            const double lv = static_cast<double>(loss.val()[0]);
            if (!std::isfinite(lv))
                throw TrainError("autoencoder: non-finite loss at epoch " + std::to_string(epoch));
            er.loss_l1 += lv;
            er.loss_g += lv;
            ++steps;
        }
        const double inv = steps > 0 ? 1.0 / static_cast<double>(steps) : 0.0;
        er.loss_l1 *= inv;
        er.loss_g *= inv;
        er.grad_norm_g *= inv;
        out.result.log.push_back(er);
    }
    out.result.trainable_params = detail_train::count_trainables(G.trainable_params());
    out.checkpoint = make_base_checkpoint<T>(G, nullptr);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers (zero-noise deterministic forward)
// ---------------------------------------------------------------------------

template <typename T, typename GenLike>
Tensor<T> eval_forward(const GenLike& G, const Tensor<T>& x, const Tensor<T>& c, int noise_dim) {
    NoGradGuard ng;
    Tensor<T> z({x.dim(0), noise_dim});
    return G.forward(ops::constant(x), ops::constant(z), ops::constant(c)).val();
}

// Mean L1 between generated and reference images over a split, plus the
// per-image values; evaluation uses zero noise for determinism.
template <typename T, typename GenLike>
double mean_l1_on_split(const GenLike& G, ConceptRecord& rec, const std::vector<int>& indices,
                        int text_dim, int noise_dim, std::vector<double>* per_image = nullptr) {
    if (indices.empty()) throw TrainError("evaluation split is empty");
    double acc = 0;
    const auto& emb = rec.embedding_for_dim(text_dim);
    for (int idx : indices) {
        const auto& src = rec.sources[static_cast<size_t>(idx)];
        const auto& ed = rec.edited[static_cast<size_t>(idx)];
        Tensor<T> x({1, 3, src.dim(1), src.dim(2)});
        Tensor<T> tgt({1, 3, ed.dim(1), ed.dim(2)});
        for (int64_t k = 0; k < src.numel(); ++k) {
            x[k] = static_cast<T>(src[k]);
            tgt[k] = static_cast<T>(ed[k]);
        }
        Tensor<T> c({1, text_dim});
        for (int k = 0; k < text_dim; ++k) c[k] = static_cast<T>(emb[static_cast<size_t>(k)]);
        const Tensor<T> gen = eval_forward(G, x, c, noise_dim);
        const double v = static_cast<double>(l1_term(gen, tgt));
        if (per_image) per_image->push_back(v);
        acc += v;
    }
    return acc / static_cast<double>(indices.size());
}

// Generates outputs for a split as [3,H,W] float images.
template <typename T, typename GenLike>
std::vector<Tensor<float>> generate_on_split(const GenLike& G, ConceptRecord& rec,
                                             const std::vector<int>& indices, int text_dim,
                                             int noise_dim) {
    std::vector<Tensor<float>> out;
    const auto& emb = rec.embedding_for_dim(text_dim);
    for (int idx : indices) {
        const auto& src = rec.sources[static_cast<size_t>(idx)];
        Tensor<T> x({1, 3, src.dim(1), src.dim(2)});
        for (int64_t k = 0; k < src.numel(); ++k) x[k] = static_cast<T>(src[k]);
        Tensor<T> c({1, text_dim});
        for (int k = 0; k < text_dim; ++k) c[k] = static_cast<T>(emb[static_cast<size_t>(k)]);
        Tensor<T> y = eval_forward(G, x, c, noise_dim);
        out.push_back(y.reshaped({3, src.dim(1), src.dim(2)}).template cast<float>());
    }
    return out;
}

}  // namespace e2gan
