#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdprune/archive.hpp"
#include "mdprune/autodiff.hpp"
#include "mdprune/corpus.hpp"
#include "mdprune/random.hpp"
#include "mdprune/saliency.hpp"

namespace mdprune {

enum class LayerRole { Query, Key, Value, Output, Up, Down };

inline constexpr std::size_t kLayersPerBlock = 6;

inline const char* role_name(LayerRole r) {
    constexpr std::array names{"q", "k", "v", "o", "up", "down"};
    return names[static_cast<std::size_t>(r)];
}

inline bool is_attention(LayerRole r) { return r == LayerRole::Query || r == LayerRole::Key || r == LayerRole::Value || r == LayerRole::Output; }

struct ToyModelConfig {
    std::size_t depth = 2;
    std::size_t width = 16;
    std::size_t mlp_width = 64;
    std::size_t vocab = kAlphabetSize;
    std::size_t context = 16;
    std::uint64_t seed = 1;

    void validate() const {
        if (depth == 0 || width == 0 || mlp_width == 0 || vocab == 0 || context == 0)
            throw std::invalid_argument("toy model depth, width, mlp_width, vocab and context must be positive");
    }

    nlohmann::json to_json() const {
        return {{"depth", depth}, {"width", width}, {"mlp_width", mlp_width},
                {"vocab", vocab}, {"context", context}, {"seed", seed}};
    }
    static ToyModelConfig from_json(const nlohmann::json& j) {
        ToyModelConfig c;
        c.depth = j.at("depth");
        c.width = j.at("width");
        c.mlp_width = j.at("mlp_width");
        c.vocab = j.at("vocab");
        c.context = j.at("context");
        c.seed = j.at("seed");
        return c;
    }
};

/// A linear layer under pruning. `w0` is frozen at construction; the search
/// evolves `weight` (W), `gamma` (saliency) and `dual` (accumulator V).
class PrunableLayer {
 public:
    PrunableLayer(std::string name, LayerRole role, std::size_t block, Tensor w0)
        : name_(std::move(name)), role_(role), block_(block), w0_(std::move(w0)),
          weight(w0_), gamma(w0_.shape()), dual(w0_.shape()) {}

    const std::string& name() const noexcept { return name_; }
    LayerRole role() const noexcept { return role_; }
    std::size_t block() const noexcept { return block_; }
    const Tensor& w0() const noexcept { return w0_; }
    std::size_t in_features() const { return w0_.cols(); }
    std::size_t out_features() const { return w0_.rows(); }

    /// Back to W = W0, Gamma = 0, V = 0.
    void reset_search_state() {
        weight = w0_;
        gamma = Tensor(w0_.shape());
        dual = Tensor(w0_.shape());
    }

 private:
    std::string name_;
    LayerRole role_;
    std::size_t block_;
    Tensor w0_;

 public:
    Tensor weight;
    Tensor gamma;
    Tensor dual;
    ActivationStats stats;
    ActivationStats sampled_stats;
};

/// All parameters of the toy model as plain tensors; linears are in layer order.
struct DenseWeights {
    Tensor embed;    // vocab x width
    Tensor pos;      // context x width
    Tensor unembed;  // width x vocab
    std::vector<Tensor> linears;
};

inline std::string layer_name(std::size_t block, LayerRole role) {
    return "block" + std::to_string(block) + "." + role_name(role);
}

inline Shape layer_shape(const ToyModelConfig& c, LayerRole role) {
    if (role == LayerRole::Up) return {c.mlp_width, c.width};
    if (role == LayerRole::Down) return {c.width, c.mlp_width};
    return {c.width, c.width};
}

inline DenseWeights random_weights(const ToyModelConfig& c) {
    c.validate();
    Rng rng(c.seed);
    DenseWeights w;
    w.embed = rng.normal_tensor({c.vocab, c.width}, 1.0);
    w.pos = rng.normal_tensor({c.context, c.width}, 0.5);
    w.unembed = rng.normal_tensor({c.width, c.vocab}, 1.0 / std::sqrt(double(c.width)));
    for (std::size_t b = 0; b < c.depth; ++b)
        for (std::size_t r = 0; r < kLayersPerBlock; ++r) {
            const Shape s = layer_shape(c, static_cast<LayerRole>(r));
            w.linears.push_back(rng.normal_tensor(s, 1.0 / std::sqrt(double(s[1]))));
        }
    return w;
}

/// Tape handles for every parameter in a forward pass.
struct ModelVars {
    Var embed, pos, unembed;
    std::vector<Var> linears;
};

/// Receives the input matrix (rows = tokens) of each prunable layer.
using ActivationObserver = std::function<void(std::size_t layer, const Tensor& input)>;

class ToyModel {
 public:
    static ToyModel build(const ToyModelConfig& config) { return from_weights(config, random_weights(config)); }

    static ToyModel from_weights(const ToyModelConfig& config, DenseWeights w) {
        config.validate();
        ToyModel m;
        m.config_ = config;
        if (w.linears.size() != config.depth * kLayersPerBlock)
            throw std::invalid_argument("expected " + std::to_string(config.depth * kLayersPerBlock) + " linear layers");
        if (w.embed.shape() != Shape{config.vocab, config.width}) throw ShapeError("embed", w.embed.shape(), Shape{config.vocab, config.width});
        if (w.pos.shape() != Shape{config.context, config.width}) throw ShapeError("pos", w.pos.shape(), Shape{config.context, config.width});
        if (w.unembed.shape() != Shape{config.width, config.vocab}) throw ShapeError("unembed", w.unembed.shape(), Shape{config.width, config.vocab});
        m.embed_ = std::move(w.embed);
        m.pos_ = std::move(w.pos);
        m.unembed_ = std::move(w.unembed);
        for (std::size_t b = 0; b < config.depth; ++b)
            for (std::size_t r = 0; r < kLayersPerBlock; ++r) {
                const auto role = static_cast<LayerRole>(r);
                Tensor& lw = w.linears[b * kLayersPerBlock + r];
                if (lw.shape() != layer_shape(config, role)) throw ShapeError(layer_name(b, role), lw.shape(), layer_shape(config, role));
                m.layers_.emplace_back(layer_name(b, role), role, b, std::move(lw));
            }
        return m;
    }

    const ToyModelConfig& config() const noexcept { return config_; }
    std::vector<PrunableLayer>& layers() noexcept { return layers_; }
    const std::vector<PrunableLayer>& layers() const noexcept { return layers_; }
    const Tensor& embedding() const noexcept { return embed_; }
    const Tensor& position() const noexcept { return pos_; }
    const Tensor& unembedding() const noexcept { return unembed_; }

    std::vector<Tensor> frozen_weights() const {
        std::vector<Tensor> out;
        for (const auto& l : layers_) out.push_back(l.w0());
        return out;
    }
    std::vector<Tensor> trainable_weights() const {
        std::vector<Tensor> out;
        for (const auto& l : layers_) out.push_back(l.weight);
        return out;
    }
    DenseWeights dense_weights() const { return {embed_, pos_, unembed_, frozen_weights()}; }

    std::size_t prunable_parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += l.w0().size();
        return n;
    }

    /// Checkpoint: embeddings plus W0 of every layer, with a manifest of names
    /// and shapes in the archive metadata.
    TensorArchive to_archive() const {
        TensorArchive ar;
        ar.add("embed", embed_);
        ar.add("pos", pos_);
        ar.add("unembed", unembed_);
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : layers_) {
            ar.add(l.name(), l.w0());
            layers.push_back({{"name", l.name()}, {"role", role_name(l.role())}, {"block", l.block()}, {"shape", l.w0().shape()}});
        }
        ar.metadata()["kind"] = "toy-model";
        ar.metadata()["config"] = config_.to_json();
        ar.metadata()["layers"] = layers;
        return ar;
    }

    static ToyModel from_archive(const TensorArchive& ar) {
        const auto config = ToyModelConfig::from_json(ar.metadata().at("config"));
        DenseWeights w{ar.get("embed"), ar.get("pos"), ar.get("unembed"), {}};
        for (std::size_t b = 0; b < config.depth; ++b)
            for (std::size_t r = 0; r < kLayersPerBlock; ++r) w.linears.push_back(ar.get(layer_name(b, static_cast<LayerRole>(r))));
        return from_weights(config, std::move(w));
    }

 private:
    ToyModelConfig config_;
    Tensor embed_, pos_, unembed_;
    std::vector<PrunableLayer> layers_;
};

/// Flattened inputs and next-token targets of a batch.
struct TokenRows {
    std::vector<std::size_t> inputs, positions, targets;
    std::size_t segment = 0;  // tokens per sequence
};

inline TokenRows token_rows(const CalibrationSet& batch) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    batch.validate();
    TokenRows rows;
    rows.segment = batch.sequence_length() - 1;
    for (const auto& s : batch.sequences)
        for (std::size_t t = 0; t + 1 < s.size(); ++t) {
            rows.inputs.push_back(s[t]);
            rows.positions.push_back(t);
            rows.targets.push_back(s[t + 1]);
        }
    return rows;
}

/// y = x W^T
inline Var linear(Var x, Var w) { return matmul(x, transpose(w)); }

/// Logits (tokens x vocab). Attention is single-head scaled dot-product,
/// causal within each sequence; no layer norm, no biases.
inline Var forward_logits(const ToyModelConfig& c, const ModelVars& v, const TokenRows& rows,
                          const ActivationObserver& observe = {}) {
    if (rows.segment > c.context) throw std::invalid_argument("sequence longer than model context");
    Var h = gather_rows(v.embed, rows.inputs) + gather_rows(v.pos, rows.positions);
    const double attn_scale = 1.0 / std::sqrt(double(c.width));
    auto note = [&](std::size_t layer, Var x) {
        if (observe) observe(layer, x.value());
    };
    for (std::size_t b = 0; b < c.depth; ++b) {
        const std::size_t base = b * kLayersPerBlock;
        for (std::size_t r = 0; r < 3; ++r) note(base + r, h);
        Var q = linear(h, v.linears[base + 0]);
        Var k = linear(h, v.linears[base + 1]);
        Var val = linear(h, v.linears[base + 2]);
        Var att = row_softmax(attn_scale * matmul(q, transpose(k)), rows.segment);
        Var mixed = matmul(att, val);
        note(base + 3, mixed);
        h = h + linear(mixed, v.linears[base + 3]);
        note(base + 4, h);
        Var up = relu(linear(h, v.linears[base + 4]));
        note(base + 5, up);
        h = h + linear(up, v.linears[base + 5]);
    }
    return matmul(h, v.unembed);
}

struct LossAndGrad {
    double loss = 0.0;
    std::vector<Tensor> grads;  // one per prunable layer
};

/// Mean next-token cross-entropy with the given prunable weights; embeddings
/// are held constant. Sequences are processed in chunks so the attention
/// matrices stay small; the result equals the full-batch mean.
inline LossAndGrad task_loss_and_grad(const ToyModel& model, std::span<const Tensor> linears, const CalibrationSet& batch,
                                      bool with_grad = true, std::size_t chunk = 8) {
    if (linears.size() != model.layers().size())
        throw std::invalid_argument("expected one weight tensor per prunable layer");
    if (batch.empty()) throw std::invalid_argument("empty batch");
    const double total_rows = double(batch.row_count());
    LossAndGrad out;
    if (with_grad)
        for (const auto& w : linears) out.grads.emplace_back(w.shape());
    for (std::size_t s = 0; s < batch.size(); s += chunk) {
        const TokenRows rows = token_rows(batch.subset(s, s + chunk));
        const double weight = double(rows.targets.size()) / total_rows;
        Tape tape;
        ModelVars v{tape.constant(model.embedding()), tape.constant(model.position()), tape.constant(model.unembedding()), {}};
        for (const auto& w : linears) v.linears.push_back(with_grad ? tape.leaf(w) : tape.constant(w));
        Var loss = cross_entropy_with_logits(forward_logits(model.config(), v, rows), rows.targets);
        out.loss += weight * loss.value().item();
        if (with_grad) {
            const Gradients g = tape.backward(loss);
            for (std::size_t i = 0; i < v.linears.size(); ++i) {
                const Tensor& gi = g[v.linears[i]];
                for (std::size_t k = 0; k < gi.size(); ++k) out.grads[i][k] += weight * gi[k];
            }
        }
    }
    return out;
}

inline double task_loss(const ToyModel& model, std::span<const Tensor> linears, const CalibrationSet& batch) {
    return task_loss_and_grad(model, linears, batch, false).loss;
}

/// Sum of per-token negative log-likelihoods and the token count, processed in
/// chunks of sequences.
inline std::pair<double, std::size_t> total_nll(const ToyModel& model, std::span<const Tensor> linears,
                                                const CalibrationSet& data, std::size_t chunk = 8) {
    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < data.size(); s += chunk) {
        const CalibrationSet part = data.subset(s, s + chunk);
        const TokenRows rows = token_rows(part);
        Tape tape;
        ModelVars v{tape.constant(model.embedding()), tape.constant(model.position()), tape.constant(model.unembedding()), {}};
        for (const auto& w : linears) v.linears.push_back(tape.constant(w));
        Var logits = forward_logits(model.config(), v, rows);
        for (double x : kernels::row_nll(logits.value(), rows.targets)) nll += x;
        count += rows.targets.size();
    }
    return {nll, count};
}

/// One pass over the calibration set with W = W0, returning per-layer input
/// column norms. With `sample`, only a seeded fraction of token rows counts and
/// the norms are rescaled to estimate the full-set values.
inline std::vector<ActivationStats> collect_activation_stats(const ToyModel& model, const CalibrationSet& calib,
                                                             const std::optional<RowSample>& sample = std::nullopt,
                                                             std::size_t chunk = 8) {
    if (calib.empty()) throw std::invalid_argument("calibration set is empty");
    calib.validate();
    const auto& layers = model.layers();
    std::vector<char> plan;
    if (sample) plan = select_rows(calib.row_count(), *sample);
    std::vector<ActivationAccumulator> acc;
    for (const auto& l : layers) acc.emplace_back(l.in_features(), plan);

    const auto w0 = model.frozen_weights();
    for (std::size_t s = 0; s < calib.size(); s += chunk) {
        const TokenRows rows = token_rows(calib.subset(s, s + chunk));
        Tape tape;
        ModelVars v{tape.constant(model.embedding()), tape.constant(model.position()), tape.constant(model.unembedding()), {}};
        for (const auto& w : w0) v.linears.push_back(tape.constant(w));
        forward_logits(model.config(), v, rows, [&](std::size_t layer, const Tensor& x) { acc[layer].add_rows(x); });
    }
    std::vector<ActivationStats> out;
    for (const auto& a : acc) out.push_back(sample ? a.finish(*sample) : a.finish());
    return out;
}

/// Fills layer.stats (and layer.sampled_stats when a sample is given).
inline void attach_activation_stats(ToyModel& model, const CalibrationSet& calib, const std::optional<RowSample>& sample = std::nullopt) {
    auto full = collect_activation_stats(model, calib);
    for (std::size_t i = 0; i < full.size(); ++i) model.layers()[i].stats = std::move(full[i]);
    if (sample) {
        auto sub = collect_activation_stats(model, calib, sample);
        for (std::size_t i = 0; i < sub.size(); ++i) model.layers()[i].sampled_stats = std::move(sub[i]);
    }
}

inline void check_binary_mask(const Tensor& mask) {
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0 && mask[i] != 1.0) throw std::invalid_argument("mask entries must be 0 or 1");
}

/// W0 (Hadamard) mask. Reads only the frozen weights.
inline Tensor apply_mask(const PrunableLayer& layer, const Tensor& mask) {
    require_same_shape("apply_mask", layer.w0(), mask);
    check_binary_mask(mask);
    return kernels::multiply(layer.w0(), mask);
}

struct PretrainConfig {
    std::size_t steps = 2000;
    double learning_rate = 0.01;
    std::size_t batch_sequences = 16;
    std::uint64_t seed = 1;
};

/// Adam over every parameter of the dense model on random minibatches of the
/// training set. Returns the per-step loss.
inline std::vector<double> pretrain(const ToyModelConfig& c, DenseWeights& w, const CalibrationSet& train,
                                    const PretrainConfig& pc) {
    if (train.empty()) throw std::invalid_argument("pretraining set is empty");
    train.validate();
    std::vector<Tensor*> params{&w.embed, &w.pos, &w.unembed};
    for (auto& l : w.linears) params.push_back(&l);
    std::vector<Tensor> m, s;
    for (auto* p : params) {
        m.emplace_back(p->shape());
        s.emplace_back(p->shape());
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Rng rng(pc.seed);
    std::vector<double> losses;
    losses.reserve(pc.steps);
    for (std::size_t step = 1; step <= pc.steps; ++step) {
        CalibrationSet batch{{}, train.context_length, train.vocab_size};
        for (std::size_t b = 0; b < pc.batch_sequences; ++b) batch.sequences.push_back(train.sequences[rng.below(train.size())]);
        const TokenRows rows = token_rows(batch);
        Tape tape;
        ModelVars v{tape.leaf(w.embed), tape.leaf(w.pos), tape.leaf(w.unembed), {}};
        for (const auto& l : w.linears) v.linears.push_back(tape.leaf(l));
        Var loss = cross_entropy_with_logits(forward_logits(c, v, rows), rows.targets);
        losses.push_back(loss.value().item());
        const Gradients g = tape.backward(loss);
        std::vector<Var> vars{v.embed, v.pos, v.unembed};
        vars.insert(vars.end(), v.linears.begin(), v.linears.end());
        const double bc1 = 1.0 - std::pow(beta1, double(step));
        const double bc2 = 1.0 - std::pow(beta2, double(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Tensor& gi = g[vars[i]];
            Tensor& p = *params[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[i][k] = beta1 * m[i][k] + (1 - beta1) * gi[k];
                s[i][k] = beta2 * s[i][k] + (1 - beta2) * gi[k] * gi[k];
                p[k] -= pc.learning_rate * (m[i][k] / bc1) / (std::sqrt(s[i][k] / bc2) + eps);
            }
        }
    }
    return losses;
}

}  // namespace mdprune
