#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdprune/archive.hpp"
#include "mdprune/diagnostics.hpp"
#include "mdprune/model.hpp"
#include "mdprune/saliency.hpp"
#include "mdprune/tensor.hpp"

namespace mdprune {

class ConfigError : public std::invalid_argument {
 public:
    using std::invalid_argument::invalid_argument;
};

class DivergenceError : public std::runtime_error {
 public:
    DivergenceError(std::string layer, std::size_t step, DiagnosticsTrace trace)
        : std::runtime_error("non-finite values in layer '" + layer + "' at step " + std::to_string(step)),
          layer_(std::move(layer)), step_(step), trace_(std::move(trace)) {}
    const std::string& layer() const noexcept { return layer_; }
    std::size_t step() const noexcept { return step_; }
    const DiagnosticsTrace& trace() const noexcept { return trace_; }

 private:
    std::string layer_;
    std::size_t step_;
    DiagnosticsTrace trace_;
};

enum class PatternKind { Unstructured, NM };

struct SparsityPattern {
    PatternKind kind = PatternKind::Unstructured;
    std::size_t n = 2;
    std::size_t m = 4;

    static SparsityPattern unstructured() { return {}; }
    static SparsityPattern nm(std::size_t n, std::size_t m) { return {PatternKind::NM, n, m}; }

    static SparsityPattern parse(std::string_view s) {
        if (s == "unstructured") return unstructured();
        const auto colon = s.find(':');
        if (colon == std::string_view::npos) throw ConfigError("pattern must be 'unstructured' or 'N:M', got '" + std::string(s) + "'");
        try {
            const auto n = std::stoul(std::string(s.substr(0, colon)));
            const auto m = std::stoul(std::string(s.substr(colon + 1)));
            if (n == 0 || n > m) throw ConfigError("N:M pattern needs 0 < N <= M");
            return nm(n, m);
        } catch (const std::logic_error&) {
            throw ConfigError("malformed N:M pattern '" + std::string(s) + "'");
        }
    }

    std::string str() const { return kind == PatternKind::Unstructured ? "unstructured" : std::to_string(n) + ":" + std::to_string(m); }
    bool operator==(const SparsityPattern&) const = default;
};

/// Step sizes alpha_n: an explicit list, or `base` with optional linear warmup.
struct StepSchedule {
    double base = 1e-4;
    std::size_t warmup = 0;
    std::vector<double> explicit_steps;

    double at(std::size_t n) const {
        if (!explicit_steps.empty()) return explicit_steps.at(std::min(n, explicit_steps.size() - 1));
        if (warmup > 0 && n < warmup) return base * double(n + 1) / double(warmup);
        return base;
    }
};

enum class BatchMode { Full, Minibatch };

struct PruneConfig {
    double rho = 1.0;
    double kappa = 1.0;
    double lambda = 1e-3;
    StepSchedule alpha;
    std::size_t steps = 100;
    MetricConfig metric;
    SparsityPattern pattern;
    std::uint64_t seed = 0;
    BatchMode batch = BatchMode::Full;
    std::size_t batch_sequences = 16;
    bool straight_through = false;
    std::optional<double> nm_eta;  // defaults to kappa * alpha_n
    bool diagnostics = true;

    /// `in_features` lists each layer's input dimension for the N:M check.
    void validate(std::span<const std::size_t> in_features = {}) const {
        if (!(rho >= 0)) throw ConfigError("rho must be >= 0");
        if (!(kappa > 0)) throw ConfigError("kappa must be > 0");
        if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
        for (std::size_t n = 0; n < std::max<std::size_t>(steps, 1); ++n)
            if (!(alpha.at(n) > 0)) throw ConfigError("step sizes must be > 0");
        if (!alpha.explicit_steps.empty() && alpha.explicit_steps.size() < steps)
            throw ConfigError("explicit step-size list shorter than the number of steps");
        if (metric.kind == MetricKind::StochRia) check_sample_fraction(metric.sample_fraction);
        if (metric.ria_exponent < 0) throw ConfigError("ria exponent must be >= 0");
        if (nm_eta && !(*nm_eta > 0)) throw ConfigError("nm eta must be > 0");
        if (batch == BatchMode::Minibatch && batch_sequences == 0) throw ConfigError("minibatch size must be positive");
        if (pattern.kind == PatternKind::NM) {
            if (pattern.n == 0 || pattern.n > pattern.m) throw ConfigError("N:M pattern needs 0 < N <= M");
            for (auto in : in_features)
                if (in % pattern.m != 0)
                    throw ConfigError("M=" + std::to_string(pattern.m) + " does not divide layer input dimension " + std::to_string(in));
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"rho", rho},
                         {"kappa", kappa},
                         {"lambda", lambda},
                         {"alpha", alpha.base},
                         {"warmup", alpha.warmup},
                         {"alpha_list", alpha.explicit_steps},
                         {"steps", steps},
                         {"metric", metric_name(metric.kind)},
                         {"ria_exponent", metric.ria_exponent},
                         {"sample_fraction", metric.sample_fraction},
                         {"metric_seed", metric.seed},
                         {"pattern", pattern.str()},
                         {"seed", seed},
                         {"batch", batch == BatchMode::Full ? "full" : "minibatch"},
                         {"batch_sequences", batch_sequences},
                         {"straight_through", straight_through},
                         {"diagnostics", diagnostics}};
        j["nm_eta"] = nm_eta ? nlohmann::json(*nm_eta) : nlohmann::json(nullptr);
        return j;
    }

    std::string fingerprint() const { return sha256_hex(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Proximal pieces

inline double soft_threshold(double z, double t) {
    if (t < 0) throw std::invalid_argument("soft_threshold: threshold must be >= 0");
    const double a = std::abs(z) - t;
    return a > 0 ? (z > 0 ? a : -a) : 0.0;
}

inline Tensor soft_threshold(const Tensor& z, double t) {
    if (t < 0) throw std::invalid_argument("soft_threshold: threshold must be >= 0");
    Tensor out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = soft_threshold(z[i], t);
    return out;
}

/// Elementary symmetric polynomial e_k of |x|.
inline double elementary_symmetric(std::span<const double> x, std::size_t k) {
    std::vector<double> e(k + 1, 0.0);
    e[0] = 1.0;
    for (double v : x) {
        const double a = std::abs(v);
        for (std::size_t j = k; j >= 1; --j) e[j] += a * e[j - 1];
    }
    return e[k];
}

/// N:M penalty of one block: e_{N+1}(|w|), which is zero exactly when at most
/// N entries are nonzero. For 2:4 this is the sum of the four triple products.
inline double nm_block_penalty(std::span<const double> block, std::size_t n) { return elementary_symmetric(block, n + 1); }

inline double r24_penalty(std::span<const double> block) {
    if (block.size() != 4) throw std::invalid_argument("r24_penalty: block length must be 4, got " + std::to_string(block.size()));
    return nm_block_penalty(block, 2);
}

inline double nm_penalty(const Tensor& w, std::size_t n, std::size_t m) {
    if (w.cols() % m != 0) throw ShapeError("nm_penalty: M does not divide the row length of " + shape_str(w.shape()));
    double s = 0;
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t b = 0; b < w.cols(); b += m) s += nm_block_penalty(w.row(i).subspan(b, m), n);
    return s;
}

/// One damped subgradient step on the N:M penalty, per block:
///   w_i <- sign(w_i) * max(|w_i| - eta * dR/d|w_i|, 0)
/// with dR/d|w_i| = e_N of the other entries' magnitudes.
inline Tensor nm_prox_step(const Tensor& w, double eta, std::size_t n, std::size_t m) {
    if (!(eta > 0)) throw std::invalid_argument("nm_prox_step: eta must be > 0");
    if (w.cols() % m != 0) throw ShapeError("nm_prox_step: M does not divide the row length of " + shape_str(w.shape()));
    Tensor out = w;
    std::vector<double> others(m - 1);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t b = 0; b < w.cols(); b += m) {
            auto block = w.row(i).subspan(b, m);
            for (std::size_t p = 0; p < m; ++p) {
                std::size_t o = 0;
                for (std::size_t q = 0; q < m; ++q)
                    if (q != p) others[o++] = block[q];
                const double d = elementary_symmetric(others, n);
                const double mag = std::max(std::abs(block[p]) - eta * d, 0.0);
                out.at(i, b + p) = block[p] >= 0 ? mag : -mag;
            }
        }
    return out;
}

inline Tensor r24_prox_step(const Tensor& w, double eta) { return nm_prox_step(w, eta, 2, 4); }

// ---------------------------------------------------------------------------
// Objectives

template <class T>
concept TaskObjective = requires(T& t, std::span<const Tensor> w, std::size_t step) {
    { t.loss_and_grad(w, step) } -> std::same_as<LossAndGrad>;
};

/// Next-token loss of the toy model on the calibration set (full batch) or on
/// seeded minibatches drawn per step.
struct LmObjective {
    const ToyModel* model;
    const CalibrationSet* calib;
    BatchMode mode = BatchMode::Full;
    std::size_t batch_sequences = 16;
    std::uint64_t seed = 0;

    LossAndGrad loss_and_grad(std::span<const Tensor> w, std::size_t step) const {
        if (mode == BatchMode::Full) return task_loss_and_grad(*model, w, *calib);
        Rng rng(derive_seed(seed, step));
        CalibrationSet batch{{}, calib->context_length, calib->vocab_size};
        for (std::size_t b = 0; b < batch_sequences; ++b) batch.sequences.push_back(calib->sequences[rng.below(calib->size())]);
        return task_loss_and_grad(*model, w, batch);
    }
};

/// Sum over layers of (1/2n) ||X_l W_l^T - Y_l||_F^2. Quadratic, so its gradient
/// Lipschitz constant is the top eigenvalue of X^T X / n.
struct QuadraticObjective {
    std::vector<Tensor> inputs;   // n x in
    std::vector<Tensor> targets;  // n x out

    LossAndGrad loss_and_grad(std::span<const Tensor> w, std::size_t = 0) const {
        LossAndGrad out;
        for (std::size_t l = 0; l < w.size(); ++l) {
            const double n = double(inputs[l].rows());
            Tensor r = kernels::matmul_nt(inputs[l], w[l]);
            for (std::size_t i = 0; i < r.size(); ++i) r[i] -= targets[l][i];
            out.loss += 0.5 * frobenius_sq(r) / n;
            out.grads.push_back(kernels::scale(kernels::matmul_tn(r, inputs[l]), 1.0 / n));
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Search

inline std::vector<LayerSaliency> bind_layer_metrics(std::span<const PrunableLayer> layers, const MetricConfig& mc) {
    std::vector<LayerSaliency> out;
    for (const auto& l : layers) {
        const ActivationStats& st = mc.kind == MetricKind::StochRia ? l.sampled_stats : l.stats;
        if (mc.kind != MetricKind::Magnitude && st.col_norms.size() != l.in_features())
            throw ConfigError("layer '" + l.name() + "' has no activation statistics for metric " + metric_name(mc.kind));
        out.push_back(bind_metric(mc.kind, l.w0(), st, mc.ria_exponent));
    }
    return out;
}

namespace detail {

inline std::vector<Tensor> weights_of(std::span<const PrunableLayer> layers) {
    std::vector<Tensor> w;
    for (const auto& l : layers) w.push_back(l.weight);
    return w;
}

inline std::vector<Tensor> gammas_of(std::span<const PrunableLayer> layers) {
    std::vector<Tensor> g;
    for (const auto& l : layers) g.push_back(l.gamma);
    return g;
}

}  // namespace detail

/// Applies one iteration to every layer given the task gradients at W^n:
///   W <- W - kappa alpha (g_task + rho J_S^T (S - Gamma)); [N:M prox]
///   V <- V - alpha rho (Gamma - S(W^n));  Gamma <- soft_threshold(V, lambda)
/// Returns grad_Gamma Lbar(P_n) = rho (Gamma^n - S(W^n)) per layer.
inline std::vector<Tensor> apply_mirror_update(std::span<PrunableLayer> layers, std::span<const LayerSaliency> sal,
                                               const PruneConfig& cfg, std::span<const Tensor> task_grads, std::size_t step) {
    const double alpha = cfg.alpha.at(step);
    std::vector<Tensor> grad_gamma;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        PrunableLayer& L = layers[li];
        const Tensor s = score(L.weight, sal[li]);
        Tensor g_align = alignment_gradient(L.weight, L.gamma, sal[li], cfg.straight_through);
        Tensor w_next = L.weight;
        for (std::size_t k = 0; k < w_next.size(); ++k) w_next[k] -= cfg.kappa * alpha * (task_grads[li][k] + cfg.rho * g_align[k]);
        if (cfg.pattern.kind == PatternKind::NM)
            w_next = nm_prox_step(w_next, cfg.nm_eta.value_or(cfg.kappa * alpha), cfg.pattern.n, cfg.pattern.m);

        Tensor gg(s.shape());
        for (std::size_t k = 0; k < gg.size(); ++k) gg[k] = cfg.rho * (L.gamma[k] - s[k]);
        Tensor v_next = L.dual;
        for (std::size_t k = 0; k < v_next.size(); ++k) v_next[k] -= alpha * gg[k];
        Tensor gamma_next = soft_threshold(v_next, cfg.lambda);

        if (!w_next.all_finite() || !v_next.all_finite() || !gamma_next.all_finite())
            throw DivergenceError(L.name(), step, {});
        L.weight = std::move(w_next);
        L.dual = std::move(v_next);
        L.gamma = std::move(gamma_next);
        grad_gamma.push_back(std::move(gg));
    }
    return grad_gamma;
}

/// One search step on `layers`, evaluating the task gradient at the current W.
template <TaskObjective Obj>
void mirror_step(std::span<PrunableLayer> layers, const PruneConfig& cfg, Obj& objective, std::size_t step) {
    const auto sal = bind_layer_metrics(layers, cfg.metric);
    const auto w = detail::weights_of(layers);
    const LossAndGrad lg = objective.loss_and_grad(w, step);
    apply_mirror_update(layers, sal, cfg, lg.grads, step);
}

/// Drives the search over a set of layers and records the diagnostics trace.
/// The layers' current (W, Gamma, V) is the starting point, so a freshly
/// constructed layer starts from W0, 0, 0 and a restored checkpoint resumes.
template <TaskObjective Obj>
class MirrorSearch {
 public:
    MirrorSearch(std::span<PrunableLayer> layers, PruneConfig cfg, Obj& objective, std::size_t start_step = 0)
        : layers_(layers), cfg_(std::move(cfg)), obj_(objective), step_(start_step) {
        std::vector<std::size_t> ins;
        for (const auto& l : layers_) ins.push_back(l.in_features());
        cfg_.validate(ins);
        sal_ = bind_layer_metrics(layers_, cfg_.metric);
        for (const auto& l : layers_) {
            Tensor g = l.dual;
            for (std::size_t k = 0; k < g.size(); ++k) g[k] -= l.gamma[k];
            subgrad_.push_back(std::move(g));
        }
        if (cfg_.diagnostics) {
            cached_ = obj_.loss_and_grad(detail::weights_of(layers_), step_);
            TraceRow r;
            r.step = step_;
            fill_energy(r, cached_->loss);
            r.dp_sq = 0;
            trace_.rows.push_back(r);
        }
    }

    std::size_t step_index() const noexcept { return step_; }
    std::size_t steps_taken() const noexcept { return taken_; }
    const DiagnosticsTrace& trace() const noexcept { return trace_; }
    const PruneConfig& config() const noexcept { return cfg_; }

    void step() {
        const std::size_t k = step_;
        const double alpha = cfg_.alpha.at(k);
        LossAndGrad lg = cached_ ? std::move(*cached_) : obj_.loss_and_grad(detail::weights_of(layers_), k);
        cached_.reset();

        std::vector<Tensor> w_prev, gamma_prev;
        if (cfg_.diagnostics) {
            w_prev = detail::weights_of(layers_);
            gamma_prev = detail::gammas_of(layers_);
        }
        std::vector<Tensor> grad_gamma;
        try {
            grad_gamma = apply_mirror_update(layers_, sal_, cfg_, lg.grads, k);
        } catch (const DivergenceError& e) {
            throw DivergenceError(e.layer(), e.step(), trace_);
        }
        ++step_;
        ++taken_;
        if (!cfg_.diagnostics) return;

        const auto gamma_next = detail::gammas_of(layers_);
        auto g_next = next_subgradient(subgrad_, gamma_next, gamma_prev, alpha, grad_gamma);

        cached_ = obj_.loss_and_grad(detail::weights_of(layers_), step_);
        TraceRow r;
        r.step = step_;
        r.alpha = alpha;
        fill_energy(r, cached_->loss);
        double dw = 0, dg = 0, dsub = 0;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            dw += diff_sq(layers_[i].weight, w_prev[i]);
            dg += diff_sq(gamma_next[i], gamma_prev[i]);
            if (!prev_subgrad_.empty()) dsub += diff_sq(subgrad_[i], prev_subgrad_[i]);
        }
        r.dp_sq = dw + dg;
        r.dq_norm = std::sqrt(dw + dg + dsub);
        r.bregman = bregman_l1(cfg_.lambda, gamma_next, gamma_prev, subgrad_);
        r.lyapunov = compute_lyapunov(step_, alpha, r.smooth_energy, cfg_.lambda, gamma_next, gamma_prev, subgrad_);

        // H_{k+1} uses the gradients at P_{k+1}.
        std::vector<Tensor> gw_next, gg_next;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const PrunableLayer& L = layers_[i];
            Tensor ga = alignment_gradient(L.weight, L.gamma, sal_[i], cfg_.straight_through);
            gw_next.push_back(axpy(cached_->grads[i], cfg_.rho, ga));
            const Tensor s = score(L.weight, sal_[i]);
            Tensor gg(s.shape());
            for (std::size_t q = 0; q < gg.size(); ++q) gg[q] = cfg_.rho * (L.gamma[q] - s[q]);
            gg_next.push_back(std::move(gg));
        }
        r.h_norm = stationarity_residual(alpha, gw_next, gg_next, g_next, subgrad_, gamma_prev, gamma_next);
        trace_.rows.push_back(r);

        prev_subgrad_ = std::move(subgrad_);
        subgrad_ = std::move(g_next);
    }

    void run(std::size_t until_step) {
        while (step_ < until_step) step();
    }

    /// Subgradient g_k carried by the Lyapunov recursion.
    const std::vector<Tensor>& subgradient() const noexcept { return subgrad_; }

 private:
    void fill_energy(TraceRow& r, double task_loss) const {
        double align = 0;
        std::vector<Tensor> gam;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            align += diff_sq(layers_[i].gamma, score(layers_[i].weight, sal_[i]));
            gam.push_back(layers_[i].gamma);
        }
        r.task_loss = task_loss;
        r.smooth_energy = task_loss + 0.5 * cfg_.rho * align;
        r.energy = r.smooth_energy + l1_penalty(cfg_.lambda, gam);
    }

    std::span<PrunableLayer> layers_;
    PruneConfig cfg_;
    Obj& obj_;
    std::size_t step_;
    std::size_t taken_ = 0;
    std::vector<LayerSaliency> sal_;
    std::vector<Tensor> subgrad_, prev_subgrad_;
    std::optional<LossAndGrad> cached_;
    DiagnosticsTrace trace_;
};

struct SearchResult {
    std::vector<Tensor> gamma_star;
    DiagnosticsTrace trace;
    std::size_t steps_taken = 0;
};

/// Full search from the layers' current state up to `cfg.steps`. W0 is never
/// touched; the evolved W stays on the layers but is not used for export.
template <TaskObjective Obj>
SearchResult run_search(std::span<PrunableLayer> layers, const PruneConfig& cfg, Obj& objective, std::size_t start_step = 0) {
    MirrorSearch<Obj> search(layers, cfg, objective, start_step);
    search.run(cfg.steps);
    return {detail::gammas_of(layers), search.trace(), search.steps_taken()};
}

inline SearchResult run_search(ToyModel& model, const CalibrationSet& calib, const PruneConfig& cfg) {
    LmObjective obj{&model, &calib, cfg.batch, cfg.batch_sequences, cfg.seed};
    return run_search(std::span<PrunableLayer>(model.layers()), cfg, obj);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline TensorArchive save_search_checkpoint(std::span<const PrunableLayer> layers, const PruneConfig& cfg, std::size_t step) {
    TensorArchive ar;
    nlohmann::json names = nlohmann::json::array();
    for (const auto& l : layers) {
        ar.add(l.name() + "/W", l.weight);
        ar.add(l.name() + "/gamma", l.gamma);
        ar.add(l.name() + "/V", l.dual);
        names.push_back(l.name());
    }
    ar.metadata()["kind"] = "search-checkpoint";
    ar.metadata()["config_fingerprint"] = cfg.fingerprint();
    ar.metadata()["config"] = cfg.to_json();
    ar.metadata()["step"] = step;
    ar.metadata()["layers"] = names;
    return ar;
}

/// Restores (W, Gamma, V) onto matching layers; returns the saved step. The
/// config fingerprint must match unless `expected` is empty.
inline std::size_t load_search_checkpoint(const TensorArchive& ar, std::span<PrunableLayer> layers, const std::string& expected_fingerprint = {}) {
    const auto& md = ar.metadata();
    if (md.value("kind", "") != "search-checkpoint") throw ArchiveError("archive is not a search checkpoint");
    if (!expected_fingerprint.empty() && md.at("config_fingerprint").get<std::string>() != expected_fingerprint)
        throw ConfigError("search checkpoint was produced with a different configuration");
    for (auto& l : layers) {
        Tensor w = ar.get(l.name() + "/W"), g = ar.get(l.name() + "/gamma"), v = ar.get(l.name() + "/V");
        require_same_shape("checkpoint W", w, l.w0());
        require_same_shape("checkpoint gamma", g, l.w0());
        require_same_shape("checkpoint V", v, l.w0());
        l.weight = std::move(w);
        l.gamma = std::move(g);
        l.dual = std::move(v);
    }
    return md.at("step").get<std::size_t>();
}

// ---------------------------------------------------------------------------
// Lipschitz estimates for the step-size bound

inline std::vector<double> flatten(std::span<const Tensor> ts) {
    std::vector<double> v;
    for (const auto& t : ts) v.insert(v.end(), t.data().begin(), t.data().end());
    return v;
}

inline std::vector<Tensor> unflatten(std::span<const double> v, std::span<const PrunableLayer> layers) {
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (const auto& l : layers) {
        const std::size_t n = l.w0().size();
        out.emplace_back(l.w0().shape(), std::vector<double>(v.begin() + off, v.begin() + off + n));
        off += n;
    }
    return out;
}

struct LipschitzPair {
    double lip_task = 0;
    double lip_metric = 0;
};

/// Probe estimates of L_W (task gradient) and L_S (saliency map) around W0.
template <TaskObjective Obj>
LipschitzPair estimate_lipschitz(std::span<const PrunableLayer> layers, const MetricConfig& mc, Obj& objective,
                                 const LipschitzOptions& opt = {}) {
    const auto sal = bind_layer_metrics(layers, mc);
    std::vector<Tensor> w0;
    for (const auto& l : layers) w0.push_back(l.w0());
    const auto center = flatten(w0);
    VectorMap grad_map = [&](std::span<const double> x) {
        const auto w = unflatten(x, layers);
        return flatten(objective.loss_and_grad(w, 0).grads);
    };
    VectorMap score_map = [&](std::span<const double> x) {
        const auto w = unflatten(x, layers);
        std::vector<Tensor> s;
        for (std::size_t i = 0; i < w.size(); ++i) s.push_back(score(w[i], sal[i]));
        return flatten(s);
    };
    LipschitzOptions o2 = opt;
    o2.seed = derive_seed(opt.seed, 1);
    return {mdprune::estimate_lipschitz(grad_map, center, opt), mdprune::estimate_lipschitz(score_map, center, o2)};
}

}  // namespace mdprune
