#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mdprune/random.hpp"
#include "mdprune/tensor.hpp"

namespace mdprune {

enum class MetricKind { Magnitude, Wanda, Ria, StochRia };

inline const char* metric_name(MetricKind k) {
    switch (k) {
        case MetricKind::Magnitude: return "magnitude";
        case MetricKind::Wanda: return "wanda";
        case MetricKind::Ria: return "ria";
        case MetricKind::StochRia: return "stochria";
    }
    return "?";
}

inline MetricKind parse_metric(std::string_view s) {
    if (s == "magnitude") return MetricKind::Magnitude;
    if (s == "wanda") return MetricKind::Wanda;
    if (s == "ria") return MetricKind::Ria;
    if (s == "stochria") return MetricKind::StochRia;
    throw std::invalid_argument("unknown metric '" + std::string(s) + "' (magnitude|wanda|ria|stochria)");
}

/// Per-input-feature l2 norms of a layer's calibration inputs.
struct ActivationStats {
    std::vector<double> col_norms;
    std::size_t sample_count = 0;
    double sample_fraction = 1.0;
    std::uint64_t sample_seed = 0;
};

struct RowSample {
    double fraction = 1.0;
    std::uint64_t seed = 0;
};

inline void check_sample_fraction(double q) {
    if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("sample fraction must lie in (0, 1], got " + std::to_string(q));
}

/// Row inclusion flags: the first round(q*total) entries of a seeded
/// permutation of [0, total). q = 1 selects everything.
inline std::vector<char> select_rows(std::size_t total, const RowSample& sample) {
    check_sample_fraction(sample.fraction);
    if (sample.fraction == 1.0) return std::vector<char>(total, 1);
    std::vector<std::size_t> perm(total);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(sample.seed);
    rng.shuffle(std::span(perm));
    auto keep = static_cast<std::size_t>(std::llround(sample.fraction * static_cast<double>(total)));
    keep = std::max<std::size_t>(keep, total ? 1 : 0);
    std::vector<char> flags(total, 0);
    for (std::size_t i = 0; i < keep; ++i) flags[perm[i]] = 1;
    return flags;
}

/// Streams input rows and accumulates per-column sums of squares. Optionally
/// restricted to a pre-selected subset of global row indices.
class ActivationAccumulator {
 public:
    explicit ActivationAccumulator(std::size_t in_features, std::vector<char> selected = {})
        : sumsq_(in_features, 0.0), selected_(std::move(selected)) {}

    void add_rows(const Tensor& rows) {
        if (rows.cols() != sumsq_.size())
            throw ShapeError("activation rows", rows.shape(), Shape{rows.rows(), sumsq_.size()});
        for (std::size_t r = 0; r < rows.rows(); ++r, ++seen_) {
            if (!selected_.empty()) {
                if (seen_ >= selected_.size()) throw std::logic_error("more activation rows than the sampling plan");
                if (!selected_[seen_]) continue;
            }
            auto x = rows.row(r);
            for (std::size_t j = 0; j < x.size(); ++j) sumsq_[j] += x[j] * x[j];
            ++used_;
        }
    }

    /// With sampling, sums are rescaled by total/used to estimate full norms.
    ActivationStats finish(const RowSample& sample = {}) const {
        ActivationStats st;
        st.sample_count = used_;
        st.sample_fraction = sample.fraction;
        st.sample_seed = sample.seed;
        st.col_norms.resize(sumsq_.size());
        const double factor =
            (selected_.empty() || used_ == 0) ? 1.0 : static_cast<double>(seen_) / static_cast<double>(used_);
        for (std::size_t j = 0; j < sumsq_.size(); ++j) st.col_norms[j] = std::sqrt(sumsq_[j] * factor);
        return st;
    }

 private:
    std::vector<double> sumsq_;
    std::vector<char> selected_;
    std::size_t seen_ = 0;
    std::size_t used_ = 0;
};

/// Column norms of an explicit activation matrix (rows = tokens).
inline ActivationStats column_norms(const Tensor& rows, const std::optional<RowSample>& sample = std::nullopt) {
    if (!sample) {
        ActivationAccumulator acc(rows.cols());
        acc.add_rows(rows);
        return acc.finish();
    }
    ActivationAccumulator acc(rows.cols(), select_rows(rows.rows(), *sample));
    acc.add_rows(rows);
    return acc.finish(*sample);
}

struct MetricConfig {
    MetricKind kind = MetricKind::StochRia;
    double ria_exponent = 0.5;
    double sample_fraction = 0.5;
    std::uint64_t seed = 0;
};

struct ScoreMatrix {
    Tensor scores;
    MetricKind metric;
};

/// A metric bound to one layer's statistics: S_ij = base_ij(|W|) * activation_j.
struct LayerSaliency {
    MetricKind kind = MetricKind::Magnitude;
    std::vector<double> activation;  // per input column
};

inline void check_stats(const Tensor& w, const ActivationStats& stats) {
    if (stats.col_norms.size() != w.cols())
        throw ShapeError("saliency stats", w.shape(), Shape{stats.col_norms.size()});
}

inline LayerSaliency bind_metric(MetricKind kind, const Tensor& w, const ActivationStats& stats, double exponent = 0.5) {
    LayerSaliency s{kind, std::vector<double>(w.cols(), 1.0)};
    if (kind == MetricKind::Magnitude) return s;
    check_stats(w, stats);
    if (kind == MetricKind::Wanda) {
        s.activation = stats.col_norms;
    } else {
        if (exponent < 0.0) throw std::invalid_argument("RIA exponent must be >= 0");
        for (std::size_t j = 0; j < w.cols(); ++j) s.activation[j] = std::pow(stats.col_norms[j], exponent);
    }
    return s;
}

namespace detail {

struct AbsSums {
    std::vector<double> row, col;
};

inline AbsSums abs_sums(const Tensor& w) {
    AbsSums s{std::vector<double>(w.rows(), 0.0), std::vector<double>(w.cols(), 0.0)};
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double a = std::abs(w.at(i, j));
            s.row[i] += a;
            s.col[j] += a;
        }
    return s;
}

inline double safe_inv(double x) { return x > 0.0 ? 1.0 / x : 0.0; }

}  // namespace detail

inline Tensor score(const Tensor& w, const LayerSaliency& s) {
    if (s.activation.size() != w.cols()) throw ShapeError("saliency activation", w.shape(), Shape{s.activation.size()});
    Tensor out(w.shape());
    const bool relative = s.kind == MetricKind::Ria || s.kind == MetricKind::StochRia;
    detail::AbsSums sums;
    if (relative) sums = detail::abs_sums(w);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double a = std::abs(w.at(i, j));
            const double base = relative ? a * detail::safe_inv(sums.row[i]) + a * detail::safe_inv(sums.col[j]) : a;
            out.at(i, j) = base * s.activation[j];
        }
    return out;
}

/// J_S(W)^T * cotangent, using sign(W) (0 at 0) for d|W|/dW. Zero row or
/// column sums contribute nothing, consistent with the zero-denominator rule.
inline Tensor score_vjp(const Tensor& w, const LayerSaliency& s, const Tensor& cot) {
    require_same_shape("score_vjp", w, cot);
    Tensor g(w.shape());
    if (s.kind == MetricKind::Magnitude || s.kind == MetricKind::Wanda) {
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t j = 0; j < w.cols(); ++j)
                g.at(i, j) = sign_of(w.at(i, j)) * s.activation[j] * cot.at(i, j);
        return g;
    }
    const auto sums = detail::abs_sums(w);
    std::vector<double> row_dot(w.rows(), 0.0), col_dot(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double a = std::abs(w.at(i, j));
            row_dot[i] += cot.at(i, j) * s.activation[j] * a;
            col_dot[j] += cot.at(i, j) * a;
        }
    for (std::size_t p = 0; p < w.rows(); ++p) {
        const double ir = detail::safe_inv(sums.row[p]);
        for (std::size_t q = 0; q < w.cols(); ++q) {
            const double ic = detail::safe_inv(sums.col[q]);
            const double d_abs = cot.at(p, q) * s.activation[q] * (ir + ic) - ir * ir * row_dot[p] -
                                 s.activation[q] * ic * ic * col_dot[q];
            g.at(p, q) = sign_of(w.at(p, q)) * d_abs;
        }
    }
    return g;
}

/// Gradient of 1/2 ||gamma - S(W)||_F^2 with respect to W. The
/// straight-through variant freezes the RIA normalisers and keeps only the
/// diagonal d S_ij / d W_ij.
inline Tensor alignment_gradient(const Tensor& w, const Tensor& gamma, const LayerSaliency& s,
                                 bool straight_through = false) {
    require_same_shape("alignment_gradient", w, gamma);
    Tensor resid = score(w, s);
    for (std::size_t i = 0; i < resid.size(); ++i) resid[i] -= gamma[i];
    if (!straight_through || s.kind == MetricKind::Magnitude || s.kind == MetricKind::Wanda)
        return score_vjp(w, s, resid);
    const auto sums = detail::abs_sums(w);
    Tensor g(w.shape());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double diag = (detail::safe_inv(sums.row[i]) + detail::safe_inv(sums.col[j])) * s.activation[j];
            g.at(i, j) = sign_of(w.at(i, j)) * diag * resid.at(i, j);
        }
    return g;
}

inline ScoreMatrix magnitude_score(const Tensor& w) {
    return {score(w, LayerSaliency{MetricKind::Magnitude, std::vector<double>(w.cols(), 1.0)}), MetricKind::Magnitude};
}

inline ScoreMatrix wanda_score(const Tensor& w, const ActivationStats& stats) {
    return {score(w, bind_metric(MetricKind::Wanda, w, stats)), MetricKind::Wanda};
}

inline ScoreMatrix ria_score(const Tensor& w, const ActivationStats& stats, double exponent = 0.5) {
    return {score(w, bind_metric(MetricKind::Ria, w, stats, exponent)), MetricKind::Ria};
}

/// RIA with column norms estimated from a subsample of calibration rows.
inline ScoreMatrix stoch_ria_score(const Tensor& w, const ActivationStats& sampled_stats, double exponent = 0.5) {
    return {score(w, bind_metric(MetricKind::StochRia, w, sampled_stats, exponent)), MetricKind::StochRia};
}

inline ScoreMatrix stoch_ria_score(const Tensor& w, const Tensor& activation_rows, double exponent, double fraction,
                                   std::uint64_t seed) {
    return stoch_ria_score(w, column_norms(activation_rows, RowSample{fraction, seed}), exponent);
}

}  // namespace mdprune
