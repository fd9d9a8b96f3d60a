#pragma once

// Convergence diagnostics for the mirror-descent search.
//
// With P = (W, Gamma) and Q_k = (P_k, g_{k-1}):
//   smooth energy   Lbar(P) = L_task(W) + rho/2 ||Gamma - S(W)||^2
//   Lyapunov        F(Q_k)  = alpha * Lbar(P_k) + B^{g_{k-1}}(Gamma_k, Gamma_{k-1})
//   Bregman (l1)    B^g(u, v) = lambda*|u|_1 - lambda*|v|_1 - <g, u - v>
//   subgradient     g_{k+1} = g_k - (Gamma_{k+1} - Gamma_k) - alpha * grad_Gamma Lbar(P_k)
// The saliency block is updated by Prox_Omega without a kappa factor, so the
// recursion runs with unit prox scale and g_k equals V_k - Gamma_k.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdprune/random.hpp"
#include "mdprune/tensor.hpp"

namespace mdprune {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct TraceRow {
    std::size_t step = 0;
    double task_loss = kNaN;
    double energy = kNaN;         // composite energy including lambda*|Gamma|_1
    double smooth_energy = kNaN;  // Lbar
    double lyapunov = kNaN;       // F(Q_step), undefined at step 0
    double dp_sq = kNaN;          // ||P_step - P_{step-1}||^2
    double dq_norm = kNaN;        // ||Q_step - Q_{step-1}||
    double h_norm = kNaN;         // ||H_step||
    double bregman = kNaN;        // B^{g_{step-1}}(Gamma_step, Gamma_{step-1})
    double alpha = kNaN;
};

struct DiagnosticsTrace {
    std::vector<TraceRow> rows;

    std::size_t size() const noexcept { return rows.size(); }
    bool empty() const noexcept { return rows.empty(); }

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write trace " + path.string());
        out << "step,energy,F,dP_sq,H_norm,bregman,task_loss,alpha\n" << std::setprecision(17);
        for (const auto& r : rows)
            out << r.step << ',' << r.energy << ',' << r.lyapunov << ',' << r.dp_sq << ',' << r.h_norm << ','
                << r.bregman << ',' << r.task_loss << ',' << r.alpha << '\n';
    }
};

/// Bound on the constant step size: 2 / (kappa (L_W + rho L_S^2)).
inline double step_size_bound(double lip_task, double lip_metric, double rho, double kappa) {
    if (lip_task < 0 || lip_metric < 0 || rho < 0) throw std::invalid_argument("step_size_bound: inputs must be >= 0");
    if (!(kappa > 0)) throw std::invalid_argument("step_size_bound: kappa must be > 0");
    const double denom = kappa * (lip_task + rho * lip_metric * lip_metric);
    if (!(denom > 0)) throw std::invalid_argument("step_size_bound: zero denominator");
    return 2.0 / denom;
}

struct StepSizeBound {
    double lip_task = 0;    // L_W
    double lip_metric = 0;  // L_S
    double rho = 0;
    double kappa = 1;
    double alpha_max = 0;

    static StepSizeBound make(double lw, double ls, double rho, double kappa) {
        return {lw, ls, rho, kappa, step_size_bound(lw, ls, rho, kappa)};
    }
};

/// Alternative task constant Lip * C with C = max |W0| over all layers; pass
/// it as `lw` to StepSizeBound::make to use this form.
inline double weight_scaled_lipschitz(double lip, std::span<const Tensor> w0) {
    double c = 0;
    for (const auto& t : w0)
        for (double v : t.data()) c = std::max(c, std::abs(v));
    return lip * c;
}

/// Descent constant of the sufficient-descent inequality (named rho_desc to
/// keep it apart from the alignment weight).
inline double descent_constant(double alpha, double lip_task, double lip_metric, double rho, double kappa) {
    return 1.0 / kappa - alpha * (lip_task + rho * lip_metric * lip_metric) / 2.0;
}

/// rho_1 of the relative-error bound ||H_{k+1}|| <= rho_1 ||Q_{k+1} - Q_k||.
inline double relative_error_constant(double alpha, double lip_task, double rho, double kappa) {
    return 2.0 / kappa + 1.0 + alpha * (lip_task + 2.0 * rho);
}

inline double l1_penalty(double lambda, std::span<const Tensor> gamma) {
    double s = 0;
    for (const auto& g : gamma) s += l1_norm(g);
    return lambda * s;
}

inline double bregman_l1(double lambda, std::span<const Tensor> u, std::span<const Tensor> v, std::span<const Tensor> g) {
    double b = l1_penalty(lambda, u) - l1_penalty(lambda, v);
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t k = 0; k < u[i].size(); ++k) b -= g[i][k] * (u[i][k] - v[i][k]);
    return b;
}

/// F(Q_k) = alpha * Lbar(P_k) + B^{g_{k-1}}(Gamma_k, Gamma_{k-1}); needs k >= 1.
inline double compute_lyapunov(std::size_t k, double alpha, double smooth_energy, double lambda,
                               std::span<const Tensor> gamma_k, std::span<const Tensor> gamma_prev,
                               std::span<const Tensor> g_prev) {
    if (k == 0) throw std::invalid_argument("compute_lyapunov: the Bregman term needs two iterates (k >= 1)");
    return alpha * smooth_energy + bregman_l1(lambda, gamma_k, gamma_prev, g_prev);
}

inline std::vector<Tensor> next_subgradient(std::span<const Tensor> g, std::span<const Tensor> gamma_next,
                                            std::span<const Tensor> gamma, double alpha, std::span<const Tensor> grad_gamma,
                                            double prox_scale = 1.0) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        Tensor n = g[i];
        for (std::size_t k = 0; k < n.size(); ++k)
            n[k] -= (gamma_next[i][k] - gamma[i][k] + prox_scale * alpha * grad_gamma[i][k]) / prox_scale;
        out.push_back(std::move(n));
    }
    return out;
}

/// ||H_{k+1}|| for the stacked components
///   (alpha grad_W Lbar(P_{k+1}), alpha grad_Gamma Lbar(P_{k+1}) + g_{k+1} - g_k, Gamma_k - Gamma_{k+1}).
inline double stationarity_residual(double alpha, std::span<const Tensor> grad_w_next, std::span<const Tensor> grad_gamma_next,
                                    std::span<const Tensor> g_next, std::span<const Tensor> g, std::span<const Tensor> gamma,
                                    std::span<const Tensor> gamma_next) {
    double s = 0;
    for (const auto& t : grad_w_next) s += alpha * alpha * frobenius_sq(t);
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t k = 0; k < g[i].size(); ++k) {
            const double mid = alpha * grad_gamma_next[i][k] + g_next[i][k] - g[i][k];
            const double last = gamma[i][k] - gamma_next[i][k];
            s += mid * mid + last * last;
        }
    return std::sqrt(s);
}

struct DescentReport {
    std::vector<bool> holds;  // holds[i] is the check from row i+1 to row i+2
    std::vector<double> margin;  // F_k - rho_desc dP - F_{k+1}; negative = violated beyond slack
    std::size_t passed = 0;
    double pass_rate = 0;
};

/// Checks F_{k+1} <= F_k - rho_desc ||P_{k+1} - P_k||^2 + slack for every k >= 1.
inline DescentReport descent_check(const DiagnosticsTrace& trace, double rho_desc, double slack = 1e-8) {
    if (trace.size() < 3) throw std::invalid_argument("descent_check: trace needs at least two Lyapunov values");
    DescentReport rep;
    for (std::size_t k = 1; k + 1 < trace.size(); ++k) {
        const auto& cur = trace.rows[k];
        const auto& nxt = trace.rows[k + 1];
        const double m = cur.lyapunov - rho_desc * nxt.dp_sq - nxt.lyapunov;
        const bool ok = std::isfinite(m) && m >= -slack;
        rep.holds.push_back(ok);
        rep.margin.push_back(m);
        rep.passed += ok;
    }
    rep.pass_rate = static_cast<double>(rep.passed) / static_cast<double>(rep.holds.size());
    return rep;
}

struct RateSummary {
    double first_half_mean = 0, second_half_mean = 0;
    double first_decile_mean = 0, last_decile_mean = 0;
    std::vector<double> running_mean;  // (1/K) sum_{k<=K} dP_sq
};

/// Summaries of ||P_{k+1} - P_k||^2 along the trace (rows 1..).
inline RateSummary rate_summary(const DiagnosticsTrace& trace) {
    std::vector<double> d;
    for (std::size_t k = 1; k < trace.size(); ++k) d.push_back(trace.rows[k].dp_sq);
    if (d.size() < 10) throw std::invalid_argument("rate_summary: need at least 10 steps");
    auto mean = [&](std::size_t b, std::size_t e) {
        double s = 0;
        for (std::size_t i = b; i < e; ++i) s += d[i];
        return s / double(e - b);
    };
    RateSummary r;
    const std::size_t n = d.size(), half = n / 2, dec = n / 10;
    r.first_half_mean = mean(0, half);
    r.second_half_mean = mean(half, n);
    r.first_decile_mean = mean(0, dec);
    r.last_decile_mean = mean(n - dec, n);
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += d[i];
        r.running_mean.push_back(acc / double(i + 1));
    }
    return r;
}

using VectorMap = std::function<std::vector<double>(std::span<const double>)>;

struct LipschitzOptions {
    std::size_t probes = 16;
    std::size_t refinements = 20;  // power-style refinement steps per probe
    double radius = 1e-2;          // probe displacement length
    std::uint64_t seed = 0;
};

/// Probe-based lower bound on the Lipschitz constant of `map` around `center`:
/// max over probe pairs of ||map(a) - map(b)|| / ||a - b||. Each probe starts
/// in a random direction and is refined by d <- map(x + d) - map(x), which
/// is power iteration on the Jacobian for symmetric maps.
inline double estimate_lipschitz(const VectorMap& map, std::span<const double> center, const LipschitzOptions& opt = {}) {
    if (opt.probes < 2) throw std::invalid_argument("estimate_lipschitz: probes must be >= 2");
    Rng rng(opt.seed);
    const std::size_t n = center.size();
    const std::vector<double> f0 = map(center);
    double best = 0.0;
    std::vector<double> x(n), dir(n);
    for (std::size_t p = 0; p < opt.probes; ++p) {
        for (auto& v : dir) v = rng.normal();
        for (std::size_t r = 0; r <= opt.refinements; ++r) {
            double nd = 0;
            for (double v : dir) nd += v * v;
            nd = std::sqrt(nd);
            if (!(nd > 0)) break;
            for (std::size_t i = 0; i < n; ++i) x[i] = center[i] + opt.radius * dir[i] / nd;
            const auto f1 = map(x);
            double num = 0, den = 0;
            for (std::size_t i = 0; i < f1.size(); ++i) num += (f1[i] - f0[i]) * (f1[i] - f0[i]);
            for (std::size_t i = 0; i < n; ++i) den += (x[i] - center[i]) * (x[i] - center[i]);
            if (den == 0) break;  // identical probe pair
            best = std::max(best, std::sqrt(num / den));
            if (f1.size() != n) break;
            for (std::size_t i = 0; i < n; ++i) dir[i] = f1[i] - f0[i];
        }
    }
    return best;
}

}  // namespace mdprune
