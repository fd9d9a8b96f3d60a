#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mdprune/mirror_opt.hpp"
#include "mdprune/tensor.hpp"

namespace mdprune {

enum class BudgetScope { Global, PerLayer };

inline const char* scope_name(BudgetScope s) { return s == BudgetScope::Global ? "global" : "per-layer"; }

inline BudgetScope parse_scope(std::string_view s) {
    if (s == "global") return BudgetScope::Global;
    if (s == "per-layer") return BudgetScope::PerLayer;
    throw ConfigError("scope must be 'global' or 'per-layer', got '" + std::string(s) + "'");
}

/// Binary keep-masks for every layer plus how they were produced. Ties in
/// |Gamma| are broken by (layer, row, column), lower first.
struct Mask {
    std::vector<std::string> names;
    std::vector<Tensor> layers;
    SparsityPattern pattern;
    BudgetScope scope = BudgetScope::PerLayer;
    std::size_t budget = 0;  // requested kept count (unstructured)
    double tau = std::numeric_limits<double>::infinity();
    std::vector<double> layer_tau;
    std::string tie_rule = "lower (layer,row,col) first";

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.size();
        return n;
    }
    std::size_t kept() const {
        std::size_t n = 0;
        for (const auto& l : layers)
            for (double v : l.data()) n += v != 0.0;
        return n;
    }
    static std::size_t kept_in(const Tensor& t) {
        std::size_t n = 0;
        for (double v : t.data()) n += v != 0.0;
        return n;
    }
    double sparsity() const { return 1.0 - double(kept()) / double(total()); }
};

/// Kept count for a target sparsity, rounded to nearest.
inline std::size_t kept_for_sparsity(std::size_t total, double sparsity) {
    if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ConfigError("sparsity must lie in [0, 1]");
    return static_cast<std::size_t>(std::llround((1.0 - sparsity) * double(total)));
}

namespace detail {

struct Ranked {
    double mag;
    std::uint32_t layer;
    std::uint32_t index;
};

inline bool ranks_before(const Ranked& a, const Ranked& b) {
    if (a.mag != b.mag) return a.mag > b.mag;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.index < b.index;
}

inline std::vector<Ranked> rank_entries(std::span<const Tensor> gamma, std::size_t only_layer = SIZE_MAX) {
    std::vector<Ranked> r;
    for (std::size_t l = 0; l < gamma.size(); ++l) {
        if (only_layer != SIZE_MAX && l != only_layer) continue;
        for (std::size_t i = 0; i < gamma[l].size(); ++i)
            r.push_back({std::abs(gamma[l][i]), static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(i)});
    }
    std::sort(r.begin(), r.end(), ranks_before);
    return r;
}

/// Highest-averages (Webster) apportionment of kept counts to layers, extended
/// one unit at a time so that allocations for increasing budgets are nested.
class Apportioner {
 public:
    explicit Apportioner(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)), alloc_(sizes_.size(), 0) {
        for (std::size_t l = 0; l < sizes_.size(); ++l)
            if (sizes_[l] > 0) heap_.push(l);
    }

    const std::vector<std::size_t>& grow_to(std::size_t budget) {
        if (budget < assigned_) throw std::logic_error("apportionment can only grow");
        while (assigned_ < budget) {
            if (heap_.empty()) throw std::logic_error("budget exceeds capacity");
            const std::size_t l = heap_.top();
            heap_.pop();
            ++alloc_[l];
            ++assigned_;
            if (alloc_[l] < sizes_[l]) heap_.push(l);
        }
        return alloc_;
    }

 private:
    struct Lower {
        const Apportioner* self;
        // true when a has lower priority than b: priority n/(2a+1), ties to lower index.
        bool operator()(std::size_t a, std::size_t b) const {
            const auto& n = self->sizes_;
            const auto& k = self->alloc_;
            const unsigned __int128 lhs = (unsigned __int128)n[a] * (2 * k[b] + 1);
            const unsigned __int128 rhs = (unsigned __int128)n[b] * (2 * k[a] + 1);
            if (lhs != rhs) return lhs < rhs;
            return a > b;
        }
    };

    std::vector<std::size_t> sizes_;
    std::vector<std::size_t> alloc_;
    std::size_t assigned_ = 0;
    std::priority_queue<std::size_t, std::vector<std::size_t>, Lower> heap_{Lower{this}};
};

inline std::vector<std::string> default_names(std::size_t n) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back("layer" + std::to_string(i));
    return v;
}

inline Mask empty_mask(std::span<const Tensor> gamma, std::vector<std::string> names) {
    Mask m;
    m.names = names.empty() ? default_names(gamma.size()) : std::move(names);
    if (m.names.size() != gamma.size()) throw std::invalid_argument("one name per layer required");
    for (const auto& g : gamma) m.layers.emplace_back(g.shape());
    m.layer_tau.assign(gamma.size(), std::numeric_limits<double>::infinity());
    return m;
}

}  // namespace detail

/// Masks for several kept-count budgets from one ranking of |Gamma*|. Budgets
/// must be ascending; the returned masks are nested.
inline std::vector<Mask> sparsity_sweep(std::span<const Tensor> gamma, std::span<const std::size_t> budgets,
                                        BudgetScope scope = BudgetScope::PerLayer, std::vector<std::string> names = {}) {
    if (gamma.empty()) throw std::invalid_argument("no layers to export");
    std::size_t total = 0;
    std::vector<std::size_t> sizes;
    for (const auto& g : gamma) {
        sizes.push_back(g.size());
        total += g.size();
    }
    for (std::size_t i = 0; i < budgets.size(); ++i) {
        if (budgets[i] > total) throw ConfigError("budget " + std::to_string(budgets[i]) + " exceeds " + std::to_string(total) + " entries");
        if (i && budgets[i] < budgets[i - 1]) throw ConfigError("budget list must be sorted ascending by kept count");
    }

    std::vector<Mask> out;
    if (scope == BudgetScope::Global) {
        const auto order = detail::rank_entries(gamma);
        for (auto b : budgets) {
            Mask m = detail::empty_mask(gamma, names);
            m.scope = scope;
            m.budget = b;
            for (std::size_t i = 0; i < b; ++i) {
                m.layers[order[i].layer][order[i].index] = 1.0;
                m.layer_tau[order[i].layer] = order[i].mag;
            }
            if (b > 0) m.tau = order[b - 1].mag;
            out.push_back(std::move(m));
        }
        return out;
    }

    std::vector<std::vector<detail::Ranked>> per_layer;
    for (std::size_t l = 0; l < gamma.size(); ++l) per_layer.push_back(detail::rank_entries(gamma, l));
    detail::Apportioner app(sizes);
    for (auto b : budgets) {
        const auto& alloc = app.grow_to(b);
        Mask m = detail::empty_mask(gamma, names);
        m.scope = scope;
        m.budget = b;
        for (std::size_t l = 0; l < gamma.size(); ++l) {
            for (std::size_t i = 0; i < alloc[l]; ++i) m.layers[l][per_layer[l][i].index] = 1.0;
            if (alloc[l] > 0) {
                m.layer_tau[l] = per_layer[l][alloc[l] - 1].mag;
                m.tau = std::min(m.tau, m.layer_tau[l]);
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

/// Keeps exactly `budget` entries of largest |Gamma*|.
inline Mask export_unstructured(std::span<const Tensor> gamma, std::size_t budget, BudgetScope scope = BudgetScope::PerLayer,
                                std::vector<std::string> names = {}) {
    const std::size_t b[1] = {budget};
    return std::move(sparsity_sweep(gamma, b, scope, std::move(names)).front());
}

/// In every contiguous block of M entries along a row, keeps the N with the
/// largest |Gamma*| (lower index wins ties).
inline Mask export_nm(std::span<const Tensor> gamma, std::size_t n, std::size_t m, std::vector<std::string> names = {}) {
    if (n == 0 || n > m) throw ConfigError("N:M export needs 0 < N <= M");
    Mask out = detail::empty_mask(gamma, std::move(names));
    out.pattern = SparsityPattern::nm(n, m);
    std::vector<std::size_t> idx(m);
    for (std::size_t l = 0; l < gamma.size(); ++l) {
        const Tensor& g = gamma[l];
        if (g.rank() != 2 || g.cols() % m != 0)
            throw ConfigError("M=" + std::to_string(m) + " does not divide the rows of layer '" + out.names[l] + "' " + shape_str(g.shape()));
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t b = 0; b < g.cols(); b += m) {
                std::iota(idx.begin(), idx.end(), std::size_t{0});
                std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
                    return std::abs(g.at(r, b + x)) > std::abs(g.at(r, b + y));
                });
                for (std::size_t k = 0; k < n; ++k) out.layers[l].at(r, b + idx[k]) = 1.0;
            }
    }
    out.budget = out.kept();
    out.tau = kNaN;
    return out;
}

/// Number of blocks with more than N kept entries (0 means valid).
inline std::size_t nm_violations(const Mask& mask, std::size_t n, std::size_t m) {
    std::size_t bad = 0;
    for (const auto& t : mask.layers) {
        if (t.cols() % m != 0) return SIZE_MAX;
        for (std::size_t r = 0; r < t.rows(); ++r)
            for (std::size_t b = 0; b < t.cols(); b += m) {
                std::size_t kept = 0;
                for (std::size_t k = 0; k < m; ++k) kept += t.at(r, b + k) != 0.0;
                bad += kept > n;
            }
    }
    return bad;
}

// ---------------------------------------------------------------------------
// Mask archive (text):
//   MDMASK 1
//   pattern <unstructured|N:M>
//   scope <global|per-layer>
//   budgets <count> <kept_0> ... <kept_{count-1}>
//   mask <i> kept <k> total <t> tau <tau>
//   layer <name> <rows> <cols> tau <tau> runs <r> <len_0> ... <len_{r-1}>
// Runs alternate 0/1 over the row-major bitmap and start with a zero-run
// (which may have length 0).

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline double parse_double(const std::string& s) {
    if (s == "nan") return kNaN;
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::stod(s);
}

inline std::vector<std::size_t> run_lengths(const Tensor& bits) {
    std::vector<std::size_t> runs;
    double cur = 0.0;
    std::size_t len = 0;
    for (double v : bits.data()) {
        const double b = v != 0.0 ? 1.0 : 0.0;
        if (b == cur) {
            ++len;
        } else {
            runs.push_back(len);
            cur = b;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

inline void write_masks(const std::filesystem::path& path, std::span<const Mask> masks) {
    if (masks.empty()) throw std::invalid_argument("no masks to write");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArchiveError("cannot write mask file " + path.string());
    out << "MDMASK 1\n";
    out << "pattern " << masks[0].pattern.str() << "\n";
    out << "scope " << scope_name(masks[0].scope) << "\n";
    out << "budgets " << masks.size();
    for (const auto& m : masks) out << ' ' << m.budget;
    out << "\n";
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Mask& m = masks[i];
        out << "mask " << i << " kept " << m.kept() << " total " << m.total() << " tau " << format_double(m.tau) << "\n";
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            const auto runs = run_lengths(m.layers[l]);
            out << "layer " << m.names[l] << ' ' << m.layers[l].rows() << ' ' << m.layers[l].cols() << " tau "
                << format_double(m.layer_tau[l]) << " runs " << runs.size();
            for (auto r : runs) out << ' ' << r;
            out << "\n";
        }
    }
    if (!out) throw ArchiveError("write failed for " + path.string());
}

inline std::vector<Mask> read_masks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArchiveError("cannot open mask file " + path.string());
    auto expect = [&](const std::string& want) {
        std::string tok;
        if (!(in >> tok) || tok != want) throw ArchiveError("mask file: expected '" + want + "', got '" + tok + "'");
    };
    expect("MDMASK");
    int version = 0;
    in >> version;
    if (version != 1) throw ArchiveError("unsupported mask file version " + std::to_string(version));
    std::string pat, scope;
    expect("pattern");
    in >> pat;
    expect("scope");
    in >> scope;
    expect("budgets");
    std::size_t count = 0;
    in >> count;
    std::vector<std::size_t> budgets(count);
    for (auto& b : budgets) in >> b;
    std::vector<Mask> masks;
    for (std::size_t i = 0; i < count; ++i) {
        Mask m;
        m.pattern = SparsityPattern::parse(pat);
        m.scope = parse_scope(scope);
        m.budget = budgets[i];
        std::size_t idx, kept, total;
        std::string tau;
        expect("mask");
        in >> idx;
        expect("kept");
        in >> kept;
        expect("total");
        in >> total;
        expect("tau");
        in >> tau;
        m.tau = parse_double(tau);
        while (true) {
            const auto pos = in.tellg();
            std::string tok;
            if (!(in >> tok)) break;
            if (tok != "layer") {
                in.seekg(pos);
                break;
            }
            std::string name, ltau;
            std::size_t rows, cols, nruns;
            in >> name >> rows >> cols;
            expect("tau");
            in >> ltau;
            expect("runs");
            in >> nruns;
            Tensor bits({rows, cols});
            std::size_t at = 0;
            for (std::size_t r = 0; r < nruns; ++r) {
                std::size_t len;
                in >> len;
                if (at + len > bits.size()) throw ArchiveError("mask file: run overflows layer " + name);
                if (r % 2 == 1) std::fill_n(bits.data().begin() + at, len, 1.0);
                at += len;
            }
            if (at != bits.size()) throw ArchiveError("mask file: runs do not cover layer " + name);
            m.names.push_back(name);
            m.layers.push_back(std::move(bits));
            m.layer_tau.push_back(parse_double(ltau));
        }
        if (!in && !in.eof()) throw ArchiveError("mask file: malformed content");
        if (m.kept() != kept || m.total() != total) throw ArchiveError("mask file: kept/total header mismatch in mask " + std::to_string(i));
        masks.push_back(std::move(m));
    }
    return masks;
}

/// CSV: mask,layer,kept,total,sparsity,tau
inline void write_mask_summary(const std::filesystem::path& path, std::span<const Mask> masks) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArchiveError("cannot write " + path.string());
    out << "mask,layer,kept,total,sparsity,tau\n";
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Mask& m = masks[i];
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            const auto k = Mask::kept_in(m.layers[l]);
            out << i << ',' << m.names[l] << ',' << k << ',' << m.layers[l].size() << ','
                << format_double(1.0 - double(k) / double(m.layers[l].size())) << ',' << format_double(m.layer_tau[l]) << '\n';
        }
        out << i << ",ALL," << m.kept() << ',' << m.total() << ',' << format_double(m.sparsity()) << ',' << format_double(m.tau) << '\n';
    }
}

}  // namespace mdprune
