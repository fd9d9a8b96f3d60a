#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdprune/random.hpp"

namespace mdprune {

/// Space plus 'a'..'z'.
inline constexpr std::size_t kAlphabetSize = 27;

inline std::size_t char_to_id(char c) {
    if (c >= 'a' && c <= 'z') return static_cast<std::size_t>(c - 'a') + 1;
    if (c >= 'A' && c <= 'Z') return static_cast<std::size_t>(c - 'A') + 1;
    return 0;
}

inline char id_to_char(std::size_t id) { return id == 0 ? ' ' : static_cast<char>('a' + id - 1); }

using Sequence = std::vector<std::size_t>;

/// Token sequences of a common length. Used both for calibration/held-out
/// sets and for the batches drawn from them.
struct CalibrationSet {
    std::vector<Sequence> sequences;
    std::size_t context_length = 0;
    std::size_t vocab_size = kAlphabetSize;

    bool empty() const noexcept { return sequences.empty(); }
    std::size_t size() const noexcept { return sequences.size(); }
    std::size_t sequence_length() const { return sequences.empty() ? 0 : sequences.front().size(); }

    /// Number of next-token prediction rows.
    std::size_t row_count() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.size() - 1;
        return n;
    }

    void validate() const {
        for (const auto& s : sequences) {
            if (s.size() < 2) throw std::invalid_argument("sequence length must be at least 2");
            if (s.size() != sequences.front().size())
                throw std::invalid_argument("sequences in a batch must share one length");
            if (s.size() - 1 > context_length)
                throw std::invalid_argument("sequence longer than the context length");
            for (auto id : s)
                if (id >= vocab_size)
                    throw std::invalid_argument("token id " + std::to_string(id) + " >= vocabulary size " +
                                                std::to_string(vocab_size));
        }
    }

    CalibrationSet subset(std::size_t begin, std::size_t end) const {
        CalibrationSet out{{}, context_length, vocab_size};
        end = std::min(end, sequences.size());
        if (begin < end) out.sequences.assign(sequences.begin() + begin, sequences.begin() + end);
        return out;
    }
};

struct CorpusConfig {
    std::uint64_t seed = 7;
    std::size_t documents = 200;
    std::size_t document_length = 160;
    std::size_t successors = 3;  // likely next symbols per order-2 context
};

/// Seeded order-2 Markov text over the 27-symbol alphabet. Each context has a
/// few preferred successors plus a small uniform floor.
inline std::vector<std::string> generate_markov_corpus(const CorpusConfig& cfg) {
    if (cfg.documents == 0 || cfg.document_length < 2)
        throw std::invalid_argument("corpus generator needs documents >= 1 and length >= 2");
    Rng rng(cfg.seed);
    constexpr std::size_t V = kAlphabetSize;
    std::vector<std::array<double, V>> table(V * V);
    for (auto& row : table) {
        row.fill(0.02 / V);
        double w = 1.0;
        for (std::size_t s = 0; s < cfg.successors; ++s) {
            row[rng.below(V)] += w;
            w *= 0.45;
        }
        double z = 0.0;
        for (double p : row) z += p;
        for (double& p : row) p /= z;
    }

    std::vector<std::string> docs;
    docs.reserve(cfg.documents);
    for (std::size_t d = 0; d < cfg.documents; ++d) {
        std::string text;
        std::size_t a = rng.below(V), b = rng.below(V);
        text.push_back(id_to_char(a));
        text.push_back(id_to_char(b));
        while (text.size() < cfg.document_length) {
            const auto& row = table[a * V + b];
            double u = rng.uniform(), acc = 0.0;
            std::size_t next = V - 1;
            for (std::size_t c = 0; c < V; ++c) {
                acc += row[c];
                if (u < acc) {
                    next = c;
                    break;
                }
            }
            text.push_back(id_to_char(next));
            a = b;
            b = next;
        }
        docs.push_back(std::move(text));
    }
    return docs;
}

inline std::vector<std::string> read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
    std::vector<std::string> docs;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) docs.push_back(line);
    }
    return docs;
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<std::string>& docs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
    for (const auto& d : docs) out << d << '\n';
}

/// Cuts each document into non-overlapping windows of context+1 tokens.
inline CalibrationSet make_sequences(const std::vector<std::string>& docs, std::size_t context) {
    if (context == 0) throw std::invalid_argument("context length must be positive");
    CalibrationSet set{{}, context, kAlphabetSize};
    for (const auto& doc : docs) {
        for (std::size_t start = 0; start + context + 1 <= doc.size(); start += context) {
            Sequence s(context + 1);
            for (std::size_t i = 0; i <= context; ++i) s[i] = char_to_id(doc[start + i]);
            set.sequences.push_back(std::move(s));
        }
    }
    return set;
}

struct CorpusSplit {
    CalibrationSet train;
    CalibrationSet heldout;
};

/// Deterministic split by sequence index: the leading part trains/calibrates,
/// the tail is held out.
inline CorpusSplit split_by_index(const CalibrationSet& all, double heldout_fraction = 0.1) {
    if (all.size() < 2) throw std::invalid_argument("need at least two sequences to split");
    auto held = static_cast<std::size_t>(static_cast<double>(all.size()) * heldout_fraction + 0.5);
    held = std::clamp<std::size_t>(held, 1, all.size() - 1);
    const std::size_t cut = all.size() - held;
    return {all.subset(0, cut), all.subset(cut, all.size())};
}

}  // namespace mdprune
