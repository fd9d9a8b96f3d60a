#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdprune/archive.hpp"
#include "mdprune/corpus.hpp"
#include "mdprune/diagnostics.hpp"
#include "mdprune/mask.hpp"
#include "mdprune/mirror_opt.hpp"
#include "mdprune/model.hpp"

namespace mdprune {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

struct CorpusSection {
    std::optional<std::string> path;
    std::optional<std::uint64_t> generator_seed = 7;
    std::size_t documents = 200;
    std::size_t document_length = 160;
    std::size_t successors = 3;
    double heldout_fraction = 0.1;
};

struct CalibrationSection {
    std::size_t sequences = 32;
    double sample_fraction = 0.5;
};

struct SearchSection {
    PruneConfig prune;
    std::optional<MetricKind> metric;    // unset: stochria (unstructured) or wanda (N:M)
    std::optional<double> alpha_factor;  // alpha = factor * alpha_max when set
    LipschitzOptions lipschitz{4, 10, 1e-2, 0};
};

struct ExportSection {
    std::vector<double> sparsities{0.5, 0.6, 0.7};
    BudgetScope scope = BudgetScope::PerLayer;
};

struct AblationSection {
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<double> sparsities{0.5, 0.6, 0.7};
    std::vector<MetricKind> metrics{MetricKind::Magnitude, MetricKind::Wanda, MetricKind::Ria, MetricKind::StochRia};
    double l2 = 1e-2;
    double no_mirror_rho = 1e-5;
};

struct RunConfig {
    std::uint64_t seed = 1;
    CorpusSection corpus;
    ToyModelConfig model;
    PretrainConfig pretrain{600, 0.01, 16, 1};
    CalibrationSection calibration;
    SearchSection search;
    ExportSection export_;
    AblationSection ablation;
    fs::path out = "run";

    RunConfig() {
        search.prune.alpha.base = 1e-3;
        search.prune.steps = 100;
        set_seed(seed);
    }

    /// Applies `seed` to everything derived from it.
    void set_seed(std::uint64_t s) {
        seed = s;
        model.seed = s;
        pretrain.seed = derive_seed(s, 1);
        search.prune.seed = derive_seed(s, 2);
        search.prune.metric.seed = derive_seed(s, 3);
        search.lipschitz.seed = derive_seed(s, 4);
    }

    json to_json() const;
    void validate();
};

namespace detail {

inline void check_keys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError("unknown config key '" + (section.empty() ? k : section + "." + k) + "'");
}

template <class T>
void read(const json& j, const char* key, T& dst, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + section + "." + key + "' has the wrong type");
    }
}

template <class T>
void read_opt(const json& j, const char* key, std::optional<T>& dst, const std::string& section) {
    if (!j.contains(key)) return;
    if (j.at(key).is_null()) {
        dst.reset();
        return;
    }
    T v{};
    read(j, key, v, section);
    dst = v;
}

}  // namespace detail

inline json RunConfig::to_json() const {
    json metrics = json::array();
    for (auto m : ablation.metrics) metrics.push_back(metric_name(m));
    const auto& p = search.prune;
    return {
        {"seed", seed},
        {"corpus",
         {{"path", corpus.path ? json(*corpus.path) : json(nullptr)},
          {"generator_seed", corpus.generator_seed ? json(*corpus.generator_seed) : json(nullptr)},
          {"documents", corpus.documents},
          {"document_length", corpus.document_length},
          {"successors", corpus.successors},
          {"heldout_fraction", corpus.heldout_fraction}}},
        {"model", {{"depth", model.depth}, {"width", model.width}, {"mlp_width", model.mlp_width}, {"context", model.context}}},
        {"pretrain", {{"steps", pretrain.steps}, {"learning_rate", pretrain.learning_rate}, {"batch_sequences", pretrain.batch_sequences}}},
        {"calibration", {{"sequences", calibration.sequences}, {"sample_fraction", calibration.sample_fraction}}},
        {"search",
         {{"rho", p.rho},
          {"kappa", p.kappa},
          {"lambda", p.lambda},
          {"alpha", p.alpha.base},
          {"alpha_factor", search.alpha_factor ? json(*search.alpha_factor) : json(nullptr)},
          {"warmup", p.alpha.warmup},
          {"steps", p.steps},
          {"metric", search.metric ? json(metric_name(*search.metric)) : json(nullptr)},
          {"ria_exponent", p.metric.ria_exponent},
          {"pattern", p.pattern.str()},
          {"batch", p.batch == BatchMode::Full ? "full" : "minibatch"},
          {"batch_sequences", p.batch_sequences},
          {"straight_through", p.straight_through},
          {"nm_eta", p.nm_eta ? json(*p.nm_eta) : json(nullptr)},
          {"diagnostics", p.diagnostics},
          {"lipschitz_probes", search.lipschitz.probes},
          {"lipschitz_refinements", search.lipschitz.refinements}}},
        {"export", {{"sparsities", export_.sparsities}, {"scope", scope_name(export_.scope)}}},
        {"ablation", {{"seeds", ablation.seeds}, {"sparsities", ablation.sparsities}, {"metrics", metrics}, {"l2", ablation.l2}, {"no_mirror_rho", ablation.no_mirror_rho}}},
        {"output", {{"dir", out.string()}}},
    };
}

inline void check_sparsities(const std::vector<double>& v, const char* where) {
    if (v.empty()) throw ConfigError(std::string(where) + ": at least one sparsity level required");
    for (double s : v)
        if (!(s >= 0.0 && s < 1.0)) throw ConfigError(std::string(where) + ": sparsity must lie in [0, 1)");
}

inline void RunConfig::validate() {
    model.vocab = kAlphabetSize;
    try {
        model.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (!(corpus.heldout_fraction > 0 && corpus.heldout_fraction < 1)) throw ConfigError("corpus.heldout_fraction must lie in (0, 1)");
    if (calibration.sequences == 0) throw ConfigError("calibration.sequences must be positive");
    try {
        check_sample_fraction(calibration.sample_fraction);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (search.alpha_factor && !(*search.alpha_factor > 0)) throw ConfigError("search.alpha_factor must be > 0");
    if (pretrain.batch_sequences == 0) throw ConfigError("pretrain.batch_sequences must be positive");
    check_sparsities(export_.sparsities, "export.sparsities");
    check_sparsities(ablation.sparsities, "ablation.sparsities");
    if (ablation.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
    if (!(ablation.l2 >= 0) || !(ablation.no_mirror_rho >= 0)) throw ConfigError("ablation.l2 and ablation.no_mirror_rho must be >= 0");
    const std::size_t ins[2] = {model.width, model.mlp_width};
    search.prune.metric.sample_fraction = calibration.sample_fraction;
    search.prune.metric.kind = search.metric.value_or(search.prune.pattern.kind == PatternKind::NM ? MetricKind::Wanda : MetricKind::StochRia);
    search.prune.validate(ins);
}

/// Strict parse: unknown keys and wrong types are ConfigErrors.
inline RunConfig parse_run_config(const json& j) {
    RunConfig c;
    detail::check_keys(j, "", {"seed", "corpus", "model", "pretrain", "calibration", "search", "export", "ablation", "output"});
    std::uint64_t seed = c.seed;
    detail::read(j, "seed", seed, "");
    c.set_seed(seed);

    if (j.contains("corpus")) {
        const auto& s = j["corpus"];
        detail::check_keys(s, "corpus", {"path", "generator_seed", "documents", "document_length", "successors", "heldout_fraction"});
        detail::read_opt(s, "path", c.corpus.path, "corpus");
        detail::read_opt(s, "generator_seed", c.corpus.generator_seed, "corpus");
        detail::read(s, "documents", c.corpus.documents, "corpus");
        detail::read(s, "document_length", c.corpus.document_length, "corpus");
        detail::read(s, "successors", c.corpus.successors, "corpus");
        detail::read(s, "heldout_fraction", c.corpus.heldout_fraction, "corpus");
    }
    if (j.contains("model")) {
        const auto& s = j["model"];
        detail::check_keys(s, "model", {"depth", "width", "mlp_width", "context"});
        detail::read(s, "depth", c.model.depth, "model");
        detail::read(s, "width", c.model.width, "model");
        detail::read(s, "mlp_width", c.model.mlp_width, "model");
        detail::read(s, "context", c.model.context, "model");
    }
    if (j.contains("pretrain")) {
        const auto& s = j["pretrain"];
        detail::check_keys(s, "pretrain", {"steps", "learning_rate", "batch_sequences"});
        detail::read(s, "steps", c.pretrain.steps, "pretrain");
        detail::read(s, "learning_rate", c.pretrain.learning_rate, "pretrain");
        detail::read(s, "batch_sequences", c.pretrain.batch_sequences, "pretrain");
    }
    if (j.contains("calibration")) {
        const auto& s = j["calibration"];
        detail::check_keys(s, "calibration", {"sequences", "sample_fraction"});
        detail::read(s, "sequences", c.calibration.sequences, "calibration");
        detail::read(s, "sample_fraction", c.calibration.sample_fraction, "calibration");
    }
    if (j.contains("search")) {
        const auto& s = j["search"];
        detail::check_keys(s, "search",
                           {"rho", "kappa", "lambda", "alpha", "alpha_factor", "warmup", "steps", "metric", "ria_exponent", "pattern",
                            "batch", "batch_sequences", "straight_through", "nm_eta", "diagnostics", "lipschitz_probes",
                            "lipschitz_refinements"});
        auto& p = c.search.prune;
        detail::read(s, "rho", p.rho, "search");
        detail::read(s, "kappa", p.kappa, "search");
        detail::read(s, "lambda", p.lambda, "search");
        detail::read(s, "alpha", p.alpha.base, "search");
        detail::read_opt(s, "alpha_factor", c.search.alpha_factor, "search");
        detail::read(s, "warmup", p.alpha.warmup, "search");
        detail::read(s, "steps", p.steps, "search");
        std::optional<std::string> metric;
        std::string pattern = p.pattern.str(), batch = "full";
        detail::read_opt(s, "metric", metric, "search");
        if (metric) {
            try {
                c.search.metric = parse_metric(*metric);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        }
        detail::read(s, "ria_exponent", p.metric.ria_exponent, "search");
        detail::read(s, "pattern", pattern, "search");
        p.pattern = SparsityPattern::parse(pattern);
        detail::read(s, "batch", batch, "search");
        if (batch != "full" && batch != "minibatch") throw ConfigError("search.batch must be 'full' or 'minibatch'");
        p.batch = batch == "full" ? BatchMode::Full : BatchMode::Minibatch;
        detail::read(s, "batch_sequences", p.batch_sequences, "search");
        detail::read(s, "straight_through", p.straight_through, "search");
        detail::read_opt(s, "nm_eta", p.nm_eta, "search");
        detail::read(s, "diagnostics", p.diagnostics, "search");
        detail::read(s, "lipschitz_probes", c.search.lipschitz.probes, "search");
        detail::read(s, "lipschitz_refinements", c.search.lipschitz.refinements, "search");
    }
    if (j.contains("export")) {
        const auto& s = j["export"];
        detail::check_keys(s, "export", {"sparsities", "scope"});
        detail::read(s, "sparsities", c.export_.sparsities, "export");
        std::string scope = scope_name(c.export_.scope);
        detail::read(s, "scope", scope, "export");
        c.export_.scope = parse_scope(scope);
    }
    if (j.contains("ablation")) {
        const auto& s = j["ablation"];
        detail::check_keys(s, "ablation", {"seeds", "sparsities", "metrics", "l2", "no_mirror_rho"});
        detail::read(s, "seeds", c.ablation.seeds, "ablation");
        detail::read(s, "sparsities", c.ablation.sparsities, "ablation");
        std::vector<std::string> metrics;
        detail::read(s, "metrics", metrics, "ablation");
        if (!metrics.empty()) {
            c.ablation.metrics.clear();
            for (const auto& m : metrics) {
                try {
                    c.ablation.metrics.push_back(parse_metric(m));
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(e.what());
                }
            }
        }
        detail::read(s, "l2", c.ablation.l2, "ablation");
        detail::read(s, "no_mirror_rho", c.ablation.no_mirror_rho, "ablation");
    }
    if (j.contains("output")) {
        const auto& s = j["output"];
        detail::check_keys(s, "output", {"dir"});
        std::string dir = c.out.string();
        detail::read(s, "dir", dir, "output");
        c.out = dir;
    }

    c.validate();
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

/// "0.5,0.6" or "50%,60%" into sparsity fractions.
inline std::vector<double> parse_budget_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw ConfigError("empty entry in budget list '" + text + "'");
        const bool pct = item.back() == '%';
        if (pct) item.pop_back();
        double v;
        try {
            std::size_t used = 0;
            v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ConfigError("malformed budget '" + item + "'");
        }
        out.push_back(pct ? v / 100.0 : v);
    }
    check_sparsities(out, "--budgets");
    return out;
}

// ---------------------------------------------------------------------------
// Data and stages shared by the CLI, the ablations and the acceptance suite

struct PreparedData {
    std::vector<std::string> documents;
    CorpusSplit split;
    CalibrationSet calib;
    std::string corpus_sha256;
};

inline std::vector<std::string> load_documents(const CorpusSection& c) {
    if (c.path) {
        if (fs::exists(*c.path)) return read_corpus(*c.path);
        if (!c.generator_seed) throw ConfigError("corpus file '" + *c.path + "' not found and no corpus.generator_seed given");
    }
    if (!c.generator_seed) throw ConfigError("no corpus: set corpus.path or corpus.generator_seed");
    return generate_markov_corpus(CorpusConfig{*c.generator_seed, c.documents, c.document_length, c.successors});
}

inline PreparedData prepare_data(const RunConfig& cfg) {
    PreparedData d;
    d.documents = load_documents(cfg.corpus);
    std::string joined;
    for (const auto& doc : d.documents) joined += doc + "\n";
    d.corpus_sha256 = sha256_hex(joined);
    d.split = split_by_index(make_sequences(d.documents, cfg.model.context), cfg.corpus.heldout_fraction);
    if (d.split.train.empty() || d.split.heldout.empty()) throw ConfigError("corpus too small for a train/held-out split");
    d.calib = d.split.train.subset(0, cfg.calibration.sequences);
    return d;
}

inline ToyModel pretrain_model(const RunConfig& cfg, const PreparedData& data) {
    DenseWeights w = random_weights(cfg.model);
    pretrain(cfg.model, w, data.split.train, cfg.pretrain);
    return ToyModel::from_weights(cfg.model, std::move(w));
}

inline RowSample calibration_sample(const RunConfig& cfg) { return {cfg.calibration.sample_fraction, cfg.search.prune.metric.seed}; }

inline void calibrate(ToyModel& model, const RunConfig& cfg, const PreparedData& data) {
    attach_activation_stats(model, data.calib, calibration_sample(cfg));
}

/// Search config with the step size resolved (fixed, or a factor of the
/// estimated bound). Fills `bound` when an estimate was made.
inline PruneConfig resolve_search_config(const ToyModel& model, const RunConfig& cfg, const PreparedData& data,
                                         std::optional<StepSizeBound>* bound = nullptr) {
    PruneConfig p = cfg.search.prune;
    if (cfg.search.alpha_factor) {
        LmObjective obj{&model, &data.calib, BatchMode::Full, p.batch_sequences, p.seed};
        const auto lp = estimate_lipschitz(std::span<const PrunableLayer>(model.layers()), p.metric, obj, cfg.search.lipschitz);
        const auto b = StepSizeBound::make(lp.lip_task, lp.lip_metric, p.rho, p.kappa);
        p.alpha.base = *cfg.search.alpha_factor * b.alpha_max;
        if (bound) *bound = b;
    }
    return p;
}

inline std::size_t kept_for(const ToyModel& model, double sparsity) { return kept_for_sparsity(model.prunable_parameter_count(), sparsity); }

inline std::vector<std::string> layer_names(const ToyModel& model) {
    std::vector<std::string> n;
    for (const auto& l : model.layers()) n.push_back(l.name());
    return n;
}

/// Masks for the given sparsities (ascending sparsity order), or the single
/// N:M mask.
inline std::vector<Mask> export_masks(const ToyModel& model, std::span<const Tensor> gamma, const std::vector<double>& sparsities,
                                      const SparsityPattern& pattern, BudgetScope scope) {
    if (pattern.kind == PatternKind::NM) return {export_nm(gamma, pattern.n, pattern.m, layer_names(model))};
    std::vector<double> sorted = sparsities;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    std::vector<std::size_t> budgets;
    for (double s : sorted) budgets.push_back(kept_for(model, s));
    auto masks = sparsity_sweep(gamma, budgets, scope, layer_names(model));
    std::reverse(masks.begin(), masks.end());
    return masks;
}

/// exp(mean next-token NLL) on held-out data under W0 (Hadamard) mask.
inline double evaluate_perplexity(const ToyModel& model, const Mask* mask, const CalibrationSet& heldout) {
    if (heldout.empty()) throw std::invalid_argument("held-out set is empty");
    std::vector<Tensor> w;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        if (mask) {
            if (mask->layers.size() != model.layers().size()) throw std::invalid_argument("mask has the wrong number of layers");
            w.push_back(apply_mask(model.layers()[i], mask->layers[i]));
        } else {
            w.push_back(model.layers()[i].w0());
        }
    }
    const auto [nll, count] = total_nll(model, w, heldout);
    return std::exp(nll / double(count));
}

inline std::string weights_sha256(const ToyModel& model) {
    TensorArchive ar;
    for (const auto& l : model.layers()) ar.add(l.name(), l.w0());
    return sha256_hex(ar.serialize());
}

// ---------------------------------------------------------------------------
// Stats archive

inline TensorArchive stats_archive(const ToyModel& model, const RunConfig& cfg) {
    TensorArchive ar;
    json layers = json::array();
    for (const auto& l : model.layers()) {
        ar.add(l.name() + "/col_norms", Tensor({l.in_features()}, l.stats.col_norms));
        ar.add(l.name() + "/sampled_col_norms", Tensor({l.in_features()}, l.sampled_stats.col_norms));
        layers.push_back({{"name", l.name()}, {"rows", l.stats.sample_count}, {"sampled_rows", l.sampled_stats.sample_count}});
    }
    ar.metadata()["kind"] = "activation-stats";
    ar.metadata()["sample_fraction"] = cfg.calibration.sample_fraction;
    ar.metadata()["sample_seed"] = cfg.search.prune.metric.seed;
    ar.metadata()["calibration_sequences"] = cfg.calibration.sequences;
    ar.metadata()["layers"] = layers;
    return ar;
}

inline void load_stats(ToyModel& model, const TensorArchive& ar) {
    if (ar.metadata().value("kind", "") != "activation-stats") throw ArchiveError("archive does not hold activation statistics");
    for (auto& l : model.layers()) {
        const Tensor full = ar.get(l.name() + "/col_norms"), sub = ar.get(l.name() + "/sampled_col_norms");
        if (full.size() != l.in_features() || sub.size() != l.in_features()) throw ArchiveError("stats shape mismatch for " + l.name());
        l.stats.col_norms.assign(full.data().begin(), full.data().end());
        l.sampled_stats.col_norms.assign(sub.data().begin(), sub.data().end());
        l.sampled_stats.sample_fraction = ar.metadata().at("sample_fraction");
        l.sampled_stats.sample_seed = ar.metadata().at("sample_seed");
    }
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
    std::string label;  // requested sparsity or N:M pattern
    std::string pattern;
    double requested = kNaN;
    double achieved = kNaN;
    std::size_t kept = 0, total = 0;
    double perplexity = kNaN;
    double dense_perplexity = kNaN;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<Mask> masks;

    void write_csv(const fs::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw ArchiveError("cannot write " + path.string());
        out << "budget,pattern,requested_sparsity,achieved_sparsity,kept,total,perplexity,dense_perplexity\n" << std::setprecision(10);
        for (const auto& r : rows)
            out << r.label << ',' << r.pattern << ',' << r.requested << ',' << r.achieved << ',' << r.kept << ',' << r.total << ','
                << r.perplexity << ',' << r.dense_perplexity << '\n';
    }

    void write_layer_csv(const fs::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw ArchiveError("cannot write " + path.string());
        out << "budget,layer,kept,total,sparsity\n" << std::setprecision(10);
        for (std::size_t i = 0; i < masks.size(); ++i)
            for (std::size_t l = 0; l < masks[i].layers.size(); ++l) {
                const auto k = Mask::kept_in(masks[i].layers[l]);
                const auto t = masks[i].layers[l].size();
                out << rows[i].label << ',' << masks[i].names[l] << ',' << k << ',' << t << ',' << 1.0 - double(k) / double(t) << '\n';
            }
    }

    void print(std::ostream& os) const {
        os << std::left << std::setw(10) << "budget" << std::setw(14) << "pattern" << std::right << std::setw(10) << "sparsity"
           << std::setw(12) << "ppl" << std::setw(12) << "dense" << '\n';
        for (const auto& r : rows)
            os << std::left << std::setw(10) << r.label << std::setw(14) << r.pattern << std::right << std::fixed << std::setprecision(4)
               << std::setw(10) << r.achieved << std::setw(12) << r.perplexity << std::setw(12) << r.dense_perplexity << '\n';
        os.unsetf(std::ios::fixed);
    }
};

/// Counts kept entries directly from the bitmaps (independent of Mask::kept).
inline std::pair<std::size_t, std::size_t> count_mask(const Mask& m) {
    std::size_t kept = 0, total = 0;
    for (const auto& t : m.layers)
        for (double v : t.data()) {
            if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask entries must be 0 or 1");
            kept += v == 1.0;
            ++total;
        }
    return {kept, total};
}

inline EvalReport evaluate_masks(const ToyModel& model, std::vector<Mask> masks, const std::vector<double>& sparsities,
                                 const CalibrationSet& heldout) {
    EvalReport rep;
    const double dense = evaluate_perplexity(model, nullptr, heldout);
    std::vector<double> sorted = sparsities;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Mask& m = masks[i];
        EvalRow r;
        r.pattern = m.pattern.str();
        std::tie(r.kept, r.total) = count_mask(m);
        r.achieved = 1.0 - double(r.kept) / double(r.total);
        if (m.pattern.kind == PatternKind::NM) {
            r.label = m.pattern.str();
            r.requested = 1.0 - double(m.pattern.n) / double(m.pattern.m);
            if (nm_violations(m, m.pattern.n, m.pattern.m) != 0) throw std::logic_error("N:M mask fails validation");
        } else {
            r.requested = i < sorted.size() ? sorted[i] : kNaN;
            std::ostringstream os;
            os << std::llround(r.requested * 1000) / 10.0 << '%';
            r.label = os.str();
            if (std::abs(r.achieved - r.requested) > 1e-3) throw std::logic_error("achieved sparsity deviates from the request by more than 0.1%");
        }
        r.perplexity = evaluate_perplexity(model, &m, heldout);
        r.dense_perplexity = dense;
        rep.rows.push_back(r);
    }
    rep.masks = std::move(masks);
    return rep;
}

// ---------------------------------------------------------------------------
// Ablations

/// Gradient descent on L_task(W) + rho/2 ||S(W)||^2 + l2 ||W||^2 from W0 with
/// the search step sizes and `p.rho`. Returns the final W; `step_norms` receives the
/// Frobenius norm of each update.
inline std::vector<Tensor> no_mirror_search(const ToyModel& model, const CalibrationSet& calib, const PruneConfig& p, double l2,
                                            std::vector<double>* step_norms = nullptr) {
    const auto sal = bind_layer_metrics(model.layers(), p.metric);
    LmObjective obj{&model, &calib, p.batch, p.batch_sequences, p.seed};
    std::vector<Tensor> w = model.frozen_weights();
    for (std::size_t k = 0; k < p.steps; ++k) {
        const auto lg = obj.loss_and_grad(w, k);
        const double a = p.kappa * p.alpha.at(k);
        double nsq = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const Tensor ga = alignment_gradient(w[i], Tensor(w[i].shape()), sal[i], p.straight_through);
            for (std::size_t q = 0; q < w[i].size(); ++q) {
                const double d = a * (lg.grads[i][q] + p.rho * ga[q] + 2.0 * l2 * w[i][q]);
                w[i][q] -= d;
                nsq += d * d;
            }
            if (!w[i].all_finite()) throw DivergenceError(model.layers()[i].name(), k, {});
        }
        if (step_norms) step_norms->push_back(std::sqrt(nsq));
    }
    return w;
}

/// W0 moved by isotropic Gaussian directions, one per step, scaled to the
/// given step norms.
inline std::vector<Tensor> random_search(const ToyModel& model, std::span<const double> step_norms, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> w = model.frozen_weights();
    for (double n : step_norms) {
        std::vector<Tensor> d;
        double sq = 0;
        for (const auto& t : w) {
            d.push_back(rng.normal_tensor(t.shape(), 1.0));
            sq += frobenius_sq(d.back());
        }
        const double s = n / std::sqrt(sq);
        for (std::size_t i = 0; i < w.size(); ++i)
            for (std::size_t q = 0; q < w[i].size(); ++q) w[i][q] += s * d[i][q];
    }
    return w;
}

struct AblationCell {
    std::string variant;
    std::uint64_t seed = 0;
    double sparsity = 0;
    double perplexity = 0;
};

struct AblationTable {
    std::vector<std::string> variants;
    std::vector<double> sparsities;
    std::vector<AblationCell> cells;

    double mean(const std::string& variant, double sparsity) const {
        double s = 0;
        std::size_t n = 0;
        for (const auto& c : cells)
            if (c.variant == variant && std::abs(c.sparsity - sparsity) < 1e-12) {
                s += c.perplexity;
                ++n;
            }
        return n ? s / double(n) : kNaN;
    }

    void write_csv(const fs::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw ArchiveError("cannot write " + path.string());
        out << "variant,seed,sparsity,perplexity\n" << std::setprecision(10);
        for (const auto& c : cells) out << c.variant << ',' << c.seed << ',' << c.sparsity << ',' << c.perplexity << '\n';
    }

    void print(std::ostream& os) const {
        os << std::left << std::setw(16) << "variant";
        for (double s : sparsities) {
            std::ostringstream h;
            h << "ppl@" << std::llround(s * 100) << '%';
            os << std::right << std::setw(12) << h.str();
        }
        os << '\n';
        for (const auto& v : variants) {
            os << std::left << std::setw(16) << v;
            for (double s : sparsities) os << std::right << std::fixed << std::setprecision(4) << std::setw(12) << mean(v, s);
            os << '\n';
        }
        os.unsetf(std::ios::fixed);
    }
};

enum class AblationMode { NoMirror, MetricSweep };

inline AblationMode parse_ablation_mode(std::string_view s) {
    if (s == "no-mirror") return AblationMode::NoMirror;
    if (s == "metric-sweep") return AblationMode::MetricSweep;
    throw ConfigError("unknown ablation mode '" + std::string(s) + "' (no-mirror|metric-sweep)");
}

/// Per-seed prepared model, reused across variants.
struct SeededRun {
    RunConfig cfg;
    ToyModel model;
};

inline SeededRun prepare_seed(const RunConfig& base, const PreparedData& data, std::uint64_t seed) {
    RunConfig cfg = base;
    cfg.set_seed(seed);
    ToyModel model = pretrain_model(cfg, data);
    calibrate(model, cfg, data);
    return {std::move(cfg), std::move(model)};
}

inline void add_cells(AblationTable& t, const std::string& variant, std::uint64_t seed, const ToyModel& model,
                      std::span<const Tensor> ranking, const RunConfig& cfg, const PreparedData& data) {
    const auto masks = export_masks(model, ranking, cfg.ablation.sparsities, SparsityPattern::unstructured(), cfg.export_.scope);
    std::vector<double> sorted = cfg.ablation.sparsities;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < masks.size(); ++i)
        t.cells.push_back({variant, seed, sorted[i], evaluate_perplexity(model, &masks[i], data.split.heldout)});
}

/// Runs one seed of an ablation on a prepared model, adding its cells.
inline void run_ablation_seed(AblationTable& t, AblationMode mode, SeededRun& run, const PreparedData& data) {
    const RunConfig& cfg = run.cfg;
    ToyModel& model = run.model;
    const std::uint64_t seed = cfg.seed;
    if (mode == AblationMode::NoMirror) {
        for (auto& l : model.layers()) l.reset_search_state();
        const PruneConfig p = resolve_search_config(model, cfg, data);
        LmObjective obj{&model, &data.calib, p.batch, p.batch_sequences, p.seed};
        const auto res = run_search(std::span<PrunableLayer>(model.layers()), p, obj);
        add_cells(t, "mirror-descent", seed, model, res.gamma_star, cfg, data);
        PruneConfig q = p;
        q.rho = cfg.ablation.no_mirror_rho;
        std::vector<double> norms;
        const auto w = no_mirror_search(model, data.calib, q, cfg.ablation.l2, &norms);
        add_cells(t, "no-mirror", seed, model, w, cfg, data);
        const auto r = random_search(model, norms, derive_seed(seed, 5));
        add_cells(t, "random-search", seed, model, r, cfg, data);
        for (auto& l : model.layers()) l.reset_search_state();
        return;
    }
    for (auto kind : cfg.ablation.metrics) {
        for (auto& l : model.layers()) l.reset_search_state();
        RunConfig mc = cfg;
        mc.search.metric = kind;
        mc.validate();
        const PruneConfig p = resolve_search_config(model, mc, data);
        LmObjective obj{&model, &data.calib, p.batch, p.batch_sequences, p.seed};
        const auto res = run_search(std::span<PrunableLayer>(model.layers()), p, obj);
        add_cells(t, metric_name(kind), seed, model, res.gamma_star, cfg, data);
    }
    for (auto& l : model.layers()) l.reset_search_state();
}

inline AblationTable make_ablation_table(AblationMode mode, const RunConfig& cfg) {
    AblationTable t;
    t.sparsities = cfg.ablation.sparsities;
    std::sort(t.sparsities.begin(), t.sparsities.end());
    if (mode == AblationMode::NoMirror) {
        t.variants = {"mirror-descent", "no-mirror", "random-search"};
    } else {
        for (auto k : cfg.ablation.metrics) t.variants.push_back(metric_name(k));
    }
    return t;
}

inline AblationTable run_ablation(const RunConfig& cfg, AblationMode mode, const PreparedData& data) {
    AblationTable t = make_ablation_table(mode, cfg);
    for (auto seed : cfg.ablation.seeds) {
        SeededRun run = prepare_seed(cfg, data, seed);
        run_ablation_seed(t, mode, run, data);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Manifest and pipeline stages

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// manifest.json in the output directory: config snapshot, corpus
/// fingerprint, seeds, and per-stage status, input fingerprint, output
/// checksums and timestamps.
class RunManifest {
 public:
    explicit RunManifest(fs::path dir) : dir_(std::move(dir)) {
        const auto p = path();
        if (fs::exists(p)) {
            std::ifstream in(p);
            try {
                doc_ = json::parse(in);
            } catch (const json::parse_error&) {
                throw ArchiveError("corrupt manifest " + p.string());
            }
        } else {
            doc_ = {{"stages", json::object()}};
        }
    }

    fs::path path() const { return dir_ / "manifest.json"; }
    const fs::path& dir() const { return dir_; }
    json& doc() { return doc_; }
    const json& doc() const { return doc_; }

    void save() const {
        fs::create_directories(dir_);
        const auto tmp = dir_ / "manifest.json.tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            if (!out) throw ArchiveError("cannot write manifest in " + dir_.string());
            out << doc_.dump(2) << '\n';
        }
        fs::rename(tmp, path());
    }

    /// True when the stage finished with the same inputs and every output
    /// still matches its recorded checksum.
    bool up_to_date(const std::string& stage, const std::string& inputs) const {
        if (!doc_["stages"].contains(stage)) return false;
        const auto& s = doc_["stages"][stage];
        if (s.value("status", "") != "done" || s.value("inputs", "") != inputs) return false;
        for (const auto& [file, sum] : s["outputs"].items()) {
            const auto p = dir_ / file;
            if (!fs::exists(p) || file_sha256(p) != sum.get<std::string>()) return false;
        }
        return true;
    }

    void begin(const std::string& stage, const std::string& inputs) {
        auto& s = doc_["stages"][stage];
        s = {{"status", "running"}, {"inputs", inputs}, {"started", utc_timestamp()}, {"outputs", json::object()}};
        save();
    }

    void finish(const std::string& stage, const std::vector<std::string>& outputs, const json& info = json::object()) {
        auto& s = doc_["stages"][stage];
        for (const auto& f : outputs) s["outputs"][f] = file_sha256(dir_ / f);
        s["status"] = "done";
        s["finished"] = utc_timestamp();
        if (!info.empty()) s["info"] = info;
        save();
    }

    void fail(const std::string& stage, const std::string& error) {
        auto& s = doc_["stages"][stage];
        s["status"] = "failed";
        s["finished"] = utc_timestamp();
        s["error"] = error;
        save();
    }

    std::string output_sha(const std::string& stage, const std::string& file) const {
        const auto& st = doc_["stages"];
        if (!st.contains(stage) || st[stage].value("status", "") != "done")
            throw ArchiveError("stage '" + stage + "' has not completed in " + dir_.string());
        return st[stage]["outputs"].at(file).get<std::string>();
    }

 private:
    fs::path dir_;
    json doc_;
};

struct StageResult {
    std::string stage;
    bool skipped = false;
};

using Logger = std::function<void(const std::string&)>;

/// Runs pipeline stages against an output directory. Each stage reads its
/// inputs from files written by earlier stages, so any stage can be re-run on
/// its own.
class Pipeline {
 public:
    Pipeline(RunConfig cfg, Logger log = {}) : cfg_(std::move(cfg)), manifest_(cfg_.out), log_(std::move(log)) {
        fs::create_directories(cfg_.out);
        manifest_.doc()["config"] = cfg_.to_json();
        manifest_.doc()["seeds"] = {{"run", cfg_.seed},
                                    {"model", cfg_.model.seed},
                                    {"pretrain", cfg_.pretrain.seed},
                                    {"search", cfg_.search.prune.seed},
                                    {"sample", cfg_.search.prune.metric.seed},
                                    {"corpus", cfg_.corpus.generator_seed ? json(*cfg_.corpus.generator_seed) : json(nullptr)}};
        manifest_.save();
    }

    const RunConfig& config() const { return cfg_; }
    RunManifest& manifest() { return manifest_; }
    fs::path file(const std::string& name) const { return cfg_.out / name; }

    const PreparedData& data() {
        if (!data_) {
            data_ = prepare_data(cfg_);
            manifest_.doc()["corpus_sha256"] = data_->corpus_sha256;
            manifest_.save();
        }
        return *data_;
    }

    StageResult pretrain_stage() {
        const std::string inputs = fingerprint({data().corpus_sha256, cfg_.to_json()["model"].dump(), cfg_.to_json()["pretrain"].dump(),
                                                std::to_string(cfg_.seed), std::to_string(cfg_.corpus.heldout_fraction)});
        return run_stage("pretrain", inputs, [&] {
            if (!cfg_.corpus.path) write_corpus(file("corpus.txt"), data().documents);
            ToyModel model = pretrain_model(cfg_, data());
            model.to_archive().write(file("model.mdpt"));
            std::vector<std::string> outs{"model.mdpt"};
            if (!cfg_.corpus.path) outs.push_back("corpus.txt");
            return std::make_pair(outs, json{{"w0_sha256", weights_sha256(model)}, {"dense_heldout_ppl", evaluate_perplexity(model, nullptr, data().split.heldout)}});
        });
    }

    StageResult calibrate_stage() {
        const std::string inputs = fingerprint({manifest_.output_sha("pretrain", "model.mdpt"), cfg_.to_json()["calibration"].dump(),
                                                std::to_string(cfg_.search.prune.metric.seed)});
        return run_stage("calibrate", inputs, [&] {
            ToyModel model = load_model();
            calibrate(model, cfg_, data());
            stats_archive(model, cfg_).write(file("stats.mdpt"));
            return std::make_pair(std::vector<std::string>{"stats.mdpt"}, json::object());
        });
    }

    StageResult search_stage() {
        const std::string inputs = fingerprint({manifest_.output_sha("pretrain", "model.mdpt"), manifest_.output_sha("calibrate", "stats.mdpt"),
                                                cfg_.to_json()["search"].dump(), std::to_string(cfg_.search.prune.seed)});
        return run_stage("search", inputs, [&] {
            ToyModel model = load_with_stats();
            std::optional<StepSizeBound> bound;
            const PruneConfig p = resolve_search_config(model, cfg_, data(), &bound);
            LmObjective obj{&model, &data().calib, p.batch, p.batch_sequences, p.seed};
            MirrorSearch<LmObjective> search(std::span<PrunableLayer>(model.layers()), p, obj);
            try {
                search.run(p.steps);
            } catch (const DivergenceError& e) {
                e.trace().write_csv(file("trace.csv"));
                throw;
            }
            search.trace().write_csv(file("trace.csv"));
            TensorArchive ck = save_search_checkpoint(model.layers(), p, search.step_index());
            ck.metadata()["steps_taken"] = search.steps_taken();
            ck.write(file("search.mdpt"));
            json info{{"alpha", p.alpha.base}, {"steps_taken", search.steps_taken()}};
            if (bound) {
                info["alpha_max"] = bound->alpha_max;
                info["lip_task"] = bound->lip_task;
                info["lip_task_weight_scaled"] = weight_scaled_lipschitz(bound->lip_task, model.frozen_weights());
                info["lip_metric"] = bound->lip_metric;
            }
            if (!search.trace().empty()) info["final_energy"] = search.trace().rows.back().energy;
            return std::make_pair(std::vector<std::string>{"search.mdpt", "trace.csv"}, info);
        });
    }

    StageResult export_stage() {
        const std::string inputs =
            fingerprint({manifest_.output_sha("search", "search.mdpt"), cfg_.to_json()["export"].dump(), cfg_.search.prune.pattern.str()});
        return run_stage("export", inputs, [&] {
            ToyModel model = load_model();
            const auto gamma = load_gamma(model);
            const auto masks = export_masks(model, gamma, cfg_.export_.sparsities, cfg_.search.prune.pattern, cfg_.export_.scope);
            write_masks(file("masks.mdmask"), masks);
            write_mask_summary(file("mask_summary.csv"), masks);
            return std::make_pair(std::vector<std::string>{"masks.mdmask", "mask_summary.csv"}, json{{"masks", masks.size()}});
        });
    }

    StageResult eval_stage(std::ostream* table = nullptr) {
        const std::string inputs = fingerprint({manifest_.output_sha("pretrain", "model.mdpt"), manifest_.output_sha("export", "masks.mdmask"),
                                                std::to_string(cfg_.corpus.heldout_fraction)});
        auto r = run_stage("eval", inputs, [&] {
            ToyModel model = load_model();
            const std::string before = weights_sha256(model);
            auto masks = read_masks(file("masks.mdmask"));
            const EvalReport rep = evaluate_masks(model, std::move(masks), cfg_.export_.sparsities, data().split.heldout);
            rep.write_csv(file("report.csv"));
            rep.write_layer_csv(file("report_layers.csv"));
            if (weights_sha256(model) != before) throw std::logic_error("frozen weights changed during evaluation");
            return std::make_pair(std::vector<std::string>{"report.csv", "report_layers.csv"}, json::object());
        });
        if (table) print_report(*table);
        return r;
    }

    /// Runs every stage; checks that W0 is unchanged from pretraining to the end.
    std::vector<StageResult> run_all(std::ostream* table = nullptr) {
        std::vector<StageResult> out;
        out.push_back(pretrain_stage());
        const std::string w0_before = weights_sha256(load_model());
        out.push_back(calibrate_stage());
        out.push_back(search_stage());
        out.push_back(export_stage());
        out.push_back(eval_stage(table));
        const std::string w0_after = weights_sha256(load_model());
        manifest_.doc()["w0_sha256"] = {{"before", w0_before}, {"after", w0_after}};
        manifest_.save();
        if (w0_before != w0_after) throw std::logic_error("frozen weights changed during the pipeline");
        return out;
    }

    ToyModel load_model() const {
        const auto p = file("model.mdpt");
        if (!fs::exists(p)) throw ArchiveError("missing " + p.string() + " (run the pretrain stage first)");
        return ToyModel::from_archive(TensorArchive::read(p));
    }

    ToyModel load_with_stats() const {
        ToyModel m = load_model();
        const auto p = file("stats.mdpt");
        if (!fs::exists(p)) throw ArchiveError("missing " + p.string() + " (run the calibrate stage first)");
        load_stats(m, TensorArchive::read(p));
        return m;
    }

    std::vector<Tensor> load_gamma(const ToyModel& model) const {
        const auto p = file("search.mdpt");
        if (!fs::exists(p)) throw ArchiveError("missing " + p.string() + " (run the search stage first)");
        const auto ar = TensorArchive::read(p);
        std::vector<Tensor> g;
        for (const auto& l : model.layers()) g.push_back(ar.get(l.name() + "/gamma"));
        return g;
    }

    void print_report(std::ostream& os) const {
        std::ifstream in(file("report.csv"));
        std::string line;
        std::getline(in, line);
        os << std::left << std::setw(10) << "budget" << std::setw(14) << "pattern" << std::right << std::setw(10) << "sparsity"
           << std::setw(12) << "ppl" << std::setw(12) << "dense" << '\n';
        while (std::getline(in, line)) {
            std::vector<std::string> f;
            std::stringstream ss(line);
            std::string x;
            while (std::getline(ss, x, ',')) f.push_back(x);
            if (f.size() < 8) continue;
            os << std::left << std::setw(10) << f[0] << std::setw(14) << f[1] << std::right << std::fixed << std::setprecision(4)
               << std::setw(10) << std::stod(f[3]) << std::setw(12) << std::stod(f[6]) << std::setw(12) << std::stod(f[7]) << '\n';
        }
        os.unsetf(std::ios::fixed);
    }

 private:
    static std::string fingerprint(const std::vector<std::string>& parts) {
        std::string all;
        for (const auto& p : parts) all += p + '\x1f';
        return sha256_hex(all);
    }

    template <class F>
    StageResult run_stage(const std::string& stage, const std::string& inputs, F&& body) {
        if (manifest_.up_to_date(stage, inputs)) {
            if (log_) log_(stage + ": up to date");
            return {stage, true};
        }
        if (log_) log_(stage + ": running");
        manifest_.begin(stage, inputs);
        try {
            auto [outputs, info] = body();
            manifest_.finish(stage, outputs, info);
        } catch (const std::exception& e) {
            manifest_.fail(stage, e.what());
            throw;
        }
        return {stage, false};
    }

    RunConfig cfg_;
    RunManifest manifest_;
    Logger log_;
    std::optional<PreparedData> data_;
};

}  // namespace mdprune
