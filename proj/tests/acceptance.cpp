// One PASS/FAIL line per acceptance criterion. Exit status is nonzero when any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "mdprune/mdprune.hpp"
#include "oracles.hpp"
#include "random_nets.hpp"

using namespace mdprune;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail, double secs) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << (ok ? "PASS " : "FAIL ") << name << ": " << detail << " [" << secs << " s]";
    std::cout << os.str() << std::endl;
    failures += !ok;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

/// Pretrained, calibrated toy models per seed, shared by several criteria.
struct SeedCache {
    RunConfig cfg;
    PreparedData data;
    std::map<std::uint64_t, SeededRun> runs;
    std::map<std::uint64_t, std::string> w0_at_creation;
    double pretrain_seconds = 0;

    SeededRun& get(std::uint64_t seed) {
        auto it = runs.find(seed);
        if (it != runs.end()) return it->second;
        const auto t0 = Clock::now();
        auto run = prepare_seed(cfg, data, seed);
        pretrain_seconds += seconds_since(t0);
        w0_at_creation[seed] = weights_sha256(run.model);
        return runs.emplace(seed, std::move(run)).first->second;
    }
};

void autodiff_criterion() {
    const auto t0 = Clock::now();
    double worst = 0;
    for (std::uint64_t s = 0; s < 100; ++s) worst = std::max(worst, testing_util::RandomNet::make(s).max_fd_error(1e-5));
    const double secs = seconds_since(t0);
    report("autodiff-correctness", worst <= 1e-4 && secs < 10,
           "100 random nets, max relative error " + fmt(worst, 3) + " (limit 1e-4), runtime limit 10 s", secs);
}

void prox_criterion() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
        const double z = rng.uniform(-3, 3), t = rng.uniform(0, 2);
        worst = std::max(worst, std::abs(soft_threshold(z, t) - testing_util::grid_argmin(z, t)));
    }
    const double secs = seconds_since(t0);
    report("prox-oracle", worst <= 1e-6 && secs < 5,
           "1000 (z,t) pairs, max |soft_threshold - grid argmin| " + fmt(worst, 3) + " (limit 1e-6), runtime limit 5 s", secs);
}

void r24_criterion() {
    const auto t0 = Clock::now();
    const double grid[] = {-2, -1, -0.5, 0, 0.5, 1, 2};
    std::size_t feasible = 0, bad_zero = 0, bad_positive = 0;
    for (double a : grid)
        for (double b : grid)
            for (double c : grid)
                for (double d : grid) {
                    const std::array<double, 4> blk{a, b, c, d};
                    const int nz = (a != 0) + (b != 0) + (c != 0) + (d != 0);
                    const double r = r24_penalty(blk);
                    if (nz <= 2) {
                        ++feasible;
                        bad_zero += r != 0.0;
                    } else {
                        bad_positive += !(r > 0.0);
                    }
                }
    Rng rng(77);
    std::size_t increased = 0;
    for (int i = 0; i < 1000; ++i) {
        const Tensor w = rng.uniform_tensor({1, 4}, -2, 2);
        const double eta = rng.uniform(1e-4, 0.1);
        if (nm_penalty(r24_prox_step(w, eta), 2, 4) > nm_penalty(w, 2, 4)) ++increased;
    }
    const double secs = seconds_since(t0);
    report("r24-properties", bad_zero == 0 && bad_positive == 0 && increased == 0,
           std::to_string(feasible) + " grid blocks with <=2 nonzeros all have penalty 0 (" + std::to_string(bad_zero) +
               " exceptions; " + std::to_string(bad_positive) + " infeasible blocks with zero penalty); prox increased the penalty on " +
               std::to_string(increased) + "/1000 random blocks (eta <= 0.1)",
           secs);
}

struct DescentRun {
    StepSizeBound bound;
    double alpha = 0;
    DiagnosticsTrace trace;
    bool diverged = false;
};

DescentRun descent_run(SeededRun& run, const PreparedData& data, double factor) {
    ToyModel& model = run.model;
    for (auto& l : model.layers()) l.reset_search_state();
    RunConfig cfg = run.cfg;
    cfg.search.alpha_factor = factor;
    std::optional<StepSizeBound> bound;
    PruneConfig p = resolve_search_config(model, cfg, data, &bound);
    p.batch = BatchMode::Full;
    p.diagnostics = true;
    DescentRun r{*bound, p.alpha.base, {}, false};
    LmObjective obj{&model, &data.calib, BatchMode::Full, p.batch_sequences, p.seed};
    try {
        r.trace = run_search(std::span<PrunableLayer>(model.layers()), p, obj).trace;
    } catch (const DivergenceError& e) {
        r.trace = e.trace();
        r.diverged = true;
    }
    for (auto& l : model.layers()) l.reset_search_state();
    return r;
}

void descent_and_rate_criteria(SeedCache& cache) {
    const auto t0 = Clock::now();
    const double pre0 = cache.pretrain_seconds;
    std::ostringstream rates, ratios;
    bool all_pass = true, all_ratio = true, all_bregman = true;
    double min_rate = 1.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto r = descent_run(cache.get(seed), cache.data, 0.5);
        if (r.diverged) all_pass = false;
        const double rd = descent_constant(r.alpha, r.bound.lip_task, r.bound.lip_metric, r.bound.rho, r.bound.kappa);
        const auto rep = descent_check(r.trace, rd, 1e-8);
        min_rate = std::min(min_rate, rep.pass_rate);
        all_pass = all_pass && rep.pass_rate >= 0.95;
        rates << (seed > 1 ? "," : "") << fmt(rep.pass_rate, 3);
        for (std::size_t k = 1; k < r.trace.size(); ++k) all_bregman = all_bregman && r.trace.rows[k].bregman >= -1e-12;
        const auto rs = rate_summary(r.trace);
        const double ratio = rs.second_half_mean / rs.first_half_mean;
        all_ratio = all_ratio && ratio <= 0.5;
        ratios << (seed > 1 ? "," : "") << fmt(ratio, 3);
    }

    // negative control: ten times the bound
    const auto bad = descent_run(cache.get(1), cache.data, 10.0);
    std::size_t violations = 0;
    double bad_rate = 0;
    if (bad.trace.size() >= 3) {
        const double rd = descent_constant(bad.alpha, bad.bound.lip_task, bad.bound.lip_metric, bad.bound.rho, bad.bound.kappa);
        const auto rep = descent_check(bad.trace, std::max(rd, 0.0), 1e-8);
        violations = rep.holds.size() - rep.passed;
        bad_rate = rep.pass_rate;
    }
    const bool control_ok = violations > 0 || bad.diverged;
    const double secs = seconds_since(t0);
    report("sufficient-descent", all_pass && control_ok && all_bregman && secs < 120,
           "char-LM toy, stochria, alpha = 0.5 alpha_max, 100 full-batch steps; pass rate per seed {" + rates.str() +
               "} (need >= 0.95 each), Bregman >= -1e-12: " + (all_bregman ? "yes" : "no") + "; 10x alpha_max control: " +
               std::to_string(violations) + " violations, pass rate " + fmt(bad_rate, 3) + (bad.diverged ? ", diverged" : "") +
               "; includes " + fmt(cache.pretrain_seconds - pre0, 3) + " s of pretraining; runtime limit 120 s",
           secs);
    report("stationarity-trend", all_ratio, "second-half / first-half mean of ||P_{k+1}-P_k||^2 per seed {" + ratios.str() + "} (limit 0.5)", 0.0);
}

void mask_criterion(SeedCache& cache) {
    const auto t0 = Clock::now();
    SeededRun& run = cache.get(1);
    ToyModel& model = run.model;
    for (auto& l : model.layers()) l.reset_search_state();
    const PruneConfig p = resolve_search_config(model, run.cfg, cache.data);
    const auto res = run_search(model, cache.data.calib, p);
    for (auto& l : model.layers()) l.reset_search_state();
    const auto search_secs = seconds_since(t0);

    const auto t1 = Clock::now();
    const std::size_t total = model.prunable_parameter_count();
    std::vector<std::size_t> budgets;
    for (int k = 0; k <= 20; ++k) budgets.push_back(total * std::size_t(k) / 20);
    std::size_t wrong_count = 0, not_nested = 0;
    for (auto scope : {BudgetScope::Global, BudgetScope::PerLayer}) {
        const auto masks = sparsity_sweep(res.gamma_star, budgets, scope, layer_names(model));
        for (std::size_t i = 0; i < masks.size(); ++i) {
            wrong_count += count_mask(masks[i]).first != budgets[i];
            if (i)
                for (std::size_t l = 0; l < masks[i].layers.size(); ++l)
                    for (std::size_t q = 0; q < masks[i].layers[l].size(); ++q)
                        not_nested += masks[i - 1].layers[l][q] == 1.0 && masks[i].layers[l][q] == 0.0;
        }
    }
    const auto nm = export_nm(res.gamma_star, 2, 4, layer_names(model));
    const std::size_t nm_bad = nm_violations(nm, 2, 4);

    Rng rng(31337);
    std::size_t oracle_mismatch = 0;
    for (int i = 0; i < 10000; ++i) {
        const std::size_t m = 2 + rng.below(7), n = 1 + rng.below(m);
        std::vector<double> vals(m);
        for (auto& v : vals) v = rng.below(4) == 0 ? std::round(rng.uniform(-2, 2)) : rng.normal();
        const auto mask = export_nm(std::vector<Tensor>{Tensor({1, m}, vals)}, n, m);
        std::vector<std::size_t> kept;
        for (std::size_t k = 0; k < m; ++k)
            if (mask.layers[0][k] != 0.0) kept.push_back(k);
        oracle_mismatch += kept != testing_util::brute_force_nm(vals, n);
    }
    const double secs = seconds_since(t1);
    report("mask-exactness", wrong_count == 0 && not_nested == 0 && nm_bad == 0 && oracle_mismatch == 0 && secs < 30,
           "42 unstructured exports (global and per-layer) with wrong kept count: " + std::to_string(wrong_count) +
               ", nesting violations: " + std::to_string(not_nested) + ", 2:4 blocks over budget: " + std::to_string(nm_bad) +
               ", C(M,N) oracle mismatches on 10^4 blocks (M <= 8): " + std::to_string(oracle_mismatch) + "; search for Gamma* took " +
               fmt(search_secs, 3) + " s outside the timed export; runtime limit 30 s",
           secs);
}

void one_shot_criterion(SeedCache& cache) {
    const auto t0 = Clock::now();
    SeededRun& run = cache.get(1);
    ToyModel& model = run.model;
    for (auto& l : model.layers()) l.reset_search_state();
    const PruneConfig p = resolve_search_config(model, run.cfg, cache.data);
    LmObjective obj{&model, &cache.data.calib, p.batch, p.batch_sequences, p.seed};
    MirrorSearch<LmObjective> search(std::span<PrunableLayer>(model.layers()), p, obj);
    search.run(p.steps);
    const std::size_t steps_after_search = search.steps_taken();
    std::vector<Tensor> gamma;
    for (const auto& l : model.layers()) gamma.push_back(l.gamma);

    const std::vector<double> levels{0.5, 0.6, 0.7};
    const auto masks = export_masks(model, gamma, levels, SparsityPattern::unstructured(), run.cfg.export_.scope);
    const auto rep = evaluate_masks(model, masks, levels, cache.data.split.heldout);
    bool gamma_same = true;
    for (std::size_t i = 0; i < gamma.size(); ++i) gamma_same = gamma_same && model.layers()[i].gamma == gamma[i];
    std::ostringstream rows;
    bool rows_ok = rep.rows.size() == 3;
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        rows << (i ? ", " : "") << rep.rows[i].label << " ppl " << fmt(rep.rows[i].perplexity, 5);
        rows_ok = rows_ok && std::abs(rep.rows[i].achieved - levels[i]) <= 1e-3 && std::isfinite(rep.rows[i].perplexity);
    }
    const bool ok = rows_ok && gamma_same && search.steps_taken() == steps_after_search && steps_after_search == p.steps;
    for (auto& l : model.layers()) l.reset_search_state();
    report("one-shot-multi-sparsity", ok,
           "one search of " + std::to_string(steps_after_search) + " steps; step counter after 3 exports and evals: " +
               std::to_string(search.steps_taken()) + "; rows {" + rows.str() + "}",
           seconds_since(t0));
}

void ablation_criterion(SeedCache& cache) {
    const auto t0 = Clock::now();
    const double earlier_pretraining = cache.pretrain_seconds;
    AblationTable t = make_ablation_table(AblationMode::NoMirror, cache.cfg);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) run_ablation_seed(t, AblationMode::NoMirror, cache.get(seed), cache.data);
    const double uni = t.mean("mirror-descent", 0.6), nom = t.mean("no-mirror", 0.6), rnd = t.mean("random-search", 0.6);
    const double margin = (nom - uni) / nom;
    const double secs = seconds_since(t0) + earlier_pretraining;
    const bool ok = uni < nom && margin >= 0.01 && nom <= rnd && secs < 600;
    report("ablation-ordering", ok,
           "60% sparsity, 5 seeds, mean held-out ppl: mirror-descent " + fmt(uni, 6) + " < no-mirror " + fmt(nom, 6) + " (margin " +
               fmt(100 * margin, 3) + "%, need >= 1%) <= random-search " + fmt(rnd, 6) + "; runtime includes pretraining; limit 600 s",
           secs);
}

void frozen_weights_criterion(SeedCache& cache) {
    const auto t0 = Clock::now();
    // cached models went through descent, mask, one-shot and ablation runs
    bool cached_ok = true;
    for (auto& [seed, run] : cache.runs) cached_ok = cached_ok && weights_sha256(run.model) == cache.w0_at_creation.at(seed);
    const auto dir = fs::temp_directory_path() / "mdprune_acceptance_pipeline";
    fs::remove_all(dir);
    RunConfig cfg = cache.cfg;
    cfg.out = dir;
    Pipeline p(cfg);
    p.pretrain_stage();
    const std::string before = weights_sha256(p.load_model());
    const std::string recorded = p.manifest().doc()["stages"]["pretrain"]["info"]["w0_sha256"];
    p.run_all();
    const std::string after = weights_sha256(p.load_model());
    const bool ok = before == after && recorded == before && cached_ok;
    fs::remove_all(dir);
    report("frozen-weights", ok,
           "W0 sha256 " + before.substr(0, 16) + "... before and " + after.substr(0, 16) + "... after the full pipeline; " +
               std::to_string(cache.runs.size()) + " models reused by the other criteria " + (cached_ok ? "unchanged" : "CHANGED"),
           seconds_since(t0));
}

}  // namespace

int main() {
    std::cout << "acceptance criteria" << std::endl;
    autodiff_criterion();
    prox_criterion();
    r24_criterion();

    SeedCache cache;
    cache.cfg.ablation.sparsities = {0.6};
    cache.cfg.validate();
    cache.data = prepare_data(cache.cfg);
    descent_and_rate_criteria(cache);
    mask_criterion(cache);
    one_shot_criterion(cache);
    ablation_criterion(cache);
    frozen_weights_criterion(cache);

    std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
    return failures ? 1 : 0;
}
