#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mdprune/mdprune.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kDivergence = 3, kIo = 4, kInternal = 1 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string budgets;
    std::string pattern;
    std::string scope;
    std::string out;
    std::string mode = "no-mirror";
};

mdprune::RunConfig resolve(const Options& o) {
    mdprune::RunConfig cfg = o.config.empty() ? mdprune::RunConfig{} : mdprune::load_run_config(o.config);
    if (o.seed) cfg.set_seed(*o.seed);
    if (!o.budgets.empty()) cfg.export_.sparsities = cfg.ablation.sparsities = mdprune::parse_budget_list(o.budgets);
    if (!o.pattern.empty()) cfg.search.prune.pattern = mdprune::SparsityPattern::parse(o.pattern);
    if (!o.scope.empty()) cfg.export_.scope = mdprune::parse_scope(o.scope);
    if (!o.out.empty()) cfg.out = o.out;
    cfg.validate();
    return cfg;
}

void log_line(const std::string& s) { std::cerr << "[mdprune] " << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mdprune: one-shot pruning masks from a mirror-descent saliency search"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "run seed");
        sub->add_option("--budgets", o.budgets, "sparsity levels, e.g. 0.5,0.6,0.7 or 50%,60%");
        sub->add_option("--pattern", o.pattern, "unstructured or N:M (e.g. 2:4)");
        sub->add_option("--scope", o.scope, "global or per-layer");
        sub->add_option("--out", o.out, "output directory");
    };

    auto* pretrain = app.add_subcommand("pretrain", "train the dense toy model");
    auto* calibrate = app.add_subcommand("calibrate", "collect activation statistics at W0");
    auto* search = app.add_subcommand("search", "run the saliency search");
    auto* exp = app.add_subcommand("export", "write masks for every budget");
    auto* eval = app.add_subcommand("eval", "held-out perplexity for every mask");
    auto* ablate = app.add_subcommand("ablate", "compare variants over several seeds");
    auto* pipeline = app.add_subcommand("pipeline", "pretrain, calibrate, search, export, eval");
    for (auto* s : {pretrain, calibrate, search, exp, eval, ablate, pipeline}) add_common(s);
    ablate->add_option("--mode", o.mode, "no-mirror or metric-sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        const mdprune::RunConfig cfg = resolve(o);
        if (ablate->parsed()) {
            const auto mode = mdprune::parse_ablation_mode(o.mode);
            std::filesystem::create_directories(cfg.out);
            const auto data = mdprune::prepare_data(cfg);
            const auto table = mdprune::run_ablation(cfg, mode, data);
            const auto csv = cfg.out / (std::string("ablation_") + o.mode + ".csv");
            table.write_csv(csv);
            table.print(std::cout);
            log_line("wrote " + csv.string());
            return kOk;
        }

        mdprune::Pipeline p(cfg, log_line);
        if (pipeline->parsed()) p.run_all(&std::cout);
        else if (pretrain->parsed()) p.pretrain_stage();
        else if (calibrate->parsed()) p.calibrate_stage();
        else if (search->parsed()) p.search_stage();
        else if (exp->parsed()) p.export_stage();
        else if (eval->parsed()) p.eval_stage(&std::cout);
        return kOk;
    } catch (const mdprune::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const mdprune::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << '\n';
        return kDivergence;
    } catch (const mdprune::ArchiveError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInternal;
    }
}
