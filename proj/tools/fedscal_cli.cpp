#include <omp.h>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedscal/experiment.hpp"

namespace {

using namespace fedscal;

ExperimentConfig load_or_default(const std::string& path) {
    if (path.empty()) return default_experiment_config();
    return load_experiment_config(path);
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& methods,
                     const std::vector<std::uint64_t>& seeds, int rounds,
                     const std::string& output, const std::string& execution) {
    if (!methods.empty()) {
        cfg.methods.clear();
        for (const std::string& m : methods) cfg.methods.push_back(method_from_name(m));
    }
    if (!seeds.empty()) cfg.seeds = seeds;
    if (rounds > 0) cfg.federation.rounds = rounds;
    if (!output.empty()) cfg.output_dir = output;
    if (!execution.empty()) {
        if (execution == "serial")
            cfg.federation.execution = ExecutionMode::Serial;
        else if (execution == "parallel")
            cfg.federation.execution = ExecutionMode::Parallel;
        else
            throw ConfigError("--execution expects 'serial' or 'parallel'");
    }
}

std::vector<RoundRecord> load_history(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open history file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return history_from_json(buf.str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedscal: federated source-free domain adaptation simulator"};
    app.require_subcommand(1);

    std::string config_path, output, execution, which = "all";
    std::vector<std::string> methods;
    std::vector<std::uint64_t> seeds;
    int rounds = 0;
    int threads = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config JSON");
        sub->add_option("--methods", methods, "override methods (loa,fedloa,fedscal)")
            ->delimiter(',');
        sub->add_option("--seeds", seeds, "override seeds")->delimiter(',');
        sub->add_option("--rounds", rounds, "override communication rounds");
        sub->add_option("--output", output, "override output directory");
        sub->add_option("--execution", execution, "serial or parallel");
        sub->add_option("--threads", threads, "OpenMP thread count");
    };

    CLI::App* run = app.add_subcommand("run", "run every (method x seed) cell");
    add_common(run);

    CLI::App* ablate = app.add_subcommand("ablate", "run ablation grids");
    add_common(ablate);
    ablate->add_option("--which", which, "scal, threshold, or all");

    CLI::App* pretrain = app.add_subcommand("pretrain", "pretrain the source model only");
    add_common(pretrain);
    std::string model_out = "source_model";
    std::uint64_t pre_seed = 1;
    pretrain->add_option("--seed", pre_seed, "seed for data and init");
    pretrain->add_option("--out", model_out, "output basename for the model dump");

    CLI::App* compare = app.add_subcommand("compare", "pseudo-accuracy delta of two runs");
    std::string history_a, history_b, compare_out, metric = "pacc";
    compare->add_option("history_a", history_a, "history JSON of run A")->required();
    compare->add_option("history_b", history_b, "history JSON of run B")->required();
    compare->add_option("--metric", metric, "pacc or accuracy");
    compare->add_option("--out", compare_out, "CSV output path (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (threads > 0) omp_set_num_threads(threads);

        if (run->parsed() || ablate->parsed()) {
            ExperimentConfig cfg = load_or_default(config_path);
            apply_overrides(cfg, methods, seeds, rounds, output, execution);
            const auto summaries = run->parsed() ? run_experiment(cfg)
                                                 : run_ablation(cfg, which);
            std::cout << "wrote results under " << resolve_output_dir(cfg) << "\n";
            write_summary(std::cout, summaries);
            return 0;
        }

        if (pretrain->parsed()) {
            ExperimentConfig cfg = load_or_default(config_path);
            apply_overrides(cfg, methods, seeds, rounds, output, execution);
            const auto domains = make_synthetic_domains(cfg.geometry, pre_seed);
            RngStream split_rng(pre_seed, {0x46656453ULL});
            const std::vector<DomainSpec> targets(domains.begin() + 1, domains.end());
            const Federation fed = build_federation(
                domains.front(), targets, cfg.clients_per_domain, split_rng,
                static_cast<std::size_t>(cfg.federation.batch_size));
            RngStream init_rng(pre_seed, {0x496e6974ULL});
            const ModelParams init = make_initial_params(
                cfg.geometry.dim, cfg.hidden_dim, cfg.geometry.num_classes, init_rng);
            RngStream pre_rng(pre_seed, {0x50726574ULL});
            const PretrainResult result =
                pretrain_source(init, fed.source, cfg.pretrain, pre_rng);
            save_params(result.params, model_out);
            std::cout << "source train accuracy: " << result.train_accuracy << "\n"
                      << "model written to " << model_out << ".bin/.json\n";
            return 0;
        }

        if (compare->parsed()) {
            const auto a = load_history(history_a);
            const auto b = load_history(history_b);
            std::ostringstream csv;
            csv << "round,delta_" << metric << "\n";
            for (const RoundRecord& r : a) {
                double delta = 0.0;
                if (metric == "pacc") {
                    delta = delta_pacc(a, b, r.round);
                } else if (metric == "accuracy") {
                    for (const RoundRecord& rb : b)
                        if (rb.round == r.round)
                            delta = r.average_accuracy - rb.average_accuracy;
                } else {
                    throw std::runtime_error("unknown metric: " + metric);
                }
                csv << r.round << ',' << delta << '\n';
            }
            if (compare_out.empty()) {
                std::cout << csv.str();
            } else {
                std::ofstream os(compare_out);
                os << csv.str();
                std::cout << "wrote " << compare_out << "\n";
            }
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
