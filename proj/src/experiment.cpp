#include "fedscal/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fedscal {

namespace {

using nlohmann::json;

constexpr std::uint64_t kStreamFedSplit = 0x46656453ULL;
constexpr std::uint64_t kStreamInit = 0x496e6974ULL;
constexpr std::uint64_t kStreamPretrain = 0x50726574ULL;

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename T>
void read_field(const json& section, const std::string& where, const char* key, T& out) {
    if (!section.contains(key)) return;
    try {
        out = section.at(key).get<T>();
    } catch (const std::exception& e) {
        throw ConfigError("config field '" + where + "." + key + "': " + e.what());
    }
}

void check_keys(const json& section, const std::string& where,
                std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : section.items()) {
        (void)value;
        if (std::none_of(allowed.begin(), allowed.end(),
                         [&key](const char* a) { return key == a; }))
            throw ConfigError("unknown config field '" + where + "." + key + "'");
    }
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
    const double m = mean_of(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(xs.size()));
}

json geometry_to_json(const SyntheticGeometry& g) {
    return json{{"dim", g.dim},
                {"classes", g.num_classes},
                {"samples_per_class", g.samples_per_class},
                {"target_domains", g.num_target_domains},
                {"class_mean_scale", g.class_mean_scale},
                {"within_class_std", g.within_class_std},
                {"shift_strength", g.shift_strength},
                {"translation_scale", g.translation_scale}};
}

}  // namespace

ExperimentConfig default_experiment_config() { return ExperimentConfig{}; }

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    json root;
    try {
        root = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }

    ExperimentConfig cfg;
    check_keys(root, "<root>",
               {"name", "output_dir", "seeds", "methods", "clients_per_domain",
                "hidden_dim", "geometry", "pretrain", "federation", "scal", "augment",
                "threshold", "bmd"});

    read_field(root, "<root>", "name", cfg.name);
    read_field(root, "<root>", "output_dir", cfg.output_dir);
    read_field(root, "<root>", "seeds", cfg.seeds);
    read_field(root, "<root>", "clients_per_domain", cfg.clients_per_domain);
    read_field(root, "<root>", "hidden_dim", cfg.hidden_dim);
    if (root.contains("methods")) {
        cfg.methods.clear();
        try {
            for (const json& m : root.at("methods"))
                cfg.methods.push_back(method_from_name(m.get<std::string>()));
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config field '<root>.methods': ") + e.what());
        }
    }
    if (cfg.seeds.empty()) throw ConfigError("config: at least one seed is required");
    if (cfg.methods.empty()) throw ConfigError("config: at least one method is required");

    if (root.contains("geometry")) {
        const json& g = root.at("geometry");
        check_keys(g, "geometry",
                   {"dim", "classes", "samples_per_class", "target_domains",
                    "class_mean_scale", "within_class_std", "shift_strength",
                    "translation_scale"});
        read_field(g, "geometry", "dim", cfg.geometry.dim);
        read_field(g, "geometry", "classes", cfg.geometry.num_classes);
        read_field(g, "geometry", "samples_per_class", cfg.geometry.samples_per_class);
        read_field(g, "geometry", "target_domains", cfg.geometry.num_target_domains);
        read_field(g, "geometry", "class_mean_scale", cfg.geometry.class_mean_scale);
        read_field(g, "geometry", "within_class_std", cfg.geometry.within_class_std);
        read_field(g, "geometry", "shift_strength", cfg.geometry.shift_strength);
        read_field(g, "geometry", "translation_scale", cfg.geometry.translation_scale);
    }

    if (root.contains("pretrain")) {
        const json& p = root.at("pretrain");
        check_keys(p, "pretrain", {"epochs", "learning_rate", "batch_size"});
        read_field(p, "pretrain", "epochs", cfg.pretrain.epochs);
        read_field(p, "pretrain", "learning_rate", cfg.pretrain.learning_rate);
        read_field(p, "pretrain", "batch_size", cfg.pretrain.batch_size);
    }

    if (root.contains("federation")) {
        const json& f = root.at("federation");
        check_keys(f, "federation",
                   {"rounds", "local_epochs", "batch_size", "learning_rate",
                    "participation_rate", "execution", "strategy", "prototype_refine",
                    "checkpoint_every", "checkpoint_dir"});
        read_field(f, "federation", "rounds", cfg.federation.rounds);
        read_field(f, "federation", "local_epochs", cfg.federation.local_epochs);
        read_field(f, "federation", "batch_size", cfg.federation.batch_size);
        read_field(f, "federation", "learning_rate", cfg.federation.learning_rate);
        read_field(f, "federation", "participation_rate", cfg.federation.participation_rate);
        read_field(f, "federation", "prototype_refine", cfg.federation.prototype_refine);
        read_field(f, "federation", "checkpoint_every", cfg.federation.checkpoint_every);
        read_field(f, "federation", "checkpoint_dir", cfg.federation.checkpoint_dir);
        if (f.contains("execution")) {
            const std::string mode = f.at("execution").get<std::string>();
            if (mode == "serial")
                cfg.federation.execution = ExecutionMode::Serial;
            else if (mode == "parallel")
                cfg.federation.execution = ExecutionMode::Parallel;
            else
                throw ConfigError("config field 'federation.execution': expected "
                                  "'serial' or 'parallel', got '" + mode + "'");
        }
        if (f.contains("strategy")) {
            try {
                cfg.federation.strategy =
                    strategy_from_name(f.at("strategy").get<std::string>());
            } catch (const std::exception& e) {
                throw ConfigError(std::string("config field 'federation.strategy': ") +
                                  e.what());
            }
        }
    }

    if (root.contains("scal")) {
        const json& s = root.at("scal");
        check_keys(s, "scal", {"lambda_local", "lambda_global", "beta",
                               "adaptive_threshold"});
        read_field(s, "scal", "lambda_local", cfg.federation.scal.lambda_local);
        read_field(s, "scal", "lambda_global", cfg.federation.scal.lambda_global);
        read_field(s, "scal", "beta", cfg.federation.scal.beta);
        read_field(s, "scal", "adaptive_threshold",
                   cfg.federation.scal.adaptive_threshold);
    }

    if (root.contains("augment")) {
        const json& a = root.at("augment");
        check_keys(a, "augment", {"weak_noise_std", "strong_noise_std", "strong_mask_prob"});
        read_field(a, "augment", "weak_noise_std", cfg.federation.augment.weak_noise_std);
        read_field(a, "augment", "strong_noise_std",
                   cfg.federation.augment.strong_noise_std);
        read_field(a, "augment", "strong_mask_prob",
                   cfg.federation.augment.strong_mask_prob);
    }

    if (root.contains("threshold")) {
        const json& t = root.at("threshold");
        check_keys(t, "threshold", {"tau_init", "gamma_lo", "gamma_hi"});
        read_field(t, "threshold", "tau_init", cfg.federation.threshold.tau_init);
        read_field(t, "threshold", "gamma_lo", cfg.federation.threshold.gamma_lo);
        read_field(t, "threshold", "gamma_hi", cfg.federation.threshold.gamma_hi);
        cfg.federation.threshold.tau = cfg.federation.threshold.tau_init;
    }

    if (root.contains("bmd")) {
        const json& b = root.at("bmd");
        check_keys(b, "bmd", {"selection_ratio", "ema_momentum", "alpha", "beta_dyn"});
        read_field(b, "bmd", "selection_ratio", cfg.federation.bmd.selection_ratio);
        read_field(b, "bmd", "ema_momentum", cfg.federation.bmd.ema_momentum);
        read_field(b, "bmd", "alpha", cfg.federation.bmd.alpha);
        read_field(b, "bmd", "beta_dyn", cfg.federation.bmd.beta_dyn);
    }

    if (cfg.federation.threshold.gamma_lo > 0.0 || cfg.federation.threshold.gamma_hi < 0.0)
        throw ConfigError("config: threshold requires gamma_lo <= 0 <= gamma_hi");
    if (cfg.geometry.num_classes < 2 || cfg.geometry.dim < 2)
        throw ConfigError("config: geometry requires dim >= 2 and classes >= 2");
    if (cfg.clients_per_domain < 1)
        throw ConfigError("config: clients_per_domain must be positive");
    return cfg;
}

std::string resolve_output_dir(const ExperimentConfig& cfg) {
    const char* root = std::getenv("FEDSCAL_OUTPUT_ROOT");
    if (root && *root) return std::string(root) + "/" + cfg.output_dir;
    return cfg.output_dir;
}

RunResult run_cell(const ExperimentConfig& cfg, const CellSpec& cell,
                   std::uint64_t seed) {
    const std::vector<DomainSpec> domains = make_synthetic_domains(cfg.geometry, seed);
    const std::vector<DomainSpec> targets(domains.begin() + 1, domains.end());

    RngStream split_rng(seed, {kStreamFedSplit});
    const Federation fed =
        build_federation(domains.front(), targets, cfg.clients_per_domain, split_rng,
                         static_cast<std::size_t>(cfg.federation.batch_size));

    RngStream init_rng(seed, {kStreamInit});
    const ModelParams init = make_initial_params(cfg.geometry.dim, cfg.hidden_dim,
                                                 cfg.geometry.num_classes, init_rng);
    RngStream pre_rng(seed, {kStreamPretrain});
    PretrainResult pre = pretrain_source(init, fed.source, cfg.pretrain, pre_rng);

    FederationConfig fc = cfg.federation;
    fc.method = cell.method;
    fc.scal = cell.scal;
    fc.master_seed = seed;

    RunResult result;
    result.run_id = cfg.name + "-" + cell.label + "-s" + std::to_string(seed);
    result.seed = seed;
    result.method_label = cell.label;
    result.method = cell.method;
    result.source_train_accuracy = pre.train_accuracy;
    result.federation = run_federation(fc, pre.params, fed.clients);
    return result;
}

double mean_pacc(const RoundRecord& record) {
    if (record.clients.empty()) return 0.0;
    double s = 0.0;
    for (const ClientRoundTrace& c : record.clients) s += c.pacc;
    return s / static_cast<double>(record.clients.size());
}

double delta_pacc(const std::vector<RoundRecord>& a, const std::vector<RoundRecord>& b,
                  int round) {
    auto find = [round](const std::vector<RoundRecord>& h) -> const RoundRecord& {
        for (const RoundRecord& r : h)
            if (r.round == round) return r;
        throw std::out_of_range("delta_pacc: round " + std::to_string(round) +
                                " not recorded");
    };
    return mean_pacc(find(a)) - mean_pacc(find(b));
}

void write_metrics_csv(std::ostream& os, const RunResult& result) {
    os << "run_id,seed,method,round,scope,metric,value\n";
    const std::string prefix = result.run_id + "," + std::to_string(result.seed) + "," +
                               result.method_label + ",";
    auto row = [&os, &prefix](int round, const std::string& scope, const char* metric,
                              double value) {
        os << prefix << round << ',' << scope << ',' << metric << ',' << fmt17(value)
           << '\n';
    };

    row(0, "global", "source_train_accuracy", result.source_train_accuracy);
    for (const RoundRecord& r : result.federation.history) {
        row(r.round, "global", "accuracy_avg", r.average_accuracy);
        row(r.round, "global", "drift_mean", r.mean_drift);
        row(r.round, "global", "pacc_mean", mean_pacc(r));
        for (const auto& [domain, acc] : r.domain_accuracy)
            row(r.round, "domain:" + std::to_string(domain), "accuracy", acc);
        for (const ClientRoundTrace& c : r.clients) {
            const std::string scope = "client:" + std::to_string(c.client_id);
            row(r.round, scope, "pacc", c.pacc);
            row(r.round, scope, "pacc_final", c.pacc_final);
            row(r.round, scope, "tau", c.tau);
            row(r.round, scope, "gamma", c.gamma);
            row(r.round, scope, "drift", c.drift);
            if (c.batches.empty()) continue;
            const double inv = 1.0 / static_cast<double>(c.batches.size());
            double total = 0, ent = 0, div = 0, pce = 0, sym = 0, lal = 0, gal = 0;
            SupervisionCounts sup;
            int cg = 0, sg = 0;
            for (const BatchTrace& b : c.batches) {
                total += b.loss_total;
                ent += b.loss_entropy;
                div += b.loss_diversity;
                pce += b.loss_pseudo_ce;
                sym += b.loss_symmetric_ce;
                lal += b.loss_client_align;
                gal += b.loss_server_align;
                cg += b.client_gated;
                sg += b.server_gated;
                sup.local_gated += b.supervision.local_gated;
                sup.global_gated += b.supervision.global_gated;
                sup.both_gated += b.supervision.both_gated;
                sup.local_wrong += b.supervision.local_wrong;
                sup.global_wrong += b.supervision.global_wrong;
                sup.both_wrong += b.supervision.both_wrong;
            }
            row(r.round, scope, "loss_total", total * inv);
            row(r.round, scope, "loss_entropy", ent * inv);
            row(r.round, scope, "loss_diversity", div * inv);
            row(r.round, scope, "loss_pseudo_ce", pce * inv);
            row(r.round, scope, "loss_symmetric_ce", sym * inv);
            row(r.round, scope, "loss_client_align", lal * inv);
            row(r.round, scope, "loss_server_align", gal * inv);
            row(r.round, scope, "client_gated", cg);
            row(r.round, scope, "server_gated", sg);
            row(r.round, scope, "sup_local_gated", sup.local_gated);
            row(r.round, scope, "sup_global_gated", sup.global_gated);
            row(r.round, scope, "sup_both_gated", sup.both_gated);
            row(r.round, scope, "sup_local_wrong", sup.local_wrong);
            row(r.round, scope, "sup_global_wrong", sup.global_wrong);
            row(r.round, scope, "sup_both_wrong", sup.both_wrong);
        }
    }
}

void write_run_outputs(const std::string& dir, const RunResult& result) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir + "/" + result.run_id + "_metrics.csv");
        if (!os) throw std::runtime_error("cannot write metrics for " + result.run_id);
        write_metrics_csv(os, result);
    }
    {
        std::ofstream os(dir + "/" + result.run_id + "_history.json");
        if (!os) throw std::runtime_error("cannot write history for " + result.run_id);
        os << history_to_json(result.federation.history) << '\n';
    }
    save_params(result.federation.final_params, dir + "/" + result.run_id + "_model");
    {
        json manifest;
        manifest["run_id"] = result.run_id;
        manifest["seed"] = result.seed;
        manifest["method"] = result.method_label;
        manifest["source_train_accuracy"] = result.source_train_accuracy;
        manifest["final_params_hash"] = params_hash(result.federation.final_params);
        std::ofstream os(dir + "/" + result.run_id + "_manifest.json");
        if (!os) throw std::runtime_error("cannot write manifest for " + result.run_id);
        os << manifest.dump(2) << '\n';
    }
}

std::vector<MethodSummary> summarize(const std::vector<RunResult>& results) {
    std::vector<std::string> labels;
    for (const RunResult& r : results)
        if (std::find(labels.begin(), labels.end(), r.method_label) == labels.end())
            labels.push_back(r.method_label);

    std::vector<MethodSummary> out;
    for (const std::string& label : labels) {
        MethodSummary s;
        s.label = label;
        std::vector<double> finals, bests, paccs;
        std::map<int, std::vector<double>> domains;
        for (const RunResult& r : results) {
            if (r.method_label != label || r.federation.history.empty()) continue;
            const RoundRecord& last = r.federation.history.back();
            finals.push_back(last.average_accuracy);
            paccs.push_back(mean_pacc(last));
            double best = 0.0;
            for (const RoundRecord& rec : r.federation.history)
                best = std::max(best, rec.average_accuracy);
            bests.push_back(best);
            for (const auto& [id, acc] : last.domain_accuracy) domains[id].push_back(acc);
        }
        if (finals.empty()) continue;
        s.final_accuracy_mean = mean_of(finals);
        s.final_accuracy_std = std_of(finals);
        s.best_accuracy_mean = mean_of(bests);
        s.final_pacc_mean = mean_of(paccs);
        for (const auto& [id, accs] : domains)
            s.final_domain_accuracy_mean[id] = mean_of(accs);
        out.push_back(std::move(s));
    }
    return out;
}

void write_summary(std::ostream& os, const std::vector<MethodSummary>& summaries) {
    os << "method,final_acc_mean,final_acc_std,best_acc_mean,final_pacc_mean";
    if (!summaries.empty())
        for (const auto& [id, acc] : summaries.front().final_domain_accuracy_mean) {
            (void)acc;
            os << ",domain" << id << "_acc_mean";
        }
    os << '\n';
    for (const MethodSummary& s : summaries) {
        os << s.label << ',' << fmt17(s.final_accuracy_mean) << ','
           << fmt17(s.final_accuracy_std) << ',' << fmt17(s.best_accuracy_mean) << ','
           << fmt17(s.final_pacc_mean);
        for (const auto& [id, acc] : s.final_domain_accuracy_mean) {
            (void)id;
            os << ',' << fmt17(acc);
        }
        os << '\n';
    }
}

namespace {

std::vector<MethodSummary> run_cells(const ExperimentConfig& cfg,
                                     const std::vector<CellSpec>& cells,
                                     const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<RunResult> results;
    std::ofstream combined(out_dir + "/metrics.csv");
    if (!combined) throw std::runtime_error("cannot write " + out_dir + "/metrics.csv");
    bool first = true;
    for (const CellSpec& cell : cells) {
        for (std::uint64_t seed : cfg.seeds) {
            RunResult r = run_cell(cfg, cell, seed);
            write_run_outputs(out_dir, r);
            std::ostringstream block;
            write_metrics_csv(block, r);
            std::string text = block.str();
            if (!first) text.erase(0, text.find('\n') + 1);  // keep one header
            combined << text;
            first = false;
            results.push_back(std::move(r));
        }
    }

    const std::vector<MethodSummary> summaries = summarize(results);
    {
        std::ofstream os(out_dir + "/summary.csv");
        write_summary(os, summaries);
    }
    {
        json manifest;
        manifest["name"] = cfg.name;
        manifest["seeds"] = cfg.seeds;
        json cell_list = json::array();
        for (const CellSpec& c : cells)
            cell_list.push_back(json{{"label", c.label},
                                     {"method", method_name(c.method)},
                                     {"lambda_local", c.scal.lambda_local},
                                     {"lambda_global", c.scal.lambda_global},
                                     {"beta", c.scal.beta},
                                     {"adaptive_threshold", c.scal.adaptive_threshold}});
        manifest["cells"] = std::move(cell_list);
        manifest["geometry"] = geometry_to_json(cfg.geometry);
        json runs = json::array();
        for (const RunResult& r : results) runs.push_back(r.run_id);
        manifest["runs"] = std::move(runs);
        std::ofstream os(out_dir + "/manifest.json");
        os << manifest.dump(2) << '\n';
    }
    return summaries;
}

}  // namespace

std::vector<MethodSummary> run_experiment(const ExperimentConfig& cfg) {
    std::vector<CellSpec> cells;
    for (Method m : cfg.methods)
        cells.push_back(CellSpec{method_name(m), m, cfg.federation.scal});
    return run_cells(cfg, cells, resolve_output_dir(cfg));
}

std::vector<CellSpec> scal_ablation_cells(const SCAlConfig& base) {
    SCAlConfig none = base, local_only = base, global_only = base;
    none.lambda_local = 0.0;
    none.lambda_global = 0.0;
    local_only.lambda_global = 0.0;
    global_only.lambda_local = 0.0;
    return {CellSpec{"scal-none", Method::FedSCAl, none},
            CellSpec{"scal-local", Method::FedSCAl, local_only},
            CellSpec{"scal-global", Method::FedSCAl, global_only},
            CellSpec{"scal-both", Method::FedSCAl, base}};
}

std::vector<CellSpec> threshold_ablation_cells(const SCAlConfig& base) {
    SCAlConfig fixed = base, adaptive = base;
    fixed.adaptive_threshold = false;
    adaptive.adaptive_threshold = true;
    return {CellSpec{"thr-fixed", Method::FedSCAl, fixed},
            CellSpec{"thr-adaptive", Method::FedSCAl, adaptive}};
}

std::vector<MethodSummary> run_ablation(const ExperimentConfig& cfg,
                                        const std::string& which) {
    std::vector<CellSpec> cells;
    if (which == "scal" || which == "all") {
        const auto scal = scal_ablation_cells(cfg.federation.scal);
        cells.insert(cells.end(), scal.begin(), scal.end());
    }
    if (which == "threshold" || which == "all") {
        const auto thr = threshold_ablation_cells(cfg.federation.scal);
        cells.insert(cells.end(), thr.begin(), thr.end());
    }
    if (cells.empty())
        throw std::invalid_argument("run_ablation: unknown selector '" + which +
                                    "' (expected scal, threshold, or all)");
    return run_cells(cfg, cells, resolve_output_dir(cfg) + "/ablation_" + which);
}

}  // namespace fedscal
