#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedscal/experiment.hpp"

using namespace fedscal;

namespace {

ExperimentConfig tiny_experiment() {
    ExperimentConfig cfg;
    cfg.name = "tiny";
    cfg.seeds = {1};
    cfg.methods = {Method::FedLoA, Method::FedSCAl};
    cfg.geometry.dim = 6;
    cfg.geometry.num_classes = 3;
    cfg.geometry.samples_per_class = 12;
    cfg.geometry.num_target_domains = 2;
    cfg.clients_per_domain = 2;
    cfg.hidden_dim = 8;
    cfg.pretrain.epochs = 10;
    cfg.pretrain.batch_size = 12;
    cfg.federation.rounds = 2;
    cfg.federation.local_epochs = 1;
    cfg.federation.batch_size = 16;
    cfg.federation.participation_rate = 0.5;
    return cfg;
}

std::string write_temp(const std::string& text) {
    static int counter = 0;
    const std::string path =
        (std::filesystem::temp_directory_path() /
         ("fedscal_cfg_" + std::to_string(counter++) + ".json"))
            .string();
    std::ofstream os(path);
    os << text;
    return path;
}

}  // namespace

TEST_CASE("config: defaults load and a full file round-trips") {
    const std::string path = write_temp(R"({
        "name": "demo",
        "seeds": [3, 4],
        "methods": ["fedloa", "fedscal"],
        "clients_per_domain": 2,
        "geometry": {"dim": 8, "classes": 4, "samples_per_class": 20, "target_domains": 2},
        "federation": {"rounds": 7, "execution": "serial", "strategy": "bmd"},
        "scal": {"lambda_local": 3.0, "lambda_global": 0.3},
        "threshold": {"tau_init": 0.75}
    })");
    const ExperimentConfig cfg = load_experiment_config(path);
    CHECK(cfg.name == "demo");
    CHECK(cfg.seeds == std::vector<std::uint64_t>{3, 4});
    CHECK(cfg.methods.size() == 2);
    CHECK(cfg.geometry.dim == 8);
    CHECK(cfg.federation.rounds == 7);
    CHECK(cfg.federation.execution == ExecutionMode::Serial);
    CHECK(cfg.federation.strategy == PseudoLabelStrategy::BMD);
    CHECK(cfg.federation.scal.lambda_local == 3.0);
    CHECK(cfg.federation.scal.lambda_global == 0.3);
    CHECK(cfg.federation.threshold.tau_init == 0.75);
    std::filesystem::remove(path);
}

TEST_CASE("config: diagnostics name the offending field") {
    const std::string unknown = write_temp(R"({"geometry": {"dims": 8}})");
    CHECK_THROWS_WITH_AS(load_experiment_config(unknown),
                         doctest::Contains("geometry.dims"), ConfigError);
    std::filesystem::remove(unknown);

    const std::string bad_type = write_temp(R"({"federation": {"rounds": "ten"}})");
    CHECK_THROWS_WITH_AS(load_experiment_config(bad_type),
                         doctest::Contains("federation.rounds"), ConfigError);
    std::filesystem::remove(bad_type);

    const std::string bad_method = write_temp(R"({"methods": ["fedprox"]})");
    CHECK_THROWS_WITH_AS(load_experiment_config(bad_method),
                         doctest::Contains("methods"), ConfigError);
    std::filesystem::remove(bad_method);

    const std::string broken = write_temp("{ not json");
    CHECK_THROWS_AS(load_experiment_config(broken), ConfigError);
    std::filesystem::remove(broken);

    CHECK_THROWS_AS(load_experiment_config("/nonexistent/cfg.json"), ConfigError);
}

TEST_CASE("delta_pacc: identical runs give a zero series") {
    const ExperimentConfig cfg = tiny_experiment();
    const CellSpec cell{"fedscal", Method::FedSCAl, cfg.federation.scal};
    const RunResult a = run_cell(cfg, cell, 1);
    const RunResult b = run_cell(cfg, cell, 1);
    for (const RoundRecord& r : a.federation.history)
        CHECK(delta_pacc(a.federation.history, b.federation.history, r.round) == 0.0);
    CHECK_THROWS_AS(delta_pacc(a.federation.history, b.federation.history, 99),
                    std::out_of_range);
}

TEST_CASE("delta_pacc: hand values") {
    RoundRecord a;
    a.round = 1;
    a.clients.resize(2);
    a.clients[0].pacc = 0.8;
    a.clients[1].pacc = 0.8;
    RoundRecord b = a;
    b.clients[0].pacc = 0.7;
    b.clients[1].pacc = 0.7;
    CHECK(delta_pacc({a}, {b}, 1) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("metrics CSV: identical config and seed produce identical bytes") {
    const ExperimentConfig cfg = tiny_experiment();
    const CellSpec cell{"fedscal", Method::FedSCAl, cfg.federation.scal};
    const RunResult a = run_cell(cfg, cell, 1);
    const RunResult b = run_cell(cfg, cell, 1);
    std::ostringstream csv_a, csv_b;
    write_metrics_csv(csv_a, a);
    write_metrics_csv(csv_b, b);
    CHECK(csv_a.str() == csv_b.str());
    CHECK(csv_a.str().rfind("run_id,seed,method,round,scope,metric,value\n", 0) == 0);
}

TEST_CASE("summaries recompute exactly from the stored histories") {
    const ExperimentConfig cfg = tiny_experiment();
    std::vector<RunResult> results;
    for (std::uint64_t seed : {1ULL, 2ULL})
        results.push_back(
            run_cell(cfg, CellSpec{"fedloa", Method::FedLoA, cfg.federation.scal}, seed));

    const std::vector<MethodSummary> summaries = summarize(results);
    REQUIRE(summaries.size() == 1);
    const double expected_final = 0.5 * (results[0].federation.history.back().average_accuracy +
                                         results[1].federation.history.back().average_accuracy);
    CHECK(summaries[0].final_accuracy_mean == doctest::Approx(expected_final).epsilon(1e-15));
}

TEST_CASE("run_experiment writes a complete output tree") {
    ExperimentConfig cfg = tiny_experiment();
    const std::string dir =
        (std::filesystem::temp_directory_path() / "fedscal_exp_test").string();
    std::filesystem::remove_all(dir);
    cfg.output_dir = dir;

    const auto summaries = run_experiment(cfg);
    CHECK(summaries.size() == 2);
    CHECK(std::filesystem::exists(dir + "/metrics.csv"));
    CHECK(std::filesystem::exists(dir + "/summary.csv"));
    CHECK(std::filesystem::exists(dir + "/manifest.json"));
    CHECK(std::filesystem::exists(dir + "/tiny-fedscal-s1_metrics.csv"));
    CHECK(std::filesystem::exists(dir + "/tiny-fedscal-s1_history.json"));
    CHECK(std::filesystem::exists(dir + "/tiny-fedscal-s1_model.bin"));

    // histories written to disk parse back to the same records
    std::ifstream is(dir + "/tiny-fedscal-s1_history.json");
    std::ostringstream buf;
    buf << is.rdbuf();
    const auto history = history_from_json(buf.str());
    CHECK(history.size() == 2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("ablation grids carry the intended arms") {
    SCAlConfig base;
    base.lambda_local = 2.0;
    base.lambda_global = 0.5;
    const auto scal = scal_ablation_cells(base);
    REQUIRE(scal.size() == 4);
    CHECK(scal[0].scal.lambda_local == 0.0);
    CHECK(scal[0].scal.lambda_global == 0.0);
    CHECK(scal[1].scal.lambda_local == 2.0);
    CHECK(scal[1].scal.lambda_global == 0.0);
    CHECK(scal[2].scal.lambda_local == 0.0);
    CHECK(scal[2].scal.lambda_global == 0.5);
    CHECK(scal[3].scal.lambda_local == 2.0);
    CHECK(scal[3].scal.lambda_global == 0.5);

    const auto thr = threshold_ablation_cells(base);
    REQUIRE(thr.size() == 2);
    CHECK(!thr[0].scal.adaptive_threshold);
    CHECK(thr[1].scal.adaptive_threshold);
}

TEST_CASE("output root environment variable prefixes the directory") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.output_dir = "relative/out";
    setenv("FEDSCAL_OUTPUT_ROOT", "/tmp/fedscal_root", 1);
    CHECK(resolve_output_dir(cfg) == "/tmp/fedscal_root/relative/out");
    unsetenv("FEDSCAL_OUTPUT_ROOT");
    CHECK(resolve_output_dir(cfg) == "relative/out");
}
