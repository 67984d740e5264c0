#ifndef FEDSCAL_EXPERIMENT_HPP
#define FEDSCAL_EXPERIMENT_HPP

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedscal/data.hpp"
#include "fedscal/federation.hpp"
#include "fedscal/model.hpp"

namespace fedscal {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::string name = "default";
    std::string output_dir = "out";
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::vector<Method> methods = {Method::LoA, Method::FedLoA, Method::FedSCAl};
    SyntheticGeometry geometry;
    int clients_per_domain = 5;
    std::size_t hidden_dim = 32;
    PretrainConfig pretrain;
    FederationConfig federation;  // method and master_seed filled per cell
};

ExperimentConfig default_experiment_config();

// Parses a JSON config file; unknown keys and malformed fields produce a
// ConfigError naming the offending field.
ExperimentConfig load_experiment_config(const std::string& path);

// Honors FEDSCAL_OUTPUT_ROOT as a prefix for the configured output dir.
std::string resolve_output_dir(const ExperimentConfig& cfg);

// One experiment cell: a labeled method variant (ablations tweak the SCAl
// configuration under a distinct label).
struct CellSpec {
    std::string label;
    Method method = Method::FedSCAl;
    SCAlConfig scal;
};

struct RunResult {
    std::string run_id;
    std::uint64_t seed = 0;
    std::string method_label;
    Method method = Method::FedSCAl;
    double source_train_accuracy = 0.0;
    FederationResult federation;
};

// Deterministic data + pretraining pipeline for one (cell, seed) pair:
// synthesize domains, build the federation, pretrain on source, adapt.
RunResult run_cell(const ExperimentConfig& cfg, const CellSpec& cell,
                   std::uint64_t seed);

// Mean pseudo-label accuracy over the round's participating clients.
double mean_pacc(const RoundRecord& record);

// pAcc(run A) - pAcc(run B) at the given 1-based round; both runs must have
// the round recorded.
double delta_pacc(const std::vector<RoundRecord>& a, const std::vector<RoundRecord>& b,
                  int round);

// metrics rows: run_id,seed,method,round,scope,metric,value with values
// printed at 17 significant digits so files are byte-comparable.
void write_metrics_csv(std::ostream& os, const RunResult& result);

void write_run_outputs(const std::string& dir, const RunResult& result);

struct MethodSummary {
    std::string label;
    double final_accuracy_mean = 0.0;
    double final_accuracy_std = 0.0;
    double best_accuracy_mean = 0.0;  // best round per seed, then averaged
    double final_pacc_mean = 0.0;
    std::map<int, double> final_domain_accuracy_mean;
};

std::vector<MethodSummary> summarize(const std::vector<RunResult>& results);

void write_summary(std::ostream& os, const std::vector<MethodSummary>& summaries);

// Runs every (method x seed) cell and writes metrics, histories, manifest
// and summary under the output dir. Returns the summaries in method order.
std::vector<MethodSummary> run_experiment(const ExperimentConfig& cfg);

// Table-3-style (alignment arms) and Table-4-style (fixed vs adaptive
// threshold) ablation grids.
std::vector<CellSpec> scal_ablation_cells(const SCAlConfig& base);
std::vector<CellSpec> threshold_ablation_cells(const SCAlConfig& base);
std::vector<MethodSummary> run_ablation(const ExperimentConfig& cfg,
                                        const std::string& which);

}  // namespace fedscal

#endif
