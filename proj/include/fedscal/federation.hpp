#ifndef FEDSCAL_FEDERATION_HPP
#define FEDSCAL_FEDERATION_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedscal/adaptation.hpp"
#include "fedscal/data.hpp"
#include "fedscal/metrics.hpp"
#include "fedscal/model.hpp"

namespace fedscal {

enum class Method { LoA, FedLoA, FedSCAl };
enum class PseudoLabelStrategy { SHOT, BMD };
enum class ExecutionMode { Serial, Parallel };

std::string method_name(Method m);
Method method_from_name(const std::string& name);
std::string strategy_name(PseudoLabelStrategy s);
PseudoLabelStrategy strategy_from_name(const std::string& name);

struct FederationConfig {
    double participation_rate = 0.3;  // Q = max(1, round(rate * K))
    int rounds = 30;                  // T
    int local_epochs = 5;             // E
    int batch_size = 64;              // B
    double learning_rate = 0.03;
    std::uint64_t master_seed = 1;
    Method method = Method::FedSCAl;
    PseudoLabelStrategy strategy = PseudoLabelStrategy::SHOT;
    SCAlConfig scal;
    AugmentationConfig augment;
    ThresholdState threshold;
    BMDState bmd;
    bool prototype_refine = true;
    ExecutionMode execution = ExecutionMode::Serial;
    int checkpoint_every = 0;  // rounds between checkpoints, 0 disables
    std::string checkpoint_dir;
};

struct BatchTrace {
    int epoch = 0;
    int batch_index = 0;
    double loss_total = 0.0;
    double loss_entropy = 0.0;
    double loss_diversity = 0.0;
    double loss_pseudo_ce = 0.0;
    double loss_symmetric_ce = 0.0;
    double loss_client_align = 0.0;
    double loss_server_align = 0.0;
    int client_gated = 0;
    int server_gated = 0;
    SupervisionCounts supervision;
};

struct ClientRoundTrace {
    int client_id = -1;
    double tau = 0.0;
    double gamma = 0.0;
    double pacc = 0.0;        // labels from the round-start (broadcast) refresh
    double pacc_final = 0.0;  // labels from the last local epoch's refresh
    double drift = 0.0;
    std::vector<BatchTrace> batches;
};

struct RoundRecord {
    int round = 0;
    std::vector<int> sampled;
    std::vector<ClientRoundTrace> clients;
    std::map<int, double> domain_accuracy;
    double average_accuracy = 0.0;
    double mean_drift = 0.0;
};

// Per-batch alignment decisions kept around so the label-aware caller can
// fill in supervision counts; dropped before the history is stored.
struct ClientUpdateResult {
    ModelParams params;
    ClientRoundTrace trace;
    PseudoLabelTable first_table;  // from the round-start refresh
    PseudoLabelTable final_table;  // from the last epoch's refresh
    struct BatchTargets {
        std::vector<std::size_t> indices;
        std::vector<AlignTarget> client_targets;
        std::vector<AlignTarget> server_targets;
    };
    std::vector<BatchTargets> batch_targets;
};

// One round of local work: optional threshold refresh, then E epochs of
// (prototype + pseudo-label refresh, mini-batch SGD on the encoder).
// Augmentation draws are consumed on every batch regardless of method so
// traces of reduced configurations align bitwise.
ClientUpdateResult client_update(const ModelParams& broadcast, const UnlabeledView& data,
                                 const FederationConfig& cfg, int client_id, int round);

// Exact mean, summed left-to-right in list order, computed as deltas from
// the first entry so blocks that are identical across the list (the frozen
// classifier) come back bitwise unchanged.
ModelParams server_aggregate(const std::vector<ModelParams>& params_list);

// Uniform sample of Q distinct client ids, returned ascending.
std::vector<int> sample_clients(int num_clients, int q, RngStream& rng);

struct FederationResult {
    ModelParams final_params;
    std::vector<RoundRecord> history;
    std::vector<ModelParams> local_params;  // per client, LoA only
};

// The full loop: sample, broadcast, client updates (serial or OpenMP over
// clients), aggregate, evaluate. Method LoA runs every client from its own
// previous parameters with no aggregation.
FederationResult run_federation(const FederationConfig& cfg, const ModelParams& initial,
                                const std::vector<ClientDataset>& clients);

// Continues an interrupted run from the newest checkpoint in
// cfg.checkpoint_dir; the combined trace equals an uninterrupted run.
FederationResult resume_federation(const FederationConfig& cfg,
                                   const std::vector<ClientDataset>& clients);

// Round-trip-exact JSON for run histories (checkpoints and run outputs).
std::string history_to_json(const std::vector<RoundRecord>& history);
std::vector<RoundRecord> history_from_json(const std::string& text);

}  // namespace fedscal

#endif
