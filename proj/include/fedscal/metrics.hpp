#ifndef FEDSCAL_METRICS_HPP
#define FEDSCAL_METRICS_HPP

#include <map>
#include <vector>

#include "fedscal/adaptation.hpp"
#include "fedscal/data.hpp"
#include "fedscal/model.hpp"

namespace fedscal {

// Fraction of samples whose pseudo-label matches the hidden true label.
// Evaluation-only: this is the one place adaptation outputs meet labels.
double pseudo_label_accuracy(const PseudoLabelTable& table, const ClientDataset& dataset);

struct DomainAccuracy {
    std::map<int, double> per_domain;  // domain id -> mean client accuracy
    double average = 0.0;              // mean over domains
};

double client_accuracy(const ModelParams& params, const ClientDataset& dataset);

// Argmax accuracy per client, averaged within each domain, then across
// domains (one shared model evaluated everywhere).
DomainAccuracy evaluate_accuracy(const ModelParams& params,
                                 const std::vector<ClientDataset>& clients);

// Same grouping, but client k is evaluated with its own parameters (the
// local-only baseline reports this).
DomainAccuracy evaluate_accuracy_per_client(const std::vector<ModelParams>& params,
                                            const std::vector<ClientDataset>& clients);

// Supervision-correctness bookkeeping: a gated sample is "wrong" when the
// one-hot target handed to the alignment loss differs from the true label.
// Ungated samples do not enter the respective count.
struct SupervisionCounts {
    int local_gated = 0;
    int global_gated = 0;
    int both_gated = 0;
    int local_wrong = 0;
    int global_wrong = 0;
    int both_wrong = 0;  // gated by both and wrong under both
};

SupervisionCounts count_supervision(const std::vector<AlignTarget>& client_targets,
                                    const std::vector<AlignTarget>& server_targets,
                                    const std::vector<int>& true_labels);

// Standalone evaluation on a labeled batch with shared weak augmentations.
SupervisionCounts supervision_correctness(const ModelParams& client_params,
                                          const ModelParams& server_params,
                                          const std::vector<LabeledSample>& batch,
                                          const AugmentedBatch& aug, double tau);

}  // namespace fedscal

#endif
