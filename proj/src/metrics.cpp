#include "fedscal/metrics.hpp"

#include <stdexcept>

namespace fedscal {

double pseudo_label_accuracy(const PseudoLabelTable& table, const ClientDataset& dataset) {
    if (table.labels.size() != dataset.samples.size())
        throw std::invalid_argument("pseudo_label_accuracy: coverage mismatch");
    if (dataset.samples.empty())
        throw std::invalid_argument("pseudo_label_accuracy: empty dataset");
    int correct = 0;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i)
        if (table.labels[i] == dataset.samples[i].true_label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(dataset.samples.size());
}

double client_accuracy(const ModelParams& params, const ClientDataset& dataset) {
    if (dataset.samples.empty())
        throw std::invalid_argument("client_accuracy: empty dataset");
    int correct = 0;
    const std::size_t n = dataset.samples.size();
#pragma omp parallel for reduction(+ : correct) schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        const LabeledSample& s = dataset.samples[i];
        if (argmax_class(forward(params, s.features).probs) == s.true_label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

DomainAccuracy group_by_domain(const std::vector<double>& client_acc,
                               const std::vector<ClientDataset>& clients) {
    std::map<int, std::pair<double, int>> acc;  // domain -> (sum, count)
    for (std::size_t k = 0; k < clients.size(); ++k) {
        auto& slot = acc[clients[k].domain_id];
        slot.first += client_acc[k];
        slot.second += 1;
    }
    DomainAccuracy out;
    double total = 0.0;
    for (const auto& [domain, slot] : acc) {
        const double mean = slot.first / static_cast<double>(slot.second);
        out.per_domain[domain] = mean;
        total += mean;
    }
    out.average = total / static_cast<double>(acc.size());
    return out;
}

}  // namespace

DomainAccuracy evaluate_accuracy(const ModelParams& params,
                                 const std::vector<ClientDataset>& clients) {
    if (clients.empty())
        throw std::invalid_argument("evaluate_accuracy: no clients");
    std::vector<double> per_client(clients.size());
    for (std::size_t k = 0; k < clients.size(); ++k)
        per_client[k] = client_accuracy(params, clients[k]);
    return group_by_domain(per_client, clients);
}

DomainAccuracy evaluate_accuracy_per_client(const std::vector<ModelParams>& params,
                                            const std::vector<ClientDataset>& clients) {
    if (params.size() != clients.size())
        throw std::invalid_argument("evaluate_accuracy_per_client: size mismatch");
    std::vector<double> per_client(clients.size());
    for (std::size_t k = 0; k < clients.size(); ++k)
        per_client[k] = client_accuracy(params[k], clients[k]);
    return group_by_domain(per_client, clients);
}

SupervisionCounts count_supervision(const std::vector<AlignTarget>& client_targets,
                                    const std::vector<AlignTarget>& server_targets,
                                    const std::vector<int>& true_labels) {
    if (client_targets.size() != true_labels.size() ||
        server_targets.size() != true_labels.size())
        throw std::invalid_argument("count_supervision: size mismatch");
    SupervisionCounts c;
    for (std::size_t i = 0; i < true_labels.size(); ++i) {
        const bool lg = client_targets[i].gated;
        const bool gg = server_targets[i].gated;
        const bool lw = lg && client_targets[i].target_class != true_labels[i];
        const bool gw = gg && server_targets[i].target_class != true_labels[i];
        c.local_gated += lg;
        c.global_gated += gg;
        c.both_gated += lg && gg;
        c.local_wrong += lw;
        c.global_wrong += gw;
        c.both_wrong += lw && gw;
    }
    return c;
}

SupervisionCounts supervision_correctness(const ModelParams& client_params,
                                          const ModelParams& server_params,
                                          const std::vector<LabeledSample>& batch,
                                          const AugmentedBatch& aug, double tau) {
    std::vector<int> labels(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = batch[i].true_label;
    const std::vector<AlignTarget> client_t =
        build_align_targets(client_params, aug.weak, tau);
    const std::vector<AlignTarget> server_t =
        build_align_targets(server_params, aug.weak, tau);
    return count_supervision(client_t, server_t, labels);
}

}  // namespace fedscal
