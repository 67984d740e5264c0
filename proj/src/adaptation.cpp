#include "fedscal/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fedscal {

namespace {

constexpr double kMassEps = 1e-8;

int nearest_valid_centroid(const Vector& feature, const PrototypeSet& protos,
                           double* out_distance) {
    int best = -1;
    double best_dist = 0.0;
    for (std::size_t j = 0; j < protos.centroids.size(); ++j) {
        if (!protos.valid[j]) continue;
        const double dist = cosine_distance(feature, protos.centroids[j]);
        if (best < 0 || dist < best_dist) {  // strict: ties keep the lowest index
            best = static_cast<int>(j);
            best_dist = dist;
        }
    }
    if (out_distance) *out_distance = best_dist;
    return best;
}

AlignmentResult gated_kl_mean(const ModelParams& q_params,
                              const std::vector<Vector>& strong_inputs,
                              const std::vector<AlignTarget>& targets) {
    AlignmentResult res;
    for (const AlignTarget& t : targets)
        if (t.gated) ++res.gated_count;
    if (res.gated_count == 0) return res;  // footnote case: loss set to 0

    const double inv_g = 1.0 / static_cast<double>(res.gated_count);
    for (std::size_t i = 0; i < strong_inputs.size(); ++i) {
        if (!targets[i].gated) continue;
        const ForwardCache c = forward(q_params, strong_inputs[i]);
        Vector one_hot(c.probs.size(), 0.0);
        one_hot[targets[i].target_class] = 1.0;
        res.loss += kl_div(one_hot, c.probs) * inv_g;
    }
    return res;
}

}  // namespace

PrototypeSet compute_prototypes(const ModelParams& params, const UnlabeledView& data,
                                bool refine) {
    if (data.size() == 0)
        throw std::invalid_argument("compute_prototypes: empty dataset");
    const std::size_t n = data.size();
    const std::size_t j_count = params.num_classes();

    std::vector<ForwardCache> caches(n);
    for (std::size_t i = 0; i < n; ++i) caches[i] = forward(params, data.features(i));

    PrototypeSet protos;
    protos.centroids.assign(j_count, Vector(params.hidden_dim(), 0.0));
    protos.valid.assign(j_count, false);

    std::vector<int> argmax_count(j_count, 0);
    for (const ForwardCache& c : caches) ++argmax_count[argmax_class(c.probs)];

    Vector denom(j_count, 0.0);
    for (const ForwardCache& c : caches) {
        for (std::size_t j = 0; j < j_count; ++j) {
            denom[j] += c.probs[j];
            for (std::size_t k = 0; k < params.hidden_dim(); ++k)
                protos.centroids[j][k] += c.probs[j] * c.hidden[k];
        }
    }
    for (std::size_t j = 0; j < j_count; ++j) {
        if (argmax_count[j] > 0 && denom[j] >= kMassEps) {
            for (double& v : protos.centroids[j]) v /= denom[j];
            protos.valid[j] = true;
        }
    }
    if (std::none_of(protos.valid.begin(), protos.valid.end(), [](bool v) { return v; }))
        throw std::runtime_error("compute_prototypes: degenerate model, no valid class");

    if (!refine) return protos;

    // hard-assignment refinement pass
    std::vector<int> assigned(n);
    for (std::size_t i = 0; i < n; ++i)
        assigned[i] = nearest_valid_centroid(caches[i].hidden, protos, nullptr);

    PrototypeSet refined;
    refined.centroids.assign(j_count, Vector(params.hidden_dim(), 0.0));
    refined.valid.assign(j_count, false);
    std::vector<int> counts(j_count, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const int j = assigned[i];
        ++counts[j];
        for (std::size_t k = 0; k < params.hidden_dim(); ++k)
            refined.centroids[j][k] += caches[i].hidden[k];
    }
    for (std::size_t j = 0; j < j_count; ++j) {
        if (counts[j] > 0) {
            for (double& v : refined.centroids[j]) v /= counts[j];
            refined.valid[j] = true;
        }
    }
    if (std::none_of(refined.valid.begin(), refined.valid.end(), [](bool v) { return v; }))
        throw std::runtime_error("compute_prototypes: degenerate refinement");
    return refined;
}

PseudoLabelTable assign_pseudo_labels(const PrototypeSet& protos,
                                      const ModelParams& params,
                                      const UnlabeledView& data) {
    PseudoLabelTable table;
    table.labels.resize(data.size());
    table.distances.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const ForwardCache c = forward(params, data.features(i));
        double dist = 0.0;
        table.labels[i] = nearest_valid_centroid(c.hidden, protos, &dist);
        table.distances[i] = dist;
    }
    return table;
}

LossSpec loa_loss_spec(const PseudoLabelTable& table,
                       const std::vector<std::size_t>& batch_indices, double beta) {
    LossSpec spec;
    spec.weight_entropy = 1.0;
    spec.weight_diversity = 1.0;
    spec.weight_pseudo_ce = beta;
    spec.pseudo_labels.reserve(batch_indices.size());
    for (std::size_t idx : batch_indices) spec.pseudo_labels.push_back(table.labels[idx]);
    return spec;
}

std::vector<AlignTarget> build_align_targets(const ModelParams& gate_params,
                                             const std::vector<Vector>& weak_inputs,
                                             double tau) {
    std::vector<AlignTarget> targets(weak_inputs.size());
    for (std::size_t i = 0; i < weak_inputs.size(); ++i) {
        const ForwardCache c = forward(gate_params, weak_inputs[i]);
        const int cls = argmax_class(c.probs);
        targets[i].target_class = cls;
        targets[i].gated = c.probs[cls] > tau;
    }
    return targets;
}

AlignmentResult client_align_loss(const ModelParams& client,
                                  const AugmentedBatch& aug, double tau) {
    const std::vector<AlignTarget> targets = build_align_targets(client, aug.weak, tau);
    return gated_kl_mean(client, aug.strong, targets);
}

AlignmentResult server_align_loss(const ModelParams& server, const ModelParams& client,
                                  const AugmentedBatch& aug, double tau) {
    const std::vector<AlignTarget> targets = build_align_targets(server, aug.weak, tau);
    return gated_kl_mean(client, aug.strong, targets);
}

double scal_loss(double local_loss, double global_loss, const SCAlConfig& cfg) {
    return cfg.lambda_local * local_loss + cfg.lambda_global * global_loss;
}

ThresholdState update_threshold(const ThresholdState& state, const ModelParams& params,
                                const UnlabeledView& data) {
    if (data.size() == 0)
        throw std::invalid_argument("update_threshold: empty dataset");
    Vector entropies(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        entropies[i] = entropy(forward(params, data.features(i)).probs);

    const SummaryStats s = stats_mean_median_std(entropies);
    const double skew =
        s.std_dev < 1e-9 ? 0.0 : 3.0 * (s.mean - s.median) / s.std_dev;

    ThresholdState next = state;
    next.last_skewness = skew;
    next.tau = state.tau_init + std::max(state.gamma_lo, std::min(skew, state.gamma_hi));
    return next;
}

PrototypeSet bmd_prototypes(const ModelParams& params, const UnlabeledView& data,
                            BMDState& state) {
    if (data.size() == 0)
        throw std::invalid_argument("bmd_prototypes: empty dataset");
    if (state.selection_ratio <= 0.0)
        throw std::invalid_argument("bmd_prototypes: selection ratio must be positive");
    const std::size_t n = data.size();
    const std::size_t j_count = params.num_classes();
    const std::size_t top_m = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(
               static_cast<double>(n) / (state.selection_ratio * static_cast<double>(j_count)))));
    const std::size_t take = std::min(top_m, n);

    std::vector<ForwardCache> caches(n);
    for (std::size_t i = 0; i < n; ++i) caches[i] = forward(params, data.features(i));

    std::vector<Vector> fresh(j_count, Vector(params.hidden_dim(), 0.0));
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < j_count; ++j) {
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double pa = caches[a].probs[j];
            const double pb = caches[b].probs[j];
            return pa != pb ? pa > pb : a < b;
        });
        for (std::size_t s = 0; s < take; ++s)
            for (std::size_t k = 0; k < params.hidden_dim(); ++k)
                fresh[j][k] += caches[order[s]].hidden[k];
        for (double& v : fresh[j]) v /= static_cast<double>(take);
    }

    if (!state.initialized) {
        state.centroids = std::move(fresh);
        state.initialized = true;
    } else {
        for (std::size_t j = 0; j < j_count; ++j)
            for (std::size_t k = 0; k < params.hidden_dim(); ++k)
                state.centroids[j][k] = state.ema_momentum * state.centroids[j][k] +
                                        (1.0 - state.ema_momentum) * fresh[j][k];
    }

    PrototypeSet protos;
    protos.centroids = state.centroids;
    protos.valid.assign(j_count, true);
    return protos;
}

LossSpec bmd_loss_spec(const ModelParams& params, const std::vector<Vector>& batch,
                       const PrototypeSet& protos, const BMDState& state,
                       const std::vector<int>& static_labels) {
    if (static_labels.size() != batch.size())
        throw std::invalid_argument("bmd_loss_spec: label/batch size mismatch");
    LossSpec spec;
    spec.weight_pseudo_ce = state.alpha;
    spec.pseudo_labels = static_labels;
    spec.weight_symmetric_ce = state.beta_dyn;

    const std::size_t j_count = protos.centroids.size();
    spec.soft_targets.reserve(batch.size());
    for (const Vector& x : batch) {
        const ForwardCache c = forward(params, x);
        Vector sims;
        std::vector<std::size_t> classes;
        for (std::size_t j = 0; j < j_count; ++j) {
            if (!protos.valid[j]) continue;
            sims.push_back(1.0 - cosine_distance(c.hidden, protos.centroids[j]));
            classes.push_back(j);
        }
        const Vector probs = softmax(sims);
        Vector target(j_count, 0.0);
        for (std::size_t s = 0; s < classes.size(); ++s) target[classes[s]] = probs[s];
        spec.soft_targets.push_back(std::move(target));
    }
    return spec;
}

}  // namespace fedscal
