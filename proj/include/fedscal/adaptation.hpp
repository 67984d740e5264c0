#ifndef FEDSCAL_ADAPTATION_HPP
#define FEDSCAL_ADAPTATION_HPP

#include <vector>

#include "fedscal/data.hpp"
#include "fedscal/model.hpp"
#include "fedscal/numerics.hpp"

namespace fedscal {

// Per-class feature centroids in encoder space. A class is valid when it
// had prediction mass: at least one argmax vote and a soft denominator
// above 1e-8.
struct PrototypeSet {
    std::vector<Vector> centroids;  // J entries, meaningful where valid
    std::vector<bool> valid;
};

struct PseudoLabelTable {
    std::vector<int> labels;
    std::vector<double> distances;  // cosine distance to the winning centroid
};

// Adaptive confidence threshold driven by the Pearson skewness of the
// per-sample prediction-entropy distribution. tau stays inside
// [tau_init + gamma_lo, tau_init + gamma_hi] at all times.
struct ThresholdState {
    double tau_init = 0.8;
    double gamma_lo = -0.1;  // <= 0
    double gamma_hi = 0.15;  // >= 0
    double tau = 0.8;
    double last_skewness = 0.0;
};

struct SCAlConfig {
    double lambda_local = 1.0;
    double lambda_global = 1.0;
    double beta = 0.3;  // pseudo-label CE weight in the LoA objective
    bool adaptive_threshold = true;
};

// State of the balanced top-M pseudo-labeler: EMA-tracked centroids plus
// its loss weights.
struct BMDState {
    double selection_ratio = 3.0;  // r > 0
    double ema_momentum = 0.7;     // lambda in [0, 1)
    double alpha = 1.0;            // static CE weight
    double beta_dyn = 1.0;         // symmetric CE weight
    bool initialized = false;
    std::vector<Vector> centroids;
};

// Soft-weighted class centroids over the whole dataset, optionally followed
// by one hard-assignment refinement pass. Throws std::runtime_error when no
// class remains valid.
PrototypeSet compute_prototypes(const ModelParams& params, const UnlabeledView& data,
                                bool refine = true);

// Nearest valid prototype under cosine distance, ties to the lowest class
// index. Throws std::domain_error on zero-norm features.
PseudoLabelTable assign_pseudo_labels(const PrototypeSet& protos,
                                      const ModelParams& params,
                                      const UnlabeledView& data);

// Entropy + diversity + beta * pseudo-label CE for the given batch rows.
LossSpec loa_loss_spec(const PseudoLabelTable& table,
                       const std::vector<std::size_t>& batch_indices, double beta);

// Gate decision and one-hot target from gate_params on the weakly augmented
// inputs: gated iff max softmax > tau.
std::vector<AlignTarget> build_align_targets(const ModelParams& gate_params,
                                             const std::vector<Vector>& weak_inputs,
                                             double tau);

struct AlignmentResult {
    double loss = 0.0;
    int gated_count = 0;
};

// Client alignment: gate and target from the client model on the weak view,
// KL against the client prediction on the strong view. Zero gated samples
// gives loss 0.
AlignmentResult client_align_loss(const ModelParams& client,
                                  const AugmentedBatch& aug, double tau);

// Server alignment: gate and target from the (round-start) server model on
// the same weak view; the KL target distribution stays the client model on
// the strong view.
AlignmentResult server_align_loss(const ModelParams& server, const ModelParams& client,
                                  const AugmentedBatch& aug, double tau);

double scal_loss(double local_loss, double global_loss, const SCAlConfig& cfg);

// Recomputes tau from the prediction entropies of the un-augmented dataset:
// gamma = 3 (mean - median) / std, clipped to [gamma_lo, gamma_hi]. A
// near-zero std yields gamma = 0.
ThresholdState update_threshold(const ThresholdState& state, const ModelParams& params,
                                const UnlabeledView& data);

// Balanced top-M centroids (M = max(1, floor(n / (r * J)))) blended into the
// EMA state after initialization.
PrototypeSet bmd_prototypes(const ModelParams& params, const UnlabeledView& data,
                            BMDState& state);

// alpha * static pseudo-label CE + beta_dyn * symmetric CE against dynamic
// soft labels (softmax over cosine similarity to the prototypes).
LossSpec bmd_loss_spec(const ModelParams& params, const std::vector<Vector>& batch,
                       const PrototypeSet& protos, const BMDState& state,
                       const std::vector<int>& static_labels);

}  // namespace fedscal

#endif
