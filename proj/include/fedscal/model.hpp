#ifndef FEDSCAL_MODEL_HPP
#define FEDSCAL_MODEL_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedscal/data.hpp"
#include "fedscal/numerics.hpp"
#include "fedscal/rng.hpp"

namespace fedscal {

// f = h o g: one-hidden-layer tanh encoder g plus a linear classifier h.
// After source pre-training the classifier block is frozen; adaptation
// updates encoder parameters only.
struct ModelParams {
    Matrix enc_w;  // h x d
    Vector enc_b;  // h
    Matrix cls_w;  // J x h
    Vector cls_b;  // J
    bool classifier_frozen = false;

    std::size_t input_dim() const { return enc_w.cols; }
    std::size_t hidden_dim() const { return enc_w.rows; }
    std::size_t num_classes() const { return cls_w.rows; }
};

struct ForwardCache {
    Vector input;
    Vector pre_activation;
    Vector hidden;  // g(x)
    Vector logits;  // f(x)
    Vector probs;   // softmax(f(x))
};

// Gaussian(0, 1/sqrt(fan_in)) weights, zero biases.
ModelParams make_initial_params(std::size_t input_dim, std::size_t hidden_dim,
                                std::size_t num_classes, RngStream& rng);

ForwardCache forward(const ModelParams& params, const Vector& x);
std::vector<ForwardCache> forward_batch(const ModelParams& params,
                                        const std::vector<Vector>& xs);

int argmax_class(const Vector& probs);

struct EncoderGrad {
    Matrix d_enc_w;
    Vector d_enc_b;
};

// Fixed per-batch alignment target: gate decision plus the one-hot class it
// came from. Targets are constants for the gradient; only the prediction on
// the strongly augmented input is differentiated.
struct AlignTarget {
    bool gated = false;
    int target_class = -1;
};

// Weighted combination of the adaptation losses over one mini-batch. All
// targets (pseudo-labels, soft targets, gated one-hot targets) are fixed
// inputs supplied by the adaptation module.
struct LossSpec {
    double weight_entropy = 0.0;    // per-sample prediction entropy
    double weight_diversity = 0.0;  // batch mean-prediction negentropy
    double weight_pseudo_ce = 0.0;  // hard pseudo-label cross-entropy
    std::vector<int> pseudo_labels;

    double weight_symmetric_ce = 0.0;  // forward + reverse CE to soft targets
    std::vector<Vector> soft_targets;

    double weight_client_align = 0.0;
    double weight_server_align = 0.0;
    std::vector<AlignTarget> client_align;
    std::vector<AlignTarget> server_align;
    std::vector<Vector> strong_inputs;  // A_s(x), the differentiable path
};

struct LossValue {
    double total = 0.0;
    // unweighted component values
    double entropy = 0.0;
    double diversity = 0.0;
    double pseudo_ce = 0.0;
    double symmetric_ce = 0.0;
    double client_align = 0.0;
    double server_align = 0.0;
    int client_gated = 0;
    int server_gated = 0;
};

// Analytic gradient with respect to encoder parameters only; the classifier
// gradient is identically zero by contract. The diversity term couples
// samples through the batch mean prediction.
std::pair<LossValue, EncoderGrad> loss_and_encoder_grad(
    const ModelParams& params, const std::vector<Vector>& batch,
    const LossSpec& spec);

// params - lr * grad on the encoder block; classifier untouched.
ModelParams apply_encoder_step(const ModelParams& params, const EncoderGrad& grad,
                               double lr);

struct PretrainConfig {
    int epochs = 40;
    double learning_rate = 0.1;
    int batch_size = 64;
};

struct PretrainResult {
    ModelParams params;
    double train_accuracy = 0.0;
};

// Full-model SGD on mean cross-entropy over the labeled source set. The
// returned params have the classifier marked frozen.
PretrainResult pretrain_source(const ModelParams& init,
                               const std::vector<LabeledSample>& source,
                               const PretrainConfig& cfg, RngStream& rng);

// FNV-1a over the little-endian byte stream of all blocks.
std::uint64_t params_hash(const ModelParams& params);
std::uint64_t classifier_hash(const ModelParams& params);

// ||a - b||_2 over every block.
double params_distance(const ModelParams& a, const ModelParams& b);

// Flat little-endian float stream (<basename>.bin) plus a JSON sidecar with
// shapes and the content hash (<basename>.json).
void save_params(const ModelParams& params, const std::string& basename);
ModelParams load_params(const std::string& basename);

}  // namespace fedscal

#endif
