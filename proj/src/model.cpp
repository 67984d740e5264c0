#include "fedscal/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fedscal {

namespace {

double clamped_log(double v) { return std::log(std::max(v, kLogEps)); }

void check_batch(const ModelParams& params, const std::vector<Vector>& batch) {
    if (batch.empty())
        throw std::invalid_argument("loss_and_encoder_grad: empty batch");
    for (const Vector& x : batch)
        if (x.size() != params.input_dim())
            throw std::invalid_argument("loss_and_encoder_grad: dimension mismatch");
}

// Accumulates the encoder gradient contribution of one sample given the
// gradient at its logits.
void backprop_sample(const ModelParams& params, const ForwardCache& cache,
                     const Vector& d_logits, EncoderGrad& grad) {
    const std::size_t h = params.hidden_dim();
    const std::size_t d = params.input_dim();
    const std::size_t j_count = params.num_classes();

    Vector d_hidden(h, 0.0);
    for (std::size_t j = 0; j < j_count; ++j) {
        const double dj = d_logits[j];
        if (dj == 0.0) continue;
        for (std::size_t i = 0; i < h; ++i) d_hidden[i] += params.cls_w(j, i) * dj;
    }
    for (std::size_t i = 0; i < h; ++i) {
        const double t = cache.hidden[i];
        const double d_pre = d_hidden[i] * (1.0 - t * t);
        grad.d_enc_b[i] += d_pre;
        for (std::size_t k = 0; k < d; ++k)
            grad.d_enc_w(i, k) += d_pre * cache.input[k];
    }
}

std::uint64_t fnv1a(std::uint64_t hash, const std::vector<double>& xs) {
    for (double x : xs) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
        for (int b = 0; b < 8; ++b) {
            hash ^= (bits >> (8 * b)) & 0xffULL;
            hash *= 0x100000001b3ULL;
        }
    }
    return hash;
}

void write_block(std::ofstream& os, const std::vector<double>& xs) {
    for (double x : xs) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
        unsigned char buf[8];
        for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xffULL);
        os.write(reinterpret_cast<const char*>(buf), 8);
    }
}

void read_block(std::ifstream& is, std::vector<double>& xs) {
    for (double& x : xs) {
        unsigned char buf[8];
        is.read(reinterpret_cast<char*>(buf), 8);
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
        x = std::bit_cast<double>(bits);
    }
}

}  // namespace

ModelParams make_initial_params(std::size_t input_dim, std::size_t hidden_dim,
                                std::size_t num_classes, RngStream& rng) {
    ModelParams p;
    p.enc_w = Matrix(hidden_dim, input_dim);
    p.enc_b = Vector(hidden_dim, 0.0);
    p.cls_w = Matrix(num_classes, hidden_dim);
    p.cls_b = Vector(num_classes, 0.0);
    const double enc_scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (double& w : p.enc_w.data) w = enc_scale * rng.next_gaussian();
    const double cls_scale = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (double& w : p.cls_w.data) w = cls_scale * rng.next_gaussian();
    return p;
}

ForwardCache forward(const ModelParams& params, const Vector& x) {
    if (x.size() != params.input_dim())
        throw std::invalid_argument("forward: dimension mismatch");
    ForwardCache c;
    c.input = x;
    c.pre_activation = mat_vec(params.enc_w, x);
    for (std::size_t i = 0; i < c.pre_activation.size(); ++i)
        c.pre_activation[i] += params.enc_b[i];
    c.hidden.resize(c.pre_activation.size());
    for (std::size_t i = 0; i < c.hidden.size(); ++i)
        c.hidden[i] = std::tanh(c.pre_activation[i]);
    c.logits = mat_vec(params.cls_w, c.hidden);
    for (std::size_t i = 0; i < c.logits.size(); ++i) c.logits[i] += params.cls_b[i];
    c.probs = softmax(c.logits);
    return c;
}

std::vector<ForwardCache> forward_batch(const ModelParams& params,
                                        const std::vector<Vector>& xs) {
    std::vector<ForwardCache> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = forward(params, xs[i]);
    return out;
}

int argmax_class(const Vector& probs) {
    return static_cast<int>(std::max_element(probs.begin(), probs.end()) -
                            probs.begin());
}

std::pair<LossValue, EncoderGrad> loss_and_encoder_grad(
    const ModelParams& params, const std::vector<Vector>& batch,
    const LossSpec& spec) {
    check_batch(params, batch);
    const std::size_t b_count = batch.size();
    const std::size_t j_count = params.num_classes();
    const double inv_b = 1.0 / static_cast<double>(b_count);

    LossValue value;
    EncoderGrad grad{Matrix(params.hidden_dim(), params.input_dim()),
                     Vector(params.hidden_dim(), 0.0)};

    const bool need_clean = spec.weight_entropy != 0.0 || spec.weight_diversity != 0.0 ||
                            spec.weight_pseudo_ce != 0.0 || spec.weight_symmetric_ce != 0.0;
    const bool need_strong =
        spec.weight_client_align != 0.0 || spec.weight_server_align != 0.0;

    if (need_clean) {
        const std::vector<ForwardCache> caches = forward_batch(params, batch);

        Vector mean_pred(j_count, 0.0);
        if (spec.weight_diversity != 0.0) {
            for (const ForwardCache& c : caches)
                for (std::size_t j = 0; j < j_count; ++j) mean_pred[j] += c.probs[j];
            for (double& v : mean_pred) v *= inv_b;
            double div = 0.0;
            for (double v : mean_pred) div += v * clamped_log(v);
            value.diversity = div;
        }

        if (spec.weight_pseudo_ce != 0.0 && spec.pseudo_labels.size() != b_count)
            throw std::invalid_argument("loss spec: pseudo_labels size mismatch");
        if (spec.weight_symmetric_ce != 0.0 && spec.soft_targets.size() != b_count)
            throw std::invalid_argument("loss spec: soft_targets size mismatch");

        for (std::size_t i = 0; i < b_count; ++i) {
            const Vector& p = caches[i].probs;
            Vector d_logits(j_count, 0.0);

            if (spec.weight_entropy != 0.0) {
                double h_i = 0.0;
                for (double v : p) h_i -= v * clamped_log(v);
                value.entropy += h_i * inv_b;
                const double w = spec.weight_entropy * inv_b;
                for (std::size_t k = 0; k < j_count; ++k)
                    d_logits[k] += w * (-p[k] * (clamped_log(p[k]) + h_i));
            }

            if (spec.weight_diversity != 0.0) {
                // d/dz of sum_j mean_j log mean_j; couples samples via the mean
                double inner = 0.0;
                for (std::size_t j = 0; j < j_count; ++j)
                    inner += p[j] * clamped_log(mean_pred[j]);
                const double w = spec.weight_diversity * inv_b;
                for (std::size_t k = 0; k < j_count; ++k)
                    d_logits[k] += w * p[k] * (clamped_log(mean_pred[k]) - inner);
            }

            if (spec.weight_pseudo_ce != 0.0) {
                const int y = spec.pseudo_labels[i];
                if (y < 0 || static_cast<std::size_t>(y) >= j_count)
                    throw std::invalid_argument("loss spec: pseudo label out of range");
                value.pseudo_ce += -clamped_log(p[y]) * inv_b;
                const double w = spec.weight_pseudo_ce * inv_b;
                for (std::size_t k = 0; k < j_count; ++k)
                    d_logits[k] += w * (p[k] - (static_cast<int>(k) == y ? 1.0 : 0.0));
            }

            if (spec.weight_symmetric_ce != 0.0) {
                const Vector& t = spec.soft_targets[i];
                if (t.size() != j_count)
                    throw std::invalid_argument("loss spec: soft target size mismatch");
                double fwd = 0.0, rev = 0.0, inner = 0.0;
                for (std::size_t j = 0; j < j_count; ++j) {
                    fwd -= t[j] * clamped_log(p[j]);
                    rev -= p[j] * clamped_log(t[j]);
                    inner += p[j] * clamped_log(t[j]);
                }
                value.symmetric_ce += (fwd + rev) * inv_b;
                const double w = spec.weight_symmetric_ce * inv_b;
                for (std::size_t k = 0; k < j_count; ++k) {
                    d_logits[k] += w * (p[k] - t[k]);                       // forward CE
                    d_logits[k] += w * (-p[k] * (clamped_log(t[k]) - inner));  // reverse CE
                }
            }

            backprop_sample(params, caches[i], d_logits, grad);
        }
    }

    if (need_strong) {
        if (spec.strong_inputs.size() != b_count)
            throw std::invalid_argument("loss spec: strong_inputs size mismatch");
        if (spec.weight_client_align != 0.0 && spec.client_align.size() != b_count)
            throw std::invalid_argument("loss spec: client_align size mismatch");
        if (spec.weight_server_align != 0.0 && spec.server_align.size() != b_count)
            throw std::invalid_argument("loss spec: server_align size mismatch");

        const std::vector<ForwardCache> caches = forward_batch(params, spec.strong_inputs);

        for (int pass = 0; pass < 2; ++pass) {
            const bool is_client = pass == 0;
            const double arm_weight =
                is_client ? spec.weight_client_align : spec.weight_server_align;
            if (arm_weight == 0.0) continue;
            const std::vector<AlignTarget>& targets =
                is_client ? spec.client_align : spec.server_align;

            int gated = 0;
            for (const AlignTarget& t : targets)
                if (t.gated) ++gated;
            if (is_client)
                value.client_gated = gated;
            else
                value.server_gated = gated;
            if (gated == 0) continue;  // loss defined as 0 when nothing passes the gate

            const double inv_g = 1.0 / static_cast<double>(gated);
            double arm_loss = 0.0;
            for (std::size_t i = 0; i < b_count; ++i) {
                if (!targets[i].gated) continue;
                const Vector& q = caches[i].probs;
                const int y = targets[i].target_class;
                arm_loss += -clamped_log(q[y]) * inv_g;
                Vector d_logits(j_count, 0.0);
                const double w = arm_weight * inv_g;
                for (std::size_t k = 0; k < j_count; ++k)
                    d_logits[k] = w * (q[k] - (static_cast<int>(k) == y ? 1.0 : 0.0));
                backprop_sample(params, caches[i], d_logits, grad);
            }
            if (is_client)
                value.client_align = arm_loss;
            else
                value.server_align = arm_loss;
        }
    }

    value.total = spec.weight_entropy * value.entropy +
                  spec.weight_diversity * value.diversity +
                  spec.weight_pseudo_ce * value.pseudo_ce +
                  spec.weight_symmetric_ce * value.symmetric_ce +
                  spec.weight_client_align * value.client_align +
                  spec.weight_server_align * value.server_align;
    return {value, std::move(grad)};
}

ModelParams apply_encoder_step(const ModelParams& params, const EncoderGrad& grad,
                               double lr) {
    ModelParams next = params;
    for (std::size_t i = 0; i < next.enc_w.data.size(); ++i)
        next.enc_w.data[i] -= lr * grad.d_enc_w.data[i];
    for (std::size_t i = 0; i < next.enc_b.size(); ++i)
        next.enc_b[i] -= lr * grad.d_enc_b[i];
    return next;
}

PretrainResult pretrain_source(const ModelParams& init,
                               const std::vector<LabeledSample>& source,
                               const PretrainConfig& cfg, RngStream& rng) {
    if (source.empty())
        throw std::invalid_argument("pretrain_source: empty dataset");
    ModelParams p = init;
    const std::size_t n = source.size();
    const std::size_t j_count = p.num_classes();

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);

        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            const double inv_b = 1.0 / static_cast<double>(end - start);

            Matrix d_enc_w(p.hidden_dim(), p.input_dim());
            Vector d_enc_b(p.hidden_dim(), 0.0);
            Matrix d_cls_w(j_count, p.hidden_dim());
            Vector d_cls_b(j_count, 0.0);
            double loss = 0.0;

            for (std::size_t s = start; s < end; ++s) {
                const LabeledSample& sample = source[order[s]];
                const ForwardCache c = forward(p, sample.features);
                loss += -clamped_log(c.probs[sample.true_label]) * inv_b;

                Vector d_logits(j_count);
                for (std::size_t k = 0; k < j_count; ++k)
                    d_logits[k] = inv_b * (c.probs[k] -
                                           (static_cast<int>(k) == sample.true_label ? 1.0 : 0.0));

                for (std::size_t j = 0; j < j_count; ++j) {
                    d_cls_b[j] += d_logits[j];
                    for (std::size_t i = 0; i < p.hidden_dim(); ++i)
                        d_cls_w(j, i) += d_logits[j] * c.hidden[i];
                }
                Vector d_hidden(p.hidden_dim(), 0.0);
                for (std::size_t j = 0; j < j_count; ++j)
                    for (std::size_t i = 0; i < p.hidden_dim(); ++i)
                        d_hidden[i] += p.cls_w(j, i) * d_logits[j];
                for (std::size_t i = 0; i < p.hidden_dim(); ++i) {
                    const double t = c.hidden[i];
                    const double d_pre = d_hidden[i] * (1.0 - t * t);
                    d_enc_b[i] += d_pre;
                    for (std::size_t k = 0; k < p.input_dim(); ++k)
                        d_enc_w(i, k) += d_pre * sample.features[k];
                }
            }

            if (!std::isfinite(loss))
                throw std::runtime_error("pretrain_source: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch offset " +
                                         std::to_string(start));

            const double lr = cfg.learning_rate;
            for (std::size_t i = 0; i < p.enc_w.data.size(); ++i)
                p.enc_w.data[i] -= lr * d_enc_w.data[i];
            for (std::size_t i = 0; i < p.enc_b.size(); ++i)
                p.enc_b[i] -= lr * d_enc_b[i];
            for (std::size_t i = 0; i < p.cls_w.data.size(); ++i)
                p.cls_w.data[i] -= lr * d_cls_w.data[i];
            for (std::size_t i = 0; i < p.cls_b.size(); ++i)
                p.cls_b[i] -= lr * d_cls_b[i];
        }
    }

    int correct = 0;
    for (const LabeledSample& s : source)
        if (argmax_class(forward(p, s.features).probs) == s.true_label) ++correct;

    PretrainResult result;
    result.params = std::move(p);
    result.params.classifier_frozen = true;
    result.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return result;
}

std::uint64_t params_hash(const ModelParams& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(h, params.enc_w.data);
    h = fnv1a(h, params.enc_b);
    h = fnv1a(h, params.cls_w.data);
    h = fnv1a(h, params.cls_b);
    return h;
}

std::uint64_t classifier_hash(const ModelParams& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(h, params.cls_w.data);
    h = fnv1a(h, params.cls_b);
    return h;
}

double params_distance(const ModelParams& a, const ModelParams& b) {
    double acc = 0.0;
    auto add = [&acc](const std::vector<double>& u, const std::vector<double>& v) {
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double d = u[i] - v[i];
            acc += d * d;
        }
    };
    add(a.enc_w.data, b.enc_w.data);
    add(a.enc_b, b.enc_b);
    add(a.cls_w.data, b.cls_w.data);
    add(a.cls_b, b.cls_b);
    return std::sqrt(acc);
}

void save_params(const ModelParams& params, const std::string& basename) {
    std::ofstream bin(basename + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_params: cannot open " + basename + ".bin");
    write_block(bin, params.enc_w.data);
    write_block(bin, params.enc_b);
    write_block(bin, params.cls_w.data);
    write_block(bin, params.cls_b);
    bin.close();

    nlohmann::json j;
    j["input_dim"] = params.input_dim();
    j["hidden_dim"] = params.hidden_dim();
    j["num_classes"] = params.num_classes();
    j["classifier_frozen"] = params.classifier_frozen;
    j["hash"] = params_hash(params);
    std::ofstream side(basename + ".json");
    if (!side) throw std::runtime_error("save_params: cannot open " + basename + ".json");
    side << j.dump(2) << '\n';
}

ModelParams load_params(const std::string& basename) {
    std::ifstream side(basename + ".json");
    if (!side) throw std::runtime_error("load_params: cannot open " + basename + ".json");
    nlohmann::json j;
    side >> j;
    const std::size_t d = j.at("input_dim").get<std::size_t>();
    const std::size_t h = j.at("hidden_dim").get<std::size_t>();
    const std::size_t classes = j.at("num_classes").get<std::size_t>();

    ModelParams p;
    p.enc_w = Matrix(h, d);
    p.enc_b = Vector(h, 0.0);
    p.cls_w = Matrix(classes, h);
    p.cls_b = Vector(classes, 0.0);
    p.classifier_frozen = j.at("classifier_frozen").get<bool>();

    std::ifstream bin(basename + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_params: cannot open " + basename + ".bin");
    read_block(bin, p.enc_w.data);
    read_block(bin, p.enc_b);
    read_block(bin, p.cls_w.data);
    read_block(bin, p.cls_b);
    if (!bin) throw std::runtime_error("load_params: truncated " + basename + ".bin");

    if (params_hash(p) != j.at("hash").get<std::uint64_t>())
        throw std::runtime_error("load_params: content hash mismatch");
    return p;
}

}  // namespace fedscal
