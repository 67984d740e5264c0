// Straight-line reference evaluations used to pin down the loss and
// pseudo-labeling operations. Kept independent of the library's loss
// assembly: everything here works directly on softmax outputs and hidden
// features.
#ifndef FEDSCAL_TESTS_ORACLES_HPP
#define FEDSCAL_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fedscal/model.hpp"
#include "fedscal/numerics.hpp"
#include "fedscal/rng.hpp"

namespace oracle {

inline double safe_log(double v) { return std::log(std::max(v, 1e-12)); }

struct LoaLosses {
    double ent = 0.0;
    double div = 0.0;
    double pce = 0.0;
    double total(double beta) const { return ent + div + beta * pce; }
};

// L_ent + L_div + beta * L_pce evaluated literally.
inline LoaLosses loa_losses(const std::vector<fedscal::Vector>& probs,
                            const std::vector<int>& labels) {
    LoaLosses out;
    const std::size_t n = probs.size();
    const std::size_t j_count = probs[0].size();
    for (const fedscal::Vector& p : probs)
        for (double v : p) out.ent += -v * safe_log(v) / static_cast<double>(n);
    for (std::size_t j = 0; j < j_count; ++j) {
        double mean = 0.0;
        for (const fedscal::Vector& p : probs) mean += p[j] / static_cast<double>(n);
        out.div += mean * safe_log(mean);
    }
    for (std::size_t i = 0; i < n; ++i)
        out.pce += -safe_log(probs[i][labels[i]]) / static_cast<double>(n);
    return out;
}

// Soft class centroids: c_j = sum_i p_ij h_i / sum_i p_ij.
inline std::vector<fedscal::Vector> soft_prototypes(
    const std::vector<fedscal::Vector>& probs,
    const std::vector<fedscal::Vector>& hiddens) {
    const std::size_t j_count = probs[0].size();
    const std::size_t h_dim = hiddens[0].size();
    std::vector<fedscal::Vector> centroids(j_count, fedscal::Vector(h_dim, 0.0));
    for (std::size_t j = 0; j < j_count; ++j) {
        double denom = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            denom += probs[i][j];
            for (std::size_t k = 0; k < h_dim; ++k)
                centroids[j][k] += probs[i][j] * hiddens[i][k];
        }
        for (double& v : centroids[j]) v /= denom;
    }
    return centroids;
}

struct AlignValue {
    double loss = 0.0;
    int count = 0;
};

// Gated mean of KL(one-hot(argmax gate) || q): the alignment losses with the
// gate probabilities taken on the weak view and q on the strong view.
inline AlignValue gated_alignment(const std::vector<fedscal::Vector>& gate_probs,
                                  const std::vector<fedscal::Vector>& q_probs,
                                  double tau) {
    AlignValue out;
    double sum = 0.0;
    for (std::size_t i = 0; i < gate_probs.size(); ++i) {
        const auto it = std::max_element(gate_probs[i].begin(), gate_probs[i].end());
        if (*it > tau) {
            ++out.count;
            const std::size_t y = it - gate_probs[i].begin();
            sum += -safe_log(q_probs[i][y]);
        }
    }
    if (out.count > 0) out.loss = sum / out.count;
    return out;
}

// gamma = 3 (mean - median) / std over the entropies, clipped; tau update.
inline double threshold_from_entropies(std::vector<double> entropies, double tau_init,
                                       double lo, double hi) {
    const std::size_t n = entropies.size();
    double mean = 0.0;
    for (double h : entropies) mean += h / static_cast<double>(n);
    std::sort(entropies.begin(), entropies.end());
    const double median = n % 2 == 1
                              ? entropies[n / 2]
                              : 0.5 * (entropies[n / 2 - 1] + entropies[n / 2]);
    double var = 0.0;
    for (double h : entropies) var += (h - mean) * (h - mean) / static_cast<double>(n);
    const double sd = std::sqrt(var);
    const double gamma = sd < 1e-9 ? 0.0 : 3.0 * (mean - median) / sd;
    return tau_init + std::max(lo, std::min(gamma, hi));
}

// Balanced top-M centroid of one class: mean hidden feature of the M samples
// with the highest class-j probability (ties to the lower index).
inline fedscal::Vector top_m_centroid(const std::vector<fedscal::Vector>& probs,
                                      const std::vector<fedscal::Vector>& hiddens,
                                      std::size_t class_j, std::size_t m) {
    std::vector<std::size_t> idx(probs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return probs[a][class_j] != probs[b][class_j] ? probs[a][class_j] > probs[b][class_j]
                                                      : a < b;
    });
    fedscal::Vector c(hiddens[0].size(), 0.0);
    const std::size_t take = std::min(m, idx.size());
    for (std::size_t s = 0; s < take; ++s)
        for (std::size_t k = 0; k < c.size(); ++k) c[k] += hiddens[idx[s]][k];
    for (double& v : c) v /= static_cast<double>(take);
    return c;
}

// CE(t, p) + CE(p, t) per sample, batch-averaged.
inline double symmetric_ce(const std::vector<fedscal::Vector>& targets,
                           const std::vector<fedscal::Vector>& probs) {
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        double fwd = 0.0, rev = 0.0;
        for (std::size_t j = 0; j < probs[i].size(); ++j) {
            fwd -= targets[i][j] * safe_log(probs[i][j]);
            rev -= probs[i][j] * safe_log(targets[i][j]);
        }
        total += (fwd + rev) / static_cast<double>(probs.size());
    }
    return total;
}

inline fedscal::ModelParams random_params(std::size_t d, std::size_t h, std::size_t j,
                                          fedscal::RngStream& rng, double scale = 1.0) {
    fedscal::ModelParams p;
    p.enc_w = fedscal::Matrix(h, d);
    p.enc_b = fedscal::Vector(h);
    p.cls_w = fedscal::Matrix(j, h);
    p.cls_b = fedscal::Vector(j);
    for (double& v : p.enc_w.data) v = scale * rng.next_gaussian();
    for (double& v : p.enc_b) v = 0.1 * scale * rng.next_gaussian();
    for (double& v : p.cls_w.data) v = scale * rng.next_gaussian();
    for (double& v : p.cls_b) v = 0.1 * scale * rng.next_gaussian();
    p.classifier_frozen = true;
    return p;
}

inline std::vector<fedscal::Vector> random_batch(std::size_t b, std::size_t d,
                                                 fedscal::RngStream& rng,
                                                 double scale = 1.0) {
    std::vector<fedscal::Vector> xs(b, fedscal::Vector(d));
    for (fedscal::Vector& x : xs)
        for (double& v : x) v = scale * rng.next_gaussian();
    return xs;
}

}  // namespace oracle

#endif
