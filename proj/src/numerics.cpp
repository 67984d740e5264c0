#include "fedscal/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fedscal {

Vector mat_vec(const Matrix& m, const Vector& x) {
    if (x.size() != m.cols)
        throw std::invalid_argument("mat_vec: dimension mismatch");
    Vector y(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double acc = 0.0;
        const double* row = &m.data[i * m.cols];
        for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
    return y;
}

double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("dot: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(const Vector& a) { return std::sqrt(dot(a, a)); }

Vector softmax(const Vector& logits) {
    if (logits.empty())
        throw std::invalid_argument("softmax: empty input");
    const double m = *std::max_element(logits.begin(), logits.end());
    Vector out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

double entropy(const Vector& p) {
    if (p.empty()) throw std::domain_error("entropy: empty input");
    double sum = 0.0;
    for (double v : p) {
        if (v < 0.0) throw std::domain_error("entropy: negative entry");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::domain_error("entropy: input is not a probability vector");
    double h = 0.0;
    for (double v : p) h -= v * std::log(std::max(v, kLogEps));
    return h;
}

double kl_div(const Vector& p, const Vector& q) {
    if (p.size() != q.size())
        throw std::invalid_argument("kl_div: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;  // 0*log 0 := 0
        acc += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kLogEps)));
    }
    return acc;
}

double cosine_distance(const Vector& a, const Vector& b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na < 1e-12 || nb < 1e-12)
        throw std::domain_error("cosine_distance: zero-norm input");
    return 1.0 - dot(a, b) / (na * nb);
}

SummaryStats stats_mean_median_std(const Vector& xs) {
    if (xs.empty()) throw std::domain_error("stats: empty input");
    SummaryStats s;
    const std::size_t n = xs.size();
    double sum = 0.0;
    for (double v : xs) sum += v;
    s.mean = sum / static_cast<double>(n);

    Vector sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    if (n % 2 == 1) {
        s.median = sorted[n / 2];
    } else {
        s.median = 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    }

    double ss = 0.0;
    for (double v : xs) {
        const double d = v - s.mean;
        ss += d * d;
    }
    s.std_dev = std::sqrt(ss / static_cast<double>(n));
    return s;
}

Vector finite_diff_grad(const std::function<double(const Vector&)>& fn,
                        const Vector& at, double h) {
    Vector g(at.size());
    Vector x = at;
    for (std::size_t i = 0; i < at.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = fn(x);
        x[i] = orig - h;
        const double fm = fn(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

bool all_finite(const Vector& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const Matrix& m) {
    for (double x : m.data)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace fedscal
