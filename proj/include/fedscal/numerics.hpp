#ifndef FEDSCAL_NUMERICS_HPP
#define FEDSCAL_NUMERICS_HPP

#include <cstddef>
#include <functional>
#include <vector>

namespace fedscal {

using Vector = std::vector<double>;

// Floor value used inside every log in this codebase. Keeps one-hot and
// gated distributions out of -inf territory.
inline constexpr double kLogEps = 1e-12;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// y = M x
Vector mat_vec(const Matrix& m, const Vector& x);

double dot(const Vector& a, const Vector& b);
double norm2(const Vector& a);

// Numerically stable softmax (max subtraction). Throws std::invalid_argument
// on empty input.
Vector softmax(const Vector& logits);

// Shannon entropy in nats of a probability vector. Throws std::domain_error
// if the input does not sum to 1 within 1e-9 or has negative entries.
double entropy(const Vector& p);

// KL(p || q) in nats, q clamped below at kLogEps, 0*log 0 := 0.
double kl_div(const Vector& p, const Vector& q);

// 1 - <a,b> / (||a|| ||b||). Throws std::domain_error when either norm
// is below 1e-12.
double cosine_distance(const Vector& a, const Vector& b);

struct SummaryStats {
    double mean = 0.0;
    double median = 0.0;
    double std_dev = 0.0;  // population (divide by N)
};

SummaryStats stats_mean_median_std(const Vector& xs);

// Central-difference gradient, used as the test oracle against hand-derived
// gradients. h should be in [1e-7, 1e-4].
Vector finite_diff_grad(const std::function<double(const Vector&)>& fn,
                        const Vector& at, double h);

bool all_finite(const Vector& v);
bool all_finite(const Matrix& m);

}  // namespace fedscal

#endif
