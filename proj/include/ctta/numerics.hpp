#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace ctta {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kBatchNormEpsilon = 1e-5;

class NonFiniteError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

namespace detail {

inline void require_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteError(std::string(what) + ": non-finite input");
}

inline double log_sum_exp(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace detail

inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty input");
    detail::require_finite(logits, "softmax");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        s += p[i];
    }
    for (double& x : p) x /= s;
    return p;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("log_softmax: empty input");
    detail::require_finite(logits, "log_softmax");
    const double lse = detail::log_sum_exp(logits);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

/// Shannon entropy (nats) of softmax(logits).
inline double entropy(std::span<const double> logits) {
    const auto logp = log_softmax(logits);
    double h = 0.0;
    for (double lp : logp) h -= std::exp(lp) * lp;
    return std::max(h, 0.0);
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("argmax: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("squared_distance: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// v / (||v|| + eps). The zero vector maps to itself.
inline std::vector<double> l2_normalize(std::span<const double> v) {
    const double scale = 1.0 / (l2_norm(v) + kNormEpsilon);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * scale;
    return out;
}

inline Tensor l2_normalize_rows(const Tensor& m) {
    Tensor out = m;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto n = l2_normalize(m.row(r));
        std::copy(n.begin(), n.end(), out.row(r).begin());
    }
    return out;
}

/// Cosine similarity; returns NaN when either vector is zero so callers can flag it.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return dot(a, b) / (na * nb);
}

inline Tensor softmax_rows(const Tensor& logits) {
    Tensor out = logits;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto p = softmax(logits.row(r));
        std::copy(p.begin(), p.end(), out.row(r).begin());
    }
    return out;
}

}  // namespace ctta
