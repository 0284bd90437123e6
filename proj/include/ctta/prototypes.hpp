#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace ctta {

inline constexpr std::size_t kDefaultSourceCap = 100000;

/// Class-mean features of the source model on (a capped subset of) source data.
class SourcePrototypes {
public:
    SourcePrototypes(Tensor means, std::vector<std::size_t> counts)
        : means_(std::move(means)), counts_(std::move(counts)) {}

    const Tensor& matrix() const noexcept { return means_; }
    std::span<const double> row(std::size_t c) const { return means_.row(c); }
    const std::vector<std::size_t>& counts() const noexcept { return counts_; }
    std::size_t num_classes() const noexcept { return means_.rows(); }
    std::uint64_t hash() const { return content_hash(means_); }

private:
    Tensor means_;
    std::vector<std::size_t> counts_;
};

/// Row-wise class means of `features`; classes without samples keep a zero row and zero count.
inline std::pair<Tensor, std::vector<std::size_t>> class_means(const Tensor& features,
                                                               std::span<const std::size_t> labels,
                                                               std::size_t num_classes) {
    if (features.rows() != labels.size()) throw std::invalid_argument("class_means: features/labels mismatch");
    Tensor sums = Tensor::matrix(num_classes, features.cols());
    std::vector<std::size_t> counts(num_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) throw std::out_of_range("class_means: label out of range");
        ++counts[labels[i]];
        auto dst = sums.row(labels[i]);
        const auto src = features.row(i);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    for (std::size_t c = 0; c < num_classes; ++c)
        if (counts[c] > 0)
            for (double& v : sums.row(c)) v /= static_cast<double>(counts[c]);
    return {std::move(sums), std::move(counts)};
}

/// Builds source prototypes from frozen-statistics features of `model0`.
///
/// When the subset is larger than `cap`, exactly `cap` samples are chosen
/// uniformly at random (seeded) without replacement.
inline SourcePrototypes build_source_prototypes(const Model& model0, const LabeledDataset& subset,
                                                std::size_t cap = kDefaultSourceCap, std::uint64_t seed = 0,
                                                std::size_t chunk = 512) {
    subset.validate(model0.num_classes());
    std::vector<std::size_t> idx(subset.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > cap) {
        Rng rng(seed);
        rng.shuffle(idx);
        idx.resize(cap);
        std::sort(idx.begin(), idx.end());
    }
    const std::size_t C = model0.num_classes();
    Tensor features = Tensor::matrix(idx.size(), model0.feature_dim());
    std::vector<std::size_t> labels(idx.size());
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
        const std::size_t end = std::min(idx.size(), start + chunk);
        const std::span<const std::size_t> part(idx.data() + start, end - start);
        const auto [f, logits] = model0.predict(subset.inputs.select_rows(part), ForwardMode::frozen);
        for (std::size_t r = 0; r < part.size(); ++r) {
            std::copy(f.row(r).begin(), f.row(r).end(), features.row(start + r).begin());
            labels[start + r] = subset.labels[part[r]];
        }
    }
    auto [means, counts] = class_means(features, labels, C);
    for (std::size_t c = 0; c < C; ++c)
        if (counts[c] == 0)
            throw std::invalid_argument("build_source_prototypes: class " + std::to_string(c) +
                                        " has no samples after capping");
    return SourcePrototypes(std::move(means), std::move(counts));
}

/// EMA target prototypes, one unit-initialized row per class.
class TargetPrototypes {
public:
    /// Rows start as the l2-normalized head weights.
    static TargetPrototypes from_head(const Tensor& head) {
        for (std::size_t c = 0; c < head.rows(); ++c)
            if (l2_norm(head.row(c)) == 0.0)
                throw std::invalid_argument("init_target_prototypes: zero head row for class " + std::to_string(c));
        return TargetPrototypes(l2_normalize_rows(head));
    }

    explicit TargetPrototypes(Tensor rows) : rows_(std::move(rows)) {}

    const Tensor& matrix() const noexcept { return rows_; }
    std::span<const double> row(std::size_t c) const { return rows_.row(c); }
    std::size_t num_classes() const noexcept { return rows_.rows(); }

    /// P_c <- alpha * P_c + (1 - alpha) * normalize(mean of class-c features) for each class present.
    void ema_update(const Tensor& features, std::span<const std::size_t> pseudo_labels, double alpha) {
        if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("ema_update: alpha must be in (0, 1)");
        if (pseudo_labels.empty()) return;
        if (features.cols() != rows_.cols()) throw std::invalid_argument("ema_update: feature width mismatch");
        for (std::size_t y : pseudo_labels)
            if (y >= num_classes()) throw std::out_of_range("ema_update: pseudo-label out of range");
        const auto [means, counts] = class_means(features, pseudo_labels, num_classes());
        for (std::size_t c = 0; c < num_classes(); ++c) {
            if (counts[c] == 0) continue;
            const auto unit = l2_normalize(means.row(c));
            auto p = rows_.row(c);
            for (std::size_t k = 0; k < p.size(); ++k) p[k] = alpha * p[k] + (1.0 - alpha) * unit[k];
        }
    }

private:
    Tensor rows_;
};

inline TargetPrototypes init_target_prototypes(const Tensor& head) { return TargetPrototypes::from_head(head); }

/// Writes rows "kind,class,v0,...,v{d-1}" with a header line.
inline void write_prototype_csv(std::ostream& os, std::string_view kind, const Tensor& rows, bool header) {
    if (header) {
        os << "kind,class";
        for (std::size_t k = 0; k < rows.cols(); ++k) os << ",v" << k;
        os << '\n';
    }
    char buf[32];
    for (std::size_t c = 0; c < rows.rows(); ++c) {
        os << kind << ',' << c;
        for (double v : rows.row(c)) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            os << ',' << buf;
        }
        os << '\n';
    }
}

}  // namespace ctta
