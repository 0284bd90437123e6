#pragma once

// Objective terms for test-time adaptation. Each loss is built on a Tape so
// that it can be differentiated; every loss is a mean over its contributing
// samples and is the constant 0 when there are none.

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "autodiff.hpp"
#include "numerics.hpp"
#include "prototypes.hpp"
#include "tensor.hpp"

namespace ctta {

/// Entropy threshold below which a prediction counts as reliable: 0.4 * ln C.
inline double default_entropy_threshold(std::size_t num_classes, double factor = 0.4) {
    return factor * std::log(static_cast<double>(num_classes));
}

struct ReliableSet {
    std::vector<std::size_t> indices;        // rows of the batch, ascending
    std::vector<std::size_t> pseudo_labels;  // argmax class per retained row
    std::vector<double> entropies;           // per retained row

    std::size_t size() const noexcept { return indices.size(); }
    bool empty() const noexcept { return indices.empty(); }
};

/// Keeps rows whose prediction entropy is strictly below `threshold`.
inline ReliableSet reliability_mask(const Tensor& logits, double threshold) {
    ReliableSet out;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const double h = entropy(logits.row(r));
        if (h < threshold) {
            out.indices.push_back(r);
            out.pseudo_labels.push_back(argmax(logits.row(r)));
            out.entropies.push_back(h);
        }
    }
    return out;
}

enum class LabelMode { hard, soft };

/// Cross-entropy of features against the (normalized, detached) EMA target prototypes.
///
/// hard: mean of -log softmax(f . P^T)[pseudo_label].
/// soft: mean of -sum_c q_c log softmax(f . P^T)_c where q = softmax(soft_target_logits),
///       treated as a constant target.
/// `features` must already be restricted to the reliable rows.
inline Var ema_proto_loss(Tape& tape, Var features, std::span<const std::size_t> pseudo_labels,
                          const TargetPrototypes& prototypes, LabelMode mode = LabelMode::hard,
                          const Tensor* soft_target_logits = nullptr) {
    const std::size_t R = tape.value(features).rows();
    if (R == 0) return tape.scalar(0.0);
    if (pseudo_labels.size() != R) throw std::invalid_argument("ema_proto_loss: one pseudo-label per row required");
    const Var protos = tape.constant(l2_normalize_rows(prototypes.matrix()));
    const Var log_probs = tape.log_softmax_rows(tape.matmul_nt(features, protos));
    if (mode == LabelMode::hard) {
        const Var picked = tape.pick_columns(log_probs, {pseudo_labels.begin(), pseudo_labels.end()});
        return tape.scale(tape.mean_all(picked), -1.0);
    }
    if (!soft_target_logits || soft_target_logits->rows() != R)
        throw std::invalid_argument("ema_proto_loss: soft mode needs one row of target logits per sample");
    const Var targets = tape.constant(softmax_rows(*soft_target_logits));
    return tape.scale(tape.mean_all(tape.row_dot(targets, log_probs)), -1.0);
}

/// Mean squared distance between reliable features and the source prototype of their pseudo-label.
inline Var source_align_loss(Tape& tape, Var features, std::span<const std::size_t> pseudo_labels,
                             const SourcePrototypes& prototypes) {
    const std::size_t R = tape.value(features).rows();
    if (R == 0) return tape.scalar(0.0);
    if (pseudo_labels.size() != R)
        throw std::invalid_argument("source_align_loss: one pseudo-label per row required");
    const Var anchors = tape.constant(prototypes.matrix().select_rows(pseudo_labels));
    return tape.mean_all(tape.row_sum_squares(tape.sub(features, anchors)));
}

/// Mean prediction entropy over all rows, or over `rows` when given.
inline Var entropy_min_loss(Tape& tape, Var logits, const std::vector<std::size_t>* rows = nullptr) {
    Var z = logits;
    if (rows) {
        if (rows->empty()) return tape.scalar(0.0);
        z = tape.gather_rows(logits, *rows);
    }
    if (tape.value(z).rows() == 0) return tape.scalar(0.0);
    return tape.mean_all(tape.row_entropy(z));
}

/// Mean cross-entropy -sum_c softmax(orig)_c log softmax(aug)_c; both branches carry gradient.
inline Var consistency_loss(Tape& tape, Var logits_orig, Var logits_aug) {
    if (!tape.value(logits_orig).same_shape(tape.value(logits_aug)))
        throw std::invalid_argument("consistency_loss: logits shapes differ");
    if (tape.value(logits_orig).rows() == 0) return tape.scalar(0.0);
    const Var p = tape.softmax_rows(logits_orig);
    const Var lq = tape.log_softmax_rows(logits_aug);
    return tape.scale(tape.mean_all(tape.row_dot(p, lq)), -1.0);
}

struct LossWeights {
    double ema = 0.0;
    double src = 0.0;
    double cons = 0.0;

    void validate() const {
        for (double w : {ema, src, cons})
            if (!std::isfinite(w) || w < 0.0) throw std::invalid_argument("loss weights must be finite and nonnegative");
    }
};

/// Terms entering the overall objective. Absent terms contribute nothing.
struct LossParts {
    std::optional<Var> unsup;
    std::optional<Var> ema;
    std::optional<Var> src;
    std::optional<Var> cons;
};

/// unsup + w.ema * ema + w.src * src + w.cons * cons over the present terms.
inline Var overall_loss(Tape& tape, const LossParts& parts, const LossWeights& w) {
    w.validate();
    Var total = tape.scalar(0.0);
    auto accumulate = [&](const std::optional<Var>& term, double weight) {
        if (term) total = tape.add(total, weight == 1.0 ? *term : tape.scale(*term, weight));
    };
    accumulate(parts.unsup, 1.0);
    accumulate(parts.ema, w.ema);
    accumulate(parts.src, w.src);
    accumulate(parts.cons, w.cons);
    return total;
}

}  // namespace ctta
