#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace ctta {

/// Images as rows of `inputs` with one class label per row.
struct LabeledDataset {
    Tensor inputs;                    // [N x input_dim]
    std::vector<std::size_t> labels;  // N

    std::size_t size() const noexcept { return labels.size(); }

    void validate(std::size_t num_classes) const {
        if (inputs.rows() != labels.size()) throw std::invalid_argument("dataset: inputs/labels length mismatch");
        for (std::size_t y : labels)
            if (y >= num_classes) throw std::invalid_argument("dataset: label out of range");
    }

    LabeledDataset subset(std::span<const std::size_t> indices) const {
        LabeledDataset out;
        out.inputs = inputs.select_rows(indices);
        out.labels.reserve(indices.size());
        for (std::size_t i : indices) out.labels.push_back(labels.at(i));
        return out;
    }
};

}  // namespace ctta
