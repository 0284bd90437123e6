#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "dataset.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "optimizer.hpp"
#include "random.hpp"

namespace ctta {

struct PretrainConfig {
    std::size_t epochs = 30;
    double lr = 0.05;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t epoch, const std::string& what)
        : std::runtime_error(what), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

/// Supervised cross-entropy training of every parameter (head included),
/// with batch-statistics normalization and running-statistic tracking.
inline Model pretrain_source(Model model, const LabeledDataset& data, const PretrainConfig& cfg) {
    data.validate(model.num_classes());
    if (cfg.epochs == 0) return model;
    if (data.size() < 2) throw std::invalid_argument("pretrain_source: need at least 2 samples");
    if (cfg.batch_size < 2) throw std::invalid_argument("pretrain_source: batch size must be at least 2");

    const auto ids = model.all_parameters();
    std::vector<Tensor*> params;
    for (const ParamId& id : ids) params.push_back(&model.parameter(id));
    SgdMomentum opt(cfg.lr, cfg.momentum);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        for (std::size_t start = 0; start + 1 < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            if (end - start < 2) break;
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const LabeledDataset batch = data.subset(idx);

            const std::string diverged = "pretrain_source: loss diverged in epoch " + std::to_string(epoch);
            Tape tape;
            const auto vars = model.bind(tape, ids);
            const Var x = tape.constant(batch.inputs);
            const ForwardResult fr = model.forward(tape, vars, x, ForwardMode::pretrain);
            Var loss;
            try {
                const Var nll = tape.pick_columns(tape.log_softmax_rows(fr.logits), batch.labels);
                loss = tape.scale(tape.mean_all(nll), -1.0);
            } catch (const NonFiniteError&) {
                throw DivergenceError(epoch, diverged);
            }
            if (!std::isfinite(tape.scalar_value(loss))) throw DivergenceError(epoch, diverged);
            tape.backward(loss);
            std::vector<Tensor> grads;
            for (const ParamId& id : ids) grads.push_back(tape.grad(model.bound(vars, id)));
            // Gradients come back as matrices; restore the parameters' own shapes.
            for (std::size_t i = 0; i < grads.size(); ++i)
                grads[i] = Tensor(params[i]->shape(), std::move(grads[i].storage()));
            opt.step(params, grads);
            model.update_running_stats(fr.stats);
        }
    }
    return model;
}

/// Fraction of correctly classified samples under frozen statistics.
inline double frozen_accuracy(const Model& model, const LabeledDataset& data, std::size_t chunk = 256) {
    if (data.size() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t end = std::min(data.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto [features, logits] = model.predict(data.inputs.select_rows(idx), ForwardMode::frozen);
        for (std::size_t r = 0; r < idx.size(); ++r)
            if (argmax(logits.row(r)) == data.labels[start + r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace ctta
