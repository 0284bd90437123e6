#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "autodiff.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "optimizer.hpp"
#include "prototypes.hpp"
#include "random.hpp"
#include "streams.hpp"

namespace ctta {

enum class Method { source, tent, ours_only, tent_ours };

inline std::string_view to_string(Method m) {
    switch (m) {
    case Method::source: return "source";
    case Method::tent: return "tent";
    case Method::ours_only: return "ours-only";
    case Method::tent_ours: return "tent+ours";
    }
    return "unknown";
}

inline Method parse_method(std::string_view s) {
    for (Method m : {Method::source, Method::tent, Method::ours_only, Method::tent_ours})
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown method: " + std::string(s));
}

inline bool uses_entropy_loss(Method m) { return m == Method::tent || m == Method::tent_ours; }
inline bool uses_prototype_losses(Method m) { return m == Method::ours_only || m == Method::tent_ours; }

/// Prototype-loss weights each preset uses unless overridden.
/// The source-alignment weights are calibrated for 64-d features; larger
/// values shrink the last batch-norm scale until every prediction agrees.
inline LossWeights default_weights(Method m) {
    switch (m) {
    case Method::ours_only: return {2.0, 0.8, 0.0};
    case Method::tent_ours: return {2.0, 2.0, 0.0};
    default: return {};
    }
}

struct AdaptConfig {
    Method method = Method::tent_ours;
    LossWeights weights = default_weights(Method::tent_ours);
    double alpha = 0.996;
    double entropy_threshold = default_entropy_threshold(10);
    double lr = 2.5e-4;
    double momentum = 0.9;
    TrainScope scope = TrainScope::bn_affine;
    LabelMode label_mode = LabelMode::hard;
    bool consistency = false;       // adds weights.cons * L_cons
    bool filter_entropy = false;    // entropy loss over reliable samples only
    StrongAugment augment;
    std::uint64_t augment_seed = 0;

    void validate() const {
        weights.validate();
        if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0, 1)");
        if (!(entropy_threshold > 0.0) || !std::isfinite(entropy_threshold))
            throw std::invalid_argument("entropy threshold must be positive");
        if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (momentum < 0.0) throw std::invalid_argument("momentum must be nonnegative");
    }
};

/// Raised when an adaptation step produces a non-finite loss.
class NumericalAbort : public std::runtime_error {
public:
    NumericalAbort(std::size_t step, LossValues losses, const std::string& what)
        : std::runtime_error(what), step_(step), losses_(losses) {}
    std::size_t step() const noexcept { return step_; }
    const LossValues& losses() const noexcept { return losses_; }

private:
    std::size_t step_;
    LossValues losses_;
};

/// Output of one predict-then-adapt step.
struct StepResult {
    std::vector<std::size_t> predictions;
    std::vector<double> confidences;
    std::vector<double> entropies;
    Tensor features;  // the prediction pass's features, for metrics
    LossValues losses;
    std::size_t reliable_count = 0;
    bool updated = false;  // an optimizer step was taken
};

/// Everything carried from one batch to the next.
class AdaptationState {
public:
    AdaptationState(Model model, SourcePrototypes source, AdaptConfig config)
        : model_(std::move(model)),
          source_model_(model_),
          source_(std::move(source)),
          target_(init_target_prototypes(model_.head())),
          optimizer_(config.lr, config.momentum),
          config_(std::move(config)),
          aug_rng_(config_.augment_seed) {
        config_.validate();
        if (source_.num_classes() != model_.num_classes())
            throw std::invalid_argument("AdaptationState: source prototypes do not match the model");
        trainable_ = model_.trainable_parameters(config_.scope);
    }

    const Model& model() const noexcept { return model_; }
    Model& model() noexcept { return model_; }
    const Model& source_model() const noexcept { return source_model_; }
    const SourcePrototypes& source_prototypes() const noexcept { return source_; }
    const TargetPrototypes& target_prototypes() const noexcept { return target_; }
    TargetPrototypes& target_prototypes() noexcept { return target_; }
    const AdaptConfig& config() const noexcept { return config_; }
    const SgdMomentum& optimizer() const noexcept { return optimizer_; }
    std::size_t step() const noexcept { return step_; }
    std::size_t updates() const noexcept { return updates_; }

    StepResult adapt_batch(const Tensor& inputs) {
        if (inputs.rows() < 2) throw std::invalid_argument("adapt_batch: batch size must be at least 2");
        StepResult out;
        if (config_.method == Method::source) {
            const auto [features, logits] = model_.predict(inputs, ForwardMode::frozen);
            require_finite_logits(logits);
            record_predictions(logits, out);
            out.features = features;
            ++step_;
            return out;
        }

        Tape tape;
        const auto vars = model_.bind(tape, trainable_);
        const Var x = tape.constant(inputs);
        const ForwardResult fr = model_.forward(tape, vars, x, ForwardMode::adapt);
        const Tensor& logits = tape.value(fr.logits);
        require_finite_logits(logits);
        record_predictions(logits, out);
        out.features = tape.value(fr.features);

        const ReliableSet reliable = reliability_mask(logits, config_.entropy_threshold);
        out.reliable_count = reliable.size();

        LossParts parts;
        if (uses_entropy_loss(config_.method))
            parts.unsup = entropy_min_loss(tape, fr.logits, config_.filter_entropy ? &reliable.indices : nullptr);
        std::optional<Var> reliable_features;
        if (uses_prototype_losses(config_.method)) {
            if (reliable.empty()) {
                parts.ema = tape.scalar(0.0);
                parts.src = tape.scalar(0.0);
            } else {
                reliable_features = tape.gather_rows(fr.features, reliable.indices);
                const Tensor soft = logits.select_rows(reliable.indices);
                parts.ema = ema_proto_loss(tape, *reliable_features, reliable.pseudo_labels, target_,
                                           config_.label_mode, &soft);
                parts.src = source_align_loss(tape, *reliable_features, reliable.pseudo_labels, source_);
            }
        }
        if (config_.consistency) {
            const Var xa = tape.constant(config_.augment(inputs, aug_rng_));
            const ForwardResult fa = model_.forward(tape, vars, xa, ForwardMode::adapt);
            parts.cons = consistency_loss(tape, fr.logits, fa.logits);
        }
        LossWeights w = config_.weights;
        if (!config_.consistency) w.cons = 0.0;
        const Var total = overall_loss(tape, parts, w);

        auto value_of = [&tape](const std::optional<Var>& v) { return v ? tape.scalar_value(*v) : 0.0; };
        out.losses = {tape.scalar_value(total), value_of(parts.unsup), value_of(parts.ema), value_of(parts.src),
                      value_of(parts.cons)};
        if (!std::isfinite(out.losses.total))
            throw NumericalAbort(step_, out.losses, "adapt_batch: non-finite loss at step " + std::to_string(step_));

        // The prototype loss above used the pre-update prototypes.
        if (reliable_features)
            target_.ema_update(tape.value(*reliable_features), reliable.pseudo_labels, config_.alpha);

        if (tape.requires_grad(total)) {
            tape.backward(total);
            std::vector<Tensor*> params;
            std::vector<Tensor> grads;
            for (const ParamId& id : trainable_) {
                Tensor& p = model_.parameter(id);
                Tensor g = tape.grad(model_.bound(vars, id));
                grads.emplace_back(p.shape(), std::move(g.storage()));
                params.push_back(&p);
            }
            optimizer_.step(params, grads);
            out.updated = true;
            ++updates_;
        }
        ++step_;
        return out;
    }

private:
    void require_finite_logits(const Tensor& logits) const {
        if (!logits.all_finite())
            throw NumericalAbort(step_, {}, "adapt_batch: non-finite logits at step " + std::to_string(step_));
    }

    static void record_predictions(const Tensor& logits, StepResult& out) {
        out.predictions.resize(logits.rows());
        out.confidences.resize(logits.rows());
        out.entropies.resize(logits.rows());
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            const auto p = softmax(logits.row(r));
            out.predictions[r] = argmax(logits.row(r));
            out.confidences[r] = p[out.predictions[r]];
            out.entropies[r] = entropy(logits.row(r));
        }
    }

    Model model_;
    const Model source_model_;
    const SourcePrototypes source_;
    TargetPrototypes target_;
    SgdMomentum optimizer_;
    AdaptConfig config_;
    Rng aug_rng_;
    std::vector<ParamId> trainable_;
    std::size_t step_ = 0;
    std::size_t updates_ = 0;
};

/// Hooks invoked by run_stream in addition to report building.
struct StreamObserver {
    virtual ~StreamObserver() = default;
    virtual void on_batch(const AdaptationState&, const StepResult&) {}
    virtual void on_domain_end(const AdaptationState&, std::size_t /*domain*/, const Tensor& /*target_gt*/) {}
};

/// Streams every domain through `state` in order.
///
/// Domain boundaries and labels only reach the report builder; adaptation
/// sees nothing but batches of inputs. The trailing partial batch of each
/// domain is dropped.
inline RunReport run_stream(AdaptationState& state, const DomainStream& stream, std::size_t batch_size,
                            StreamObserver* observer = nullptr) {
    if (batch_size < 2) throw std::invalid_argument("run_stream: batch size must be at least 2");
    ReportBuilder builder(state.model().num_classes(), state.source_prototypes().matrix());
    for (std::size_t k = 0; k < stream.domains.size(); ++k) {
        const Domain& domain = stream.domains[k];
        builder.begin_domain(k, domain.spec.name());
        for (std::size_t b = 0; b < domain.num_batches(batch_size); ++b) {
            const std::size_t step = state.step();
            StepResult res = state.adapt_batch(domain.batch_inputs(b, batch_size));
            if (observer) observer->on_batch(state, res);
            BatchRecord rec;
            rec.step = step;
            rec.predictions = std::move(res.predictions);
            rec.labels = domain.batch_labels(b, batch_size);
            rec.confidences = std::move(res.confidences);
            rec.entropies = std::move(res.entropies);
            rec.losses = res.losses;
            rec.reliable_count = res.reliable_count;
            builder.add_batch(std::move(rec), res.features);
        }
        builder.end_domain(state.target_prototypes().matrix());
        if (observer) observer->on_domain_end(state, k, builder.last_target_gt());
    }
    return builder.take();
}

}  // namespace ctta
