#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "ctta/pipeline.hpp"

using namespace ctta;

namespace {

ExperimentConfig small_config(Method method) {
    ExperimentConfig c;
    c.source_per_class = 40;
    c.target_per_domain = 96;
    c.hidden = {24, 24};
    c.feature_dim = 12;
    c.pretrain_epochs = 4;
    c.batch_size = 16;
    c.method = method;
    return c;
}

const SourceArtifacts& small_source() {
    static const SourceArtifacts s = prepare_source(small_config(Method::source));
    return s;
}

Tensor first_batch(const ExperimentConfig& cfg) {
    return build_stream(cfg).domains.front().batch_inputs(0, cfg.batch_size);
}

}  // namespace

TEST(Presets, NamesRoundTrip) {
    for (Method m : {Method::source, Method::tent, Method::ours_only, Method::tent_ours})
        EXPECT_EQ(parse_method(to_string(m)), m);
    EXPECT_THROW(parse_method("eata"), std::invalid_argument);
}

TEST(AdaptBatch, SourcePresetNeverUpdates) {
    const ExperimentConfig cfg = small_config(Method::source);
    AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
    const StepResult r = state.adapt_batch(first_batch(cfg));
    EXPECT_FALSE(r.updated);
    EXPECT_TRUE(state.model() == small_source().model);
    EXPECT_EQ(state.updates(), 0u);
    EXPECT_EQ(state.step(), 1u);
}

TEST(AdaptBatch, SourcePresetMatchesOfflineFrozenAccuracy) {
    ExperimentConfig cfg = small_config(Method::source);
    cfg.corruptions = {CorruptionKind::blur};
    cfg.clean_last = false;
    const DomainStream stream = build_stream(cfg);
    AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
    const RunReport report = run_stream(state, stream, cfg.batch_size);
    const Domain& d = stream.domains[0];
    const std::size_t used = d.num_batches(cfg.batch_size) * cfg.batch_size;
    std::vector<std::size_t> idx(used);
    for (std::size_t i = 0; i < used; ++i) idx[i] = i;
    EXPECT_DOUBLE_EQ(online_accuracy(report, 0), 100.0 * frozen_accuracy(small_source().model, d.data.subset(idx)));
}

TEST(AdaptBatch, EmaLossUsesPrototypesFromBeforeTheUpdate) {
    ExperimentConfig cfg = small_config(Method::ours_only);
    cfg.severity = 1;
    cfg.e0_factor = 0.9;
    AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
    const Tensor x = first_batch(cfg);
    const TargetPrototypes before = state.target_prototypes();

    Tape tape;
    const Model& m = state.model();
    const auto vars = m.bind(tape, {});
    const ForwardResult fr = m.forward(tape, vars, tape.constant(x), ForwardMode::adapt);
    const ReliableSet rel = reliability_mask(tape.value(fr.logits), cfg.adapt_config().entropy_threshold);
    ASSERT_FALSE(rel.empty());
    const Var rf = tape.gather_rows(fr.features, rel.indices);
    const double expected = tape.scalar_value(ema_proto_loss(tape, rf, rel.pseudo_labels, before));
    TargetPrototypes after = before;
    after.ema_update(tape.value(rf), rel.pseudo_labels, cfg.alpha);
    const double with_updated = tape.scalar_value(ema_proto_loss(tape, rf, rel.pseudo_labels, after));

    const StepResult r = state.adapt_batch(x);
    EXPECT_EQ(r.losses.ema, expected);
    EXPECT_NE(r.losses.ema, with_updated);
    EXPECT_EQ(state.target_prototypes().matrix(), after.matrix());
}

TEST(AdaptBatch, EmptyReliableSetLeavesStateBitIdentical) {
    const ExperimentConfig cfg = small_config(Method::ours_only);
    AdaptConfig ac = cfg.adapt_config();
    ac.entropy_threshold = 1e-300;
    AdaptationState state(small_source().model, small_source().prototypes, ac);
    const Tensor protos = state.target_prototypes().matrix();
    const StepResult r = state.adapt_batch(first_batch(cfg));
    EXPECT_EQ(r.reliable_count, 0u);
    EXPECT_FALSE(r.updated);
    EXPECT_TRUE(state.model() == small_source().model);
    EXPECT_EQ(state.target_prototypes().matrix(), protos);
}

TEST(AdaptBatch, HeadAndSourceSnapshotNeverChange) {
    for (TrainScope scope : {TrainScope::bn_affine, TrainScope::full_extractor}) {
        ExperimentConfig cfg = small_config(Method::tent_ours);
        cfg.scope = scope;
        cfg.lr = 0.01;
        AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
        const DomainStream stream = build_stream(cfg);
        const Tensor probe = stream.domains.back().batch_inputs(0, 4);
        const Tensor frozen_before = state.source_model().predict(probe, ForwardMode::frozen).second;
        (void)run_stream(state, stream, cfg.batch_size);
        EXPECT_GT(state.updates(), 0u);
        EXPECT_EQ(state.model().head(), small_source().model.head());
        EXPECT_FALSE(state.model() == small_source().model);
        EXPECT_EQ(state.source_model().predict(probe, ForwardMode::frozen).second, frozen_before);
        for (std::size_t b = 0; b < state.model().blocks().size(); ++b) {
            EXPECT_EQ(state.model().blocks()[b].bn.running_mean, small_source().model.blocks()[b].bn.running_mean);
            if (scope == TrainScope::bn_affine)
                EXPECT_EQ(state.model().blocks()[b].weight, small_source().model.blocks()[b].weight);
        }
    }
}

TEST(AdaptBatch, StateChangesOnlyThroughOptimizerSteps) {
    const ExperimentConfig cfg = small_config(Method::tent);
    AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
    struct Recorder : StreamObserver {
        std::uint64_t last;
        std::size_t violations = 0;
        explicit Recorder(std::uint64_t h) : last(h) {}
        void on_batch(const AdaptationState& s, const StepResult& r) override {
            const std::uint64_t h = s.model().state_hash();
            if ((h != last) != r.updated) ++violations;
            last = h;
        }
    } rec(state.model().state_hash());
    (void)run_stream(state, build_stream(cfg), cfg.batch_size, &rec);
    EXPECT_EQ(rec.violations, 0u);
}

TEST(AdaptBatch, TargetPrototypeNormsStayInUnitBall) {
    const ExperimentConfig cfg = small_config(Method::tent_ours);
    AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
    struct NormCheck : StreamObserver {
        double max_norm = 0.0, min_norm = 1e9;
        void on_batch(const AdaptationState& s, const StepResult&) override {
            for (std::size_t c = 0; c < s.target_prototypes().num_classes(); ++c) {
                const double n = l2_norm(s.target_prototypes().row(c));
                max_norm = std::max(max_norm, n);
                min_norm = std::min(min_norm, n);
            }
        }
    } check;
    (void)run_stream(state, build_stream(cfg), cfg.batch_size, &check);
    EXPECT_LE(check.max_norm, 1.0 + 1e-9);
    EXPECT_GT(check.min_norm, 0.0);
}

TEST(AdaptBatch, NonFiniteLossAborts) {
    ExperimentConfig cfg = small_config(Method::tent_ours);
    cfg.scope = TrainScope::full_extractor;
    cfg.lr = 1e200;
    AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
    const DomainStream stream = build_stream(cfg);
    EXPECT_THROW((void)run_stream(state, stream, cfg.batch_size), NumericalAbort);
}

TEST(AdaptBatch, ConsistencyAndSoftLabelsRun) {
    ExperimentConfig cfg = small_config(Method::tent_ours);
    cfg.consistency = true;
    cfg.label_mode = LabelMode::soft;
    cfg.filter_entropy = true;
    AdaptationState state(small_source().model, small_source().prototypes, cfg.adapt_config());
    const StepResult r = state.adapt_batch(first_batch(cfg));
    EXPECT_GT(r.losses.cons, 0.0);
    EXPECT_TRUE(std::isfinite(r.losses.total));
}

TEST(Pipeline, ReplayGivesIdenticalSummary) {
    const ExperimentConfig cfg = small_config(Method::tent_ours);
    const auto a = run_experiment(cfg, small_source());
    const auto b = run_experiment(cfg, small_source());
    EXPECT_EQ(a.summary.dump(), b.summary.dump());
    EXPECT_EQ(report_to_json(a.report).dump(), report_to_json(b.report).dump());
}

TEST(Pipeline, SourceAndAdaptedRunsShareInputsAndLabels) {
    const auto src = run_experiment(small_config(Method::source), small_source());
    const auto ours = run_experiment(small_config(Method::ours_only), small_source());
    ASSERT_EQ(src.report.batches.size(), ours.report.batches.size());
    for (std::size_t i = 0; i < src.report.batches.size(); ++i) {
        EXPECT_EQ(src.report.batches[i].labels, ours.report.batches[i].labels);
        EXPECT_EQ(src.report.batches[i].step, ours.report.batches[i].step);
    }
    EXPECT_EQ(src.summary["source_heldout_accuracy"], ours.summary["source_heldout_accuracy"]);
    EXPECT_EQ(src.report.domains.size(), ours.report.domains.size());
}

TEST(Pipeline, SourceAccuracyFallsWithSeverity) {
    ExperimentConfig cfg;  // the default task and model
    const SourceArtifacts source = prepare_source(cfg);
    EXPECT_GE(source.heldout_accuracy, 0.90);
    cfg.method = Method::source;
    for (CorruptionKind kind : kAllCorruptions) {
        double prev = 101.0;
        for (int s = 1; s <= 5; ++s) {
            ExperimentConfig c = cfg;
            c.corruptions = {kind};
            c.severity = s;
            c.clean_last = false;
            const auto r = run_experiment(c, source);
            const double acc = r.summary["overall"]["mean_accuracy"].get<double>();
            EXPECT_LE(acc, prev + 2.0) << to_string(kind) << " severity " << s;
            prev = acc;
        }
    }
}
