#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ctta/metrics.hpp"
#include "ctta/random.hpp"
#include "oracles.hpp"

using namespace ctta;
using namespace ctta::testing;

namespace {

struct RandomRecords {
    std::vector<double> confidences;
    std::vector<std::uint8_t> correct;
    std::vector<std::size_t> predictions;
    std::vector<std::size_t> labels;
    Tensor features;
};

RandomRecords random_records(std::size_t n, std::size_t classes, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    RandomRecords r;
    r.features = Tensor::matrix(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        // Some confidences sit exactly on bin edges.
        const double c = rng.below(10) == 0 ? static_cast<double>(1 + rng.below(20)) / 20.0 : rng.uniform(0.1, 1.0);
        r.confidences.push_back(c);
        r.correct.push_back(rng.uniform() < c ? 1 : 0);
        r.predictions.push_back(rng.below(classes) < classes / 2 ? rng.below(2) : rng.below(classes));
        r.labels.push_back(rng.below(classes));
        for (double& v : r.features.row(i)) v = rng.normal(static_cast<double>(r.labels[i]) * 0.3, 1.0);
    }
    return r;
}

RunReport two_domain_report() {
    RunReport r;
    r.num_classes = 3;
    r.domains = {{0, "gaussian-noise-5", {}, {}}, {1, "clean", {}, {}}};
    BatchRecord a;
    a.step = 0;
    a.domain = 0;
    a.predictions = {0, 1, 2, 0};
    a.labels = {0, 1, 1, 1};
    a.confidences = {0.9, 0.6, 0.5, 0.3};
    a.entropies = {0.2, 0.8, 0.9, 1.0};
    a.losses = {1.5, 1.0, 0.25, 0.0125, 0.0};
    a.reliable_count = 2;
    BatchRecord b = a;
    b.step = 1;
    b.domain = 1;
    b.predictions = {1, 1, 2, 0};
    b.labels = {1, 1, 2, 0};
    r.batches = {a, b};
    return r;
}

}  // namespace

TEST(Calibration, BinEdges) {
    EXPECT_EQ(calibration_bin(0.0, 20), 0u);
    EXPECT_EQ(calibration_bin(0.05, 20), 0u);
    EXPECT_EQ(calibration_bin(0.050001, 20), 1u);
    EXPECT_EQ(calibration_bin(0.5, 20), 9u);
    EXPECT_EQ(calibration_bin(1.0, 20), 19u);
}

TEST(Calibration, PerfectlyCalibratedIsZero) {
    const std::vector<double> conf{0.25, 0.25, 0.25, 0.25};
    const std::vector<std::uint8_t> ok{1, 0, 0, 0};
    EXPECT_NEAR(calibration(conf, ok, {}).ece, 0.0, 1e-15);
}

TEST(Calibration, MatchesBruteForceOnRandomRecords) {
    const auto r = random_records(1000, 10, 4, 1);
    const auto got = calibration(r.confidences, r.correct, {});
    EXPECT_NEAR(got.ece, brute_force_ece(r.confidences, r.correct, 20), 1e-10);
    std::size_t total = 0;
    for (const auto& b : got.bins) total += b.count;
    EXPECT_EQ(total, 1000u);
}

TEST(Bias, UniformIsZeroAndSingleClassIsLogC) {
    EXPECT_NEAR(class_prediction_histogram(std::vector<std::size_t>{0, 1, 2, 3}, 4).bias, 0.0, 1e-15);
    EXPECT_NEAR(class_prediction_histogram(std::vector<std::size_t>{2, 2, 2}, 4).bias, std::log(4.0), 1e-15);
}

TEST(Bias, MatchesBruteForceOnRandomRecords) {
    const auto r = random_records(1000, 10, 4, 2);
    EXPECT_NEAR(class_prediction_histogram(r.predictions, 10).bias, brute_force_bias(r.predictions, 10), 1e-10);
}

TEST(Geometry, MatchesPairwiseOracleOnRandomRecords) {
    const auto r = random_records(1000, 10, 8, 3);
    Rng rng(4);
    Tensor source = Tensor::matrix(10, 8);
    for (double& v : source.data()) v = rng.normal();
    const GeometryResult g = feature_geometry(r.features, r.labels, source);
    const BruteGeometry o = brute_force_geometry(r.features, r.labels, source, 10);
    EXPECT_NEAR(g.gap, o.gap, 1e-10);
    EXPECT_NEAR(g.d_intra, o.d_intra, 1e-10);
    EXPECT_NEAR(g.d_inter, o.d_inter, 1e-10);
    EXPECT_NEAR(g.ratio, o.ratio, 1e-10);
}

TEST(Geometry, AbsentClassesAreSkipped) {
    const Tensor f = Tensor::from_rows({{0, 0}, {2, 0}, {0, 4}});
    const std::vector<std::size_t> y{0, 0, 2};
    const Tensor source = Tensor::from_rows({{1, 0}, {9, 9}, {0, 4}});
    const auto g = feature_geometry(f, y, source);
    EXPECT_EQ(g.skipped_classes, std::vector<std::size_t>{1});
    EXPECT_DOUBLE_EQ(g.gap, 0.0);
    EXPECT_DOUBLE_EQ(g.d_intra, 0.5);
    EXPECT_DOUBLE_EQ(g.d_inter, 17.0);
}

TEST(Similarity, IdenticalPrototypesGiveOne) {
    const Tensor p = Tensor::from_rows({{1, 2}, {0, 0}, {3, -1}});
    const auto s = prototype_similarity(p, p, p);
    EXPECT_NEAR(s.to_source, 1.0, 1e-12);
    EXPECT_EQ(s.skipped_classes, std::vector<std::size_t>{1});
}

TEST(Report, AccuracyPerDomainAndSummary) {
    const RunReport r = two_domain_report();
    EXPECT_DOUBLE_EQ(online_accuracy(r, 0), 50.0);
    EXPECT_DOUBLE_EQ(online_accuracy(r, 1), 100.0);
    const auto s = summarize(r);
    EXPECT_EQ(s["format"], "ctta-summary/1");
    EXPECT_DOUBLE_EQ(s["overall"]["mean_accuracy"].get<double>(), 75.0);
    EXPECT_DOUBLE_EQ(s["overall"]["pooled_accuracy"].get<double>(), 75.0);
    EXPECT_DOUBLE_EQ(s["domains"][0]["reliable_fraction"].get<double>(), 0.5);
    EXPECT_DOUBLE_EQ(s["domains"][1]["mean_losses"]["src"].get<double>(), 0.0125);
}

TEST(Report, JsonRoundTripPreservesEverything) {
    RunReport r = two_domain_report();
    r.domains[0].geometry = {1.0, 2.0, 3.0, std::numeric_limits<double>::quiet_NaN(), {2}};
    const auto j = report_to_json(r);
    const RunReport back = report_from_json(j);
    EXPECT_EQ(report_to_json(back).dump(), j.dump());
    EXPECT_TRUE(std::isnan(back.domains[0].geometry.ratio));
    EXPECT_EQ(summarize(back).dump(), summarize(r).dump());
}

TEST(Report, BuilderComputesGeometryAndDropsFeatures) {
    ReportBuilder builder(2, Tensor::from_rows({{0, 0}, {1, 1}}));
    builder.begin_domain(0, "clean");
    BatchRecord rec;
    rec.predictions = {0, 1};
    rec.labels = {0, 1};
    rec.confidences = {0.9, 0.8};
    rec.entropies = {0.1, 0.2};
    builder.add_batch(rec, Tensor::from_rows({{0, 0}, {1, 1}}));
    builder.end_domain(Tensor::from_rows({{1, 0}, {1, 1}}));
    EXPECT_EQ(builder.last_target_gt(), Tensor::from_rows({{0, 0}, {1, 1}}));
    const RunReport r = builder.take();
    ASSERT_EQ(r.domains.size(), 1u);
    EXPECT_DOUBLE_EQ(r.domains[0].geometry.gap, 0.0);
    EXPECT_NEAR(r.domains[0].similarity.to_source, 1.0, 1e-12);
    EXPECT_THROW(builder.add_batch(rec, Tensor::matrix(2, 2)), std::logic_error);
}

TEST(Csv, MetricsColumns) {
    std::ostringstream os;
    write_metrics_csv(os, two_domain_report());
    std::istringstream is(os.str());
    std::string header, first;
    std::getline(is, header);
    std::getline(is, first);
    EXPECT_EQ(header,
              "step,domain,domain_name,accuracy,mean_entropy,loss_total,loss_unsup,loss_ema,loss_src,loss_cons,"
              "reliable_count");
    EXPECT_EQ(first, "0,0,gaussian-noise-5,50,0.72499999999999998,1.5,1,0.25,0.012500000000000001,0,2");
}

TEST(Csv, CalibrationHasOneRowPerBin) {
    std::ostringstream os;
    write_calibration_csv(os, calibration(two_domain_report()));
    std::size_t lines = 0;
    for (char c : os.str()) lines += c == '\n';
    EXPECT_EQ(lines, 21u);
    EXPECT_EQ(os.str().substr(0, 45), "bin,count,mean_confidence,accuracy,mean_entro");
}
