#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "ctta/streams.hpp"

using namespace ctta;

namespace {

double mean_squared_deviation(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

std::uint32_t get_u32(const std::string& s, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
    return v;
}

double get_f64(const std::string& s, std::size_t off) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace

TEST(SourceDataset, SameSeedSameHash) {
    const SyntheticTask task;
    EXPECT_EQ(content_hash(make_source_dataset(task, 5, 3).inputs), content_hash(make_source_dataset(task, 5, 3).inputs));
    EXPECT_NE(content_hash(make_source_dataset(task, 5, 3).inputs), content_hash(make_source_dataset(task, 5, 4).inputs));
}

TEST(SourceDataset, OnePerClassAndBalanced) {
    const SyntheticTask task;
    const auto one = make_source_dataset(task, 1, 0);
    EXPECT_EQ(one.size(), task.num_classes);
    const auto many = make_source_dataset(task, 7, 0);
    std::vector<std::size_t> counts(task.num_classes, 0);
    for (std::size_t y : many.labels) ++counts[y];
    for (std::size_t c : counts) EXPECT_EQ(c, 7u);
    for (double v : many.inputs.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(SourceDataset, ParitySplitIsDisjointAndComplete) {
    const auto data = make_source_dataset(SyntheticTask{}, 3, 1);
    const auto split = split_by_parity(data);
    EXPECT_EQ(split.train.size() + split.heldout.size(), data.size());
    for (std::size_t i = 0; i < split.train.size(); ++i) {
        EXPECT_EQ(split.train.labels[i], data.labels[2 * i]);
        EXPECT_TRUE(std::equal(split.train.inputs.row(i).begin(), split.train.inputs.row(i).end(),
                               data.inputs.row(2 * i).begin()));
    }
    for (std::size_t i = 0; i < split.heldout.size(); ++i) EXPECT_EQ(split.heldout.labels[i], data.labels[2 * i + 1]);
}

TEST(Corrupt, SeverityZeroIsIdentity) {
    const auto data = make_source_dataset(SyntheticTask{}, 1, 2);
    const auto img = data.inputs.row(0);
    for (CorruptionKind k : kAllCorruptions) {
        const auto out = corrupt(img, {k, 0}, 9);
        EXPECT_TRUE(std::equal(out.begin(), out.end(), img.begin())) << to_string(k);
    }
}

TEST(Corrupt, NoiseIsSeedDeterministicAndClipped) {
    const auto img = make_source_dataset(SyntheticTask{}, 1, 2).inputs.row(3);
    for (CorruptionKind k : {CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise}) {
        EXPECT_EQ(corrupt(img, {k, 5}, 1), corrupt(img, {k, 5}, 1));
        EXPECT_NE(corrupt(img, {k, 5}, 1), corrupt(img, {k, 5}, 2));
        for (double v : corrupt(img, {k, 5}, 1)) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Corrupt, ContrastKeepsConstantImageConstant) {
    const std::vector<double> flat(256, 0.37);
    const auto out = corrupt(flat, {CorruptionKind::contrast, 5}, 0);
    for (double v : out) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(Corrupt, GaussianNoiseVarianceMatchesSigma) {
    // Mid-grey image so that clipping at [0, 1] is negligible at these severities.
    for (int s : {1, 2}) {
        const double sigma = 0.08 * s;
        double sum = 0.0, sum_sq = 0.0;
        std::size_t n = 0;
        for (std::uint64_t seed = 0; n < 10000; ++seed) {
            const std::vector<double> grey(256, 0.5);
            const auto out = corrupt(grey, {CorruptionKind::gaussian_noise, s}, seed);
            for (double v : out) {
                const double d2 = (v - 0.5) * (v - 0.5);
                sum += d2;
                sum_sq += d2 * d2;
                ++n;
            }
        }
        const double msd = sum / static_cast<double>(n);
        const double se = std::sqrt((sum_sq / static_cast<double>(n) - msd * msd) / static_cast<double>(n));
        EXPECT_NEAR(msd, sigma * sigma, 3.0 * se) << "severity " << s;
    }
}

TEST(Corrupt, DistortionGrowsWithSeverity) {
    const auto data = make_source_dataset(SyntheticTask{}, 20, 5);
    for (CorruptionKind k : kAllCorruptions) {
        double prev = 0.0;
        for (int s = 1; s <= 5; ++s) {
            double msd = 0.0;
            for (std::size_t i = 0; i < data.size(); ++i)
                msd += mean_squared_deviation(corrupt(data.inputs.row(i), {k, s}, 100 + i), data.inputs.row(i));
            msd /= static_cast<double>(data.size());
            EXPECT_GT(msd, prev) << to_string(k) << " severity " << s;
            prev = msd;
        }
    }
}

TEST(Corrupt, RejectsBadSeverity) {
    const std::vector<double> img(256, 0.5);
    EXPECT_THROW(corrupt(img, {CorruptionKind::blur, 6}, 0), std::invalid_argument);
    EXPECT_THROW(corrupt(img, {CorruptionKind::blur, -1}, 0), std::invalid_argument);
    EXPECT_THROW(parse_corruption_kind("fog"), std::invalid_argument);
    EXPECT_EQ(parse_corruption_kind("pixelate"), CorruptionKind::pixelate);
}

TEST(DomainSequence, FiveKindsPlusClean) {
    const auto seq = make_domain_sequence(kAllCorruptions, 5, DomainOrder::fixed, 0);
    ASSERT_EQ(seq.size(), 6u);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(seq[i].corruption->kind, kAllCorruptions[i]);
    EXPECT_EQ(seq.back().name(), "clean");
}

TEST(DomainSequence, ShuffleIsSeededAndKeepsCleanLast) {
    const auto a = make_domain_sequence(kAllCorruptions, 5, DomainOrder::shuffled, 7);
    const auto b = make_domain_sequence(kAllCorruptions, 5, DomainOrder::shuffled, 7);
    std::set<std::vector<std::string>> orders;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = make_domain_sequence(kAllCorruptions, 5, DomainOrder::shuffled, seed);
        EXPECT_EQ(s.back().name(), "clean");
        std::vector<std::string> names;
        for (const auto& d : s) names.push_back(d.name());
        orders.insert(names);
    }
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].name(), b[i].name());
    EXPECT_GT(orders.size(), 1u);
}

TEST(DomainStream, ContentDependsOnlyOnSpec) {
    const SyntheticTask task;
    const auto fixed = make_domain_sequence(kAllCorruptions, 3, DomainOrder::fixed, 0);
    const auto shuffled = make_domain_sequence(kAllCorruptions, 3, DomainOrder::shuffled, 5);
    const auto s1 = make_stream(task, fixed, 20, 11);
    const auto s2 = make_stream(task, shuffled, 20, 11);
    for (const Domain& d : s2.domains) {
        const auto it = std::find_if(s1.domains.begin(), s1.domains.end(),
                                     [&](const Domain& o) { return o.spec.name() == d.spec.name(); });
        ASSERT_NE(it, s1.domains.end());
        EXPECT_EQ(it->data.inputs, d.data.inputs);
        EXPECT_EQ(it->data.labels, d.data.labels);
    }
}

TEST(DomainStream, BatchesDropTheRemainder) {
    const auto seq = make_domain_sequence(std::vector<CorruptionKind>{CorruptionKind::blur}, 2, DomainOrder::fixed, 0);
    const auto s = make_stream(SyntheticTask{}, seq, 2000, 1);
    EXPECT_EQ(s.domains[0].num_batches(64), 31u);
    EXPECT_EQ(s.domains[0].batch_labels(30, 64).size(), 64u);
    EXPECT_EQ(s.domains[0].batch_inputs(1, 64).rows(), 64u);
}

TEST(DatasetDump, LayoutMatchesDocumentation) {
    const auto seq = make_domain_sequence(std::vector<CorruptionKind>{CorruptionKind::contrast}, 4, DomainOrder::fixed, 0);
    const auto s = make_stream(SyntheticTask{}, seq, 3, 2);
    std::ostringstream os;
    write_dataset_dump(os, s, 16);
    const std::string bytes = os.str();
    const std::size_t record = 8 * 256 + 8;
    ASSERT_EQ(bytes.size(), 24 + 6 * record);
    EXPECT_EQ(bytes.substr(0, 8), "CTTADS01");
    EXPECT_EQ(get_u32(bytes, 8), 6u);
    EXPECT_EQ(get_u32(bytes, 12), 16u);
    EXPECT_EQ(get_u32(bytes, 16), 16u);
    EXPECT_EQ(get_u32(bytes, 20), 0u);
    for (std::size_t r = 0; r < 6; ++r) {
        const std::size_t off = 24 + r * record;
        const Domain& d = s.domains[r / 3];
        EXPECT_EQ(get_f64(bytes, off + 8 * 17), d.data.inputs.row(r % 3)[17]);
        EXPECT_EQ(get_u32(bytes, off + 8 * 256), d.data.labels[r % 3]);
        EXPECT_EQ(get_u32(bytes, off + 8 * 256 + 4), r / 3);
    }
}

TEST(StrongAugment, CutoutZerosASquare) {
    const Tensor batch = Tensor::matrix(2, 256, 0.5);
    Rng rng(3);
    StrongAugment aug;
    aug.noise_sigma = 0.0;
    const Tensor out = aug(batch, rng);
    for (std::size_t r = 0; r < 2; ++r) {
        const auto zeros = std::count(out.row(r).begin(), out.row(r).end(), 0.0);
        EXPECT_EQ(zeros, 16);
    }
}
