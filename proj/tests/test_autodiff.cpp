#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "ctta/autodiff.hpp"
#include "ctta/random.hpp"
#include "gradcheck.hpp"

using namespace ctta;
using ctta::testing::check_gradients;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) v = rng.normal(0.0, scale);
    return t;
}

}  // namespace

TEST(ValueAndGrad, SquaredNormGradientIsTwiceParameter) {
    const Tensor p = Tensor::vector({1.5, -2.0, 0.25});
    const auto vg = value_and_grad(
        [](Tape& t, std::span<const Var> v) { return t.sum_all(t.mul(v[0], v[0])); }, std::span<const Tensor>(&p, 1));
    EXPECT_DOUBLE_EQ(vg.value, 1.5 * 1.5 + 4.0 + 0.0625);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(vg.grads[0][i], 2.0 * p[i]);
}

TEST(ValueAndGrad, EntropyOfLinearMapMatchesFiniteDifferences) {
    Rng rng(1);
    const Tensor x = random_matrix(6, 5, rng);
    const Tensor w = random_matrix(4, 5, rng);
    const auto r = check_gradients(
        [&x](Tape& t, std::span<const Var> v) {
            return t.mean_all(t.row_entropy(t.matmul_nt(t.constant(x), v[0])));
        },
        {w}, 20, 7);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(ValueAndGrad, DetachedInputGetsNoGradient) {
    const Tensor p = Tensor::vector({0.3, -0.7});
    const auto vg = value_and_grad(
        [](Tape& t, std::span<const Var> v) {
            const Var stopped = t.detach(v[0]);
            return t.add(t.sum_all(t.mul(stopped, stopped)), t.scalar(1.0));
        },
        std::span<const Tensor>(&p, 1));
    for (double g : vg.grads[0].data()) EXPECT_EQ(g, 0.0);
}

TEST(ValueAndGrad, GradientIsLinearInTheLoss) {
    Rng rng(2);
    const Tensor a = random_matrix(3, 4, rng);
    const Tensor w = random_matrix(5, 4, rng);
    auto l1 = [&](Tape& t, std::span<const Var> v) { return t.mean_all(t.row_entropy(t.matmul_nt(t.constant(a), v[0]))); };
    auto l2 = [&](Tape& t, std::span<const Var> v) { return t.sum_all(t.mul(v[0], v[0])); };
    const auto g1 = value_and_grad(l1, std::span<const Tensor>(&w, 1));
    const auto g2 = value_and_grad(l2, std::span<const Tensor>(&w, 1));
    const auto g12 = value_and_grad([&](Tape& t, std::span<const Var> v) { return t.add(l1(t, v), l2(t, v)); },
                                    std::span<const Tensor>(&w, 1));
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(g12.grads[0][i], g1.grads[0][i] + g2.grads[0][i], 1e-12);
}

TEST(Primitives, BatchNormMatchesFiniteDifferences) {
    Rng rng(3);
    const Tensor x0 = random_matrix(7, 5, rng, 2.0);
    const Tensor gamma = random_matrix(1, 5, rng);
    const Tensor beta = random_matrix(1, 5, rng);
    const Tensor target = random_matrix(7, 5, rng);
    const auto r = check_gradients(
        [&target](Tape& t, std::span<const Var> v) {
            const Var y = t.relu(t.batch_norm(v[0], v[1], v[2], 1e-5));
            return t.mean_all(t.row_sum_squares(t.sub(y, t.constant(target))));
        },
        {x0, gamma, beta}, 35, 9);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Primitives, FixedNormMatchesFiniteDifferences) {
    Rng rng(4);
    const Tensor x0 = random_matrix(3, 4, rng);
    const Tensor gamma = random_matrix(1, 4, rng);
    const Tensor beta = random_matrix(1, 4, rng);
    const std::vector<double> mean{0.1, -0.2, 0.3, 0.0}, var{1.5, 0.5, 2.0, 1.0};
    const auto r = check_gradients(
        [&](Tape& t, std::span<const Var> v) {
            return t.sum_all(t.mul(t.fixed_norm(v[0], v[1], v[2], mean, var, 1e-5), t.constant(x0)));
        },
        {x0, gamma, beta}, 12, 10);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Primitives, SoftmaxAndGatherChainMatchesFiniteDifferences) {
    Rng rng(5);
    const Tensor z = random_matrix(6, 4, rng);
    const Tensor w = random_matrix(6, 4, rng);
    const auto r = check_gradients(
        [](Tape& t, std::span<const Var> v) {
            const Var p = t.softmax_rows(v[0]);
            const Var lq = t.log_softmax_rows(t.gather_rows(v[1], {0, 2, 4, 1, 3, 5}));
            const Var picked = t.pick_columns(lq, {0, 1, 2, 3, 0, 1});
            return t.add(t.mean_all(t.row_dot(p, lq)), t.scale(t.sum_all(picked), 0.5));
        },
        {z, w}, 24, 11);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Tape, BackwardRequiresScalarRoot) {
    Tape t;
    const Var p = t.parameter(Tensor::matrix(2, 2, 1.0));
    EXPECT_THROW(t.backward(p), std::invalid_argument);
}

TEST(Tape, GradBeforeBackwardIsAnError) {
    Tape t;
    const Var p = t.parameter(Tensor::matrix(1, 1, 1.0));
    EXPECT_THROW(t.grad(p), std::logic_error);
}

TEST(Tape, VariablesFromAnotherTapeAreRejected) {
    Tape a, b;
    const Var p = a.parameter(Tensor::matrix(1, 1, 1.0));
    EXPECT_THROW(b.value(p), std::invalid_argument);
}

TEST(Tape, ConstantsDoNotRequireGradient) {
    Tape t;
    const Var c = t.constant(Tensor::matrix(2, 2, 1.0));
    EXPECT_FALSE(t.requires_grad(t.mean_all(c)));
    const Var p = t.parameter(Tensor::matrix(2, 2, 1.0));
    EXPECT_TRUE(t.requires_grad(t.mean_all(t.add(c, p))));
}
